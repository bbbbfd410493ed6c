// vegcast: generate synthetic minicubes, train the ConvLSTM forecaster,
// predict, evaluate and compare runs.
//
// Exit codes: 1 for bad arguments or configuration, 2 for data and format
// errors, 0 otherwise.

#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "vegcast/vegcast.hpp"

namespace fs = std::filesystem;
using namespace vegcast;

namespace {

struct ArgumentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::size_t threads = 0;  // 0: take the config value
  bool ablate_weather = false;

  std::string manifest;
  std::string out;
  std::size_t count = 0;
  std::size_t first_index = 0;

  std::string ckpt;
  std::string cube;
  std::string baseline;
  std::string name;
  std::string log;

  std::vector<std::string> summaries;
};

RunConfig run_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? parse_config("") : load_config(o.config);
  if (o.threads) cfg.forecast.threads = o.threads;
  if (o.ablate_weather) cfg.forecast.ablate_weather = true;
  return cfg;
}

std::string joined_args(int argc, char** argv) {
  std::string s;
  for (int i = 1; i < argc; ++i) {
    if (i > 1) s += ' ';
    s += argv[i];
  }
  return s;
}

void write_meta(const fs::path& dir, const std::string& command, const std::string& args, const RunConfig& cfg) {
  fs::create_directories(dir);
  std::ofstream out(dir / "run.meta", std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot write " + (dir / "run.meta").string());
  out << "version=" << VEGCAST_VERSION << '\n'
      << "command=" << command << '\n'
      << "args=" << args << '\n'
      << "seed=" << cfg.forecast.seed << '\n'
      << "data_seed=" << cfg.generator.seed << '\n'
      << "threads=" << cfg.forecast.threads << '\n'
      << "# config\n"
      << to_text(cfg);
}

fs::path parent_or_cwd(const fs::path& p) { return p.has_parent_path() ? p.parent_path() : fs::path("."); }

BaselineKind baseline_kind(const std::string& name) {
  if (name == "constant") return BaselineKind::constant;
  if (name == "previous-season") return BaselineKind::previous_season;
  throw ArgumentError("unknown baseline '" + name + "' (expected constant or previous-season)");
}

/// Baselines run on the geometry stored in the cube; only the seasonal lag
/// comes from the config.
ForecastConfig baseline_config(const Minicube& cube, const RunConfig& run) {
  ForecastConfig cfg = run.forecast;
  cfg.n = cube.n;
  cfg.k = cube.k;
  cfg.height = cube.height();
  cfg.width = cube.width();
  return cfg;
}

std::string two_digits(std::size_t j) {
  std::ostringstream os;
  os << std::setw(2) << std::setfill('0') << j;
  return os.str();
}

int cmd_generate(const Options& o, const std::string& args) {
  const RunConfig cfg = run_config(o);
  const fs::path manifest = generate_dataset(cfg.generator, o.count, o.out, o.first_index);
  write_meta(o.out, "generate", args, cfg);
  std::cout << "wrote " << o.count << " cubes, manifest " << manifest.string() << '\n';
  return 0;
}

int cmd_train(const Options& o, const std::string& args) {
  const RunConfig cfg = run_config(o);
  const fs::path ckpt = o.out;
  fs::create_directories(parent_or_cwd(ckpt));
  fs::path log_path = o.log.empty() ? fs::path(ckpt).replace_extension(".trainlog.csv") : fs::path(o.log);
  write_meta(parent_or_cwd(ckpt), "train", args, cfg);
  TrainOptions opts;
  opts.checkpoint = ckpt;
  opts.on_epoch = [&](const EpochRecord& e) {
    std::cout << "epoch " << e.epoch << '/' << cfg.forecast.epochs << " train_loss=" << e.train_loss
              << " val_rmse=" << e.val_rmse << " (" << std::fixed << std::setprecision(1) << e.seconds << "s)"
              << std::defaultfloat << std::setprecision(6) << std::endl;
  };
  const TrainResult result = train(fs::path(o.manifest), cfg.forecast, opts);
  save_checkpoint(result.params, ckpt);
  result.log.write_csv(log_path);
  std::cout << "best epoch " << result.log.best_epoch << ", checkpoint " << ckpt.string() << ", log "
            << log_path.string() << '\n';
  return 0;
}

int cmd_predict(const Options& o, const std::string& args) {
  const RunConfig run = run_config(o);
  const Minicube cube = load_minicube(o.cube);
  ForecastConfig cfg;
  Tensor frames;
  if (!o.baseline.empty()) {
    cfg = baseline_config(cube, run);
    frames = run_baseline(baseline_kind(o.baseline), cube, cfg).frames;
  } else {
    const auto params = load_checkpoint(o.ckpt);
    cfg = config_for(params.dims, run.forecast.ablate_weather);
    frames = predict(cube, params, cfg);
  }
  const fs::path dir = o.out;
  fs::create_directories(dir);
  io::write_file(dir / "prediction.mcp", encode_prediction(frames));
  const std::size_t h = cube.height(), w = cube.width(), hw = cube.pixels();
  for (std::size_t j = 0; j < cfg.k; ++j) {
    const auto pred = frames.slab(j);
    const auto target = cube.ndvi.slab(cfg.n + j);
    const std::span<const std::uint8_t> mask(cube.mask.data() + (cfg.n + j) * hw, hw);
    write_pgm(dir / ("pred_" + two_digits(j) + ".pgm"), ndvi_gray(pred), w, h);
    write_pgm(dir / ("target_" + two_digits(j) + ".pgm"), ndvi_gray(target), w, h);
    write_pgm(dir / ("error_" + two_digits(j) + ".pgm"), error_map_gray(error_map(pred, target, mask, h, w)), w, h);
  }
  write_meta(dir, "predict", args, run);
  std::cout << "wrote " << cfg.k << " frames to " << dir.string() << '\n';
  return 0;
}

std::vector<CubeEvaluation> evaluate_parallel(const std::vector<Minicube>& cubes, std::size_t threads,
                                              const std::function<CubeEvaluation(const Minicube&)>& score) {
  std::vector<CubeEvaluation> out(cubes.size());
  std::vector<std::exception_ptr> errors(cubes.size());
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < cubes.size(); i += stride) {
      try {
        out[i] = score(cubes[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, cubes.size()));
  {
    std::vector<std::jthread> workers;
    for (std::size_t t = 1; t < n; ++t) workers.emplace_back(work, t, n);
    work(0, n);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

void write_ecdf_files(const fs::path& dir, std::span<const CubeEvaluation> evals) {
  std::vector<double> rmse, nrmse, nse;
  for (const auto& p : pool_pixels(filter_cubes(evals, AggregateOptions{}.mask_threshold))) {
    rmse.push_back(p.rmse);
    if (p.excluded) continue;
    nrmse.push_back(p.nrmse);
    nse.push_back(p.nse);
  }
  auto emit = [&](const char* metric, const std::vector<double>& v) {
    if (!v.empty()) write_ecdf_csv(dir / (std::string("ecdf_") + metric + ".csv"), metric, ecdf(v));
  };
  emit("rmse", rmse);
  emit("nrmse", nrmse);
  emit("nse", nse);
}

int cmd_evaluate(const Options& o, const std::string& args) {
  const RunConfig run = run_config(o);
  const auto cubes = load_manifest_cubes(o.manifest);
  std::string name = o.name;
  std::vector<CubeEvaluation> evals;
  if (!o.baseline.empty()) {
    const BaselineKind kind = baseline_kind(o.baseline);
    if (name.empty()) name = kind == BaselineKind::constant ? "constant" : "previous_season";
    evals = evaluate_parallel(cubes, run.forecast.threads, [&](const Minicube& c) {
      const ForecastConfig cfg = baseline_config(c, run);
      const auto f = run_baseline(kind, c, cfg);
      return evaluate_forecast(c, f.frames, cfg, f.excluded);
    });
  } else {
    const auto params = load_checkpoint(o.ckpt);
    const ForecastConfig cfg = config_for(params.dims, run.forecast.ablate_weather);
    if (name.empty()) name = cfg.ablate_weather ? "convlstm_noweather" : "convlstm";
    evals = evaluate_parallel(cubes, run.forecast.threads,
                              [&](const Minicube& c) { return evaluate_forecast(c, predict(c, params, cfg), cfg); });
  }
  const fs::path dir = o.out;
  fs::create_directories(dir);
  const Summary family = aggregate(name, evals);
  const Summary rmse_trim = aggregate(name, evals, {}, TrimRanking::by_rmse);
  write_summary_csv(dir / "summary.csv", std::span(&family, 1));
  write_summary_csv(dir / "summary_rmse_trim.csv", std::span(&rmse_trim, 1));
  write_ecdf_files(dir, evals);
  write_pixels_csv(dir / "pixels.csv", name, evals);
  write_meta(dir, "evaluate", args, run);
  std::cout << summary_header << '\n' << format_summary_row(family) << '\n';
  return 0;
}

int cmd_report(const Options& o, const std::string& args) {
  std::vector<Summary> rows;
  for (const auto& path : o.summaries) {
    for (auto& row : read_summary_csv(path)) rows.push_back(std::move(row));
  }
  const fs::path out = o.out.empty() ? fs::path("comparison.csv") : fs::path(o.out);
  fs::create_directories(parent_or_cwd(out));
  write_summary_csv(out, rows);
  write_meta(parent_or_cwd(out), "report", args, run_config(o));

  std::cout << std::left << std::setw(22) << "model" << std::right;
  for (const char* h : {"rmse", "nse", "alpha", "beta", "r", "n_pixels"}) std::cout << std::setw(11) << h;
  std::cout << '\n' << std::fixed << std::setprecision(4);
  for (const auto& s : rows) {
    std::cout << std::left << std::setw(22) << s.model << std::right << std::setw(11) << s.rmse << std::setw(11)
              << s.nse << std::setw(11) << s.alpha << std::setw(11) << s.beta << std::setw(11) << s.r
              << std::setw(11) << s.n_pixels << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vegetation forecasting on synthetic minicubes", "vegcast"};
  app.set_version_flag("--version", std::string(VEGCAST_VERSION));
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key=value run configuration")->check(CLI::ExistingFile);
    sub->add_option("--threads", o.threads, "worker threads (1 is bit-reproducible)")->check(CLI::PositiveNumber);
  };

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset and its manifest");
  common(gen);
  gen->add_option("--count", o.count, "number of cubes")->required()->check(CLI::PositiveNumber);
  gen->add_option("--out", o.out, "output directory")->required();
  gen->add_option("--first-index", o.first_index, "sample index of the first cube");

  auto* tr = app.add_subcommand("train", "train the forecaster on a manifest");
  common(tr);
  tr->add_option("--manifest", o.manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", o.out, "checkpoint path")->required();
  tr->add_option("--log", o.log, "training log CSV (default: <out>.trainlog.csv)");
  tr->add_flag("--ablate-weather", o.ablate_weather, "replace the weather drivers by zeros");

  auto* pr = app.add_subcommand("predict", "forecast one cube");
  common(pr);
  auto* pr_ckpt = pr->add_option("--ckpt", o.ckpt, "checkpoint")->check(CLI::ExistingFile);
  auto* pr_base = pr->add_option("--baseline", o.baseline, "constant | previous-season");
  pr_ckpt->excludes(pr_base);
  pr->add_option("--cube", o.cube, "minicube file")->required()->check(CLI::ExistingFile);
  pr->add_option("--out", o.out, "output directory")->required();
  pr->add_flag("--ablate-weather", o.ablate_weather, "replace the weather drivers by zeros");

  auto* ev = app.add_subcommand("evaluate", "score a model or baseline on a manifest");
  common(ev);
  auto* ev_ckpt = ev->add_option("--ckpt", o.ckpt, "checkpoint")->check(CLI::ExistingFile);
  auto* ev_base = ev->add_option("--baseline", o.baseline, "constant | previous-season");
  ev_ckpt->excludes(ev_base);
  ev->add_option("--manifest", o.manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", o.out, "output directory")->default_val(".");
  ev->add_option("--name", o.name, "model name in the summary");
  ev->add_flag("--ablate-weather", o.ablate_weather, "replace the weather drivers by zeros");

  auto* rep = app.add_subcommand("report", "merge summary CSVs into one table");
  rep->add_option("--summaries", o.summaries, "summary CSV files")->required()->check(CLI::ExistingFile);
  rep->add_option("--out", o.out, "merged CSV (default: comparison.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "vegcast: " << e.what() << '\n';
    return 1;
  }

  const std::string args = joined_args(argc, argv);
  try {
    if (*gen) return cmd_generate(o, args);
    if (*tr) return cmd_train(o, args);
    if (*pr) {
      if (o.ckpt.empty() == o.baseline.empty()) throw ArgumentError("predict needs exactly one of --ckpt or --baseline");
      return cmd_predict(o, args);
    }
    if (*ev) {
      if (o.ckpt.empty() == o.baseline.empty()) throw ArgumentError("evaluate needs exactly one of --ckpt or --baseline");
      return cmd_evaluate(o, args);
    }
    return cmd_report(o, args);
  } catch (const ArgumentError& e) {
    std::cerr << "vegcast: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    std::cerr << "vegcast: " << e.what() << '\n';
    return e.code() == ErrorCode::config ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "vegcast: " << e.what() << '\n';
    return 2;
  }
}
