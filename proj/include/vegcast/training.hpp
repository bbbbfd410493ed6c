#pragma once

// Masked-L2 training of the encoder-forecaster with Adam. Supervision covers
// the horizon only, and only entries whose mask is valid.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "vegcast/binary_io.hpp"
#include "vegcast/error.hpp"
#include "vegcast/minicube.hpp"
#include "vegcast/model.hpp"
#include "vegcast/tensor.hpp"

namespace vegcast {

template <class T>
struct MaskedLoss {
  BasicVar<T> value;
  std::size_t valid_count = 0;
  bool skipped = false;  ///< no valid entries; value is a constant 0
};

/// Mean of squared differences over entries with mask != 0. Masked target
/// entries are never read.
template <class T>
MaskedLoss<T> masked_l2_loss(BasicVar<T> pred, const BasicTensor<T>& target, std::span<const std::uint8_t> mask) {
  if (pred.shape() != target.shape() || mask.size() != target.size()) {
    throw Error(ErrorCode::shape_mismatch, "masked_l2_loss: pred " + shape_string(pred.shape()) + ", target " +
                                               shape_string(target.shape()) + ", mask " + std::to_string(mask.size()));
  }
  BasicTape<T>& tape = *pred.tape;
  const std::size_t count = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
  if (count == 0) return {tape.constant(BasicTensor<T>::scalar(T{0})), 0, true};
  const BasicTensor<T>& p = pred.value();
  auto diff = std::make_shared<std::vector<T>>(p.size(), T{0});
  T total{0};
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!mask[i]) continue;
    (*diff)[i] = p[i] - target[i];
    total += (*diff)[i] * (*diff)[i];
  }
  const T inv = T{1} / static_cast<T>(count);
  auto loss = tape.record(BasicTensor<T>::scalar(total * inv), {pred},
                          [pred, diff, inv](BasicTape<T>& t, std::span<const T> g) {
                            std::span<T> gp = t.grad_buffer(pred);
                            const T s = T{2} * inv * g[0];
                            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += s * (*diff)[i];
                          });
  return {loss, count, false};
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update. Moments are lazily zero-initialised on
/// the first call.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
                      const AdamOptions& opt) {
  if (params.size() != grads.size()) throw Error(ErrorCode::shape_mismatch, "adam: parameter/gradient count differs");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw Error(ErrorCode::shape_mismatch, "adam: state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() || state.m[i].shape() != grads[i].shape()) {
      throw Error(ErrorCode::shape_mismatch, "adam: shape mismatch for parameter " + std::to_string(i));
    }
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      if (!std::isfinite(grads[i][j])) {
        throw Error(ErrorCode::non_finite, "adam: gradient of parameter " + std::to_string(i) + " element " +
                                               std::to_string(j) + " is " + std::to_string(grads[i][j]));
      }
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i][j];
      const double mj = opt.beta1 * m[j] + (1.0 - opt.beta1) * g;
      const double vj = opt.beta2 * v[j] + (1.0 - opt.beta2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = opt.lr * (mj / bc1) / (std::sqrt(vj / bc2) + opt.eps);
      p[j] = static_cast<float>(p[j] - update);
    }
  }
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_rmse = 0;  ///< NaN without a validation set
  double seconds = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::string optimizer = "adam(beta1=0.9,beta2=0.999,eps=1e-8)";
  std::uint64_t seed = 0;
  std::string config_echo;
  std::size_t best_epoch = 0;

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
    out << "# optimizer=" << optimizer << " seed=" << seed << " best_epoch=" << best_epoch << '\n';
    if (!config_echo.empty()) out << "# " << config_echo << '\n';
    out << "epoch,train_loss,val_rmse,seconds\n" << std::setprecision(10);
    for (const auto& e : epochs) out << e.epoch << ',' << e.train_loss << ',' << e.val_rmse << ',' << e.seconds << '\n';
    if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
  }
};

struct TrainResult {
  ConvLstmParams<float> params;  ///< best validation RMSE (train loss without validation)
  TrainLog log;
};

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint;  ///< rewritten on every improvement
  std::function<void(const EpochRecord&)> on_epoch;
};

/// A cube prepared once for repeated forward passes.
struct PreparedSample {
  ModelInputs<float> inputs;
  Tensor target;                   ///< [k,H,W] horizon NDVI
  std::vector<std::uint8_t> mask;  ///< [k*H*W]
};

inline PreparedSample prepare_sample(const Minicube& cube, const ForecastConfig& cfg) {
  PreparedSample s;
  s.inputs = prepare_inputs<float>(cube, cfg);
  const std::size_t hw = cube.pixels();
  auto first = cube.ndvi.data().begin() + static_cast<std::ptrdiff_t>(cfg.n * hw);
  s.target = Tensor(Shape{cfg.k, cube.height(), cube.width()},
                    std::vector<float>(first, first + static_cast<std::ptrdiff_t>(cfg.k * hw)));
  auto mfirst = cube.mask.begin() + static_cast<std::ptrdiff_t>(cfg.n * hw);
  s.mask.assign(mfirst, mfirst + static_cast<std::ptrdiff_t>(cfg.k * hw));
  return s;
}

struct SampleGradient {
  double loss = 0;
  bool skipped = true;
  std::vector<Tensor> grads;
};

inline SampleGradient sample_gradient(const PreparedSample& sample, const ConvLstmParams<float>& params) {
  Tape tape;
  const auto tracked = track(tape, params, true);
  auto pred = forward(tape, sample.inputs, tracked, params.dims);
  auto loss = masked_l2_loss(pred, sample.target, sample.mask);
  SampleGradient out;
  if (loss.skipped) return out;
  out.loss = loss.value.value()[0];
  if (!std::isfinite(out.loss)) throw Error(ErrorCode::non_finite, "training loss is not finite");
  out.skipped = false;
  tape.backward(loss.value);
  for (const auto& v : tracked.vars()) out.grads.push_back(*tape.grad(v));
  return out;
}

/// Pooled horizon RMSE over valid entries.
inline double validation_rmse(std::span<const PreparedSample> samples, const ConvLstmParams<float>& params) {
  double sq = 0;
  std::size_t count = 0;
  for (const auto& s : samples) {
    Tape tape;
    const auto tracked = track(tape, params, false);
    const Tensor pred = forward(tape, s.inputs, tracked, params.dims).value();
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (!s.mask[i]) continue;
      const double d = static_cast<double>(pred[i]) - static_cast<double>(s.target[i]);
      sq += d * d;
      ++count;
    }
  }
  return count ? std::sqrt(sq / static_cast<double>(count)) : std::numeric_limits<double>::quiet_NaN();
}

inline std::string config_echo(const ForecastConfig& cfg) {
  std::ostringstream os;
  os << "n=" << cfg.n << " k=" << cfg.k << " height=" << cfg.height << " width=" << cfg.width
     << " drivers=" << cfg.drivers << " hidden_channels=" << cfg.hidden_channels << " kernel_size=" << cfg.kernel_size
     << " ablate_weather=" << (cfg.ablate_weather ? 1 : 0) << " lr=" << cfg.lr << " batch_size=" << cfg.batch_size
     << " epochs=" << cfg.epochs << " seed=" << cfg.seed;
  return os.str();
}

/// Trains on in-memory cubes. Deterministic for a given seed: batch
/// gradients are reduced in sample order whatever the thread count.
inline TrainResult train(std::span<const Minicube> train_set, std::span<const Minicube> val_set,
                         const ForecastConfig& cfg, const TrainOptions& options = {}) {
  cfg.validate();
  if (train_set.empty()) throw Error(ErrorCode::invalid_argument, "empty training split");
  std::vector<PreparedSample> train_samples, val_samples;
  for (const auto& c : train_set) train_samples.push_back(prepare_sample(c, cfg));
  for (const auto& c : val_set) val_samples.push_back(prepare_sample(c, cfg));

  const ModelDims dims = ModelDims::from(cfg);
  TrainResult result{init_params(dims, cfg.seed), {}};
  result.log.seed = cfg.seed;
  result.log.config_echo = config_echo(cfg);
  ConvLstmParams<float> params = result.params;
  AdamState adam;
  const AdamOptions adam_opts{cfg.lr};
  std::mt19937_64 rng(cfg.seed ^ 0xB47C5ULL);
  std::vector<std::size_t> order(train_samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t loss_count = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      std::vector<SampleGradient> parts(end - b);
      if (cfg.threads > 1 && parts.size() > 1) {
        std::vector<std::jthread> workers;
        const std::size_t nthreads = std::min(cfg.threads, parts.size());
        for (std::size_t w = 0; w < nthreads; ++w) {
          workers.emplace_back([&, w] {
            for (std::size_t i = w; i < parts.size(); i += nthreads) {
              parts[i] = sample_gradient(train_samples[order[b + i]], params);
            }
          });
        }
      } else {
        for (std::size_t i = 0; i < parts.size(); ++i) parts[i] = sample_gradient(train_samples[order[b + i]], params);
      }
      std::vector<Tensor> grads;
      std::size_t used = 0;
      for (const auto& part : parts) {
        if (part.skipped) continue;
        loss_sum += part.loss;
        ++loss_count;
        ++used;
        if (grads.empty()) {
          grads = part.grads;
          continue;
        }
        for (std::size_t i = 0; i < grads.size(); ++i) {
          for (std::size_t j = 0; j < grads[i].size(); ++j) grads[i][j] += part.grads[i][j];
        }
      }
      if (used == 0) continue;
      const float inv = 1.0f / static_cast<float>(used);
      for (auto& g : grads) {
        for (float& v : g.data()) v *= inv;
      }
      auto ptrs = params.tensors();
      adam_step(ptrs, grads, adam, adam_opts);
    }
    if (loss_count == 0) throw Error(ErrorCode::invalid_argument, "no training sample has a valid horizon entry");

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(loss_count);
    if (!std::isfinite(rec.train_loss)) throw Error(ErrorCode::non_finite, "training loss is not finite");
    rec.val_rmse = validation_rmse(val_samples, params);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const double score = val_samples.empty() || std::isnan(rec.val_rmse) ? rec.train_loss : rec.val_rmse;
    if (score < best) {
      best = score;
      result.params = params;
      result.log.best_epoch = epoch;
      if (options.checkpoint) save_checkpoint(params, *options.checkpoint);
    }
    result.log.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }
  return result;
}

/// Deterministic validation split: the ceil(fraction * N) samples with the
/// smallest FNV-1a hash of their sample id.
inline std::vector<bool> validation_split(std::span<const Minicube> cubes, double fraction) {
  std::vector<bool> is_val(cubes.size(), false);
  if (fraction <= 0 || cubes.empty()) return is_val;
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    const auto& id = cubes[i].meta.sample_id;
    keyed.emplace_back(io::fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(id.data()), id.size())), i);
  }
  std::sort(keyed.begin(), keyed.end());
  const auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(cubes.size())));
  for (std::size_t i = 0; i < std::min(count, keyed.size()); ++i) is_val[keyed[i].second] = true;
  return is_val;
}

inline std::vector<Minicube> load_manifest_cubes(const std::filesystem::path& manifest) {
  std::vector<Minicube> cubes;
  for (const auto& p : read_manifest(manifest)) cubes.push_back(load_minicube(p));
  if (cubes.empty()) throw Error(ErrorCode::invalid_argument, "manifest " + manifest.string() + " lists no cubes");
  return cubes;
}

inline TrainResult train(const std::filesystem::path& manifest, const ForecastConfig& cfg,
                         const TrainOptions& options = {}) {
  const auto cubes = load_manifest_cubes(manifest);
  const auto is_val = validation_split(cubes, cfg.val_fraction);
  std::vector<Minicube> train_set, val_set;
  for (std::size_t i = 0; i < cubes.size(); ++i) (is_val[i] ? val_set : train_set).push_back(cubes[i]);
  if (train_set.empty()) throw Error(ErrorCode::invalid_argument, "empty training split");
  if (cfg.val_fraction > 0 && val_set.empty()) throw Error(ErrorCode::invalid_argument, "empty validation split");
  return train(train_set, val_set, cfg, options);
}

}  // namespace vegcast
