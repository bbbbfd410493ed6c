#pragma once

// Plain-text key=value run configuration shared by generation, training and
// evaluation. '#' starts a comment; unknown keys are rejected.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vegcast/error.hpp"
#include "vegcast/minicube.hpp"
#include "vegcast/synthgen.hpp"

namespace vegcast {

struct RunConfig {
  std::string profile = "desk";
  ForecastConfig forecast;
  GeneratorConfig generator;

  void validate() const {
    forecast.validate();
    generator.validate();
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <class U>
U parse_number(std::string_view key, std::string_view text) {
  U value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw Error(ErrorCode::config, "bad value '" + std::string(text) + "' for " + std::string(key));
  }
  return value;
}

inline bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "1" || text == "true") return true;
  if (text == "0" || text == "false") return false;
  throw Error(ErrorCode::config, "bad boolean '" + std::string(text) + "' for " + std::string(key));
}

struct Field {
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class U>
std::string show(U v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline const std::map<std::string, Field, std::less<>>& fields() {
  static const auto table = [] {
    std::map<std::string, Field, std::less<>> t;
    auto size_both = [&](const char* key, std::size_t ForecastConfig::*f, std::size_t GeneratorConfig::*g) {
      t[key] = {[=](RunConfig& c, std::string_view v) {
                  c.forecast.*f = c.generator.*g = parse_number<std::size_t>(key, v);
                },
                [=](const RunConfig& c) { return show(c.forecast.*f); }};
    };
    size_both("n", &ForecastConfig::n, &GeneratorConfig::n);
    size_both("k", &ForecastConfig::k, &GeneratorConfig::k);
    size_both("height", &ForecastConfig::height, &GeneratorConfig::height);
    size_both("width", &ForecastConfig::width, &GeneratorConfig::width);

    auto fc = [&]<class U>(const char* key, U ForecastConfig::*f) {
      t[key] = {[=](RunConfig& c, std::string_view v) {
                  if constexpr (std::is_same_v<U, bool>) {
                    c.forecast.*f = parse_bool(key, v);
                  } else {
                    c.forecast.*f = parse_number<U>(key, v);
                  }
                },
                [=](const RunConfig& c) { return show(c.forecast.*f); }};
    };
    fc("drivers", &ForecastConfig::drivers);
    fc("hidden_channels", &ForecastConfig::hidden_channels);
    fc("kernel_size", &ForecastConfig::kernel_size);
    fc("ablate_weather", &ForecastConfig::ablate_weather);
    fc("lr", &ForecastConfig::lr);
    fc("batch_size", &ForecastConfig::batch_size);
    fc("epochs", &ForecastConfig::epochs);
    fc("seed", &ForecastConfig::seed);
    fc("steps_per_year", &ForecastConfig::steps_per_year);
    fc("val_fraction", &ForecastConfig::val_fraction);
    fc("threads", &ForecastConfig::threads);

    auto gc = [&]<class U>(const char* key, U GeneratorConfig::*g) {
      t[key] = {[=](RunConfig& c, std::string_view v) { c.generator.*g = parse_number<U>(key, v); },
                [=](const RunConfig& c) { return show(c.generator.*g); }};
    };
    gc("data_seed", &GeneratorConfig::seed);
    gc("season_period", &GeneratorConfig::season_period);
    gc("precip_amplitude", &GeneratorConfig::precip_amplitude);
    gc("precip_noise", &GeneratorConfig::precip_noise);
    gc("temp_mean", &GeneratorConfig::temp_mean);
    gc("temp_amplitude", &GeneratorConfig::temp_amplitude);
    gc("temp_noise", &GeneratorConfig::temp_noise);
    gc("bucket_capacity", &GeneratorConfig::bucket_capacity);
    gc("et_coef", &GeneratorConfig::et_coef);
    gc("soil_init", &GeneratorConfig::soil_init);
    gc("spinup_steps", &GeneratorConfig::spinup_steps);
    gc("response_lag", &GeneratorConfig::response_lag);
    gc("obs_noise", &GeneratorConfig::obs_noise);
    gc("p_cloud", &GeneratorConfig::p_cloud);
    gc("p_miss", &GeneratorConfig::p_miss);
    gc("cloud_cover", &GeneratorConfig::cloud_cover);
    gc("cloud_depression", &GeneratorConfig::cloud_depression);
    gc("landcover_patches", &GeneratorConfig::landcover_patches);
    gc("nonveg_fraction", &GeneratorConfig::nonveg_fraction);
    gc("years_per_location", &GeneratorConfig::years_per_location);
    return t;
  }();
  return table;
}

inline void apply_profile(RunConfig& c, std::string_view name) {
  if (name == "desk") {
    c.forecast = desk_profile();
  } else if (name == "paper") {
    c.forecast = paper_profile();
  } else {
    throw Error(ErrorCode::config, "unknown profile '" + std::string(name) + "' (expected desk or paper)");
  }
  c.generator.n = c.forecast.n;
  c.generator.k = c.forecast.k;
  c.generator.height = c.forecast.height;
  c.generator.width = c.forecast.width;
  c.profile = std::string(name);
}

}  // namespace detail

/// Applies `key=value` lines. A `profile` line is applied before every other
/// key regardless of its position.
inline RunConfig parse_config(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view body = line;
    if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
    body = detail::trim(body);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw Error(ErrorCode::config, "line " + std::to_string(line_no) + ": expected key=value");
    }
    pairs.emplace_back(detail::trim(body.substr(0, eq)), detail::trim(body.substr(eq + 1)));
  }
  RunConfig cfg;
  std::map<std::string, std::size_t> seen;
  for (const auto& [key, value] : pairs) {
    if (seen[key]++) throw Error(ErrorCode::config, "duplicate key '" + key + "'");
    if (key == "profile") detail::apply_profile(cfg, value);
  }
  for (const auto& [key, value] : pairs) {
    if (key == "profile") continue;
    const auto it = detail::fields().find(key);
    if (it == detail::fields().end()) throw Error(ErrorCode::config, "unknown key '" + key + "'");
    it->second.set(cfg, value);
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::config, "cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Canonical key=value text; parse_config(to_text(c)) reproduces c.
inline std::string to_text(const RunConfig& cfg) {
  std::ostringstream os;
  os << "profile=" << cfg.profile << '\n';
  for (const auto& [key, field] : detail::fields()) os << key << '=' << field.get(cfg) << '\n';
  return os.str();
}

}  // namespace vegcast
