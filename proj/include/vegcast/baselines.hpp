#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vegcast/error.hpp"
#include "vegcast/minicube.hpp"

namespace vegcast {

struct BaselineForecast {
  Tensor frames;                       ///< [k,H,W]
  std::vector<std::uint8_t> excluded;  ///< [H*W], 1 where no valid context exists
};

namespace detail {
inline void check_window(const Minicube& cube, const ForecastConfig& cfg) {
  if (cfg.n < 1 || cfg.k < 1 || cfg.n + cfg.k > cube.steps()) {
    throw Error(ErrorCode::invalid_argument, "window n=" + std::to_string(cfg.n) + " k=" + std::to_string(cfg.k) +
                                                 " does not fit a cube of " + std::to_string(cube.steps()) + " steps");
  }
}
}  // namespace detail

/// Repeats each pixel's last valid context observation over the horizon.
inline BaselineForecast constant_forecast(const Minicube& cube, const ForecastConfig& cfg) {
  detail::check_window(cube, cfg);
  const std::size_t hw = cube.pixels();
  BaselineForecast out{Tensor(Shape{cfg.k, cube.height(), cube.width()}), std::vector<std::uint8_t>(hw, 1)};
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t t = cfg.n; t-- > 0;) {
      if (!cube.valid(t, p)) continue;
      for (std::size_t j = 0; j < cfg.k; ++j) out.frames[j * hw + p] = cube.ndvi[t * hw + p];
      out.excluded[p] = 0;
      break;
    }
  }
  return out;
}

/// Prediction for absolute step t is the gap-filled context observation at
/// t - steps_per_year. Every source step must lie inside the context window.
inline BaselineForecast previous_season_forecast(const Minicube& cube, const ForecastConfig& cfg,
                                                 std::size_t steps_per_year) {
  detail::check_window(cube, cfg);
  if (steps_per_year > cfg.n) {
    throw Error(ErrorCode::invalid_argument, "season lag " + std::to_string(steps_per_year) +
                                                 " exceeds context length " + std::to_string(cfg.n));
  }
  if (steps_per_year < cfg.k) {
    throw Error(ErrorCode::invalid_argument, "season lag " + std::to_string(steps_per_year) +
                                                 " is shorter than the horizon " + std::to_string(cfg.k));
  }
  const FilledWindow context = gapfill_context(cube, cfg.n);
  const std::size_t hw = cube.pixels();
  BaselineForecast out{Tensor(Shape{cfg.k, cube.height(), cube.width()}), std::vector<std::uint8_t>(hw, 0)};
  for (std::size_t p = 0; p < hw; ++p) out.excluded[p] = context.has_valid[p] ? 0 : 1;
  for (std::size_t j = 0; j < cfg.k; ++j) {
    const std::size_t source = cfg.n + j - steps_per_year;
    for (std::size_t p = 0; p < hw; ++p) out.frames[j * hw + p] = context.frames[source * hw + p];
  }
  return out;
}

}  // namespace vegcast
