#pragma once

// Central finite-difference check of tape gradients. Runs entirely in double
// so a 1e-3 relative tolerance measures the backward formulas rather than
// float round-off.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "vegcast/error.hpp"
#include "vegcast/tensor.hpp"

namespace vegcast {

struct GradCheckOptions {
  /// Coordinates sampled per parameter tensor; smaller tensors are checked exhaustively.
  std::size_t max_coords_per_param = 24;
  std::uint64_t seed = 0x6A7D;
};

struct GradCheckResult {
  double max_relative_error = 0;
  std::size_t coordinates = 0;
};

/// `f(tape, params)` must build a scalar on `tape` from the given parameter
/// variables. Returns the worst |analytic - cd| / max(|analytic|, |cd|, 1e-8)
/// over the sampled coordinates.
template <class F>
GradCheckResult check_gradients_detailed(F&& f, const std::vector<BasicTensor<double>>& params, double eps,
                                         const GradCheckOptions& opts = {}) {
  if (!(eps > 0)) throw Error(ErrorCode::invalid_argument, "finite-difference step must be positive");

  auto evaluate = [&](const std::vector<BasicTensor<double>>& values) {
    BasicTape<double> tape;
    std::vector<BasicVar<double>> vars;
    for (const auto& v : values) vars.push_back(tape.leaf(v, false));
    const double out = f(tape, std::span<const BasicVar<double>>(vars)).value()[0];
    if (!std::isfinite(out)) throw Error(ErrorCode::non_finite, "function value is not finite");
    return out;
  };

  std::vector<BasicTensor<double>> analytic;
  {
    BasicTape<double> tape;
    std::vector<BasicVar<double>> vars;
    for (const auto& v : params) vars.push_back(tape.leaf(v, true));
    auto loss = f(tape, std::span<const BasicVar<double>>(vars));
    if (!std::isfinite(loss.value()[0])) throw Error(ErrorCode::non_finite, "function value is not finite");
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(*tape.grad(v));
  }

  std::mt19937_64 rng(opts.seed);
  GradCheckResult result;
  std::vector<BasicTensor<double>> probe = params;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    std::vector<std::size_t> coords(params[pi].size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opts.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_param);
    }
    for (std::size_t c : coords) {
      const double original = params[pi][c];
      probe[pi][c] = original + eps;
      const double up = evaluate(probe);
      probe[pi][c] = original - eps;
      const double down = evaluate(probe);
      probe[pi][c] = original;
      const double cd = (up - down) / (2.0 * eps);
      const double a = analytic[pi][c];
      if (!std::isfinite(a)) throw Error(ErrorCode::non_finite, "analytic gradient is not finite");
      const double rel = std::fabs(a - cd) / std::max({std::fabs(a), std::fabs(cd), 1e-8});
      result.max_relative_error = std::max(result.max_relative_error, rel);
      ++result.coordinates;
    }
  }
  return result;
}

template <class F>
double check_gradients(F&& f, const std::vector<BasicTensor<double>>& params, double eps,
                       const GradCheckOptions& opts = {}) {
  return check_gradients_detailed(std::forward<F>(f), params, eps, opts).max_relative_error;
}

}  // namespace vegcast
