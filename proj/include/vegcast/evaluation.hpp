#pragma once

// Scores horizon forecasts of models and baselines against cube observations.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <span>
#include <string>
#include <vector>

#include "vegcast/baselines.hpp"
#include "vegcast/binary_io.hpp"
#include "vegcast/error.hpp"
#include "vegcast/metrics.hpp"
#include "vegcast/minicube.hpp"
#include "vegcast/model.hpp"

namespace vegcast {

/// Per-pixel metrics of a [k,H,W] forecast over the cube's horizon. Pixels
/// flagged in `no_forecast` are treated as having no valid entries.
inline CubeEvaluation evaluate_forecast(const Minicube& cube, const Tensor& frames, const ForecastConfig& cfg,
                                        std::span<const std::uint8_t> no_forecast = {}) {
  const std::size_t hw = cube.pixels();
  if (frames.shape() != Shape{cfg.k, cube.height(), cube.width()}) {
    throw Error(ErrorCode::shape_mismatch, "forecast " + shape_string(frames.shape()) + " does not match the cube");
  }
  if (cfg.n + cfg.k > cube.steps()) throw Error(ErrorCode::shape_mismatch, "cube shorter than n + k");
  CubeEvaluation ev{cube.meta.sample_id, cube.masked_fraction(), {}, cube.landcover};
  ev.pixels.reserve(hw);
  std::vector<float> obs(cfg.k), pred(cfg.k);
  std::vector<std::uint8_t> valid(cfg.k);
  for (std::size_t p = 0; p < hw; ++p) {
    const bool skip = !no_forecast.empty() && no_forecast[p];
    for (std::size_t j = 0; j < cfg.k; ++j) {
      obs[j] = cube.ndvi[(cfg.n + j) * hw + p];
      pred[j] = frames[j * hw + p];
      valid[j] = !skip && cube.valid(cfg.n + j, p);
    }
    ev.pixels.push_back(pixel_metrics<float, float>(obs, pred, valid));
  }
  return ev;
}

enum class BaselineKind { constant, previous_season };

inline BaselineForecast run_baseline(BaselineKind kind, const Minicube& cube, const ForecastConfig& cfg) {
  return kind == BaselineKind::constant ? constant_forecast(cube, cfg)
                                        : previous_season_forecast(cube, cfg, cfg.steps_per_year);
}

inline std::vector<CubeEvaluation> evaluate_baseline(std::span<const Minicube> cubes, BaselineKind kind,
                                                     const ForecastConfig& cfg) {
  std::vector<CubeEvaluation> out;
  for (const auto& cube : cubes) {
    const auto f = run_baseline(kind, cube, cfg);
    out.push_back(evaluate_forecast(cube, f.frames, cfg, f.excluded));
  }
  return out;
}

inline std::vector<CubeEvaluation> evaluate_model(std::span<const Minicube> cubes, const ConvLstmParams<float>& params,
                                                  const ForecastConfig& cfg) {
  std::vector<CubeEvaluation> out;
  for (const auto& cube : cubes) out.push_back(evaluate_forecast(cube, predict(cube, params, cfg), cfg));
  return out;
}

/// Every scored pixel with its landcover class, for stratified analysis.
inline void write_pixels_csv(const std::filesystem::path& path, const std::string& model,
                             std::span<const CubeEvaluation> cubes) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out << "model,cube,pixel,landcover,valid_count,rmse,nrmse,nse,alpha,beta,r,bias_sq,var_err,phase_err\n"
      << std::setprecision(10);
  for (const auto& c : cubes) {
    for (std::size_t i = 0; i < c.pixels.size(); ++i) {
      const auto& m = c.pixels[i];
      if (!m.has_rmse()) continue;
      out << model << ',' << c.cube_id << ',' << i << ',' << (c.landcover.empty() ? 0 : c.landcover[i]) << ','
          << m.valid_count << ',' << m.rmse << ',' << m.nrmse << ',' << m.nse << ',' << m.alpha << ',' << m.beta
          << ',' << m.r << ',' << m.bias_sq << ',' << m.var_err << ',' << m.phase_err << '\n';
    }
  }
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

inline constexpr std::string_view prediction_magic = "MCPR";
inline constexpr std::uint32_t prediction_version = 1;

/// Forecast frames [k,H,W] as MCPR: magic, version, k, H, W, float32 payload,
/// FNV-1a trailer.
inline std::vector<std::uint8_t> encode_prediction(const Tensor& frames) {
  if (frames.rank() != 3) throw Error(ErrorCode::shape_mismatch, "prediction must be [k,H,W]");
  io::ByteWriter w;
  w.magic(prediction_magic);
  w.scalar(prediction_version);
  for (std::size_t v : frames.shape()) w.scalar(static_cast<std::uint32_t>(v));
  w.array(frames.data());
  w.seal();
  return w.bytes();
}

inline Tensor decode_prediction(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(prediction_magic);
  const auto version = r.scalar<std::uint32_t>();
  if (version != prediction_version) throw Error(ErrorCode::version_mismatch, "prediction version " + std::to_string(version));
  Shape shape(3);
  for (auto& v : shape) v = r.scalar<std::uint32_t>();
  const std::size_t count = shape[0] * shape[1] * shape[2];
  if (r.remaining() < count * 4 + 8) throw Error(ErrorCode::truncated, "prediction payload too short");
  Tensor frames(shape, r.array<float>(count));
  r.verify_seal();
  return frames;
}

}  // namespace vegcast
