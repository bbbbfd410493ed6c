#pragma once

// Pixelwise forecast skill with the MSE and NSE decompositions:
//   MSE = bias_sq + var_err + phase_err
//   NSE = 1 - MSE / sigma_obs^2 = 2*alpha*r - alpha^2 - beta^2
// All statistics use population (1/N) moments in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <limits>
#include <sstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vegcast/error.hpp"
#include "vegcast/tensor.hpp"

namespace vegcast {

struct PixelMetrics {
  double mse = 0;
  double rmse = 0;
  double nrmse = 0;  ///< rmse / sigma_obs
  double nse = 0;
  double alpha = 0;  ///< sigma_pred / sigma_obs
  double beta = 0;   ///< (mu_pred - mu_obs) / sigma_obs
  double r = 0;
  double bias_sq = 0;
  double var_err = 0;
  double phase_err = 0;
  double mu_obs = 0;
  double mu_pred = 0;
  double sigma_obs = 0;
  double sigma_pred = 0;
  std::size_t valid_count = 0;
  /// No valid entries or sigma_obs == 0: NSE-family values are undefined.
  bool excluded = false;

  bool has_rmse() const { return valid_count > 0; }
};

/// Statistics over the entries where valid != 0. r is 0 when either standard
/// deviation vanishes.
template <class O, class P>
PixelMetrics pixel_metrics(std::span<const O> obs, std::span<const P> pred, std::span<const std::uint8_t> valid) {
  if (obs.size() != pred.size() || obs.size() != valid.size()) {
    throw Error(ErrorCode::shape_mismatch, "pixel_metrics: series lengths differ");
  }
  PixelMetrics m;
  double so = 0, sp = 0;
  constexpr double inf = std::numeric_limits<double>::infinity();
  double o_lo = inf, o_hi = -inf, p_lo = inf, p_hi = -inf;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (!valid[i]) continue;
    ++m.valid_count;
    const double o = static_cast<double>(obs[i]), p = static_cast<double>(pred[i]);
    so += o;
    sp += p;
    o_lo = std::min(o_lo, o);
    o_hi = std::max(o_hi, o);
    p_lo = std::min(p_lo, p);
    p_hi = std::max(p_hi, p);
  }
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  if (m.valid_count == 0) {
    m.excluded = true;
    m.mse = m.rmse = m.nrmse = m.nse = m.alpha = m.beta = nan;
    return m;
  }
  const auto count = static_cast<double>(m.valid_count);
  // A constant series has its value as mean exactly, so its deviations and
  // standard deviation are exactly zero rather than rounding noise.
  m.mu_obs = o_lo == o_hi ? o_lo : so / count;
  m.mu_pred = p_lo == p_hi ? p_lo : sp / count;
  double var_o = 0, var_p = 0, cov = 0, sq = 0;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (!valid[i]) continue;
    const double o = static_cast<double>(obs[i]), p = static_cast<double>(pred[i]);
    const double dobs = o - m.mu_obs, dpred = p - m.mu_pred;
    var_o += dobs * dobs;
    var_p += dpred * dpred;
    cov += dobs * dpred;
    sq += (p - o) * (p - o);
  }
  var_o /= count;
  var_p /= count;
  cov /= count;
  m.mse = sq / count;
  m.rmse = std::sqrt(m.mse);
  m.sigma_obs = std::sqrt(var_o);
  m.sigma_pred = std::sqrt(var_p);
  m.r = (m.sigma_obs > 0 && m.sigma_pred > 0) ? cov / (m.sigma_obs * m.sigma_pred) : 0.0;
  m.bias_sq = (m.mu_obs - m.mu_pred) * (m.mu_obs - m.mu_pred);
  m.var_err = (m.sigma_obs - m.sigma_pred) * (m.sigma_obs - m.sigma_pred);
  m.phase_err = 2.0 * m.sigma_obs * m.sigma_pred * (1.0 - m.r);
  if (m.sigma_obs > 0) {
    m.nse = 1.0 - m.mse / var_o;
    m.alpha = m.sigma_pred / m.sigma_obs;
    m.beta = (m.mu_pred - m.mu_obs) / m.sigma_obs;
    m.nrmse = m.rmse / m.sigma_obs;
  } else {
    m.excluded = true;
    m.nse = m.alpha = m.beta = m.nrmse = nan;
  }
  return m;
}

/// Pooled alpha and beta over every valid (pixel, step) entry of a set of
/// series, i.e. ratios of dataset-wide moments rather than per-pixel ones.
struct PooledMoments {
  double alpha = 0;
  double beta = 0;
  std::size_t count = 0;
};

class PooledMomentAccumulator {
 public:
  void add(double obs, double pred) {
    ++count_;
    so_ += obs;
    sp_ += pred;
    soo_ += obs * obs;
    spp_ += pred * pred;
  }

  PooledMoments result() const {
    if (count_ == 0) throw Error(ErrorCode::invalid_argument, "no pooled entries");
    const double n = static_cast<double>(count_);
    const double mo = so_ / n, mp = sp_ / n;
    const double so = std::sqrt(std::max(0.0, soo_ / n - mo * mo));
    const double sp = std::sqrt(std::max(0.0, spp_ / n - mp * mp));
    if (so == 0) throw Error(ErrorCode::invalid_argument, "pooled observations have zero variance");
    return {sp / so, (mp - mo) / so, count_};
  }

 private:
  std::size_t count_ = 0;
  double so_ = 0, sp_ = 0, soo_ = 0, spp_ = 0;
};

/// Per-pixel metrics of one model on one cube.
struct CubeEvaluation {
  std::string cube_id;
  double masked_fraction = 0;
  std::vector<PixelMetrics> pixels;
  std::vector<std::uint16_t> landcover;  ///< optional, parallel to pixels
};

struct AggregateOptions {
  double mask_threshold = 0.75;
  double outlier_fraction = 0.05;
};

/// Summary row: medians over the pooled pixels after trimming.
struct Summary {
  std::string model;
  double rmse = 0;
  double nse = 0;
  double alpha = 0;
  double beta = 0;
  double r = 0;
  double bias_sq = 0;
  double var_err = 0;
  double phase_err = 0;
  double nrmse = 0;
  std::size_t n_pixels = 0;
};

/// Which ranking decides the "worst" pixels dropped as outliers.
enum class TrimRanking {
  per_family,  ///< RMSE-ranked for rmse/nrmse/MSE terms, NSE-ranked for nse/alpha/beta/r
  by_rmse,
  by_nse,
};

/// Keeps cubes whose masked fraction is below the threshold, and within them
/// the pixels that have at least one valid horizon entry. Pixels with constant
/// observations stay: their RMSE is defined even though their NSE is not.
inline std::vector<CubeEvaluation> filter_cubes(std::span<const CubeEvaluation> cubes, double mask_threshold) {
  std::vector<CubeEvaluation> out;
  for (const auto& c : cubes) {
    if (c.masked_fraction >= mask_threshold) continue;
    CubeEvaluation kept{c.cube_id, c.masked_fraction, {}, {}};
    for (std::size_t i = 0; i < c.pixels.size(); ++i) {
      if (!c.pixels[i].has_rmse()) continue;
      kept.pixels.push_back(c.pixels[i]);
      if (!c.landcover.empty()) kept.landcover.push_back(c.landcover[i]);
    }
    out.push_back(std::move(kept));
  }
  return out;
}

inline std::vector<PixelMetrics> pool_pixels(std::span<const CubeEvaluation> cubes) {
  std::vector<PixelMetrics> pool;
  for (const auto& c : cubes) pool.insert(pool.end(), c.pixels.begin(), c.pixels.end());
  return pool;
}

inline double median(std::vector<double> values) {
  if (values.empty()) throw Error(ErrorCode::invalid_argument, "median of an empty set");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double hi = values[mid];
  if (values.size() % 2 == 1) return hi;
  const double lo = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

/// Drops floor(fraction * N) worst pixels: highest RMSE, or lowest NSE
/// (undefined NSE ranks worst).
inline std::vector<PixelMetrics> trim_outliers(std::vector<PixelMetrics> pool, double fraction, bool rank_by_nse) {
  const auto drop = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(pool.size())));
  if (rank_by_nse) {
    std::stable_sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) {
      if (std::isnan(a.nse) || std::isnan(b.nse)) return !std::isnan(a.nse) && std::isnan(b.nse);
      return a.nse > b.nse;
    });
  } else {
    std::stable_sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) { return a.rmse < b.rmse; });
  }
  pool.resize(pool.size() - drop);
  return pool;
}

inline Summary aggregate(const std::string& model, std::span<const CubeEvaluation> cubes,
                         const AggregateOptions& opts = {}, TrimRanking ranking = TrimRanking::per_family) {
  const auto pool = pool_pixels(filter_cubes(cubes, opts.mask_threshold));
  if (pool.empty()) throw Error(ErrorCode::invalid_argument, "no pixels left after filtering for " + model);
  std::vector<PixelMetrics> nse_defined;
  std::copy_if(pool.begin(), pool.end(), std::back_inserter(nse_defined), [](const auto& p) { return !p.excluded; });
  const auto rmse_pool = trim_outliers(pool, opts.outlier_fraction, ranking == TrimRanking::by_nse);
  const auto nse_pool = trim_outliers(nse_defined, opts.outlier_fraction, ranking != TrimRanking::by_rmse);
  auto med = [](const std::vector<PixelMetrics>& px, double PixelMetrics::*field, bool skip_excluded) {
    std::vector<double> v;
    v.reserve(px.size());
    for (const auto& p : px) {
      if (!skip_excluded || !p.excluded) v.push_back(p.*field);
    }
    return v.empty() ? std::numeric_limits<double>::quiet_NaN() : median(std::move(v));
  };
  Summary s;
  s.model = model;
  s.rmse = med(rmse_pool, &PixelMetrics::rmse, false);
  s.bias_sq = med(rmse_pool, &PixelMetrics::bias_sq, false);
  s.var_err = med(rmse_pool, &PixelMetrics::var_err, false);
  s.phase_err = med(rmse_pool, &PixelMetrics::phase_err, false);
  s.nrmse = med(rmse_pool, &PixelMetrics::nrmse, true);
  s.nse = med(nse_pool, &PixelMetrics::nse, true);
  s.alpha = med(nse_pool, &PixelMetrics::alpha, true);
  s.beta = med(nse_pool, &PixelMetrics::beta, true);
  s.r = med(nse_pool, &PixelMetrics::r, true);
  s.n_pixels = pool.size();
  return s;
}

/// Right-continuous ECDF support points: (sorted value, fraction <= value).
inline std::vector<std::pair<double, double>> ecdf(std::vector<double> values) {
  if (values.empty()) throw Error(ErrorCode::invalid_argument, "ecdf of an empty set");
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(ErrorCode::non_finite, "ecdf input holds a non-finite value");
  }
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  std::vector<std::pair<double, double>> out(values.size());
  for (std::size_t i = values.size(); i-- > 0;) {
    const bool last_of_run = i + 1 == values.size() || values[i + 1] != values[i];
    out[i] = {values[i], last_of_run ? static_cast<double>(i + 1) / n : out[i + 1].second};
  }
  return out;
}

struct ErrorMap {
  Tensor values;                      ///< [H,W] |pred - target|, 0 where flagged
  std::vector<std::uint8_t> flagged;  ///< 1 where the target is masked
};

inline ErrorMap error_map(std::span<const float> pred, std::span<const float> target,
                          std::span<const std::uint8_t> mask, std::size_t height, std::size_t width) {
  if (pred.size() != target.size() || pred.size() != mask.size() || pred.size() != height * width) {
    throw Error(ErrorCode::shape_mismatch, "error_map: frame sizes differ");
  }
  ErrorMap out{Tensor(Shape{height, width}), std::vector<std::uint8_t>(pred.size(), 0)};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask[i]) {
      out.flagged[i] = 1;
      continue;
    }
    out.values[i] = std::fabs(pred[i] - target[i]);
  }
  return out;
}

/// 8-bit grey levels: clamp(|delta| / 0.5) * 255.
inline std::vector<std::uint8_t> error_map_gray(const ErrorMap& map) {
  std::vector<std::uint8_t> out(map.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = std::clamp(static_cast<double>(map.values[i]) / 0.5, 0.0, 1.0);
    out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

/// NDVI [-1,1] mapped linearly to 0..255.
inline std::vector<std::uint8_t> ndvi_gray(std::span<const float> frame) {
  std::vector<std::uint8_t> out(frame.size());
  for (std::size_t i = 0; i < frame.size(); ++i) {
    const double v = std::clamp((static_cast<double>(frame[i]) + 1.0) / 2.0, 0.0, 1.0);
    out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

inline void write_pgm(const std::filesystem::path& path, std::span<const std::uint8_t> gray, std::size_t width,
                      std::size_t height) {
  if (gray.size() != width * height) throw Error(ErrorCode::shape_mismatch, "pgm size mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

inline constexpr const char* summary_header = "model,rmse,nse,alpha,beta,r,bias_sq,var_err,phase_err,n_pixels";

inline std::string format_summary_row(const Summary& s) {
  std::ostringstream os;
  os << std::setprecision(10) << s.model << ',' << s.rmse << ',' << s.nse << ',' << s.alpha << ',' << s.beta << ','
     << s.r << ',' << s.bias_sq << ',' << s.var_err << ',' << s.phase_err << ',' << s.n_pixels;
  return os.str();
}

inline void write_summary_csv(const std::filesystem::path& path, std::span<const Summary> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out << summary_header << '\n';
  for (const auto& s : rows) out << format_summary_row(s) << '\n';
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

inline std::vector<Summary> read_summary_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != summary_header) {
    throw Error(ErrorCode::bad_magic, path.string() + " is not a summary CSV");
  }
  std::vector<Summary> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string field;
    std::vector<std::string> f;
    while (std::getline(is, field, ',')) f.push_back(field);
    if (f.size() != 10) throw Error(ErrorCode::truncated, "summary row has " + std::to_string(f.size()) + " fields");
    try {
      rows.push_back(Summary{f[0], std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4]),
                             std::stod(f[5]), std::stod(f[6]), std::stod(f[7]), std::stod(f[8]), 0.0,
                             static_cast<std::size_t>(std::stoull(f[9]))});
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::invalid_argument, "malformed summary row: " + line);
    }
  }
  return rows;
}

inline void write_ecdf_csv(const std::filesystem::path& path, const std::string& metric,
                           std::span<const std::pair<double, double>> points) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out << metric << ",ecdf\n" << std::setprecision(10);
  for (const auto& [v, f] : points) out << v << ',' << f << '\n';
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

}  // namespace vegcast
