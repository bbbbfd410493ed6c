#pragma once

// Deterministic synthetic minicubes. Weather drives a single-layer soil
// bucket; NDVI follows a smoothed (lagged) soil signal scaled by a
// landcover/topography gain, so context NDVI alone cannot anticipate
// weather anomalies in the horizon.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "vegcast/error.hpp"
#include "vegcast/minicube.hpp"

namespace vegcast {

struct GeneratorConfig {
  std::uint64_t seed = 42;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t n = 12;
  std::size_t k = 4;
  /// Length of the seasonal cycle in steps.
  std::size_t season_period = 12;
  double precip_amplitude = 1.0;
  /// Sigma of the mean-one log-normal multiplicative precipitation noise.
  double precip_noise = 0.6;
  double temp_mean = 1.0;
  double temp_amplitude = 0.5;
  double temp_noise = 0.1;
  double bucket_capacity = 4.0;
  double et_coef = 0.9;
  /// Initial soil water as a fraction of capacity, before spin-up.
  double soil_init = 0.5;
  std::size_t spinup_steps = 24;
  /// Smoothing weight of the NDVI response, in (0,1).
  double response_lag = 0.6;
  double obs_noise = 0.02;
  double p_cloud = 0.2;
  /// Probability that a cloud goes undetected.
  double p_miss = 0.0;
  double cloud_cover = 0.5;
  double cloud_depression = 0.3;
  std::size_t landcover_patches = 6;
  double nonveg_fraction = 0.15;
  std::size_t years_per_location = 4;

  void validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::config, what); };
    auto prob = [&](double p, const char* name) {
      if (!(p >= 0 && p < 1)) fail(std::string(name) + " must be in [0,1)");
    };
    prob(p_cloud, "p_cloud");
    prob(p_miss, "p_miss");
    prob(nonveg_fraction, "nonveg_fraction");
    if (!(cloud_cover > 0 && cloud_cover <= 1)) fail("cloud_cover must be in (0,1]");
    if (!(response_lag > 0 && response_lag < 1)) fail("response_lag must be in (0,1)");
    if (!(bucket_capacity > 0)) fail("bucket_capacity must be positive");
    if (precip_amplitude < 0 || precip_noise < 0 || temp_noise < 0 || obs_noise < 0) {
      fail("amplitudes and noise levels must be non-negative");
    }
    if (!(soil_init >= 0 && soil_init <= 1)) fail("soil_init must be in [0,1]");
    if (n < 1 || k < 1) fail("n and k must be >= 1");
    if (height < 1 || width < 1) fail("grid must be non-empty");
    if (season_period < 1) fail("season_period must be >= 1");
    if (landcover_patches < 1 || years_per_location < 1) fail("landcover_patches and years_per_location must be >= 1");
  }
};

/// Gain per vegetation class, indexed by code - first_vegetation.
inline constexpr double vegetation_gains[] = {0.9, 0.75, 0.6, 0.48, 0.36, 0.25};
inline constexpr std::size_t vegetation_class_count = std::size(vegetation_gains);

inline constexpr double topography_gain_reduction = 0.15;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t sample_seed(std::uint64_t seed, std::size_t index) { return seed ^ splitmix64(index); }

/// Sample id, identical to the stem of the file the cube is saved under.
inline std::string cube_sample_id(std::size_t sample_index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "cube_%06zu", sample_index);
  return buf;
}

/// A generated cube plus the latent series the model never sees.
struct SyntheticSample {
  Minicube cube;
  Tensor clean_ndvi;  ///< [T,H,W] noise- and cloud-free NDVI (0 on non-vegetation)
  std::vector<double> soil;         ///< soil_t in [0, c_max]
  std::vector<double> soil_smooth;  ///< lagged response in [0,1]
  std::vector<double> precip;
  std::vector<double> temp;
  std::vector<double> gain;         ///< per pixel, 0 on non-vegetation
  std::size_t clouded_frames = 0;
  std::size_t undetected_frames = 0;
};

inline SyntheticSample generate_sample(const GeneratorConfig& cfg, std::size_t sample_index) {
  cfg.validate();
  const std::size_t steps = cfg.n + cfg.k, h = cfg.height, w = cfg.width, hw = h * w;
  const std::size_t location = sample_index / cfg.years_per_location;
  std::mt19937_64 site_rng(cfg.seed ^ splitmix64(location ^ 0x5EEDCAFEF00DULL));
  std::mt19937_64 rng(sample_seed(cfg.seed, sample_index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  SyntheticSample s;
  Minicube& cube = s.cube;
  cube.n = cfg.n;
  cube.k = cfg.k;
  cube.meta.sample_id = cube_sample_id(sample_index);

  // Static site properties: elevation field and a Voronoi landcover mosaic.
  cube.topography = Tensor(Shape{1, h, w});
  {
    const double base = 100.0 + 1400.0 * unit(site_rng);
    const double sx = 200.0 * (unit(site_rng) - 0.5), sy = 200.0 * (unit(site_rng) - 0.5);
    struct Bump { double cx, cy, radius, height; };
    std::vector<Bump> bumps(3);
    for (auto& b : bumps) {
      b = {unit(site_rng) * static_cast<double>(w), unit(site_rng) * static_cast<double>(h),
           (0.15 + 0.35 * unit(site_rng)) * static_cast<double>(std::max(h, w)), 50.0 + 250.0 * unit(site_rng)};
      if (unit(site_rng) < 0.3) b.height = -b.height;
    }
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double fx = static_cast<double>(x) / static_cast<double>(w);
        const double fy = static_cast<double>(y) / static_cast<double>(h);
        double z = base + sx * fx + sy * fy;
        for (const auto& b : bumps) {
          const double dx = static_cast<double>(x) - b.cx, dy = static_cast<double>(y) - b.cy;
          z += b.height * std::exp(-(dx * dx + dy * dy) / (2.0 * b.radius * b.radius));
        }
        cube.topography.at(0, y, x) = static_cast<float>(z);
      }
    }
  }
  cube.landcover.assign(hw, landcover::first_vegetation);
  {
    struct Site { double x, y; std::uint16_t code; };
    std::vector<Site> sites(cfg.landcover_patches);
    for (auto& site : sites) {
      site.x = unit(site_rng) * static_cast<double>(w);
      site.y = unit(site_rng) * static_cast<double>(h);
      if (unit(site_rng) < cfg.nonveg_fraction) {
        site.code = static_cast<std::uint16_t>(landcover::water + static_cast<std::uint16_t>(unit(site_rng) * 4.0));
      } else {
        site.code = static_cast<std::uint16_t>(
            landcover::first_vegetation +
            std::min<std::size_t>(vegetation_class_count - 1,
                                  static_cast<std::size_t>(unit(site_rng) * vegetation_class_count)));
      }
    }
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double best = 1e300;
        for (const auto& site : sites) {
          const double dx = static_cast<double>(x) + 0.5 - site.x, dy = static_cast<double>(y) + 0.5 - site.y;
          const double d2 = dx * dx + dy * dy;
          if (d2 < best) {
            best = d2;
            cube.landcover[y * w + x] = site.code;
          }
        }
      }
    }
  }
  const Tensor topo = normalized_topography(cube);
  s.gain.assign(hw, 0.0);
  for (std::size_t p = 0; p < hw; ++p) {
    const std::uint16_t code = cube.landcover[p];
    if (!landcover::is_vegetation(code)) continue;
    s.gain[p] = vegetation_gains[code - landcover::first_vegetation] * (1.0 - topography_gain_reduction * topo[p]);
  }

  // Weather and the soil bucket. One of four start dates per sample.
  const double period = static_cast<double>(cfg.season_period);
  cube.meta.start_index = static_cast<std::uint32_t>((sample_index + location) % 4 * cfg.season_period / 4);
  const double phase = cube.meta.start_index;
  const double log_sigma = cfg.precip_noise;
  auto draw_weather = [&](long t, double& precip, double& temp) {
    const double angle = 2.0 * std::numbers::pi * (static_cast<double>(t) + phase) / period;
    const double noise = std::exp(log_sigma * normal(rng) - 0.5 * log_sigma * log_sigma);
    precip = std::max(0.0, cfg.precip_amplitude * (1.0 + std::sin(angle)) * noise);
    temp = cfg.temp_mean + cfg.temp_amplitude * std::sin(angle - 0.5 * std::numbers::pi) + cfg.temp_noise * normal(rng);
  };
  const double cmax = cfg.bucket_capacity, lambda = cfg.response_lag;
  double soil = cfg.soil_init * cmax;
  double smooth = cfg.soil_init;
  for (long t = -static_cast<long>(cfg.spinup_steps); t < 0; ++t) {
    double precip = 0, temp = 0;
    draw_weather(t, precip, temp);
    smooth = lambda * smooth + (1.0 - lambda) * soil / cmax;
    soil = std::clamp(soil + precip - cfg.et_coef * temp, 0.0, cmax);
  }
  for (std::size_t t = 0; t < steps; ++t) {
    double precip = 0, temp = 0;
    draw_weather(static_cast<long>(t), precip, temp);
    smooth = lambda * smooth + (1.0 - lambda) * soil / cmax;
    s.precip.push_back(precip);
    s.temp.push_back(temp);
    s.soil.push_back(soil);
    s.soil_smooth.push_back(smooth);
    soil = std::clamp(soil + precip - cfg.et_coef * temp, 0.0, cmax);
  }

  const std::size_t d = 3;
  cube.drivers = Tensor(Shape{steps, d});
  const double precip_scale = cfg.precip_amplitude > 0 ? 2.0 * cfg.precip_amplitude : 1.0;
  const double temp_scale = cfg.temp_amplitude + cfg.temp_noise > 0 ? cfg.temp_amplitude + cfg.temp_noise : 1.0;
  for (std::size_t t = 0; t < steps; ++t) {
    cube.drivers[t * d + 0] = static_cast<float>(s.precip[t] / precip_scale);
    cube.drivers[t * d + 1] = static_cast<float>((s.temp[t] - cfg.temp_mean) / temp_scale);
    cube.drivers[t * d + 2] = static_cast<float>(s.soil[t] / cmax);
  }

  // Observations: Gaussian noise, then clouds as horizontal bands.
  cube.ndvi = Tensor(Shape{steps, h, w});
  s.clean_ndvi = Tensor(Shape{steps, h, w});
  cube.mask.assign(steps * hw, 0);
  const auto band_rows = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.cloud_cover * h)));
  for (std::size_t t = 0; t < steps; ++t) {
    bool clouded = unit(rng) < cfg.p_cloud;
    bool undetected = clouded && unit(rng) < cfg.p_miss;
    const std::size_t band_start = clouded ? static_cast<std::size_t>(unit(rng) * static_cast<double>(h)) % h : 0;
    s.clouded_frames += clouded;
    s.undetected_frames += undetected;
    for (std::size_t y = 0; y < h; ++y) {
      const bool in_band = clouded && ((y + h - band_start) % h) < band_rows;
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t p = y * w + x, i = t * hw + p;
        const double noise = cfg.obs_noise * normal(rng);
        if (s.gain[p] == 0.0) continue;
        const double clean = s.gain[p] * s.soil_smooth[t];
        s.clean_ndvi[i] = static_cast<float>(clean);
        if (in_band && !undetected) continue;
        double observed = clean + noise;
        if (in_band) observed -= cfg.cloud_depression;
        cube.ndvi[i] = static_cast<float>(std::clamp(observed, -1.0, 1.0));
        cube.mask[i] = 1;
      }
    }
  }
  return s;
}

inline Minicube generate_minicube(const GeneratorConfig& cfg, std::size_t sample_index) {
  return generate_sample(cfg, sample_index).cube;
}

inline std::string cube_file_name(std::size_t sample_index) { return cube_sample_id(sample_index) + ".mcb"; }

/// Writes cubes first_index .. first_index+count-1 and a manifest listing
/// them; returns the manifest path.
inline std::filesystem::path generate_dataset(const GeneratorConfig& cfg, std::size_t count,
                                              const std::filesystem::path& out_dir, std::size_t first_index = 0) {
  if (count < 1) throw Error(ErrorCode::invalid_argument, "count must be >= 1");
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::io, "cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> entries;
  for (std::size_t i = first_index; i < first_index + count; ++i) {
    const std::string name = cube_file_name(i);
    save_minicube(generate_minicube(cfg, i), out_dir / name);
    entries.emplace_back(name);
  }
  const auto manifest = out_dir / "manifest.txt";
  write_manifest(manifest, entries, "synthetic minicubes, seed " + std::to_string(cfg.seed));
  return manifest;
}

}  // namespace vegcast
