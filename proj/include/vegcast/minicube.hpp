#pragma once

// Minicube data model: NDVI frames, per-step scalar drivers, static
// topography and landcover, validity mask; plus the MCB1 on-disk format and
// dataset manifests.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "vegcast/binary_io.hpp"
#include "vegcast/error.hpp"
#include "vegcast/tensor.hpp"

namespace vegcast {

namespace landcover {
inline constexpr std::uint16_t water = 1;
inline constexpr std::uint16_t built = 2;
inline constexpr std::uint16_t bare = 3;
inline constexpr std::uint16_t snow = 4;
inline constexpr std::uint16_t cloud = 5;
/// Vegetation classes are 10 and above.
inline constexpr std::uint16_t first_vegetation = 10;

inline constexpr bool is_vegetation(std::uint16_t code) noexcept { return code >= first_vegetation; }
}  // namespace landcover

struct ForecastConfig {
  std::size_t n = 12;  ///< context steps
  std::size_t k = 4;   ///< horizon steps
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t drivers = 3;
  std::size_t hidden_channels = 32;
  std::size_t kernel_size = 3;
  bool ablate_weather = false;
  double lr = 1e-3;
  std::size_t batch_size = 4;
  std::size_t epochs = 50;
  std::uint64_t seed = 1;
  /// Lag of the previous-season baseline.
  std::size_t steps_per_year = 12;
  double val_fraction = 0.1;
  std::size_t threads = 1;

  void validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::config, what); };
    if (n < 1) fail("n must be >= 1");
    if (k < 1) fail("k must be >= 1");
    if (kernel_size % 2 == 0) fail("kernel_size must be odd");
    if (height != width) fail("grid must be square (height == width)");
    if (height < 8) fail("grid must be at least 8x8");
    if (hidden_channels < 1) fail("hidden_channels must be >= 1");
    if (!(lr > 0)) fail("lr must be positive");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(val_fraction >= 0 && val_fraction < 1)) fail("val_fraction must be in [0,1)");
    if (threads < 1) fail("threads must be >= 1");
  }
};

/// 10-daily, 36 + 9 steps, 128x128, 150 epochs, batch 32, lr 1e-6.
inline ForecastConfig paper_profile() {
  ForecastConfig cfg;
  cfg.n = 36;
  cfg.k = 9;
  cfg.height = cfg.width = 128;
  cfg.lr = 1e-6;
  cfg.batch_size = 32;
  cfg.epochs = 150;
  cfg.steps_per_year = 36;
  return cfg;
}

inline ForecastConfig desk_profile() { return ForecastConfig{}; }

struct CubeMeta {
  std::string sample_id;
  std::uint32_t start_index = 0;
  std::uint32_t step_days = 10;
};

struct Minicube {
  std::size_t n = 0;
  std::size_t k = 0;
  Tensor ndvi;        ///< [T,H,W], fill 0 where invalid
  Tensor drivers;     ///< [T,D]
  Tensor topography;  ///< [1,H,W], metres as stored
  std::vector<std::uint16_t> landcover;  ///< [H*W]
  std::vector<std::uint8_t> mask;        ///< [T*H*W], 1 = valid observation
  CubeMeta meta;

  std::size_t steps() const { return ndvi.dim(0); }
  std::size_t height() const { return ndvi.dim(1); }
  std::size_t width() const { return ndvi.dim(2); }
  std::size_t pixels() const { return height() * width(); }
  std::size_t driver_count() const { return drivers.dim(1); }

  bool valid(std::size_t t, std::size_t p) const { return mask[t * pixels() + p] != 0; }

  /// Fraction of all (t, pixel) entries that are masked out.
  double masked_fraction() const {
    const auto valid_count = std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });
    return 1.0 - static_cast<double>(valid_count) / static_cast<double>(mask.size());
  }

  void validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::shape_mismatch, "minicube: " + what); };
    if (ndvi.rank() != 3) fail("ndvi must be [T,H,W]");
    const std::size_t t = steps(), hw = pixels();
    if (n + k != t) fail("n + k = " + std::to_string(n + k) + " but cube has " + std::to_string(t) + " steps");
    if (drivers.rank() != 2 || drivers.dim(0) != t) fail("drivers must be [T,D]");
    if (topography.shape() != Shape{1, height(), width()}) fail("topography must be [1,H,W]");
    if (landcover.size() != hw) fail("landcover must hold H*W codes");
    if (mask.size() != t * hw) fail("mask must hold T*H*W entries");
    if (!ndvi.all_finite() || !drivers.all_finite() || !topography.all_finite()) {
      throw Error(ErrorCode::non_finite, "minicube holds non-finite values");
    }
    for (std::size_t ti = 0; ti < t; ++ti) {
      for (std::size_t p = 0; p < hw; ++p) {
        if (mask[ti * hw + p] && !landcover::is_vegetation(landcover[p])) {
          throw Error(ErrorCode::invalid_argument, "minicube: valid observation on non-vegetation pixel");
        }
      }
    }
  }
};

struct NdviResult {
  Tensor ndvi;
  std::vector<std::uint8_t> valid;
};

/// (nir - red) / (nir + red); entries with nir + red < 1e-6 yield 0 and are
/// flagged invalid.
inline NdviResult compute_ndvi(const Tensor& red, const Tensor& nir) {
  if (red.shape() != nir.shape()) {
    throw Error(ErrorCode::shape_mismatch, "red " + shape_string(red.shape()) + " vs nir " + shape_string(nir.shape()));
  }
  NdviResult out{Tensor(red.shape()), std::vector<std::uint8_t>(red.size(), 0)};
  for (std::size_t i = 0; i < red.size(); ++i) {
    const float r = red[i], s = nir[i];
    if (r < 0 || s < 0) throw Error(ErrorCode::invalid_argument, "negative reflectance at index " + std::to_string(i));
    const float denom = s + r;
    if (denom < 1e-6f) continue;
    out.ndvi[i] = (s - r) / denom;
    out.valid[i] = 1;
  }
  return out;
}

/// Replicates drivers [T,D] into constant planes [T,D,H,W].
inline Tensor broadcast_drivers(const Tensor& drivers, std::size_t height, std::size_t width) {
  if (drivers.rank() != 2) throw Error(ErrorCode::shape_mismatch, "drivers must be [T,D]");
  const std::size_t hw = height * width;
  Tensor out(Shape{drivers.dim(0), drivers.dim(1), height, width});
  for (std::size_t i = 0; i < drivers.size(); ++i) {
    std::fill_n(out.data().begin() + static_cast<std::ptrdiff_t>(i * hw), hw, drivers[i]);
  }
  return out;
}

/// Linear interpolation across invalid entries; leading and trailing gaps
/// take the nearest valid value.
template <class T>
std::vector<T> gapfill_linear(std::span<const T> series, std::span<const std::uint8_t> valid) {
  if (series.size() != valid.size()) throw Error(ErrorCode::shape_mismatch, "series and validity lengths differ");
  std::vector<T> out(series.begin(), series.end());
  std::ptrdiff_t prev = -1;
  const auto len = static_cast<std::ptrdiff_t>(series.size());
  for (std::ptrdiff_t i = 0; i < len; ++i) {
    if (!valid[i]) continue;
    if (prev < 0) {
      std::fill(out.begin(), out.begin() + i, series[i]);
    } else if (i - prev > 1) {
      const T a = series[prev], b = series[i];
      const T span = static_cast<T>(i - prev);
      for (std::ptrdiff_t j = prev + 1; j < i; ++j) out[j] = a + (b - a) * static_cast<T>(j - prev) / span;
    }
    prev = i;
  }
  if (prev < 0) throw Error(ErrorCode::invalid_argument, "gapfill of an all-invalid series");
  std::fill(out.begin() + prev + 1, out.end(), series[prev]);
  return out;
}

inline Tensor gapfill_linear(const Tensor& series, std::span<const std::uint8_t> valid) {
  return Tensor(series.shape(), gapfill_linear<float>(series.data(), valid));
}

/// Context frames [0, steps) gap-filled per pixel along time. Pixels with no
/// valid observation in the window stay 0 and get has_valid = 0.
struct FilledWindow {
  Tensor frames;                       ///< [steps,H,W]
  std::vector<std::uint8_t> has_valid;  ///< [H*W]
};

inline FilledWindow gapfill_context(const Minicube& cube, std::size_t steps) {
  if (steps == 0 || steps > cube.steps()) {
    throw Error(ErrorCode::invalid_argument, "context window of " + std::to_string(steps) + " steps");
  }
  const std::size_t hw = cube.pixels();
  FilledWindow out{Tensor(Shape{steps, cube.height(), cube.width()}), std::vector<std::uint8_t>(hw, 0)};
  std::vector<float> series(steps);
  std::vector<std::uint8_t> valid(steps);
  for (std::size_t p = 0; p < hw; ++p) {
    bool any = false;
    for (std::size_t t = 0; t < steps; ++t) {
      series[t] = cube.ndvi[t * hw + p];
      valid[t] = cube.mask[t * hw + p];
      any = any || valid[t];
    }
    if (!any) continue;
    out.has_valid[p] = 1;
    const auto filled = gapfill_linear<float>(series, valid);
    for (std::size_t t = 0; t < steps; ++t) out.frames[t * hw + p] = filled[t];
  }
  return out;
}

/// Per-cube min-max scaling of elevation to [0,1]; a flat field maps to 0.
inline Tensor normalized_topography(const Minicube& cube) {
  Tensor out = cube.topography;
  const auto [lo, hi] = std::minmax_element(out.data().begin(), out.data().end());
  const float lo_v = *lo, range = *hi - *lo;
  for (float& v : out.data()) v = range > 0 ? (v - lo_v) / range : 0.0f;
  return out;
}

inline constexpr std::string_view minicube_magic = "MCB1";
inline constexpr std::uint32_t minicube_version = 1;

inline std::vector<std::uint8_t> encode_minicube(const Minicube& cube) {
  cube.validate();
  io::ByteWriter w;
  w.magic(minicube_magic);
  w.scalar(minicube_version);
  w.scalar(static_cast<std::uint32_t>(cube.steps()));
  w.scalar(static_cast<std::uint32_t>(cube.height()));
  w.scalar(static_cast<std::uint32_t>(cube.width()));
  w.scalar(static_cast<std::uint32_t>(cube.driver_count()));
  w.scalar(static_cast<std::uint32_t>(cube.n));
  w.scalar(static_cast<std::uint32_t>(cube.k));
  w.array(cube.ndvi.data());
  w.array(cube.drivers.data());
  w.array(cube.topography.data());
  w.array(std::span<const std::uint16_t>(cube.landcover));
  w.array(std::span<const std::uint8_t>(cube.mask));
  w.seal();
  return w.bytes();
}

inline Minicube decode_minicube(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(minicube_magic);
  const auto version = r.scalar<std::uint32_t>();
  if (version != minicube_version) {
    throw Error(ErrorCode::version_mismatch, "minicube version " + std::to_string(version));
  }
  const std::size_t t = r.scalar<std::uint32_t>();
  const std::size_t h = r.scalar<std::uint32_t>();
  const std::size_t w = r.scalar<std::uint32_t>();
  const std::size_t d = r.scalar<std::uint32_t>();
  Minicube cube;
  cube.n = r.scalar<std::uint32_t>();
  cube.k = r.scalar<std::uint32_t>();
  const std::size_t expected = t * h * w * 5 + t * d * 4 + h * w * 6 + 8;
  if (r.remaining() < expected) {
    throw Error(ErrorCode::truncated, "payload has " + std::to_string(r.remaining()) + " bytes, header implies " +
                                          std::to_string(expected));
  }
  cube.ndvi = Tensor(Shape{t, h, w}, r.array<float>(t * h * w));
  cube.drivers = Tensor(Shape{t, d}, r.array<float>(t * d));
  cube.topography = Tensor(Shape{1, h, w}, r.array<float>(h * w));
  cube.landcover = r.array<std::uint16_t>(h * w);
  cube.mask = r.array<std::uint8_t>(t * h * w);
  r.verify_seal();
  cube.validate();
  return cube;
}

inline void save_minicube(const Minicube& cube, const std::filesystem::path& path) {
  io::write_file(path, encode_minicube(cube));
}

/// Loads a cube; meta.sample_id is the file stem.
inline Minicube load_minicube(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  Minicube cube = decode_minicube(bytes);
  cube.meta.sample_id = path.stem().string();
  return cube;
}

/// Reads a manifest: one cube path per line, '#' starts a comment. Relative
/// entries resolve against the manifest's directory.
inline std::vector<std::filesystem::path> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw Error(ErrorCode::io, "cannot open manifest " + manifest.string());
  std::vector<std::filesystem::path> out;
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    std::filesystem::path p = line.substr(first, last - first + 1);
    out.push_back(p.is_absolute() ? p : manifest.parent_path() / p);
  }
  return out;
}

inline void write_manifest(const std::filesystem::path& manifest, std::span<const std::filesystem::path> entries,
                           const std::string& header = {}) {
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + manifest.string() + " for writing");
  if (!header.empty()) out << "# " << header << '\n';
  for (const auto& e : entries) out << e.generic_string() << '\n';
  if (!out) throw Error(ErrorCode::io, "write failed for " + manifest.string());
}

}  // namespace vegcast
