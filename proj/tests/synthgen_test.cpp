#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "vegcast/binary_io.hpp"
#include "vegcast/synthgen.hpp"

using namespace vegcast;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::path(VEGCAST_TEST_TMP) / "synthgen" / name;
  fs::remove_all(dir);
  return dir;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

}  // namespace

TEST(Synthgen, SameIndexIsBitIdentical) {
  GeneratorConfig g;
  g.p_miss = 0.3;
  EXPECT_EQ(encode_minicube(generate_minicube(g, 17)), encode_minicube(generate_minicube(g, 17)));
  EXPECT_NE(encode_minicube(generate_minicube(g, 17)), encode_minicube(generate_minicube(g, 18)));
}

TEST(Synthgen, NoPrecipitationAndDrySoilGivesZeroNdvi) {
  GeneratorConfig g;
  g.precip_amplitude = 0;
  g.soil_init = 0;
  g.obs_noise = 0;
  g.p_cloud = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto s = generate_sample(g, i);
    for (float v : s.clean_ndvi.data()) EXPECT_EQ(v, 0.0f);
    for (double soil : s.soil) EXPECT_EQ(soil, 0.0);
    for (float v : s.cube.ndvi.data()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(Synthgen, NoCloudsMeansMaskEqualsVegetation) {
  GeneratorConfig g;
  g.p_cloud = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const Minicube c = generate_minicube(g, i);
    for (std::size_t t = 0; t < c.steps(); ++t) {
      for (std::size_t p = 0; p < c.pixels(); ++p) EXPECT_EQ(c.valid(t, p), landcover::is_vegetation(c.landcover[p]));
    }
  }
}

TEST(Synthgen, RangesAndFiniteness) {
  GeneratorConfig g;
  g.p_miss = 0.5;
  g.p_cloud = 0.6;
  for (std::size_t i = 0; i < 10; ++i) {
    const auto s = generate_sample(g, i);
    EXPECT_NO_THROW(s.cube.validate());
    for (float v : s.cube.ndvi.data()) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(v, -1.0f);
      EXPECT_LE(v, 1.0f);
    }
    for (double soil : s.soil) {
      EXPECT_GE(soil, 0.0);
      EXPECT_LE(soil, g.bucket_capacity);
    }
    for (double gain : s.gain) {
      if (gain == 0) continue;
      EXPECT_GE(gain, 0.2);
      EXPECT_LE(gain, 0.9);
    }
    for (double p : s.precip) EXPECT_GE(p, 0.0);
    EXPECT_TRUE(s.cube.drivers.all_finite());
  }
}

TEST(Synthgen, DynamicsFollowTheBucketRecursion) {
  GeneratorConfig g;
  const auto s = generate_sample(g, 4);
  const double cmax = g.bucket_capacity, lambda = g.response_lag;
  for (std::size_t t = 0; t + 1 < s.soil.size(); ++t) {
    const double next = std::clamp(s.soil[t] + s.precip[t] - g.et_coef * s.temp[t], 0.0, cmax);
    EXPECT_NEAR(s.soil[t + 1], next, 1e-12);
    EXPECT_NEAR(s.soil_smooth[t + 1], lambda * s.soil_smooth[t] + (1 - lambda) * s.soil[t + 1] / cmax, 1e-12);
  }
  const std::size_t hw = s.cube.pixels();
  for (std::size_t t = 0; t < s.soil.size(); ++t) {
    EXPECT_NEAR(s.cube.drivers[t * 3 + 2], s.soil[t] / cmax, 1e-6);
    for (std::size_t p = 0; p < hw; ++p) {
      EXPECT_NEAR(s.clean_ndvi[t * hw + p], s.gain[p] * s.soil_smooth[t], 1e-6);
    }
  }
}

TEST(Synthgen, HigherElevationReducesGain) {
  GeneratorConfig g;
  const auto s = generate_sample(g, 9);
  const Tensor topo = normalized_topography(s.cube);
  for (std::size_t p = 0; p < s.cube.pixels(); ++p) {
    const auto code = s.cube.landcover[p];
    if (!landcover::is_vegetation(code)) continue;
    const double base = vegetation_gains[code - landcover::first_vegetation];
    EXPECT_NEAR(s.gain[p], base * (1 - topography_gain_reduction * topo[p]), 1e-6);
  }
}

TEST(Synthgen, SoilDriverIsInformative) {
  GeneratorConfig g;
  g.p_cloud = 0;
  double sum_r = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    const Minicube c = generate_minicube(g, i);
    const std::size_t hw = c.pixels();
    std::vector<double> soil;
    for (std::size_t t = c.n; t < c.steps(); ++t) soil.push_back(c.drivers[t * 3 + 2]);
    for (std::size_t p = 0; p < hw; ++p) {
      if (!landcover::is_vegetation(c.landcover[p])) continue;
      std::vector<double> ndvi;
      for (std::size_t t = c.n; t < c.steps(); ++t) ndvi.push_back(c.ndvi[t * hw + p]);
      sum_r += pearson(ndvi, soil);
      ++count;
    }
  }
  EXPECT_GT(sum_r / static_cast<double>(count), 0.5);
}

TEST(Synthgen, UndetectedCloudsLowerObservedGreenness) {
  GeneratorConfig g;
  g.p_miss = 0.5;
  g.p_cloud = 0.4;
  double observed = 0, clean = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto s = generate_sample(g, i);
    for (std::size_t j = 0; j < s.cube.mask.size(); ++j) {
      if (!s.cube.mask[j]) continue;
      observed += s.cube.ndvi[j];
      clean += s.clean_ndvi[j];
    }
  }
  EXPECT_LT(observed, clean);
}

TEST(Synthgen, ConfigValidation) {
  auto expect_config_error = [](GeneratorConfig c) {
    try {
      c.validate();
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::config);
    }
  };
  GeneratorConfig c;
  c.p_cloud = 1.0;
  expect_config_error(c);
  c = {};
  c.response_lag = 1.0;
  expect_config_error(c);
  c = {};
  c.bucket_capacity = 0;
  expect_config_error(c);
  c = {};
  c.p_miss = -0.1;
  expect_config_error(c);
}

TEST(GenerateDataset, ManifestAndPerSampleSeeding) {
  GeneratorConfig g;
  g.height = g.width = 16;
  const auto dir = scratch("ten");
  const auto manifest = generate_dataset(g, 10, dir);
  const auto entries = read_manifest(manifest);
  ASSERT_EQ(entries.size(), 10u);
  const auto single = scratch("seven");
  generate_dataset(g, 1, single, 7);
  EXPECT_EQ(io::read_file(single / cube_file_name(7)), io::read_file(entries[7]));
  EXPECT_EQ(load_minicube(entries[7]).meta.sample_id, generate_minicube(g, 7).meta.sample_id);
}

TEST(GenerateDataset, SeedsChangeChecksums) {
  GeneratorConfig a, b;
  a.height = a.width = b.height = b.width = 16;
  b.seed = a.seed + 1;
  const auto ea = encode_minicube(generate_minicube(a, 0));
  const auto eb = encode_minicube(generate_minicube(b, 0));
  EXPECT_NE(std::vector<std::uint8_t>(ea.end() - 8, ea.end()), std::vector<std::uint8_t>(eb.end() - 8, eb.end()));
}

TEST(GenerateDataset, RejectsZeroCount) {
  EXPECT_THROW(generate_dataset(GeneratorConfig{}, 0, scratch("none")), Error);
}

TEST(Synthgen, YearsOfOneLocationShareTheSite) {
  GeneratorConfig g;
  const Minicube a = generate_minicube(g, 0), b = generate_minicube(g, 1), c = generate_minicube(g, g.years_per_location);
  EXPECT_EQ(a.landcover, b.landcover);
  EXPECT_EQ(a.topography, b.topography);
  EXPECT_NE(a.topography, c.topography);
}
