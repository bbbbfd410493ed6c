#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "vegcast/config.hpp"

using namespace vegcast;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(std::string_view text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error for: " << text;
  return ErrorCode::io;
}

}  // namespace

TEST(Config, EmptyTextIsTheDeskProfile) {
  const auto c = parse_config("");
  EXPECT_EQ(c.profile, "desk");
  EXPECT_EQ(c.forecast.n, 12u);
  EXPECT_EQ(c.forecast.k, 4u);
  EXPECT_EQ(c.forecast.lr, 1e-3);
  EXPECT_EQ(c.forecast.batch_size, 4u);
  EXPECT_EQ(c.forecast.epochs, 50u);
  EXPECT_EQ(c.generator.n, 12u);
}

TEST(Config, PaperProfileIsAppliedFirst) {
  const auto c = parse_config("epochs = 2\nprofile=paper\n");
  EXPECT_EQ(c.profile, "paper");
  EXPECT_EQ(c.forecast.epochs, 2u);
  EXPECT_EQ(c.forecast.n, 36u);
  EXPECT_EQ(c.forecast.k, 9u);
  EXPECT_EQ(c.forecast.height, 128u);
  EXPECT_EQ(c.forecast.lr, 1e-6);
  EXPECT_EQ(c.forecast.batch_size, 32u);
  EXPECT_EQ(c.forecast.steps_per_year, 36u);
  EXPECT_EQ(c.generator.n, 36u);
  EXPECT_EQ(c.generator.height, 128u);
}

TEST(Config, SharedGeometryKeysSetBothSides) {
  const auto c = parse_config("height=16\nwidth=16\nn=6 # trailing comment\nk=2\n# comment line\n\n");
  EXPECT_EQ(c.forecast.height, 16u);
  EXPECT_EQ(c.generator.width, 16u);
  EXPECT_EQ(c.forecast.n, 6u);
  EXPECT_EQ(c.generator.k, 2u);
}

TEST(Config, SeedsAreSeparate) {
  const auto c = parse_config("seed=5\ndata_seed=9\nablate_weather=true\np_miss=0.25\n");
  EXPECT_EQ(c.forecast.seed, 5u);
  EXPECT_EQ(c.generator.seed, 9u);
  EXPECT_TRUE(c.forecast.ablate_weather);
  EXPECT_EQ(c.generator.p_miss, 0.25);
}

TEST(Config, Errors) {
  EXPECT_EQ(code_of("nope=1"), ErrorCode::config);
  EXPECT_EQ(code_of("n=1\nn=2"), ErrorCode::config);
  EXPECT_EQ(code_of("n"), ErrorCode::config);
  EXPECT_EQ(code_of("n=abc"), ErrorCode::config);
  EXPECT_EQ(code_of("n=3x"), ErrorCode::config);
  EXPECT_EQ(code_of("lr=-1"), ErrorCode::config);
  EXPECT_EQ(code_of("kernel_size=4"), ErrorCode::config);
  EXPECT_EQ(code_of("ablate_weather=maybe"), ErrorCode::config);
  EXPECT_EQ(code_of("profile=huge"), ErrorCode::config);
  EXPECT_EQ(code_of("p_cloud=1.5"), ErrorCode::config);
  EXPECT_EQ(code_of("height=16\nwidth=32"), ErrorCode::config);
}

TEST(Config, CanonicalTextRoundTrips) {
  const auto c = parse_config("profile=desk\nlr=0.0025\nhidden_channels=8\np_cloud=0.35\ndata_seed=77\nthreads=2\n");
  const std::string text = to_text(c);
  const auto back = parse_config(text);
  EXPECT_EQ(to_text(back), text);
  EXPECT_EQ(back.forecast.lr, 0.0025);
  EXPECT_EQ(back.forecast.hidden_channels, 8u);
  EXPECT_EQ(back.generator.p_cloud, 0.35);
  EXPECT_EQ(back.generator.seed, 77u);
  EXPECT_EQ(back.forecast.threads, 2u);
}

TEST(Config, LoadFromFile) {
  const fs::path dir = fs::path(VEGCAST_TEST_TMP) / "config";
  fs::create_directories(dir);
  std::ofstream(dir / "run.cfg") << "epochs=3\r\nbatch_size=2\r\n";
  const auto c = load_config(dir / "run.cfg");
  EXPECT_EQ(c.forecast.epochs, 3u);
  EXPECT_EQ(c.forecast.batch_size, 2u);
  try {
    load_config(dir / "missing.cfg");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::config);
  }
}
