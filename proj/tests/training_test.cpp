#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "vegcast/evaluation.hpp"
#include "vegcast/synthgen.hpp"
#include "vegcast/training.hpp"

using namespace vegcast;
namespace fs = std::filesystem;

namespace {

ForecastConfig small_cfg() {
  ForecastConfig cfg;
  cfg.n = 4;
  cfg.k = 2;
  cfg.height = cfg.width = 16;
  cfg.hidden_channels = 4;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.steps_per_year = 4;
  return cfg;
}

GeneratorConfig small_gen(const ForecastConfig& cfg) {
  GeneratorConfig g;
  g.n = cfg.n;
  g.k = cfg.k;
  g.height = cfg.height;
  g.width = cfg.width;
  return g;
}

std::vector<Minicube> small_set(std::size_t count, double p_cloud = 0.3) {
  auto g = small_gen(small_cfg());
  g.p_cloud = p_cloud;
  std::vector<Minicube> cubes;
  for (std::size_t i = 0; i < count; ++i) cubes.push_back(generate_minicube(g, i));
  return cubes;
}

bool same_log_ignoring_time(const TrainLog& a, const TrainLog& b) {
  if (a.epochs.size() != b.epochs.size() || a.best_epoch != b.best_epoch || a.config_echo != b.config_echo) return false;
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    const auto &x = a.epochs[i], &y = b.epochs[i];
    if (x.epoch != y.epoch || x.train_loss != y.train_loss) return false;
    if (!(x.val_rmse == y.val_rmse || (std::isnan(x.val_rmse) && std::isnan(y.val_rmse)))) return false;
  }
  return true;
}

}  // namespace

TEST(MaskedLoss, Examples) {
  Tape tape;
  Tensor target(Shape{2, 2}, std::vector<float>{0.1f, 0.2f, 0.3f, 0.4f});
  std::vector<std::uint8_t> all(4, 1), half{1, 0, 1, 0}, none(4, 0);
  EXPECT_EQ(masked_l2_loss(tape.constant(target), target, all).value.value()[0], 0.0f);

  Tensor pred(Shape{2, 2}, std::vector<float>{1.1f, 7.0f, 1.3f, -3.0f});
  const auto l = masked_l2_loss(tape.constant(pred), target, half);
  EXPECT_NEAR(l.value.value()[0], 1.0f, 1e-6);
  EXPECT_EQ(l.valid_count, 2u);

  const auto skipped = masked_l2_loss(tape.constant(pred), target, none);
  EXPECT_TRUE(skipped.skipped);
  EXPECT_EQ(skipped.value.value()[0], 0.0f);
}

TEST(MaskedLoss, ShapeMismatchIsAnError) {
  Tape tape;
  Tensor a(Shape{2, 2}), b(Shape{4});
  std::vector<std::uint8_t> m(4, 1);
  EXPECT_THROW(masked_l2_loss(tape.constant(a), b, m), Error);
  std::vector<std::uint8_t> short_mask(3, 1);
  EXPECT_THROW(masked_l2_loss(tape.constant(a), a, short_mask), Error);
}

TEST(MaskedLoss, MaskedTargetsDoNotReachLossOrGradients) {
  const auto cfg = small_cfg();
  auto cube = small_set(1, 0.6)[0];
  const auto params = init_params(ModelDims::from(cfg), 3);
  const auto base = sample_gradient(prepare_sample(cube, cfg), params);
  ASSERT_FALSE(base.skipped);

  const std::size_t hw = cube.pixels();
  std::size_t perturbed = 0;
  for (std::size_t i = cfg.n * hw; i < cube.mask.size(); ++i) {
    if (cube.mask[i]) continue;
    cube.ndvi[i] = cube.ndvi[i] > 0 ? -0.9f : 0.9f;
    ++perturbed;
  }
  ASSERT_GT(perturbed, 0u);
  const auto after = sample_gradient(prepare_sample(cube, cfg), params);
  EXPECT_EQ(after.loss, base.loss);
  ASSERT_EQ(after.grads.size(), base.grads.size());
  for (std::size_t i = 0; i < base.grads.size(); ++i) EXPECT_EQ(after.grads[i], base.grads[i]) << "param " << i;
}

TEST(MaskedLoss, ContextFramesAreNotSupervised) {
  const auto cfg = small_cfg();
  const auto cube = small_set(1)[0];
  const auto params = init_params(ModelDims::from(cfg), 4);
  const auto sample = prepare_sample(cube, cfg);
  // Same network inputs, different context targets: only the horizon slice
  // is compared against predictions, so nothing else can change the loss.
  Minicube other = cube;
  for (std::size_t i = 0; i < cfg.n * cube.pixels(); ++i) other.ndvi[i] += 0.25f;
  const auto other_sample = prepare_sample(other, cfg);
  EXPECT_EQ(other_sample.target, sample.target);
  EXPECT_EQ(other_sample.mask, sample.mask);

  Tape tape;
  const auto tracked = track(tape, params, false);
  auto pred = forward(tape, sample.inputs, tracked, params.dims);
  const float l1 = masked_l2_loss(pred, sample.target, sample.mask).value.value()[0];
  const float l2 = masked_l2_loss(pred, other_sample.target, other_sample.mask).value.value()[0];
  EXPECT_EQ(l1, l2);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstTheSign) {
  Tensor p(Shape{4}, std::vector<float>{0.5f, 0.5f, -0.2f, 1.0f});
  const Tensor g(Shape{4}, std::vector<float>{3.0f, -0.01f, 1e-3f, -250.0f});
  AdamState state;
  std::vector<Tensor*> ptrs{&p};
  adam_step(ptrs, std::span(&g, 1), state, AdamOptions{0.01});
  EXPECT_NEAR(p[0], 0.49f, 1e-6);
  EXPECT_NEAR(p[1], 0.51f, 1e-6);
  EXPECT_NEAR(p[2], -0.21f, 1e-6);
  EXPECT_NEAR(p[3], 1.01f, 1e-6);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor p(Shape{3}, std::vector<float>{0.1f, -0.2f, 0.3f});
  const Tensor before = p;
  const Tensor g(Shape{3});
  AdamState state;
  std::vector<Tensor*> ptrs{&p};
  for (int i = 0; i < 5; ++i) adam_step(ptrs, std::span(&g, 1), state, AdamOptions{});
  EXPECT_EQ(p, before);
}

TEST(Adam, EqualGradientsGiveEqualUpdates) {
  Tensor a(Shape{2}, std::vector<float>{0.3f, 0.3f}), b(Shape{2}, std::vector<float>{0.3f, 0.3f});
  const std::vector<Tensor> g{Tensor(Shape{2}, std::vector<float>{0.7f, -0.4f}),
                              Tensor(Shape{2}, std::vector<float>{0.7f, -0.4f})};
  AdamState state;
  std::vector<Tensor*> ptrs{&a, &b};
  for (int i = 0; i < 3; ++i) adam_step(ptrs, g, state, AdamOptions{});
  EXPECT_EQ(a, b);
}

TEST(Adam, NonFiniteGradientAbortsWithLocation) {
  Tensor p(Shape{3});
  const Tensor g(Shape{3}, std::vector<float>{0.0f, std::nanf(""), 0.0f});
  AdamState state;
  std::vector<Tensor*> ptrs{&p};
  try {
    adam_step(ptrs, std::span(&g, 1), state, AdamOptions{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite);
    EXPECT_NE(std::string(e.what()).find("element 1"), std::string::npos);
  }
  EXPECT_EQ(state.step, 0u);
}

TEST(Train, SameSeedGivesIdenticalLogAndParameters) {
  const auto cubes = small_set(6);
  const auto cfg = small_cfg();
  const auto a = train(std::span(cubes).first(5), std::span(cubes).last(1), cfg);
  const auto b = train(std::span(cubes).first(5), std::span(cubes).last(1), cfg);
  EXPECT_TRUE(same_log_ignoring_time(a.log, b.log));
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.log.epochs.size(), cfg.epochs);
  for (const auto& e : a.log.epochs) EXPECT_TRUE(std::isfinite(e.val_rmse));
}

TEST(Train, ThreadCountDoesNotChangeTheResult) {
  const auto cubes = small_set(6);
  auto cfg = small_cfg();
  cfg.batch_size = 3;
  const auto one = train(cubes, {}, cfg);
  cfg.threads = 3;
  const auto three = train(cubes, {}, cfg);
  EXPECT_EQ(one.params, three.params);
  for (std::size_t i = 0; i < one.log.epochs.size(); ++i) {
    EXPECT_EQ(one.log.epochs[i].train_loss, three.log.epochs[i].train_loss);
  }
}

TEST(Train, DifferentSeedsDiffer) {
  const auto cubes = small_set(4);
  auto cfg = small_cfg();
  const auto a = train(cubes, {}, cfg);
  cfg.seed = 2;
  const auto b = train(cubes, {}, cfg);
  EXPECT_NE(a.params, b.params);
}

TEST(Train, LandcoverIsNotReadBeyondTheMask) {
  auto cubes = small_set(4);
  const auto cfg = small_cfg();
  const auto a = train(cubes, {}, cfg);
  for (auto& c : cubes) {
    for (auto& code : c.landcover) code = static_cast<std::uint16_t>(code ^ 0x5);
  }
  const auto b = train(cubes, {}, cfg);
  EXPECT_EQ(a.params, b.params);
}

TEST(Train, LossDecreasesOnASingleCube) {
  auto g = small_gen(small_cfg());
  g.p_cloud = 0;
  g.obs_noise = 0;
  const std::vector<Minicube> cubes{generate_minicube(g, 2)};
  auto cfg = small_cfg();
  cfg.epochs = 60;
  cfg.batch_size = 1;
  const auto r = train(cubes, {}, cfg);
  EXPECT_LT(r.log.epochs.back().train_loss, 0.5 * r.log.epochs.front().train_loss);
  EXPECT_GE(r.log.best_epoch, 1u);
}

TEST(Train, EmptySplitsAndUnsupervisedSetsAreErrors) {
  const auto cfg = small_cfg();
  EXPECT_THROW(train(std::span<const Minicube>{}, {}, cfg), Error);
  auto cubes = small_set(2);
  for (auto& c : cubes) std::fill(c.mask.begin(), c.mask.end(), 0);
  EXPECT_THROW(train(cubes, {}, cfg), Error);
}

TEST(Train, CheckpointHoldsTheBestParameters) {
  const auto cubes = small_set(4);
  const auto cfg = small_cfg();
  const fs::path dir = fs::path(VEGCAST_TEST_TMP) / "training";
  fs::create_directories(dir);
  TrainOptions opts;
  opts.checkpoint = dir / "best.mcw";
  std::size_t callbacks = 0;
  opts.on_epoch = [&](const EpochRecord&) { ++callbacks; };
  const auto r = train(std::span(cubes).first(3), std::span(cubes).last(1), cfg, opts);
  EXPECT_EQ(callbacks, cfg.epochs);
  EXPECT_EQ(load_checkpoint(*opts.checkpoint), r.params);
}

TEST(ValidationSplit, HashBasedAndStable) {
  GeneratorConfig g;
  g.height = g.width = 8;
  std::vector<Minicube> cubes;
  for (std::size_t i = 0; i < 25; ++i) cubes.push_back(generate_minicube(g, i));
  const auto split = validation_split(cubes, 0.1);
  EXPECT_EQ(std::count(split.begin(), split.end(), true), 3);
  // Order of the list does not matter, only the ids.
  std::vector<Minicube> reversed(cubes.rbegin(), cubes.rend());
  const auto split_rev = validation_split(reversed, 0.1);
  for (std::size_t i = 0; i < cubes.size(); ++i) EXPECT_EQ(split[i], split_rev[cubes.size() - 1 - i]);
  const auto none = validation_split(cubes, 0.0);
  EXPECT_EQ(std::count(none.begin(), none.end(), true), 0);
}

TEST(TrainLog, CsvLayout) {
  TrainLog log;
  log.seed = 7;
  log.config_echo = "n=1";
  log.best_epoch = 2;
  log.epochs = {{1, 0.5, 0.4, 1.5}, {2, 0.25, 0.3, 1.25}};
  const fs::path dir = fs::path(VEGCAST_TEST_TMP) / "training";
  fs::create_directories(dir);
  log.write_csv(dir / "log.csv");
  std::ifstream in(dir / "log.csv");
  std::string l1, l2, l3, l4, l5;
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, l3);
  std::getline(in, l4);
  std::getline(in, l5);
  EXPECT_EQ(l1, "# optimizer=adam(beta1=0.9,beta2=0.999,eps=1e-8) seed=7 best_epoch=2");
  EXPECT_EQ(l2, "# n=1");
  EXPECT_EQ(l3, "epoch,train_loss,val_rmse,seconds");
  EXPECT_EQ(l4, "1,0.5,0.4,1.5");
  EXPECT_EQ(l5, "2,0.25,0.3,1.25");
}

TEST(Train, ManifestEntryPoint) {
  auto cfg = small_cfg();
  cfg.epochs = 1;
  const fs::path dir = fs::path(VEGCAST_TEST_TMP) / "training" / "data";
  fs::remove_all(dir);
  const auto manifest = generate_dataset(small_gen(cfg), 10, dir);
  const auto r = train(manifest, cfg);
  EXPECT_EQ(r.log.epochs.size(), 1u);
  EXPECT_TRUE(std::isfinite(r.log.epochs[0].val_rmse));
  cfg.val_fraction = 0;
  EXPECT_TRUE(std::isnan(train(manifest, cfg).log.epochs[0].val_rmse));
}
