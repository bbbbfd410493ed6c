#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "vegcast/gradcheck.hpp"
#include "vegcast/tensor.hpp"

using namespace vegcast;

namespace {

template <class T = float>
BasicTensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

}  // namespace

TEST(Tensor, ShapeAndSizeAgree) {
  Tensor t(Shape{2, 3, 4}, 1.5f);
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_FLOAT_EQ(t.at(1, 2, 3), 1.5f);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<float>(3)), Error);
}

TEST(Tensor, SlabIsContiguousLeadingBlock) {
  Tensor t(Shape{3, 2}, std::vector<float>{0, 1, 2, 3, 4, 5});
  auto s = t.slab(1);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0], 2);
  EXPECT_EQ(s[1], 3);
}

TEST(Conv2d, IdentityKernelCopiesInput) {
  Tape tape;
  auto x = tape.constant(random_tensor(Shape{1, 5, 5}, 1));
  auto k = tape.constant(Tensor(Shape{1, 1, 1, 1}, 1.0f));
  auto b = tape.constant(Tensor(Shape{1}, 0.0f));
  EXPECT_EQ(conv2d(x, k, std::optional(b)).value(), x.value());
}

TEST(Conv2d, ConstantInputAllOnesKernel) {
  const float v = 0.7f;
  Tape tape;
  auto x = tape.constant(Tensor(Shape{1, 6, 6}, v));
  auto k = tape.constant(Tensor(Shape{1, 1, 3, 3}, 1.0f));
  const Tensor out = conv2d(x, k).value();
  EXPECT_FLOAT_EQ(out.at(0, 0, 0), 4 * v);
  EXPECT_FLOAT_EQ(out.at(0, 5, 5), 4 * v);
  EXPECT_FLOAT_EQ(out.at(0, 0, 3), 6 * v);
  EXPECT_FLOAT_EQ(out.at(0, 2, 3), 9 * v);
}

TEST(Conv2d, ZeroKernelGivesBias) {
  Tape tape;
  auto x = tape.constant(random_tensor(Shape{2, 4, 4}, 2));
  auto k = tape.constant(Tensor(Shape{3, 2, 3, 3}, 0.0f));
  auto b = tape.constant(Tensor(Shape{3}, std::vector<float>{0.5f, -1.0f, 2.0f}));
  const Tensor out = conv2d(x, k, std::optional(b)).value();
  for (std::size_t o = 0; o < 3; ++o) {
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(out[o * 16 + i], b.value()[o]);
  }
}

TEST(Conv2d, MatchesDirectSum) {
  const auto in = random_tensor<double>(Shape{2, 5, 4}, 3);
  const auto ker = random_tensor<double>(Shape{3, 2, 3, 5}, 4);
  const auto bias = random_tensor<double>(Shape{3}, 5);
  BasicTape<double> tape;
  const auto out = conv2d(tape.constant(in), tape.constant(ker), std::optional(tape.constant(bias))).value();
  for (std::size_t o = 0; o < 3; ++o) {
    for (int y = 0; y < 5; ++y) {
      for (int x = 0; x < 4; ++x) {
        double acc = bias[o];
        for (std::size_t c = 0; c < 2; ++c) {
          for (int dy = 0; dy < 3; ++dy) {
            for (int dx = 0; dx < 5; ++dx) {
              const int sy = y + dy - 1, sx = x + dx - 2;
              if (sy < 0 || sy >= 5 || sx < 0 || sx >= 4) continue;
              acc += in.at(c, sy, sx) * ker[((o * 2 + c) * 3 + dy) * 5 + dx];
            }
          }
        }
        EXPECT_NEAR(out.at(o, y, x), acc, 1e-12);
      }
    }
  }
}

TEST(Conv2d, IsLinearInInput) {
  Tape tape;
  const auto a = random_tensor(Shape{3, 7, 7}, 6);
  const auto b = random_tensor(Shape{3, 7, 7}, 7);
  auto k = tape.constant(random_tensor(Shape{2, 3, 3, 3}, 8));
  auto bias = tape.constant(random_tensor(Shape{2}, 9));
  const auto va = tape.constant(a), vb = tape.constant(b);
  const Tensor lhs = conv2d(add(va, vb), k, std::optional(bias)).value();
  const Tensor ca = conv2d(va, k).value(), cb = conv2d(vb, k).value();
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    EXPECT_NEAR(lhs[i], ca[i] + cb[i] + bias.value()[i / 49], 1e-5);
  }
}

TEST(Conv2d, RejectsBadShapes) {
  Tape tape;
  auto x = tape.constant(Tensor(Shape{2, 4, 4}));
  EXPECT_THROW(conv2d(x, tape.constant(Tensor(Shape{1, 3, 3, 3}))), Error);
  EXPECT_THROW(conv2d(x, tape.constant(Tensor(Shape{1, 2, 2, 2}))), Error);
  EXPECT_THROW(conv2d(x, tape.constant(Tensor(Shape{1, 2, 3, 3})), std::optional(tape.constant(Tensor(Shape{2})))),
               Error);
  try {
    conv2d(x, tape.constant(Tensor(Shape{1, 2, 2, 3})));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::shape_mismatch);
  }
}

TEST(Elementwise, BasicValues) {
  Tape tape;
  auto zero = tape.constant(Tensor(Shape{3}, 0.0f));
  EXPECT_EQ(elementwise(ElementwiseOp::sigmoid, zero).value(), Tensor(Shape{3}, 0.5f));
  EXPECT_EQ(elementwise(ElementwiseOp::tanh, zero).value(), Tensor(Shape{3}, 0.0f));
  auto a = tape.constant(random_tensor(Shape{2, 3}, 10));
  auto neg = scale(a, -1.0f);
  EXPECT_EQ(elementwise(ElementwiseOp::add, a, std::optional(neg)).value(), Tensor(Shape{2, 3}, 0.0f));
  EXPECT_EQ(sub(a, a).value(), Tensor(Shape{2, 3}, 0.0f));
}

TEST(Elementwise, SigmoidIsStableForLargeInputs) {
  Tape tape;
  auto x = tape.constant(Tensor(Shape{2}, std::vector<float>{-200.0f, 200.0f}));
  const Tensor y = sigmoid(x).value();
  EXPECT_EQ(y[0], 0.0f);
  EXPECT_EQ(y[1], 1.0f);
}

TEST(Elementwise, RejectsShapeMismatchAndWrongArity) {
  Tape tape;
  auto a = tape.constant(Tensor(Shape{3}));
  auto b = tape.constant(Tensor(Shape{4}));
  EXPECT_THROW(add(a, b), Error);
  EXPECT_THROW(mul(a, b), Error);
  EXPECT_THROW(elementwise(ElementwiseOp::add, a), Error);
  EXPECT_THROW(elementwise(ElementwiseOp::tanh, a, std::optional(a)), Error);
}

TEST(Backward, LinearSumGradientIsInput) {
  Tape tape;
  const auto xv = random_tensor(Shape{4, 3}, 11);
  auto w = tape.leaf(random_tensor(Shape{4, 3}, 12), true);
  auto x = tape.constant(xv);
  auto loss = sum(mul(w, x));
  tape.backward(loss);
  EXPECT_EQ(*tape.grad(w), xv);
  EXPECT_FALSE(tape.grad(x).has_value());
}

TEST(Backward, SigmoidGradientAtZero) {
  Tape tape;
  auto w = tape.leaf(Tensor(Shape{5}, 0.0f), true);
  tape.backward(sum(sigmoid(w)));
  EXPECT_EQ(*tape.grad(w), Tensor(Shape{5}, 0.25f));
}

TEST(Backward, ClampBlocksGradientOutsideRange) {
  Tape tape;
  auto w = tape.leaf(Tensor(Shape{3}, std::vector<float>{-2.0f, 0.5f, 3.0f}), true);
  tape.backward(sum(clamp(w, -1.0f, 1.0f)));
  EXPECT_EQ(*tape.grad(w), Tensor(Shape{3}, std::vector<float>{0, 1, 0}));
}

TEST(Backward, FanOutAccumulates) {
  Tape tape;
  auto w = tape.leaf(Tensor(Shape{2}, std::vector<float>{1.5f, -2.0f}), true);
  tape.backward(sum(add(mul(w, w), w)));
  EXPECT_EQ(*tape.grad(w), Tensor(Shape{2}, std::vector<float>{4.0f, -3.0f}));
}

TEST(Backward, UnreachedLeafGetsZeros) {
  Tape tape;
  auto w = tape.leaf(Tensor(Shape{2}, 1.0f), true);
  auto unused = tape.leaf(Tensor(Shape{3}, 1.0f), true);
  tape.backward(sum(w));
  EXPECT_EQ(*tape.grad(unused), Tensor(Shape{3}, 0.0f));
}

TEST(Backward, RejectsNonScalarAndReuse) {
  Tape tape;
  auto w = tape.leaf(Tensor(Shape{2}, 1.0f), true);
  try {
    tape.backward(w);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::shape_mismatch);
  }
  auto loss = sum(w);
  tape.backward(loss);
  EXPECT_TRUE(tape.consumed());
  try {
    tape.backward(loss);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::tape_state);
  }
  EXPECT_THROW(tape.constant(Tensor(Shape{1})), Error);
}

TEST(Backward, ForeignVariableRejected) {
  Tape a, b;
  auto x = a.leaf(Tensor(Shape{1}), true);
  EXPECT_THROW(b.value(x), Error);
}

TEST(Tape, NodesAreAppendedInCreationOrder) {
  Tape tape;
  auto a = tape.leaf(Tensor(Shape{2}, 1.0f), true);
  auto b = tanh(a);
  auto c = add(a, b);
  EXPECT_LT(a.id, b.id);
  EXPECT_LT(b.id, c.id);
  EXPECT_EQ(tape.size(), 3u);
}

TEST(Tape, FiniteCheckFlagsNonFiniteResults) {
  Tape tape;
  tape.set_check_finite(true);
  auto a = tape.constant(Tensor(Shape{1}, std::numeric_limits<float>::max()));
  try {
    mul(a, a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite);
  }
}

TEST(ConcatSlice, RoundTripAndGradients) {
  Tape tape;
  auto a = tape.leaf(random_tensor(Shape{2, 3}, 13), true);
  auto b = tape.leaf(random_tensor(Shape{1, 3}, 14), true);
  auto c = concat({a, b});
  EXPECT_EQ(c.shape(), (Shape{3, 3}));
  EXPECT_EQ(slice(c, 0, 2).value(), a.value());
  EXPECT_EQ(slice(c, 2, 3).value(), b.value());
  EXPECT_THROW(slice(c, 2, 2), Error);
  EXPECT_THROW(slice(c, 1, 4), Error);
  tape.backward(sum(slice(c, 1, 3)));
  EXPECT_EQ(*tape.grad(a), Tensor(Shape{2, 3}, std::vector<float>{0, 0, 0, 1, 1, 1}));
  EXPECT_EQ(*tape.grad(b), Tensor(Shape{1, 3}, 1.0f));
}

TEST(Determinism, IdenticalInputsGiveIdenticalResults) {
  auto run = [] {
    Tape tape;
    auto x = tape.leaf(random_tensor(Shape{3, 8, 8}, 15), true);
    auto k = tape.leaf(random_tensor(Shape{4, 3, 3, 3}, 16), true);
    auto loss = sum(tanh(conv2d(x, k)));
    tape.backward(loss);
    return std::make_pair(loss.value(), *tape.grad(k));
  };
  EXPECT_EQ(run(), run());
}
