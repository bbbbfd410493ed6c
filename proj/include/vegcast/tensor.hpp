#pragma once

// Dense row-major tensors and a reverse-mode tape covering the operations the
// ConvLSTM needs: same-padded conv2d, elementwise arithmetic and gate
// nonlinearities, channel concat/slice, clamp, scale and sum.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "vegcast/error.hpp"

namespace vegcast {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw Error(ErrorCode::shape_mismatch, "shape " + shape_string(shape_) + " does not hold " +
                                                 std::to_string(data_.size()) + " values");
    }
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t c, std::size_t y, std::size_t x) { return data_[(c * shape_[1] + y) * shape_[2] + x]; }
  const T& at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  /// Contiguous block of the leading axis, e.g. frame t of a [T,H,W] tensor.
  std::span<const T> slab(std::size_t i) const {
    const std::size_t n = data_.size() / shape_.at(0);
    return std::span<const T>(data_).subspan(i * n, n);
  }
  std::span<T> slab(std::size_t i) {
    const std::size_t n = data_.size() / shape_.at(0);
    return std::span<T>(data_).subspan(i * n, n);
  }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

template <class T>
class BasicTape;

/// Handle to a value recorded on a tape.
template <class T>
struct BasicVar {
  BasicTape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

/// Append-only record of operations. Node ids are assigned in creation order,
/// so every node's inputs precede it and a reverse sweep is a valid
/// topological order for backpropagation.
template <class T>
class BasicTape {
 public:
  using Var = BasicVar<T>;
  /// Receives the upstream gradient of the node being visited and adds
  /// contributions into its inputs via accumulate().
  using BackwardFn = std::function<void(BasicTape&, std::span<const T> grad_out)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Var leaf(BasicTensor<T> value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, {});
  }

  Var constant(BasicTensor<T> value) { return leaf(std::move(value), false); }

  /// Records an op result. The node tracks gradients iff any input does; the
  /// backward closure is dropped otherwise.
  Var record(BasicTensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var record(BasicTensor<T> value, std::span<const Var> inputs, BackwardFn fn) {
    bool tracked = false;
    for (const Var& in : inputs) {
      check_owned(in);
      tracked = tracked || nodes_[in.id].requires_grad;
    }
    if (check_finite_ && !value.all_finite()) {
      throw Error(ErrorCode::non_finite, "op produced a non-finite value at node " + std::to_string(nodes_.size()));
    }
    return push(std::move(value), tracked, tracked ? std::move(fn) : BackwardFn{});
  }

  const BasicTensor<T>& value(Var v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }

  bool requires_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id].requires_grad;
  }

  /// Adds `g` into the gradient of `v`; no-op for untracked nodes.
  void accumulate(Var v, std::span<const T> g) {
    Node& node = nodes_[v.id];
    if (!node.requires_grad) return;
    if (node.grad.empty()) node.grad.assign(node.value.size(), T{0});
    for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
  }

  /// Mutable gradient buffer of `v`, allocated on first use. Only valid for
  /// tracked nodes.
  std::span<T> grad_buffer(Var v) {
    Node& node = nodes_[v.id];
    if (node.grad.empty()) node.grad.assign(node.value.size(), T{0});
    return node.grad;
  }

  void backward(Var loss) {
    check_owned(loss);
    if (consumed_) throw Error(ErrorCode::tape_state, "tape already consumed by a backward pass");
    if (nodes_[loss.id].value.size() != 1) {
      throw Error(ErrorCode::shape_mismatch,
                  "loss must be scalar, got " + shape_string(nodes_[loss.id].value.shape()));
    }
    consumed_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss)[0] = T{1};
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (!node.backward || node.grad.empty()) continue;
      node.backward(*this, node.grad);
    }
  }

  /// Gradient of a tracked leaf after backward(); zeros if nothing reached
  /// it, nullopt for untracked values.
  std::optional<BasicTensor<T>> grad(Var v) const {
    check_owned(v);
    const Node& node = nodes_[v.id];
    if (!node.requires_grad) return std::nullopt;
    if (node.grad.empty()) return BasicTensor<T>(node.value.shape());
    return BasicTensor<T>(node.value.shape(), node.grad);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  void set_check_finite(bool on) noexcept { check_finite_ = on; }

 private:
  struct Node {
    BasicTensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(BasicTensor<T> value, bool requires_grad, BackwardFn fn) {
    if (consumed_) throw Error(ErrorCode::tape_state, "cannot record on a consumed tape");
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  void check_owned(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw Error(ErrorCode::tape_state, "variable does not belong to this tape");
    }
  }

  // A deque keeps value() references valid while later ops are recorded.
  std::deque<Node> nodes_;
  bool consumed_ = false;
#ifdef NDEBUG
  bool check_finite_ = false;
#else
  bool check_finite_ = true;
#endif
};

using Tape = BasicTape<float>;
using Var = BasicVar<float>;

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw Error(ErrorCode::shape_mismatch, std::string(op) + ": " + shape_string(a) + " vs " + shape_string(b));
  }
}

// cols[(c*kh + dy)*kw + dx, y*W + x] = in[c, y+dy-kh/2, x+dx-kw/2], zero outside.
template <class T>
void im2col(std::span<const T> in, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::span<T> cols) {
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2);
  const auto pw = static_cast<std::ptrdiff_t>(kw / 2);
  const auto ih = static_cast<std::ptrdiff_t>(h);
  const auto iw = static_cast<std::ptrdiff_t>(w);
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = in.data() + c * h * w;
    for (std::size_t dy = 0; dy < kh; ++dy) {
      for (std::size_t dx = 0; dx < kw; ++dx, ++row) {
        T* out = cols.data() + row * h * w;
        const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(dy) - ph;
        const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(dx) - pw;
        for (std::ptrdiff_t y = 0; y < ih; ++y) {
          const std::ptrdiff_t sy = y + oy;
          T* dst = out + y * iw;
          if (sy < 0 || sy >= ih) {
            std::fill(dst, dst + iw, T{0});
            continue;
          }
          const T* src = plane + sy * iw;
          for (std::ptrdiff_t x = 0; x < iw; ++x) {
            const std::ptrdiff_t sx = x + ox;
            dst[x] = (sx >= 0 && sx < iw) ? src[sx] : T{0};
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back onto the input planes.
template <class T>
void col2im_add(std::span<const T> cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh,
                std::size_t kw, std::span<T> in_grad) {
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2);
  const auto pw = static_cast<std::ptrdiff_t>(kw / 2);
  const auto ih = static_cast<std::ptrdiff_t>(h);
  const auto iw = static_cast<std::ptrdiff_t>(w);
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = in_grad.data() + c * h * w;
    for (std::size_t dy = 0; dy < kh; ++dy) {
      for (std::size_t dx = 0; dx < kw; ++dx, ++row) {
        const T* src = cols.data() + row * h * w;
        const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(dy) - ph;
        const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(dx) - pw;
        for (std::ptrdiff_t y = 0; y < ih; ++y) {
          const std::ptrdiff_t sy = y + oy;
          if (sy < 0 || sy >= ih) continue;
          T* dst = plane + sy * iw;
          for (std::ptrdiff_t x = 0; x < iw; ++x) {
            const std::ptrdiff_t sx = x + ox;
            if (sx >= 0 && sx < iw) dst[sx] += src[y * iw + x];
          }
        }
      }
    }
  }
}

template <class T, class Fwd, class Deriv>
BasicVar<T> unary(BasicVar<T> a, Fwd fwd, Deriv deriv) {
  BasicTape<T>& tape = *a.tape;
  const BasicTensor<T>& av = a.value();
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return tape.record(std::move(out), {a}, [a, deriv, self = tape.size()](BasicTape<T>& t, std::span<const T> g) {
    const BasicTensor<T>& x = t.value(a);
    const BasicTensor<T>& y = t.value(BasicVar<T>{&t, self});
    std::span<T> ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
  });
}

}  // namespace detail

/// Same-padded 2-D cross-correlation over a [C_in,H,W] input with a
/// [C_out,C_in,kH,kW] kernel. Kernel dims must be odd.
template <class T>
BasicVar<T> conv2d(BasicVar<T> input, BasicVar<T> kernel, std::optional<BasicVar<T>> bias = std::nullopt) {
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  if (is.size() != 3 || ks.size() != 4) {
    throw Error(ErrorCode::shape_mismatch, "conv2d expects input [C,H,W] and kernel [O,C,kH,kW], got " +
                                               shape_string(is) + " and " + shape_string(ks));
  }
  if (ks[1] != is[0]) {
    throw Error(ErrorCode::shape_mismatch, "conv2d input channels " + std::to_string(is[0]) +
                                               " != kernel input channels " + std::to_string(ks[1]));
  }
  if (ks[2] % 2 == 0 || ks[3] % 2 == 0) {
    throw Error(ErrorCode::shape_mismatch, "conv2d kernel dims must be odd, got " + shape_string(ks));
  }
  const std::size_t cin = is[0], h = is[1], w = is[2], cout = ks[0], kh = ks[2], kw = ks[3];
  const std::size_t patch = cin * kh * kw, hw = h * w;
  if (bias && (bias->shape() != Shape{cout})) {
    throw Error(ErrorCode::shape_mismatch, "conv2d bias must be [" + std::to_string(cout) + "], got " +
                                               shape_string(bias->shape()));
  }

  BasicTape<T>& tape = *input.tape;
  auto cols = std::make_shared<std::vector<T>>(patch * hw);
  detail::im2col<T>(input.value().data(), cin, h, w, kh, kw, *cols);

  BasicTensor<T> out(Shape{cout, h, w});
  {
    detail::ConstMatrixMap<T> k(kernel.value().data().data(), cout, patch);
    detail::ConstMatrixMap<T> c(cols->data(), patch, hw);
    detail::MatrixMap<T> o(out.data().data(), cout, hw);
    o.noalias() = k * c;
    if (bias) {
      const BasicTensor<T>& b = bias->value();
      for (std::size_t oc = 0; oc < cout; ++oc) o.row(oc).array() += b[oc];
    }
  }

  auto fn = [=](BasicTape<T>& t, std::span<const T> g) {
    detail::ConstMatrixMap<T> go(g.data(), cout, hw);
    if (t.requires_grad(kernel)) {
      detail::ConstMatrixMap<T> c(cols->data(), patch, hw);
      detail::MatrixMap<T> gk(t.grad_buffer(kernel).data(), cout, patch);
      gk.noalias() += go * c.transpose();
    }
    if (bias && t.requires_grad(*bias)) {
      std::span<T> gb = t.grad_buffer(*bias);
      for (std::size_t oc = 0; oc < cout; ++oc) gb[oc] += go.row(oc).sum();
    }
    if (t.requires_grad(input)) {
      detail::ConstMatrixMap<T> k(t.value(kernel).data().data(), cout, patch);
      std::vector<T> gcols(patch * hw);
      detail::MatrixMap<T> gc(gcols.data(), patch, hw);
      gc.noalias() = k.transpose() * go;
      detail::col2im_add<T>(gcols, cin, h, w, kh, kw, t.grad_buffer(input));
    }
  };
  if (bias) return tape.record(std::move(out), {input, kernel, *bias}, std::move(fn));
  return tape.record(std::move(out), {input, kernel}, std::move(fn));
}

template <class T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  const BasicTensor<T>& av = a.value();
  const BasicTensor<T>& bv = b.value();
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](BasicTape<T>& t, std::span<const T> g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <class T>
BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  const BasicTensor<T>& av = a.value();
  const BasicTensor<T>& bv = b.value();
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](BasicTape<T>& t, std::span<const T> g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) {
      std::span<T> gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  const BasicTensor<T>& av = a.value();
  const BasicTensor<T>& bv = b.value();
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](BasicTape<T>& t, std::span<const T> g) {
    const BasicTensor<T>& x = t.value(a);
    const BasicTensor<T>& y = t.value(b);
    if (t.requires_grad(a)) {
      std::span<T> ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (t.requires_grad(b)) {
      std::span<T> gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

template <class T>
T sigmoid_value(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <class T>
BasicVar<T> sigmoid(BasicVar<T> a) {
  return detail::unary(a, [](T x) { return sigmoid_value(x); }, [](T, T y) { return y * (T{1} - y); });
}

template <class T>
BasicVar<T> tanh(BasicVar<T> a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
BasicVar<T> scale(BasicVar<T> a, T factor) {
  return detail::unary(a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

/// Elementwise clamp; gradient passes through where lo <= x <= hi.
template <class T>
BasicVar<T> clamp(BasicVar<T> a, T lo, T hi) {
  return detail::unary(
      a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T{1} : T{0}; });
}

enum class ElementwiseOp { add, sub, mul, sigmoid, tanh };

template <class T>
BasicVar<T> elementwise(ElementwiseOp op, BasicVar<T> a, std::optional<BasicVar<T>> b = std::nullopt) {
  const bool binary = op == ElementwiseOp::add || op == ElementwiseOp::sub || op == ElementwiseOp::mul;
  if (binary != b.has_value()) {
    throw Error(ErrorCode::invalid_argument, binary ? "binary op needs two operands" : "unary op takes one operand");
  }
  switch (op) {
    case ElementwiseOp::add: return add(a, *b);
    case ElementwiseOp::sub: return sub(a, *b);
    case ElementwiseOp::mul: return mul(a, *b);
    case ElementwiseOp::sigmoid: return sigmoid(a);
    case ElementwiseOp::tanh: return tanh(a);
  }
  throw Error(ErrorCode::invalid_argument, "unknown elementwise op");
}

/// Sum of all entries, as a rank-0 tensor.
template <class T>
BasicVar<T> sum(BasicVar<T> a) {
  const BasicTensor<T>& av = a.value();
  const T total = std::accumulate(av.data().begin(), av.data().end(), T{0});
  return a.tape->record(BasicTensor<T>::scalar(total), {a}, [a](BasicTape<T>& t, std::span<const T> g) {
    std::span<T> ga = t.grad_buffer(a);
    for (T& v : ga) v += g[0];
  });
}

/// Concatenation along the leading axis; trailing dims must agree.
template <class T>
BasicVar<T> concat(std::span<const BasicVar<T>> parts) {
  if (parts.empty()) throw Error(ErrorCode::invalid_argument, "concat of zero tensors");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t lead = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.empty() || Shape(s.begin() + 1, s.end()) != tail) {
      throw Error(ErrorCode::shape_mismatch, "concat: " + shape_string(s) + " vs trailing " + shape_string(tail));
    }
    lead += s[0];
  }
  Shape out_shape = tail;
  out_shape.insert(out_shape.begin(), lead);
  std::vector<T> data;
  data.reserve(shape_size(out_shape));
  for (const auto& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());

  std::vector<BasicVar<T>> inputs(parts.begin(), parts.end());
  return parts[0].tape->record(BasicTensor<T>(std::move(out_shape), std::move(data)), std::span<const BasicVar<T>>(inputs),
                     [inputs](BasicTape<T>& t, std::span<const T> g) {
                       std::size_t offset = 0;
                       for (const auto& p : inputs) {
                         const std::size_t n = t.value(p).size();
                         t.accumulate(p, g.subspan(offset, n));
                         offset += n;
                       }
                     });
}

template <class T>
BasicVar<T> concat(std::initializer_list<BasicVar<T>> parts) {
  return concat(std::span<const BasicVar<T>>(parts.begin(), parts.size()));
}

/// Rows [begin, end) of the leading axis.
template <class T>
BasicVar<T> slice(BasicVar<T> a, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (s.empty() || begin >= end || end > s[0]) {
    throw Error(ErrorCode::shape_mismatch, "slice [" + std::to_string(begin) + "," + std::to_string(end) +
                                               ") out of range for " + shape_string(s));
  }
  const std::size_t inner = a.value().size() / s[0];
  Shape out_shape = s;
  out_shape[0] = end - begin;
  auto first = a.value().data().begin() + static_cast<std::ptrdiff_t>(begin * inner);
  std::vector<T> data(first, first + static_cast<std::ptrdiff_t>((end - begin) * inner));
  return a.tape->record(BasicTensor<T>(std::move(out_shape), std::move(data)), {a},
                        [a, offset = begin * inner](BasicTape<T>& t, std::span<const T> g) {
                          std::span<T> ga = t.grad_buffer(a);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
                        });
}

}  // namespace vegcast
