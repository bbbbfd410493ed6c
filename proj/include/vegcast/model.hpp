#pragma once

// ConvLSTM encoder-forecaster. Two stacked cells consume the context frames
// (NDVI + broadcast drivers + topography); two more cells, initialised from
// the encoder's final states, step through the horizon on drivers and
// topography only. A 1x1 head predicts the per-step NDVI increment that is
// added to the previous prediction, starting from the last context frame.

#include <array>
#include <memory>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "vegcast/binary_io.hpp"
#include "vegcast/error.hpp"
#include "vegcast/minicube.hpp"
#include "vegcast/tensor.hpp"

namespace vegcast {

/// Gate formulation: i, f, o, g from conv(x) + conv(h) + b, without
/// peephole terms.
inline constexpr bool convlstm_peephole = false;

struct ModelDims {
  std::size_t n = 0;
  std::size_t k = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t drivers = 0;
  std::size_t hidden = 0;
  std::size_t kernel = 0;

  static ModelDims from(const ForecastConfig& cfg) {
    return {cfg.n, cfg.k, cfg.height, cfg.width, cfg.drivers, cfg.hidden_channels, cfg.kernel_size};
  }

  std::size_t encoder_inputs() const { return 1 + drivers + 1; }
  std::size_t forecaster_inputs() const { return drivers + 1; }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

enum Cell : std::size_t { encoder1 = 0, encoder2 = 1, forecaster1 = 2, forecaster2 = 3 };

template <class T>
struct CellParams {
  BasicTensor<T> wx;  ///< [4*C_h, C_in, kH, kW], gate blocks i, f, o, g
  BasicTensor<T> wh;  ///< [4*C_h, C_h, kH, kW]
  BasicTensor<T> b;   ///< [4*C_h]

  friend bool operator==(const CellParams&, const CellParams&) = default;
};

template <class T>
struct ConvLstmParams {
  ModelDims dims;
  std::array<CellParams<T>, 4> cells;
  BasicTensor<T> head_w;  ///< [1, C_h, 1, 1]
  BasicTensor<T> head_b;  ///< [1]

  /// All tensors in declaration order (cell by cell: wx, wh, b; then head).
  std::vector<BasicTensor<T>*> tensors() {
    std::vector<BasicTensor<T>*> out;
    for (auto& c : cells) out.insert(out.end(), {&c.wx, &c.wh, &c.b});
    out.insert(out.end(), {&head_w, &head_b});
    return out;
  }
  std::vector<const BasicTensor<T>*> tensors() const {
    std::vector<const BasicTensor<T>*> out;
    for (const auto& c : cells) out.insert(out.end(), {&c.wx, &c.wh, &c.b});
    out.insert(out.end(), {&head_w, &head_b});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto* t : tensors()) total += t->size();
    return total;
  }

  template <class U>
  ConvLstmParams<U> cast() const {
    ConvLstmParams<U> out;
    out.dims = dims;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      out.cells[i] = {cells[i].wx.template cast<U>(), cells[i].wh.template cast<U>(), cells[i].b.template cast<U>()};
    }
    out.head_w = head_w.template cast<U>();
    out.head_b = head_b.template cast<U>();
    return out;
  }

  friend bool operator==(const ConvLstmParams&, const ConvLstmParams&) = default;
};

inline std::size_t cell_input_channels(const ModelDims& dims, std::size_t cell) {
  switch (cell) {
    case encoder1: return dims.encoder_inputs();
    case forecaster1: return dims.forecaster_inputs();
    default: return dims.hidden;
  }
}

/// Zero-valued parameters with the shapes implied by dims.
template <class T>
ConvLstmParams<T> zero_params(const ModelDims& dims) {
  ConvLstmParams<T> p;
  p.dims = dims;
  const std::size_t g = 4 * dims.hidden, kk = dims.kernel;
  for (std::size_t c = 0; c < 4; ++c) {
    p.cells[c].wx = BasicTensor<T>(Shape{g, cell_input_channels(dims, c), kk, kk});
    p.cells[c].wh = BasicTensor<T>(Shape{g, dims.hidden, kk, kk});
    p.cells[c].b = BasicTensor<T>(Shape{g});
  }
  p.head_w = BasicTensor<T>(Shape{1, dims.hidden, 1, 1});
  p.head_b = BasicTensor<T>(Shape{1});
  return p;
}

/// Uniform(+-1/sqrt(fan_in)) weights, zero biases except forget gates at +1.
inline ConvLstmParams<float> init_params(const ModelDims& dims, std::uint64_t seed) {
  auto p = zero_params<float>(dims);
  std::mt19937_64 rng(seed);
  auto fill = [&rng](Tensor& t, std::size_t fan_in) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
    std::uniform_real_distribution<float> dist(-bound, bound);
    for (float& v : t.data()) v = dist(rng);
  };
  const std::size_t kk = dims.kernel * dims.kernel;
  for (std::size_t c = 0; c < 4; ++c) {
    fill(p.cells[c].wx, cell_input_channels(dims, c) * kk);
    fill(p.cells[c].wh, dims.hidden * kk);
    for (std::size_t i = dims.hidden; i < 2 * dims.hidden; ++i) p.cells[c].b[i] = 1.0f;
  }
  fill(p.head_w, dims.hidden);
  return p;
}

template <class T>
struct CellState {
  BasicVar<T> h;
  BasicVar<T> c;
};

template <class T>
struct TrackedCell {
  BasicVar<T> wx, wh, b;
};

template <class T>
struct TrackedParams {
  std::array<TrackedCell<T>, 4> cells;
  BasicVar<T> head_w, head_b;

  std::vector<BasicVar<T>> vars() const {
    std::vector<BasicVar<T>> out;
    for (const auto& c : cells) out.insert(out.end(), {c.wx, c.wh, c.b});
    out.insert(out.end(), {head_w, head_b});
    return out;
  }
};

template <class T>
TrackedParams<T> track(BasicTape<T>& tape, const ConvLstmParams<T>& p, bool requires_grad) {
  TrackedParams<T> out;
  for (std::size_t c = 0; c < 4; ++c) {
    out.cells[c] = {tape.leaf(p.cells[c].wx, requires_grad), tape.leaf(p.cells[c].wh, requires_grad),
                    tape.leaf(p.cells[c].b, requires_grad)};
  }
  out.head_w = tape.leaf(p.head_w, requires_grad);
  out.head_b = tape.leaf(p.head_b, requires_grad);
  return out;
}

/// Wraps already-recorded variables (e.g. from check_gradients) in declaration order.
template <class T>
TrackedParams<T> tracked_from(std::span<const BasicVar<T>> vars) {
  if (vars.size() != 14) throw Error(ErrorCode::invalid_argument, "expected 14 parameter variables");
  TrackedParams<T> out;
  for (std::size_t c = 0; c < 4; ++c) out.cells[c] = {vars[3 * c], vars[3 * c + 1], vars[3 * c + 2]};
  out.head_w = vars[12];
  out.head_b = vars[13];
  return out;
}

template <class T>
CellState<T> zero_state(BasicTape<T>& tape, const ModelDims& dims) {
  const Shape s{dims.hidden, dims.height, dims.width};
  return {tape.constant(BasicTensor<T>(s)), tape.constant(BasicTensor<T>(s))};
}

/// Gate nonlinearities and state update of one cell, fused into a single
/// tape node. gates [4C,H,W] holds pre-activations in order i, f, o, g;
/// returns [2C,H,W] = (h', c') with c' = f*c + i*g and h' = o*tanh(c').
template <class T>
BasicVar<T> lstm_pointwise(BasicVar<T> gates, BasicVar<T> c_prev) {
  const Shape& cs = c_prev.shape();
  const Shape& gs = gates.shape();
  if (cs.empty() || gs.empty() || gs[0] != 4 * cs[0] || Shape(gs.begin() + 1, gs.end()) != Shape(cs.begin() + 1, cs.end())) {
    throw Error(ErrorCode::shape_mismatch, "lstm_pointwise: gates " + shape_string(gs) + " vs state " + shape_string(cs));
  }
  const std::size_t n = c_prev.value().size();
  const BasicTensor<T>& gv = gates.value();
  const BasicTensor<T>& cv = c_prev.value();
  // act = sigmoid(i,f,o), tanh(g); then tanh(c') appended.
  auto act = std::make_shared<std::vector<T>>(5 * n);
  Shape out_shape = cs;
  out_shape[0] *= 2;
  BasicTensor<T> out(out_shape);
  {
    using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
    Eigen::Map<const Array> pre(gv.data().data(), static_cast<Eigen::Index>(4 * n));
    Eigen::Map<const Array> c0(cv.data().data(), static_cast<Eigen::Index>(n));
    Eigen::Map<Array> a(act->data(), static_cast<Eigen::Index>(5 * n));
    Eigen::Map<Array> o(out.data().data(), static_cast<Eigen::Index>(2 * n));
    const auto m = static_cast<Eigen::Index>(n);
    a.head(3 * m) = pre.head(3 * m).logistic();
    a.segment(3 * m, m) = pre.segment(3 * m, m).tanh();
    o.tail(m) = a.segment(m, m) * c0 + a.head(m) * a.segment(3 * m, m);
    a.tail(m) = o.tail(m).tanh();
    o.head(m) = a.segment(2 * m, m) * a.tail(m);
  }
  return gates.tape->record(std::move(out), {gates, c_prev}, [gates, c_prev, act, n](BasicTape<T>& t, std::span<const T> g) {
    const T* a = act->data();
    const BasicTensor<T>& cv = t.value(c_prev);
    const bool need_gates = t.requires_grad(gates), need_c = t.requires_grad(c_prev);
    std::span<T> gg = need_gates ? t.grad_buffer(gates) : std::span<T>{};
    std::span<T> gc = need_c ? t.grad_buffer(c_prev) : std::span<T>{};
    for (std::size_t j = 0; j < n; ++j) {
      const T i = a[j], f = a[n + j], o = a[2 * n + j], u = a[3 * n + j], tc = a[4 * n + j];
      const T dc = g[n + j] + g[j] * o * (T{1} - tc * tc);
      if (need_gates) {
        gg[j] += dc * u * i * (T{1} - i);
        gg[n + j] += dc * cv[j] * f * (T{1} - f);
        gg[2 * n + j] += g[j] * tc * o * (T{1} - o);
        gg[3 * n + j] += dc * i * (T{1} - u * u);
      }
      if (need_c) gc[j] += dc * f;
    }
  });
}

template <class T>
CellState<T> cell_step(BasicVar<T> x, const CellState<T>& state, const TrackedCell<T>& cell) {
  const Shape& hs = state.h.shape();
  if (hs != state.c.shape() || hs.size() != 3) {
    throw Error(ErrorCode::shape_mismatch, "cell state h/c shapes " + shape_string(hs) + " and " +
                                               shape_string(state.c.shape()));
  }
  const std::size_t ch = hs[0];
  if (cell.b.shape() != Shape{4 * ch}) {
    throw Error(ErrorCode::shape_mismatch, "cell bias " + shape_string(cell.b.shape()) + " does not match " +
                                               std::to_string(ch) + " hidden channels");
  }
  if (x.shape().size() != 3 || x.shape()[1] != hs[1] || x.shape()[2] != hs[2]) {
    throw Error(ErrorCode::shape_mismatch, "cell input " + shape_string(x.shape()) + " vs state " + shape_string(hs));
  }
  auto gates = add(conv2d(x, cell.wx, std::optional<BasicVar<T>>(cell.b)), conv2d(state.h, cell.wh));
  auto hc = lstm_pointwise(gates, state.c);
  return {slice(hc, 0, ch), slice(hc, ch, 2 * ch)};
}

/// Per-step network inputs derived from a cube.
template <class T>
struct ModelInputs {
  std::vector<BasicTensor<T>> encoder;     ///< n x [1+D+1, H, W]
  std::vector<BasicTensor<T>> forecaster;  ///< k x [D+1, H, W]
  BasicTensor<T> last_frame;               ///< [1, H, W], gap-filled last context frame
};

/// Context NDVI is gap-filled along time within the context window; drivers
/// become constant planes (zeros when weather is ablated); topography is
/// min-max normalised and attached to every step.
template <class T>
ModelInputs<T> prepare_inputs(const Minicube& cube, const ForecastConfig& cfg) {
  const ModelDims dims = ModelDims::from(cfg);
  if (cube.height() != dims.height || cube.width() != dims.width) {
    throw Error(ErrorCode::shape_mismatch, "cube grid " + std::to_string(cube.height()) + "x" +
                                               std::to_string(cube.width()) + " vs config " +
                                               std::to_string(dims.height) + "x" + std::to_string(dims.width));
  }
  if (cube.driver_count() != dims.drivers) {
    throw Error(ErrorCode::shape_mismatch, "cube has " + std::to_string(cube.driver_count()) + " drivers, config " +
                                               std::to_string(dims.drivers));
  }
  if (dims.n + dims.k > cube.steps()) {
    throw Error(ErrorCode::shape_mismatch, "cube has " + std::to_string(cube.steps()) + " steps, need n + k = " +
                                               std::to_string(dims.n + dims.k));
  }
  const std::size_t hw = cube.pixels(), d = dims.drivers;
  const FilledWindow context = gapfill_context(cube, dims.n);
  const Tensor topo = normalized_topography(cube);
  auto driver = [&](std::size_t t, std::size_t j) -> T {
    return cfg.ablate_weather ? T{0} : static_cast<T>(cube.drivers[t * d + j]);
  };

  ModelInputs<T> in;
  for (std::size_t t = 0; t < dims.n; ++t) {
    BasicTensor<T> x(Shape{dims.encoder_inputs(), dims.height, dims.width});
    auto plane = [&](std::size_t c) { return x.data().subspan(c * hw, hw); };
    std::transform(context.frames.slab(t).begin(), context.frames.slab(t).end(), plane(0).begin(),
                   [](float v) { return static_cast<T>(v); });
    for (std::size_t j = 0; j < d; ++j) std::ranges::fill(plane(1 + j), driver(t, j));
    std::transform(topo.data().begin(), topo.data().end(), plane(1 + d).begin(),
                   [](float v) { return static_cast<T>(v); });
    in.encoder.push_back(std::move(x));
  }
  for (std::size_t t = dims.n; t < dims.n + dims.k; ++t) {
    BasicTensor<T> x(Shape{dims.forecaster_inputs(), dims.height, dims.width});
    auto plane = [&](std::size_t c) { return x.data().subspan(c * hw, hw); };
    for (std::size_t j = 0; j < d; ++j) std::ranges::fill(plane(j), driver(t, j));
    std::transform(topo.data().begin(), topo.data().end(), plane(d).begin(),
                   [](float v) { return static_cast<T>(v); });
    in.forecaster.push_back(std::move(x));
  }
  in.last_frame = BasicTensor<T>(Shape{1, dims.height, dims.width});
  std::transform(context.frames.slab(dims.n - 1).begin(), context.frames.slab(dims.n - 1).end(),
                 in.last_frame.data().begin(), [](float v) { return static_cast<T>(v); });
  return in;
}

/// Runs both encoder cells over the context from zero states.
template <class T>
std::array<CellState<T>, 2> encode(BasicTape<T>& tape, const ModelInputs<T>& in, const TrackedParams<T>& params,
                                   const ModelDims& dims) {
  if (in.encoder.empty()) throw Error(ErrorCode::invalid_argument, "encode needs at least one context frame");
  std::array<CellState<T>, 2> s{zero_state(tape, dims), zero_state(tape, dims)};
  for (const auto& frame : in.encoder) {
    s[0] = cell_step(tape.constant(frame), s[0], params.cells[encoder1]);
    s[1] = cell_step(s[0].h, s[1], params.cells[encoder2]);
  }
  return s;
}

/// Steps the forecaster through the horizon. Returns predictions [k,H,W]
/// clamped to [-1,1].
template <class T>
BasicVar<T> forecast(BasicTape<T>& tape, std::array<CellState<T>, 2> states, const ModelInputs<T>& in,
                     const TrackedParams<T>& params) {
  if (in.forecaster.empty()) throw Error(ErrorCode::invalid_argument, "forecast horizon must be >= 1");
  BasicVar<T> prev = tape.constant(in.last_frame);
  std::vector<BasicVar<T>> frames;
  for (const auto& drivers : in.forecaster) {
    states[0] = cell_step(tape.constant(drivers), states[0], params.cells[forecaster1]);
    states[1] = cell_step(states[0].h, states[1], params.cells[forecaster2]);
    auto delta = conv2d(states[1].h, params.head_w, std::optional<BasicVar<T>>(params.head_b));
    prev = clamp(add(prev, delta), T{-1}, T{1});
    frames.push_back(prev);
  }
  return concat(std::span<const BasicVar<T>>(frames));
}

/// encode + forecast on one tape.
template <class T>
BasicVar<T> forward(BasicTape<T>& tape, const ModelInputs<T>& in, const TrackedParams<T>& params,
                    const ModelDims& dims) {
  return forecast(tape, encode(tape, in, params, dims), in, params);
}

/// Inference without gradient tracking.
inline Tensor predict(const Minicube& cube, const ConvLstmParams<float>& params, const ForecastConfig& cfg) {
  if (ModelDims::from(cfg) != params.dims) throw Error(ErrorCode::shape_mismatch, "config does not match parameters");
  Tape tape;
  const auto in = prepare_inputs<float>(cube, cfg);
  const auto tracked = track(tape, params, false);
  return forward(tape, in, tracked, params.dims).value();
}

/// Forecast config matching a parameter set (optimiser fields left default).
inline ForecastConfig config_for(const ModelDims& dims, bool ablate_weather = false) {
  ForecastConfig cfg;
  cfg.n = dims.n;
  cfg.k = dims.k;
  cfg.height = dims.height;
  cfg.width = dims.width;
  cfg.drivers = dims.drivers;
  cfg.hidden_channels = dims.hidden;
  cfg.kernel_size = dims.kernel;
  cfg.ablate_weather = ablate_weather;
  return cfg;
}

inline constexpr std::string_view checkpoint_magic = "MCWT";
inline constexpr std::uint32_t checkpoint_version = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const ConvLstmParams<float>& params) {
  io::ByteWriter w;
  w.magic(checkpoint_magic);
  w.scalar(checkpoint_version);
  const ModelDims& d = params.dims;
  for (std::size_t v : {d.n, d.k, d.height, d.width, d.drivers, d.hidden, d.kernel}) {
    w.scalar(static_cast<std::uint32_t>(v));
  }
  for (const Tensor* t : params.tensors()) w.array(t->data());
  w.seal();
  return w.bytes();
}

inline ConvLstmParams<float> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(checkpoint_magic);
  const auto version = r.scalar<std::uint32_t>();
  if (version != checkpoint_version) {
    throw Error(ErrorCode::version_mismatch, "checkpoint version " + std::to_string(version));
  }
  ModelDims d;
  for (std::size_t* v : {&d.n, &d.k, &d.height, &d.width, &d.drivers, &d.hidden, &d.kernel}) {
    *v = r.scalar<std::uint32_t>();
  }
  if (d.hidden == 0 || d.kernel % 2 == 0 || d.hidden > 4096 || d.kernel > 31 || d.drivers > 4096) {
    throw Error(ErrorCode::invalid_argument, "implausible checkpoint dimensions");
  }
  auto params = zero_params<float>(d);
  std::size_t expected = 8;
  for (const Tensor* t : params.tensors()) expected += t->size() * 4;
  if (r.remaining() < expected) {
    throw Error(ErrorCode::truncated, "checkpoint payload has " + std::to_string(r.remaining()) +
                                          " bytes, dims imply " + std::to_string(expected));
  }
  for (Tensor* t : params.tensors()) *t = Tensor(t->shape(), r.array<float>(t->size()));
  r.verify_seal();
  return params;
}

inline void save_checkpoint(const ConvLstmParams<float>& params, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(params));
}

inline ConvLstmParams<float> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace vegcast
