#pragma once

// Dense feedforward encoders with hand-written reverse mode, AdamW with a
// step-decay schedule, and a central-difference gradient oracle.
//
// Storage precision is a template parameter (float for production weights,
// double for gradient checks); every accumulation runs in double.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mris/binary_io.hpp"
#include "mris/errors.hpp"

namespace mris {

enum class Activation : std::uint8_t { identity = 0, relu = 1, tanh = 2 };

inline std::string to_string(Activation a) {
  switch (a) {
  case Activation::identity: return "identity";
  case Activation::relu: return "relu";
  case Activation::tanh: return "tanh";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

/// Row-major dense matrix.
template <class Real>
class DenseMatrix {
public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, Real fill = Real(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<Real> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw DimensionError("DenseMatrix: data length " +
                           std::to_string(data_.size()) + " != " +
                           std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  Real& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  Real operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<Real> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const Real> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }

  bool operator==(const DenseMatrix&) const = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

/// One affine layer y = act(W x + b); W is (out x in).
template <class Real>
struct DenseLayer {
  DenseMatrix<Real> weight;
  std::vector<Real> bias;
  Activation activation = Activation::identity;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }

  bool operator==(const DenseLayer&) const = default;
};

/// Weights of one encoder network. The last layer is always linear.
template <class Real = float>
class EncoderParams {
public:
  EncoderParams() = default;

  explicit EncoderParams(std::vector<DenseLayer<Real>> layers)
      : layers_(std::move(layers)) {
    if (layers_.empty())
      throw DimensionError("encoder needs at least one layer");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.bias.size() != l.out_dim())
        throw DimensionError("layer " + std::to_string(i) +
                             ": bias length does not match output dim");
      if (i > 0 && layers_[i - 1].out_dim() != l.in_dim())
        throw DimensionError("layer " + std::to_string(i) +
                             ": input dim does not match previous output");
    }
    if (layers_.back().activation != Activation::identity)
      throw DimensionError("output layer must use identity activation");
    if (output_dim() < 2)
      throw DimensionError("encoder output_dim must be >= 2");
  }

  /// Glorot-uniform weights, zero biases. `dims` lists every layer width
  /// from input to output; hidden layers use `hidden`.
  static EncoderParams xavier(std::span<const std::size_t> dims,
                              Activation hidden, std::uint64_t seed) {
    if (dims.size() < 2)
      throw DimensionError("encoder needs input and output dims");
    std::mt19937_64 rng(seed);
    std::vector<DenseLayer<Real>> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      const std::size_t in = dims[i], out = dims[i + 1];
      const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      DenseLayer<Real> layer;
      layer.weight = DenseMatrix<Real>(out, in);
      for (auto& w : layer.weight.data()) w = static_cast<Real>(dist(rng));
      layer.bias.assign(out, Real(0));
      layer.activation = (i + 2 == dims.size()) ? Activation::identity : hidden;
      layers.push_back(std::move(layer));
    }
    return EncoderParams(std::move(layers));
  }

  std::size_t input_dim() const { return layers_.front().in_dim(); }
  std::size_t output_dim() const { return layers_.back().out_dim(); }
  std::size_t layer_count() const { return layers_.size(); }
  const std::vector<DenseLayer<Real>>& layers() const { return layers_; }
  const DenseLayer<Real>& layer(std::size_t i) const { return layers_[i]; }

  /// Parameter blocks in the fixed order W0, b0, W1, b1, ...
  std::vector<std::span<Real>> parameter_blocks() {
    std::vector<std::span<Real>> out;
    for (auto& l : layers_) {
      out.push_back(l.weight.data());
      out.push_back(l.bias);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  template <class Other>
  EncoderParams<Other> cast() const {
    std::vector<DenseLayer<Other>> out;
    for (const auto& l : layers_) {
      DenseLayer<Other> o;
      std::vector<Other> w(l.weight.data().begin(), l.weight.data().end());
      o.weight = DenseMatrix<Other>(l.weight.rows(), l.weight.cols(), std::move(w));
      o.bias.assign(l.bias.begin(), l.bias.end());
      o.activation = l.activation;
      out.push_back(std::move(o));
    }
    return EncoderParams<Other>(std::move(out));
  }

  bool operator==(const EncoderParams&) const = default;

private:
  std::vector<DenseLayer<Real>> layers_;
};

/// Per-layer record of a forward pass: the input each layer saw and its
/// pre-activation.
struct ForwardTape {
  std::vector<std::vector<double>> inputs;
  std::vector<std::vector<double>> pre_activations;
};

struct ForwardResult {
  std::vector<double> output;
  ForwardTape tape;
};

/// Gradients with the same block layout as EncoderParams, held in double.
struct EncoderGrads {
  std::vector<DenseMatrix<double>> weight;
  std::vector<std::vector<double>> bias;

  template <class Real>
  static EncoderGrads zeros_like(const EncoderParams<Real>& params) {
    EncoderGrads g;
    for (const auto& l : params.layers()) {
      g.weight.emplace_back(l.weight.rows(), l.weight.cols(), 0.0);
      g.bias.emplace_back(l.bias.size(), 0.0);
    }
    return g;
  }

  std::vector<std::span<double>> blocks() {
    std::vector<std::span<double>> out;
    for (std::size_t i = 0; i < weight.size(); ++i) {
      out.push_back(weight[i].data());
      out.push_back(bias[i]);
    }
    return out;
  }
  std::vector<std::span<const double>> blocks() const {
    std::vector<std::span<const double>> out;
    for (std::size_t i = 0; i < weight.size(); ++i) {
      out.push_back(weight[i].data());
      out.push_back(bias[i]);
    }
    return out;
  }

  EncoderGrads& operator+=(const EncoderGrads& other) {
    auto dst = blocks();
    auto src = other.blocks();
    if (dst.size() != src.size())
      throw DimensionError("gradient block count mismatch");
    for (std::size_t b = 0; b < dst.size(); ++b) {
      if (dst[b].size() != src[b].size())
        throw DimensionError("gradient block shape mismatch");
      for (std::size_t i = 0; i < dst[b].size(); ++i) dst[b][i] += src[b][i];
    }
    return *this;
  }
};

struct BackwardResult {
  EncoderGrads grads;
  std::vector<double> input_grad;
};

namespace detail {

inline double activate(Activation a, double z) {
  switch (a) {
  case Activation::relu: return z > 0.0 ? z : 0.0;
  case Activation::tanh: return std::tanh(z);
  case Activation::identity: break;
  }
  return z;
}

// Derivative expressed through the pre-activation; relu'(0) = 0.
inline double activate_grad(Activation a, double z) {
  switch (a) {
  case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
  case Activation::tanh: {
    double t = std::tanh(z);
    return 1.0 - t * t;
  }
  case Activation::identity: break;
  }
  return 1.0;
}

} // namespace detail

template <class Real>
ForwardResult encoder_forward(const EncoderParams<Real>& params,
                              std::span<const double> input) {
  if (input.size() != params.input_dim())
    throw DimensionError("encoder input length " + std::to_string(input.size()) +
                         " != " + std::to_string(params.input_dim()));
  if (!all_finite(input))
    throw NumericError("non-finite encoder input");

  ForwardResult r;
  std::vector<double> x(input.begin(), input.end());
  for (const auto& layer : params.layers()) {
    std::vector<double> pre(layer.out_dim());
    for (std::size_t o = 0; o < layer.out_dim(); ++o) {
      double acc = static_cast<double>(layer.bias[o]);
      auto w = layer.weight.row(o);
      for (std::size_t i = 0; i < w.size(); ++i)
        acc += static_cast<double>(w[i]) * x[i];
      pre[o] = acc;
    }
    std::vector<double> post(pre.size());
    for (std::size_t o = 0; o < pre.size(); ++o)
      post[o] = detail::activate(layer.activation, pre[o]);
    r.tape.inputs.push_back(std::move(x));
    r.tape.pre_activations.push_back(std::move(pre));
    x = std::move(post);
  }
  r.output = std::move(x);
  return r;
}

/// Reverse-mode pass for one sample. Gradients are written fresh; use
/// EncoderGrads::operator+= to accumulate over a batch.
template <class Real>
BackwardResult encoder_backward(const EncoderParams<Real>& params,
                                const ForwardTape& tape,
                                std::span<const double> output_grad) {
  const auto& layers = params.layers();
  if (tape.inputs.size() != layers.size() ||
      tape.pre_activations.size() != layers.size())
    throw DimensionError("tape does not match encoder layer count");
  for (std::size_t l = 0; l < layers.size(); ++l)
    if (tape.inputs[l].size() != layers[l].in_dim() ||
        tape.pre_activations[l].size() != layers[l].out_dim())
      throw DimensionError("tape does not match encoder layer " +
                           std::to_string(l) + " dims");
  if (output_grad.size() != params.output_dim())
    throw DimensionError("output_grad length does not match output_dim");

  BackwardResult r;
  r.grads = EncoderGrads::zeros_like(params);
  std::vector<double> upstream(output_grad.begin(), output_grad.end());
  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& layer = layers[l];
    const auto& pre = tape.pre_activations[l];
    const auto& in = tape.inputs[l];
    std::vector<double> delta(pre.size());
    for (std::size_t o = 0; o < pre.size(); ++o)
      delta[o] = upstream[o] * detail::activate_grad(layer.activation, pre[o]);

    auto& gw = r.grads.weight[l];
    for (std::size_t o = 0; o < delta.size(); ++o) {
      r.grads.bias[l][o] = delta[o];
      auto row = gw.row(o);
      for (std::size_t i = 0; i < in.size(); ++i) row[i] = delta[o] * in[i];
    }
    std::vector<double> down(layer.in_dim(), 0.0);
    for (std::size_t o = 0; o < delta.size(); ++o) {
      auto w = layer.weight.row(o);
      for (std::size_t i = 0; i < down.size(); ++i)
        down[i] += static_cast<double>(w[i]) * delta[o];
    }
    upstream = std::move(down);
  }
  r.input_grad = std::move(upstream);
  return r;
}

struct AdamWConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

struct OptimizerState {
  std::uint64_t step = 0;
  AdamWConfig config;
  EncoderGrads first_moment;
  EncoderGrads second_moment;

  template <class Real>
  static OptimizerState for_params(const EncoderParams<Real>& params,
                                   AdamWConfig config = {}) {
    if (!(config.beta1 >= 0.0 && config.beta1 < 1.0 && config.beta2 >= 0.0 &&
          config.beta2 < 1.0))
      throw ConfigError("AdamW betas must lie in [0, 1)");
    OptimizerState s;
    s.config = config;
    s.first_moment = EncoderGrads::zeros_like(params);
    s.second_moment = EncoderGrads::zeros_like(params);
    return s;
  }
};

/// One AdamW update with bias-corrected moments and decoupled decay:
/// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p).
template <class Real>
void adamw_step(EncoderParams<Real>& params, const EncoderGrads& grads,
                OptimizerState& state, double lr) {
  if (!(lr > 0.0) || !std::isfinite(lr))
    throw ConfigError("learning rate must be positive");
  auto p_blocks = params.parameter_blocks();
  auto g_blocks = grads.blocks();
  auto m_blocks = state.first_moment.blocks();
  auto v_blocks = state.second_moment.blocks();
  if (p_blocks.size() != g_blocks.size() || p_blocks.size() != m_blocks.size())
    throw DimensionError("adamw_step: gradient/state layout mismatch");
  for (std::size_t b = 0; b < p_blocks.size(); ++b) {
    if (p_blocks[b].size() != g_blocks[b].size() ||
        p_blocks[b].size() != m_blocks[b].size())
      throw DimensionError("adamw_step: block " + std::to_string(b) +
                           " shape mismatch");
    if (!all_finite(g_blocks[b]))
      throw NumericError("adamw_step: non-finite gradient");
  }

  const auto& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t b = 0; b < p_blocks.size(); ++b) {
    auto p = p_blocks[b];
    auto g = g_blocks[b];
    auto m = m_blocks[b];
    auto v = v_blocks[b];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      const double pi = static_cast<double>(p[i]);
      p[i] = static_cast<Real>(
          pi - lr * (m_hat / (std::sqrt(v_hat) + c.epsilon) + c.weight_decay * pi));
    }
  }
}

struct LrSchedule {
  double initial_lr = 1e-4;
  double decay_factor = 0.8;
  std::size_t decay_every = 150;

  void validate() const {
    if (!(initial_lr > 0.0))
      throw ConfigError("initial learning rate must be positive");
    if (!(decay_factor > 0.0 && decay_factor <= 1.0))
      throw ConfigError("decay_factor must lie in (0, 1]");
    if (decay_every == 0)
      throw ConfigError("decay_every must be >= 1");
  }

  double lr(std::size_t epoch) const {
    return initial_lr *
           std::pow(decay_factor, static_cast<double>(epoch / decay_every));
  }
};

/// Central differences (L(p+h) - L(p-h)) / 2h for every entry of `params`,
/// which `loss_fn` must read on each call. Entries are restored afterwards.
template <class LossFn>
std::vector<double> finite_difference_grad(LossFn&& loss_fn,
                                           std::span<double> params,
                                           double step) {
  if (!(step > 0.0))
    throw ConfigError("finite difference step must be positive");
  std::vector<double> out(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + step;
    const double up = loss_fn();
    params[i] = saved - step;
    const double down = loss_fn();
    params[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_difference_grad: non-finite loss");
    out[i] = (up - down) / (2.0 * step);
  }
  return out;
}

// Checkpoint file layout (all little-endian):
//   "MRSE" | u32 version | u32 layer_count
//   | per layer: u32 in_dim, u32 out_dim, u8 activation
//   | per layer: weights (out*in f32, row-major) then bias (out f32)
//   | u64 FNV-1a of every preceding byte
inline constexpr std::uint32_t kEncoderFormatVersion = 1;

inline std::vector<std::uint8_t> encode_encoder(const EncoderParams<float>& params) {
  io::ByteWriter w;
  w.bytes("MRSE");
  w.u32(kEncoderFormatVersion);
  w.u32(static_cast<std::uint32_t>(params.layer_count()));
  for (const auto& l : params.layers()) {
    w.u32(static_cast<std::uint32_t>(l.in_dim()));
    w.u32(static_cast<std::uint32_t>(l.out_dim()));
    w.u8(static_cast<std::uint8_t>(l.activation));
  }
  for (const auto& l : params.layers()) {
    for (float v : l.weight.data()) w.f32(v);
    for (float v : l.bias) w.f32(v);
  }
  w.seal();
  return w.buffer();
}

inline EncoderParams<float> decode_encoder(std::span<const std::uint8_t> bytes,
                                           const std::string& what = "encoder checkpoint") {
  io::ByteReader r(bytes, what);
  r.expect_magic("MRSE");
  if (auto v = r.u32(); v != kEncoderFormatVersion)
    throw DataError(what + ": unsupported version " + std::to_string(v));
  r.verify_checksum_first();
  const auto count = r.u32();
  if (count == 0 || count > 1024)
    throw DataError(what + ": implausible layer count");
  struct Shape {
    std::uint32_t in, out;
    std::uint8_t act;
  };
  std::vector<Shape> shapes(count);
  for (auto& s : shapes) {
    s.in = r.u32();
    s.out = r.u32();
    s.act = r.u8();
    if (s.act > static_cast<std::uint8_t>(Activation::tanh))
      throw DataError(what + ": unknown activation tag");
  }
  std::vector<DenseLayer<float>> layers;
  for (const auto& s : shapes) {
    DenseLayer<float> l;
    if (static_cast<std::uint64_t>(s.in) * s.out * 4 > r.remaining())
      throw DataError(what + ": truncated weights");
    std::vector<float> w(static_cast<std::size_t>(s.in) * s.out);
    for (auto& x : w) x = r.f32();
    l.weight = DenseMatrix<float>(s.out, s.in, std::move(w));
    l.bias.resize(s.out);
    for (auto& x : l.bias) x = r.f32();
    l.activation = static_cast<Activation>(s.act);
    layers.push_back(std::move(l));
  }
  r.verify_seal();
  return EncoderParams<float>(std::move(layers));
}

inline void save_encoder(const EncoderParams<float>& params,
                         const std::filesystem::path& path) {
  io::write_file(path, encode_encoder(params));
}

inline EncoderParams<float> load_encoder(const std::filesystem::path& path) {
  return decode_encoder(io::read_file(path), path.string());
}

} // namespace mris
