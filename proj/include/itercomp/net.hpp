#pragma once

// Dense tanh networks with hand-written reverse-mode gradients, an Adam
// optimizer over flat parameter buffers, and a central-difference checker.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "itercomp/error.hpp"
#include "itercomp/rng.hpp"

namespace itercomp {

enum class Activation { tanh };

inline std::string to_string(Activation) { return "tanh"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

namespace detail {

// Four interleaved partial sums; fixed order keeps results reproducible.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

}  // namespace detail

/// Per-sample activations recorded by DenseNet::forward for reuse in backward.
struct ForwardCache {
  // layer_outputs[0] is the input; layer_outputs[l + 1] is the output of layer l
  // after its activation (tanh on hidden layers, identity on the last).
  std::vector<std::vector<double>> layer_outputs;

  std::span<const double> output() const { return layer_outputs.back(); }
};

/// Fully connected network. Parameters live in one flat buffer laid out layer
/// by layer as [W (out x in, row-major), b (out)].
class DenseNet {
 public:
  DenseNet() = default;

  /// Zero-initialized network with the given layer widths.
  explicit DenseNet(std::vector<std::size_t> layer_dims, Activation act = Activation::tanh)
      : dims_(std::move(layer_dims)), activation_(act) {
    if (dims_.size() < 2) throw ShapeError("a network needs at least two layer dims");
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      if (dims_[l] == 0 || dims_[l + 1] == 0) throw ShapeError("layer dims must be positive");
      offsets_.push_back(total);
      total += dims_[l] * dims_[l + 1] + dims_[l + 1];
    }
    params_.assign(total, 0.0);
  }

  /// Xavier-uniform hidden layers, biases zero. The last layer is additionally
  /// scaled by output_scale so fresh networks start near the zero function.
  static DenseNet xavier(std::vector<std::size_t> layer_dims, Rng& rng, double output_scale = 1.0) {
    DenseNet net(std::move(layer_dims));
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      const double fan_in = static_cast<double>(net.dims_[l]);
      const double fan_out = static_cast<double>(net.dims_[l + 1]);
      double limit = std::sqrt(6.0 / (fan_in + fan_out));
      if (l + 1 == net.num_layers()) limit *= output_scale;
      auto w = net.weights(l);
      for (double& v : w) v = rng.uniform(-limit, limit);
    }
    return net;
  }

  const std::vector<std::size_t>& layer_dims() const { return dims_; }
  Activation activation() const { return activation_; }
  std::size_t num_layers() const { return dims_.size() - 1; }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t output_dim() const { return dims_.back(); }
  std::size_t param_count() const { return params_.size(); }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  std::span<double> weights(std::size_t l) {
    return {params_.data() + offsets_[l], dims_[l] * dims_[l + 1]};
  }
  std::span<const double> weights(std::size_t l) const {
    return {params_.data() + offsets_[l], dims_[l] * dims_[l + 1]};
  }
  std::span<double> biases(std::size_t l) {
    return {params_.data() + offsets_[l] + dims_[l] * dims_[l + 1], dims_[l + 1]};
  }
  std::span<const double> biases(std::size_t l) const {
    return {params_.data() + offsets_[l] + dims_[l] * dims_[l + 1], dims_[l + 1]};
  }

  void forward(std::span<const double> input, ForwardCache& cache) const {
    if (input.size() != input_dim())
      throw ShapeError("shape mismatch: network input has length " + std::to_string(input.size()) +
                       ", expected " + std::to_string(input_dim()));
    cache.layer_outputs.resize(dims_.size());
    cache.layer_outputs[0].assign(input.begin(), input.end());
    for (std::size_t l = 0; l < num_layers(); ++l) {
      const std::size_t in = dims_[l];
      const std::size_t out = dims_[l + 1];
      const double* w = params_.data() + offsets_[l];
      const double* b = w + in * out;
      const std::vector<double>& x = cache.layer_outputs[l];
      std::vector<double>& y = cache.layer_outputs[l + 1];
      y.resize(out);
      const bool hidden = l + 1 < num_layers();
      for (std::size_t o = 0; o < out; ++o) {
        const double acc = detail::dot(w + o * in, x.data(), in) + b[o];
        y[o] = hidden ? std::tanh(acc) : acc;
      }
    }
  }

  std::vector<double> forward(std::span<const double> input) const {
    ForwardCache cache;
    forward(input, cache);
    return std::move(cache.layer_outputs.back());
  }

  /// Accumulates d(output . upstream)/d(params) into param_grad and, when
  /// input_grad is non-empty, writes d(output . upstream)/d(input) there.
  void backward(const ForwardCache& cache, std::span<const double> upstream,
                std::span<double> param_grad, std::span<double> input_grad = {}) const {
    check_shape(upstream.size() == output_dim(), "upstream gradient length");
    check_shape(param_grad.size() == param_count(), "parameter gradient buffer length");
    check_shape(input_grad.empty() || input_grad.size() == input_dim(), "input gradient length");
    check_shape(cache.layer_outputs.size() == dims_.size(), "forward cache depth");

    std::vector<double> delta(upstream.begin(), upstream.end());
    std::vector<double> prev;
    for (std::size_t l = num_layers(); l-- > 0;) {
      const std::size_t in = dims_[l];
      const std::size_t out = dims_[l + 1];
      const double* w = params_.data() + offsets_[l];
      double* gw = param_grad.data() + offsets_[l];
      double* gb = gw + in * out;
      const std::vector<double>& x = cache.layer_outputs[l];
      if (l + 1 < num_layers()) {
        const std::vector<double>& y = cache.layer_outputs[l + 1];
        for (std::size_t o = 0; o < out; ++o) delta[o] *= 1.0 - y[o] * y[o];
      }
      const bool need_prev = l > 0 || !input_grad.empty();
      if (need_prev) prev.assign(in, 0.0);
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta[o];
        double* grow = gw + o * in;
        for (std::size_t i = 0; i < in; ++i) grow[i] += d * x[i];
        gb[o] += d;
        if (need_prev) {
          const double* row = w + o * in;
          for (std::size_t i = 0; i < in; ++i) prev[i] += row[i] * d;
        }
      }
      if (need_prev) delta.swap(prev);
    }
    if (!input_grad.empty()) std::copy(delta.begin(), delta.end(), input_grad.begin());
  }

  bool all_finite() const {
    for (double p : params_)
      if (!std::isfinite(p)) return false;
    return true;
  }

  friend bool operator==(const DenseNet& a, const DenseNet& b) {
    return a.dims_ == b.dims_ && a.activation_ == b.activation_ && a.params_ == b.params_;
  }

 private:
  std::vector<std::size_t> dims_;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
  Activation activation_ = Activation::tanh;
};

struct NetGradients {
  std::vector<double> params;
  std::vector<double> input;
};

/// Exact gradients of output . upstream_grad with respect to parameters and input.
inline NetGradients net_backward(const DenseNet& net, std::span<const double> input,
                                 std::span<const double> upstream_grad) {
  check_shape(upstream_grad.size() == net.output_dim(), "upstream gradient length");
  ForwardCache cache;
  net.forward(input, cache);
  NetGradients g{std::vector<double>(net.param_count(), 0.0),
                 std::vector<double>(net.input_dim(), 0.0)};
  net.backward(cache, upstream_grad, g.params, g.input);
  return g;
}

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<double> m;
  std::vector<double> v;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

/// One Adam update with bias correction. Parameters are updated in place.
inline void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads,
                      double lr) {
  check_shape(params.size() == grads.size(), "adam params/grads length");
  check_shape(state.m.size() == params.size() && state.v.size() == params.size(),
              "adam moment length");
  if (!(lr > 0.0)) throw ConfigError("adam learning rate must be positive");
  for (double g : grads)
    if (!std::isfinite(g)) throw NumericError("non-finite gradient passed to adam_step");

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

using LossFn = std::function<double(std::span<const double>)>;
using GradFn = std::function<std::vector<double>(std::span<const double>)>;

/// Max over parameters of |analytic - central difference| / max(1, |central difference|).
inline double finite_diff_check(const LossFn& loss, const GradFn& grad,
                                std::span<const double> params, double h) {
  if (!(h > 0.0)) throw ConfigError("finite-difference step must be positive");
  std::vector<double> p(params.begin(), params.end());
  const std::vector<double> analytic = grad(p);
  check_shape(analytic.size() == p.size(), "analytic gradient length");
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + h;
    const double up = loss(p);
    p[i] = orig - h;
    const double down = loss(p);
    p[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("non-finite loss during finite-difference check");
    const double numeric = (up - down) / (2.0 * h);
    const double err = std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

// Checkpoint format shared by reward and diffusion models.
inline constexpr int kCheckpointFormatVersion = 1;

inline nlohmann::json net_to_json(const DenseNet& net, const nlohmann::json& metadata) {
  nlohmann::json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["layer_dims"] = net.layer_dims();
  j["activation"] = to_string(net.activation());
  j["params"] = std::vector<double>(net.params().begin(), net.params().end());
  j["metadata"] = metadata;
  return j;
}

inline DenseNet net_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kCheckpointFormatVersion)
      throw DataError("unsupported checkpoint format_version");
    DenseNet net(j.at("layer_dims").get<std::vector<std::size_t>>(),
                 activation_from_string(j.at("activation").get<std::string>()));
    const auto params = j.at("params").get<std::vector<double>>();
    check_shape(params.size() == net.param_count(),
                "checkpoint has " + std::to_string(params.size()) + " params, dims imply " +
                    std::to_string(net.param_count()));
    std::copy(params.begin(), params.end(), net.params().begin());
    if (!net.all_finite()) throw NumericError("checkpoint contains non-finite parameters");
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed network checkpoint: ") + e.what());
  }
}

}  // namespace itercomp
