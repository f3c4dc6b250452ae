// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "pfls/param_store.hpp"
#include "pfls/rng.hpp"
#include "pfls/tensor.hpp"

namespace pfls {

// A named, trainable tensor together with its gradient accumulator.
struct Parameter {
  std::string path;
  ParamTag tag = ParamTag::Upstream;
  Tensor value;
  Tensor grad;
};

// Owns every parameter of one model. Layers request parameters at
// construction and keep references; the registry is the single point for
// export/import/gradient bookkeeping. Addresses are stable (deque storage).
class ParamRegistry {
 public:
  Parameter& create(const std::string& path, ParamTag tag, const std::vector<int>& shape);

  bool contains(const std::string& path) const { return by_path_.count(path) > 0; }
  Parameter& at(const std::string& path);
  const Parameter& at(const std::string& path) const;

  // Snapshot of all parameter values as a tree keyed by path.
  ParameterTree export_tree() const;
  // Overwrites the parameters named in `tree`. Every entry must match a
  // registered parameter in path, shape, and tag; parameters not named are
  // left untouched.
  void import_tree(const ParameterTree& tree);

  void zero_grads();
  std::int64_t parameter_count() const;
  double grad_max_abs() const;

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
  std::map<std::string, Parameter*> by_path_;
};

// Adam with decoupled per-parameter state, kept in double precision.
// Conventions: bias-corrected moments, epsilon added outside the square root.
class AdamOptimizer {
 public:
  struct Hyper {
    double beta1 = 0.5;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  explicit AdamOptimizer(ParamRegistry& registry);
  AdamOptimizer(ParamRegistry& registry, Hyper hyper);

  // Applies one update using the gradients currently stored in the registry.
  void step(double learning_rate);
  std::int64_t step_count() const { return step_count_; }

  // Moment snapshot, so a failed training round can be rolled back without
  // leaving stale (possibly non-finite) state behind.
  struct State {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::int64_t step_count = 0;
  };
  State state() const;
  void restore(const State& state);

 private:
  struct Slot {
    Parameter* param;
    std::vector<double> m;
    std::vector<double> v;
  };
  std::vector<Slot> slots_;
  Hyper hyper_;
  std::int64_t step_count_ = 0;
};

// ---------------------------------------------------------------------------
// Layers. All activations flow as row-major float tensors: feature maps are
// {C, H, W}, vectors are {N}. Each layer caches what its backward pass needs;
// backward accumulates into parameter gradients and returns the input
// gradient.
// ---------------------------------------------------------------------------

class Conv2d {
 public:
  Conv2d(ParamRegistry& registry, const std::string& path_prefix, ParamTag tag, int in_channels,
         int out_channels, int kernel, int stride, int pad, Rng& rng);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);

  int out_channels() const { return out_channels_; }

 private:
  Parameter& weight_;  // {out, in, k, k}
  Parameter& bias_;    // {out}
  int in_channels_, out_channels_, kernel_, stride_, pad_;
  Tensor cols_;  // cached im2col(input)
  int in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0;
};

class ConvTranspose2d {
 public:
  // Fixed output_padding of stride-1 so a stride-2 layer exactly doubles the
  // spatial size.
  ConvTranspose2d(ParamRegistry& registry, const std::string& path_prefix, ParamTag tag,
                  int in_channels, int out_channels, int kernel, int stride, int pad, Rng& rng);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);

  int out_channels() const { return out_channels_; }

 private:
  Parameter& weight_;  // {in, out, k, k}
  Parameter& bias_;    // {out}
  int in_channels_, out_channels_, kernel_, stride_, pad_;
  Tensor input_;  // cached input
  int in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0;
};

enum class LinearInit {
  Normal02,     // N(0, 0.02), zero bias
  HeNormal,     // N(0, sqrt(2 / fan_in)), zero bias
  ZeroBiasOne,  // zero weight, bias filled with 1
  Zero,         // zero weight, zero bias
};

class Linear {
 public:
  Linear(ParamRegistry& registry, const std::string& path_prefix, ParamTag tag, int in_dim,
         int out_dim, LinearInit init, Rng& rng);

  Tensor forward(const Tensor& x);   // {in} -> {out}
  Tensor backward(const Tensor& dy);

 private:
  Parameter& weight_;  // {out, in}
  Parameter& bias_;    // {out}
  Tensor input_;
};

// Fully connected stack with LeakyReLU(0.2) between layers and a linear
// output layer.
class Mlp {
 public:
  Mlp(ParamRegistry& registry, const std::string& path_prefix, ParamTag tag,
      const std::vector<int>& dims, LinearInit hidden_init, LinearInit final_init, Rng& rng);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);

 private:
  std::vector<Linear> layers_;
  std::vector<Tensor> hidden_pre_;  // pre-activation caches for hidden layers
};

// Elementwise activations with explicit caches.
Tensor relu_forward(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& dy);
Tensor leaky_relu_forward(const Tensor& x, float slope);
Tensor leaky_relu_backward(const Tensor& x, const Tensor& dy, float slope);
Tensor tanh_forward(const Tensor& x);
Tensor tanh_backward(const Tensor& y, const Tensor& dy);  // takes forward output

// Adaptive instance normalization: each channel is normalized to zero mean
// and unit variance over its spatial extent (population statistics, epsilon
// added to the standard deviation) and then rescaled/shifted per channel.
struct AdaInCache {
  Tensor normalized;          // x-hat, {C,H,W}
  std::vector<double> denom;  // sigma + epsilon per channel
  Tensor gamma;
};

Tensor adain_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, AdaInCache& cache);
// Returns dx; writes per-channel dgamma/dbeta.
Tensor adain_backward(const AdaInCache& cache, const Tensor& dy, Tensor& dgamma, Tensor& dbeta);

constexpr float kAdaInEpsilon = 1e-5f;

// Per-channel multiplicative weighting: y[c] = a[c] * x[c].
struct ChannelScaleCache {
  Tensor input;
  Tensor scale;
};

Tensor channel_scale_forward(const Tensor& x, const Tensor& scale, ChannelScaleCache& cache);
Tensor channel_scale_backward(const ChannelScaleCache& cache, const Tensor& dy, Tensor& dscale);

}  // namespace pfls
