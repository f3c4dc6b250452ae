// SPDX-License-Identifier: Apache-2.0
#include "pfls/layers.hpp"

#include <cmath>
#include <cstring>

#include <Eigen/Core>

namespace pfls {
namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using ConstMapRM = Eigen::Map<const MatRM>;

// Unfolds an image {C, H, W} into a {C*k*k, out_h*out_w} matrix where column
// (oy, ox) holds the receptive field of that output position. Out-of-bounds
// positions (implicit zero padding) stay zero.
void im2col(const float* img, int channels, int height, int width, int kernel, int stride, int pad,
            int out_h, int out_w, float* cols) {
  const std::size_t n_cols = static_cast<std::size_t>(out_h) * out_w;
  std::memset(cols, 0, sizeof(float) * static_cast<std::size_t>(channels) * kernel * kernel *
                           n_cols);
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const std::size_t row = (static_cast<std::size_t>(c) * kernel + ky) * kernel + kx;
        float* dst = cols + row * n_cols;
        for (int oy = 0; oy < out_h; ++oy) {
          const int y = oy * stride - pad + ky;
          if (y < 0 || y >= height) continue;
          const float* src_row = img + (static_cast<std::size_t>(c) * height + y) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int x = ox * stride - pad + kx;
            if (x < 0 || x >= width) continue;
            dst[static_cast<std::size_t>(oy) * out_w + ox] = src_row[x];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back into an image buffer.
void col2im(const float* cols, int channels, int height, int width, int kernel, int stride,
            int pad, int out_h, int out_w, float* img) {
  const std::size_t n_cols = static_cast<std::size_t>(out_h) * out_w;
  std::memset(img, 0,
              sizeof(float) * static_cast<std::size_t>(channels) * height * width);
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const std::size_t row = (static_cast<std::size_t>(c) * kernel + ky) * kernel + kx;
        const float* src = cols + row * n_cols;
        for (int oy = 0; oy < out_h; ++oy) {
          const int y = oy * stride - pad + ky;
          if (y < 0 || y >= height) continue;
          float* dst_row = img + (static_cast<std::size_t>(c) * height + y) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int x = ox * stride - pad + kx;
            if (x < 0 || x >= width) continue;
            dst_row[x] += src[static_cast<std::size_t>(oy) * out_w + ox];
          }
        }
      }
    }
  }
}

int conv_out_size(int in, int kernel, int stride, int pad) {
  const int span = in + 2 * pad - kernel;
  if (span < 0) {
    throw ShapeError("convolution kernel larger than padded input");
  }
  return span / stride + 1;
}

void require_rank3(const Tensor& x, int channels, const char* who) {
  if (x.rank() != 3 || x.dim(0) != channels) {
    throw ShapeError(std::string(who) + ": expected {" + std::to_string(channels) +
                     ", H, W} input, got " + x.shape_string());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamRegistry
// ---------------------------------------------------------------------------

Parameter& ParamRegistry::create(const std::string& path, ParamTag tag,
                                 const std::vector<int>& shape) {
  if (path.empty()) throw ConfigError("parameter path must not be empty");
  if (by_path_.count(path) > 0) {
    throw ConfigError("duplicate parameter path '" + path + "'");
  }
  Parameter& p = params_.emplace_back();
  p.path = path;
  p.tag = tag;
  p.value = Tensor(shape);
  p.grad = Tensor(shape);
  by_path_[path] = &p;
  return p;
}

Parameter& ParamRegistry::at(const std::string& path) {
  auto it = by_path_.find(path);
  if (it == by_path_.end()) throw ConfigError("unknown parameter '" + path + "'");
  return *it->second;
}

const Parameter& ParamRegistry::at(const std::string& path) const {
  auto it = by_path_.find(path);
  if (it == by_path_.end()) throw ConfigError("unknown parameter '" + path + "'");
  return *it->second;
}

ParameterTree ParamRegistry::export_tree() const {
  ParameterTree tree;
  for (const Parameter& p : params_) {
    tree.insert(p.path, p.value, p.tag);
  }
  return tree;
}

void ParamRegistry::import_tree(const ParameterTree& tree) {
  for (const auto& [path, entry] : tree) {
    auto it = by_path_.find(path);
    if (it == by_path_.end()) {
      throw ProtocolError("received parameter '" + path + "' that this model does not own");
    }
    Parameter& p = *it->second;
    if (entry.tag != p.tag) {
      throw ProtocolError("received parameter '" + path + "' with tag '" +
                          std::string(to_string(entry.tag)) + "', expected '" +
                          std::string(to_string(p.tag)) + "'");
    }
    if (!entry.value.same_shape(p.value)) {
      throw ProtocolError("received parameter '" + path + "' with shape " +
                          entry.value.shape_string() + ", expected " + p.value.shape_string());
    }
    p.value = entry.value;
  }
}

void ParamRegistry::zero_grads() {
  for (Parameter& p : params_) p.grad.fill(0.0f);
}

std::int64_t ParamRegistry::parameter_count() const {
  std::int64_t total = 0;
  for (const Parameter& p : params_) total += static_cast<std::int64_t>(p.value.size());
  return total;
}

double ParamRegistry::grad_max_abs() const {
  double peak = 0.0;
  for (const Parameter& p : params_) {
    for (std::size_t i = 0; i < p.grad.size(); ++i) {
      peak = std::max(peak, std::abs(static_cast<double>(p.grad[i])));
    }
  }
  return peak;
}

// ---------------------------------------------------------------------------
// AdamOptimizer
// ---------------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(ParamRegistry& registry) : AdamOptimizer(registry, Hyper{}) {}

AdamOptimizer::AdamOptimizer(ParamRegistry& registry, Hyper hyper) : hyper_(hyper) {
  slots_.reserve(registry.size());
  for (Parameter& p : registry) {
    Slot slot;
    slot.param = &p;
    slot.m.assign(p.value.size(), 0.0);
    slot.v.assign(p.value.size(), 0.0);
    slots_.push_back(std::move(slot));
  }
}

void AdamOptimizer::step(double learning_rate) {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_count_));
  for (Slot& slot : slots_) {
    Parameter& p = *slot.param;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      slot.m[i] = hyper_.beta1 * slot.m[i] + (1.0 - hyper_.beta1) * g;
      slot.v[i] = hyper_.beta2 * slot.v[i] + (1.0 - hyper_.beta2) * g * g;
      const double m_hat = slot.m[i] / bc1;
      const double v_hat = slot.v[i] / bc2;
      const double updated = static_cast<double>(p.value[i]) -
                             learning_rate * m_hat / (std::sqrt(v_hat) + hyper_.epsilon);
      p.value[i] = static_cast<float>(updated);
    }
  }
}

AdamOptimizer::State AdamOptimizer::state() const {
  State snapshot;
  snapshot.m.reserve(slots_.size());
  snapshot.v.reserve(slots_.size());
  for (const Slot& slot : slots_) {
    snapshot.m.push_back(slot.m);
    snapshot.v.push_back(slot.v);
  }
  snapshot.step_count = step_count_;
  return snapshot;
}

void AdamOptimizer::restore(const State& state) {
  if (state.m.size() != slots_.size() || state.v.size() != slots_.size()) {
    throw ConfigError("optimizer state snapshot does not match parameter layout");
  }
  for (std::size_t s = 0; s < slots_.size(); ++s) {
    if (state.m[s].size() != slots_[s].m.size() || state.v[s].size() != slots_[s].v.size()) {
      throw ConfigError("optimizer state snapshot does not match parameter layout");
    }
    slots_[s].m = state.m[s];
    slots_[s].v = state.v[s];
  }
  step_count_ = state.step_count;
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

Conv2d::Conv2d(ParamRegistry& registry, const std::string& path_prefix, ParamTag tag,
               int in_channels, int out_channels, int kernel, int stride, int pad, Rng& rng)
    : weight_(registry.create(path_prefix + ".weight", tag,
                              {out_channels, in_channels, kernel, kernel})),
      bias_(registry.create(path_prefix + ".bias", tag, {out_channels})),
      in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride),
      pad_(pad) {
  rng.fill_normal(weight_.value, 0.0, 0.02);
}

Tensor Conv2d::forward(const Tensor& x) {
  require_rank3(x, in_channels_, "conv2d");
  in_h_ = x.dim(1);
  in_w_ = x.dim(2);
  out_h_ = conv_out_size(in_h_, kernel_, stride_, pad_);
  out_w_ = conv_out_size(in_w_, kernel_, stride_, pad_);

  const int patch = in_channels_ * kernel_ * kernel_;
  const int n_cols = out_h_ * out_w_;
  cols_ = Tensor({patch, n_cols});
  im2col(x.data(), in_channels_, in_h_, in_w_, kernel_, stride_, pad_, out_h_, out_w_,
         cols_.data());

  Tensor y({out_channels_, out_h_, out_w_});
  ConstMapRM w_mat(weight_.value.data(), out_channels_, patch);
  ConstMapRM c_mat(cols_.data(), patch, n_cols);
  MapRM y_mat(y.data(), out_channels_, n_cols);
  y_mat.noalias() = w_mat * c_mat;
  for (int oc = 0; oc < out_channels_; ++oc) {
    y_mat.row(oc).array() += bias_.value[oc];
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  if (dy.rank() != 3 || dy.dim(0) != out_channels_ || dy.dim(1) != out_h_ ||
      dy.dim(2) != out_w_) {
    throw ShapeError("conv2d backward: gradient shape " + dy.shape_string() +
                     " does not match forward output");
  }
  const int patch = in_channels_ * kernel_ * kernel_;
  const int n_cols = out_h_ * out_w_;

  ConstMapRM dy_mat(dy.data(), out_channels_, n_cols);
  ConstMapRM c_mat(cols_.data(), patch, n_cols);
  MapRM dw_mat(weight_.grad.data(), out_channels_, patch);
  dw_mat.noalias() += dy_mat * c_mat.transpose();
  for (int oc = 0; oc < out_channels_; ++oc) {
    bias_.grad[oc] += dy_mat.row(oc).sum();
  }

  Tensor dcols({patch, n_cols});
  ConstMapRM w_mat(weight_.value.data(), out_channels_, patch);
  MapRM dc_mat(dcols.data(), patch, n_cols);
  dc_mat.noalias() = w_mat.transpose() * dy_mat;

  Tensor dx({in_channels_, in_h_, in_w_});
  col2im(dcols.data(), in_channels_, in_h_, in_w_, kernel_, stride_, pad_, out_h_, out_w_,
         dx.data());
  return dx;
}

// ---------------------------------------------------------------------------
// ConvTranspose2d
// ---------------------------------------------------------------------------

ConvTranspose2d::ConvTranspose2d(ParamRegistry& registry, const std::string& path_prefix,
                                 ParamTag tag, int in_channels, int out_channels, int kernel,
                                 int stride, int pad, Rng& rng)
    : weight_(registry.create(path_prefix + ".weight", tag,
                              {in_channels, out_channels, kernel, kernel})),
      bias_(registry.create(path_prefix + ".bias", tag, {out_channels})),
      in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride),
      pad_(pad) {
  rng.fill_normal(weight_.value, 0.0, 0.02);
}

Tensor ConvTranspose2d::forward(const Tensor& x) {
  require_rank3(x, in_channels_, "conv_transpose2d");
  in_h_ = x.dim(1);
  in_w_ = x.dim(2);
  out_h_ = (in_h_ - 1) * stride_ - 2 * pad_ + kernel_ + (stride_ - 1);
  out_w_ = (in_w_ - 1) * stride_ - 2 * pad_ + kernel_ + (stride_ - 1);
  if (out_h_ < 1 || out_w_ < 1) {
    throw ShapeError("conv_transpose2d: output would be empty for input " + x.shape_string());
  }
  input_ = x;

  const int patch = out_channels_ * kernel_ * kernel_;
  const int n_cols = in_h_ * in_w_;
  Tensor cols({patch, n_cols});
  ConstMapRM w_mat(weight_.value.data(), in_channels_, patch);
  ConstMapRM x_mat(x.data(), in_channels_, n_cols);
  MapRM c_mat(cols.data(), patch, n_cols);
  c_mat.noalias() = w_mat.transpose() * x_mat;

  Tensor y({out_channels_, out_h_, out_w_});
  col2im(cols.data(), out_channels_, out_h_, out_w_, kernel_, stride_, pad_, in_h_, in_w_,
         y.data());
  for (int oc = 0; oc < out_channels_; ++oc) {
    float* channel = y.data() + static_cast<std::size_t>(oc) * out_h_ * out_w_;
    const float b = bias_.value[oc];
    for (int i = 0; i < out_h_ * out_w_; ++i) channel[i] += b;
  }
  return y;
}

Tensor ConvTranspose2d::backward(const Tensor& dy) {
  if (dy.rank() != 3 || dy.dim(0) != out_channels_ || dy.dim(1) != out_h_ ||
      dy.dim(2) != out_w_) {
    throw ShapeError("conv_transpose2d backward: gradient shape " + dy.shape_string() +
                     " does not match forward output");
  }
  const int patch = out_channels_ * kernel_ * kernel_;
  const int n_cols = in_h_ * in_w_;

  Tensor dcols({patch, n_cols});
  im2col(dy.data(), out_channels_, out_h_, out_w_, kernel_, stride_, pad_, in_h_, in_w_,
         dcols.data());

  ConstMapRM dc_mat(dcols.data(), patch, n_cols);
  ConstMapRM x_mat(input_.data(), in_channels_, n_cols);
  MapRM dw_mat(weight_.grad.data(), in_channels_, patch);
  dw_mat.noalias() += x_mat * dc_mat.transpose();

  const float* dy_data = dy.data();
  for (int oc = 0; oc < out_channels_; ++oc) {
    double sum = 0.0;
    const float* channel = dy_data + static_cast<std::size_t>(oc) * out_h_ * out_w_;
    for (int i = 0; i < out_h_ * out_w_; ++i) sum += channel[i];
    bias_.grad[oc] += static_cast<float>(sum);
  }

  Tensor dx({in_channels_, in_h_, in_w_});
  ConstMapRM w_mat(weight_.value.data(), in_channels_, patch);
  MapRM dx_mat(dx.data(), in_channels_, n_cols);
  dx_mat.noalias() = w_mat * dc_mat;
  return dx;
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

Linear::Linear(ParamRegistry& registry, const std::string& path_prefix, ParamTag tag, int in_dim,
               int out_dim, LinearInit init, Rng& rng)
    : weight_(registry.create(path_prefix + ".weight", tag, {out_dim, in_dim})),
      bias_(registry.create(path_prefix + ".bias", tag, {out_dim})) {
  switch (init) {
    case LinearInit::Normal02:
      rng.fill_normal(weight_.value, 0.0, 0.02);
      break;
    case LinearInit::HeNormal:
      rng.fill_normal(weight_.value, 0.0, std::sqrt(2.0 / in_dim));
      break;
    case LinearInit::ZeroBiasOne:
      bias_.value.fill(1.0f);
      break;
    case LinearInit::Zero:
      break;
  }
}

Tensor Linear::forward(const Tensor& x) {
  const int out_dim = weight_.value.dim(0);
  const int in_dim = weight_.value.dim(1);
  if (x.rank() != 1 || x.dim(0) != in_dim) {
    throw ShapeError("linear: expected {" + std::to_string(in_dim) + "} input, got " +
                     x.shape_string());
  }
  input_ = x;
  Tensor y({out_dim});
  ConstMapRM w_mat(weight_.value.data(), out_dim, in_dim);
  Eigen::Map<const Eigen::VectorXf> x_vec(x.data(), in_dim);
  Eigen::Map<const Eigen::VectorXf> b_vec(bias_.value.data(), out_dim);
  Eigen::Map<Eigen::VectorXf> y_vec(y.data(), out_dim);
  y_vec.noalias() = w_mat * x_vec + b_vec;
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  const int out_dim = weight_.value.dim(0);
  const int in_dim = weight_.value.dim(1);
  if (dy.rank() != 1 || dy.dim(0) != out_dim) {
    throw ShapeError("linear backward: gradient shape " + dy.shape_string() +
                     " does not match output");
  }
  ConstMapRM w_mat(weight_.value.data(), out_dim, in_dim);
  Eigen::Map<const Eigen::VectorXf> dy_vec(dy.data(), out_dim);
  Eigen::Map<const Eigen::VectorXf> x_vec(input_.data(), in_dim);

  MapRM dw_mat(weight_.grad.data(), out_dim, in_dim);
  dw_mat.noalias() += dy_vec * x_vec.transpose();
  Eigen::Map<Eigen::VectorXf> db_vec(bias_.grad.data(), out_dim);
  db_vec.noalias() += dy_vec;

  Tensor dx({in_dim});
  Eigen::Map<Eigen::VectorXf> dx_vec(dx.data(), in_dim);
  dx_vec.noalias() = w_mat.transpose() * dy_vec;
  return dx;
}

// ---------------------------------------------------------------------------
// Mlp
// ---------------------------------------------------------------------------

namespace {
constexpr float kMlpSlope = 0.2f;
}

Mlp::Mlp(ParamRegistry& registry, const std::string& path_prefix, ParamTag tag,
         const std::vector<int>& dims, LinearInit hidden_init, LinearInit final_init, Rng& rng) {
  if (dims.size() < 2) throw ConfigError("mlp needs at least one layer");
  layers_.reserve(dims.size() - 1);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const bool last = (i + 2 == dims.size());
    layers_.emplace_back(registry, path_prefix + ".fc" + std::to_string(i + 1), tag, dims[i],
                         dims[i + 1], last ? final_init : hidden_init, rng);
  }
  hidden_pre_.resize(layers_.size() > 0 ? layers_.size() - 1 : 0);
}

Tensor Mlp::forward(const Tensor& x) {
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(h);
    if (i + 1 < layers_.size()) {
      hidden_pre_[i] = h;
      h = leaky_relu_forward(h, kMlpSlope);
    }
  }
  return h;
}

Tensor Mlp::backward(const Tensor& dy) {
  Tensor g = dy;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (i + 1 < layers_.size()) {
      g = leaky_relu_backward(hidden_pre_[i], g, kMlpSlope);
    }
    g = layers_[i].backward(g);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0.0f) y[i] = 0.0f;
  }
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  if (!x.same_shape(dy)) throw ShapeError("relu backward: shape mismatch");
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    if (x[i] <= 0.0f) dx[i] = 0.0f;
  }
  return dx;
}

Tensor leaky_relu_forward(const Tensor& x, float slope) {
  Tensor y = x;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0.0f) y[i] *= slope;
  }
  return y;
}

Tensor leaky_relu_backward(const Tensor& x, const Tensor& dy, float slope) {
  if (!x.same_shape(dy)) throw ShapeError("leaky relu backward: shape mismatch");
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    if (x[i] <= 0.0f) dx[i] *= slope;
  }
  return dx;
}

Tensor tanh_forward(const Tensor& x) {
  Tensor y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(y[i]);
  return y;
}

Tensor tanh_backward(const Tensor& y, const Tensor& dy) {
  if (!y.same_shape(dy)) throw ShapeError("tanh backward: shape mismatch");
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    dx[i] *= 1.0f - y[i] * y[i];
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Adaptive instance normalization
// ---------------------------------------------------------------------------

Tensor adain_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, AdaInCache& cache) {
  if (x.rank() != 3) throw ShapeError("adain: expected {C, H, W} input, got " + x.shape_string());
  const int channels = x.dim(0);
  if (gamma.rank() != 1 || gamma.dim(0) != channels || beta.rank() != 1 ||
      beta.dim(0) != channels) {
    throw ShapeError("adain: scale/shift must have one entry per channel");
  }
  const int plane = x.dim(1) * x.dim(2);

  cache.normalized = Tensor(x.shape());
  cache.denom.assign(channels, 0.0);
  cache.gamma = gamma;

  Tensor y(x.shape());
  for (int c = 0; c < channels; ++c) {
    const float* src = x.data() + static_cast<std::size_t>(c) * plane;
    float* norm = cache.normalized.data() + static_cast<std::size_t>(c) * plane;
    float* dst = y.data() + static_cast<std::size_t>(c) * plane;

    double sum = 0.0;
    for (int i = 0; i < plane; ++i) sum += src[i];
    const double mean = sum / plane;
    double var = 0.0;
    for (int i = 0; i < plane; ++i) {
      const double d = src[i] - mean;
      var += d * d;
    }
    var /= plane;
    const double denom = std::sqrt(var) + static_cast<double>(kAdaInEpsilon);
    cache.denom[c] = denom;

    const float g = gamma[c];
    const float b = beta[c];
    for (int i = 0; i < plane; ++i) {
      const float n = static_cast<float>((src[i] - mean) / denom);
      norm[i] = n;
      dst[i] = g * n + b;
    }
  }
  return y;
}

Tensor adain_backward(const AdaInCache& cache, const Tensor& dy, Tensor& dgamma, Tensor& dbeta) {
  const Tensor& norm = cache.normalized;
  if (!dy.same_shape(norm)) throw ShapeError("adain backward: gradient shape mismatch");
  const int channels = norm.dim(0);
  const int plane = norm.dim(1) * norm.dim(2);
  dgamma = Tensor({channels});
  dbeta = Tensor({channels});

  Tensor dx(norm.shape());
  for (int c = 0; c < channels; ++c) {
    const float* n = norm.data() + static_cast<std::size_t>(c) * plane;
    const float* g_out = dy.data() + static_cast<std::size_t>(c) * plane;
    float* dst = dx.data() + static_cast<std::size_t>(c) * plane;

    double sum_dy = 0.0;
    double sum_dy_norm = 0.0;
    for (int i = 0; i < plane; ++i) {
      sum_dy += g_out[i];
      sum_dy_norm += static_cast<double>(g_out[i]) * n[i];
    }
    dbeta[c] = static_cast<float>(sum_dy);
    dgamma[c] = static_cast<float>(sum_dy_norm);

    const double gamma = cache.gamma[c];
    const double denom = cache.denom[c];
    const double sigma = denom - static_cast<double>(kAdaInEpsilon);
    const double mean_term = sum_dy / plane;
    // When the channel is constant (sigma == 0) the variance term is dropped
    // (safe subgradient).
    const double var_term = sigma > 1e-12 ? sum_dy_norm / (plane * sigma) : 0.0;
    for (int i = 0; i < plane; ++i) {
      dst[i] = static_cast<float>(gamma * ((g_out[i] - mean_term) / denom - n[i] * var_term));
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Channel weighting
// ---------------------------------------------------------------------------

Tensor channel_scale_forward(const Tensor& x, const Tensor& scale, ChannelScaleCache& cache) {
  if (x.rank() != 3) {
    throw ShapeError("channel scale: expected {C, H, W} input, got " + x.shape_string());
  }
  const int channels = x.dim(0);
  if (scale.rank() != 1 || scale.dim(0) != channels) {
    throw ShapeError("channel scale: one weight per channel required");
  }
  cache.input = x;
  cache.scale = scale;
  const int plane = x.dim(1) * x.dim(2);
  Tensor y(x.shape());
  for (int c = 0; c < channels; ++c) {
    const float a = scale[c];
    const float* src = x.data() + static_cast<std::size_t>(c) * plane;
    float* dst = y.data() + static_cast<std::size_t>(c) * plane;
    for (int i = 0; i < plane; ++i) dst[i] = a * src[i];
  }
  return y;
}

Tensor channel_scale_backward(const ChannelScaleCache& cache, const Tensor& dy, Tensor& dscale) {
  const Tensor& x = cache.input;
  if (!dy.same_shape(x)) throw ShapeError("channel scale backward: gradient shape mismatch");
  const int channels = x.dim(0);
  const int plane = x.dim(1) * x.dim(2);
  dscale = Tensor({channels});
  Tensor dx(x.shape());
  for (int c = 0; c < channels; ++c) {
    const float a = cache.scale[c];
    const float* src = x.data() + static_cast<std::size_t>(c) * plane;
    const float* g = dy.data() + static_cast<std::size_t>(c) * plane;
    float* dst = dx.data() + static_cast<std::size_t>(c) * plane;
    double acc = 0.0;
    for (int i = 0; i < plane; ++i) {
      acc += static_cast<double>(g[i]) * src[i];
      dst[i] = a * g[i];
    }
    dscale[c] = static_cast<float>(acc);
  }
  return dx;
}

}  // namespace pfls
