// SPDX-License-Identifier: Apache-2.0
#include "pfls/discriminator.hpp"

#include <cmath>

namespace pfls {
namespace {

constexpr float kSlope = 0.2f;

Tensor as_chw(const Tensor& image) {
  if (image.rank() == 3) return image;
  if (image.rank() == 2) {
    Tensor out({1, image.dim(0), image.dim(1)});
    std::copy(image.data(), image.data() + image.size(), out.data());
    return out;
  }
  throw ShapeError("expected a {H, W} or {1, H, W} image, got " + image.shape_string());
}

}  // namespace

PatchDiscriminator::PatchDiscriminator(const std::string& path_prefix, int base_width,
                                       std::uint64_t init_seed) {
  Rng rng(derive_seed(init_seed, "model"));
  const int w0 = base_width;
  struct Plan {
    int in_c, out_c, stride;
  };
  const Plan plan[] = {
      {2, w0, 2}, {w0, 2 * w0, 2}, {2 * w0, 4 * w0, 2}, {4 * w0, 4 * w0, 1}, {4 * w0, 1, 1}};
  convs_.reserve(5);
  for (int i = 0; i < 5; ++i) {
    convs_.emplace_back(registry_, path_prefix + ".conv" + std::to_string(i + 1),
                        ParamTag::Discriminator, plan[i].in_c, plan[i].out_c, 4, plan[i].stride,
                        1, rng);
  }
  pre_act_.resize(4);
}

Tensor PatchDiscriminator::forward(const Tensor& source, const Tensor& candidate) {
  const Tensor s = as_chw(source);
  const Tensor c = as_chw(candidate);
  if (!s.same_shape(c)) {
    throw ShapeError("discriminator inputs must share a shape, got " + s.shape_string() +
                     " and " + c.shape_string());
  }
  Tensor x({2, s.dim(1), s.dim(2)});
  std::copy(s.data(), s.data() + s.size(), x.data());
  std::copy(c.data(), c.data() + c.size(), x.data() + s.size());

  Tensor h = x;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    h = convs_[i].forward(h);
    if (i + 1 < convs_.size()) {
      pre_act_[i] = h;
      h = leaky_relu_forward(h, kSlope);
    }
  }
  return h;
}

Tensor PatchDiscriminator::backward(const Tensor& d_score, bool accumulate_param_grads) {
  Tensor g = d_score;
  for (std::size_t i = convs_.size(); i-- > 0;) {
    if (i + 1 < convs_.size()) {
      g = leaky_relu_backward(pre_act_[i], g, kSlope);
    }
    g = convs_[i].backward(g);
  }
  if (!accumulate_param_grads) registry_.zero_grads();

  // g is the gradient w.r.t. the stacked {2, H, W} input; return the
  // candidate half.
  Tensor dc({1, g.dim(1), g.dim(2)});
  std::copy(g.data() + dc.size(), g.data() + 2 * dc.size(), dc.data());
  return dc;
}

double lsgan_loss(const Tensor& score, float target) {
  if (score.empty()) throw ShapeError("lsgan loss of an empty score map");
  double acc = 0.0;
  for (std::size_t i = 0; i < score.size(); ++i) {
    const double d = static_cast<double>(score[i]) - target;
    acc += d * d;
  }
  return acc / static_cast<double>(score.size());
}

Tensor lsgan_grad(const Tensor& score, float target) {
  if (score.empty()) throw ShapeError("lsgan gradient of an empty score map");
  Tensor grad(score.shape());
  const float scale = 2.0f / static_cast<float>(score.size());
  for (std::size_t i = 0; i < score.size(); ++i) {
    grad[i] = scale * (score[i] - target);
  }
  return grad;
}

double l1_loss(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("l1 loss: shape mismatch");
  if (a.empty()) throw ShapeError("l1 loss of empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  }
  return acc / static_cast<double>(a.size());
}

Tensor l1_grad(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("l1 gradient: shape mismatch");
  if (a.empty()) throw ShapeError("l1 gradient of empty tensors");
  Tensor grad(a.shape());
  const float scale = 1.0f / static_cast<float>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const float d = a[i] - b[i];
    grad[i] = d > 0.0f ? scale : (d < 0.0f ? -scale : 0.0f);
  }
  return grad;
}

}  // namespace pfls
