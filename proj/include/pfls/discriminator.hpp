// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pfls/layers.hpp"

namespace pfls {

// Patch discriminator over (source, candidate) channel pairs: five 4x4
// convolutions (strides 2,2,2,1,1) with LeakyReLU(0.2) between them and a raw
// single-channel patch-score map output, as used by least-squares adversarial
// training.
class PatchDiscriminator {
 public:
  PatchDiscriminator(const std::string& path_prefix, int base_width, std::uint64_t init_seed);

  // Inputs are {H, W} or {1, H, W}; they are stacked into a two-channel map.
  Tensor forward(const Tensor& source, const Tensor& candidate);
  // Backpropagates from the score-map gradient. Parameter gradients are
  // accumulated only when requested (the generator step must not pollute
  // them); returns the gradient w.r.t. the candidate image {1, H, W}.
  Tensor backward(const Tensor& d_score, bool accumulate_param_grads);

  ParamRegistry& params() { return registry_; }
  const ParamRegistry& params() const { return registry_; }
  std::int64_t parameter_count() const { return registry_.parameter_count(); }

 private:
  ParamRegistry registry_;
  std::vector<Conv2d> convs_;
  std::vector<Tensor> pre_act_;  // pre-activation cache per hidden conv
};

// Least-squares adversarial terms: mean squared distance of a score map to a
// scalar target.
double lsgan_loss(const Tensor& score, float target);
Tensor lsgan_grad(const Tensor& score, float target);

// Mean absolute error and its (sign-based) gradient w.r.t. the first operand.
double l1_loss(const Tensor& a, const Tensor& b);
Tensor l1_grad(const Tensor& a, const Tensor& b);

// Loss values of one generator+discriminator update on a single image pair.
struct LossReport {
  double adv_g = 0.0;    // generator's adversarial term
  double pix = 0.0;      // pixel-wise L1 term (unweighted)
  double total_g = 0.0;  // adv_g + lambda * pix
  double adv_d = 0.0;    // discriminator objective
};

}  // namespace pfls
