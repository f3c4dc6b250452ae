// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "pfls/generator.hpp"
#include "pfls/tensor.hpp"

namespace pfls {

// Peak signal-to-noise ratio in dB over a given dynamic range (2 for images
// in [-1, 1]). A zero-error pair reports the 99 dB cap.
double psnr(const Tensor& reference, const Tensor& candidate, double range = 2.0);
constexpr double kPsnrCap = 99.0;

// Mean structural similarity with the standard 11x11 Gaussian window
// (sigma 1.5, K1 = 0.01, K2 = 0.03), evaluated at fully-interior window
// positions. Identical images score exactly 1.
double ssim(const Tensor& reference, const Tensor& candidate, double range = 2.0);

// Spearman rank correlation with average ranks for ties. Two identical
// constant vectors correlate at 1; otherwise a constant vector yields 0.
double spearman(const std::vector<double>& xs, const std::vector<double>& ys);

// Per-stage agreement of synthesizer activations across models: every probe
// image is pushed through every generator and stage activations are compared
// pairwise by rank correlation. The final output stage is not profiled.
struct SimilarityProfile {
  std::vector<std::string> stages;
  std::vector<double> mean;    // over (probe, model pair)
  std::vector<double> stddev;  // population standard deviation
};

SimilarityProfile activation_similarity(const std::vector<Generator*>& generators,
                                        const std::vector<ConditionCodes>& codes,
                                        const std::vector<Tensor>& probes);

}  // namespace pfls
