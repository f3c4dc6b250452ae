// SPDX-License-Identifier: Apache-2.0
#include "pfls/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pfls/errors.hpp"

namespace pfls {
namespace {

// Accepts {H, W} or {1, H, W} and returns pointer/height/width.
struct ImageView {
  const float* data;
  int height;
  int width;
};

ImageView as_image(const Tensor& t, const char* who) {
  if (t.rank() == 2) return {t.data(), t.dim(0), t.dim(1)};
  if (t.rank() == 3 && t.dim(0) == 1) return {t.data(), t.dim(1), t.dim(2)};
  throw ShapeError(std::string(who) + ": expected a single-channel image, got " +
                   t.shape_string());
}

std::vector<double> ranks_of(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });

  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double average_rank = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = average_rank;
    i = j + 1;
  }
  return ranks;
}

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  const std::size_t n = xs.size();
  double mean_x = 0.0, mean_y = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_x += xs[i];
    mean_y += ys[i];
  }
  mean_x /= static_cast<double>(n);
  mean_y /= static_cast<double>(n);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = xs[i] - mean_x;
    const double dy = ys[i] - mean_y;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 && syy == 0.0) return 1.0;  // both constant, identical ordering
  if (sxx == 0.0 || syy == 0.0) return 0.0;  // one constant: no ordering to compare
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> flatten(const Tensor& t) {
  std::vector<double> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<double>(t[i]);
  return out;
}

}  // namespace

double psnr(const Tensor& reference, const Tensor& candidate, double range) {
  if (!reference.same_shape(candidate)) {
    throw ShapeError("psnr: shape mismatch between " + reference.shape_string() + " and " +
                     candidate.shape_string());
  }
  if (reference.empty()) throw ShapeError("psnr of empty images");
  if (range <= 0.0) throw ConfigError("psnr range must be positive");
  double mse = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double d = static_cast<double>(reference[i]) - static_cast<double>(candidate[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(reference.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(range * range / mse));
}

double ssim(const Tensor& reference, const Tensor& candidate, double range) {
  const ImageView a = as_image(reference, "ssim");
  const ImageView b = as_image(candidate, "ssim");
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError("ssim: shape mismatch");
  }
  constexpr int kWindow = 11;
  constexpr double kSigma = 1.5;
  if (a.height < kWindow || a.width < kWindow) {
    throw ShapeError("ssim needs images of at least 11x11 pixels");
  }
  if (range <= 0.0) throw ConfigError("ssim range must be positive");

  // Normalized Gaussian window.
  double window[kWindow][kWindow];
  double wsum = 0.0;
  for (int dy = 0; dy < kWindow; ++dy) {
    for (int dx = 0; dx < kWindow; ++dx) {
      const double ry = dy - (kWindow - 1) / 2.0;
      const double rx = dx - (kWindow - 1) / 2.0;
      window[dy][dx] = std::exp(-(ry * ry + rx * rx) / (2.0 * kSigma * kSigma));
      wsum += window[dy][dx];
    }
  }
  for (auto& row : window) {
    for (double& w : row) w /= wsum;
  }

  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);

  double total = 0.0;
  int count = 0;
  for (int y = 0; y + kWindow <= a.height; ++y) {
    for (int x = 0; x + kWindow <= a.width; ++x) {
      double mu_a = 0.0, mu_b = 0.0, aa = 0.0, bb = 0.0, ab = 0.0;
      for (int dy = 0; dy < kWindow; ++dy) {
        const float* pa = a.data + static_cast<std::size_t>(y + dy) * a.width + x;
        const float* pb = b.data + static_cast<std::size_t>(y + dy) * b.width + x;
        for (int dx = 0; dx < kWindow; ++dx) {
          const double w = window[dy][dx];
          const double va = pa[dx];
          const double vb = pb[dx];
          mu_a += w * va;
          mu_b += w * vb;
          aa += w * va * va;
          bb += w * vb * vb;
          ab += w * va * vb;
        }
      }
      const double var_a = aa - mu_a * mu_a;
      const double var_b = bb - mu_b * mu_b;
      const double cov = ab - mu_a * mu_b;
      const double numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
      const double denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
      total += numerator / denominator;
      ++count;
    }
  }
  return total / count;
}

double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw ShapeError("spearman: length mismatch");
  if (xs.size() < 2) throw ShapeError("spearman needs at least two samples");
  return pearson(ranks_of(xs), ranks_of(ys));
}

SimilarityProfile activation_similarity(const std::vector<Generator*>& generators,
                                        const std::vector<ConditionCodes>& codes,
                                        const std::vector<Tensor>& probes) {
  if (generators.size() < 2) throw ConfigError("activation similarity needs at least two models");
  if (codes.size() != generators.size()) {
    throw ConfigError("activation similarity needs one code set per model");
  }
  if (probes.empty()) throw ConfigError("activation similarity needs at least one probe image");
  const std::size_t n_models = generators.size();
  const auto& names = generators[0]->stage_names();
  for (const Generator* g : generators) {
    if (g->stage_names() != names) {
      throw ConfigError("activation similarity requires models with identical stage layouts");
    }
  }
  const std::size_t n_stages = names.size() - 1;  // final output stage is skipped

  SimilarityProfile profile;
  profile.stages.assign(names.begin(), names.begin() + n_stages);
  std::vector<double> sum(n_stages, 0.0), sum_sq(n_stages, 0.0);
  std::size_t samples = 0;

  // ranks[m][s]: rank vector of model m's stage-s activations for one probe.
  std::vector<std::vector<std::vector<double>>> ranks(n_models);
  for (const Tensor& probe : probes) {
    for (std::size_t m = 0; m < n_models; ++m) {
      Generator& gen = *generators[m];
      gen.set_capture_stages(true);
      gen.forward(probe, codes[m]);
      gen.set_capture_stages(false);
      ranks[m].clear();
      ranks[m].reserve(n_stages);
      for (std::size_t s = 0; s < n_stages; ++s) {
        ranks[m].push_back(ranks_of(flatten(gen.stage_outputs()[s])));
      }
    }
    for (std::size_t i = 0; i < n_models; ++i) {
      for (std::size_t j = i + 1; j < n_models; ++j) {
        for (std::size_t s = 0; s < n_stages; ++s) {
          const double rho = pearson(ranks[i][s], ranks[j][s]);
          sum[s] += rho;
          sum_sq[s] += rho * rho;
        }
        ++samples;
      }
    }
  }

  profile.mean.resize(n_stages);
  profile.stddev.resize(n_stages);
  for (std::size_t s = 0; s < n_stages; ++s) {
    const double mean = sum[s] / static_cast<double>(samples);
    const double var = std::max(0.0, sum_sq[s] / static_cast<double>(samples) - mean * mean);
    profile.mean[s] = mean;
    profile.stddev[s] = std::sqrt(var);
  }
  return profile;
}

}  // namespace pfls
