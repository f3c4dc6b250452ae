// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "pfls/generator.hpp"
#include "pfls/metrics.hpp"
#include "pfls/rng.hpp"

using namespace pfls;

namespace {

Tensor random_image(Rng& rng, int h, int w, double stddev = 0.3) {
  Tensor t({h, w});
  rng.fill_normal(t, 0.0, stddev);
  for (int i = 0; i < t.size(); ++i) {
    t.data()[i] = std::clamp(t.data()[i], -1.0f, 1.0f);
  }
  return t;
}

std::vector<double> vec(std::initializer_list<double> values) { return values; }

}  // namespace

TEST_CASE("psnr matches hand-computed values") {
  Tensor ref({4, 4}), cand({4, 4});
  std::fill(ref.data(), ref.data() + 16, 0.0f);
  std::fill(cand.data(), cand.data() + 16, 0.2f);
  // mse = 0.04 over range 2: 10*log10(4 / 0.04) = 20 dB (up to f32 rounding
  // of the stored 0.2f inputs).
  CHECK(psnr(ref, cand) == doctest::Approx(20.0).epsilon(1e-7));

  // Identical images hit the cap instead of infinity.
  CHECK(psnr(ref, ref) == doctest::Approx(99.0));

  // Worst case: constant -1 vs +1 gives 0 dB.
  Tensor lo({4, 4}), hi({4, 4});
  std::fill(lo.data(), lo.data() + 16, -1.0f);
  std::fill(hi.data(), hi.data() + 16, 1.0f);
  CHECK(psnr(lo, hi) == doctest::Approx(0.0));

  CHECK_THROWS_AS(psnr(ref, Tensor({3, 3})), ShapeError);
}

TEST_CASE("ssim is exactly one on identical images and drops with distortion") {
  Rng rng(5);
  const Tensor img = random_image(rng, 24, 24);
  CHECK(ssim(img, img) == 1.0);

  Tensor noisy = img;
  Rng noise_rng(6);
  for (int i = 0; i < noisy.size(); ++i) {
    noisy.data()[i] += 0.3f * static_cast<float>(noise_rng.normal());
  }
  const double degraded = ssim(img, noisy);
  CHECK(degraded < 0.95);
  CHECK(degraded > -1.0);

  // A mild distortion scores better than a severe one.
  Tensor mild = img;
  for (int i = 0; i < mild.size(); ++i) {
    mild.data()[i] += 0.05f * static_cast<float>(noise_rng.normal());
  }
  CHECK(ssim(img, mild) > degraded);

  // Rank-3 single-channel views are accepted.
  CHECK(ssim(img.reshaped({1, 24, 24}), img) == 1.0);

  // Images smaller than the window are rejected.
  CHECK_THROWS_AS(ssim(Tensor({8, 8}), Tensor({8, 8})), ShapeError);
}

TEST_CASE("spearman handles monotone, reversed, and tied data") {
  // Perfect monotone association.
  CHECK(spearman(vec({1, 2, 3, 4, 5}), vec({10, 20, 30, 40, 50})) == doctest::Approx(1.0));
  // Perfect inverse association.
  CHECK(spearman(vec({1, 2, 3, 4, 5}), vec({5, 4, 3, 2, 1})) == doctest::Approx(-1.0));
  // Nonlinear but monotone transforms keep rho = 1.
  CHECK(spearman(vec({1, 2, 3, 4}), vec({1, 8, 27, 64})) == doctest::Approx(1.0));

  // Hand-computed example with a tie: x = {1, 2, 2, 4}, y = {3, 1, 4, 2}.
  // Average ranks: x -> {1, 2.5, 2.5, 4}, y -> {3, 1, 4, 2}. Centered rank
  // products sum to -1.5 over sqrt(4.5 * 5), so rho = -0.31622777.
  CHECK(spearman(vec({1, 2, 2, 4}), vec({3, 1, 4, 2})) ==
        doctest::Approx(-0.31622777).epsilon(1e-6));

  // Constant inputs: both constant count as perfectly concordant, a single
  // constant as uncorrelated.
  CHECK(spearman(vec({2, 2, 2}), vec({5, 5, 5})) == doctest::Approx(1.0));
  CHECK(spearman(vec({2, 2, 2}), vec({1, 2, 3})) == doctest::Approx(0.0));

  CHECK_THROWS_AS(spearman(vec({1, 2}), vec({1, 2, 3})), ShapeError);
  CHECK_THROWS_AS(spearman(vec({1.0}), vec({1.0})), ShapeError);
}

TEST_CASE("activation similarity compares sites stage by stage") {
  ModelSpec spec;
  spec.image_size = 16;
  spec.base_width = 4;
  spec.bottleneck_depth = 2;
  spec.latent_dim = 8;
  spec.site_slots = 3;
  spec.mapper_layers = 2;
  spec.cw_hidden = 8;
  spec.split_stage = "r1";

  Generator a(spec, 1);
  Generator b(spec, 2);
  Rng rng(9);
  std::vector<Tensor> probes;
  for (int i = 0; i < 3; ++i) probes.push_back(random_image(rng, 16, 16));
  const std::vector<ConditionCodes> codes = {
      make_codes(spec, 0, {Contrast::T1, Contrast::T2}),
      make_codes(spec, 1, {Contrast::T1, Contrast::T2}),
  };

  SUBCASE("identical models correlate perfectly") {
    Generator twin(spec, 1);
    const SimilarityProfile profile =
        activation_similarity({&a, &twin}, codes, probes);
    // All stages except the readout are profiled.
    CHECK(profile.stages.size() == a.stage_names().size() - 1);
    for (double m : profile.mean) CHECK(m == doctest::Approx(1.0).epsilon(1e-9));
    for (double s : profile.stddev) CHECK(s == doctest::Approx(0.0));
  }

  SUBCASE("independently initialized models correlate imperfectly") {
    const SimilarityProfile profile = activation_similarity({&a, &b}, codes, probes);
    bool any_below = false;
    for (double m : profile.mean) {
      CHECK(m <= 1.0);
      if (m < 0.999) any_below = true;
    }
    CHECK(any_below);
  }

  SUBCASE("input validation") {
    CHECK_THROWS_AS(activation_similarity({&a}, {codes[0]}, probes), ConfigError);
    CHECK_THROWS_AS(activation_similarity({&a, &b}, {codes[0]}, probes), ConfigError);
    CHECK_THROWS_AS(activation_similarity({&a, &b}, codes, {}), ConfigError);
  }
}
