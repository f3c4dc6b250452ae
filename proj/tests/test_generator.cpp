// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <set>

#include "pfls/generator.hpp"

using namespace pfls;

namespace {

ModelSpec tiny_spec() {
  ModelSpec spec;
  spec.image_size = 16;
  spec.base_width = 4;
  spec.bottleneck_depth = 2;
  spec.latent_dim = 8;
  spec.site_slots = 3;
  spec.contrast_slots = 4;
  spec.mapper_layers = 2;
  spec.cw_hidden = 8;
  spec.split_stage = "r1";
  return spec;
}

Tensor random_image(Rng& rng, int size) {
  Tensor t({size, size});
  rng.fill_normal(t, 0.0, 0.5);
  return t;
}

}  // namespace

TEST_CASE("model spec validation") {
  ModelSpec spec = tiny_spec();
  CHECK_NOTHROW(spec.validate());
  spec.split_stage = "r7";  // beyond the bottleneck depth
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = tiny_spec();
  spec.image_size = 30;  // not divisible by 4
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = tiny_spec();
  spec.bottleneck_depth = 0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("condition codes are one-hot with spare slots") {
  const ModelSpec spec = tiny_spec();
  const ConditionCodes codes = make_codes(spec, 1, {Contrast::T2, Contrast::FL});
  REQUIRE(codes.site.size() == 3);
  REQUIRE(codes.task.size() == 8);
  CHECK(codes.site.data()[0] == 0.0f);
  CHECK(codes.site.data()[1] == 1.0f);
  CHECK(codes.site.data()[2] == 0.0f);
  // Source one-hot in the first half, target one-hot in the second.
  CHECK(codes.task.data()[static_cast<int>(Contrast::T2)] == 1.0f);
  CHECK(codes.task.data()[4 + static_cast<int>(Contrast::FL)] == 1.0f);
  float sum = 0.0f;
  for (int i = 0; i < 8; ++i) sum += codes.task.data()[i];
  CHECK(sum == 2.0f);

  const Tensor cat = codes.concat();
  CHECK(cat.size() == spec.code_length());

  CHECK_THROWS_AS(make_codes(spec, 3, {Contrast::T1, Contrast::T2}), ConfigError);
  CHECK_THROWS_AS(make_codes(spec, -1, {Contrast::T1, Contrast::T2}), ConfigError);

  ModelSpec no_site = spec;
  no_site.use_site_code = false;
  const ConditionCodes blank = make_codes(no_site, 1, {Contrast::T1, Contrast::T2});
  for (int i = 0; i < blank.site.size(); ++i) CHECK(blank.site.data()[i] == 0.0f);
}

TEST_CASE("generator stage layout and parameter tags") {
  const ModelSpec spec = tiny_spec();
  Generator gen(spec, 7);
  const std::vector<std::string> expect = {"e1", "e2", "e3", "r1", "r2", "d1", "d2", "d3"};
  CHECK(gen.stage_names() == expect);
  CHECK(gen.stage_index("r2") == 4);
  CHECK_THROWS_AS(gen.stage_index("r9"), ConfigError);

  // Tags follow the split: stages at or before r1 are upstream, later ones
  // downstream; every pb is site-local; mapper parameters tagged as such.
  const ParameterTree tree = gen.params().export_tree();
  const int split = stage_order(spec.split_stage, spec.bottleneck_depth);
  bool saw_pb = false, saw_mapper = false;
  for (const auto& [path, entry] : tree) {
    if (path.find(".pb.") != std::string::npos) {
      CHECK(entry.tag == ParamTag::Personalization);
      saw_pb = true;
    } else if (path.rfind("mapper.", 0) == 0) {
      CHECK(entry.tag == ParamTag::Mapper);
      saw_mapper = true;
    } else {
      const auto stage = stage_of_path(path);
      REQUIRE(stage.has_value());
      const bool upstream = stage_order(*stage, spec.bottleneck_depth) <= split;
      CHECK(entry.tag == (upstream ? ParamTag::Upstream : ParamTag::Downstream));
    }
  }
  CHECK(saw_pb);
  CHECK(saw_mapper);

  // The last stage carries no personalization block.
  for (const auto& [path, entry] : tree) {
    (void)entry;
    CHECK(path.find("d3.pb") == std::string::npos);
  }
}

TEST_CASE("generator forward has the right shape, range, and determinism") {
  const ModelSpec spec = tiny_spec();
  Generator a(spec, 7);
  Generator b(spec, 7);
  Generator c(spec, 8);
  Rng rng(3);
  const Tensor x = random_image(rng, spec.image_size);
  const ConditionCodes codes = make_codes(spec, 0, {Contrast::T1, Contrast::T2});

  const Tensor ya = a.forward(x, codes);
  REQUIRE(ya.rank() == 3);
  CHECK(ya.dim(0) == 1);
  CHECK(ya.dim(1) == spec.image_size);
  CHECK(ya.dim(2) == spec.image_size);
  for (int i = 0; i < ya.size(); ++i) {
    CHECK(ya.data()[i] >= -1.0f);
    CHECK(ya.data()[i] <= 1.0f);
  }

  CHECK(ya.raw() == b.forward(x, codes).raw());
  CHECK(ya.raw() != c.forward(x, codes).raw());

  // Rank-2 and rank-3 inputs agree.
  const Tensor x3 = x.reshaped({1, spec.image_size, spec.image_size});
  CHECK(a.forward(x3, codes).raw() == ya.raw());

  CHECK_THROWS_AS(a.forward(Tensor({2, 16, 16}), codes), ShapeError);
  CHECK_THROWS_AS(a.forward(Tensor({10, 10}), codes), ShapeError);
}

TEST_CASE("personalization is code-neutral at initialization") {
  // With zero scale/shift projections and a unit channel-weight head, a fresh
  // generator's pb must not perturb the conditioning-free signal path: two
  // models differing only in conditioning codes coincide at initialization.
  const ModelSpec spec = tiny_spec();
  Generator gen(spec, 21);
  Rng rng(4);
  const Tensor x = random_image(rng, spec.image_size);
  const Tensor y0 = gen.forward(x, make_codes(spec, 0, {Contrast::T1, Contrast::T2}));
  const Tensor y1 = gen.forward(x, make_codes(spec, 2, {Contrast::FL, Contrast::PD}));
  for (int i = 0; i < y0.size(); ++i) {
    CHECK(y0.data()[i] == doctest::Approx(y1.data()[i]).epsilon(1e-6));
  }
}

TEST_CASE("latent production honors the mapper switch") {
  const ModelSpec spec = tiny_spec();
  Generator gen(spec, 9);
  const ConditionCodes codes = make_codes(spec, 1, {Contrast::T1, Contrast::T2});
  const Tensor w = gen.map_latent(codes);
  CHECK(w.size() == spec.latent_dim);

  ModelSpec no_mapper = spec;
  no_mapper.use_mapper = false;
  Generator direct(no_mapper, 9);
  const Tensor raw = direct.map_latent(make_codes(no_mapper, 1, {Contrast::T1, Contrast::T2}));
  CHECK(raw.size() == no_mapper.code_length());
  CHECK(raw.raw() == make_codes(no_mapper, 1, {Contrast::T1, Contrast::T2}).concat().raw());
}

TEST_CASE("stage capture and forward_from agree with the full pass") {
  const ModelSpec spec = tiny_spec();
  Generator gen(spec, 11);
  Rng rng(5);
  const Tensor x = random_image(rng, spec.image_size);
  const ConditionCodes codes = make_codes(spec, 2, {Contrast::T2, Contrast::T1});

  gen.set_capture_stages(true);
  const Tensor y = gen.forward(x, codes);
  const auto& outputs = gen.stage_outputs();
  REQUIRE(outputs.size() == gen.stage_names().size());

  // Resuming from the split boundary reproduces the full forward exactly.
  const int boundary = gen.stage_index(spec.split_stage);
  const Tensor resumed = gen.forward_from(boundary + 1, outputs[boundary], codes);
  CHECK(resumed.raw() == y.raw());

  // The final stage output is the network output.
  CHECK(outputs.back().raw() == y.raw());
  gen.set_capture_stages(false);
}

TEST_CASE("generator backward produces finite gradients everywhere") {
  const ModelSpec spec = tiny_spec();
  Generator gen(spec, 13);
  Rng rng(6);
  // At exact initialization the personalization projections are zero, so no
  // gradient reaches the latent or the mapper; nudge all parameters first.
  for (Parameter& p : gen.params()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      p.value.data()[i] += static_cast<float>(rng.normal(0.0, 0.05));
    }
  }
  const Tensor x = random_image(rng, spec.image_size);
  const ConditionCodes codes = make_codes(spec, 0, {Contrast::T1, Contrast::T2});

  const Tensor y = gen.forward(x, codes);
  Tensor dy(y.shape());
  rng.fill_normal(dy, 0.0, 1.0);
  gen.params().zero_grads();
  const Tensor dx = gen.backward(dy);
  CHECK(dx.dim(1) == spec.image_size);

  bool all_finite = true;
  bool any_nonzero_mapper = false, any_nonzero_pb = false;
  for (const Parameter& p : gen.params()) {
    for (int i = 0; i < p.grad.size(); ++i) {
      if (!std::isfinite(p.grad.data()[i])) all_finite = false;
    }
    double norm = 0.0;
    for (int i = 0; i < p.grad.size(); ++i) norm += std::abs(p.grad.data()[i]);
    if (p.tag == ParamTag::Mapper && norm > 0) any_nonzero_mapper = true;
    if (p.tag == ParamTag::Personalization && norm > 0) any_nonzero_pb = true;
  }
  CHECK(all_finite);
  CHECK(any_nonzero_mapper);
  CHECK(any_nonzero_pb);
}

TEST_CASE("conditioning switches change the architecture") {
  ModelSpec spec = tiny_spec();
  Generator full(spec, 15);

  ModelSpec bare = spec;
  bare.use_mapper = false;
  bare.use_adain = false;
  bare.use_adacw = false;
  Generator plain(bare, 15);
  CHECK(plain.parameter_count() < full.parameter_count());

  // Without personalization or mapper there are no pb or mapper parameters.
  for (const Parameter& p : plain.params()) {
    CHECK(p.tag != ParamTag::Personalization);
    CHECK(p.tag != ParamTag::Mapper);
  }

  // A personalization-free model ignores the codes entirely.
  Rng rng(8);
  const Tensor x = random_image(rng, spec.image_size);
  const Tensor ya = plain.forward(x, make_codes(bare, 0, {Contrast::T1, Contrast::T2}));
  const Tensor yb = plain.forward(x, make_codes(bare, 2, {Contrast::T2, Contrast::T1}));
  CHECK(ya.raw() == yb.raw());
}
