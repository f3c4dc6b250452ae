// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "pfls/param_store.hpp"
#include "pfls/rng.hpp"

using namespace pfls;

namespace {

Tensor filled(const std::vector<int>& dims, float value) {
  Tensor t(dims);
  std::fill(t.data(), t.data() + t.size(), value);
  return t;
}

Tensor random_tensor(Rng& rng, const std::vector<int>& dims) {
  Tensor t(dims);
  rng.fill_normal(t, 0.0, 1.0);
  return t;
}

// Synthesizer-shaped tree for a depth-5 model split at `split`: conv weights
// for e1..e3, r1..r5, d1..d3 plus pb/mapper/discriminator entries.
ParameterTree synth_tree(const std::string& split, float fill = 0.5f) {
  const std::vector<std::string> stages = {"e1", "e2", "e3", "r1", "r2", "r3",
                                           "r4", "r5", "d1", "d2", "d3"};
  const int split_order = stage_order(split, 5);
  ParameterTree tree;
  for (const auto& stage : stages) {
    const ParamTag tag =
        stage_order(stage, 5) <= split_order ? ParamTag::Upstream : ParamTag::Downstream;
    tree.insert("synthesizer." + stage + ".conv.weight", filled({2, 3}, fill), tag);
    if (stage != "d3") {
      tree.insert("synthesizer." + stage + ".pb.scale.weight", filled({4}, fill),
                  ParamTag::Personalization);
    }
  }
  tree.insert("mapper.fc0.weight", filled({3, 3}, fill), ParamTag::Mapper);
  tree.insert("discriminator.cfg0.conv1.weight", filled({2, 2}, fill),
              ParamTag::Discriminator);
  return tree;
}

}  // namespace

TEST_CASE("stage order is total and validates names") {
  CHECK(stage_order("e1", 5) == 1);
  CHECK(stage_order("e3", 5) == 3);
  CHECK(stage_order("r1", 5) == 4);
  CHECK(stage_order("r5", 5) == 8);
  CHECK(stage_order("d1", 5) == 9);
  CHECK(stage_order("d3", 5) == 11);
  CHECK(stage_order("r9", 9) == 12);
  CHECK_THROWS_AS(stage_order("r6", 5), ConfigError);
  CHECK_THROWS_AS(stage_order("x1", 5), ConfigError);
  CHECK_THROWS_AS(stage_order("r0", 5), ConfigError);
}

TEST_CASE("stage_of_path extracts synthesizer stages only") {
  CHECK(stage_of_path("synthesizer.r3.conv1.weight") == std::string("r3"));
  CHECK(stage_of_path("synthesizer.d2.deconv.bias") == std::string("d2"));
  CHECK_FALSE(stage_of_path("mapper.fc0.weight").has_value());
  CHECK_FALSE(stage_of_path("discriminator.cfg0.conv1.weight").has_value());
}

TEST_CASE("tree insert rejects duplicates and non-finite values") {
  ParameterTree tree;
  tree.insert("a", filled({2}, 1.0f), ParamTag::Mapper);
  CHECK_THROWS_AS(tree.insert("a", filled({2}, 1.0f), ParamTag::Mapper), ConfigError);
  Tensor bad({2});
  bad.data()[0] = std::nanf("");
  CHECK_THROWS_AS(tree.insert("b", bad, ParamTag::Mapper), ConfigError);
}

TEST_CASE("partition splits by tag and validates the boundary") {
  const ParameterTree tree = synth_tree("r3");
  const PartitionResult parts = partition(tree, "r3");

  // Upstream convs e1..r3, pbs and the discriminator stay local.
  CHECK(parts.local_part.contains("synthesizer.r3.conv.weight"));
  CHECK(parts.local_part.contains("synthesizer.e1.conv.weight"));
  CHECK(parts.local_part.contains("synthesizer.d2.pb.scale.weight"));
  CHECK(parts.local_part.contains("discriminator.cfg0.conv1.weight"));
  CHECK_FALSE(parts.local_part.contains("mapper.fc0.weight"));

  // Downstream convs r4..d3 and the mapper are shared.
  CHECK(parts.shared_part.contains("synthesizer.r4.conv.weight"));
  CHECK(parts.shared_part.contains("synthesizer.d3.conv.weight"));
  CHECK(parts.shared_part.contains("mapper.fc0.weight"));
  CHECK_FALSE(parts.shared_part.contains("synthesizer.r3.conv.weight"));

  // Re-union preserves every entry.
  CHECK(parts.local_part.entry_count() + parts.shared_part.entry_count() ==
        tree.entry_count());
  CHECK(count_params(parts.local_part) + count_params(parts.shared_part) ==
        count_params(tree));

  // A different split stage contradicts the stored tags.
  CHECK_THROWS_AS(partition(tree, "r2"), ConfigError);
  CHECK_THROWS_AS(partition(tree, "d1"), ConfigError);
}

TEST_CASE("partition boundary cases r5 and d3") {
  // Split at r5: every residual stage is upstream, decoders shared.
  const PartitionResult at_r5 = partition(synth_tree("r5"), "r5");
  CHECK(at_r5.local_part.contains("synthesizer.r5.conv.weight"));
  CHECK(at_r5.shared_part.contains("synthesizer.d1.conv.weight"));

  // Split at d3: the whole synthesizer is upstream; only the mapper is shared.
  const PartitionResult at_d3 = partition(synth_tree("d3"), "d3");
  CHECK(at_d3.local_part.contains("synthesizer.d3.conv.weight"));
  CHECK(at_d3.shared_part.entry_count() == 1);
  CHECK(at_d3.shared_part.contains("mapper.fc0.weight"));
}

TEST_CASE("site weights normalize sample counts") {
  const SiteWeights w = SiteWeights::from_counts({10, 30, 60});
  REQUIRE(w.weights.size() == 3);
  CHECK(w.weights[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(w.weights[1] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(w.weights[2] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK_THROWS_AS(SiteWeights::from_counts({}), ConfigError);
  CHECK_THROWS_AS(SiteWeights::from_counts({0, 0}), ConfigError);
  CHECK_THROWS_AS(SiteWeights::from_counts({-1, 2}), ConfigError);
}

TEST_CASE("weighted average matches a hand-computed example") {
  ParameterTree a, b;
  a.insert("p", filled({2, 2}, 2.0f), ParamTag::Downstream);
  b.insert("p", filled({2, 2}, 6.0f), ParamTag::Downstream);
  const ParameterTree avg =
      weighted_average(std::vector<ParameterTree>{a, b}, SiteWeights::from_counts({1, 3}));
  for (int i = 0; i < 4; ++i) CHECK(avg.at("p").value.data()[i] == doctest::Approx(5.0f));
}

TEST_CASE("weighted average validates structure") {
  ParameterTree a, b;
  a.insert("p", filled({2}, 1.0f), ParamTag::Downstream);
  b.insert("q", filled({2}, 1.0f), ParamTag::Downstream);
  CHECK_THROWS_AS(
      weighted_average(std::vector<ParameterTree>{a, b}, SiteWeights::from_counts({1, 1})),
      AggregationError);

  ParameterTree c;
  c.insert("p", filled({3}, 1.0f), ParamTag::Downstream);
  CHECK_THROWS_AS(
      weighted_average(std::vector<ParameterTree>{a, c}, SiteWeights::from_counts({1, 1})),
      AggregationError);

  ParameterTree d;
  d.insert("p", filled({2}, 1.0f), ParamTag::Upstream);
  CHECK_THROWS_AS(
      weighted_average(std::vector<ParameterTree>{a, d}, SiteWeights::from_counts({1, 1})),
      AggregationError);

  CHECK_THROWS_AS(
      weighted_average(std::vector<ParameterTree>{a, b}, SiteWeights::from_counts({1, 1, 1})),
      AggregationError);
}

TEST_CASE("weighted average equals an element-wise loop on random trees") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const int sites = 2 + static_cast<int>(rng.uniform_int(4));
    std::vector<std::int64_t> counts;
    for (int k = 0; k < sites; ++k) counts.push_back(1 + rng.uniform_int(50));

    std::vector<ParameterTree> trees(sites);
    const std::vector<std::vector<int>> shapes = {{3, 4}, {7}, {2, 2, 2}};
    for (std::size_t s = 0; s < shapes.size(); ++s) {
      for (int k = 0; k < sites; ++k) {
        trees[k].insert("t" + std::to_string(s), random_tensor(rng, shapes[s]),
                        ParamTag::Downstream);
      }
    }
    const SiteWeights weights = SiteWeights::from_counts(counts);
    const ParameterTree avg = weighted_average(trees, weights);

    double max_err = 0.0;
    for (std::size_t s = 0; s < shapes.size(); ++s) {
      const std::string path = "t" + std::to_string(s);
      const Tensor& got = avg.at(path).value;
      for (int i = 0; i < got.size(); ++i) {
        double expect = 0.0;
        for (int k = 0; k < sites; ++k) {
          expect += weights.weights[k] * trees[k].at(path).value.data()[i];
        }
        max_err = std::max(max_err, std::abs(expect - got.data()[i]));
      }
    }
    CHECK(max_err < 1e-6);
  }
}

TEST_CASE("count_params adds up tensor sizes") {
  ParameterTree tree;
  tree.insert("w", filled({3, 3, 8, 16}, 0.1f), ParamTag::Downstream);
  tree.insert("b", filled({16}, 0.0f), ParamTag::Downstream);
  CHECK(count_params(tree) == 3 * 3 * 8 * 16 + 16);
}

TEST_CASE("checkpoint encode/decode round-trips bit-exactly") {
  Rng rng(7);
  ParameterTree tree;
  tree.insert("synthesizer.e1.conv.weight", random_tensor(rng, {4, 1, 7, 7}),
              ParamTag::Upstream);
  tree.insert("mapper.fc0.weight", random_tensor(rng, {16, 13}), ParamTag::Mapper);
  tree.insert("synthesizer.r1.pb.scale.weight", random_tensor(rng, {4, 16}),
              ParamTag::Personalization);

  const std::vector<std::uint8_t> bytes = encode_tree(tree);
  CHECK(decode_tree(bytes) == tree);

  const auto path = std::filesystem::temp_directory_path() / "pfls_ckpt_test.bin";
  save_checkpoint(tree, path);
  CHECK(load_checkpoint(path) == tree);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint decoding rejects malformed containers") {
  ParameterTree tree;
  tree.insert("p", filled({2}, 1.0f), ParamTag::Mapper);
  std::vector<std::uint8_t> bytes = encode_tree(tree);

  std::vector<std::uint8_t> bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_tree(bad_magic), CheckpointError);

  std::vector<std::uint8_t> bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_tree(bad_version), CheckpointError);

  std::vector<std::uint8_t> truncated(bytes.begin(), bytes.end() - 3);
  CHECK_THROWS_AS(decode_tree(truncated), CheckpointError);

  // The tag byte sits right after the 4-byte path length and the path "p".
  std::vector<std::uint8_t> bad_tag = bytes;
  bad_tag[12 + 4 + 1] = 200;
  CHECK_THROWS_AS(decode_tree(bad_tag), CheckpointError);
}

TEST_CASE("tensor payload codec round-trips") {
  Rng rng(3);
  const Tensor t = random_tensor(rng, {2, 5, 3});
  std::vector<std::uint8_t> bytes;
  encode_tensor(t, bytes);
  std::size_t offset = 0;
  const Tensor back = decode_tensor(bytes.data(), bytes.size(), offset);
  CHECK(offset == bytes.size());
  REQUIRE(back.rank() == 3);
  CHECK(back.dim(1) == 5);
  for (int i = 0; i < t.size(); ++i) CHECK(back.data()[i] == t.data()[i]);
}
