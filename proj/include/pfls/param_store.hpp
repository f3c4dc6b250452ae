// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pfls/errors.hpp"
#include "pfls/tensor.hpp"

namespace pfls {

// Partition tag of a parameter. Assigned at model construction and immutable
// afterwards; aggregation scope is decided by tag, never by layer name.
enum class ParamTag : std::uint8_t {
  Upstream = 0,       // synthesizer stages at or below the split stage
  Downstream = 1,     // synthesizer stages above the split stage
  Personalization = 2,  // personalization-block parameters ("pb")
  Mapper = 3,
  Discriminator = 4,
};

const char* to_string(ParamTag tag);
std::optional<ParamTag> tag_from_byte(std::uint8_t b);
std::optional<ParamTag> tag_from_string(const std::string& s);

struct TreeEntry {
  Tensor value;
  ParamTag tag;
};

// Named, ordered collection of parameter tensors. Iteration order is
// lexicographic by path. Immutable by convention once fully constructed;
// operations below return new trees.
class ParameterTree {
 public:
  using Map = std::map<std::string, TreeEntry>;

  void insert(std::string path, Tensor value, ParamTag tag);

  bool contains(const std::string& path) const { return entries_.count(path) != 0; }
  const TreeEntry& at(const std::string& path) const;

  std::size_t entry_count() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }

  // Exact equality: same paths, tags and bitwise-equal tensors.
  bool operator==(const ParameterTree& other) const;
  bool operator!=(const ParameterTree& other) const { return !(*this == other); }

 private:
  Map entries_;
};

// Per-site aggregation weights derived from sample counts (alpha_k = n_k / n).
struct SiteWeights {
  std::vector<double> weights;
  std::vector<std::int64_t> sample_counts;

  static SiteWeights from_counts(std::vector<std::int64_t> counts);
};

// Synthesizer stage identifiers: e1..e3, r1..r9, d1..d3. Returns a total
// order index (e1 < e2 < e3 < r1 < ... < d3). bottleneck_depth gives the
// number of r-stages in the model the identifier refers to.
int stage_order(const std::string& stage, int bottleneck_depth);

// Extracts the stage identifier from a parameter path of the form
// "synthesizer.<stage>.<rest>", or nullopt for non-stage paths.
std::optional<std::string> stage_of_path(const std::string& path);

struct PartitionResult {
  ParameterTree local_part;   // upstream stages + pb + discriminator
  ParameterTree shared_part;  // downstream stages + mapper
};

// Splits a tree at the given stage. The split is driven by the stored tags;
// stage-addressed paths are cross-checked against split_stage so that a tree
// constructed under a different split is rejected instead of silently
// re-partitioned.
PartitionResult partition(const ParameterTree& tree, const std::string& split_stage);

// Element-wise weighted mean over trees with identical structure, summed in
// ascending site-index order with double accumulation.
ParameterTree weighted_average(const std::vector<const ParameterTree*>& trees,
                               const SiteWeights& weights);
ParameterTree weighted_average(const std::vector<ParameterTree>& trees,
                               const SiteWeights& weights);

// Total number of scalar elements across all entries.
std::size_t count_params(const ParameterTree& tree);

// Checkpoint container: magic "PFLS", u32 version=1, u32 entry count, then
// per entry: u32 path length + UTF-8 path, tag byte, u32 rank, u32 dims,
// row-major little-endian f32 payload.
std::vector<std::uint8_t> encode_tree(const ParameterTree& tree);
ParameterTree decode_tree(const std::uint8_t* data, std::size_t size);
ParameterTree decode_tree(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const ParameterTree& tree, const std::filesystem::path& path);
ParameterTree load_checkpoint(const std::filesystem::path& path);

// Tensor payload encoding shared with the dataset pair files: u32 rank,
// u32 dims, f32 little-endian payload.
void encode_tensor(const Tensor& t, std::vector<std::uint8_t>& out);
Tensor decode_tensor(const std::uint8_t* data, std::size_t size, std::size_t& offset);

}  // namespace pfls
