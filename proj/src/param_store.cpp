// SPDX-License-Identifier: Apache-2.0

#include "pfls/param_store.hpp"

#include <cstring>
#include <fstream>

namespace pfls {

const char* to_string(ParamTag tag) {
  switch (tag) {
    case ParamTag::Upstream: return "upstream";
    case ParamTag::Downstream: return "downstream";
    case ParamTag::Personalization: return "pb";
    case ParamTag::Mapper: return "mapper";
    case ParamTag::Discriminator: return "discriminator";
  }
  return "?";
}

std::optional<ParamTag> tag_from_byte(std::uint8_t b) {
  if (b > 4) return std::nullopt;
  return static_cast<ParamTag>(b);
}

std::optional<ParamTag> tag_from_string(const std::string& s) {
  for (std::uint8_t b = 0; b <= 4; ++b) {
    if (s == to_string(static_cast<ParamTag>(b))) return static_cast<ParamTag>(b);
  }
  return std::nullopt;
}

void ParameterTree::insert(std::string path, Tensor value, ParamTag tag) {
  if (entries_.count(path)) {
    throw ConfigError("parameter tree: duplicate path '" + path + "'");
  }
  if (!value.all_finite()) {
    throw ConfigError("parameter tree: non-finite values at '" + path + "'");
  }
  entries_.emplace(std::move(path), TreeEntry{std::move(value), tag});
}

const TreeEntry& ParameterTree::at(const std::string& path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) {
    throw ConfigError("parameter tree: unknown path '" + path + "'");
  }
  return it->second;
}

bool ParameterTree::operator==(const ParameterTree& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto a = entries_.begin();
  auto b = other.entries_.begin();
  for (; a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.tag != b->second.tag ||
        !a->second.value.equals(b->second.value)) {
      return false;
    }
  }
  return true;
}

SiteWeights SiteWeights::from_counts(std::vector<std::int64_t> counts) {
  if (counts.empty()) throw ConfigError("site weights: empty sample counts");
  std::int64_t total = 0;
  for (std::int64_t c : counts) {
    if (c < 0) throw ConfigError("site weights: negative sample count");
    total += c;
  }
  if (total == 0) throw ConfigError("site weights: all sample counts are zero");
  SiteWeights w;
  w.sample_counts = std::move(counts);
  w.weights.reserve(w.sample_counts.size());
  for (std::int64_t c : w.sample_counts) {
    w.weights.push_back(static_cast<double>(c) / static_cast<double>(total));
  }
  return w;
}

int stage_order(const std::string& stage, int bottleneck_depth) {
  if (stage.size() < 2) throw ConfigError("unknown stage identifier '" + stage + "'");
  const char kind = stage[0];
  int index = 0;
  for (std::size_t i = 1; i < stage.size(); ++i) {
    if (stage[i] < '0' || stage[i] > '9') {
      throw ConfigError("unknown stage identifier '" + stage + "'");
    }
    index = index * 10 + (stage[i] - '0');
  }
  switch (kind) {
    case 'e':
      if (index < 1 || index > 3) throw ConfigError("unknown stage identifier '" + stage + "'");
      return index;
    case 'r':
      if (index < 1 || index > 9 || index > bottleneck_depth) {
        throw ConfigError("unknown stage identifier '" + stage + "'");
      }
      return 3 + index;
    case 'd':
      if (index < 1 || index > 3) throw ConfigError("unknown stage identifier '" + stage + "'");
      return 3 + bottleneck_depth + index;
    default:
      throw ConfigError("unknown stage identifier '" + stage + "'");
  }
}

std::optional<std::string> stage_of_path(const std::string& path) {
  const std::string prefix = "synthesizer.";
  if (path.rfind(prefix, 0) != 0) return std::nullopt;
  const std::size_t start = prefix.size();
  const std::size_t dot = path.find('.', start);
  if (dot == std::string::npos) return std::nullopt;
  return path.substr(start, dot - start);
}

PartitionResult partition(const ParameterTree& tree, const std::string& split_stage) {
  // Infer bottleneck depth from the paths present so that the split stage can
  // be validated against the actual model.
  int depth = 0;
  for (const auto& [path, entry] : tree) {
    (void)entry;
    if (auto stage = stage_of_path(path); stage && !stage->empty() && (*stage)[0] == 'r') {
      depth = std::max(depth, stage_order(*stage, 9) - 3);
    }
  }
  if (depth == 0) depth = 9;
  const int split = stage_order(split_stage, depth);

  PartitionResult out;
  for (const auto& [path, entry] : tree) {
    const bool local = entry.tag == ParamTag::Upstream ||
                       entry.tag == ParamTag::Personalization ||
                       entry.tag == ParamTag::Discriminator;
    if (entry.tag == ParamTag::Upstream || entry.tag == ParamTag::Downstream) {
      // Cross-check stage-addressed convolutional paths against the split.
      if (auto stage = stage_of_path(path)) {
        const int order = stage_order(*stage, depth);
        const bool expect_upstream = order <= split;
        if (expect_upstream != (entry.tag == ParamTag::Upstream)) {
          throw ConfigError("partition: tag of '" + path +
                            "' is inconsistent with split stage '" + split_stage + "'");
        }
      }
    }
    if (local) {
      out.local_part.insert(path, entry.value, entry.tag);
    } else {
      out.shared_part.insert(path, entry.value, entry.tag);
    }
  }
  return out;
}

ParameterTree weighted_average(const std::vector<const ParameterTree*>& trees,
                               const SiteWeights& weights) {
  if (trees.empty()) throw AggregationError("weighted_average: no trees");
  if (trees.size() != weights.weights.size()) {
    throw AggregationError("weighted_average: weight count does not match tree count");
  }
  const ParameterTree& first = *trees[0];
  for (std::size_t k = 1; k < trees.size(); ++k) {
    if (trees[k]->entry_count() != first.entry_count()) {
      throw AggregationError("weighted_average: trees have different path sets");
    }
  }

  ParameterTree out;
  for (const auto& [path, entry] : first) {
    std::vector<const Tensor*> tensors(trees.size());
    for (std::size_t k = 0; k < trees.size(); ++k) {
      if (!trees[k]->contains(path)) {
        throw AggregationError("weighted_average: path '" + path + "' missing in tree " +
                               std::to_string(k));
      }
      const TreeEntry& e = trees[k]->at(path);
      if (!e.value.same_shape(entry.value)) {
        throw AggregationError("weighted_average: shape mismatch at '" + path + "'");
      }
      if (e.tag != entry.tag) {
        throw AggregationError("weighted_average: tag mismatch at '" + path + "'");
      }
      tensors[k] = &e.value;
    }
    Tensor avg(entry.value.shape());
    for (std::size_t i = 0; i < avg.size(); ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < tensors.size(); ++k) {
        acc += weights.weights[k] * static_cast<double>((*tensors[k])[i]);
      }
      avg[i] = static_cast<float>(acc);
    }
    if (!avg.all_finite()) {
      throw AggregationError("weighted_average: non-finite result at '" + path + "'");
    }
    out.insert(path, std::move(avg), entry.tag);
  }
  return out;
}

ParameterTree weighted_average(const std::vector<ParameterTree>& trees,
                               const SiteWeights& weights) {
  std::vector<const ParameterTree*> ptrs;
  ptrs.reserve(trees.size());
  for (const auto& t : trees) ptrs.push_back(&t);
  return weighted_average(ptrs, weights);
}

std::size_t count_params(const ParameterTree& tree) {
  std::size_t n = 0;
  for (const auto& [path, entry] : tree) {
    (void)path;
    n += entry.value.size();
  }
  return n;
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}

struct Reader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;

  void require(std::size_t n) const {
    if (pos + n > size) throw CheckpointError("checkpoint: truncated file");
  }
  std::uint8_t u8() {
    require(1);
    return data[pos++];
  }
  std::uint32_t u32() {
    require(4);
    std::uint32_t v = static_cast<std::uint32_t>(data[pos]) |
                      static_cast<std::uint32_t>(data[pos + 1]) << 8 |
                      static_cast<std::uint32_t>(data[pos + 2]) << 16 |
                      static_cast<std::uint32_t>(data[pos + 3]) << 24;
    pos += 4;
    return v;
  }
  std::string str(std::size_t n) {
    require(n);
    std::string s(reinterpret_cast<const char*>(data + pos), n);
    pos += n;
    return s;
  }
};

constexpr std::uint32_t kVersion = 1;

}  // namespace

void encode_tensor(const Tensor& t, std::vector<std::uint8_t>& out) {
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  const std::size_t bytes = t.size() * sizeof(float);
  const std::size_t base = out.size();
  out.resize(base + bytes);
  // little-endian host assumed (x86_64); payload is raw f32
  std::memcpy(out.data() + base, t.data(), bytes);
}

Tensor decode_tensor(const std::uint8_t* data, std::size_t size, std::size_t& offset) {
  Reader r{data, size, offset};
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw CheckpointError("checkpoint: implausible tensor rank");
  std::vector<int> shape(rank);
  std::size_t count = rank == 0 ? 0 : 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<int>(r.u32());
    count *= static_cast<std::size_t>(shape[i]);
  }
  r.require(count * sizeof(float));
  std::vector<float> values(count);
  std::memcpy(values.data(), data + r.pos, count * sizeof(float));
  r.pos += count * sizeof(float);
  offset = r.pos;
  return Tensor(std::move(shape), std::move(values));
}

std::vector<std::uint8_t> encode_tree(const ParameterTree& tree) {
  std::vector<std::uint8_t> out;
  out.push_back('P');
  out.push_back('F');
  out.push_back('L');
  out.push_back('S');
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(tree.entry_count()));
  for (const auto& [path, entry] : tree) {
    put_u32(out, static_cast<std::uint32_t>(path.size()));
    out.insert(out.end(), path.begin(), path.end());
    out.push_back(static_cast<std::uint8_t>(entry.tag));
    encode_tensor(entry.value, out);
  }
  return out;
}

ParameterTree decode_tree(const std::uint8_t* data, std::size_t size) {
  Reader r{data, size};
  r.require(4);
  if (std::memcmp(data, "PFLS", 4) != 0) {
    throw CheckpointError("checkpoint: bad magic bytes");
  }
  r.pos = 4;
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  ParameterTree tree;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t path_len = r.u32();
    std::string path = r.str(path_len);
    const std::uint8_t tag_byte = r.u8();
    const auto tag = tag_from_byte(tag_byte);
    if (!tag) {
      throw CheckpointError("checkpoint: unknown tag byte " + std::to_string(tag_byte) +
                            " at '" + path + "'");
    }
    std::size_t offset = r.pos;
    Tensor value = decode_tensor(data, size, offset);
    r.pos = offset;
    tree.insert(std::move(path), std::move(value), *tag);
  }
  return tree;
}

ParameterTree decode_tree(const std::vector<std::uint8_t>& bytes) {
  return decode_tree(bytes.data(), bytes.size());
}

void save_checkpoint(const ParameterTree& tree, const std::filesystem::path& path) {
  const auto bytes = encode_tree(tree);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("checkpoint: write failed for '" + path.string() + "'");
}

ParameterTree load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path.string() + "'");
  const std::streamsize size = in.tellg();
  in.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
  in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw CheckpointError("checkpoint: read failed for '" + path.string() + "'");
  return decode_tree(bytes);
}

}  // namespace pfls
