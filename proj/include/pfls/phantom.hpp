// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pfls/errors.hpp"
#include "pfls/rng.hpp"
#include "pfls/tensor.hpp"

namespace pfls {

// Contrast vocabulary: analogs of the four MR weightings.
enum class Contrast : int { T1 = 0, T2 = 1, PD = 2, FL = 3 };
constexpr int kContrastCount = 4;

const char* to_string(Contrast c);
Contrast contrast_from_string(const std::string& s);

enum class TissueLabel : std::uint8_t {
  Background = 0,
  Csf = 1,
  Gray = 2,
  White = 3,
  Lesion = 4,
};
constexpr int kTissueLabelCount = 5;

// Synthetic anatomy: an overlapping-ellipse label grid, deterministic per seed.
struct TissueMap {
  int height = 0;
  int width = 0;
  std::uint64_t seed = 0;
  std::vector<std::uint8_t> labels;  // row-major H x W

  TissueLabel label(int y, int x) const {
    return static_cast<TissueLabel>(labels[static_cast<std::size_t>(y) * width + x]);
  }
  // Fraction of pixels per label.
  std::array<double, kTissueLabelCount> proportions() const;
};

// Scanner/protocol-like site characteristics. Two distinct sites must differ
// in at least one of {contrast_curves, noise_sigma, bias_field_strength}.
struct SiteProfile {
  int site_id = 0;
  std::string name;
  // [contrast][tissue label] -> mean intensity in [0, 1]
  std::array<std::array<double, kTissueLabelCount>, kContrastCount> contrast_curves{};
  double noise_sigma = 0.0;
  double bias_field_strength = 0.0;
  bool pathology_enabled = false;
};

// Built-in profiles for the default four-site setup: two healthy-cohort
// analogs and two pathology-cohort analogs, with per-site curve perturbations
// so the sites are implicitly heterogeneous.
SiteProfile default_site_profile(int site_id);

// One source->target translation task.
struct TaskConfig {
  Contrast source;
  Contrast target;

  bool operator==(const TaskConfig& other) const {
    return source == other.source && target == other.target;
  }
  std::string to_string() const;
};

struct ImagePair {
  Tensor source;  // H x W in [-1, 1]
  Tensor target;  // H x W in [-1, 1]
  int config_index = 0;
  std::uint64_t map_seed = 0;  // subject identity
};

struct SiteDataset {
  SiteProfile profile;
  std::vector<TaskConfig> configs;
  std::vector<ImagePair> pairs;
  std::vector<int> train_indices;
  std::vector<int> val_indices;
  std::vector<int> test_indices;
  std::uint64_t seed = 0;
  int image_size = 0;
  int map_count = 0;
};

TissueMap generate_tissue_map(std::uint64_t seed, int height, int width, bool pathology_enabled);

// Renders one contrast of a tissue map under a site profile:
// smooth multiplicative bias field x per-label intensity + Gaussian noise,
// clipped to [0, 1] and affinely mapped to [-1, 1].
Tensor render_contrast(const TissueMap& tmap, Contrast contrast, const SiteProfile& profile,
                       Rng& rng);

SiteDataset make_site_dataset(const SiteProfile& profile, std::vector<TaskConfig> configs,
                              int n_maps, std::array<double, 3> split_fractions,
                              std::uint64_t seed, int image_size = 64);

// Uniform draw over training items (a pair carries its config index).
const ImagePair& sample_batch(const SiteDataset& dataset, Rng& rng);
// Restricted variant used when only a subset of configs is active.
const ImagePair& sample_batch(const SiteDataset& dataset, const std::vector<int>& item_indices,
                              Rng& rng);

// Directory persistence: metadata.json plus one binary file per pair in the
// checkpoint tensor encoding.
void save_dataset(const SiteDataset& dataset, const std::filesystem::path& dir);
SiteDataset load_dataset(const std::filesystem::path& dir);

}  // namespace pfls
