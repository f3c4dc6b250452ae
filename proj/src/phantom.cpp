// SPDX-License-Identifier: Apache-2.0
#include "pfls/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "pfls/param_store.hpp"

namespace pfls {
namespace {

using json = nlohmann::json;

struct Ellipse {
  double cy = 0.0;
  double cx = 0.0;
  double ay = 1.0;  // semi-axis along rotated y
  double ax = 1.0;  // semi-axis along rotated x
  double theta = 0.0;
};

void paint(std::vector<std::uint8_t>& labels, int height, int width, const Ellipse& e,
           TissueLabel label) {
  const double c = std::cos(e.theta);
  const double s = std::sin(e.theta);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double dy = (y + 0.5) - e.cy;
      const double dx = (x + 0.5) - e.cx;
      const double ry = (c * dy + s * dx) / e.ay;
      const double rx = (-s * dy + c * dx) / e.ax;
      if (ry * ry + rx * rx <= 1.0) {
        labels[static_cast<std::size_t>(y) * width + x] = static_cast<std::uint8_t>(label);
      }
    }
  }
}

struct Geometry {
  Ellipse head;
  Ellipse white;
  std::vector<Ellipse> csf;
  std::vector<Ellipse> lesions;
};

Geometry draw_geometry(Rng& rng, int height, int width, bool pathology_enabled) {
  Geometry g;
  const double h = static_cast<double>(height);
  const double w = static_cast<double>(width);

  g.head.cy = h * rng.uniform(0.46, 0.54);
  g.head.cx = w * rng.uniform(0.46, 0.54);
  g.head.ay = h * rng.uniform(0.34, 0.44);
  g.head.ax = w * rng.uniform(0.30, 0.42);
  g.head.theta = rng.uniform(-0.35, 0.35);

  g.white.cy = g.head.cy + h * rng.uniform(-0.02, 0.02);
  g.white.cx = g.head.cx + w * rng.uniform(-0.02, 0.02);
  g.white.ay = g.head.ay * rng.uniform(0.68, 0.82);
  g.white.ax = g.head.ax * rng.uniform(0.68, 0.82);
  g.white.theta = g.head.theta + rng.uniform(-0.15, 0.15);

  const int n_csf = 1 + rng.uniform_int(2);
  for (int i = 0; i < n_csf; ++i) {
    Ellipse e;
    e.cy = g.head.cy + h * rng.uniform(-0.08, 0.08);
    e.cx = g.head.cx + w * rng.uniform(-0.10, 0.10);
    e.ay = h * rng.uniform(0.045, 0.09);
    e.ax = w * rng.uniform(0.03, 0.06);
    e.theta = rng.uniform(-0.5, 0.5);
    g.csf.push_back(e);
  }

  if (pathology_enabled) {
    const int n_lesion = 1 + rng.uniform_int(3);
    for (int i = 0; i < n_lesion; ++i) {
      Ellipse e;
      e.cy = g.white.cy + h * rng.uniform(-0.18, 0.18);
      e.cx = g.white.cx + w * rng.uniform(-0.18, 0.18);
      e.ay = h * rng.uniform(0.025, 0.06);
      e.ax = w * rng.uniform(0.025, 0.06);
      e.theta = rng.uniform(-0.5, 0.5);
      g.lesions.push_back(e);
    }
  }
  return g;
}

Geometry fallback_geometry(int height, int width, bool pathology_enabled) {
  // Canonical anatomy that satisfies the composition bounds by construction.
  Geometry g;
  const double h = static_cast<double>(height);
  const double w = static_cast<double>(width);
  g.head = {0.50 * h, 0.50 * w, 0.40 * h, 0.36 * w, 0.0};
  g.white = {0.50 * h, 0.50 * w, 0.30 * h, 0.27 * w, 0.0};
  g.csf = {{0.47 * h, 0.44 * w, 0.06 * h, 0.04 * w, 0.3},
           {0.47 * h, 0.56 * w, 0.06 * h, 0.04 * w, -0.3}};
  if (pathology_enabled) {
    g.lesions = {{0.60 * h, 0.58 * w, 0.04 * h, 0.035 * w, 0.2}};
  }
  return g;
}

std::vector<std::uint8_t> rasterize(const Geometry& g, int height, int width) {
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(height) * width,
                                   static_cast<std::uint8_t>(TissueLabel::Background));
  paint(labels, height, width, g.head, TissueLabel::Gray);
  paint(labels, height, width, g.white, TissueLabel::White);
  for (const Ellipse& e : g.csf) paint(labels, height, width, e, TissueLabel::Csf);
  for (const Ellipse& e : g.lesions) paint(labels, height, width, e, TissueLabel::Lesion);
  return labels;
}

bool composition_ok(const TissueMap& tmap, bool pathology_enabled) {
  const auto p = tmap.proportions();
  const double gray_white =
      p[static_cast<int>(TissueLabel::Gray)] + p[static_cast<int>(TissueLabel::White)];
  const double lesion = p[static_cast<int>(TissueLabel::Lesion)];
  if (gray_white < 0.25) return false;
  if (lesion > 0.10) return false;
  if (p[static_cast<int>(TissueLabel::Csf)] <= 0.0) return false;
  if (p[static_cast<int>(TissueLabel::Gray)] <= 0.0) return false;
  if (p[static_cast<int>(TissueLabel::White)] <= 0.0) return false;
  if (pathology_enabled && lesion <= 0.0) return false;
  return true;
}

// Baseline per-label intensities for each contrast, before site perturbation.
// T1 and T2 invert the gray/white ordering; FL suppresses fluid and
// highlights lesions.
constexpr std::array<std::array<double, kTissueLabelCount>, kContrastCount> kBaseCurves = {{
    // background, csf, gray, white, lesion
    {{0.02, 0.20, 0.55, 0.80, 0.35}},  // t1
    {{0.02, 0.90, 0.60, 0.40, 0.80}},  // t2
    {{0.02, 0.70, 0.65, 0.55, 0.75}},  // pd
    {{0.02, 0.15, 0.60, 0.45, 0.90}},  // fl
}};

json curves_to_json(
    const std::array<std::array<double, kTissueLabelCount>, kContrastCount>& curves) {
  json out = json::array();
  for (const auto& row : curves) out.push_back(row);
  return out;
}

void curves_from_json(const json& j,
                      std::array<std::array<double, kTissueLabelCount>, kContrastCount>& curves) {
  if (!j.is_array() || j.size() != kContrastCount) {
    throw DataError("dataset metadata: malformed contrast curves");
  }
  for (int c = 0; c < kContrastCount; ++c) {
    const auto& row = j[c];
    if (!row.is_array() || row.size() != kTissueLabelCount) {
      throw DataError("dataset metadata: malformed contrast curve row");
    }
    for (int l = 0; l < kTissueLabelCount; ++l) curves[c][l] = row[l].get<double>();
  }
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace

const char* to_string(Contrast c) {
  switch (c) {
    case Contrast::T1: return "t1";
    case Contrast::T2: return "t2";
    case Contrast::PD: return "pd";
    case Contrast::FL: return "fl";
  }
  throw ConfigError("unknown contrast value");
}

Contrast contrast_from_string(const std::string& s) {
  if (s == "t1") return Contrast::T1;
  if (s == "t2") return Contrast::T2;
  if (s == "pd") return Contrast::PD;
  if (s == "fl") return Contrast::FL;
  throw ConfigError("unknown contrast '" + s + "'");
}

std::array<double, kTissueLabelCount> TissueMap::proportions() const {
  std::array<double, kTissueLabelCount> counts{};
  for (std::uint8_t l : labels) counts[l] += 1.0;
  const double total = static_cast<double>(labels.size());
  for (double& c : counts) c /= total;
  return counts;
}

SiteProfile default_site_profile(int site_id) {
  if (site_id < 0) throw ConfigError("site id must be non-negative");
  SiteProfile profile;
  profile.site_id = site_id;
  profile.name = "site" + std::to_string(site_id);

  // Per-site perturbation of the baseline curves makes the sites implicitly
  // heterogeneous even before noise/bias differences.
  Rng rng(derive_seed(0xD5A7A5EEDull, "site-profile", static_cast<std::uint64_t>(site_id)));
  profile.contrast_curves = kBaseCurves;
  for (int c = 0; c < kContrastCount; ++c) {
    for (int l = 1; l < kTissueLabelCount; ++l) {  // keep background fixed
      const double delta = rng.uniform(-0.05, 0.05);
      profile.contrast_curves[c][l] = std::clamp(kBaseCurves[c][l] + delta, 0.02, 0.98);
    }
  }

  constexpr std::array<double, 4> kSigma = {0.030, 0.045, 0.035, 0.050};
  constexpr std::array<double, 4> kBias = {0.10, 0.15, 0.20, 0.12};
  profile.noise_sigma = kSigma[site_id % 4];
  profile.bias_field_strength = kBias[site_id % 4];
  // Two pathology cohorts out of the default four, matching the sites whose
  // task lists involve the fluid-suppressed contrast.
  profile.pathology_enabled = (site_id % 4 == 1) || (site_id % 4 == 3);
  return profile;
}

std::string TaskConfig::to_string() const {
  return std::string(pfls::to_string(source)) + "->" + pfls::to_string(target);
}

TissueMap generate_tissue_map(std::uint64_t seed, int height, int width, bool pathology_enabled) {
  if (height < 16 || width < 16) throw ConfigError("tissue map size must be at least 16x16");
  TissueMap tmap;
  tmap.height = height;
  tmap.width = width;
  tmap.seed = seed;

  constexpr int kMaxAttempts = 16;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Rng rng(derive_seed(seed, "geometry", static_cast<std::uint64_t>(attempt)));
    const Geometry g = draw_geometry(rng, height, width, pathology_enabled);
    tmap.labels = rasterize(g, height, width);
    if (composition_ok(tmap, pathology_enabled)) return tmap;
  }
  tmap.labels = rasterize(fallback_geometry(height, width, pathology_enabled), height, width);
  return tmap;
}

Tensor render_contrast(const TissueMap& tmap, Contrast contrast, const SiteProfile& profile,
                       Rng& rng) {
  if (tmap.labels.empty()) throw DataError("cannot render an empty tissue map");
  const auto& curve = profile.contrast_curves[static_cast<int>(contrast)];
  const int height = tmap.height;
  const int width = tmap.width;
  Tensor out({height, width});

  const double strength = profile.bias_field_strength;
  const double phase_y = rng.uniform();
  const double phase_x = rng.uniform();
  constexpr double kTau = 2.0 * std::numbers::pi;

  for (int y = 0; y < height; ++y) {
    const double sy = std::sin(kTau * (static_cast<double>(y) / height + phase_y));
    for (int x = 0; x < width; ++x) {
      const double sx = std::sin(kTau * (static_cast<double>(x) / width + phase_x));
      const double bias = 1.0 + strength * sy * sx;
      double value = curve[tmap.labels[static_cast<std::size_t>(y) * width + x]] * bias;
      if (profile.noise_sigma > 0.0) value += profile.noise_sigma * rng.normal();
      value = std::clamp(value, 0.0, 1.0);
      out.at2(y, x) = static_cast<float>(2.0 * value - 1.0);
    }
  }
  return out;
}

SiteDataset make_site_dataset(const SiteProfile& profile, std::vector<TaskConfig> configs,
                              int n_maps, std::array<double, 3> split_fractions,
                              std::uint64_t seed, int image_size) {
  if (configs.empty()) throw ConfigError("a site dataset needs at least one task config");
  for (std::size_t i = 0; i < configs.size(); ++i) {
    if (configs[i].source == configs[i].target) {
      throw ConfigError("task config " + configs[i].to_string() +
                        " maps a contrast onto itself");
    }
    for (std::size_t j = i + 1; j < configs.size(); ++j) {
      if (configs[i] == configs[j]) {
        throw ConfigError("duplicate task config " + configs[i].to_string());
      }
    }
  }
  if (n_maps < 1) throw ConfigError("a site dataset needs at least one tissue map");
  for (double f : split_fractions) {
    if (f < 0.0 || f > 1.0) throw ConfigError("split fractions must lie in [0, 1]");
  }
  const double fraction_sum = split_fractions[0] + split_fractions[1] + split_fractions[2];
  if (std::abs(fraction_sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

  const int n_val = static_cast<int>(std::floor(split_fractions[1] * n_maps));
  const int n_test = static_cast<int>(std::floor(split_fractions[2] * n_maps));
  const int n_train = n_maps - n_val - n_test;
  if (n_train < 1) throw ConfigError("split leaves no training maps");

  SiteDataset dataset;
  dataset.profile = profile;
  dataset.configs = std::move(configs);
  dataset.seed = seed;
  dataset.image_size = image_size;
  dataset.map_count = n_maps;

  const int n_configs = static_cast<int>(dataset.configs.size());
  dataset.pairs.reserve(static_cast<std::size_t>(n_maps) * n_configs);
  for (int m = 0; m < n_maps; ++m) {
    const std::uint64_t map_seed = derive_seed(seed, "map", static_cast<std::uint64_t>(m));
    const TissueMap tmap =
        generate_tissue_map(map_seed, image_size, image_size, profile.pathology_enabled);
    for (int c = 0; c < n_configs; ++c) {
      Rng src_rng(derive_seed(map_seed, "render-src", static_cast<std::uint64_t>(c)));
      Rng tgt_rng(derive_seed(map_seed, "render-tgt", static_cast<std::uint64_t>(c)));
      ImagePair pair;
      pair.source = render_contrast(tmap, dataset.configs[c].source, profile, src_rng);
      pair.target = render_contrast(tmap, dataset.configs[c].target, profile, tgt_rng);
      pair.config_index = c;
      pair.map_seed = map_seed;
      const int index = m * n_configs + c;
      if (m < n_train) {
        dataset.train_indices.push_back(index);
      } else if (m < n_train + n_val) {
        dataset.val_indices.push_back(index);
      } else {
        dataset.test_indices.push_back(index);
      }
      dataset.pairs.push_back(std::move(pair));
    }
  }
  return dataset;
}

const ImagePair& sample_batch(const SiteDataset& dataset, Rng& rng) {
  return sample_batch(dataset, dataset.train_indices, rng);
}

const ImagePair& sample_batch(const SiteDataset& dataset, const std::vector<int>& item_indices,
                              Rng& rng) {
  if (item_indices.empty()) throw DataError("cannot sample from an empty item set");
  const int pick = rng.uniform_int(static_cast<int>(item_indices.size()));
  const int index = item_indices[pick];
  if (index < 0 || index >= static_cast<int>(dataset.pairs.size())) {
    throw DataError("sample index out of range");
  }
  return dataset.pairs[index];
}

void save_dataset(const SiteDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "pairs");

  json meta;
  meta["version"] = 1;
  meta["site"] = {
      {"site_id", dataset.profile.site_id},
      {"name", dataset.profile.name},
      {"contrast_curves", curves_to_json(dataset.profile.contrast_curves)},
      {"noise_sigma", dataset.profile.noise_sigma},
      {"bias_field_strength", dataset.profile.bias_field_strength},
      {"pathology_enabled", dataset.profile.pathology_enabled},
  };
  json configs = json::array();
  for (const TaskConfig& c : dataset.configs) {
    configs.push_back({{"source", to_string(c.source)}, {"target", to_string(c.target)}});
  }
  meta["configs"] = configs;
  meta["seed"] = dataset.seed;
  meta["image_size"] = dataset.image_size;
  meta["map_count"] = dataset.map_count;
  meta["splits"] = {{"train", dataset.train_indices},
                    {"val", dataset.val_indices},
                    {"test", dataset.test_indices}};

  json pairs = json::array();
  for (std::size_t i = 0; i < dataset.pairs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "pair_%05zu.bin", i);
    const ImagePair& pair = dataset.pairs[i];
    pairs.push_back({{"file", std::string("pairs/") + name},
                     {"config_index", pair.config_index},
                     {"map_seed", pair.map_seed}});

    std::vector<std::uint8_t> bytes;
    encode_tensor(pair.source, bytes);
    encode_tensor(pair.target, bytes);
    std::ofstream out(dir / "pairs" / name, std::ios::binary);
    if (!out) throw DataError("cannot write '" + (dir / "pairs" / name).string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to '" + (dir / "pairs" / name).string() + "'");
  }
  meta["pairs"] = pairs;

  std::ofstream out(dir / "metadata.json");
  if (!out) throw DataError("cannot write '" + (dir / "metadata.json").string() + "'");
  out << meta.dump(2) << '\n';
}

SiteDataset load_dataset(const std::filesystem::path& dir) {
  const auto meta_path = dir / "metadata.json";
  std::ifstream in(meta_path);
  if (!in) throw DataError("cannot open '" + meta_path.string() + "'");
  json meta;
  try {
    in >> meta;
  } catch (const json::exception& e) {
    throw DataError("malformed dataset metadata: " + std::string(e.what()));
  }

  try {
    SiteDataset dataset;
    const json& site = meta.at("site");
    dataset.profile.site_id = site.at("site_id").get<int>();
    dataset.profile.name = site.at("name").get<std::string>();
    curves_from_json(site.at("contrast_curves"), dataset.profile.contrast_curves);
    dataset.profile.noise_sigma = site.at("noise_sigma").get<double>();
    dataset.profile.bias_field_strength = site.at("bias_field_strength").get<double>();
    dataset.profile.pathology_enabled = site.at("pathology_enabled").get<bool>();

    for (const json& c : meta.at("configs")) {
      dataset.configs.push_back({contrast_from_string(c.at("source").get<std::string>()),
                                 contrast_from_string(c.at("target").get<std::string>())});
    }
    dataset.seed = meta.at("seed").get<std::uint64_t>();
    dataset.image_size = meta.at("image_size").get<int>();
    dataset.map_count = meta.at("map_count").get<int>();
    dataset.train_indices = meta.at("splits").at("train").get<std::vector<int>>();
    dataset.val_indices = meta.at("splits").at("val").get<std::vector<int>>();
    dataset.test_indices = meta.at("splits").at("test").get<std::vector<int>>();

    for (const json& p : meta.at("pairs")) {
      const auto bytes = read_file_bytes(dir / p.at("file").get<std::string>());
      std::size_t offset = 0;
      ImagePair pair;
      pair.source = decode_tensor(bytes.data(), bytes.size(), offset);
      pair.target = decode_tensor(bytes.data(), bytes.size(), offset);
      pair.config_index = p.at("config_index").get<int>();
      pair.map_seed = p.at("map_seed").get<std::uint64_t>();
      if (pair.source.rank() != 2 || pair.target.rank() != 2 ||
          pair.source.dim(0) != dataset.image_size || pair.source.dim(1) != dataset.image_size ||
          !pair.source.same_shape(pair.target)) {
        throw DataError("pair file '" + p.at("file").get<std::string>() +
                        "' does not match the dataset image size");
      }
      dataset.pairs.push_back(std::move(pair));
    }
    return dataset;
  } catch (const json::exception& e) {
    throw DataError("malformed dataset metadata: " + std::string(e.what()));
  }
}

}  // namespace pfls
