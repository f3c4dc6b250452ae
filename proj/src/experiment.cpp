// SPDX-License-Identifier: Apache-2.0
#include "pfls/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

namespace pfls {
namespace {

using json = nlohmann::json;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

RunMode mode_from_string(const std::string& s, std::optional<AblationKind>& ablation) {
  ablation.reset();
  if (s == "pflsynth") return RunMode::PflSynth;
  if (s == "fedgan") return RunMode::FedGan;
  if (s == "central") return RunMode::Central;
  if (s.rfind("ablation:", 0) == 0) {
    const std::string kind = s.substr(9);
    if (kind == "no_adain") ablation = AblationKind::NoAdaIn;
    else if (kind == "no_adacw") ablation = AblationKind::NoAdaCw;
    else if (kind == "no_pna") ablation = AblationKind::NoPna;
    else if (kind == "no_mapper") ablation = AblationKind::NoMapper;
    else if (kind == "no_site_index") ablation = AblationKind::NoSiteIndex;
    else if (kind == "no_task_index") ablation = AblationKind::NoTaskIndex;
    else throw ConfigError("unknown ablation '" + kind + "'");
    return RunMode::Ablation;
  }
  throw ConfigError("unknown mode '" + s + "'");
}

TaskConfig task_from_json(const json& j) {
  if (j.is_array() && j.size() == 2) {
    return {contrast_from_string(j[0].get<std::string>()),
            contrast_from_string(j[1].get<std::string>())};
  }
  if (j.is_object()) {
    return {contrast_from_string(j.at("source").get<std::string>()),
            contrast_from_string(j.at("target").get<std::string>())};
  }
  throw ConfigError("task entries must be [source, target] or {source, target}");
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

struct CellAccumulator {
  std::vector<double> psnrs;
  std::vector<double> ssims;
};

void mean_std(const std::vector<double>& xs, double& mean, double& stddev) {
  mean = 0.0;
  stddev = 0.0;
  if (xs.empty()) return;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  stddev = std::sqrt(var / static_cast<double>(xs.size()));
}

std::ofstream open_text(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  return out;
}

void write_ledger_csv(const std::filesystem::path& path, const std::vector<RoundStats>& ledger) {
  auto out = open_text(path);
  out << "round,lr,broadcast_params,upload_params,site,trained,items,g_adv,g_pix,g_total,d_loss,"
         "val_l1\n";
  for (const RoundStats& r : ledger) {
    for (std::size_t k = 0; k < r.sites.size(); ++k) {
      const SiteRoundStats& s = r.sites[k];
      out << r.round << ',' << format_double(r.lr) << ',' << r.broadcast_params << ','
          << r.upload_params << ',' << k << ',' << (s.trained ? 1 : 0) << ',' << s.items << ','
          << format_double(s.g_adv) << ',' << format_double(s.g_pix) << ','
          << format_double(s.g_total) << ',' << format_double(s.d_loss) << ','
          << format_double(s.val_l1) << '\n';
    }
  }
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricCell>& cells) {
  auto out = open_text(path);
  out << "site,task,n_test,psnr_mean,psnr_std,ssim_mean,ssim_std,fid\n";
  for (const MetricCell& c : cells) {
    out << c.site << ',' << c.task << ',' << c.n_test << ',' << format_double(c.psnr_mean) << ','
        << format_double(c.psnr_std) << ',' << format_double(c.ssim_mean) << ','
        << format_double(c.ssim_std) << ",n/a\n";
  }
}

// Evaluates one (site, config) cell on its test pairs.
MetricCell evaluate_cell(Generator& gen, const ModelSpec& model, int code_site, int site_label,
                         const SiteDataset& data, int config_index) {
  const ConditionCodes codes = make_codes(model, code_site, data.configs[config_index]);
  CellAccumulator acc;
  for (int idx : data.test_indices) {
    const ImagePair& pair = data.pairs[idx];
    if (pair.config_index != config_index) continue;
    const Tensor output = gen.forward(pair.source, codes);
    const Tensor target = pair.target.reshaped({1, pair.target.dim(0), pair.target.dim(1)});
    acc.psnrs.push_back(psnr(target, output));
    acc.ssims.push_back(ssim(target, output));
  }
  MetricCell cell;
  cell.site = site_label;
  cell.task = data.configs[config_index].to_string();
  cell.n_test = static_cast<int>(acc.psnrs.size());
  mean_std(acc.psnrs, cell.psnr_mean, cell.psnr_std);
  mean_std(acc.ssims, cell.ssim_mean, cell.ssim_std);
  return cell;
}

void write_sample_images(const std::filesystem::path& dir, Generator& gen,
                         const ModelSpec& model, int code_site, int site_label,
                         const SiteDataset& data, int config_index, int count) {
  const ConditionCodes codes = make_codes(model, code_site, data.configs[config_index]);
  int written = 0;
  for (int idx : data.test_indices) {
    if (written >= count) break;
    const ImagePair& pair = data.pairs[idx];
    if (pair.config_index != config_index) continue;
    const Tensor output = gen.forward(pair.source, codes);
    const std::string stem = "site" + std::to_string(site_label) + "_cfg" +
                             std::to_string(config_index) + "_" + std::to_string(written);
    write_pgm(pair.source, dir / (stem + "_src.pgm"));
    write_pgm(pair.target, dir / (stem + "_ref.pgm"));
    write_pgm(output, dir / (stem + "_out.pgm"));
    ++written;
  }
}

std::vector<Tensor> make_probe_images(const ExperimentConfig& config, int count) {
  const SiteProfile profile = default_site_profile(0);
  const Contrast contrast = config.dataset.tasks[0][0].source;
  std::vector<Tensor> probes;
  probes.reserve(count);
  for (int i = 0; i < count; ++i) {
    const TissueMap tmap =
        generate_tissue_map(derive_seed(config.seed, "probe-map", i), config.dataset.image_size,
                            config.dataset.image_size, false);
    Rng rng(derive_seed(config.seed, "probe-render", i));
    probes.push_back(render_contrast(tmap, contrast, profile, rng));
  }
  return probes;
}

}  // namespace

std::string to_string(RunMode mode, std::optional<AblationKind> ablation) {
  switch (mode) {
    case RunMode::PflSynth: return "pflsynth";
    case RunMode::FedGan: return "fedgan";
    case RunMode::Central: return "central";
    case RunMode::Ablation:
      if (!ablation) throw ConfigError("ablation mode without an ablation kind");
      switch (*ablation) {
        case AblationKind::NoAdaIn: return "ablation:no_adain";
        case AblationKind::NoAdaCw: return "ablation:no_adacw";
        case AblationKind::NoPna: return "ablation:no_pna";
        case AblationKind::NoMapper: return "ablation:no_mapper";
        case AblationKind::NoSiteIndex: return "ablation:no_site_index";
        case AblationKind::NoTaskIndex: return "ablation:no_task_index";
      }
  }
  throw ConfigError("unknown run mode");
}

std::vector<std::vector<TaskConfig>> variable_task_layout() {
  using C = Contrast;
  return {
      {{C::T1, C::T2}, {C::T2, C::PD}},
      {{C::T1, C::T2}, {C::FL, C::T2}},
      {{C::T1, C::T2}, {C::T2, C::T1}},
      {{C::T1, C::T2}, {C::T2, C::FL}},
  };
}

std::vector<std::vector<TaskConfig>> common_task_layout(int sites) {
  std::vector<std::vector<TaskConfig>> out;
  for (int i = 0; i < sites; ++i) {
    out.push_back({{Contrast::T1, Contrast::T2}});
  }
  return out;
}

ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed config '" + path.string() + "': " + e.what());
  }
  return from_json(j);
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  try {
    ExperimentConfig cfg;
    cfg.name = j.value("name", cfg.name);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("mode")) {
      cfg.mode = mode_from_string(j.at("mode").get<std::string>(), cfg.ablation);
    }
    cfg.share_pbs = j.value("share_pbs", false);

    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      cfg.dataset.sites = d.value("sites", cfg.dataset.sites);
      cfg.dataset.image_size = d.value("image_size", cfg.dataset.image_size);
      if (d.contains("maps_per_site")) {
        const json& m = d.at("maps_per_site");
        if (m.is_number_integer()) {
          cfg.dataset.maps_per_site.assign(cfg.dataset.sites, m.get<int>());
        } else {
          cfg.dataset.maps_per_site = m.get<std::vector<int>>();
        }
      }
      if (d.contains("split_fractions")) {
        const auto f = d.at("split_fractions").get<std::vector<double>>();
        if (f.size() != 3) throw ConfigError("split_fractions needs three entries");
        cfg.dataset.split_fractions = {f[0], f[1], f[2]};
      }
      if (d.contains("tasks")) {
        const json& t = d.at("tasks");
        if (t.is_string()) {
          const std::string s = t.get<std::string>();
          if (s == "variable") cfg.dataset.tasks = variable_task_layout();
          else if (s == "common") cfg.dataset.tasks = common_task_layout(cfg.dataset.sites);
          else throw ConfigError("unknown task layout '" + s + "'");
        } else {
          for (const json& site_tasks : t) {
            std::vector<TaskConfig> list;
            for (const json& task : site_tasks) list.push_back(task_from_json(task));
            cfg.dataset.tasks.push_back(std::move(list));
          }
        }
      }
    }
    if (cfg.dataset.tasks.empty()) {
      cfg.dataset.tasks = cfg.dataset.sites == 4 ? variable_task_layout()
                                                 : common_task_layout(cfg.dataset.sites);
    }
    if (static_cast<int>(cfg.dataset.maps_per_site.size()) != cfg.dataset.sites &&
        cfg.dataset.maps_per_site.size() == 1) {
      cfg.dataset.maps_per_site.assign(cfg.dataset.sites, cfg.dataset.maps_per_site[0]);
    }

    if (j.contains("model")) {
      const json& m = j.at("model");
      cfg.model.base_width = m.value("base_width", cfg.model.base_width);
      cfg.model.bottleneck_depth = m.value("bottleneck_depth", cfg.model.bottleneck_depth);
      cfg.model.latent_dim = m.value("latent_dim", cfg.model.latent_dim);
      cfg.model.site_slots = m.value("site_slots", cfg.model.site_slots);
      cfg.model.contrast_slots = m.value("contrast_slots", cfg.model.contrast_slots);
      cfg.model.mapper_layers = m.value("mapper_layers", cfg.model.mapper_layers);
      cfg.model.cw_hidden = m.value("cw_hidden", cfg.model.cw_hidden);
      cfg.model.split_stage = m.value("split_stage", cfg.model.split_stage);
    }
    if (j.contains("training")) {
      const json& t = j.at("training");
      cfg.training.rounds = t.value("rounds", cfg.training.rounds);
      cfg.training.epochs_per_round = t.value("epochs_per_round", cfg.training.epochs_per_round);
      cfg.training.learning_rate = t.value("learning_rate", cfg.training.learning_rate);
      cfg.training.lambda_pixel = t.value("lambda_pixel", cfg.training.lambda_pixel);
      cfg.training.parallel_sites = t.value("parallel_sites", cfg.training.parallel_sites);
    }
    if (j.contains("late_join") && !j.at("late_join").is_null()) {
      const json& l = j.at("late_join");
      LateJoinSpec spec;
      const std::string kind = l.at("kind").get<std::string>();
      if (kind == "site") spec.kind = LateJoinSpec::Kind::Site;
      else if (kind == "task") spec.kind = LateJoinSpec::Kind::Task;
      else throw ConfigError("unknown late join kind '" + kind + "'");
      spec.round = l.at("round").get<int>();
      spec.site = l.at("site").get<int>();
      spec.config = l.value("config", 0);
      cfg.late_join = spec;
    }
    if (j.contains("analysis")) {
      const json& a = j.at("analysis");
      cfg.analysis.similarity_probes = a.value("similarity_probes", 0);
      cfg.analysis.sample_images = a.value("sample_images", 1);
    }
    cfg.validate();
    return cfg;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

json ExperimentConfig::to_json() const {
  json tasks = json::array();
  for (const auto& site_tasks : dataset.tasks) {
    json list = json::array();
    for (const TaskConfig& t : site_tasks) {
      list.push_back({{"source", pfls::to_string(t.source)}, {"target", pfls::to_string(t.target)}});
    }
    tasks.push_back(list);
  }
  json j = {
      {"name", name},
      {"seed", seed},
      {"mode", pfls::to_string(mode, ablation)},
      {"share_pbs", share_pbs},
      {"dataset",
       {{"sites", dataset.sites},
        {"image_size", dataset.image_size},
        {"maps_per_site", dataset.maps_per_site},
        {"split_fractions", dataset.split_fractions},
        {"tasks", tasks}}},
      {"model",
       {{"base_width", model.base_width},
        {"bottleneck_depth", model.bottleneck_depth},
        {"latent_dim", model.latent_dim},
        {"site_slots", model.site_slots},
        {"contrast_slots", model.contrast_slots},
        {"mapper_layers", model.mapper_layers},
        {"cw_hidden", model.cw_hidden},
        {"split_stage", model.split_stage}}},
      {"training",
       {{"rounds", training.rounds},
        {"epochs_per_round", training.epochs_per_round},
        {"learning_rate", training.learning_rate},
        {"lambda_pixel", training.lambda_pixel},
        {"parallel_sites", training.parallel_sites}}},
      {"analysis",
       {{"similarity_probes", analysis.similarity_probes},
        {"sample_images", analysis.sample_images}}},
  };
  if (late_join) {
    j["late_join"] = {
        {"kind", late_join->kind == LateJoinSpec::Kind::Site ? "site" : "task"},
        {"round", late_join->round},
        {"site", late_join->site},
        {"config", late_join->config},
    };
  }
  return j;
}

std::string ExperimentConfig::fingerprint() const {
  const std::uint64_t h = fnv1a64(to_json().dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%08x", static_cast<unsigned>(h & 0xffffffffu));
  return buf;
}

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("experiment name must not be empty");
  if (dataset.sites < 1) throw ConfigError("dataset needs at least one site");
  if (static_cast<int>(dataset.maps_per_site.size()) != dataset.sites) {
    throw ConfigError("maps_per_site needs one entry per site");
  }
  if (static_cast<int>(dataset.tasks.size()) != dataset.sites) {
    throw ConfigError("tasks needs one task list per site");
  }
  for (const auto& list : dataset.tasks) {
    if (list.empty()) throw ConfigError("every site needs at least one task");
  }
  if (dataset.image_size < 16) throw ConfigError("image size must be at least 16");
  if (mode == RunMode::Ablation && !ablation) {
    throw ConfigError("ablation mode requires an ablation kind");
  }
  if (analysis.similarity_probes < 0 || analysis.sample_images < 0) {
    throw ConfigError("analysis counts must be non-negative");
  }
  resolved_model().validate();
}

ModelSpec ExperimentConfig::resolved_model() const {
  ModelSpec m = model;
  m.image_size = dataset.image_size;
  if (mode == RunMode::FedGan || mode == RunMode::Central) {
    m.use_mapper = false;
    m.use_adain = false;
    m.use_adacw = false;
    m.use_site_code = false;
    m.use_task_code = false;
  } else if (mode == RunMode::Ablation) {
    switch (*ablation) {
      case AblationKind::NoAdaIn: m.use_adain = false; break;
      case AblationKind::NoAdaCw: m.use_adacw = false; break;
      case AblationKind::NoMapper: m.use_mapper = false; break;
      case AblationKind::NoSiteIndex: m.use_site_code = false; break;
      case AblationKind::NoTaskIndex: m.use_task_code = false; break;
      case AblationKind::NoPna: break;
    }
  }
  return m;
}

ShareScope ExperimentConfig::resolved_scope() const {
  if (mode == RunMode::FedGan) return ShareScope::FullGenerator;
  if (mode == RunMode::Ablation && ablation == AblationKind::NoPna) {
    return ShareScope::FullGenerator;
  }
  if (share_pbs) return ShareScope::DownstreamMapperAndPb;
  return ShareScope::DownstreamAndMapper;
}

namespace {

std::vector<SiteDataset> build_datasets(const ExperimentConfig& config) {
  std::vector<SiteDataset> out;
  out.reserve(config.dataset.sites);
  for (int k = 0; k < config.dataset.sites; ++k) {
    out.push_back(make_site_dataset(default_site_profile(k), config.dataset.tasks[k],
                                    config.dataset.maps_per_site[k],
                                    config.dataset.split_fractions,
                                    derive_seed(config.seed, "site-data", k),
                                    config.dataset.image_size));
  }
  return out;
}

// Pooled (non-federated) reference: one plain generator over all sites' data,
// one discriminator per distinct task, trained for the same number of passes.
RunResult run_central(const ExperimentConfig& config, const std::filesystem::path& run_dir,
                      std::vector<SiteDataset> datasets) {
  const ModelSpec model = config.resolved_model();
  Generator gen(model, derive_seed(config.seed, "central-model"));
  AdamOptimizer gen_opt(gen.params());

  std::map<std::string, int> disc_of_task;
  std::vector<std::unique_ptr<PatchDiscriminator>> discs;
  std::vector<std::unique_ptr<AdamOptimizer>> disc_opts;
  struct Item {
    int site;
    int pair_index;
    int disc;
  };
  std::vector<Item> items;
  for (std::size_t k = 0; k < datasets.size(); ++k) {
    for (int idx : datasets[k].train_indices) {
      const ImagePair& pair = datasets[k].pairs[idx];
      const std::string key = datasets[k].configs[pair.config_index].to_string();
      auto it = disc_of_task.find(key);
      if (it == disc_of_task.end()) {
        const int d = static_cast<int>(discs.size());
        discs.push_back(std::make_unique<PatchDiscriminator>(
            "discriminator.cfg" + std::to_string(d), model.base_width,
            derive_seed(config.seed, "central-disc", d)));
        disc_opts.push_back(std::make_unique<AdamOptimizer>(discs.back()->params()));
        it = disc_of_task.emplace(key, d).first;
      }
      items.push_back({static_cast<int>(k), idx, it->second});
    }
  }
  if (items.empty()) throw ConfigError("central training has no items");

  Rng order_rng(derive_seed(config.seed, "central-train"));
  std::vector<RoundStats> ledger;
  for (int round = 0; round < config.training.rounds; ++round) {
    const double lr = learning_rate_at(config.training, round);
    RoundStats stats;
    stats.round = round;
    stats.lr = lr;
    stats.sites.resize(1);
    SiteRoundStats& s = stats.sites[0];
    s.trained = true;
    double sum_adv = 0.0, sum_pix = 0.0, sum_total = 0.0, sum_d = 0.0;
    for (int epoch = 0; epoch < config.training.epochs_per_round; ++epoch) {
      for (int i = static_cast<int>(items.size()) - 1; i > 0; --i) {
        const int j = order_rng.uniform_int(i + 1);
        std::swap(items[i], items[j]);
      }
      for (const Item& item : items) {
        const SiteDataset& data = datasets[item.site];
        const ImagePair& pair = data.pairs[item.pair_index];
        const ConditionCodes codes = make_codes(model, 0, data.configs[pair.config_index]);
        const StepLosses losses =
            gan_training_step(gen, gen_opt, *discs[item.disc], *disc_opts[item.disc],
                              pair.source, pair.target, codes, config.training.lambda_pixel, lr);
        if (!std::isfinite(losses.total) || !std::isfinite(losses.d_loss)) {
          throw TrainingDiverged("central training loss became non-finite", 0, round);
        }
        sum_adv += losses.adv;
        sum_pix += losses.pix;
        sum_total += losses.total;
        sum_d += losses.d_loss;
        ++s.items;
      }
    }
    s.g_adv = sum_adv / s.items;
    s.g_pix = sum_pix / s.items;
    s.g_total = sum_total / s.items;
    s.d_loss = sum_d / s.items;
    ledger.push_back(stats);
  }

  RunResult result;
  result.dir = run_dir;
  result.name = config.name;
  result.mode = to_string(config.mode, config.ablation);
  result.seed = config.seed;
  std::filesystem::create_directories(run_dir / "samples");
  for (std::size_t k = 0; k < datasets.size(); ++k) {
    for (std::size_t c = 0; c < datasets[k].configs.size(); ++c) {
      result.cells.push_back(evaluate_cell(gen, model, 0, static_cast<int>(k), datasets[k],
                                           static_cast<int>(c)));
      write_sample_images(run_dir / "samples", gen, model, 0, static_cast<int>(k), datasets[k],
                          static_cast<int>(c), config.analysis.sample_images);
    }
  }

  std::int64_t disc_params = 0;
  for (const auto& d : discs) disc_params += d->parameter_count();
  result.comp_params = gen.parameter_count() + disc_params;
  result.comm_params_per_round = 0;

  write_ledger_csv(run_dir / "ledger.csv", ledger);
  write_metrics_csv(run_dir / "metrics.csv", result.cells);
  std::filesystem::create_directories(run_dir / "checkpoints");
  ParameterTree tree = gen.params().export_tree();
  for (const auto& d : discs) {
    for (const Parameter& p : d->params()) tree.insert(p.path, p.value, p.tag);
  }
  save_checkpoint(tree, run_dir / "checkpoints" / "central.bin");
  return result;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_root) {
  config.validate();
  const std::filesystem::path run_dir =
      out_root / (config.name + "-" + config.fingerprint());
  std::filesystem::create_directories(run_dir);
  {
    auto out = open_text(run_dir / "config.json");
    out << config.to_json().dump(2) << '\n';
  }

  std::vector<SiteDataset> datasets = build_datasets(config);

  RunResult result;
  bool has_similarity = false;
  std::int64_t transport_params = 0;
  std::int64_t transport_bytes = 0;
  std::int64_t ledger_transfer_params = 0;

  if (config.mode == RunMode::Central) {
    result = run_central(config, run_dir, std::move(datasets));
  } else {
    const ModelSpec model = config.resolved_model();
    Federation fed(model, config.training, config.resolved_scope(), std::move(datasets),
                   derive_seed(config.seed, "federation"), config.late_join);
    const std::vector<RoundStats> ledger = fed.run();

    result.dir = run_dir;
    result.name = config.name;
    result.mode = to_string(config.mode, config.ablation);
    result.seed = config.seed;

    std::filesystem::create_directories(run_dir / "samples");
    for (int k = 0; k < fed.site_count(); ++k) {
      for (int c : fed.active_configs(k)) {
        result.cells.push_back(evaluate_cell(fed.site_generator(k), model, k, k,
                                             fed.site_dataset(k), c));
        write_sample_images(run_dir / "samples", fed.site_generator(k), model, k, k,
                            fed.site_dataset(k), c, config.analysis.sample_images);
      }
    }

    std::int64_t comp = 0;
    for (int k = 0; k < fed.site_count(); ++k) {
      comp = std::max(comp, fed.site_parameter_count(k));
    }
    result.comp_params = comp;
    result.comm_params_per_round = fed.shared_parameter_count();

    write_ledger_csv(run_dir / "ledger.csv", ledger);
    write_metrics_csv(run_dir / "metrics.csv", result.cells);

    std::filesystem::create_directories(run_dir / "checkpoints");
    save_checkpoint(fed.global_tree(), run_dir / "checkpoints" / "global.bin");
    for (int k = 0; k < fed.site_count(); ++k) {
      save_checkpoint(fed.site_checkpoint_tree(k),
                      run_dir / "checkpoints" / ("site" + std::to_string(k) + ".bin"));
    }

    if (config.analysis.similarity_probes > 0 && fed.site_count() >= 2) {
      const std::vector<Tensor> probes =
          make_probe_images(config, config.analysis.similarity_probes);
      std::vector<Generator*> gens;
      std::vector<ConditionCodes> codes;
      for (int k = 0; k < fed.site_count(); ++k) {
        gens.push_back(&fed.site_generator(k));
        codes.push_back(make_codes(model, k, config.dataset.tasks[0][0]));
      }
      const SimilarityProfile profile = activation_similarity(gens, codes, probes);
      json sim = {{"stages", profile.stages},
                  {"mean", profile.mean},
                  {"stddev", profile.stddev},
                  {"probes", config.analysis.similarity_probes}};
      auto out = open_text(run_dir / "similarity.json");
      out << sim.dump(2) << '\n';
      has_similarity = true;
    }

    transport_params = fed.transport().total_params();
    transport_bytes = fed.transport().total_bytes();
    for (const RoundStats& r : ledger) {
      ledger_transfer_params += r.broadcast_params + r.upload_params;
    }
    // The final broadcast after the last round is not in the ledger.
    std::int64_t active_sites = 0;
    for (int k = 0; k < fed.site_count(); ++k) active_sites += fed.site_active(k) ? 1 : 0;
    ledger_transfer_params += active_sites * fed.shared_parameter_count();
  }

  double sum_psnr = 0.0, sum_ssim = 0.0;
  for (const MetricCell& c : result.cells) {
    sum_psnr += c.psnr_mean;
    sum_ssim += c.ssim_mean;
  }
  if (!result.cells.empty()) {
    result.mean_psnr = sum_psnr / static_cast<double>(result.cells.size());
    result.mean_ssim = sum_ssim / static_cast<double>(result.cells.size());
  }

  json cells = json::array();
  for (const MetricCell& c : result.cells) {
    cells.push_back({{"site", c.site},
                     {"task", c.task},
                     {"n_test", c.n_test},
                     {"psnr_mean", c.psnr_mean},
                     {"psnr_std", c.psnr_std},
                     {"ssim_mean", c.ssim_mean},
                     {"ssim_std", c.ssim_std},
                     {"fid", "n/a"}});
  }
  json summary = {
      {"name", config.name},
      {"fingerprint", config.fingerprint()},
      {"mode", to_string(config.mode, config.ablation)},
      {"seed", config.seed},
      {"rounds", config.training.rounds},
      {"cells", cells},
      {"mean_psnr", result.mean_psnr},
      {"mean_ssim", result.mean_ssim},
      {"comp_params", result.comp_params},
      {"comm_params_per_round", result.comm_params_per_round},
      {"transport",
       {{"total_params", transport_params},
        {"total_bytes", transport_bytes},
        {"ledger_params", ledger_transfer_params}}},
      {"has_similarity", has_similarity},
      {"fid", "n/a"},
  };
  auto out = open_text(run_dir / "summary.json");
  out << summary.dump(2) << '\n';
  return result;
}

void run_matrix(const std::filesystem::path& configs_dir, const std::filesystem::path& out_root) {
  std::vector<std::filesystem::path> config_files;
  if (!std::filesystem::is_directory(configs_dir)) {
    throw ConfigError("'" + configs_dir.string() + "' is not a directory");
  }
  for (const auto& entry : std::filesystem::directory_iterator(configs_dir)) {
    if (entry.path().extension() == ".json") config_files.push_back(entry.path());
  }
  std::sort(config_files.begin(), config_files.end());
  if (config_files.empty()) {
    throw ConfigError("no .json configs found in '" + configs_dir.string() + "'");
  }

  std::vector<RunResult> results;
  results.reserve(config_files.size());
  for (const auto& file : config_files) {
    results.push_back(run_experiment(ExperimentConfig::from_file(file), out_root));
  }

  // Within each seed group, flag the best federated run per (site, task) cell
  // by mean PSNR (SSIM breaks ties). Central runs are listed but not flagged.
  struct Key {
    std::uint64_t seed;
    int site;
    std::string task;
    bool operator<(const Key& other) const {
      return std::tie(seed, site, task) < std::tie(other.seed, other.site, other.task);
    }
  };
  std::map<Key, std::pair<double, double>> best;  // (psnr, ssim)
  for (const RunResult& r : results) {
    if (r.mode == "central") continue;
    for (const MetricCell& c : r.cells) {
      const Key key{r.seed, c.site, c.task};
      auto it = best.find(key);
      const std::pair<double, double> score{c.psnr_mean, c.ssim_mean};
      if (it == best.end() || score > it->second) best[key] = score;
    }
  }

  json rows = json::array();
  auto csv = open_text(out_root / "matrix_summary.csv");
  csv << "name,mode,seed,site,task,psnr_mean,psnr_std,ssim_mean,ssim_std,best_federated\n";
  for (const RunResult& r : results) {
    for (const MetricCell& c : r.cells) {
      bool flagged = false;
      if (r.mode != "central") {
        const auto it = best.find(Key{r.seed, c.site, c.task});
        flagged = it != best.end() &&
                  it->second == std::make_pair(c.psnr_mean, c.ssim_mean);
      }
      csv << r.name << ',' << r.mode << ',' << r.seed << ',' << c.site << ',' << c.task << ','
          << format_double(c.psnr_mean) << ',' << format_double(c.psnr_std) << ','
          << format_double(c.ssim_mean) << ',' << format_double(c.ssim_std) << ','
          << (flagged ? 1 : 0) << '\n';
      rows.push_back({{"name", r.name},
                      {"mode", r.mode},
                      {"seed", r.seed},
                      {"site", c.site},
                      {"task", c.task},
                      {"psnr_mean", c.psnr_mean},
                      {"psnr_std", c.psnr_std},
                      {"ssim_mean", c.ssim_mean},
                      {"ssim_std", c.ssim_std},
                      {"best_federated", flagged}});
    }
  }
  json summary = {{"runs", rows}};
  auto out = open_text(out_root / "matrix_summary.json");
  out << summary.dump(2) << '\n';
}

}  // namespace pfls
