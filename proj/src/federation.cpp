// SPDX-License-Identifier: Apache-2.0
#include "pfls/federation.hpp"

#include <algorithm>
#include <cmath>
#include <future>

namespace pfls {

double learning_rate_at(const TrainingParams& params, int round) {
  if (round < 0 || round >= params.rounds) {
    throw ConfigError("round " + std::to_string(round) + " outside the configured schedule");
  }
  const int half = params.rounds / 2;
  if (round < half) return params.learning_rate;
  return params.learning_rate * static_cast<double>(params.rounds - round) /
         static_cast<double>(params.rounds - half);
}

bool tag_is_shared(ShareScope scope, ParamTag tag) {
  switch (scope) {
    case ShareScope::DownstreamAndMapper:
      return tag == ParamTag::Downstream || tag == ParamTag::Mapper;
    case ShareScope::DownstreamMapperAndPb:
      return tag == ParamTag::Downstream || tag == ParamTag::Mapper ||
             tag == ParamTag::Personalization;
    case ShareScope::FullGenerator:
      return tag != ParamTag::Discriminator;
  }
  throw ConfigError("unknown share scope");
}

ParameterTree Transport::transfer(const std::string& direction, int site,
                                  const ParameterTree& payload) {
  const std::vector<std::uint8_t> bytes = encode_tree(payload);
  ParameterTree delivered = decode_tree(bytes);
  total_params_ += static_cast<std::int64_t>(count_params(delivered));
  total_bytes_ += static_cast<std::int64_t>(bytes.size());
  if (inspector_) inspector_(direction, site, delivered);
  return delivered;
}

struct Federation::Site {
  int index = 0;
  SiteDataset dataset;
  std::unique_ptr<Generator> generator;
  std::unique_ptr<AdamOptimizer> gen_opt;
  std::vector<std::unique_ptr<PatchDiscriminator>> discs;
  std::vector<std::unique_ptr<AdamOptimizer>> disc_opts;
  Rng train_rng{0};
  std::vector<int> active_cfgs;
  bool active = true;
};

namespace {

constexpr double kLossCeiling = 1e8;

void check_finite_loss(double value, const char* which, int site, int round) {
  if (!std::isfinite(value) || std::abs(value) > kLossCeiling) {
    throw TrainingDiverged(std::string(which) + " loss became non-finite or exploded", site,
                           round);
  }
}

}  // namespace

StepLosses gan_training_step(Generator& gen, AdamOptimizer& gen_opt, PatchDiscriminator& disc,
                             AdamOptimizer& disc_opt, const Tensor& source, const Tensor& target,
                             const ConditionCodes& codes, double lambda_pixel, double lr) {
  StepLosses losses;
  const Tensor target3 =
      target.rank() == 2 ? target.reshaped({1, target.dim(0), target.dim(1)}) : target;

  // Generator update.
  const Tensor fake = gen.forward(source, codes);
  const Tensor score = disc.forward(source, fake);
  losses.adv = lsgan_loss(score, 1.0f);
  losses.pix = l1_loss(fake, target3);
  losses.total = losses.adv + lambda_pixel * losses.pix;

  Tensor dfake = disc.backward(lsgan_grad(score, 1.0f), false);
  const Tensor pix_grad = l1_grad(fake, target3);
  const float lambda = static_cast<float>(lambda_pixel);
  for (std::size_t i = 0; i < dfake.size(); ++i) dfake[i] += lambda * pix_grad[i];
  gen.params().zero_grads();
  gen.backward(dfake);
  gen_opt.step(lr);

  // Discriminator update against the pre-update synthesis.
  disc.params().zero_grads();
  const Tensor score_real = disc.forward(source, target3);
  const double d_real = lsgan_loss(score_real, 1.0f);
  disc.backward(lsgan_grad(score_real, 1.0f), true);
  const Tensor score_fake = disc.forward(source, fake);
  const double d_fake = lsgan_loss(score_fake, 0.0f);
  disc.backward(lsgan_grad(score_fake, 0.0f), true);
  losses.d_loss = d_real + d_fake;
  disc_opt.step(lr);
  return losses;
}

Federation::Federation(const ModelSpec& model, const TrainingParams& training, ShareScope scope,
                       std::vector<SiteDataset> site_data, std::uint64_t seed,
                       std::optional<LateJoinSpec> late_join)
    : model_(model), training_(training), scope_(scope), late_join_(late_join) {
  model_.validate();
  if (site_data.empty()) throw ConfigError("federation needs at least one site");
  if (static_cast<int>(site_data.size()) > model_.site_slots) {
    throw ConfigError("more sites than site slots in the model");
  }
  if (training_.rounds < 1) throw ConfigError("round count must be positive");
  if (training_.epochs_per_round < 1) throw ConfigError("epochs per round must be positive");
  if (training_.learning_rate <= 0.0) throw ConfigError("learning rate must be positive");
  if (training_.lambda_pixel < 0.0) throw ConfigError("pixel loss weight must be non-negative");
  if (late_join_) {
    if (late_join_->round < 0 || late_join_->round >= training_.rounds) {
      throw ConfigError("late join round outside the training schedule");
    }
    if (late_join_->site < 0 || late_join_->site >= static_cast<int>(site_data.size())) {
      throw ConfigError("late join site index out of range");
    }
  }

  global_ = std::make_unique<Generator>(model_, derive_seed(seed, "global-model"));

  for (std::size_t k = 0; k < site_data.size(); ++k) {
    auto site = std::make_unique<Site>();
    site->index = static_cast<int>(k);
    site->dataset = std::move(site_data[k]);
    if (site->dataset.configs.empty()) {
      throw ConfigError("site " + std::to_string(k) + " has no task configs");
    }
    site->generator = std::make_unique<Generator>(model_, derive_seed(seed, "site-model", k));
    site->gen_opt = std::make_unique<AdamOptimizer>(site->generator->params());
    const std::uint64_t disc_seed = derive_seed(seed, "site-disc", k);
    for (std::size_t c = 0; c < site->dataset.configs.size(); ++c) {
      site->discs.push_back(std::make_unique<PatchDiscriminator>(
          "discriminator.cfg" + std::to_string(c), model_.base_width,
          derive_seed(disc_seed, "cfg", c)));
      site->disc_opts.push_back(std::make_unique<AdamOptimizer>(site->discs.back()->params()));
      site->active_cfgs.push_back(static_cast<int>(c));
    }
    site->train_rng = Rng(derive_seed(seed, "train", k));
    sites_.push_back(std::move(site));
  }

  if (late_join_) {
    Site& site = *sites_[late_join_->site];
    if (late_join_->kind == LateJoinSpec::Kind::Site) {
      site.active = false;
    } else {
      const int cfg = late_join_->config;
      if (cfg < 0 || cfg >= static_cast<int>(site.dataset.configs.size())) {
        throw ConfigError("late join config index out of range");
      }
      site.active_cfgs.erase(std::remove(site.active_cfgs.begin(), site.active_cfgs.end(), cfg),
                             site.active_cfgs.end());
      if (site.active_cfgs.empty()) {
        throw ConfigError("late task join would leave the site without initial configs");
      }
    }
  }
  // Site digits that no active site uses at round zero start inert: a zeroed
  // mapper input column receives no gradient while unused, so it stays zero
  // through cohort training and a site that activates it later starts from the
  // cohort's latent operating point instead of a random offset.
  std::vector<int> reserved;
  for (const auto& site : sites_) {
    if (!site->active) reserved.push_back(site->index);
  }
  for (int slot = static_cast<int>(sites_.size()); slot < model_.site_slots; ++slot) {
    reserved.push_back(slot);
  }
  if (!reserved.empty()) {
    global_->reset_site_slots(reserved);
    for (auto& site : sites_) site->generator->reset_site_slots(reserved);
  }

  bool any_active = false;
  for (const auto& site : sites_) any_active |= site->active;
  if (!any_active) throw ConfigError("no site is active at the first round");
}

Federation::~Federation() = default;

void Federation::set_transport_inspector(Transport::Inspector inspector) {
  transport_.set_inspector(std::move(inspector));
}

int Federation::site_count() const { return static_cast<int>(sites_.size()); }

bool Federation::site_active(int site) const {
  if (site < 0 || site >= site_count()) throw ConfigError("site index out of range");
  return sites_[site]->active;
}

const std::vector<int>& Federation::active_configs(int site) const {
  if (site < 0 || site >= site_count()) throw ConfigError("site index out of range");
  return sites_[site]->active_cfgs;
}

Generator& Federation::site_generator(int site) {
  if (site < 0 || site >= site_count()) throw ConfigError("site index out of range");
  return *sites_[site]->generator;
}

Generator& Federation::global_generator() { return *global_; }

const SiteDataset& Federation::site_dataset(int site) const {
  if (site < 0 || site >= site_count()) throw ConfigError("site index out of range");
  return sites_[site]->dataset;
}

ParameterTree Federation::global_tree() const { return global_->params().export_tree(); }

ParameterTree Federation::shared_tree() const {
  ParameterTree out;
  for (const Parameter& p : global_->params()) {
    if (tag_is_shared(scope_, p.tag)) out.insert(p.path, p.value, p.tag);
  }
  return out;
}

ParameterTree Federation::site_checkpoint_tree(int site) const {
  if (site < 0 || site >= site_count()) throw ConfigError("site index out of range");
  const Site& s = *sites_[site];
  ParameterTree out = s.generator->params().export_tree();
  for (const auto& disc : s.discs) {
    for (const Parameter& p : disc->params()) out.insert(p.path, p.value, p.tag);
  }
  return out;
}

void Federation::load_site_checkpoint(int site, const ParameterTree& tree) {
  if (site < 0 || site >= site_count()) throw ConfigError("site index out of range");
  Site& s = *sites_[site];
  ParameterTree gen_part;
  std::vector<ParameterTree> disc_parts(s.discs.size());
  for (const auto& [path, entry] : tree) {
    bool matched = false;
    for (std::size_t c = 0; c < s.discs.size(); ++c) {
      const std::string prefix = "discriminator.cfg" + std::to_string(c) + ".";
      if (path.rfind(prefix, 0) == 0) {
        disc_parts[c].insert(path, entry.value, entry.tag);
        matched = true;
        break;
      }
    }
    if (!matched) gen_part.insert(path, entry.value, entry.tag);
  }
  s.generator->params().import_tree(gen_part);
  for (std::size_t c = 0; c < s.discs.size(); ++c) {
    s.discs[c]->params().import_tree(disc_parts[c]);
  }
}

std::int64_t Federation::shared_parameter_count() const {
  return static_cast<std::int64_t>(count_params(shared_tree()));
}

std::int64_t Federation::site_parameter_count(int site) const {
  if (site < 0 || site >= site_count()) throw ConfigError("site index out of range");
  const Site& s = *sites_[site];
  std::int64_t total = s.generator->parameter_count();
  for (const auto& disc : s.discs) total += disc->parameter_count();
  return total;
}

std::vector<int> Federation::active_train_indices(const Site& site) const {
  std::vector<int> out;
  for (int idx : site.dataset.train_indices) {
    const int cfg = site.dataset.pairs[idx].config_index;
    if (std::find(site.active_cfgs.begin(), site.active_cfgs.end(), cfg) !=
        site.active_cfgs.end()) {
      out.push_back(idx);
    }
  }
  return out;
}

Tensor Federation::infer(int site, int config_index, const Tensor& source) {
  if (site < 0 || site >= site_count()) throw ConfigError("site index out of range");
  Site& s = *sites_[site];
  if (config_index < 0 || config_index >= static_cast<int>(s.dataset.configs.size())) {
    throw ConfigError("config index out of range");
  }
  const ConditionCodes codes =
      make_codes(model_, s.index, s.dataset.configs[config_index]);
  return s.generator->forward(source, codes);
}

double Federation::validation_l1(int site) {
  if (site < 0 || site >= site_count()) throw ConfigError("site index out of range");
  Site& s = *sites_[site];
  double acc = 0.0;
  int n = 0;
  for (int idx : s.dataset.val_indices) {
    const ImagePair& pair = s.dataset.pairs[idx];
    if (std::find(s.active_cfgs.begin(), s.active_cfgs.end(), pair.config_index) ==
        s.active_cfgs.end()) {
      continue;
    }
    const Tensor fake = infer(site, pair.config_index, pair.source);
    acc += l1_loss(fake, pair.target.reshaped({1, pair.target.dim(0), pair.target.dim(1)}));
    ++n;
  }
  return n > 0 ? acc / n : 0.0;
}

void Federation::broadcast() {
  const ParameterTree shared = shared_tree();
  for (auto& site : sites_) {
    if (!site->active) continue;
    const ParameterTree payload = transport_.transfer("broadcast", site->index, shared);
    site->generator->params().import_tree(payload);
  }
}

void Federation::train_site(Site& site, double lr, SiteRoundStats& stats) {
  std::vector<int> items = active_train_indices(site);
  if (items.empty()) {
    stats.trained = false;
    return;
  }
  stats.trained = true;

  double sum_adv = 0.0, sum_pix = 0.0, sum_total = 0.0, sum_d = 0.0;
  int n = 0;
  for (int epoch = 0; epoch < training_.epochs_per_round; ++epoch) {
    // Fisher-Yates pass with the site's own stream keeps sites independent.
    for (int i = static_cast<int>(items.size()) - 1; i > 0; --i) {
      const int j = site.train_rng.uniform_int(i + 1);
      std::swap(items[i], items[j]);
    }
    for (int idx : items) {
      const ImagePair& pair = site.dataset.pairs[idx];
      const TaskConfig& cfg = site.dataset.configs[pair.config_index];
      const ConditionCodes codes = make_codes(model_, site.index, cfg);
      const StepLosses losses = gan_training_step(
          *site.generator, *site.gen_opt, *site.discs[pair.config_index],
          *site.disc_opts[pair.config_index], pair.source, pair.target, codes,
          training_.lambda_pixel, lr);
      check_finite_loss(losses.total, "generator", site.index, round_);
      check_finite_loss(losses.d_loss, "discriminator", site.index, round_);

      sum_adv += losses.adv;
      sum_pix += losses.pix;
      sum_total += losses.total;
      sum_d += losses.d_loss;
      ++n;
    }
  }
  stats.items = n;
  stats.g_adv = sum_adv / n;
  stats.g_pix = sum_pix / n;
  stats.g_total = sum_total / n;
  stats.d_loss = sum_d / n;
  stats.val_l1 = validation_l1(site.index);
}

void Federation::aggregate(RoundStats& stats) {
  std::vector<ParameterTree> parts;
  std::vector<std::int64_t> counts;
  for (const auto& site : sites_) {
    if (!site->active || !stats.sites[site->index].trained) continue;
    ParameterTree shared;
    for (const Parameter& p : site->generator->params()) {
      if (tag_is_shared(scope_, p.tag)) shared.insert(p.path, p.value, p.tag);
    }
    ParameterTree payload = transport_.transfer("upload", site->index, shared);
    stats.upload_params += static_cast<std::int64_t>(count_params(payload));
    parts.push_back(std::move(payload));
    counts.push_back(stats.sites[site->index].items);
  }
  if (parts.empty()) return;  // nothing trained this round
  const ParameterTree averaged = weighted_average(parts, SiteWeights::from_counts(counts));
  global_->params().import_tree(averaged);
}

RoundStats Federation::run_round() {
  if (round_ >= training_.rounds) {
    throw ConfigError("all configured rounds have already run");
  }

  // Snapshot for rollback if this round diverges. Optimizer moments are part
  // of the snapshot: a diverged round leaves non-finite moments behind, and
  // restoring the weights alone would poison every later step.
  const ParameterTree global_snapshot = global_tree();
  std::vector<ParameterTree> site_snapshots;
  std::vector<AdamOptimizer::State> gen_opt_snapshots;
  std::vector<std::vector<AdamOptimizer::State>> disc_opt_snapshots;
  site_snapshots.reserve(sites_.size());
  gen_opt_snapshots.reserve(sites_.size());
  disc_opt_snapshots.reserve(sites_.size());
  for (int k = 0; k < site_count(); ++k) {
    site_snapshots.push_back(site_checkpoint_tree(k));
    gen_opt_snapshots.push_back(sites_[k]->gen_opt->state());
    std::vector<AdamOptimizer::State> disc_states;
    disc_states.reserve(sites_[k]->disc_opts.size());
    for (const auto& opt : sites_[k]->disc_opts) disc_states.push_back(opt->state());
    disc_opt_snapshots.push_back(std::move(disc_states));
  }

  try {
    if (late_join_ && round_ == late_join_->round) {
      Site& site = *sites_[late_join_->site];
      if (late_join_->kind == LateJoinSpec::Kind::Site) {
        site.active = true;
      } else {
        site.active_cfgs.push_back(late_join_->config);
        std::sort(site.active_cfgs.begin(), site.active_cfgs.end());
      }
    }

    RoundStats stats;
    stats.round = round_;
    stats.lr = learning_rate_at(training_, round_);
    stats.sites.resize(sites_.size());

    const ParameterTree shared = shared_tree();
    for (auto& site : sites_) {
      if (!site->active) continue;
      const ParameterTree payload = transport_.transfer("broadcast", site->index, shared);
      site->generator->params().import_tree(payload);
      stats.broadcast_params += static_cast<std::int64_t>(count_params(payload));
    }

    if (training_.parallel_sites) {
      std::vector<std::future<void>> futures;
      for (auto& site : sites_) {
        if (!site->active) continue;
        Site* raw = site.get();
        SiteRoundStats* site_stats = &stats.sites[raw->index];
        futures.push_back(std::async(std::launch::async, [this, raw, site_stats, &stats] {
          train_site(*raw, stats.lr, *site_stats);
        }));
      }
      for (auto& f : futures) f.get();
    } else {
      for (auto& site : sites_) {
        if (!site->active) continue;
        train_site(*site, stats.lr, stats.sites[site->index]);
      }
    }

    aggregate(stats);
    ++round_;
    return stats;
  } catch (const TrainingDiverged&) {
    global_->params().import_tree(global_snapshot);
    for (int k = 0; k < site_count(); ++k) {
      load_site_checkpoint(k, site_snapshots[k]);
      sites_[k]->gen_opt->restore(gen_opt_snapshots[k]);
      for (std::size_t c = 0; c < sites_[k]->disc_opts.size(); ++c) {
        sites_[k]->disc_opts[c]->restore(disc_opt_snapshots[k][c]);
      }
    }
    throw;
  }
}

std::vector<RoundStats> Federation::run() {
  std::vector<RoundStats> ledger;
  ledger.reserve(training_.rounds);
  while (round_ < training_.rounds) {
    ledger.push_back(run_round());
  }
  broadcast();  // leave every site holding the final aggregate
  return ledger;
}

}  // namespace pfls
