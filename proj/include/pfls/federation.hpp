// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pfls/discriminator.hpp"
#include "pfls/generator.hpp"
#include "pfls/param_store.hpp"
#include "pfls/phantom.hpp"

namespace pfls {

// Optimization schedule shared by all sites: Adam at a constant rate for the
// first half of the rounds, then linear decay toward zero.
struct TrainingParams {
  int rounds = 30;
  int epochs_per_round = 1;
  double learning_rate = 2e-4;
  double lambda_pixel = 100.0;
  bool parallel_sites = false;
};

double learning_rate_at(const TrainingParams& params, int round);

// Which generator parameters take part in aggregation. Discriminators never
// leave their site.
enum class ShareScope {
  DownstreamAndMapper,     // partial network aggregation (the default)
  DownstreamMapperAndPb,   // leakage study: personalization is shared too
  FullGenerator,           // everything is averaged (no-PNA / plain federated)
};

bool tag_is_shared(ShareScope scope, ParamTag tag);

// Every payload between server and sites passes through the checkpoint
// encoding, so the exchanged parameter set is observable and exact.
class Transport {
 public:
  using Inspector =
      std::function<void(const std::string& direction, int site, const ParameterTree& payload)>;

  ParameterTree transfer(const std::string& direction, int site, const ParameterTree& payload);

  void set_inspector(Inspector inspector) { inspector_ = std::move(inspector); }
  std::int64_t total_params() const { return total_params_; }
  std::int64_t total_bytes() const { return total_bytes_; }

 private:
  Inspector inspector_;
  std::int64_t total_params_ = 0;
  std::int64_t total_bytes_ = 0;
};

// A participant that appears or activates an extra task mid-training.
struct LateJoinSpec {
  enum class Kind { Site, Task };
  Kind kind = Kind::Site;
  int round = 0;   // first round in which the site/task participates
  int site = 0;    // site index affected
  int config = 0;  // config index within that site (Kind::Task only)
};

// Losses observed in one paired update on a single image pair.
struct StepLosses {
  double adv = 0.0;
  double pix = 0.0;
  double total = 0.0;
  double d_loss = 0.0;
};

// Generator step (adversarial + weighted L1) followed by a discriminator
// step against the pre-update synthesis. Batch size is one image pair.
StepLosses gan_training_step(Generator& gen, AdamOptimizer& gen_opt, PatchDiscriminator& disc,
                             AdamOptimizer& disc_opt, const Tensor& source, const Tensor& target,
                             const ConditionCodes& codes, double lambda_pixel, double lr);

struct SiteRoundStats {
  bool trained = false;
  int items = 0;
  double g_adv = 0.0;
  double g_pix = 0.0;
  double g_total = 0.0;
  double d_loss = 0.0;
  double val_l1 = 0.0;
};

struct RoundStats {
  int round = 0;
  double lr = 0.0;
  std::vector<SiteRoundStats> sites;
  std::int64_t broadcast_params = 0;
  std::int64_t upload_params = 0;
};

// The federated round loop: broadcast the shared part, train every active
// site locally (one generator step then one discriminator step per item),
// and average the uploaded shared parts weighted by sample count.
class Federation {
 public:
  Federation(const ModelSpec& model, const TrainingParams& training, ShareScope scope,
             std::vector<SiteDataset> site_data, std::uint64_t seed,
             std::optional<LateJoinSpec> late_join = std::nullopt);
  ~Federation();
  Federation(const Federation&) = delete;
  Federation& operator=(const Federation&) = delete;

  // Runs the next protocol round; throws TrainingDiverged (with the site and
  // round recorded) after restoring the pre-round state.
  RoundStats run_round();
  // Runs all configured rounds and ends with a final broadcast so every site
  // holds the last aggregate.
  std::vector<RoundStats> run();
  int round() const { return round_; }

  void set_transport_inspector(Transport::Inspector inspector);
  const Transport& transport() const { return transport_; }

  int site_count() const;
  bool site_active(int site) const;
  const std::vector<int>& active_configs(int site) const;
  Generator& site_generator(int site);
  Generator& global_generator();
  const SiteDataset& site_dataset(int site) const;

  // Translation with site `site`'s personalized model for one of its configs.
  Tensor infer(int site, int config_index, const Tensor& source);
  // Mean L1 distance on a site's validation items (active configs only).
  double validation_l1(int site);

  ParameterTree global_tree() const;
  ParameterTree shared_tree() const;  // shared slice of the global model
  ParameterTree site_checkpoint_tree(int site) const;
  void load_site_checkpoint(int site, const ParameterTree& tree);
  std::int64_t shared_parameter_count() const;
  std::int64_t site_parameter_count(int site) const;  // generator + discriminators

 private:
  struct Site;
  void broadcast();
  void train_site(Site& site, double lr, SiteRoundStats& stats);
  void aggregate(RoundStats& stats);
  std::vector<int> active_train_indices(const Site& site) const;

  ModelSpec model_;
  TrainingParams training_;
  ShareScope scope_;
  std::optional<LateJoinSpec> late_join_;
  std::unique_ptr<Generator> global_;
  std::vector<std::unique_ptr<Site>> sites_;
  Transport transport_;
  int round_ = 0;
};

}  // namespace pfls
