// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pfls/layers.hpp"
#include "pfls/phantom.hpp"

namespace pfls {

// Architecture and conditioning switches for one generator. The defaults are
// the desk-scale model: 11 synthesizer stages (3 encoder, 5 residual,
// 3 decoder) with personalization after every stage but the last.
struct ModelSpec {
  int image_size = 64;
  int base_width = 16;       // encoder widths are {w, 2w, 4w}
  int bottleneck_depth = 5;  // number of residual blocks
  int latent_dim = 64;
  int site_slots = 5;     // one-hot length for sites (spares included)
  int contrast_slots = 4; // one-hot length per contrast role
  int mapper_layers = 6;
  int cw_hidden = 64;
  std::string split_stage = "r3";  // last site-retained synthesizer stage

  bool use_mapper = true;
  bool use_adain = true;
  bool use_adacw = true;
  bool use_site_code = true;
  bool use_task_code = true;

  int code_length() const { return site_slots + 2 * contrast_slots; }
  // Dimension of the vector the personalization blocks consume.
  int latent_input_dim() const { return use_mapper ? latent_dim : code_length(); }
  void validate() const;
};

// Site/task conditioning: a site one-hot and a source|target contrast
// one-hot pair, concatenated before entering the mapper.
struct ConditionCodes {
  Tensor site;  // {site_slots}
  Tensor task;  // {2 * contrast_slots}

  Tensor concat() const;
};

// Builds the codes for one (site, task) combination, honoring the spec's
// conditioning ablation switches (disabled codes are all-zero).
ConditionCodes make_codes(const ModelSpec& spec, int site_index, const TaskConfig& task);

namespace detail {
class Stage;
class Pb;
}  // namespace detail

// The conditional synthesizer network: image-to-image translator whose
// stages are modulated by a latent vector through personalization blocks.
class Generator {
 public:
  Generator(const ModelSpec& spec, std::uint64_t init_seed);
  ~Generator();
  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;

  const ModelSpec& spec() const { return spec_; }
  ParamRegistry& params() { return registry_; }
  const ParamRegistry& params() const { return registry_; }
  std::int64_t parameter_count() const { return registry_.parameter_count(); }

  // Latent production only (mapper, or the raw code when the mapper is
  // disabled).
  Tensor map_latent(const ConditionCodes& codes);

  // Zeroes the mapper input columns of the given site slots. A reserved slot
  // receives no gradient while unused, so it stays inert and a site that
  // activates it later starts from the cohort's latent operating point
  // instead of a random offset. No-op without a mapper.
  void reset_site_slots(const std::vector<int>& slots);

  // Full translation pass; source is {H, W} or {1, H, W}.
  Tensor forward(const Tensor& source, const ConditionCodes& codes);
  // Backpropagates from the output gradient through synthesizer, blocks, and
  // mapper; accumulates parameter gradients and returns the source gradient.
  Tensor backward(const Tensor& d_output);

  // Stage bookkeeping (for the split boundary and activation probes).
  const std::vector<std::string>& stage_names() const { return stage_names_; }
  int stage_index(const std::string& stage_name) const;
  void set_capture_stages(bool enabled) { capture_ = enabled; }
  // Post-activation output of every stage from the most recent forward with
  // capture enabled.
  const std::vector<Tensor>& stage_outputs() const { return stage_outputs_; }

  // Runs stages [begin_stage, end) on a given activation; used to verify that
  // models sharing their downstream half behave identically from the split
  // boundary on. Does not preserve training caches.
  Tensor forward_from(int begin_stage, const Tensor& activation, const ConditionCodes& codes);

 private:
  Tensor run_stages(std::size_t begin, const Tensor& input, const Tensor& latent);

  ModelSpec spec_;
  ParamRegistry registry_;
  std::unique_ptr<Mlp> mapper_;
  std::vector<std::unique_ptr<detail::Stage>> stages_;
  std::vector<std::string> stage_names_;

  bool capture_ = false;
  std::vector<Tensor> stage_outputs_;
  Tensor last_code_;
  bool forward_ran_ = false;
};

}  // namespace pfls
