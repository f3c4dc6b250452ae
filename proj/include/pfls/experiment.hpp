// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "pfls/federation.hpp"
#include "pfls/metrics.hpp"

namespace pfls {

enum class RunMode { PflSynth, FedGan, Central, Ablation };

enum class AblationKind { NoAdaIn, NoAdaCw, NoPna, NoMapper, NoSiteIndex, NoTaskIndex };

std::string to_string(RunMode mode, std::optional<AblationKind> ablation);

struct DatasetSpec {
  int sites = 4;
  int image_size = 64;
  std::vector<int> maps_per_site = {20, 18, 28, 20};
  std::array<double, 3> split_fractions = {0.6, 0.2, 0.2};
  // One task list per site. Defaults to the variable-task layout; the JSON
  // form also accepts the shorthands "variable" and "common".
  std::vector<std::vector<TaskConfig>> tasks;
};

std::vector<std::vector<TaskConfig>> variable_task_layout();
std::vector<std::vector<TaskConfig>> common_task_layout(int sites);

struct AnalysisSpec {
  int similarity_probes = 0;  // 0 disables the activation profile
  int sample_images = 1;      // sample translations exported per (site, task)
};

// Everything that defines one training run. The JSON schema mirrors the
// nesting here; missing fields take these defaults.
struct ExperimentConfig {
  std::string name = "run";
  std::uint64_t seed = 1;
  RunMode mode = RunMode::PflSynth;
  std::optional<AblationKind> ablation;
  bool share_pbs = false;  // leakage study: aggregate personalization too
  DatasetSpec dataset;
  ModelSpec model;
  TrainingParams training;
  std::optional<LateJoinSpec> late_join;
  AnalysisSpec analysis;

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig from_file(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  // Stable content hash of the canonical JSON form; names the report dir.
  std::string fingerprint() const;
  void validate() const;

  // Switches implied by mode/ablation applied to a copy of `model`.
  ModelSpec resolved_model() const;
  ShareScope resolved_scope() const;
};

// Per-(site, task) evaluation cell on held-out test pairs.
struct MetricCell {
  int site = 0;
  std::string task;
  int n_test = 0;
  double psnr_mean = 0.0, psnr_std = 0.0;
  double ssim_mean = 0.0, ssim_std = 0.0;
};

struct RunResult {
  std::filesystem::path dir;
  std::string name;
  std::string mode;
  std::uint64_t seed = 0;
  std::vector<MetricCell> cells;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  std::int64_t comp_params = 0;            // per-site model footprint (max over sites)
  std::int64_t comm_params_per_round = 0;  // shared parameters, one direction, per site
};

// Executes one experiment and writes the full report directory
// (config.json, ledger.csv, metrics.csv, summary.json, checkpoints/,
// samples/, similarity.json). Returns the headline numbers.
RunResult run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_root);

// Runs every *.json config in `configs_dir` and writes a cross-run
// comparison (matrix_summary.csv/json) flagging the best federated result
// per evaluation cell within each seed group.
void run_matrix(const std::filesystem::path& configs_dir, const std::filesystem::path& out_root);

// Renders the similarity profile (SVG) and a sample-image contact sheet
// (PGM) from an existing report directory.
void emit_plots(const std::filesystem::path& run_dir);

// 8-bit binary PGM for images in [-1, 1].
void write_pgm(const Tensor& image, const std::filesystem::path& path);
Tensor read_pgm(const std::filesystem::path& path);

}  // namespace pfls
