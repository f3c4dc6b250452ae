// SPDX-License-Identifier: Apache-2.0
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "pfls/experiment.hpp"

namespace {

int run_command(const std::string& config_path, const std::string& out_dir) {
  const pfls::ExperimentConfig config = pfls::ExperimentConfig::from_file(config_path);
  const pfls::RunResult result = pfls::run_experiment(config, out_dir);
  std::cout << "run " << result.name << " (" << result.mode << ", seed " << result.seed
            << ")\n  report: " << result.dir.string() << "\n  mean PSNR: " << result.mean_psnr
            << " dB\n  mean SSIM: " << result.mean_ssim << "\n  model params: "
            << result.comp_params << "\n  shared params per round: "
            << result.comm_params_per_round << '\n';
  return 0;
}

int matrix_command(const std::string& configs_dir, const std::string& out_dir) {
  pfls::run_matrix(configs_dir, out_dir);
  std::cout << "matrix report: " << (std::filesystem::path(out_dir) / "matrix_summary.csv").string()
            << '\n';
  return 0;
}

int plots_command(const std::string& run_dir) {
  pfls::emit_plots(run_dir);
  std::cout << "plots written under " << run_dir << '\n';
  return 0;
}

int phantom_command(int sites, int size, int maps, const std::string& out_dir,
                    std::uint64_t seed) {
  const auto layouts =
      sites == 4 ? pfls::variable_task_layout() : pfls::common_task_layout(sites);
  for (int k = 0; k < sites; ++k) {
    const pfls::SiteDataset data =
        pfls::make_site_dataset(pfls::default_site_profile(k), layouts[k], maps,
                                {0.6, 0.2, 0.2}, pfls::derive_seed(seed, "site-data", k), size);
    const std::filesystem::path dir =
        std::filesystem::path(out_dir) / ("site" + std::to_string(k));
    pfls::save_dataset(data, dir);
    std::cout << "site " << k << ": " << data.pairs.size() << " pairs ("
              << data.train_indices.size() << " train) -> " << dir.string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated multi-contrast MRI synthesis sandbox"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", configs_dir, run_dir, phantom_out = "phantom";
  int sites = 4, size = 64, maps = 8;
  std::uint64_t seed = 1;

  CLI::App* run = app.add_subcommand("run", "Run one experiment config");
  run->add_option("--config", config_path, "experiment config (JSON)")->required();
  run->add_option("--out", out_dir, "report root directory");

  CLI::App* matrix = app.add_subcommand("matrix", "Run every config in a directory");
  matrix->add_option("--configs", configs_dir, "directory of *.json configs")->required();
  matrix->add_option("--out", out_dir, "report root directory");

  CLI::App* plots = app.add_subcommand("plots", "Render figures for a finished run");
  plots->add_option("--run", run_dir, "report directory of a finished run")->required();

  CLI::App* phantom = app.add_subcommand("phantom", "Phantom dataset utilities");
  phantom->require_subcommand(1);
  CLI::App* generate = phantom->add_subcommand("generate", "Write phantom datasets to disk");
  generate->add_option("--sites", sites, "number of sites");
  generate->add_option("--size", size, "image side length");
  generate->add_option("--maps", maps, "tissue maps per site");
  generate->add_option("--out", phantom_out, "output directory");
  generate->add_option("--seed", seed, "base seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*run) return run_command(config_path, out_dir);
    if (*matrix) return matrix_command(configs_dir, out_dir);
    if (*plots) return plots_command(run_dir);
    if (*phantom) return phantom_command(sites, size, maps, phantom_out, seed);
  } catch (const pfls::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const pfls::TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
