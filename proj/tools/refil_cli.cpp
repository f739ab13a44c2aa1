#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "refil/harness.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"Attention QMIX with randomized entity-wise factorization"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train one run");
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> algo;
  std::optional<std::size_t> steps;
  std::optional<std::string> out;
  std::vector<std::string> overrides;
  train->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
  train->add_option("--seed", seed);
  train->add_option("--algo", algo)
      ->check(CLI::IsMember(std::vector<std::string>(std::begin(refil::kAlgorithms),
                                                     std::end(refil::kAlgorithms))));
  train->add_option("--steps", steps, "total environment steps");
  train->add_option("--out", out, "output directory");
  train->add_option("--set", overrides, "override a config key, e.g. learner.lr=0.001");

  auto* eval = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  std::string checkpoint;
  std::size_t episodes = 0;
  std::string eval_config;
  std::uint64_t eval_seed = 0;
  eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--episodes", episodes)->required();
  eval->add_option("--config", eval_config, "check the checkpoint against this config")
      ->check(CLI::ExistingFile);
  eval->add_option("--seed", eval_seed);

  auto* exp = app.add_subcommand("export", "aggregate metrics of several runs");
  std::vector<std::string> runs;
  std::string export_out = "curves.csv";
  exp->add_option("--runs", runs)->required()->expected(1, -1);
  exp->add_option("--out", export_out);

  CLI11_PARSE(app, argc, argv);
  refil::tune_allocator();

  try {
    if (*train) {
      refil::RunConfig cfg = config_path.empty() ? refil::RunConfig{}
                                                 : refil::load_run_config(config_path);
      for (const auto& o : overrides) refil::apply_override(cfg, o);
      if (seed) cfg.seed = *seed;
      if (algo) cfg.algorithm = *algo;
      if (steps) cfg.total_steps = *steps;
      if (out) cfg.out_dir = *out;
      const auto result = refil::run_train(cfg);
      const auto& last = result.rows.back();
      std::printf("%s: %zu env steps, final eval win rate %.3f, return %.3f\n",
                  result.out_dir.c_str(), last.env_steps, last.eval_win_rate,
                  last.eval_mean_return);
    } else if (*eval) {
      std::optional<refil::RunConfig> cfg;
      if (!eval_config.empty()) cfg = refil::load_run_config(eval_config);
      const auto s = refil::run_eval(checkpoint, episodes, cfg, eval_seed);
      std::printf("episodes %zu\n", s.episodes);
      std::printf("win_rate %.4f +- %.4f\n", s.win_rate, s.win_ci);
      std::printf("mean_return %.4f +- %.4f\n", s.mean_return, s.return_ci);
      std::printf("mean_length %.4f +- %.4f\n", s.mean_length, s.length_ci);
    } else if (*exp) {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      refil::export_curves(dirs, export_out);
      std::printf("wrote %s\n", export_out.c_str());
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
