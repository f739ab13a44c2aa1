#pragma once

// Run configuration, parallel episode collection, the train/eval loop, metric
// files, checkpoints and multi-seed curve export.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "refil/env.hpp"
#include "refil/learner.hpp"

namespace refil {

inline constexpr const char* kAlgorithms[] = {
    "refil",      "qmix-attention",     "refil-vdn",
    "vdn-attention", "refil-fixed-oracle", "refil-randomized-oracle"};

/// Environment variable that relocates relative output directories.
inline constexpr const char* kOutputRootEnv = "REFIL_OUTPUT_ROOT";

struct RunConfig {
  std::string algorithm = "refil";
  std::uint64_t seed = 0;
  std::size_t total_steps = 500000;  // env steps
  std::size_t max_train_steps = 0;   // 0: no limit
  std::size_t eval_interval = 10000;
  std::size_t eval_episodes = 32;
  std::size_t n_envs = 8;
  std::string out_dir;  // empty: <root>/<algorithm>-seed<seed>
  env::GroupMatchingConfig env;
  LearnerConfig learner;
  std::size_t embed_dim = 128;
  std::size_t heads = 4;
  std::size_t hidden_dim = 64;
  std::size_t mixing_dim = 32;

  /// Sets mixer, partition strategy and (for the baselines) λ = 0 from the
  /// algorithm name. Throws std::invalid_argument for unknown names.
  void apply_algorithm();
  void validate() const;
  ModelConfig model_config() const;
};

std::string to_json(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys are an error.
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
/// `key=value` with a dotted key, e.g. `learner.lr=0.001`.
void apply_override(RunConfig& cfg, const std::string& assignment);
/// Relative paths are placed under $REFIL_OUTPUT_ROOT when it is set.
std::filesystem::path resolve_output_dir(const RunConfig& cfg);

/// Synchronous batched rollouts over independent environment instances, each
/// with its own RNG stream; agents act on a no-grad tape.
class ParallelRunner {
 public:
  ParallelRunner(const env::GroupMatchingConfig& cfg, std::size_t n_envs, std::uint64_t seed);

  std::size_t size() const { return envs_.size(); }
  const env::EnvSpec& spec() const { return spec_; }

  /// One episode per environment. ε-greedy over available actions; ties in
  /// the greedy choice go to the lowest action index.
  std::vector<Episode> collect(const QModel& model, double epsilon);

  /// Reseeds every environment stream; used to give evaluation a fresh stream.
  void reseed(std::uint64_t seed);

 private:
  std::vector<env::GroupMatchingGame> envs_;
  std::vector<Rng> env_rngs_;
  std::vector<Rng> action_rngs_;
  env::EnvSpec spec_;
};

struct EvalSummary {
  std::size_t episodes = 0;
  double win_rate = 0.0, win_ci = 0.0;
  double mean_return = 0.0, return_ci = 0.0;
  double mean_length = 0.0, length_ci = 0.0;
};

/// Mean and 1.96·s/√n half-width (zero for n = 1).
std::pair<double, double> mean_ci95(std::span<const double> xs);

/// Greedy (ε = 0) rollouts of `episodes` episodes.
EvalSummary evaluate(const QModel& model, const env::GroupMatchingConfig& cfg,
                     std::size_t episodes, std::size_t n_envs, std::uint64_t seed);

struct MetricsRow {
  std::size_t eval_index = 0;
  std::size_t env_steps = 0;
  std::size_t episodes = 0;
  std::size_t train_steps = 0;
  double eval_win_rate = 0.0;
  double eval_mean_return = 0.0;
  double eval_mean_length = 0.0;
  double loss = 0.0, loss_q = 0.0, loss_aux = 0.0, grad_norm = 0.0;
  double epsilon = 0.0;
  std::size_t buffer_size = 0;
};

std::string metrics_header();
std::string metrics_line(const MetricsRow& row);

struct RunResult {
  std::filesystem::path out_dir;
  std::vector<MetricsRow> rows;
  bool stopped_early = false;
};

/// Stop predicate checked after every eval row.
using StopWhen = std::function<bool(const MetricsRow&)>;

/// Writes config.json, metrics.csv, train_log.csv and model.ckpt into the
/// output directory.
RunResult run_train(RunConfig cfg, const StopWhen& stop_when = {});

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg,
                     const ParamStore& params);
/// Returns the embedded config; loads tensors into `params` when given.
RunConfig read_checkpoint_config(const std::filesystem::path& path);
void load_checkpoint(const std::filesystem::path& path, ParamStore& params);

/// Uses the checkpoint's embedded config unless `cfg` is given, in which case
/// its architecture must match the stored tensors.
EvalSummary run_eval(const std::filesystem::path& checkpoint, std::size_t episodes,
                     const std::optional<RunConfig>& cfg = std::nullopt,
                     std::uint64_t eval_seed = 0);

/// Keeps freed training buffers in the heap instead of returning them to the
/// OS after every step (glibc only; no-op elsewhere).
void tune_allocator();

/// Aligns metrics.csv rows of several runs by eval_index (rows present in all
/// runs) and writes the per-column mean and 95% CI half-width.
void export_curves(std::span<const std::filesystem::path> run_dirs,
                   const std::filesystem::path& out_csv);

}  // namespace refil
