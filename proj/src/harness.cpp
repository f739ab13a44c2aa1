#include "refil/harness.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace refil {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

Rng stream(std::uint64_t seed, std::uint64_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(id >> 32)};
  return Rng(seq);
}

std::uint64_t derive(std::uint64_t seed, std::uint64_t id) { return stream(seed, id)(); }

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

const char* mixer_name(MixerKind k) { return k == MixerKind::qmix ? "qmix" : "vdn"; }

MixerKind parse_mixer(const std::string& s) {
  if (s == "qmix") return MixerKind::qmix;
  if (s == "vdn") return MixerKind::vdn;
  throw std::invalid_argument("unknown mixer: " + s);
}

const char* partition_name(PartitionStrategy p) {
  switch (p) {
    case PartitionStrategy::random: return "random";
    case PartitionStrategy::fixed_oracle: return "fixed_oracle";
    case PartitionStrategy::randomized_oracle: return "randomized_oracle";
  }
  return "random";
}

PartitionStrategy parse_partition(const std::string& s) {
  if (s == "random") return PartitionStrategy::random;
  if (s == "fixed_oracle") return PartitionStrategy::fixed_oracle;
  if (s == "randomized_oracle") return PartitionStrategy::randomized_oracle;
  throw std::invalid_argument("unknown partition strategy: " + s);
}

json to_json_value(const RunConfig& c) {
  const LearnerConfig& l = c.learner;
  return json{
      {"algorithm", c.algorithm},
      {"seed", c.seed},
      {"total_steps", c.total_steps},
      {"max_train_steps", c.max_train_steps},
      {"eval_interval", c.eval_interval},
      {"eval_episodes", c.eval_episodes},
      {"n_envs", c.n_envs},
      {"out_dir", c.out_dir},
      {"env",
       {{"n_agents", c.env.n_agents},
        {"n_cells", c.env.n_cells},
        {"n_groups", c.env.n_groups},
        {"episode_limit", c.env.episode_limit}}},
      {"learner",
       {{"lr", l.lr},
        {"rms_alpha", l.rms_alpha},
        {"rms_eps", l.rms_eps},
        {"gamma", l.gamma},
        {"target_update_interval", l.target_update_interval},
        {"grad_clip", l.grad_clip},
        {"buffer_capacity", l.buffer_capacity},
        {"batch_size", l.batch_size},
        {"lambda", l.lambda},
        {"epsilon_start", l.epsilon_start},
        {"epsilon_end", l.epsilon_end},
        {"epsilon_anneal_steps", l.epsilon_anneal_steps},
        {"mixer", mixer_name(l.mixer)},
        {"partition", partition_name(l.partition)},
        {"partition_groups", l.partition_groups}}},
      {"model",
       {{"embed_dim", c.embed_dim},
        {"heads", c.heads},
        {"hidden_dim", c.hidden_dim},
        {"mixing_dim", c.mixing_dim}}},
  };
}

template <typename T>
void take(const json& j, const char* key, T& out, std::vector<std::string>& seen) {
  if (!j.contains(key)) return;
  seen.emplace_back(key);
  out = j.at(key).get<T>();
}

void reject_unknown(const json& j, const std::vector<std::string>& seen, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(seen.begin(), seen.end(), it.key()) == seen.end()) {
      throw std::invalid_argument("config: unknown key " + where + it.key());
    }
  }
}

RunConfig from_json_value(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  RunConfig c;
  std::vector<std::string> seen;
  take(j, "algorithm", c.algorithm, seen);
  take(j, "seed", c.seed, seen);
  take(j, "total_steps", c.total_steps, seen);
  take(j, "max_train_steps", c.max_train_steps, seen);
  take(j, "eval_interval", c.eval_interval, seen);
  take(j, "eval_episodes", c.eval_episodes, seen);
  take(j, "n_envs", c.n_envs, seen);
  take(j, "out_dir", c.out_dir, seen);
  if (j.contains("env")) {
    seen.emplace_back("env");
    const json& e = j.at("env");
    std::vector<std::string> s;
    take(e, "n_agents", c.env.n_agents, s);
    take(e, "n_cells", c.env.n_cells, s);
    take(e, "n_groups", c.env.n_groups, s);
    take(e, "episode_limit", c.env.episode_limit, s);
    reject_unknown(e, s, "env.");
  }
  if (j.contains("learner")) {
    seen.emplace_back("learner");
    const json& e = j.at("learner");
    LearnerConfig& l = c.learner;
    std::vector<std::string> s;
    take(e, "lr", l.lr, s);
    take(e, "rms_alpha", l.rms_alpha, s);
    take(e, "rms_eps", l.rms_eps, s);
    take(e, "gamma", l.gamma, s);
    take(e, "target_update_interval", l.target_update_interval, s);
    take(e, "grad_clip", l.grad_clip, s);
    take(e, "buffer_capacity", l.buffer_capacity, s);
    take(e, "batch_size", l.batch_size, s);
    take(e, "lambda", l.lambda, s);
    take(e, "epsilon_start", l.epsilon_start, s);
    take(e, "epsilon_end", l.epsilon_end, s);
    take(e, "epsilon_anneal_steps", l.epsilon_anneal_steps, s);
    std::string mixer = mixer_name(l.mixer), partition = partition_name(l.partition);
    take(e, "mixer", mixer, s);
    take(e, "partition", partition, s);
    l.mixer = parse_mixer(mixer);
    l.partition = parse_partition(partition);
    take(e, "partition_groups", l.partition_groups, s);
    reject_unknown(e, s, "learner.");
  }
  if (j.contains("model")) {
    seen.emplace_back("model");
    const json& e = j.at("model");
    std::vector<std::string> s;
    take(e, "embed_dim", c.embed_dim, s);
    take(e, "heads", c.heads, s);
    take(e, "hidden_dim", c.hidden_dim, s);
    take(e, "mixing_dim", c.mixing_dim, s);
    reject_unknown(e, s, "model.");
  }
  reject_unknown(j, seen, "");
  return c;
}

}  // namespace

void RunConfig::apply_algorithm() {
  if (algorithm == "refil") {
    learner.mixer = MixerKind::qmix;
    learner.partition = PartitionStrategy::random;
  } else if (algorithm == "qmix-attention") {
    learner.mixer = MixerKind::qmix;
    learner.lambda = 0.0;
  } else if (algorithm == "refil-vdn") {
    learner.mixer = MixerKind::vdn;
    learner.partition = PartitionStrategy::random;
  } else if (algorithm == "vdn-attention") {
    learner.mixer = MixerKind::vdn;
    learner.lambda = 0.0;
  } else if (algorithm == "refil-fixed-oracle") {
    learner.mixer = MixerKind::qmix;
    learner.partition = PartitionStrategy::fixed_oracle;
  } else if (algorithm == "refil-randomized-oracle") {
    learner.mixer = MixerKind::qmix;
    learner.partition = PartitionStrategy::randomized_oracle;
  } else {
    throw std::invalid_argument("unknown algorithm: " + algorithm);
  }
}

void RunConfig::validate() const {
  env.validate();
  learner.validate();
  if (n_envs == 0) throw std::invalid_argument("n_envs must be positive");
  if (eval_interval == 0) throw std::invalid_argument("eval_interval must be positive");
  if (eval_episodes == 0) throw std::invalid_argument("eval_episodes must be positive");
  if (heads == 0 || embed_dim % heads != 0) {
    throw std::invalid_argument("embed_dim must be a multiple of heads");
  }
  if (hidden_dim == 0 || mixing_dim == 0) throw std::invalid_argument("model dims must be positive");
}

ModelConfig RunConfig::model_config() const {
  const std::size_t d = env.n_cells + env.n_groups;
  ModelConfig m;
  m.agent = AgentNetworkConfig{d, env::GroupMatchingGame::kActions, embed_dim, heads, hidden_dim};
  m.mixer = MixerConfig{d, embed_dim, heads, mixing_dim};
  m.kind = learner.mixer;
  return m;
}

std::string to_json(const RunConfig& cfg) { return to_json_value(cfg).dump(2) + "\n"; }

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  try {
    return from_json_value(j);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_json(ss.str());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override must look like key=value: " + assignment);
  }
  const std::string key = assignment.substr(0, eq), value = assignment.substr(eq + 1);
  json j = to_json_value(cfg);
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!node->is_object() || !node->contains(part)) {
      throw std::invalid_argument("override: unknown key " + key);
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    if (node->is_string()) {
      *node = value;
    } else if (node->is_number_unsigned()) {
      if (value.empty() || value[0] == '-') throw std::invalid_argument("negative");
      *node = std::stoull(value);
    } else if (node->is_number()) {
      *node = std::stod(value);
    } else {
      throw std::invalid_argument("override: " + key + " is a section");
    }
  } catch (const std::logic_error&) {
    throw std::invalid_argument("override: bad value for " + key + ": " + value);
  }
  cfg = from_json_value(j);
}

fs::path resolve_output_dir(const RunConfig& cfg) {
  fs::path out = cfg.out_dir.empty()
                     ? fs::path(cfg.algorithm + "-seed" + std::to_string(cfg.seed))
                     : fs::path(cfg.out_dir);
  if (out.is_absolute()) return out;
  const char* root = std::getenv(kOutputRootEnv);
  return (root && *root) ? fs::path(root) / out : fs::path("runs") / out;
}

ParallelRunner::ParallelRunner(const env::GroupMatchingConfig& cfg, std::size_t n_envs,
                               std::uint64_t seed) {
  cfg.validate();
  if (n_envs == 0) throw std::invalid_argument("runner: n_envs must be positive");
  for (std::size_t i = 0; i < n_envs; ++i) envs_.emplace_back(cfg);
  spec_ = envs_[0].spec();
  reseed(seed);
}

void ParallelRunner::reseed(std::uint64_t seed) {
  env_rngs_.clear();
  action_rngs_.clear();
  for (std::size_t i = 0; i < envs_.size(); ++i) {
    env_rngs_.push_back(stream(seed, 2 * i));
    action_rngs_.push_back(stream(seed, 2 * i + 1));
  }
}

std::vector<Episode> ParallelRunner::collect(const QModel& model, double epsilon) {
  const std::size_t n = envs_.size(), ne = spec_.n_entities, d = spec_.feature_dim;
  const std::size_t nu = spec_.n_actions;
  const std::size_t hr = model.agent().config().hidden_dim;
  std::vector<Episode> episodes(n);
  std::vector<env::Observation> obs(n);
  std::vector<bool> running(n, true);
  for (std::size_t i = 0; i < n; ++i) {
    obs[i] = envs_[i].reset(env_rngs_[i]);
    episodes[i].states.push_back(obs[i]);
    episodes[i].ground_truth = envs_[i].ground_truth_groups();
  }
  const std::vector<std::size_t> agents = obs[0].agents;
  const std::size_t na = agents.size();
  Matrix hidden(n * na, hr);

  std::vector<std::size_t> live;
  while (true) {
    live.clear();
    for (std::size_t i = 0; i < n; ++i) {
      if (running[i]) live.push_back(i);
    }
    if (live.empty()) break;
    const std::size_t k = live.size();
    Matrix entities(k * ne, d);
    BinaryMatrix masks(k * na, ne);
    Matrix h0(k * na, hr);
    for (std::size_t j = 0; j < k; ++j) {
      const env::Observation& o = obs[live[j]];
      std::copy(o.entities.begin(), o.entities.end(), entities.begin() + j * ne * d);
      for (std::size_t a = 0; a < na; ++a) {
        for (std::size_t e = 0; e < ne; ++e) {
          masks(j * na + a, e) = (o.observability(a, e) && o.active[e]) ? 1 : 0;
        }
      }
      std::copy(hidden.begin() + live[j] * na * hr, hidden.begin() + (live[j] + 1) * na * hr,
                h0.begin() + j * na * hr);
    }
    ad::Tape tape(false);
    SequenceInput in;
    in.entities = &entities;
    in.layout = EntityLayout{1, k, ne, agents};
    in.masks = &masks;
    in.initial_hidden = std::move(h0);
    SequenceOutput out = model.agent().forward(tape, in);
    const Matrix& q = out.q.value();
    const Matrix& h1 = out.final_hidden.value();

#pragma omp parallel for schedule(static) if (k > 1)
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t i = live[j];
      std::copy(h1.begin() + j * na * hr, h1.begin() + (j + 1) * na * hr,
                hidden.begin() + i * na * hr);
      Rng& rng = action_rngs_[i];
      std::uniform_real_distribution<double> coin(0.0, 1.0);
      std::vector<std::size_t> actions(na);
      for (std::size_t a = 0; a < na; ++a) {
        std::vector<std::size_t> avail;
        std::size_t best = nu;
        for (std::size_t u = 0; u < nu; ++u) {
          if (!obs[i].available(a, u)) continue;
          avail.push_back(u);
          if (best == nu || q(j * na + a, u) > q(j * na + a, best)) best = u;
        }
        if (avail.empty()) throw std::logic_error("runner: agent without available actions");
        const bool explore = coin(rng) < epsilon;
        if (explore) {
          std::uniform_int_distribution<std::size_t> pick(0, avail.size() - 1);
          actions[a] = avail[pick(rng)];
        } else {
          actions[a] = best;
        }
      }
      env::StepResult r = envs_[i].step(actions);
      Episode& ep = episodes[i];
      ep.actions.push_back(std::move(actions));
      ep.rewards.push_back(r.reward);
      ep.terminated.push_back(r.info.win ? 1 : 0);
      ep.states.push_back(r.observation);
      obs[i] = std::move(r.observation);
      if (r.terminated) {
        ep.win = r.info.win;
        running[i] = false;
      }
    }
  }
  return episodes;
}

std::pair<double, double> mean_ci95(std::span<const double> xs) {
  if (xs.empty()) throw std::invalid_argument("mean_ci95: no samples");
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() == 1) return {mean, 0.0};
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size() - 1);
  return {mean, 1.96 * std::sqrt(var / static_cast<double>(xs.size()))};
}

EvalSummary evaluate(const QModel& model, const env::GroupMatchingConfig& cfg,
                     std::size_t episodes, std::size_t n_envs, std::uint64_t seed) {
  if (episodes == 0) throw std::invalid_argument("evaluate: episodes must be positive");
  ParallelRunner runner(cfg, std::min(n_envs, episodes), seed);
  std::vector<double> wins, returns, lengths;
  while (wins.size() < episodes) {
    for (const Episode& ep : runner.collect(model, 0.0)) {
      if (wins.size() == episodes) break;
      wins.push_back(ep.win ? 1.0 : 0.0);
      returns.push_back(ep.total_return());
      lengths.push_back(static_cast<double>(ep.length()));
    }
  }
  EvalSummary s;
  s.episodes = episodes;
  std::tie(s.win_rate, s.win_ci) = mean_ci95(wins);
  std::tie(s.mean_return, s.return_ci) = mean_ci95(returns);
  std::tie(s.mean_length, s.length_ci) = mean_ci95(lengths);
  return s;
}

std::string metrics_header() {
  return "eval_index,env_steps,episodes,train_steps,eval_win_rate,eval_mean_return,"
         "eval_mean_length,loss,loss_q,loss_aux,grad_norm,epsilon,buffer_size";
}

std::string metrics_line(const MetricsRow& r) {
  std::string s = std::to_string(r.eval_index) + "," + std::to_string(r.env_steps) + "," +
                  std::to_string(r.episodes) + "," + std::to_string(r.train_steps);
  for (double x : {r.eval_win_rate, r.eval_mean_return, r.eval_mean_length, r.loss, r.loss_q,
                   r.loss_aux, r.grad_norm, r.epsilon}) {
    s += "," + num(x);
  }
  return s + "," + std::to_string(r.buffer_size);
}

RunResult run_train(RunConfig cfg, const StopWhen& stop_when) {
  cfg.apply_algorithm();
  cfg.validate();
  RunResult result;
  result.out_dir = resolve_output_dir(cfg);
  std::error_code ec;
  fs::create_directories(result.out_dir, ec);
  std::ofstream config_out(result.out_dir / "config.json");
  if (ec || !config_out) {
    throw std::runtime_error("unwritable output directory " + result.out_dir.string());
  }
  config_out << to_json(cfg);
  config_out.close();

  std::ofstream metrics(result.out_dir / "metrics.csv");
  std::ofstream train_log(result.out_dir / "train_log.csv");
  if (!metrics || !train_log) {
    throw std::runtime_error("unwritable output directory " + result.out_dir.string());
  }
  metrics << metrics_header() << "\n";
  train_log << "train_step,env_steps,episodes,loss,loss_q,loss_aux,grad_norm,epsilon,buffer_size\n";

  Learner learner(cfg.model_config(), cfg.learner, derive(cfg.seed, 1));
  ParallelRunner runner(cfg.env, cfg.n_envs, derive(cfg.seed, 2));
  ReplayBuffer buffer(cfg.learner.buffer_capacity);
  Rng sample_rng = stream(cfg.seed, 3);

  std::size_t env_steps = 0, episodes = 0, eval_index = 0;
  TrainMetrics sums;
  std::size_t sum_count = 0;

  auto eval_row = [&]() {
    const EvalSummary s = evaluate(learner.live(), cfg.env, cfg.eval_episodes, cfg.n_envs,
                                   derive(cfg.seed, 1000 + eval_index));
    MetricsRow row;
    row.eval_index = eval_index++;
    row.env_steps = env_steps;
    row.episodes = episodes;
    row.train_steps = learner.train_steps();
    row.eval_win_rate = s.win_rate;
    row.eval_mean_return = s.mean_return;
    row.eval_mean_length = s.mean_length;
    if (sum_count > 0) {
      const double n = static_cast<double>(sum_count);
      row.loss = sums.loss / n;
      row.loss_q = sums.loss_q / n;
      row.loss_aux = sums.loss_aux / n;
      row.grad_norm = sums.grad_norm / n;
    }
    row.epsilon = cfg.learner.epsilon_at(env_steps);
    row.buffer_size = buffer.size();
    sums = TrainMetrics{};
    sum_count = 0;
    metrics << metrics_line(row) << "\n" << std::flush;
    result.rows.push_back(row);
    return stop_when && stop_when(row);
  };

  bool stop = eval_row();
  std::size_t next_eval = cfg.eval_interval;
  auto budget_spent = [&]() {
    return env_steps >= cfg.total_steps ||
           (cfg.max_train_steps > 0 && learner.train_steps() >= cfg.max_train_steps);
  };
  while (!stop && !budget_spent()) {
    const double epsilon = cfg.learner.epsilon_at(env_steps);
    for (Episode& ep : runner.collect(learner.live(), epsilon)) {
      env_steps += ep.length();
      ++episodes;
      buffer.insert(std::move(ep));
    }
    if (buffer.size() >= cfg.learner.batch_size) {
      const auto picked = buffer.sample(cfg.learner.batch_size, sample_rng);
      const EpisodeBatch batch = EpisodeBatch::from_episodes(picked);
      const TrainMetrics m = learner.train_step(batch);
      sums.loss += m.loss;
      sums.loss_q += m.loss_q;
      sums.loss_aux += m.loss_aux;
      sums.grad_norm += m.grad_norm;
      ++sum_count;
      train_log << learner.train_steps() << "," << env_steps << "," << episodes << ","
                << num(m.loss) << "," << num(m.loss_q) << "," << num(m.loss_aux) << ","
                << num(m.grad_norm) << "," << num(epsilon) << "," << buffer.size() << "\n";
    }
    learner.update_target(episodes);
    if (env_steps >= next_eval || budget_spent()) {
      while (next_eval <= env_steps) next_eval += cfg.eval_interval;
      stop = eval_row();
    }
  }
  result.stopped_early = stop;
  save_checkpoint(result.out_dir / "model.ckpt", cfg, learner.live().params());
  return result;
}

namespace {

constexpr char kMagic[8] = {'R', 'E', 'F', 'I', 'L', 'C', 'K', 'P'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

std::string get_string(std::istream& in, std::uint64_t n) {
  if (n > (1ULL << 30)) throw std::runtime_error("checkpoint: corrupt length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

std::ifstream open_checkpoint(const fs::path& path, std::string& config_text) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("not a checkpoint: " + path.string());
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint version " + std::to_string(version) + ", expected " +
                             std::to_string(kCheckpointVersion));
  }
  config_text = get_string(in, get<std::uint64_t>(in));
  return in;
}

}  // namespace

void save_checkpoint(const fs::path& path, const RunConfig& cfg, const ParamStore& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, 8);
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string text = to_json(cfg);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  put<std::uint64_t>(out, params.params().size());
  for (const ad::Parameter& p : params.params()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint64_t>(out, p.value.rows());
    put<std::uint64_t>(out, p.value.cols());
    out.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

RunConfig read_checkpoint_config(const fs::path& path) {
  std::string text;
  open_checkpoint(path, text);
  return run_config_from_json(text);
}

void load_checkpoint(const fs::path& path, ParamStore& params) {
  std::string text;
  std::ifstream in = open_checkpoint(path, text);
  const auto count = get<std::uint64_t>(in);
  if (count != params.params().size()) {
    throw std::runtime_error("architecture mismatch: checkpoint has " + std::to_string(count) +
                             " tensors, model has " + std::to_string(params.params().size()));
  }
  for (ad::Parameter& p : params.params()) {
    const std::string name = get_string(in, get<std::uint32_t>(in));
    const auto rows = get<std::uint64_t>(in);
    const auto cols = get<std::uint64_t>(in);
    if (name != p.name || rows != p.value.rows() || cols != p.value.cols()) {
      throw std::runtime_error("architecture mismatch: checkpoint tensor " + name + " " +
                               shape_str(rows, cols) + ", model expects " + p.name + " " +
                               shape_str(p.value));
    }
    in.read(reinterpret_cast<char*>(p.value.data()),
            static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
  }
}

EvalSummary run_eval(const fs::path& checkpoint, std::size_t episodes,
                     const std::optional<RunConfig>& cfg, std::uint64_t eval_seed) {
  if (episodes == 0) throw std::invalid_argument("eval: episodes must be positive");
  RunConfig run = cfg ? *cfg : read_checkpoint_config(checkpoint);
  run.apply_algorithm();
  run.validate();
  QModel model(run.model_config(), 0);
  load_checkpoint(checkpoint, model.params());
  return evaluate(model, run.env, episodes, run.n_envs, derive(eval_seed, 0xe7a1));
}

namespace {

struct Table {
  std::vector<std::string> header;
  std::map<std::size_t, std::vector<double>> rows;  // by eval_index
};

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

Table read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty metrics file " + path.string());
  t.header = split(line);
  if (t.header.empty() || t.header[0] != "eval_index") {
    throw std::runtime_error("schema mismatch: " + path.string() + " lacks eval_index");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != t.header.size()) {
      throw std::runtime_error("schema mismatch: ragged row in " + path.string());
    }
    std::vector<double> values;
    for (std::size_t c = 1; c < cells.size(); ++c) values.push_back(std::stod(cells[c]));
    t.rows[std::stoull(cells[0])] = std::move(values);
  }
  return t;
}

}  // namespace

void export_curves(std::span<const fs::path> run_dirs, const fs::path& out_csv) {
  if (run_dirs.empty()) throw std::invalid_argument("export: no runs given");
  std::vector<Table> tables;
  for (const fs::path& dir : run_dirs) {
    tables.push_back(read_metrics(dir / "metrics.csv"));
    if (tables.back().header != tables.front().header) {
      throw std::runtime_error("schema mismatch between " + run_dirs.front().string() + " and " +
                               dir.string());
    }
  }
  std::ofstream out(out_csv);
  if (!out) throw std::runtime_error("cannot write " + out_csv.string());
  const auto& header = tables.front().header;
  out << "eval_index,runs";
  for (std::size_t c = 1; c < header.size(); ++c) {
    out << "," << header[c] << "_mean," << header[c] << "_ci95";
  }
  out << "\n";
  for (const auto& [index, first] : tables.front().rows) {
    bool everywhere = true;
    for (const Table& t : tables) everywhere = everywhere && t.rows.count(index);
    if (!everywhere) continue;
    out << index << "," << tables.size();
    for (std::size_t c = 0; c < first.size(); ++c) {
      std::vector<double> xs;
      for (const Table& t : tables) xs.push_back(t.rows.at(index)[c]);
      const auto [mean, ci] = mean_ci95(xs);
      out << "," << num(mean) << "," << num(ci);
    }
    out << "\n";
  }
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace refil
