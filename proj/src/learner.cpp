#include "refil/learner.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace refil {

void LearnerConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must be in [0, 1]");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must be in [0, 1)");
  if (lr <= 0.0) throw std::invalid_argument("lr must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (buffer_capacity < batch_size) {
    throw std::invalid_argument("buffer_capacity must hold at least one batch");
  }
  if (target_update_interval == 0) {
    throw std::invalid_argument("target_update_interval must be positive");
  }
  if (partition_groups < 2) throw std::invalid_argument("partition_groups must be >= 2");
}

double LearnerConfig::epsilon_at(std::size_t env_steps) const {
  if (epsilon_anneal_steps == 0 || env_steps >= epsilon_anneal_steps) return epsilon_end;
  const double frac = static_cast<double>(env_steps) / static_cast<double>(epsilon_anneal_steps);
  return epsilon_start + frac * (epsilon_end - epsilon_start);
}

QModel::QModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  Rng rng(seed);
  agent_ = std::make_unique<AgentNetwork>(store_, cfg.agent, rng);
  if (cfg.kind == MixerKind::qmix) {
    hyper_ = std::make_unique<MixingHypernetworks>(store_, cfg.mixer, rng);
  }
}

double Episode::total_return() const {
  double total = 0.0;
  for (double r : rewards) total += r;
  return total;
}

EpisodeBatch EpisodeBatch::from_episodes(std::span<const Episode* const> episodes) {
  if (episodes.empty()) throw std::invalid_argument("episode batch: no episodes");
  const env::Observation& first = episodes[0]->states.at(0);
  EpisodeBatch out;
  out.batch = episodes.size();
  out.n_entities = first.entities.rows();
  out.feature_dim = first.entities.cols();
  out.n_actions = first.available.cols();
  out.agents = first.agents;
  for (const Episode* ep : episodes) {
    if (ep->length() == 0 || ep->states.size() != ep->length() + 1) {
      throw std::invalid_argument("episode batch: malformed episode");
    }
    out.steps = std::max(out.steps, ep->length());
  }
  const std::size_t B = out.batch, T = out.steps, ne = out.n_entities, na = out.agents.size();
  const std::size_t d = out.feature_dim, nu = out.n_actions;
  out.entities = Matrix((T + 1) * B * ne, d);
  out.observability = BinaryMatrix((T + 1) * B * na, ne);
  out.active = BinaryMatrix((T + 1) * B, ne);
  out.available = BinaryMatrix((T + 1) * B * na, nu, 1);
  out.actions.assign(T * B * na, 0);
  out.rewards = Matrix(T * B, 1);
  out.terminated = Matrix(T * B, 1);
  out.filled = Matrix(T * B, 1);
  for (std::size_t b = 0; b < B; ++b) {
    const Episode& ep = *episodes[b];
    out.ground_truth.push_back(ep.ground_truth);
    for (std::size_t t = 0; t <= ep.length(); ++t) {
      const env::Observation& obs = ep.states[t];
      if (obs.entities.rows() != ne || obs.entities.cols() != d || obs.agents != out.agents) {
        throw DimensionError("episode batch: episodes disagree on entity layout");
      }
      const std::size_t block = t * B + b;
      std::copy(obs.entities.begin(), obs.entities.end(), out.entities.begin() + block * ne * d);
      std::copy(obs.observability.begin(), obs.observability.end(),
                out.observability.begin() + block * na * ne);
      std::copy(obs.active.begin(), obs.active.end(), out.active.begin() + block * ne);
      std::copy(obs.available.begin(), obs.available.end(),
                out.available.begin() + block * na * nu);
      if (t == ep.length()) continue;
      const std::size_t row = t * B + b;
      std::copy(ep.actions[t].begin(), ep.actions[t].end(), out.actions.begin() + row * na);
      out.rewards[row] = ep.rewards[t];
      out.terminated[row] = ep.terminated[t] ? 1.0 : 0.0;
      out.filled[row] = 1.0;
    }
  }
  return out;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("replay buffer: zero capacity");
}

void ReplayBuffer::insert(Episode episode) {
  if (episodes_.size() == capacity_) episodes_.pop_front();
  episodes_.push_back(std::move(episode));
}

std::vector<const Episode*> ReplayBuffer::sample(std::size_t n, Rng& rng) const {
  if (episodes_.empty()) throw std::logic_error("replay buffer: sampling from empty buffer");
  std::uniform_int_distribution<std::size_t> pick(0, episodes_.size() - 1);
  std::vector<const Episode*> out(n);
  for (auto& e : out) e = &episodes_[pick(rng)];
  return out;
}

Learner::Learner(const ModelConfig& model, const LearnerConfig& cfg, std::uint64_t seed)
    : model_cfg_(model), cfg_(cfg), partition_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
  cfg_.validate();
  model_cfg_.kind = cfg_.mixer;
  live_ = std::make_unique<QModel>(model_cfg_, seed);
  target_ = std::make_unique<QModel>(model_cfg_, seed);
  target_->params().copy_values_from(live_->params());
  target_->params().set_frozen(true);
  for (const auto& p : live_->params().params()) {
    square_avg_.emplace_back(p.value.rows(), p.value.cols());
  }
}

namespace {

// Row (t, variant, b, agent) of a stacked agent-network output.
std::vector<std::size_t> variant_rows(std::size_t t_begin, std::size_t t_end, std::size_t v,
                                      std::size_t variants, std::size_t B, std::size_t na) {
  std::vector<std::size_t> rows;
  rows.reserve((t_end - t_begin) * B * na);
  for (std::size_t t = t_begin; t < t_end; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t a = 0; a < na; ++a) rows.push_back(((t * variants + v) * B + b) * na + a);
    }
  }
  return rows;
}

// Sample (t, variant, b) indices of generated mixer parameters.
std::vector<std::size_t> variant_samples(std::size_t T, std::size_t v, std::size_t variants,
                                         std::size_t B) {
  std::vector<std::size_t> rows;
  rows.reserve(T * B);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t b = 0; b < B; ++b) rows.push_back((t * variants + v) * B + b);
  }
  return rows;
}

// M^μ restricted to active entities, rows (t, b, agent).
BinaryMatrix observed_active(const EpisodeBatch& batch) {
  BinaryMatrix m = batch.observability;
  const std::size_t na = batch.n_agents(), ne = batch.n_entities;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t e = 0; e < ne; ++e) {
      if (!batch.active(r / na, e)) m(r, e) = 0;
    }
  }
  return m;
}

ad::Var masked_mse(ad::Var prediction, const Matrix& targets, const Matrix& filled) {
  ad::Tape& tape = prediction.tape();
  double count = 0.0;
  for (double f : filled) count += f;
  if (count == 0.0) throw std::invalid_argument("loss: batch has no filled steps");
  ad::Var err = ad::sub(prediction, tape.constant(targets));
  return ad::scale(ad::sum(ad::mul_const(ad::square(err), filled)), 1.0 / count);
}

}  // namespace

Matrix Learner::targets_from(const EpisodeBatch& batch, const Matrix& live_q_full) const {
  const std::size_t B = batch.batch, T = batch.steps, na = batch.n_agents();
  const std::size_t ne = batch.n_entities, nu = batch.n_actions;

  // Double DQN: live network picks the next actions, target network scores them.
  std::vector<std::size_t> next_actions(T * B * na);
  for (std::size_t t = 1; t <= T; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t a = 0; a < na; ++a) {
        const std::size_t row = (t * B + b) * na + a;
        std::size_t best = nu;
        for (std::size_t u = 0; u < nu; ++u) {
          if (!batch.available(row, u)) continue;
          if (best == nu || live_q_full(row, u) > live_q_full(row, best)) best = u;
        }
        next_actions[((t - 1) * B + b) * na + a] = best == nu ? 0 : best;
      }
    }
  }

  ad::Tape tape(false);
  SequenceInput in;
  in.entities = &batch.entities;
  in.layout = EntityLayout{T + 1, B, ne, batch.agents};
  const BinaryMatrix masks = observed_active(batch);
  in.masks = &masks;
  SequenceOutput out = target_->agent().forward(tape, in);
  std::vector<std::size_t> later(T * B * na);
  for (std::size_t i = 0; i < later.size(); ++i) later[i] = B * na + i;
  ad::Var q_next =
      ad::reshape(ad::pick_cols(ad::gather_rows(out.q, later), next_actions), T * B, na);

  ad::Var q_tot;
  if (const MixingHypernetworks* hyper = target_->hyper()) {
    const std::size_t d = batch.feature_dim;
    Matrix states(T * B * ne, d,
                  std::vector<double>(batch.entities.begin() + B * ne * d, batch.entities.end()));
    BinaryMatrix masks(T * B * na, ne);
    for (std::size_t blk = 0; blk < T * B; ++blk) {
      for (std::size_t a = 0; a < na; ++a) {
        for (std::size_t e = 0; e < ne; ++e) masks((blk * na) + a, e) = batch.active(B + blk, e);
      }
    }
    MixerParams params =
        hyper->generate(tape, states, EntityLayout{T, B, ne, batch.agents}, masks, 1);
    q_tot = mix(q_next, params);
  } else {
    q_tot = mix_vdn(q_next);
  }

  Matrix y(T * B, 1);
  const Matrix& next = q_tot.value();
  for (std::size_t i = 0; i < T * B; ++i) {
    y[i] = batch.rewards[i] + cfg_.gamma * (1.0 - batch.terminated[i]) * next[i];
  }
  return y;
}

Learner::Losses Learner::build(ad::Tape& tape, const EpisodeBatch& batch, const Matrix* targets,
                               const std::vector<partition::GroupLabels>* partitions,
                               bool want_q) const {
  const std::size_t B = batch.batch, T = batch.steps, na = batch.n_agents();
  const std::size_t ne = batch.n_entities, d = batch.feature_dim;
  const std::size_t V = partitions ? 3 : 1;
  if (partitions && partitions->size() != B) {
    throw std::invalid_argument("loss_aux: one partition per episode required");
  }

  // In-group / out-group masks per episode, agent × entity.
  std::vector<partition::GroupMasks> groups;
  if (partitions) {
    for (std::size_t b = 0; b < B; ++b) {
      if ((*partitions)[b].size() != ne) {
        throw DimensionError("loss_aux: partition length differs from entity count");
      }
      groups.push_back(partition::build_group_masks((*partitions)[b], batch.agents));
    }
  }
  auto variant_bit = [&](std::size_t v, std::size_t b, std::size_t a, std::size_t e) -> bool {
    if (v == 0) return true;
    return v == 1 ? groups[b].in_group(a, e) != 0 : groups[b].out_group(a, e) != 0;
  };

  BinaryMatrix agent_masks((T + 1) * V * B * na, ne);
  for (std::size_t t = 0; t <= T; ++t) {
    for (std::size_t v = 0; v < V; ++v) {
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t a = 0; a < na; ++a) {
          const std::size_t src = (t * B + b) * na + a;
          const std::size_t dst = ((t * V + v) * B + b) * na + a;
          for (std::size_t e = 0; e < ne; ++e) {
            agent_masks(dst, e) =
                (batch.observability(src, e) && batch.active(t * B + b, e) && variant_bit(v, b, a, e))
                    ? 1
                    : 0;
          }
        }
      }
    }
  }

  SequenceInput in;
  in.entities = &batch.entities;
  in.layout = EntityLayout{T + 1, B, ne, batch.agents};
  in.masks = &agent_masks;
  in.variants = V;
  SequenceOutput out = live_->agent().forward(tape, in);

  Losses result;
  {
    const auto rows = variant_rows(0, T + 1, 0, V, B, na);
    const Matrix& q = out.q.value();
    const std::size_t nu = batch.n_actions;
    result.live_q_full = Matrix(rows.size(), nu);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy(q.row(rows[i]).begin(), q.row(rows[i]).end(), result.live_q_full.row(i).begin());
    }
  }
  const Matrix y = targets ? *targets : targets_from(batch, result.live_q_full);
  if (y.rows() != T * B || y.cols() != 1) {
    throw DimensionError("loss: targets " + shape_str(y) + ", expected " + shape_str(T * B, 1));
  }

  auto chosen = [&](std::size_t v) {
    return ad::reshape(ad::pick_cols(ad::gather_rows(out.q, variant_rows(0, T, v, V, B, na)),
                                     batch.actions),
                       T * B, na);
  };

  std::optional<MixerParams> hyper_params;
  const MixingHypernetworks* hyper = live_->hyper();
  if (hyper) {
    Matrix states(T * B * ne, d,
                  std::vector<double>(batch.entities.begin(), batch.entities.begin() + T * B * ne * d));
    BinaryMatrix masks(T * V * B * na, ne);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t v = 0; v < V; ++v) {
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t a = 0; a < na; ++a) {
            const std::size_t dst = ((t * V + v) * B + b) * na + a;
            for (std::size_t e = 0; e < ne; ++e) {
              masks(dst, e) = (batch.active(t * B + b, e) && variant_bit(v, b, a, e)) ? 1 : 0;
            }
          }
        }
      }
    }
    hyper_params = hyper->generate(tape, states, EntityLayout{T, B, ne, batch.agents}, masks, V);
  }
  auto params_for = [&](std::size_t v) {
    return select_samples(*hyper_params, variant_samples(T, v, V, B));
  };

  if (want_q) {
    ad::Var q = chosen(0);
    ad::Var q_tot = hyper ? mix(q, params_for(0)) : mix_vdn(q);
    result.q = masked_mse(q_tot, y, batch.filled);
  }
  if (partitions) {
    ad::Var q_in = chosen(1);
    ad::Var q_out = chosen(2);
    ad::Var q_aux;
    if (hyper) {
      q_aux = mix_aux(q_in, q_out, params_for(1), params_for(2));
    } else {
      ad::Var both[] = {q_in, q_out};
      q_aux = mix_vdn(ad::concat_cols(both));
    }
    result.aux = masked_mse(q_aux, y, batch.filled);
  }
  return result;
}

Matrix Learner::compute_targets(const EpisodeBatch& batch) const {
  if (batch.steps < 1) throw std::invalid_argument("compute_targets: empty batch");
  ad::Tape tape(false);
  const std::size_t B = batch.batch, T = batch.steps, na = batch.n_agents();
  SequenceInput in;
  in.entities = &batch.entities;
  in.layout = EntityLayout{T + 1, B, batch.n_entities, batch.agents};
  const BinaryMatrix masks = observed_active(batch);
  in.masks = &masks;
  SequenceOutput out = live_->agent().forward(tape, in);
  (void)na;
  return targets_from(batch, out.q.value());
}

std::vector<partition::GroupLabels> Learner::sample_partitions(const EpisodeBatch& batch) {
  std::vector<partition::GroupLabels> out;
  out.reserve(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    switch (cfg_.partition) {
      case PartitionStrategy::random:
        if (cfg_.partition_groups == 2) {
          out.push_back(
              partition::labels_from_vector(partition::sample_partition(batch.n_entities,
                                                                        partition_rng_)));
        } else {
          const auto groups = partition::sample_multi_partition(
              batch.n_entities, cfg_.partition_groups, partition_rng_);
          out.push_back(partition::labels_from_vectors(groups));
        }
        break;
      case PartitionStrategy::fixed_oracle:
        out.push_back(partition::oracle_labels(batch.ground_truth[b],
                                               partition::OracleMode::fixed, partition_rng_));
        break;
      case PartitionStrategy::randomized_oracle:
        out.push_back(partition::oracle_labels(batch.ground_truth[b],
                                               partition::OracleMode::randomized,
                                               partition_rng_));
        break;
    }
  }
  return out;
}

ad::Var Learner::loss_q(ad::Tape& tape, const EpisodeBatch& batch, const Matrix& targets) const {
  return *build(tape, batch, &targets, nullptr, true).q;
}

ad::Var Learner::loss_aux(ad::Tape& tape, const EpisodeBatch& batch, const Matrix& targets,
                          std::span<const partition::GroupLabels> partitions) const {
  const std::vector<partition::GroupLabels> parts(partitions.begin(), partitions.end());
  return *build(tape, batch, &targets, &parts, false).aux;
}

TrainMetrics Learner::train_step(const EpisodeBatch& batch) {
  const double lambda = cfg_.lambda;
  std::optional<std::vector<partition::GroupLabels>> parts;
  if (lambda > 0.0) parts = sample_partitions(batch);

  ad::Tape tape;
  Losses losses = build(tape, batch, nullptr, parts ? &*parts : nullptr, true);
  TrainMetrics m;
  m.loss_q = losses.q->value()[0];
  ad::Var total;
  if (lambda == 0.0) {
    total = *losses.q;
  } else if (lambda == 1.0) {
    total = *losses.aux;
  } else {
    total = ad::add(ad::scale(*losses.q, 1.0 - lambda), ad::scale(*losses.aux, lambda));
  }
  if (losses.aux) m.loss_aux = losses.aux->value()[0];
  m.loss = total.value()[0];

  live_->params().zero_grad();
  tape.backward(total);
  m.grad_norm = live_->params().grad_norm();
  apply_gradients();
  ++train_steps_;
  return m;
}

void Learner::apply_gradients() {
  ParamStore& store = live_->params();
  const double norm = store.grad_norm();
  if (norm > cfg_.grad_clip) store.scale_grads(cfg_.grad_clip / (norm + 1e-6));
  auto& params = store.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Parameter& p = params[i];
    Matrix& sq = square_avg_[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      sq[j] = cfg_.rms_alpha * sq[j] + (1.0 - cfg_.rms_alpha) * g * g;
      p.value[j] -= cfg_.lr * g / (std::sqrt(sq[j]) + cfg_.rms_eps);
    }
  }
}

bool Learner::update_target(std::size_t episode_count) {
  if (episode_count < last_target_update_ + cfg_.target_update_interval) return false;
  target_->params().copy_values_from(live_->params());
  last_target_update_ = episode_count;
  return true;
}

}  // namespace refil
