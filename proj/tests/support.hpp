#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "refil/autodiff.hpp"
#include "refil/layers.hpp"
#include "refil/learner.hpp"

namespace testing {

using refil::BinaryMatrix;
using refil::Matrix;
using refil::Rng;

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (auto& x : m) x = u(rng);
  return m;
}

inline BinaryMatrix random_mask(std::size_t r, std::size_t c, Rng& rng, double p = 0.5) {
  std::bernoulli_distribution b(p);
  BinaryMatrix m(r, c);
  for (auto& x : m) x = b(rng) ? 1 : 0;
  return m;
}

/// |a − n| / max(|a|, |n|, 1e-6).
inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

using InputLoss = std::function<refil::ad::Var(refil::ad::Tape&, std::span<const refil::ad::Var>)>;

/// Max relative error between backprop and central differences, over every
/// entry of every input.
inline double input_grad_error(std::vector<Matrix> inputs, const InputLoss& f, double h = 1e-5) {
  std::vector<Matrix> analytic;
  {
    refil::ad::Tape tape;
    std::vector<refil::ad::Var> vars;
    for (const auto& m : inputs) vars.push_back(tape.input(m));
    refil::ad::Var loss = f(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.grad(v.id()));
  }
  auto eval = [&]() {
    refil::ad::Tape tape(false);
    std::vector<refil::ad::Var> vars;
    for (const auto& m : inputs) vars.push_back(tape.constant(m));
    return f(tape, vars).value()[0];
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double x = inputs[i][j];
      inputs[i][j] = x + h;
      const double up = eval();
      inputs[i][j] = x - h;
      const double down = eval();
      inputs[i][j] = x;
      worst = std::max(worst, rel_error(analytic[i][j], (up - down) / (2 * h)));
    }
  }
  return worst;
}

/// Same check against parameter gradients; `per_param` entries of each
/// parameter are probed (all of them when 0).
inline double param_grad_error(refil::ParamStore& store,
                               const std::function<refil::ad::Var(refil::ad::Tape&)>& f, Rng& rng,
                               std::size_t per_param = 0, double h = 1e-5) {
  store.zero_grad();
  {
    refil::ad::Tape tape;
    tape.backward(f(tape));
  }
  auto eval = [&]() {
    refil::ad::Tape tape(false);
    return f(tape).value()[0];
  };
  double worst = 0.0;
  for (auto& p : store.params()) {
    if (p.frozen) continue;
    std::vector<std::size_t> idx(p.value.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (per_param > 0 && per_param < idx.size()) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(per_param);
    }
    for (std::size_t j : idx) {
      const double x = p.value[j];
      p.value[j] = x + h;
      const double up = eval();
      p.value[j] = x - h;
      const double down = eval();
      p.value[j] = x;
      worst = std::max(worst, rel_error(p.grad[j], (up - down) / (2 * h)));
    }
  }
  return worst;
}

/// Small network sizes for gradient checks and fast learner tests.
inline refil::ModelConfig toy_model(std::size_t feature_dim, std::size_t n_actions) {
  refil::ModelConfig m;
  m.agent = refil::AgentNetworkConfig{feature_dim, n_actions, 8, 2, 4};
  m.mixer = refil::MixerConfig{feature_dim, 8, 2, 4};
  return m;
}

/// Random episode with `na` agents among `ne` entities; observability keeps
/// self-visibility and hides entities at random.
inline refil::Episode random_episode(std::size_t ne, std::size_t na, std::size_t d,
                                     std::size_t n_actions, std::size_t length, bool terminal,
                                     Rng& rng, double hide = 0.3) {
  refil::Episode ep;
  std::uniform_int_distribution<std::size_t> act(0, n_actions - 1);
  std::uniform_real_distribution<double> rew(-1.0, 1.0);
  std::bernoulli_distribution hidden(hide);
  std::vector<std::size_t> agents(na);
  for (std::size_t a = 0; a < na; ++a) agents[a] = a;
  for (std::size_t t = 0; t <= length; ++t) {
    refil::env::Observation o;
    o.entities = random_matrix(ne, d, rng);
    o.observability = BinaryMatrix(na, ne, 1);
    for (std::size_t a = 0; a < na; ++a) {
      for (std::size_t e = 0; e < ne; ++e) {
        if (e != a && hidden(rng)) o.observability(a, e) = 0;
      }
    }
    o.available = BinaryMatrix(na, n_actions, 1);
    o.agents = agents;
    o.active.assign(ne, 1);
    ep.states.push_back(std::move(o));
    if (t == length) break;
    std::vector<std::size_t> u(na);
    for (auto& x : u) x = act(rng);
    ep.actions.push_back(u);
    ep.rewards.push_back(rew(rng));
    ep.terminated.push_back(terminal && t + 1 == length ? 1 : 0);
  }
  std::uniform_int_distribution<int> grp(0, 1);
  for (std::size_t e = 0; e < ne; ++e) ep.ground_truth.push_back(grp(rng));
  ep.win = terminal;
  return ep;
}

}  // namespace testing
