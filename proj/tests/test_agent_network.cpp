#include <doctest.h>

#include <numeric>

#include "refil/agent_network.hpp"
#include "refil/partition.hpp"
#include "support.hpp"

namespace ad = refil::ad;
namespace pt = refil::partition;
using refil::BinaryMatrix;
using refil::Matrix;
using testing::random_mask;
using testing::random_matrix;

namespace {

struct Net {
  refil::Rng rng;
  refil::ParamStore store;
  refil::AgentNetwork net;
  Net(std::size_t d, std::size_t n_actions, std::uint64_t seed = 3)
      : rng(seed), net(store, refil::AgentNetworkConfig{d, n_actions, 8, 2, 4}, rng) {}
};

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// Utilities for every step of a sequence, computed step by step.
std::vector<Matrix> rollout(const refil::AgentNetwork& net, const std::vector<Matrix>& states,
                            std::span<const std::size_t> agents, const std::vector<BinaryMatrix>& masks) {
  std::vector<Matrix> out;
  auto state = refil::RecurrentState::zeros(agents.size(), net.config().hidden_dim);
  for (std::size_t t = 0; t < states.size(); ++t) {
    ad::Tape tape(false);
    auto [q, h] = net.utilities(tape, states[t], agents, masks[t], state);
    out.push_back(q.value());
    state.hidden = h;
  }
  return out;
}

}  // namespace

TEST_SUITE("agent_network") {

TEST_CASE("unobserved entities never reach an agent's utilities") {
  Net n(5, 3);
  const auto agents = iota(3);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Matrix> states, perturbed;
    std::vector<BinaryMatrix> masks;
    for (int t = 0; t < 10; ++t) {
      states.push_back(random_matrix(6, 5, n.rng));
      BinaryMatrix m = random_mask(3, 6, n.rng);
      for (std::size_t a = 0; a < 3; ++a) m(a, a) = 1;
      m(0, 4) = 0;
      m(0, 5) = 0;
      masks.push_back(m);
      Matrix p = states.back();
      for (std::size_t e = 3; e < 6; ++e) {
        if (!m(0, e)) {
          for (auto& x : p.row(e)) x += 5.0;
        }
      }
      perturbed.push_back(p);
    }
    const auto a = rollout(n.net, states, agents, masks);
    const auto b = rollout(n.net, perturbed, agents, masks);
    for (std::size_t t = 0; t < a.size(); ++t) {
      for (std::size_t u = 0; u < 3; ++u) CHECK(a[t](0, u) == b[t](0, u));
    }
  }
}

TEST_CASE("all-ones partition reproduces the unpartitioned utilities exactly") {
  Net n(4, 3);
  const auto agents = iota(2);
  auto s = refil::RecurrentState::zeros(2, 4), si = s, so = s;
  for (int t = 0; t < 10; ++t) {
    const Matrix x = random_matrix(5, 4, n.rng);
    BinaryMatrix obs = random_mask(2, 5, n.rng);
    obs(0, 0) = obs(1, 1) = 1;
    const auto g = pt::apply_observability(
        pt::build_group_masks(pt::PartitionVector(5, 1), agents), obs);
    ad::Tape tape(false);
    auto out = n.net.triple_pass(tape, x, agents, obs, g.in_group, g.out_group, s, si, so);
    CHECK(out.q.value() == out.q_in.value());
    CHECK(out.state.hidden == out.state_in.hidden);
    s = out.state;
    si = out.state_in;
    so = out.state_out;
  }
}

TEST_CASE("swapping group labels leaves in- and out-group utilities unchanged") {
  Net n(4, 3);
  const auto agents = iota(2);
  const Matrix x = random_matrix(5, 4, n.rng);
  const BinaryMatrix obs(2, 5, 1);
  const auto m = pt::sample_partition_with(5, 0.5, n.rng);
  pt::PartitionVector flipped(5);
  for (std::size_t e = 0; e < 5; ++e) flipped[e] = 1 - m[e];
  const auto s = refil::RecurrentState::zeros(2, 4);
  ad::Tape tape(false);
  const auto g1 = pt::build_group_masks(m, agents), g2 = pt::build_group_masks(flipped, agents);
  auto a = n.net.triple_pass(tape, x, agents, obs, g1.in_group, g1.out_group, s, s, s);
  auto b = n.net.triple_pass(tape, x, agents, obs, g2.in_group, g2.out_group, s, s, s);
  CHECK(a.q_in.value() == b.q_in.value());
  CHECK(a.q_out.value() == b.q_out.value());
}

TEST_CASE("in-group utilities equal utilities on the agent's own sub-state") {
  Net n(4, 3);
  const auto agents = iota(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = random_matrix(3, 4, n.rng);
    const auto m = pt::sample_partition_with(3, 0.5, n.rng);
    const BinaryMatrix obs(2, 3, 1);
    const auto g = pt::build_group_masks(m, agents);
    const auto s = refil::RecurrentState::zeros(2, 4);
    ad::Tape tape(false);
    const Matrix q_in =
        n.net.triple_pass(tape, x, agents, obs, g.in_group, g.out_group, s, s, s).q_in.value();
    for (std::size_t a = 0; a < 2; ++a) {
      Matrix sub = x;
      BinaryMatrix mask(1, 3);
      for (std::size_t e = 0; e < 3; ++e) {
        if (m[e] == m[a]) {
          mask(0, e) = 1;
        } else {
          for (auto& v : sub.row(e)) v = 0.0;
        }
      }
      const std::size_t own[] = {a};
      const Matrix q = n.net.utilities(tape, sub, own, mask, refil::RecurrentState::zeros(1, 4))
                           .first.value();
      for (std::size_t u = 0; u < 3; ++u) CHECK(q(0, u) == doctest::Approx(q_in(a, u)).epsilon(1e-13));
    }
  }
}

TEST_CASE("an empty mask row still yields finite utilities") {
  Net n(4, 3);
  const auto agents = iota(2);
  const Matrix x = random_matrix(4, 4, n.rng);
  BinaryMatrix mask(2, 4, 1);
  for (std::size_t e = 0; e < 4; ++e) mask(1, e) = 0;
  ad::Tape tape(false);
  const Matrix q =
      n.net.utilities(tape, x, agents, mask, refil::RecurrentState::zeros(2, 4)).first.value();
  for (double v : q) CHECK(std::isfinite(v));
  // The empty row depends only on the agent's own encoding.
  Matrix y = x;
  for (auto& v : y.row(0)) v += 1.0;
  const Matrix q2 =
      n.net.utilities(tape, y, agents, mask, refil::RecurrentState::zeros(2, 4)).first.value();
  for (std::size_t u = 0; u < 3; ++u) CHECK(q(1, u) == q2(1, u));
}

TEST_CASE("greedy action selection") {
  CHECK(refil::greedy_actions(Matrix{{0.1, 0.5, 0.2}}, BinaryMatrix(1, 3, 1)) ==
        std::vector<std::size_t>{1});
  CHECK(refil::greedy_actions(Matrix{{0.1, 0.5, 0.2}}, BinaryMatrix{{1, 0, 1}}) ==
        std::vector<std::size_t>{2});
  CHECK(refil::greedy_actions(Matrix{{1, 1, 1}, {2, 3, 3}}, BinaryMatrix(2, 3, 1)) ==
        std::vector<std::size_t>{0, 1});
  CHECK_THROWS_AS(refil::greedy_actions(Matrix{{1, 2}}, BinaryMatrix{{0, 0}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(refil::greedy_actions(Matrix{{1, 2}}, BinaryMatrix{{1, 1, 1}}),
                  refil::DimensionError);
}

TEST_CASE("batched sequence forward equals separate step-by-step passes") {
  Net n(4, 3);
  const std::size_t steps = 4, batch = 2, ne = 5, na = 2, variants = 3;
  refil::EntityLayout layout{steps, batch, ne, {0, 2}};
  const Matrix x = random_matrix(layout.rows(), 4, n.rng);
  const BinaryMatrix masks = random_mask(steps * variants * batch * na, ne, n.rng);
  refil::SequenceInput in;
  in.entities = &x;
  in.layout = layout;
  in.masks = &masks;
  in.variants = variants;
  ad::Tape tape(false);
  const Matrix q = n.net.forward(tape, in).q.value();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t v = 0; v < variants; ++v) {
      std::vector<Matrix> states;
      std::vector<BinaryMatrix> ms;
      for (std::size_t t = 0; t < steps; ++t) {
        const std::size_t block = t * batch + b;
        states.emplace_back(ne, 4, std::vector<double>(x.begin() + block * ne * 4,
                                                       x.begin() + (block + 1) * ne * 4));
        const std::size_t r0 = ((t * variants + v) * batch + b) * na;
        BinaryMatrix m(na, ne);
        std::copy(masks.begin() + r0 * ne, masks.begin() + (r0 + na) * ne, m.begin());
        ms.push_back(m);
      }
      const auto ref = rollout(n.net, states, layout.agents, ms);
      for (std::size_t t = 0; t < steps; ++t) {
        const std::size_t r0 = ((t * variants + v) * batch + b) * na;
        for (std::size_t i = 0; i < na; ++i) {
          for (std::size_t u = 0; u < 3; ++u) {
            CHECK(q(r0 + i, u) == doctest::Approx(ref[t](i, u)).epsilon(1e-13));
          }
        }
      }
    }
  }
}

TEST_CASE("parameter gradients through a short sequence") {
  Net n(3, 2);
  refil::EntityLayout layout{3, 2, 3, {0, 1}};
  const Matrix x = random_matrix(layout.rows(), 3, n.rng);
  BinaryMatrix masks = random_mask(3 * 2 * 2 * 2, 3, n.rng);
  for (std::size_t e = 0; e < 3; ++e) masks(5, e) = 0;
  const Matrix w = random_matrix(masks.rows(), 2, n.rng);
  auto loss = [&](ad::Tape& tape) {
    refil::SequenceInput in;
    in.entities = &x;
    in.layout = layout;
    in.masks = &masks;
    in.variants = 2;
    return ad::sum(ad::mul_const(n.net.forward(tape, in).q, w));
  };
  CHECK(testing::param_grad_error(n.store, loss, n.rng) < 1e-4);
}

TEST_CASE("all three passes share parameters") {
  Net n(4, 3);
  const auto agents = iota(2);
  const Matrix x = random_matrix(4, 4, n.rng);
  const BinaryMatrix obs(2, 4, 1);
  const auto g = pt::build_group_masks(pt::PartitionVector{1, 0, 1, 0}, agents);
  const auto s = refil::RecurrentState::zeros(2, 4);
  ad::Tape t1(false);
  auto before = n.net.triple_pass(t1, x, agents, obs, g.in_group, g.out_group, s, s, s);
  n.store.find("agent.head.bias")->value(0, 1) += 1.0;
  ad::Tape t2(false);
  auto after = n.net.triple_pass(t2, x, agents, obs, g.in_group, g.out_group, s, s, s);
  for (auto [b, a] : {std::pair{before.q, after.q}, {before.q_in, after.q_in},
                      {before.q_out, after.q_out}}) {
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(a.value()(i, 1) == doctest::Approx(b.value()(i, 1) + 1.0));
      CHECK(a.value()(i, 0) == b.value()(i, 0));
    }
  }
}

TEST_CASE("relabeling non-agent entities leaves utilities unchanged") {
  Net n(4, 3);
  const auto agents = iota(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix x = random_matrix(6, 4, n.rng);
    const BinaryMatrix mask = random_mask(2, 6, n.rng);
    std::vector<std::size_t> perm = {0, 1, 5, 2, 4, 3};
    Matrix px(6, 4);
    BinaryMatrix pm(2, 6);
    for (std::size_t e = 0; e < 6; ++e) {
      std::copy(x.row(perm[e]).begin(), x.row(perm[e]).end(), px.row(e).begin());
      for (std::size_t a = 0; a < 2; ++a) pm(a, e) = mask(a, perm[e]);
    }
    ad::Tape tape(false);
    const auto s = refil::RecurrentState::zeros(2, 4);
    const Matrix a = n.net.utilities(tape, x, agents, mask, s).first.value();
    const Matrix b = n.net.utilities(tape, px, agents, pm, s).first.value();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
}

TEST_CASE("input validation") {
  Net n(4, 3);
  const auto agents = iota(2);
  ad::Tape tape(false);
  CHECK_THROWS_AS(n.net.utilities(tape, Matrix(3, 4), agents, BinaryMatrix(2, 3, 1),
                                  refil::RecurrentState{}),
                  std::logic_error);
  CHECK_THROWS_AS(n.net.utilities(tape, Matrix(3, 5), agents, BinaryMatrix(2, 3, 1),
                                  refil::RecurrentState::zeros(2, 4)),
                  refil::DimensionError);
  CHECK_THROWS_AS(n.net.utilities(tape, Matrix(3, 4), agents, BinaryMatrix(1, 3, 1),
                                  refil::RecurrentState::zeros(2, 4)),
                  refil::DimensionError);
  refil::ParamStore s;
  CHECK_THROWS_AS(refil::AgentNetwork(s, refil::AgentNetworkConfig{4, 3, 9, 2, 4}, n.rng),
                  std::invalid_argument);
}

}  // TEST_SUITE
