#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "refil/attention.hpp"
#include "support.hpp"

namespace ad = refil::ad;
using refil::BinaryMatrix;
using refil::Matrix;
using testing::random_mask;
using testing::random_matrix;

namespace {

struct Fixture {
  refil::Rng rng{11};
  refil::ParamStore store;
  refil::MultiHeadAttention mha;
  Fixture(std::size_t d, std::size_t heads, std::size_t head_dim)
      : mha(store, "att", d, heads, head_dim, rng) {}
  const refil::AttentionParams& params() const { return mha.params(); }
};

Matrix run_mha(const Fixture& f, std::span<const std::size_t> queries, const Matrix& x,
               const BinaryMatrix& mask) {
  ad::Tape tape;
  return ad::Var(refil::multi_head_attention(tape, queries, tape.constant(x), mask, f.params()))
      .value();
}

}  // namespace

TEST_SUITE("attention") {

TEST_CASE("entity feedforward: identity, row independence, hand values") {
  ad::Tape tape;
  refil::Rng rng(1);
  const Matrix x = random_matrix(4, 3, rng);
  CHECK(refil::entity_ff(tape.constant(x), tape.constant(refil::identity(3)),
                         tape.constant(Matrix(1, 3)))
            .value() == x);
  Matrix dup = x;
  std::copy(x.row(1).begin(), x.row(1).end(), dup.row(3).begin());
  const Matrix w = random_matrix(3, 2, rng), b = random_matrix(1, 2, rng);
  const Matrix out = refil::entity_ff(tape.constant(dup), tape.constant(w), tape.constant(b)).value();
  CHECK(out(1, 0) == out(3, 0));
  CHECK(out(1, 1) == out(3, 1));

  const Matrix hx{{1, 2}, {0, -1}, {3, 0.5}};
  const Matrix hw{{2, 0}, {1, -1}};
  const Matrix hb{{0.5, 1}};
  const Matrix want{{4.5, -1}, {-0.5, 2}, {7, 0.5}};
  CHECK(refil::entity_ff(tape.constant(hx), tape.constant(hw), tape.constant(hb)).value() == want);
}

TEST_CASE("single unmasked entity returns its value row") {
  Fixture f(5, 1, 4);
  const Matrix x = random_matrix(4, 5, f.rng);
  const std::size_t q[] = {0, 2};
  const BinaryMatrix mask{{0, 0, 0, 1}, {0, 1, 0, 0}};
  ad::Tape tape;
  const Matrix out =
      refil::attention_head(tape, q, tape.constant(x), mask, f.params(), 0).value();
  const Matrix v = ad::matmul(tape.constant(x), tape.constant(f.params().value->value)).value();
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(out(0, c) == doctest::Approx(v(3, c)).epsilon(1e-15));
    CHECK(out(1, c) == doctest::Approx(v(1, c)).epsilon(1e-15));
  }
}

TEST_CASE("identical keys give the unweighted mean of values") {
  Fixture f(3, 1, 2);
  f.params().key->value.fill(0.0);
  const Matrix x = random_matrix(5, 3, f.rng);
  const std::size_t q[] = {1};
  ad::Tape tape;
  const Matrix out = refil::attention_head(tape, q, tape.constant(x), BinaryMatrix(1, 5, 1),
                                           f.params(), 0)
                         .value();
  const Matrix v = ad::matmul(tape.constant(x), tape.constant(f.params().value->value)).value();
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0;
    for (std::size_t e = 0; e < 5; ++e) mean += v(e, c) / 5;
    CHECK(out(0, c) == doctest::Approx(mean).epsilon(1e-14));
  }
}

TEST_CASE("masked-out entities cannot influence the output") {
  Fixture f(6, 4, 3);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix x = random_matrix(7, 6, f.rng);
    const std::size_t q[] = {0, 1, 2};
    const BinaryMatrix mask = random_mask(3, 7, f.rng);
    Matrix y = x;
    for (std::size_t e = 0; e < 7; ++e) {
      if (e < 3) continue;  // query rows stay
      bool seen = false;
      for (std::size_t a = 0; a < 3; ++a) seen = seen || mask(a, e);
      if (!seen) {
        for (auto& v : y.row(e)) v += 10.0;
      }
    }
    CHECK(run_mha(f, q, x, mask) == run_mha(f, q, y, mask));
  }
}

TEST_CASE("all-masked query row yields zeros") {
  Fixture f(4, 2, 2);
  const Matrix x = random_matrix(3, 4, f.rng);
  const std::size_t q[] = {0, 1};
  const Matrix out = run_mha(f, q, x, BinaryMatrix{{0, 0, 0}, {1, 1, 0}});
  for (std::size_t c = 0; c < 4; ++c) CHECK(out(0, c) == 0.0);
}

TEST_CASE("argument validation") {
  Fixture f(4, 2, 2);
  const Matrix x = random_matrix(3, 4, f.rng);
  ad::Tape tape;
  const std::size_t bad[] = {3};
  CHECK_THROWS_AS(refil::multi_head_attention(tape, bad, tape.constant(x), BinaryMatrix(1, 3, 1),
                                              f.params()),
                  std::out_of_range);
  const std::size_t q[] = {0};
  CHECK_THROWS_AS(refil::multi_head_attention(tape, q, tape.constant(x), BinaryMatrix(2, 3, 1),
                                              f.params()),
                  refil::DimensionError);
}

TEST_CASE("multi-head output is the concatenation of heads") {
  Fixture one(5, 1, 3);
  const Matrix x = random_matrix(4, 5, one.rng);
  const std::size_t q[] = {0, 3};
  const BinaryMatrix mask = random_mask(2, 4, one.rng, 0.7);
  ad::Tape tape;
  CHECK(run_mha(one, q, x, mask) ==
        refil::attention_head(tape, q, tape.constant(x), mask, one.params(), 0).value());

  Fixture two(5, 2, 3);
  for (auto* p : {two.params().query, two.params().key, two.params().value}) {
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t c = 0; c < 3; ++c) p->value(r, c + 3) = p->value(r, c);
    }
  }
  const Matrix out = run_mha(two, q, x, mask);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 3; ++c) CHECK(out(r, c) == out(r, c + 3));
  }
}

TEST_CASE("permuting non-query entities leaves the output unchanged") {
  Fixture f(4, 2, 3);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = random_matrix(6, 4, f.rng);
    const BinaryMatrix mask = random_mask(2, 6, f.rng, 0.6);
    const std::size_t q[] = {0, 1};
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin() + 2, perm.end(), f.rng);
    Matrix px(6, 4);
    BinaryMatrix pm(2, 6);
    for (std::size_t e = 0; e < 6; ++e) {
      std::copy(x.row(perm[e]).begin(), x.row(perm[e]).end(), px.row(e).begin());
      for (std::size_t a = 0; a < 2; ++a) pm(a, e) = mask(a, perm[e]);
    }
    const Matrix a = run_mha(f, q, x, mask), b = run_mha(f, q, px, pm);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
}

TEST_CASE("batched module matches the reference composition per state and variant") {
  Fixture f(5, 2, 3);
  refil::EntityLayout layout{2, 3, 4, {0, 2}};
  const std::size_t variants = 3;
  const Matrix x = random_matrix(layout.rows(), 5, f.rng);
  const BinaryMatrix masks = random_mask(layout.n_blocks() * variants * 2, 4, f.rng);
  ad::Tape tape;
  const Matrix fused = f.mha.forward(tape, tape.constant(x), layout, masks, variants).value();
  const auto dims = layout.attention_dims(variants, 2, 3);
  for (std::size_t j = 0; j < layout.n_blocks(); ++j) {
    Matrix state(4, 5, std::vector<double>(x.begin() + j * 20, x.begin() + (j + 1) * 20));
    for (std::size_t v = 0; v < variants; ++v) {
      BinaryMatrix m(2, 4);
      const std::size_t r0 = dims.out_row(j, v, 0);
      std::copy(masks.begin() + r0 * 4, masks.begin() + (r0 + 2) * 4, m.begin());
      const Matrix ref = run_mha(f, layout.agents, state, m);
      for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t c = 0; c < 6; ++c) {
          CHECK(fused(dims.out_row(j, v, i), c) == doctest::Approx(ref(i, c)).epsilon(1e-13));
        }
      }
    }
  }
}

TEST_CASE("batched module gradients") {
  Fixture f(3, 2, 2);
  refil::EntityLayout layout{1, 2, 3, {0, 1}};
  BinaryMatrix masks = random_mask(layout.n_blocks() * 2 * 2, 3, f.rng);
  masks(2, 0) = masks(2, 1) = masks(2, 2) = 0;
  const Matrix x = random_matrix(layout.rows(), 3, f.rng);
  const Matrix w = random_matrix(masks.rows(), 4, f.rng);
  auto loss = [&](ad::Tape& tape) {
    return ad::sum(ad::mul_const(f.mha.forward(tape, tape.constant(x), layout, masks, 2), w));
  };
  CHECK(testing::param_grad_error(f.store, loss, f.rng) < 1e-4);
}

}  // TEST_SUITE
