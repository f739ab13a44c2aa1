#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <random>
#include <string>

#include "refil/autodiff.hpp"

namespace refil {

using Rng = std::mt19937_64;

/// Owns a model's parameters. Addresses are stable for the store's lifetime.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  /// New parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  ad::Parameter& add(std::string name, std::size_t rows, std::size_t cols, std::size_t fan_in,
                     Rng& rng);

  std::deque<ad::Parameter>& params() { return params_; }
  const std::deque<ad::Parameter>& params() const { return params_; }
  std::size_t count() const;
  ad::Parameter* find(const std::string& name);

  void zero_grad();
  double grad_norm() const;
  void scale_grads(double factor);
  void set_frozen(bool frozen);
  /// Whole copy of values; the two stores must share the same layout.
  void copy_values_from(const ParamStore& other);
  bool values_equal(const ParamStore& other) const;

 private:
  std::deque<ad::Parameter> params_;
};

/// y = x·W + b, applied row-wise (the entity-wise feedforward layer).
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng);

  ad::Var operator()(ad::Tape& tape, ad::Var x) const;
  ad::Parameter& weight() const { return *weight_; }
  ad::Parameter& bias() const { return *bias_; }

 private:
  ad::Parameter* weight_ = nullptr;
  ad::Parameter* bias_ = nullptr;
};

/// Gated recurrent unit:
///   r = σ(x Wr + h Ur + br),  z = σ(x Wz + h Uz + bz)
///   n = tanh(x Wn + (r ⊙ h) Un + bn),  h' = (1 − z) ⊙ h + z ⊙ n = h + z ⊙ (n − h)
/// Input weights for the three gates are stored side by side in one matrix
/// so that a whole sequence can be projected with a single product.
class GruCell {
 public:
  GruCell() = default;
  GruCell(ParamStore& store, const std::string& name, std::size_t input, std::size_t hidden,
          Rng& rng);

  std::size_t hidden_size() const { return hidden_; }
  /// x·[Wr Wz Wn] + b for any number of rows.
  ad::Var project_input(ad::Tape& tape, ad::Var x) const;
  ad::Var step_projected(ad::Tape& tape, ad::Var projected, ad::Var h) const;
  ad::Var step(ad::Tape& tape, ad::Var x, ad::Var h) const;

  ad::Parameter& input_weight() const { return *w_input_; }
  ad::Parameter& gate_weight() const { return *w_gates_; }
  ad::Parameter& candidate_weight() const { return *w_candidate_; }
  ad::Parameter& bias() const { return *bias_; }

 private:
  std::size_t hidden_ = 0;
  ad::Parameter* w_input_ = nullptr;      // input × 3h
  ad::Parameter* w_gates_ = nullptr;      // h × 2h (reset, update)
  ad::Parameter* w_candidate_ = nullptr;  // h × h
  ad::Parameter* bias_ = nullptr;         // 1 × 3h
};

}  // namespace refil
