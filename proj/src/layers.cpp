#include "refil/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace refil {

ad::Parameter& ParamStore::add(std::string name, std::size_t rows, std::size_t cols,
                               std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  ad::Parameter& p = params_.emplace_back();
  p.name = std::move(name);
  p.value = Matrix(rows, cols);
  for (double& x : p.value) x = dist(rng);
  p.zero_grad();
  return p;
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

ad::Parameter* ParamStore::find(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double ParamStore::grad_norm() const {
  double total = 0.0;
  for (const auto& p : params_) {
    for (double g : p.grad) total += g * g;
  }
  return std::sqrt(total);
}

void ParamStore::scale_grads(double factor) {
  for (auto& p : params_) {
    for (double& g : p.grad) g *= factor;
  }
}

void ParamStore::set_frozen(bool frozen) {
  for (auto& p : params_) p.frozen = frozen;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  if (other.params_.size() != params_.size()) {
    throw DimensionError("copy_values_from: parameter count differs");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    require_same_shape(params_[i].value, other.params_[i].value, "copy_values_from");
    params_[i].value = other.params_[i].value;
  }
}

bool ParamStore::values_equal(const ParamStore& other) const {
  if (other.params_.size() != params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!(params_[i].value == other.params_[i].value)) return false;
  }
  return true;
}

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
               Rng& rng)
    : weight_(&store.add(name + ".weight", in, out, in, rng)),
      bias_(&store.add(name + ".bias", 1, out, in, rng)) {}

ad::Var Linear::operator()(ad::Tape& tape, ad::Var x) const {
  return ad::add_row(ad::matmul(x, tape.param(*weight_)), tape.param(*bias_));
}

GruCell::GruCell(ParamStore& store, const std::string& name, std::size_t input,
                 std::size_t hidden, Rng& rng)
    : hidden_(hidden),
      w_input_(&store.add(name + ".w_input", input, 3 * hidden, hidden, rng)),
      w_gates_(&store.add(name + ".w_gates", hidden, 2 * hidden, hidden, rng)),
      w_candidate_(&store.add(name + ".w_candidate", hidden, hidden, hidden, rng)),
      bias_(&store.add(name + ".bias", 1, 3 * hidden, hidden, rng)) {}

ad::Var GruCell::project_input(ad::Tape& tape, ad::Var x) const {
  return ad::add_row(ad::matmul(x, tape.param(*w_input_)), tape.param(*bias_));
}

ad::Var GruCell::step_projected(ad::Tape& tape, ad::Var projected, ad::Var h) const {
  const std::size_t hs = hidden_;
  if (projected.cols() != 3 * hs || h.cols() != hs || projected.rows() != h.rows()) {
    throw DimensionError("gru_cell: projected input " + shape_str(projected.value()) +
                         " and hidden " + shape_str(h.value()) + " for hidden size " +
                         std::to_string(hs));
  }
  ad::Var gates = ad::sigmoid(
      ad::add(ad::slice_cols(projected, 0, 2 * hs), ad::matmul(h, tape.param(*w_gates_))));
  ad::Var reset = ad::slice_cols(gates, 0, hs);
  ad::Var update = ad::slice_cols(gates, hs, 2 * hs);
  ad::Var candidate =
      ad::tanh(ad::add(ad::slice_cols(projected, 2 * hs, 3 * hs),
                       ad::matmul(ad::mul(reset, h), tape.param(*w_candidate_))));
  return ad::add(h, ad::mul(update, ad::sub(candidate, h)));
}

ad::Var GruCell::step(ad::Tape& tape, ad::Var x, ad::Var h) const {
  if (x.cols() != w_input_->value.rows()) {
    throw DimensionError("gru_cell: input width " + std::to_string(x.cols()) + ", expected " +
                         std::to_string(w_input_->value.rows()));
  }
  return step_projected(tape, project_input(tape, x), h);
}

}  // namespace refil
