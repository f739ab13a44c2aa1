#include "refil/autodiff.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace refil::ad {

namespace {

void check(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

void same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("operands live on different tapes");
}

template <typename F>
Var unary(Var a, Matrix out, F&& local_grad) {
  // local_grad(input, output, i) returns d out[i] / d in[i].
  Var inputs[] = {a};
  if (!a.requires_grad()) return a.tape().record(std::move(out), inputs, nullptr);
  const std::size_t in = a.id();
  return a.tape().record(std::move(out), inputs,
                         [in, local_grad](Tape& t, std::size_t self) {
                           const Matrix& x = t.value(in);
                           const Matrix& y = t.value(self);
                           const Matrix& g = t.grad(self);
                           Matrix& gx = t.grad(in);
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             gx[i] += g[i] * local_grad(x[i], y[i]);
                           }
                         });
}

void accumulate(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::input(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.value = p.value;
  n.requires_grad = track_ && !p.frozen;
  n.param = n.requires_grad ? &p : nullptr;
  nodes_.push_back(std::move(n));
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::span<const Var> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw std::logic_error("operand from a different tape");
    n.requires_grad = n.requires_grad || v.requires_grad();
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Matrix& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw std::logic_error("loss from a different tape");
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw DimensionError("backward: loss must be scalar, got " + shape_str(loss.value()));
  }
  for (Node& n : nodes_) n.grad = Matrix();
  if (!requires_grad(loss.id())) return;
  grad(loss.id())[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) {
      if (n.param->grad.empty()) n.param->zero_grad();
      accumulate(n.param->grad, n.grad);
    }
  }
}

Var matmul(Var a, Var b) {
  same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  check(av.cols() == bv.rows(),
        "matmul: inner dimensions " + shape_str(av) + " · " + shape_str(bv));
  Matrix out(av.rows(), bv.cols());
  kernels::parallel::gemm(av.rows(), bv.cols(), av.cols(), av.data(), bv.data(), out.data(),
                          false);
  Var inputs[] = {a, b};
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), inputs, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& x = t.value(ia);
    const Matrix& y = t.value(ib);
    if (t.requires_grad(ia)) {
      const Matrix yt = refil::transpose(y);
      kernels::parallel::gemm(g.rows(), yt.cols(), g.cols(), g.data(), yt.data(),
                              t.grad(ia).data(), true);
    }
    if (t.requires_grad(ib)) {
      kernels::parallel::gemm_tn(x.cols(), g.cols(), x.rows(), x.data(), g.data(),
                                 t.grad(ib).data(), true);
    }
  });
}

Var add(Var a, Var b) {
  same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  accumulate(out, b.value());
  Var inputs[] = {a, b};
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), inputs, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) accumulate(t.grad(ia), g);
    if (t.requires_grad(ib)) accumulate(t.grad(ib), g);
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  Var inputs[] = {a, b};
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), inputs, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) accumulate(t.grad(ia), g);
    if (t.requires_grad(ib)) {
      Matrix& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  Var inputs[] = {a, b};
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), inputs, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Matrix& ga = t.grad(ia);
      const Matrix& y = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (t.requires_grad(ib)) {
      Matrix& gb = t.grad(ib);
      const Matrix& x = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

Var scale(Var a, double s) {
  Matrix out = a.value();
  for (double& x : out) x *= s;
  return unary(a, std::move(out), [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  Matrix out = a.value();
  for (double& x : out) x += s;
  return unary(a, std::move(out), [](double, double) { return 1.0; });
}

Var add_row(Var a, Var row) {
  same_tape(a, row);
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  check(rv.rows() == 1 && rv.cols() == av.cols(),
        "add_row: " + shape_str(av) + " + " + shape_str(rv));
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += rv[c];
  }
  Var inputs[] = {a, row};
  const std::size_t ia = a.id(), ir = row.id();
  return a.tape().record(std::move(out), inputs, [ia, ir](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) accumulate(t.grad(ia), g);
    if (t.requires_grad(ir)) {
      Matrix& gr = t.grad(ir);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < g.cols(); ++c) gr[c] += g(r, c);
      }
    }
  });
}

Var mul_const(Var a, const Matrix& c) {
  require_same_shape(a.value(), c, "mul_const");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  Var inputs[] = {a};
  const std::size_t ia = a.id();
  auto factor = std::make_shared<Matrix>(c);
  return a.tape().record(std::move(out), inputs, [ia, factor](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*factor)[i];
  });
}

Var relu(Var a) {
  Matrix out = a.value();
  for (double& x : out) x = x > 0.0 ? x : 0.0;
  return unary(a, std::move(out), [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var elu(Var a) {
  Matrix out = a.value();
  for (double& x : out) x = x > 0.0 ? x : std::expm1(x);
  return unary(a, std::move(out), [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

Var sigmoid(Var a) {
  Matrix out = a.value();
  for (double& x : out) x = 1.0 / (1.0 + std::exp(-x));
  return unary(a, std::move(out), [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  Matrix out = a.value();
  for (double& x : out) x = std::tanh(x);
  return unary(a, std::move(out), [](double, double y) { return 1.0 - y * y; });
}

Var square(Var a) {
  Matrix out = a.value();
  for (double& x : out) x *= x;
  return unary(a, std::move(out), [](double x, double) { return 2.0 * x; });
}

Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value()) s += x;
  Var inputs[] = {a};
  const std::size_t ia = a.id();
  return a.tape().record(Matrix::scalar(s), inputs, [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& x : t.grad(ia)) x += g;
  });
}

Var mean(Var a) {
  check(a.value().size() > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var masked_softmax(Var logits, const BinaryMatrix& mask) {
  const Matrix& x = logits.value();
  require_same_shape(x, mask, "masked_softmax");
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double best = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      if (!mask(r, c)) continue;
      best = std::max(best, x(r, c));
      any = true;
    }
    if (!any) continue;
    double total = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      if (!mask(r, c)) continue;
      out(r, c) = std::exp(x(r, c) - best);
      total += out(r, c);
    }
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) /= total;
  }
  Var inputs[] = {logits};
  const std::size_t in = logits.id();
  return logits.tape().record(std::move(out), inputs, [in](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(in);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dotp = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dotp += y(r, c) * g(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) gx(r, c) += y(r, c) * (g(r, c) - dotp);
    }
  });
}

Var softmax_rows(Var logits) {
  return masked_softmax(logits, BinaryMatrix(logits.rows(), logits.cols(), 1));
}

Var transpose(Var a) {
  Var inputs[] = {a};
  const std::size_t ia = a.id();
  return a.tape().record(refil::transpose(a.value()), inputs, [ia](Tape& t, std::size_t self) {
    accumulate(t.grad(ia), refil::transpose(t.grad(self)));
  });
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  check(rows * cols == a.value().size(),
        "reshape: " + shape_str(a.value()) + " to " + shape_str(rows, cols));
  std::vector<double> data(a.value().begin(), a.value().end());
  Var inputs[] = {a};
  const std::size_t ia = a.id();
  return a.tape().record(Matrix(rows, cols, std::move(data)), inputs,
                         [ia](Tape& t, std::size_t self) {
                           Matrix& ga = t.grad(ia);
                           const Matrix& g = t.grad(self);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         });
}

Var concat_cols(std::span<const Var> parts) {
  check(!parts.empty(), "concat_cols: no operands");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    check(p.rows() == rows, "concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Matrix& v = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(v.row(r).begin(), v.row(r).end(), out.row(r).begin() + off);
    }
    ids.push_back(p.id());
    offsets.push_back(off);
    off += v.cols();
  }
  return parts[0].tape().record(
      std::move(out), parts, [ids, offsets](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          Matrix& gp = t.grad(ids[k]);
          for (std::size_t r = 0; r < gp.rows(); ++r) {
            for (std::size_t c = 0; c < gp.cols(); ++c) gp(r, c) += g(r, offsets[k] + c);
          }
        }
      });
}

Var concat_rows(std::span<const Var> parts) {
  check(!parts.empty(), "concat_rows: no operands");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    check(p.cols() == cols, "concat_rows: column count mismatch");
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  std::vector<std::size_t> ids, offsets;
  for (const Var& p : parts) {
    offsets.push_back(data.size());
    ids.push_back(p.id());
    data.insert(data.end(), p.value().begin(), p.value().end());
  }
  return parts[0].tape().record(
      Matrix(rows, cols, std::move(data)), parts, [ids, offsets](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          Matrix& gp = t.grad(ids[k]);
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
        }
      });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Matrix& v = a.value();
  check(begin <= end && end <= v.rows(), "slice_rows: range out of bounds");
  const std::size_t cols = v.cols();
  std::vector<double> data(v.data() + begin * cols, v.data() + end * cols);
  Var inputs[] = {a};
  const std::size_t ia = a.id();
  return a.tape().record(Matrix(end - begin, cols, std::move(data)), inputs,
                         [ia, begin, cols](Tape& t, std::size_t self) {
                           const Matrix& g = t.grad(self);
                           double* ga = t.grad(ia).data() + begin * cols;
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Matrix& v = a.value();
  check(begin <= end && end <= v.cols(), "slice_cols: range out of bounds");
  Matrix out(v.rows(), end - begin);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = v(r, c);
  }
  Var inputs[] = {a};
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), inputs, [ia, begin](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, begin + c) += g(r, c);
    }
  });
}

Var gather_rows(Var a, std::span<const std::size_t> index) {
  const Matrix& v = a.value();
  Matrix out(index.size(), v.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    check(index[i] < v.rows(), "gather_rows: index " + std::to_string(index[i]) +
                                   " out of range for " + shape_str(v));
    std::copy(v.row(index[i]).begin(), v.row(index[i]).end(), out.row(i).begin());
  }
  Var inputs[] = {a};
  const std::size_t ia = a.id();
  auto idx = std::make_shared<std::vector<std::size_t>>(index.begin(), index.end());
  return a.tape().record(std::move(out), inputs, [ia, idx](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      for (std::size_t c = 0; c < g.cols(); ++c) ga((*idx)[i], c) += g(i, c);
    }
  });
}

Var block_mean_rows(Var a, std::size_t block) {
  const Matrix& v = a.value();
  check(block > 0 && v.rows() % block == 0, "block_mean_rows: rows not divisible by block");
  const std::size_t n = v.rows() / block;
  const double inv = 1.0 / static_cast<double>(block);
  Matrix out(n, v.cols());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < block; ++r) {
      for (std::size_t c = 0; c < v.cols(); ++c) out(i, c) += v(i * block + r, c);
    }
    for (std::size_t c = 0; c < v.cols(); ++c) out(i, c) *= inv;
  }
  Var inputs[] = {a};
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), inputs, [ia, block, inv](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (std::size_t r = 0; r < ga.rows(); ++r) {
      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += g(r / block, c) * inv;
    }
  });
}

Var row_mean(Var a) {
  const Matrix& v = a.value();
  check(v.cols() > 0, "row_mean: no columns");
  const double inv = 1.0 / static_cast<double>(v.cols());
  Matrix out(v.rows(), 1);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    double s = 0.0;
    for (double x : v.row(r)) s += x;
    out[r] = s * inv;
  }
  Var inputs[] = {a};
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), inputs, [ia, inv](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (std::size_t r = 0; r < ga.rows(); ++r) {
      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += g[r] * inv;
    }
  });
}

Var pick_cols(Var a, std::span<const std::size_t> index) {
  const Matrix& v = a.value();
  check(index.size() == v.rows(), "pick_cols: one index per row required");
  Matrix out(v.rows(), 1);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    check(index[r] < v.cols(), "pick_cols: column index out of range");
    out[r] = v(r, index[r]);
  }
  Var inputs[] = {a};
  const std::size_t ia = a.id();
  auto idx = std::make_shared<std::vector<std::size_t>>(index.begin(), index.end());
  return a.tape().record(std::move(out), inputs, [ia, idx](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (std::size_t r = 0; r < g.rows(); ++r) ga(r, (*idx)[r]) += g[r];
  });
}

Var row_dot(Var a, Var b) {
  same_tape(a, b);
  require_same_shape(a.value(), b.value(), "row_dot");
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  Matrix out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) s += x(r, c) * y(r, c);
    out[r] = s;
  }
  Var inputs[] = {a, b};
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), inputs, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& x = t.value(ia);
    const Matrix& y = t.value(ib);
    if (t.requires_grad(ia)) {
      Matrix& gx = t.grad(ia);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) gx(r, c) += g[r] * y(r, c);
      }
    }
    if (t.requires_grad(ib)) {
      Matrix& gy = t.grad(ib);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) gy(r, c) += g[r] * x(r, c);
      }
    }
  });
}

Var block_vecmat(Var x, Var w) {
  same_tape(x, w);
  const Matrix& xv = x.value();
  const Matrix& wv = w.value();
  const std::size_t n = xv.rows(), k = xv.cols(), h = wv.cols();
  check(wv.rows() == n * k,
        "block_vecmat: weights " + shape_str(wv) + " for inputs " + shape_str(xv));
  Matrix out(n, h);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double xij = xv(i, j);
      for (std::size_t c = 0; c < h; ++c) out(i, c) += xij * wv(i * k + j, c);
    }
  }
  Var inputs[] = {x, w};
  const std::size_t ix = x.id(), iw = w.id();
  return x.tape().record(std::move(out), inputs, [ix, iw, n, k, h](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& xv = t.value(ix);
    const Matrix& wv = t.value(iw);
    if (t.requires_grad(ix)) {
      Matrix& gx = t.grad(ix);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < h; ++c) s += g(i, c) * wv(i * k + j, c);
          gx(i, j) += s;
        }
      }
    }
    if (t.requires_grad(iw)) {
      Matrix& gw = t.grad(iw);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          for (std::size_t c = 0; c < h; ++c) gw(i * k + j, c) += xv(i, j) * g(i, c);
        }
      }
    }
  });
}

Var attention(Var queries, Var keys, Var values, const BinaryMatrix& masks,
              const kernels::AttentionDims& dims) {
  same_tape(queries, keys);
  same_tape(queries, values);
  const std::size_t width = dims.width();
  check(queries.rows() == dims.n_blocks() * dims.n_query && queries.cols() == width,
        "attention: queries " + shape_str(queries.value()));
  check(keys.rows() == dims.n_blocks() * dims.n_key && keys.cols() == width,
        "attention: keys " + shape_str(keys.value()));
  require_same_shape(keys.value(), values.value(), "attention: keys/values");
  check(masks.rows() == dims.out_rows() && masks.cols() == dims.n_key,
        "attention: masks " + shape_str(masks) + ", expected " +
            shape_str(dims.out_rows(), dims.n_key));
  Matrix out(dims.out_rows(), width);
  auto probs = std::make_shared<std::vector<double>>(dims.prob_size());
  kernels::parallel::attention_forward(dims, queries.value().data(), keys.value().data(),
                                       values.value().data(), masks.data(), out.data(),
                                       probs->data());
  Var inputs[] = {queries, keys, values};
  const std::size_t iq = queries.id(), ik = keys.id(), iv = values.id();
  return queries.tape().record(
      std::move(out), inputs, [iq, ik, iv, dims, probs](Tape& t, std::size_t self) {
        // The kernel writes all three gradients; scratch them when an input
        // carries none.
        Matrix scratch_q, scratch_k, scratch_v;
        auto slot = [&](std::size_t id, Matrix& scratch) -> double* {
          if (t.requires_grad(id)) return t.grad(id).data();
          scratch = Matrix(t.value(id).rows(), t.value(id).cols());
          return scratch.data();
        };
        double* dq = slot(iq, scratch_q);
        double* dk = slot(ik, scratch_k);
        double* dv = slot(iv, scratch_v);
        kernels::parallel::attention_backward(dims, t.value(iq).data(), t.value(ik).data(),
                                              t.value(iv).data(), probs->data(),
                                              t.grad(self).data(), dq, dk, dv);
      });
}

}  // namespace refil::ad
