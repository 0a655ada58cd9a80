#include "recall/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace recall {

const Matrix& Var::value() const { return tape_->value(id_); }

Var Tape::push(Matrix value, bool requires_grad, Backward backward) {
  nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, false, std::move(backward)});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::parameter(Matrix value) { return push(std::move(value), true, nullptr); }

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, Backward backward) {
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [this](const Var& v) {
    return &v.tape() == this && nodes_[v.id()].requires_grad;
  });
  return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
}

Matrix Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.has_grad) return n.grad;
  return Matrix(n.value.rows(), n.value.cols());
}

Matrix* Tape::grad_buffer(const Var& target) {
  Node& n = nodes_[target.id()];
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Matrix(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return &n.grad;
}

void Tape::accumulate(const Var& target, const Matrix& delta) {
  Matrix* g = grad_buffer(target);
  if (g == nullptr) return;
  if (g->rows() != delta.rows() || g->cols() != delta.cols()) {
    throw ShapeError("Tape::accumulate: gradient " + delta.shape_string() + " for node " +
                     g->shape_string());
  }
  for (std::size_t i = 0; i < g->size(); ++i) g->data()[i] += delta.data()[i];
}

void Tape::backward(const Var& root) {
  if (&root.tape() != this) throw std::invalid_argument("Tape::backward: root belongs to another tape");
  const Matrix& rv = nodes_[root.id()].value;
  if (rv.rows() != 1 || rv.cols() != 1) {
    throw ShapeError("Tape::backward: root must be 1x1, got " + rv.shape_string());
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Matrix();
  }
  if (Matrix* g = grad_buffer(root)) (*g)(0, 0) = 1.0;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.backward && n.has_grad) n.backward(*this, id);
  }
}

Var matmul(const Var& a, const Var& b) {
  return a.tape().record(matmul(a.value(), b.value()), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    if (t.requires_grad(a.id())) t.accumulate(a, matmul_nt(g, b.value()));
    if (t.requires_grad(b.id())) t.accumulate(b, matmul_tn(a.value(), g));
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  return a.tape().record(matmul_nt(a.value(), b.value()), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    if (t.requires_grad(a.id())) t.accumulate(a, matmul(g, b.value()));
    if (t.requires_grad(b.id())) t.accumulate(b, matmul_tn(g, a.value()));
  });
}

Var add(const Var& a, const Var& b) {
  return a.tape().record(add(a.value(), b.value()), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var scale(const Var& a, double factor) {
  return a.tape().record(scale(a.value(), factor), {a}, [a, factor](Tape& t, std::size_t self) {
    t.accumulate(a, scale(t.upstream(self), factor));
  });
}

Var add_row(const Var& x, const Var& bias) {
  return x.tape().record(add_row(x.value(), bias.value()), {x, bias}, [x, bias](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    t.accumulate(x, g);
    if (t.requires_grad(bias.id())) t.accumulate(bias, column_sums(g));
  });
}

Var relu(const Var& x) {
  return x.tape().record(relu(x.value()), {x}, [x](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    Matrix* dx = t.grad_buffer(x);
    if (dx == nullptr) return;
    const Matrix& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv.data()[i] > 0.0) dx->data()[i] += g.data()[i];
  });
}

namespace {

// dx_ij = y_ij * (g_ij - sum_k g_ik y_ik); masked entries have y = 0.
void softmax_backward(Tape& t, std::size_t self, const Var& x) {
  Matrix* dx = t.grad_buffer(x);
  if (dx == nullptr) return;
  const Matrix& y = t.value(self);
  const Matrix& g = t.upstream(self);
  for (std::size_t i = 0; i < y.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
    for (std::size_t j = 0; j < y.cols(); ++j) (*dx)(i, j) += y(i, j) * (g(i, j) - dot);
  }
}

}  // namespace

Var softmax_rows(const Var& x, const std::optional<ColumnMask>& mask) {
  return x.tape().record(softmax_rows(x.value(), mask), {x},
                         [x](Tape& t, std::size_t self) { softmax_backward(t, self, x); });
}

Var softmax_rows_causal(const Var& x) {
  return x.tape().record(softmax_rows_causal(x.value()), {x},
                         [x](Tape& t, std::size_t self) { softmax_backward(t, self, x); });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  Matrix out = layer_norm(x.value(), gamma.value(), beta.value(), eps);
  return x.tape().record(std::move(out), {x, gamma, beta}, [x, gamma, beta, eps](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    const Matrix& xv = x.value();
    const Matrix& gv = gamma.value();
    const std::size_t d = xv.cols();
    const double dd = static_cast<double>(d);
    Matrix* dx = t.grad_buffer(x);
    Matrix* dgamma = t.grad_buffer(gamma);
    Matrix* dbeta = t.grad_buffer(beta);
    std::vector<double> xhat(d), dxhat(d);
    for (std::size_t i = 0; i < xv.rows(); ++i) {
      const auto row = xv.row(i);
      double mean = 0.0;
      for (double v : row) mean += v;
      mean /= dd;
      double var = 0.0;
      for (double v : row) var += (v - mean) * (v - mean);
      var /= dd;
      const double inv_std = 1.0 / std::sqrt(var + eps);
      double mean_dxhat = 0.0;
      double mean_dxhat_xhat = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        xhat[j] = (row[j] - mean) * inv_std;
        dxhat[j] = g(i, j) * gv(0, j);
        mean_dxhat += dxhat[j];
        mean_dxhat_xhat += dxhat[j] * xhat[j];
        if (dgamma) (*dgamma)(0, j) += g(i, j) * xhat[j];
        if (dbeta) (*dbeta)(0, j) += g(i, j);
      }
      mean_dxhat /= dd;
      mean_dxhat_xhat /= dd;
      if (dx) {
        for (std::size_t j = 0; j < d; ++j)
          (*dx)(i, j) += inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
      }
    }
  });
}

Var mean_rows(const Var& x) {
  return x.tape().record(mean_rows(x.value()), {x}, [x](Tape& t, std::size_t self) {
    Matrix* dx = t.grad_buffer(x);
    if (dx == nullptr) return;
    const Matrix& g = t.upstream(self);
    const double n = static_cast<double>(dx->rows());
    for (std::size_t i = 0; i < dx->rows(); ++i)
      for (std::size_t j = 0; j < dx->cols(); ++j) (*dx)(i, j) += g(0, j) / n;
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  std::vector<Matrix> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(p.value());
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts.front().tape().record(concat_cols(values), parts, [inputs](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    std::size_t offset = 0;
    for (const auto& p : inputs) {
      const std::size_t w = p.value().cols();
      if (Matrix* dp = t.grad_buffer(p)) {
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < w; ++j) (*dp)(i, j) += g(i, offset + j);
      }
      offset += w;
    }
  });
}

Var gather_rows(const Var& table, std::span<const std::size_t> ids) {
  std::vector<std::size_t> index(ids.begin(), ids.end());
  return table.tape().record(gather_rows(table.value(), ids), {table}, [table, index](Tape& t, std::size_t self) {
    Matrix* dt = t.grad_buffer(table);
    if (dt == nullptr) return;
    const Matrix& g = t.upstream(self);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) (*dt)(index[i], j) += g(i, j);
  });
}

Var dropout(const Var& x, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  Matrix mask = dropout_mask(x.rows(), x.cols(), p, rng);
  Matrix out = hadamard(x.value(), mask);
  return x.tape().record(std::move(out), {x}, [x, mask = std::move(mask)](Tape& t, std::size_t self) {
    t.accumulate(x, hadamard(t.upstream(self), mask));
  });
}

Matrix blend_rows(const Matrix& slots, const Matrix& weights, const Matrix& update) {
  if (weights.rows() != 1 || weights.cols() != slots.rows()) {
    throw ShapeError("blend_rows: weights " + weights.shape_string() + " for slots " + slots.shape_string());
  }
  if (update.rows() != 1 || update.cols() != slots.cols()) {
    throw ShapeError("blend_rows: update " + update.shape_string() + " for slots " + slots.shape_string());
  }
  Matrix out(slots.rows(), slots.cols());
  for (std::size_t i = 0; i < slots.rows(); ++i) {
    const double w = weights(0, i);
    for (std::size_t j = 0; j < slots.cols(); ++j) {
      const double a = slots(i, j), b = update(0, j);
      // Rounding may step an ulp outside [a, b]; clamp back.
      out(i, j) = std::clamp((1.0 - w) * a + w * b, std::min(a, b), std::max(a, b));
    }
  }
  return out;
}

Var blend_rows(const Var& slots, const Var& weights, const Var& update) {
  Matrix out = blend_rows(slots.value(), weights.value(), update.value());
  return slots.tape().record(std::move(out), {slots, weights, update},
                             [slots, weights, update](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    const Matrix& s = slots.value();
    const Matrix& w = weights.value();
    const Matrix& u = update.value();
    Matrix* ds = t.grad_buffer(slots);
    Matrix* dw = t.grad_buffer(weights);
    Matrix* du = t.grad_buffer(update);
    for (std::size_t i = 0; i < s.rows(); ++i) {
      const double wi = w(0, i);
      double dwi = 0.0;
      for (std::size_t j = 0; j < s.cols(); ++j) {
        if (ds) (*ds)(i, j) += (1.0 - wi) * g(i, j);
        if (du) (*du)(0, j) += wi * g(i, j);
        dwi += g(i, j) * (u(0, j) - s(i, j));
      }
      if (dw) (*dw)(0, i) += dwi;
    }
  });
}

Matrix set_row(const Matrix& slots, std::size_t index, const Matrix& row) {
  if (index >= slots.rows() || row.rows() != 1 || row.cols() != slots.cols()) {
    throw ShapeError("set_row: row " + row.shape_string() + " at index " + std::to_string(index) +
                     " into " + slots.shape_string());
  }
  Matrix out = slots;
  std::copy(row.row(0).begin(), row.row(0).end(), out.row(index).begin());
  return out;
}

Var set_row(const Var& slots, std::size_t index, const Var& row) {
  return slots.tape().record(set_row(slots.value(), index, row.value()), {slots, row},
                             [slots, index, row](Tape& t, std::size_t self) {
    const Matrix& g = t.upstream(self);
    if (Matrix* ds = t.grad_buffer(slots)) {
      for (std::size_t i = 0; i < g.rows(); ++i) {
        if (i == index) continue;
        for (std::size_t j = 0; j < g.cols(); ++j) (*ds)(i, j) += g(i, j);
      }
    }
    if (Matrix* dr = t.grad_buffer(row)) {
      for (std::size_t j = 0; j < g.cols(); ++j) (*dr)(0, j) += g(index, j);
    }
  });
}

namespace {

double log_sum_exp(std::span<const double> row) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : row) m = std::max(m, v);
  double total = 0.0;
  for (double v : row) total += std::exp(v - m);
  return m + std::log(total);
}

void check_target(const Matrix& logits, const Target& target) {
  if (target.row >= logits.rows() || target.token >= logits.cols()) {
    throw ShapeError("cross_entropy: target (" + std::to_string(target.row) + ", " +
                     std::to_string(target.token) + ") outside logits " + logits.shape_string());
  }
}

}  // namespace

double cross_entropy_sum(const Matrix& logits, std::span<const Target> targets) {
  double loss = 0.0;
  for (const Target& tg : targets) {
    check_target(logits, tg);
    const auto row = logits.row(tg.row);
    loss += log_sum_exp(row) - row[tg.token];
  }
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  return loss;
}

Var cross_entropy_sum(const Var& logits, std::span<const Target> targets) {
  const double loss = cross_entropy_sum(logits.value(), targets);
  std::vector<Target> tg(targets.begin(), targets.end());
  return logits.tape().record(Matrix(1, 1, {loss}), {logits}, [logits, tg](Tape& t, std::size_t self) {
    Matrix* dz = t.grad_buffer(logits);
    if (dz == nullptr) return;
    const double g = t.upstream(self)(0, 0);
    const Matrix& z = logits.value();
    for (const Target& target : tg) {
      const auto row = z.row(target.row);
      const double lse = log_sum_exp(row);
      for (std::size_t j = 0; j < row.size(); ++j) (*dz)(target.row, j) += g * std::exp(row[j] - lse);
      (*dz)(target.row, target.token) -= g;
    }
  });
}

}  // namespace recall
