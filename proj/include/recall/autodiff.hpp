#pragma once

// Reverse-mode differentiation over Matrix values. Every op forwards through
// the same numeric kernels as the plain Matrix overloads, so a computation
// written once as a template over {Matrix, Var} produces bit-identical values
// on both paths.

#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "recall/numeric.hpp"

namespace recall {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Matrix value);
  /// Leaf whose gradient is accumulated by backward().
  Var parameter(Matrix value);
  /// Interior node. The backward closure runs only if some input requires grad.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Matrix value, std::span<const Var> inputs, Backward backward);

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every node.
  void backward(const Var& root);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Accumulated gradient; a zero matrix if nothing flowed into the node.
  Matrix grad(std::size_t id) const;
  /// Upstream gradient buffer for the node currently running backward.
  const Matrix& upstream(std::size_t id) const { return nodes_[id].grad; }
  /// Adds `delta` into the gradient of `target` if it requires grad.
  void accumulate(const Var& target, const Matrix& delta);
  /// Lazily allocated gradient buffer, or nullptr when target needs no grad.
  Matrix* grad_buffer(const Var& target);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  Var push(Matrix value, bool requires_grad, Backward backward);

  std::deque<Node> nodes_;
};

inline const Matrix& value_of(const Matrix& m) { return m; }
inline const Matrix& value_of(const Var& v) { return v.value(); }

// Differentiable counterparts of the numeric kernels.
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_row(const Var& x, const Var& bias);
Var relu(const Var& x);
Var softmax_rows(const Var& x, const std::optional<ColumnMask>& mask = std::nullopt);
Var softmax_rows_causal(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var mean_rows(const Var& x);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(const Var& table, std::span<const std::size_t> ids);
Var dropout(const Var& x, double p, Rng& rng, bool training);

/// Row i becomes (1 - w_i) * slots_i + w_i * update, with w a 1 x m row.
Var blend_rows(const Var& slots, const Var& weights, const Var& update);
Matrix blend_rows(const Matrix& slots, const Matrix& weights, const Matrix& update);

/// Copy of `slots` with row `index` replaced by the 1 x d `row`.
Var set_row(const Var& slots, std::size_t index, const Var& row);
Matrix set_row(const Matrix& slots, std::size_t index, const Matrix& row);

struct Target {
  std::size_t row;
  std::size_t token;
};

/// Sum over targets of -log softmax(logits[row])[token], as a 1 x 1 node.
Var cross_entropy_sum(const Var& logits, std::span<const Target> targets);
double cross_entropy_sum(const Matrix& logits, std::span<const Target> targets);

}  // namespace recall
