#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "recall/autodiff.hpp"
#include "recall/numeric.hpp"

namespace recall {

/// Per-head projections plus the concat-and-project output matrix.
/// T is Matrix for plain evaluation or Var for taped evaluation.
template <class T>
struct AttentionWeights {
  std::vector<T> query;  // heads x [d_model x d_k]
  std::vector<T> key;    // heads x [d_model x d_k]
  std::vector<T> value;  // heads x [d_model x d_k]
  T output;              // [(heads * d_k) x d_model]
};

template <class T>
struct FfnWeights {
  T w1;  // [d_model x d_ff]
  T b1;  // [1 x d_ff]
  T w2;  // [d_ff x d_model]
  T b2;  // [1 x d_model]
};

using AttentionParams = AttentionWeights<Matrix>;
using FfnParams = FfnWeights<Matrix>;

/// softmax(q k^T / sqrt(d_k), mask) v. With `causal`, query row i sees keys 0..i.
template <class T>
T scaled_dot_attention(const T& q, const T& k, const T& v, const std::optional<ColumnMask>& mask = std::nullopt,
                       bool causal = false) {
  if (value_of(q).cols() != value_of(k).cols() || value_of(k).rows() != value_of(v).rows()) {
    throw ShapeError("scaled_dot_attention: q " + value_of(q).shape_string() + ", k " + value_of(k).shape_string() +
                     ", v " + value_of(v).shape_string());
  }
  if (causal && mask) throw std::invalid_argument("scaled_dot_attention: causal and column masks are exclusive");
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(value_of(q).cols()));
  T scores = scale(matmul_nt(q, k), inv_sqrt_dk);
  T weights = causal ? softmax_rows_causal(scores) : softmax_rows(scores, mask);
  return matmul(weights, v);
}

template <class T>
T multi_head_self_attention(const T& x, const AttentionWeights<T>& params, bool causal = false) {
  const std::size_t heads = params.query.size();
  if (heads == 0 || params.key.size() != heads || params.value.size() != heads) {
    throw ShapeError("multi_head_self_attention: inconsistent head count");
  }
  std::vector<T> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    T q = matmul(x, params.query[h]);
    T k = matmul(x, params.key[h]);
    T v = matmul(x, params.value[h]);
    outputs.push_back(scaled_dot_attention(q, k, v, std::nullopt, causal));
  }
  return matmul(concat_cols(std::span<const T>(outputs)), params.output);
}

template <class T>
T ffn(const T& x, const FfnWeights<T>& params) {
  T hidden = relu(add_row(matmul(x, params.w1), params.b1));
  return add_row(matmul(hidden, params.w2), params.b2);
}

/// Uniform(-sqrt(6 / (fan_in + fan_out)), +sqrt(6 / (fan_in + fan_out))).
Matrix xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

AttentionParams init_attention(std::size_t d_model, std::size_t d_k, std::size_t heads, Rng& rng);
FfnParams init_ffn(std::size_t d_model, std::size_t d_ff, Rng& rng);

// Lockstep visitors: f(name, a, b, ...) for every tensor of each structure.
// All structures must already have matching head counts.

template <class F, class First, class... Rest>
void visit_attention(const std::string& prefix, F&& f, First& first, Rest&... rest) {
  const std::size_t heads = first.query.size();
  if (((rest.query.size() != heads) || ...)) throw ShapeError("visit_attention: head count mismatch");
  for (std::size_t h = 0; h < heads; ++h) {
    const std::string head = prefix + "head" + std::to_string(h) + ".";
    f(head + "wq", first.query[h], rest.query[h]...);
    f(head + "wk", first.key[h], rest.key[h]...);
    f(head + "wv", first.value[h], rest.value[h]...);
  }
  f(prefix + "wo", first.output, rest.output...);
}

template <class F, class First, class... Rest>
void visit_ffn(const std::string& prefix, F&& f, First& first, Rest&... rest) {
  f(prefix + "w1", first.w1, rest.w1...);
  f(prefix + "b1", first.b1, rest.b1...);
  f(prefix + "w2", first.w2, rest.w2...);
  f(prefix + "b2", first.b2, rest.b2...);
}

template <class To, class From>
AttentionWeights<To> attention_shaped_like(const AttentionWeights<From>& w) {
  AttentionWeights<To> out;
  out.query.resize(w.query.size());
  out.key.resize(w.key.size());
  out.value.resize(w.value.size());
  return out;
}

}  // namespace recall
