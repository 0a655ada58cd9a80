#pragma once

// Persistent slot memory attached to a transformer block: attention read,
// append and blend writes, gating, usage bookkeeping, compaction and scoring.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "recall/autodiff.hpp"
#include "recall/numeric.hpp"

namespace recall {

template <class T>
struct RetentionWeights {
  T query;   // [d_model x d_k]
  T key;     // [d_model x d_k]
  T value;   // [d_model x d_model]
  T update;  // [d_model x d_model]
};

using RetentionParams = RetentionWeights<Matrix>;

enum class WriteMode { Append, Blend };

struct WriteGate {
  enum class Kind { Always, Never, Threshold };
  Kind kind = Kind::Always;
  double threshold = 0.0;

  static WriteGate always() { return {Kind::Always, 0.0}; }
  static WriteGate never() { return {Kind::Never, 0.0}; }
  static WriteGate at_least(double tau) { return {Kind::Threshold, tau}; }

  friend bool operator==(const WriteGate&, const WriteGate&) = default;
};

struct RetentionConfig {
  std::size_t capacity = 16;
  WriteMode write_mode = WriteMode::Append;
  WriteGate gate = WriteGate::always();
  double decay_rate = 0.9;
  double compaction_floor = 0.05;
  std::size_t read_heads = 1;

  /// Throws std::invalid_argument on capacity 0, decay outside [0, 1], or read_heads != 1.
  void validate() const;

  friend bool operator==(const RetentionConfig&, const RetentionConfig&) = default;
};

/// Caller-supplied learning or feedback scalar that drives the write gate.
struct WriteSignal {
  double value = 0.0;
};

/// Slot matrix plus bookkeeping. Unoccupied slots hold zero rows, insert_seq 0
/// and usage 0. insert_seq is a global monotone counter; next_seq starts at 1.
template <class T>
struct MemorySlots {
  T slots;
  std::vector<bool> occupied;
  std::vector<std::uint64_t> insert_seq;
  std::vector<double> usage;
  std::uint64_t next_seq = 1;

  std::size_t capacity() const { return occupied.size(); }
  std::size_t occupied_count() const {
    std::size_t n = 0;
    for (bool o : occupied) n += o ? 1 : 0;
    return n;
  }
};

using MemoryState = MemorySlots<Matrix>;

MemoryState empty_memory(std::size_t capacity, std::size_t d_model);

/// Describes the first violated MemoryState invariant, if any.
std::optional<std::string> memory_invariant_violation(const MemoryState& mem);

/// Moves a plain memory onto a tape as constant data.
MemorySlots<Var> lift_memory(Tape& tape, const MemoryState& mem);
/// Drops tape bookkeeping and keeps values.
MemoryState lower_memory(const MemorySlots<Var>& mem);
inline const MemoryState& lower_memory(const MemoryState& mem) { return mem; }

template <class T>
struct ReadResult {
  T output;   // [n x d_model]
  T weights;  // [n x m], zero in unoccupied columns
};

template <class T>
ReadResult<T> retention_read(const T& x, const MemorySlots<T>& mem, const RetentionWeights<T>& params) {
  T q = matmul(x, params.query);
  T k = matmul(mem.slots, params.key);
  T v = matmul(mem.slots, params.value);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(value_of(q).cols()));
  T weights = softmax_rows(scale(matmul_nt(q, k), inv_sqrt_dk), ColumnMask(mem.occupied));
  T output = matmul(weights, v);
  return {std::move(output), std::move(weights)};
}

/// Mean pool over tokens.
template <class T>
T make_write_vector(const T& x) {
  return mean_rows(x);
}

/// Index an append would write: lowest free slot, else the smallest insert_seq.
std::size_t append_target(const std::vector<bool>& occupied, const std::vector<std::uint64_t>& insert_seq);

template <class T>
MemorySlots<T> write_append(const MemorySlots<T>& mem, const T& u) {
  const std::size_t index = append_target(mem.occupied, mem.insert_seq);
  MemorySlots<T> out = mem;
  out.slots = set_row(mem.slots, index, u);
  out.occupied[index] = true;
  out.insert_seq[index] = mem.next_seq;
  out.usage[index] = 0.0;
  out.next_seq = mem.next_seq + 1;
  return out;
}

enum class BlendStatus { Blended, AppendedFallback };

template <class T>
struct BlendResult {
  MemorySlots<T> memory;
  Matrix weights;  // [1 x m]; all zero on fallback
  BlendStatus status = BlendStatus::Blended;
};

/// Soft write of u * W_update into every occupied slot, weighted by a softmax
/// of slot/update similarity scaled by 1/sqrt(d_model). With no occupied slot
/// the transformed update is appended instead.
template <class T>
BlendResult<T> write_blend(const MemorySlots<T>& mem, const T& u, const RetentionWeights<T>& params) {
  T update = matmul(u, params.update);
  if (mem.occupied_count() == 0) {
    return {write_append(mem, update), Matrix(1, mem.capacity()), BlendStatus::AppendedFallback};
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(value_of(update).cols()));
  T w = softmax_rows(scale(matmul_nt(update, mem.slots), inv_sqrt_d), ColumnMask(mem.occupied));
  MemorySlots<T> out = mem;
  out.slots = blend_rows(mem.slots, w, update);
  return {std::move(out), value_of(w), BlendStatus::Blended};
}

bool gate_write(WriteSignal signal, const RetentionConfig& config);

/// usage_i <- decay * usage_i + mean_t weights[t, i] for occupied slots.
template <class T>
MemorySlots<T> update_usage(const MemorySlots<T>& mem, const Matrix& weights, double decay) {
  if (weights.cols() != mem.capacity()) {
    throw ShapeError("update_usage: weights " + weights.shape_string() + " for capacity " +
                     std::to_string(mem.capacity()));
  }
  MemorySlots<T> out = mem;
  if (weights.rows() == 0) return out;
  const Matrix mass = mean_rows(weights);
  for (std::size_t i = 0; i < out.capacity(); ++i) {
    out.usage[i] = out.occupied[i] ? decay * mem.usage[i] + mass(0, i) : 0.0;
  }
  return out;
}

/// Pairwise merge of the two lowest-usage slots while more than one occupied
/// slot sits below config.compaction_floor.
MemoryState compact(const MemoryState& mem, const RetentionConfig& config);

struct SlotScore {
  std::size_t slot;
  double score;
};

/// Top-k occupied slots by read attention weight for a single query row,
/// descending, ties to the smaller index.
std::vector<SlotScore> score_slots(const Matrix& query, const MemoryState& mem, const RetentionParams& params,
                                   std::size_t k);

RetentionParams init_retention(std::size_t d_model, std::size_t d_k, Rng& rng);

template <class F, class First, class... Rest>
void visit_retention(const std::string& prefix, F&& f, First& first, Rest&... rest) {
  f(prefix + "wr_q", first.query, rest.query...);
  f(prefix + "wr_k", first.key, rest.key...);
  f(prefix + "wr_v", first.value, rest.value...);
  f(prefix + "wr_update", first.update, rest.update...);
}

}  // namespace recall
