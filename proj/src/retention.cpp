#include "recall/retention.hpp"

#include <algorithm>
#include <set>

#include "recall/attention.hpp"

namespace recall {

void RetentionConfig::validate() const {
  if (capacity == 0) throw std::invalid_argument("retention: capacity must be at least 1");
  if (!(decay_rate >= 0.0 && decay_rate <= 1.0)) throw std::invalid_argument("retention: decay_rate must lie in [0, 1]");
  if (!std::isfinite(compaction_floor)) throw std::invalid_argument("retention: compaction_floor must be finite");
  if (read_heads != 1) throw std::invalid_argument("retention: only single-head memory reads are supported");
  if (gate.kind == WriteGate::Kind::Threshold && !std::isfinite(gate.threshold)) {
    throw std::invalid_argument("retention: gate threshold must be finite");
  }
}

MemoryState empty_memory(std::size_t capacity, std::size_t d_model) {
  MemoryState mem;
  mem.slots = Matrix(capacity, d_model);
  mem.occupied.assign(capacity, false);
  mem.insert_seq.assign(capacity, 0);
  mem.usage.assign(capacity, 0.0);
  mem.next_seq = 1;
  return mem;
}

std::optional<std::string> memory_invariant_violation(const MemoryState& mem) {
  const std::size_t m = mem.occupied.size();
  if (mem.slots.rows() != m || mem.insert_seq.size() != m || mem.usage.size() != m) {
    return "bookkeeping lengths disagree with slot matrix " + mem.slots.shape_string();
  }
  std::set<std::uint64_t> seen;
  for (std::size_t i = 0; i < m; ++i) {
    if (!(mem.usage[i] >= 0.0) || !std::isfinite(mem.usage[i])) return "slot " + std::to_string(i) + " has invalid usage";
    if (!mem.occupied[i]) {
      if (mem.insert_seq[i] != 0 || mem.usage[i] != 0.0) return "free slot " + std::to_string(i) + " has bookkeeping";
      for (double v : mem.slots.row(i))
        if (v != 0.0) return "free slot " + std::to_string(i) + " has a nonzero row";
      continue;
    }
    if (mem.insert_seq[i] == 0 || mem.insert_seq[i] >= mem.next_seq) {
      return "slot " + std::to_string(i) + " insert_seq outside [1, next_seq)";
    }
    if (!seen.insert(mem.insert_seq[i]).second) return "duplicate insert_seq " + std::to_string(mem.insert_seq[i]);
  }
  if (!mem.slots.all_finite()) return "non-finite slot value";
  return std::nullopt;
}

MemorySlots<Var> lift_memory(Tape& tape, const MemoryState& mem) {
  MemorySlots<Var> out;
  out.slots = tape.constant(mem.slots);
  out.occupied = mem.occupied;
  out.insert_seq = mem.insert_seq;
  out.usage = mem.usage;
  out.next_seq = mem.next_seq;
  return out;
}

MemoryState lower_memory(const MemorySlots<Var>& mem) {
  MemoryState out;
  out.slots = mem.slots.value();
  out.occupied = mem.occupied;
  out.insert_seq = mem.insert_seq;
  out.usage = mem.usage;
  out.next_seq = mem.next_seq;
  return out;
}

std::size_t append_target(const std::vector<bool>& occupied, const std::vector<std::uint64_t>& insert_seq) {
  if (occupied.empty()) throw std::invalid_argument("write_append: memory has no slots");
  for (std::size_t i = 0; i < occupied.size(); ++i)
    if (!occupied[i]) return i;
  std::size_t oldest = 0;
  for (std::size_t i = 1; i < insert_seq.size(); ++i)
    if (insert_seq[i] < insert_seq[oldest]) oldest = i;
  return oldest;
}

bool gate_write(WriteSignal signal, const RetentionConfig& config) {
  switch (config.gate.kind) {
    case WriteGate::Kind::Always:
      return true;
    case WriteGate::Kind::Never:
      return false;
    case WriteGate::Kind::Threshold:
      return signal.value >= config.gate.threshold;
  }
  return false;
}

MemoryState compact(const MemoryState& mem, const RetentionConfig& config) {
  MemoryState out = mem;
  const std::size_t m = out.capacity();
  auto lower_usage = [&out](std::size_t a, std::size_t b) {
    if (out.usage[a] != out.usage[b]) return out.usage[a] < out.usage[b];
    return out.insert_seq[a] < out.insert_seq[b];
  };
  for (;;) {
    std::vector<std::size_t> live;
    std::size_t below_floor = 0;
    for (std::size_t i = 0; i < m; ++i) {
      if (!out.occupied[i]) continue;
      live.push_back(i);
      if (out.usage[i] < config.compaction_floor) ++below_floor;
    }
    if (below_floor < 2) break;
    std::sort(live.begin(), live.end(), lower_usage);
    const std::size_t a = live[0];
    const std::size_t b = live[1];
    const double ua = out.usage[a];
    const double ub = out.usage[b];
    const double total = ua + ub;
    // The merged row lives in the newer slot and inherits its insert_seq.
    const std::size_t keep = out.insert_seq[a] > out.insert_seq[b] ? a : b;
    const std::size_t drop = keep == a ? b : a;
    for (std::size_t j = 0; j < out.slots.cols(); ++j) {
      const double merged = total > 0.0 ? (ua * out.slots(a, j) + ub * out.slots(b, j)) / total
                                        : 0.5 * (out.slots(a, j) + out.slots(b, j));
      out.slots(keep, j) = merged;
      out.slots(drop, j) = 0.0;
    }
    out.usage[keep] = total;
    out.insert_seq[keep] = std::max(out.insert_seq[a], out.insert_seq[b]);
    out.occupied[drop] = false;
    out.insert_seq[drop] = 0;
    out.usage[drop] = 0.0;
  }
  return out;
}

std::vector<SlotScore> score_slots(const Matrix& query, const MemoryState& mem, const RetentionParams& params,
                                   std::size_t k) {
  if (k == 0) throw std::invalid_argument("score_slots: k must be at least 1");
  if (query.rows() != 1) throw ShapeError("score_slots: query must be a single row, got " + query.shape_string());
  const ReadResult<Matrix> read = retention_read(query, mem, params);
  std::vector<SlotScore> scores;
  for (std::size_t i = 0; i < mem.capacity(); ++i)
    if (mem.occupied[i]) scores.push_back({i, read.weights(0, i)});
  std::stable_sort(scores.begin(), scores.end(),
                   [](const SlotScore& a, const SlotScore& b) { return a.score > b.score; });
  if (scores.size() > k) scores.resize(k);
  return scores;
}

RetentionParams init_retention(std::size_t d_model, std::size_t d_k, Rng& rng) {
  RetentionParams p;
  p.query = xavier_uniform(d_model, d_k, rng);
  p.key = xavier_uniform(d_model, d_k, rng);
  p.value = xavier_uniform(d_model, d_model, rng);
  p.update = xavier_uniform(d_model, d_model, rng);
  return p;
}

}  // namespace recall
