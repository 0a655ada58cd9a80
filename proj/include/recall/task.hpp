#pragma once

// Associative recall: a write step shows KEY VALUE pairs, a separate query
// step asks QUERY KEY ? for each pair. The query step never sees the write
// step's tokens, so the answer is reachable only through memory.

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "recall/model.hpp"

namespace recall {

struct TaskConfig {
  std::size_t num_keys = 16;
  std::size_t num_values = 16;
  std::size_t num_pairs = 1;

  friend bool operator==(const TaskConfig&, const TaskConfig&) = default;
};

/// Token layout: keys [0, K), values [K, K + V), then QUERY and ASK, then
/// unused filler ids up to the model vocabulary.
class Vocabulary {
 public:
  Vocabulary(const TaskConfig& task, std::size_t vocab_size);

  std::size_t size() const { return size_; }
  std::size_t key(std::size_t i) const { return i; }
  std::size_t value(std::size_t i) const { return num_keys_ + i; }
  std::size_t query_token() const { return num_keys_ + num_values_; }
  std::size_t ask_token() const { return num_keys_ + num_values_ + 1; }
  bool is_key(std::size_t t) const { return t < num_keys_; }
  bool is_value(std::size_t t) const { return t >= num_keys_ && t < num_keys_ + num_values_; }

  /// k<i>, v<i>, Q, ?, or t<id> for filler ids.
  std::string name(std::size_t token) const;
  std::optional<std::size_t> parse(std::string_view name) const;

  std::vector<std::size_t> parse_sequence(std::string_view text) const;
  std::string format_sequence(std::span<const std::size_t> tokens) const;

 private:
  std::size_t num_keys_;
  std::size_t num_values_;
  std::size_t size_;
};

/// Signal attached to write-phase steps; query steps carry 0.
inline constexpr double kWritePhaseSignal = 1.0;
/// Gate used during training so only write-phase steps store.
inline WriteGate training_gate() { return WriteGate::at_least(0.5); }

/// Longest step the generator produces for `task`.
std::size_t recall_sequence_length(const TaskConfig& task);

Episode gen_recall_episode(Rng& rng, const TaskConfig& task, const Vocabulary& vocab);

}  // namespace recall
