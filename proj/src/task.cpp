#include "recall/task.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <sstream>

namespace recall {

Vocabulary::Vocabulary(const TaskConfig& task, std::size_t vocab_size)
    : num_keys_(task.num_keys), num_values_(task.num_values), size_(vocab_size) {
  if (task.num_keys == 0 || task.num_values == 0) throw std::invalid_argument("task: need at least one key and value");
  if (vocab_size < task.num_keys + task.num_values + 2) {
    throw std::invalid_argument("task: vocabulary of " + std::to_string(vocab_size) + " cannot hold " +
                                std::to_string(task.num_keys) + " keys, " + std::to_string(task.num_values) +
                                " values and 2 control tokens");
  }
  if (task.num_pairs == 0 || task.num_pairs > task.num_keys) {
    throw std::invalid_argument("task: num_pairs must lie in [1, num_keys]");
  }
}

std::string Vocabulary::name(std::size_t token) const {
  if (is_key(token)) return "k" + std::to_string(token);
  if (is_value(token)) return "v" + std::to_string(token - num_keys_);
  if (token == query_token()) return "Q";
  if (token == ask_token()) return "?";
  return "t" + std::to_string(token);
}

std::optional<std::size_t> Vocabulary::parse(std::string_view text) const {
  if (text == "Q") return query_token();
  if (text == "?") return ask_token();
  if (text.size() < 2) return std::nullopt;
  std::size_t index = 0;
  const char* first = text.data() + 1;
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, index);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  switch (text.front()) {
    case 'k':
      if (index < num_keys_) return key(index);
      break;
    case 'v':
      if (index < num_values_) return value(index);
      break;
    case 't':
      if (index < size_) return index;
      break;
    default:
      break;
  }
  return std::nullopt;
}

std::vector<std::size_t> Vocabulary::parse_sequence(std::string_view text) const {
  std::vector<std::size_t> out;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) {
    auto token = parse(word);
    if (!token) throw InputError("unknown token '" + word + "'");
    out.push_back(*token);
  }
  return out;
}

std::string Vocabulary::format_sequence(std::span<const std::size_t> tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += name(tokens[i]);
  }
  return out;
}

std::size_t recall_sequence_length(const TaskConfig& task) { return 3 * task.num_pairs; }

Episode gen_recall_episode(Rng& rng, const TaskConfig& task, const Vocabulary& vocab) {
  // Partial Fisher-Yates: keys without replacement.
  std::vector<std::size_t> keys(task.num_keys);
  std::iota(keys.begin(), keys.end(), std::size_t{0});
  for (std::size_t i = 0; i < task.num_pairs; ++i) std::swap(keys[i], keys[i + rng.below(task.num_keys - i)]);
  keys.resize(task.num_pairs);

  std::vector<std::size_t> values(task.num_pairs);
  for (auto& v : values) v = rng.below(task.num_values);

  EpisodeStep write;
  write.signal = WriteSignal{kWritePhaseSignal};
  for (std::size_t i = 0; i < task.num_pairs; ++i) {
    write.tokens.push_back(vocab.key(keys[i]));
    write.tokens.push_back(vocab.value(values[i]));
  }

  std::vector<std::size_t> order(task.num_pairs);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  EpisodeStep query;
  query.signal = WriteSignal{0.0};
  for (std::size_t i : order) {
    query.tokens.push_back(vocab.query_token());
    query.tokens.push_back(vocab.key(keys[i]));
    query.tokens.push_back(vocab.ask_token());
    query.targets.push_back({query.tokens.size() - 1, vocab.value(values[i])});
  }
  return Episode{{std::move(write), std::move(query)}};
}

}  // namespace recall
