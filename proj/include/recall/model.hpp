#pragma once

#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "recall/attention.hpp"
#include "recall/autodiff.hpp"
#include "recall/retention.hpp"

namespace recall {

/// Raised for token ids outside the vocabulary or sequences longer than max_len.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::size_t vocab = 64;
  std::size_t d_model = 32;
  std::size_t d_k = 16;
  std::size_t heads = 2;
  std::size_t d_ff = 64;
  std::size_t layers = 2;
  std::size_t max_len = 32;
  double dropout = 0.0;
  double ln_eps = 1e-5;
  bool causal = true;

  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
struct BlockWeights {
  AttentionWeights<T> attn;
  RetentionWeights<T> ret;
  FfnWeights<T> ffn;
  T ln1_gamma, ln1_beta;
  T ln2_gamma, ln2_beta;
};

template <class T>
struct ModelWeights {
  T token_embedding;     // [vocab x d_model]
  T position_embedding;  // [max_len x d_model]
  std::vector<BlockWeights<T>> blocks;
  T output_projection;   // [d_model x vocab]
};

using BlockParams = BlockWeights<Matrix>;
using ModelParams = ModelWeights<Matrix>;

/// One persistent memory per block; memory never passes between layers.
template <class T>
using Bank = std::vector<MemorySlots<T>>;
using MemoryBank = Bank<Matrix>;

enum class Mode { Train, Eval };

struct BlockOptions {
  double dropout = 0.0;
  double ln_eps = 1e-5;
  bool causal = true;
};

inline BlockOptions block_options(const ModelConfig& config) {
  return {config.dropout, config.ln_eps, config.causal};
}

struct EpisodeStep {
  std::vector<std::size_t> tokens;
  std::vector<Target> targets;
  WriteSignal signal;
};

/// Ordered forward passes; memory carries from one step to the next.
struct Episode {
  std::vector<EpisodeStep> steps;
};

ModelParams init_params(const ModelConfig& config, Rng& rng);
MemoryBank empty_bank(const ModelConfig& config, const RetentionConfig& retention);

template <class F, class First, class... Rest>
void visit_block(const std::string& prefix, F&& f, First& first, Rest&... rest) {
  visit_attention(prefix + "attn.", f, first.attn, rest.attn...);
  visit_retention(prefix + "ret.", f, first.ret, rest.ret...);
  visit_ffn(prefix + "ffn.", f, first.ffn, rest.ffn...);
  f(prefix + "ln1.gamma", first.ln1_gamma, rest.ln1_gamma...);
  f(prefix + "ln1.beta", first.ln1_beta, rest.ln1_beta...);
  f(prefix + "ln2.gamma", first.ln2_gamma, rest.ln2_gamma...);
  f(prefix + "ln2.beta", first.ln2_beta, rest.ln2_beta...);
}

/// Calls f(name, tensor_a, tensor_b, ...) for every parameter tensor, in a
/// fixed order. Structures must share layer and head counts (see shaped_like).
template <class F, class First, class... Rest>
void visit_model(F&& f, First& first, Rest&... rest) {
  if (((rest.blocks.size() != first.blocks.size()) || ...)) throw ShapeError("visit_model: layer count mismatch");
  f(std::string("token_embedding"), first.token_embedding, rest.token_embedding...);
  f(std::string("position_embedding"), first.position_embedding, rest.position_embedding...);
  for (std::size_t l = 0; l < first.blocks.size(); ++l) {
    visit_block("block" + std::to_string(l) + ".", f, first.blocks[l], rest.blocks[l]...);
  }
  f(std::string("output_projection"), first.output_projection, rest.output_projection...);
}

/// Empty structure with the same layer and head counts as `w`.
template <class To, class From>
ModelWeights<To> shaped_like(const ModelWeights<From>& w) {
  ModelWeights<To> out;
  out.blocks.resize(w.blocks.size());
  for (std::size_t l = 0; l < w.blocks.size(); ++l) out.blocks[l].attn = attention_shaped_like<To>(w.blocks[l].attn);
  return out;
}

/// Zero tensors shaped like `params`.
ModelParams zeros_like(const ModelParams& params);
std::size_t parameter_count(const ModelParams& params);

template <class T>
struct BlockResult {
  T output;                 // next layer input
  T normed;                 // post-attention LayerNorm output fed to the memory
  MemorySlots<T> memory;    // memory after write and usage update
  Matrix read_weights;      // [n x m]
  bool wrote = false;
};

/// One transformer block with a memory read between attention and FFN:
///   Z  = MHA(x)
///   x~ = LN1(x + dropout(Z))
///   r  = read(x~, M); then conditionally write mean(x~) into M
///   O  = FFN(x~ + r)
///   x' = LN2(x~ + r + dropout(O))
template <class T>
BlockResult<T> retention_block_forward(const T& x, const MemorySlots<T>& mem, const BlockWeights<T>& params,
                                       const RetentionConfig& config, WriteSignal signal, Mode mode, Rng& rng,
                                       const BlockOptions& options) {
  const bool training = mode == Mode::Train;
  T attended = multi_head_self_attention(x, params.attn, options.causal);
  T normed = layer_norm(add(x, dropout(attended, options.dropout, rng, training)), params.ln1_gamma,
                        params.ln1_beta, options.ln_eps);

  ReadResult<T> read = retention_read(normed, mem, params.ret);

  MemorySlots<T> next = mem;
  const bool wrote = gate_write(signal, config);
  if (wrote) {
    T u = make_write_vector(normed);
    if (config.write_mode == WriteMode::Append) {
      next = write_append(mem, u);
    } else {
      next = write_blend(mem, u, params.ret).memory;
    }
  }
  Matrix read_weights = value_of(read.weights);
  next = update_usage(next, read_weights, config.decay_rate);

  T with_memory = add(normed, read.output);
  T transformed = ffn(with_memory, params.ffn);
  T output = layer_norm(add(with_memory, dropout(transformed, options.dropout, rng, training)), params.ln2_gamma,
                        params.ln2_beta, options.ln_eps);
  return {std::move(output), std::move(normed), std::move(next), std::move(read_weights), wrote};
}

/// Per-layer intermediates, recorded on request for inspection.
struct ForwardTrace {
  std::vector<Matrix> normed;        // x~ per layer
  std::vector<Matrix> read_weights;  // memory attention per layer
};

template <class T>
struct ForwardResult {
  T logits;  // [n x vocab]
  Bank<T> bank;
};

void validate_tokens(std::span<const std::size_t> tokens, const ModelConfig& config);

template <class T>
ForwardResult<T> model_forward(std::span<const std::size_t> tokens, const Bank<T>& bank, const ModelWeights<T>& params,
                               const ModelConfig& config, const RetentionConfig& retention, WriteSignal signal,
                               Mode mode, Rng& rng, ForwardTrace* trace = nullptr) {
  validate_tokens(tokens, config);
  if (bank.size() != params.blocks.size()) {
    throw ShapeError("model_forward: bank has " + std::to_string(bank.size()) + " layers, model has " +
                     std::to_string(params.blocks.size()));
  }
  std::vector<std::size_t> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  T x = add(gather_rows(params.token_embedding, tokens), gather_rows(params.position_embedding, positions));
  const BlockOptions options = block_options(config);
  Bank<T> next;
  next.reserve(bank.size());
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    BlockResult<T> block = retention_block_forward(x, bank[l], params.blocks[l], retention, signal, mode, rng, options);
    if (trace) {
      trace->normed.push_back(value_of(block.normed));
      trace->read_weights.push_back(block.read_weights);
    }
    x = std::move(block.output);
    next.push_back(std::move(block.memory));
  }
  return {matmul(x, params.output_projection), std::move(next)};
}

struct LossAndGrads {
  double loss = 0.0;
  ModelParams grads;
  MemoryBank bank;
  std::size_t targets = 0;
  std::size_t correct = 0;
};

/// Mean target cross-entropy over every step of the episode with reverse-mode
/// gradients. Memory entering the episode is constant; gradients flow through
/// reads and through writes made earlier in the same episode.
LossAndGrads loss_and_grads(const Episode& episode, const MemoryBank& bank, const ModelParams& params,
                            const ModelConfig& config, const RetentionConfig& retention, Rng& rng,
                            Mode mode = Mode::Train);

/// Same loss as loss_and_grads, evaluated without a tape.
double episode_loss(const Episode& episode, const MemoryBank& bank, const ModelParams& params,
                    const ModelConfig& config, const RetentionConfig& retention, Rng& rng, Mode mode = Mode::Train);

std::size_t argmax_row(const Matrix& m, std::size_t row);

}  // namespace recall
