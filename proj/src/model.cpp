#include "recall/model.hpp"

#include <cmath>

namespace recall {

void ModelConfig::validate() const {
  if (vocab == 0 || d_model == 0 || d_k == 0 || heads == 0 || d_ff == 0 || layers == 0 || max_len == 0) {
    throw std::invalid_argument("model config: every dimension must be positive");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("model config: dropout must lie in [0, 1)");
  if (!(ln_eps > 0.0)) throw std::invalid_argument("model config: ln_eps must be positive");
}

ModelParams init_params(const ModelConfig& config, Rng& rng) {
  config.validate();
  ModelParams p;
  p.token_embedding = xavier_uniform(config.vocab, config.d_model, rng);
  p.position_embedding = xavier_uniform(config.max_len, config.d_model, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    BlockParams block;
    block.attn = init_attention(config.d_model, config.d_k, config.heads, rng);
    block.ret = init_retention(config.d_model, config.d_k, rng);
    block.ffn = init_ffn(config.d_model, config.d_ff, rng);
    block.ln1_gamma = Matrix::filled(1, config.d_model, 1.0);
    block.ln1_beta = Matrix(1, config.d_model);
    block.ln2_gamma = Matrix::filled(1, config.d_model, 1.0);
    block.ln2_beta = Matrix(1, config.d_model);
    p.blocks.push_back(std::move(block));
  }
  // Small readout so untrained predictions start close to uniform.
  p.output_projection = scale(xavier_uniform(config.d_model, config.vocab, rng), 0.1);
  return p;
}

MemoryBank empty_bank(const ModelConfig& config, const RetentionConfig& retention) {
  return MemoryBank(config.layers, empty_memory(retention.capacity, config.d_model));
}

ModelParams zeros_like(const ModelParams& params) {
  ModelParams out = shaped_like<Matrix>(params);
  visit_model([](const std::string&, const Matrix& src, Matrix& dst) { dst = Matrix(src.rows(), src.cols()); },
              params, out);
  return out;
}

std::size_t parameter_count(const ModelParams& params) {
  std::size_t n = 0;
  visit_model([&n](const std::string&, const Matrix& m) { n += m.size(); }, params);
  return n;
}

void validate_tokens(std::span<const std::size_t> tokens, const ModelConfig& config) {
  if (tokens.empty()) throw InputError("model_forward: empty token sequence");
  if (tokens.size() > config.max_len) {
    throw InputError("model_forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_len " +
                     std::to_string(config.max_len));
  }
  for (std::size_t t : tokens) {
    if (t >= config.vocab) {
      throw InputError("model_forward: token id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(config.vocab));
    }
  }
}

std::size_t argmax_row(const Matrix& m, std::size_t row) {
  const auto r = m.row(row);
  std::size_t best = 0;
  for (std::size_t j = 1; j < r.size(); ++j)
    if (r[j] > r[best]) best = j;
  return best;
}

namespace {

std::size_t count_correct(const Matrix& logits, std::span<const Target> targets) {
  std::size_t correct = 0;
  for (const Target& t : targets) correct += argmax_row(logits, t.row) == t.token ? 1 : 0;
  return correct;
}

void require_finite_loss(double loss) {
  if (!std::isfinite(loss)) throw NumericError("loss is not finite");
}

}  // namespace

LossAndGrads loss_and_grads(const Episode& episode, const MemoryBank& bank, const ModelParams& params,
                            const ModelConfig& config, const RetentionConfig& retention, Rng& rng, Mode mode) {
  if (episode.steps.empty()) throw std::invalid_argument("loss_and_grads: episode has no steps");
  Tape tape;
  ModelWeights<Var> weights = shaped_like<Var>(params);
  visit_model([&tape](const std::string&, const Matrix& p, Var& v) { v = tape.parameter(p); }, params, weights);

  Bank<Var> memory;
  memory.reserve(bank.size());
  for (const MemoryState& m : bank) memory.push_back(lift_memory(tape, m));

  LossAndGrads result;
  Var total;
  bool has_total = false;
  for (const EpisodeStep& step : episode.steps) {
    ForwardResult<Var> fwd = model_forward(std::span<const std::size_t>(step.tokens), memory, weights, config,
                                           retention, step.signal, mode, rng);
    if (!step.targets.empty()) {
      Var ce = cross_entropy_sum(fwd.logits, step.targets);
      total = has_total ? add(total, ce) : ce;
      has_total = true;
      result.targets += step.targets.size();
      result.correct += count_correct(fwd.logits.value(), step.targets);
    }
    memory = std::move(fwd.bank);
  }

  for (const auto& m : memory) result.bank.push_back(lower_memory(m));
  if (result.targets == 0) {
    result.grads = zeros_like(params);
    return result;
  }
  Var loss = scale(total, 1.0 / static_cast<double>(result.targets));
  result.loss = loss.value()(0, 0);
  require_finite_loss(result.loss);
  tape.backward(loss);

  result.grads = shaped_like<Matrix>(params);
  visit_model([&tape](const std::string&, const Var& v, Matrix& g) { g = tape.grad(v.id()); }, weights,
              result.grads);
  return result;
}

double episode_loss(const Episode& episode, const MemoryBank& bank, const ModelParams& params,
                    const ModelConfig& config, const RetentionConfig& retention, Rng& rng, Mode mode) {
  if (episode.steps.empty()) throw std::invalid_argument("episode_loss: episode has no steps");
  MemoryBank memory = bank;
  double total = 0.0;
  bool has_total = false;
  std::size_t targets = 0;
  for (const EpisodeStep& step : episode.steps) {
    ForwardResult<Matrix> fwd = model_forward(std::span<const std::size_t>(step.tokens), memory, params, config,
                                              retention, step.signal, mode, rng);
    if (!step.targets.empty()) {
      const double ce = cross_entropy_sum(fwd.logits, step.targets);
      total = has_total ? total + ce : ce;
      has_total = true;
      targets += step.targets.size();
    }
    memory = std::move(fwd.bank);
  }
  if (targets == 0) return 0.0;
  const double loss = total * (1.0 / static_cast<double>(targets));
  require_finite_loss(loss);
  return loss;
}

}  // namespace recall
