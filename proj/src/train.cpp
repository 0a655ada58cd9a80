#include "recall/train.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace recall {

std::string format_metrics(const MetricsRecord& record) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "step=%zu loss=%.9f recall_acc=%.6f", record.step, record.loss,
                record.recall_accuracy);
  return buf;
}

std::optional<MetricsRecord> parse_metrics(std::string_view line) {
  MetricsRecord r;
  bool has_step = false, has_loss = false, has_acc = false;
  std::istringstream in{std::string(line)};
  std::string field;
  while (in >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) return std::nullopt;
    const std::string key = field.substr(0, eq);
    const std::string value = field.substr(eq + 1);
    try {
      if (key == "step") {
        r.step = std::stoull(value);
        has_step = true;
      } else if (key == "loss") {
        r.loss = std::stod(value);
        has_loss = true;
      } else if (key == "recall_acc") {
        r.recall_accuracy = std::stod(value);
        has_acc = true;
      }
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }
  if (!has_step || !has_loss || !has_acc) return std::nullopt;
  return r;
}

AdamOptimizer::AdamOptimizer(const ModelParams& like, const TrainConfig& config)
    : config_(config), first_moment_(zeros_like(like)), second_moment_(zeros_like(like)) {}

void AdamOptimizer::step(ModelParams& params, const ModelParams& grads) {
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double lr = config_.learning_rate;
  const double eps = config_.epsilon;
  visit_model(
      [&](const std::string&, Matrix& p, const Matrix& g, Matrix& m, Matrix& v) {
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double gi = g.data()[i];
          double& mi = m.data()[i];
          double& vi = v.data()[i];
          mi = b1 * mi + (1.0 - b1) * gi;
          vi = b2 * vi + (1.0 - b2) * gi * gi;
          const double m_hat = mi / correction1;
          const double v_hat = vi / correction2;
          p.data()[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
        }
      },
      params, grads, first_moment_, second_moment_);
}

SeedStreams seed_streams(std::uint64_t seed) {
  const Rng root(seed);
  return {root.split(1), root.split(2), root.split(3)};
}

namespace {

void add_into(ModelParams& acc, const ModelParams& g) {
  visit_model(
      [](const std::string&, Matrix& a, const Matrix& b) {
        for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
      },
      acc, g);
}

void scale_in_place(ModelParams& p, double factor) {
  visit_model(
      [factor](const std::string&, Matrix& a) {
        for (double& v : a.data()) v *= factor;
      },
      p);
}

}  // namespace

TrainResult train(const TaskConfig& task, const ModelConfig& model, const RetentionConfig& retention,
                  const TrainConfig& config, std::uint64_t seed, const MetricsSink& sink) {
  model.validate();
  retention.validate();
  if (config.batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  const Vocabulary vocab(task, model.vocab);
  if (recall_sequence_length(task) > model.max_len) {
    throw std::invalid_argument("train: max_len " + std::to_string(model.max_len) + " shorter than task sequences");
  }

  SeedStreams streams = seed_streams(seed);
  TrainResult result;
  result.params = init_params(model, streams.init);
  result.bank = empty_bank(model, retention);
  AdamOptimizer optimizer(result.params, config);
  const std::size_t log_every = config.log_every == 0 ? config.steps : config.log_every;

  double interval_loss = 0.0;
  std::size_t interval_batches = 0;
  std::size_t interval_targets = 0;
  std::size_t interval_correct = 0;

  for (std::size_t step = 1; step <= config.steps; ++step) {
    ModelParams grads = zeros_like(result.params);
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const Episode episode = gen_recall_episode(streams.data, task, vocab);
      LossAndGrads lg;
      try {
        lg = loss_and_grads(episode, empty_bank(model, retention), result.params, model, retention, streams.dropout);
      } catch (const NumericError& e) {
        throw NumericError("train: diverged at step " + std::to_string(step) + ": " + e.what());
      }
      add_into(grads, lg.grads);
      batch_loss += lg.loss;
      interval_targets += lg.targets;
      interval_correct += lg.correct;
      result.bank = std::move(lg.bank);
    }
    scale_in_place(grads, 1.0 / static_cast<double>(config.batch_size));
    optimizer.step(result.params, grads);

    interval_loss += batch_loss / static_cast<double>(config.batch_size);
    ++interval_batches;
    if (step % log_every == 0 || step == config.steps) {
      MetricsRecord record;
      record.step = step;
      record.loss = interval_loss / static_cast<double>(interval_batches);
      record.recall_accuracy =
          interval_targets ? static_cast<double>(interval_correct) / static_cast<double>(interval_targets) : 0.0;
      result.log.push_back(record);
      if (sink) sink(record);
      interval_loss = 0.0;
      interval_batches = 0;
      interval_targets = 0;
      interval_correct = 0;
    }
  }
  return result;
}

RecallEvaluation evaluate_recall(const ModelParams& params, const TaskConfig& task, const ModelConfig& model,
                                 const RetentionConfig& retention, std::size_t episodes, std::uint64_t seed) {
  const Vocabulary vocab(task, model.vocab);
  Rng data(seed);
  Rng unused(0);
  RecallEvaluation eval;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (std::size_t e = 0; e < episodes; ++e) {
    const Episode episode = gen_recall_episode(data, task, vocab);
    MemoryBank bank = empty_bank(model, retention);
    for (const EpisodeStep& step : episode.steps) {
      ForwardResult<Matrix> fwd = model_forward(std::span<const std::size_t>(step.tokens), bank, params, model,
                                                retention, step.signal, Mode::Eval, unused);
      for (const Target& t : step.targets) correct += argmax_row(fwd.logits, t.row) == t.token ? 1 : 0;
      if (!step.targets.empty()) loss_sum += cross_entropy_sum(fwd.logits, step.targets);
      eval.targets += step.targets.size();
      bank = std::move(fwd.bank);
    }
  }
  if (eval.targets) {
    eval.accuracy = static_cast<double>(correct) / static_cast<double>(eval.targets);
    eval.loss = loss_sum / static_cast<double>(eval.targets);
  }
  return eval;
}

}  // namespace recall
