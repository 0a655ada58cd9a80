#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "recall/model.hpp"
#include "recall/task.hpp"

namespace recall {

struct TrainConfig {
  std::size_t steps = 4000;
  std::size_t batch_size = 8;
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t log_every = 100;
};

/// One metrics line: mean loss and query accuracy over the batches since the
/// previous record.
struct MetricsRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double recall_accuracy = 0.0;
};

/// "step=<n> loss=<%.9f> recall_acc=<%.6f>"
std::string format_metrics(const MetricsRecord& record);
std::optional<MetricsRecord> parse_metrics(std::string_view line);

class AdamOptimizer {
 public:
  AdamOptimizer(const ModelParams& like, const TrainConfig& config);

  void step(ModelParams& params, const ModelParams& grads);
  std::size_t steps_taken() const { return t_; }

 private:
  TrainConfig config_;
  ModelParams first_moment_;
  ModelParams second_moment_;
  std::size_t t_ = 0;
};

struct TrainResult {
  ModelParams params;
  std::vector<MetricsRecord> log;
  MemoryBank bank;  // memory left by the final training episode
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

/// Independent random streams derived from the run seed.
struct SeedStreams {
  Rng init;
  Rng data;
  Rng dropout;
};
SeedStreams seed_streams(std::uint64_t seed);

/// Adam over batches of freshly generated recall episodes; each episode starts
/// from an empty bank. Throws NumericError with the step number on divergence.
TrainResult train(const TaskConfig& task, const ModelConfig& model, const RetentionConfig& retention,
                  const TrainConfig& config, std::uint64_t seed, const MetricsSink& sink = {});

struct RecallEvaluation {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t targets = 0;
};

/// Eval-mode query accuracy over `episodes` generated from `seed`, each from an empty bank.
RecallEvaluation evaluate_recall(const ModelParams& params, const TaskConfig& task, const ModelConfig& model,
                                 const RetentionConfig& retention, std::size_t episodes, std::uint64_t seed);

}  // namespace recall
