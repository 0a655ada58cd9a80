#include "cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>

#include "CLI11.hpp"
#include "recall/persistence.hpp"
#include "recall/train.hpp"

namespace recall::cli {

namespace {

namespace fs = std::filesystem;

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Advisory lock: `<session>.lock`, created exclusively, removed on scope exit.
class SessionLock {
 public:
  explicit SessionLock(const fs::path& session) : path_(session.string() + ".lock") {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      throw PersistenceError(PersistenceErrorKind::Io,
                             "session is locked or lock cannot be created: " + path_.string() + " (" +
                                 std::strerror(errno) + ")");
    }
    ::close(fd);
  }
  ~SessionLock() {
    std::error_code ignored;
    fs::remove(path_, ignored);
  }
  SessionLock(const SessionLock&) = delete;
  SessionLock& operator=(const SessionLock&) = delete;

 private:
  fs::path path_;
};

std::int64_t now_unix() {
  if (const char* fixed = std::getenv("SOURCE_DATE_EPOCH")) {
    try {
      return std::stoll(fixed);
    } catch (const std::exception&) {
      throw UsageError("SOURCE_DATE_EPOCH is not an integer");
    }
  }
  return static_cast<std::int64_t>(std::time(nullptr));
}

WriteGate parse_gate(const std::string& text) {
  if (text == "always") return WriteGate::always();
  if (text == "never") return WriteGate::never();
  if (text.rfind("threshold=", 0) == 0) {
    try {
      std::size_t used = 0;
      const std::string number = text.substr(10);
      const double tau = std::stod(number, &used);
      if (used == number.size()) return WriteGate::at_least(tau);
    } catch (const std::exception&) {
    }
  }
  throw UsageError("--gate must be always, never or threshold=<real>, got '" + text + "'");
}

std::string gate_name(const WriteGate& gate) {
  switch (gate.kind) {
    case WriteGate::Kind::Always:
      return "always";
    case WriteGate::Kind::Never:
      return "never";
    case WriteGate::Kind::Threshold: {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "threshold=%g", gate.threshold);
      return buf;
    }
  }
  return "?";
}

struct GlobalFlags {
  std::uint64_t seed = 0;
  std::string session;
  std::string checkpoint;
};

struct TrainFlags {
  TaskConfig task;
  ModelConfig model;
  RetentionConfig retention;
  TrainConfig train;
  std::string write_mode = "blend";
  std::string gate = "threshold=0.5";
  std::string metrics;
  std::size_t eval_episodes = 500;
};

struct InferFlags {
  std::vector<std::string> tokens;
  std::string gate;
  double signal = 0.0;
};

struct MemoryFlags {
  std::size_t top = 5;
  std::string query;
  std::optional<double> floor;
};

const std::string& require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required for this command");
  return value;
}

void print_memory_summary(std::ostream& out, const MemoryBank& bank) {
  for (std::size_t l = 0; l < bank.size(); ++l) {
    out << "# layer " << l << ": " << bank[l].occupied_count() << " occupied of " << bank[l].capacity()
        << " slots\n";
    out << "layer=" << l << " occupied=" << bank[l].occupied_count() << " capacity=" << bank[l].capacity()
        << " next_seq=" << bank[l].next_seq << "\n";
  }
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

int cmd_train(const GlobalFlags& global, TrainFlags flags, std::ostream& out) {
  const fs::path checkpoint_path = require(global.checkpoint, "--checkpoint");
  if (flags.write_mode == "append") {
    flags.retention.write_mode = WriteMode::Append;
  } else if (flags.write_mode == "blend") {
    flags.retention.write_mode = WriteMode::Blend;
  } else {
    throw UsageError("--write-mode must be append or blend");
  }
  flags.retention.gate = parse_gate(flags.gate);
  flags.model.max_len = std::max(flags.model.max_len, recall_sequence_length(flags.task));
  try {
    flags.model.validate();
    flags.retention.validate();
    Vocabulary check(flags.task, flags.model.vocab);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  std::ofstream metrics;
  if (!flags.metrics.empty()) {
    metrics.open(flags.metrics, std::ios::trunc);
    if (!metrics) throw PersistenceError(PersistenceErrorKind::Io, "cannot open metrics log " + flags.metrics);
  }
  const TrainResult result =
      train(flags.task, flags.model, flags.retention, flags.train, global.seed, [&metrics](const MetricsRecord& r) {
        if (metrics.is_open()) metrics << format_metrics(r) << '\n' << std::flush;
      });

  save_checkpoint({flags.model, flags.retention, flags.task, result.params}, checkpoint_path);
  if (!global.session.empty()) {
    SessionStore store;
    store.model_fingerprint = model_fingerprint(flags.model, flags.retention.capacity);
    store.created_unix = store.updated_unix = now_unix();
    store.banks = result.bank;
    save_session(store, global.session);
  }

  const RecallEvaluation eval = evaluate_recall(result.params, flags.task, flags.model, flags.retention,
                                                flags.eval_episodes, seed_streams(global.seed).data.split(7).key());
  const double final_loss = result.log.empty() ? 0.0 : result.log.back().loss;
  const double final_acc = result.log.empty() ? 0.0 : result.log.back().recall_accuracy;
  out << "train steps=" << flags.train.steps << " final_loss=" << format_real(final_loss)
      << " recall_acc=" << format_real(final_acc) << " eval_acc=" << format_real(eval.accuracy) << "\n";
  return kOk;
}

int cmd_infer(const GlobalFlags& global, const InferFlags& flags, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(require(global.checkpoint, "--checkpoint"));
  const Vocabulary vocab(ckpt.task, ckpt.model.vocab);
  std::string joined;
  for (const auto& t : flags.tokens) joined += t + " ";
  std::vector<std::size_t> tokens;
  try {
    tokens = vocab.parse_sequence(joined);
  } catch (const InputError& e) {
    throw UsageError(e.what());
  }
  if (tokens.empty()) throw UsageError("infer: no input tokens");

  RetentionConfig retention = ckpt.retention;
  if (!flags.gate.empty()) retention.gate = parse_gate(flags.gate);
  const std::uint64_t fingerprint = model_fingerprint(ckpt.model, retention.capacity);

  std::optional<SessionLock> lock;
  SessionStore store;
  store.model_fingerprint = fingerprint;
  store.banks = empty_bank(ckpt.model, retention);
  const std::int64_t now = now_unix();
  store.created_unix = store.updated_unix = now;
  if (!global.session.empty()) {
    lock.emplace(global.session);
    if (fs::exists(global.session)) store = load_session(global.session, fingerprint);
  }

  Rng rng(global.seed);
  ForwardTrace trace;
  ForwardResult<Matrix> fwd;
  try {
    fwd = model_forward(std::span<const std::size_t>(tokens), store.banks, ckpt.params, ckpt.model, retention,
                        WriteSignal{flags.signal}, Mode::Eval, rng, &trace);
  } catch (const InputError& e) {
    throw UsageError(e.what());
  }

  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] == vocab.ask_token()) positions.push_back(i);
  if (positions.empty()) positions.push_back(tokens.size() - 1);

  std::string predicted;
  for (std::size_t pos : positions) {
    const std::size_t token = argmax_row(fwd.logits, pos);
    if (!predicted.empty()) predicted += ' ';
    predicted += vocab.name(token);
    out << "predict pos=" << pos << " token=" << vocab.name(token) << " id=" << token << "\n";
  }
  out << "# predicted: " << predicted << "\n";
  const bool wrote = gate_write(WriteSignal{flags.signal}, retention);
  out << "gate=" << gate_name(retention.gate) << " signal=" << format_real(flags.signal)
      << " wrote=" << (wrote ? 1 : 0) << "\n";

  store.banks = std::move(fwd.bank);
  store.updated_unix = now;
  print_memory_summary(out, store.banks);
  if (!global.session.empty()) save_session(store, global.session);
  return kOk;
}

int cmd_memory(const GlobalFlags& global, const std::string& action, const MemoryFlags& flags, std::ostream& out) {
  const fs::path session = require(global.session, "--session");
  SessionLock lock(session);
  if (!fs::exists(session)) throw PersistenceError(PersistenceErrorKind::Io, "no session at " + session.string());

  std::optional<Checkpoint> ckpt;
  if (!global.checkpoint.empty()) ckpt = load_checkpoint(global.checkpoint);
  std::optional<std::uint64_t> fingerprint;
  if (ckpt) fingerprint = model_fingerprint(ckpt->model, ckpt->retention.capacity);
  SessionStore store = load_session(session, fingerprint);

  if (action == "inspect") {
    print_memory_summary(out, store.banks);
    for (std::size_t l = 0; l < store.banks.size(); ++l) {
      const MemoryState& mem = store.banks[l];
      for (std::size_t i = 0; i < mem.capacity(); ++i) {
        if (!mem.occupied[i]) continue;
        out << "slot layer=" << l << " index=" << i << " insert_seq=" << mem.insert_seq[i]
            << " usage=" << format_real(mem.usage[i]) << "\n";
      }
    }
    if (!flags.query.empty()) {
      if (!ckpt) throw UsageError("memory inspect --query needs --checkpoint");
      if (flags.top == 0) throw UsageError("--top must be at least 1");
      const Vocabulary vocab(ckpt->task, ckpt->model.vocab);
      std::vector<std::size_t> tokens;
      try {
        tokens = vocab.parse_sequence(flags.query);
      } catch (const InputError& e) {
        throw UsageError(e.what());
      }
      RetentionConfig probe = ckpt->retention;
      probe.gate = WriteGate::never();
      Rng rng(global.seed);
      ForwardTrace trace;
      model_forward(std::span<const std::size_t>(tokens), store.banks, ckpt->params, ckpt->model, probe,
                    WriteSignal{}, Mode::Eval, rng, &trace);
      for (std::size_t l = 0; l < store.banks.size(); ++l) {
        const Matrix query = make_write_vector(trace.normed[l]);
        const auto ranked = score_slots(query, store.banks[l], ckpt->params.blocks[l].ret, flags.top);
        for (std::size_t r = 0; r < ranked.size(); ++r) {
          out << "score layer=" << l << " rank=" << r + 1 << " slot=" << ranked[r].slot
              << " score=" << format_real(ranked[r].score) << "\n";
        }
      }
    }
    return kOk;
  }

  if (action == "compact") {
    RetentionConfig config = ckpt ? ckpt->retention : RetentionConfig{};
    if (flags.floor) config.compaction_floor = *flags.floor;
    for (auto& mem : store.banks) mem = compact(mem, config);
  } else if (action == "clear") {
    for (auto& mem : store.banks) {
      const std::uint64_t next = mem.next_seq;
      mem = empty_memory(mem.capacity(), mem.slots.cols());
      mem.next_seq = next;
    }
  } else {
    throw UsageError("memory action must be inspect, compact or clear");
  }
  store.updated_unix = now_unix();
  save_session(store, session);
  print_memory_summary(out, store.banks);
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Transformer with a persistent retention memory: train, infer, inspect memory", "recall"};
  app.require_subcommand(1);
  // A repeated flag takes its last value, so later flags override earlier ones.
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.fallthrough();
  app.set_config("--config", "", "Read flags from an INI/TOML file");

  GlobalFlags global;
  app.add_option("--seed", global.seed, "Run seed")->capture_default_str();
  app.add_option("--session", global.session, "Session file holding the memory bank");
  app.add_option("--checkpoint", global.checkpoint, "Model checkpoint file");

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "Train on the associative recall task");
  train_cmd->add_option("--steps", tf.train.steps, "Optimizer steps")->capture_default_str();
  train_cmd->add_option("--batch", tf.train.batch_size, "Episodes per step")->capture_default_str();
  train_cmd->add_option("--lr", tf.train.learning_rate, "Adam learning rate")->capture_default_str();
  train_cmd->add_option("--log-every", tf.train.log_every, "Steps per metrics record")->capture_default_str();
  train_cmd->add_option("--metrics", tf.metrics, "Metrics log path");
  train_cmd->add_option("--eval-episodes", tf.eval_episodes, "Held-out episodes for the summary")->capture_default_str();
  train_cmd->add_option("--keys", tf.task.num_keys, "Distinct keys")->capture_default_str();
  train_cmd->add_option("--values", tf.task.num_values, "Distinct values")->capture_default_str();
  train_cmd->add_option("--pairs", tf.task.num_pairs, "Pairs per episode")->capture_default_str();
  train_cmd->add_option("--vocab", tf.model.vocab, "Vocabulary size")->capture_default_str();
  train_cmd->add_option("--d-model", tf.model.d_model, "Embedding width")->capture_default_str();
  train_cmd->add_option("--d-k", tf.model.d_k, "Query/key width per head")->capture_default_str();
  train_cmd->add_option("--heads", tf.model.heads, "Self-attention heads")->capture_default_str();
  train_cmd->add_option("--d-ff", tf.model.d_ff, "FFN hidden width")->capture_default_str();
  train_cmd->add_option("--layers", tf.model.layers, "Transformer blocks")->capture_default_str();
  train_cmd->add_option("--max-len", tf.model.max_len, "Maximum sequence length")->capture_default_str();
  train_cmd->add_option("--dropout", tf.model.dropout, "Dropout probability")->capture_default_str();
  train_cmd->add_option("--capacity", tf.retention.capacity, "Memory slots per layer")->capture_default_str();
  train_cmd->add_option("--write-mode", tf.write_mode, "append or blend")->capture_default_str();
  train_cmd->add_option("--gate", tf.gate, "always, never or threshold=<tau>")->capture_default_str();
  train_cmd->add_option("--decay", tf.retention.decay_rate, "Usage decay")->capture_default_str();
  train_cmd->add_option("--floor", tf.retention.compaction_floor, "Compaction usage floor")->capture_default_str();

  InferFlags inf;
  auto* infer_cmd = app.add_subcommand("infer", "One forward pass with a resumable session");
  infer_cmd->add_option("tokens", inf.tokens, "Whitespace-separated tokens, e.g. k3 v7 or Q k3 ?")->required();
  infer_cmd->add_option("--gate", inf.gate, "Override the write gate: always, never or threshold=<tau>");
  infer_cmd->add_option("--signal", inf.signal, "Write signal compared against the gate")->capture_default_str();

  MemoryFlags mf;
  std::string action;
  auto* memory_cmd = app.add_subcommand("memory", "Inspect, compact or clear a session's memory");
  memory_cmd->add_option("action", action, "inspect | compact | clear")->required();
  memory_cmd->add_option("--top", mf.top, "Slots reported per layer for --query")->capture_default_str();
  memory_cmd->add_option("--query", mf.query, "Tokens to score memory slots against");
  memory_cmd->add_option("--floor", mf.floor, "Compaction usage floor");

  std::vector<std::string> argv_storage;
  argv_storage.reserve(args.size() + 1);
  argv_storage.emplace_back("recall");
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_storage) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(global, tf, out);
    if (infer_cmd->parsed()) return cmd_infer(global, inf, out);
    if (memory_cmd->parsed()) return cmd_memory(global, action, mf, out);
    err << "usage error: no subcommand\n";
    return kUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const PersistenceError& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  }
}

}  // namespace recall::cli
