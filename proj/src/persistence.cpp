#include "recall/persistence.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include <unistd.h>

namespace recall {

const char* to_string(PersistenceErrorKind kind) {
  switch (kind) {
    case PersistenceErrorKind::Io:
      return "io";
    case PersistenceErrorKind::BadMagic:
      return "bad-magic";
    case PersistenceErrorKind::UnsupportedVersion:
      return "unsupported-version";
    case PersistenceErrorKind::ChecksumMismatch:
      return "checksum-mismatch";
    case PersistenceErrorKind::FingerprintMismatch:
      return "fingerprint-mismatch";
    case PersistenceErrorKind::Malformed:
      return "malformed";
  }
  return "unknown";
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001B3ULL;
  }
  return h;
}

namespace {

class ByteWriter {
 public:
  void bytes(std::span<const char> data) {
    for (char c : data) out_.push_back(static_cast<std::uint8_t>(c));
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }

  std::size_t size() const { return out_.size(); }
  std::vector<std::uint8_t>& buffer() { return out_; }

  /// Appends FNV-1a of everything after the 8-byte magic.
  void seal() {
    const std::uint64_t sum = fnv1a64(std::span<const std::uint8_t>(out_).subspan(8));
    u64(sum);
  }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto b = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    auto b = take(n);
    return std::string(b.begin(), b.end());
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > remaining()) throw PersistenceError(PersistenceErrorKind::Malformed, "unexpected end of payload");
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

// Validates magic, version and trailing checksum; returns the payload between
// the magic and the checksum.
std::span<const std::uint8_t> open_envelope(std::span<const std::uint8_t> bytes, const std::array<char, 8>& magic,
                                            std::uint32_t supported_version, const char* what) {
  const std::size_t magic_len = std::min<std::size_t>(bytes.size(), magic.size());
  if (std::memcmp(bytes.data(), magic.data(), magic_len) != 0) {
    throw PersistenceError(PersistenceErrorKind::BadMagic, std::string(what) + ": bad magic");
  }
  constexpr std::size_t kHeader = 8 + 4;
  if (bytes.size() < kHeader + 8) {
    throw PersistenceError(PersistenceErrorKind::ChecksumMismatch,
                           std::string(what) + ": truncated (" + std::to_string(bytes.size()) + " bytes)");
  }
  ByteReader version_reader(bytes.subspan(8, 4));
  const std::uint32_t version = version_reader.u32();
  if (version != supported_version) {
    throw PersistenceError(PersistenceErrorKind::UnsupportedVersion,
                           std::string(what) + ": unsupported format version " + std::to_string(version));
  }
  const auto payload = bytes.subspan(8, bytes.size() - 16);
  ByteReader sum_reader(bytes.subspan(bytes.size() - 8));
  if (fnv1a64(payload) != sum_reader.u64()) {
    throw PersistenceError(PersistenceErrorKind::ChecksumMismatch, std::string(what) + ": checksum mismatch");
  }
  return payload.subspan(4);
}

void write_memory(ByteWriter& w, const MemoryState& mem) {
  ByteWriter section;
  const std::size_t m = mem.capacity();
  section.u32(static_cast<std::uint32_t>(m));
  section.u32(static_cast<std::uint32_t>(mem.slots.cols()));
  section.u64(mem.next_seq);
  for (bool o : mem.occupied) section.u8(o ? 1 : 0);
  for (std::uint64_t s : mem.insert_seq) section.u64(s);
  for (double u : mem.usage) section.f64(u);
  for (double v : mem.slots.data()) section.f64(v);
  w.u64(section.size());
  auto& body = section.buffer();
  w.buffer().insert(w.buffer().end(), body.begin(), body.end());
}

MemoryState read_memory(ByteReader& r) {
  const std::uint64_t length = r.u64();
  const std::size_t start = r.position();
  const std::uint32_t m = r.u32();
  const std::uint32_t d = r.u32();
  const std::uint64_t expected = 8 + 8 + std::uint64_t{m} * (1 + 8 + 8) + std::uint64_t{m} * d * 8;
  if (length != expected || length - 8 > r.remaining()) {
    throw PersistenceError(PersistenceErrorKind::Malformed, "session: layer section length mismatch");
  }
  MemoryState mem = empty_memory(m, d);
  mem.next_seq = r.u64();
  for (std::size_t i = 0; i < m; ++i) {
    const std::uint8_t o = r.u8();
    if (o > 1) throw PersistenceError(PersistenceErrorKind::Malformed, "session: occupancy flag out of range");
    mem.occupied[i] = o == 1;
  }
  for (auto& s : mem.insert_seq) s = r.u64();
  for (auto& u : mem.usage) u = r.f64();
  for (double& v : mem.slots.data()) v = r.f64();
  if (r.position() - start != length) throw PersistenceError(PersistenceErrorKind::Malformed, "session: section overrun");
  return mem;
}

}  // namespace

std::uint64_t model_fingerprint(const ModelConfig& model, std::size_t capacity) {
  ByteWriter w;
  for (std::uint64_t v : {std::uint64_t{model.d_model}, std::uint64_t{model.d_k}, std::uint64_t{model.heads},
                          std::uint64_t{model.layers}, std::uint64_t{capacity}, std::uint64_t{model.vocab},
                          std::uint64_t{model.max_len}}) {
    w.u64(v);
  }
  return fnv1a64(w.buffer());
}

std::vector<std::uint8_t> encode_session(const SessionStore& store) {
  ByteWriter w;
  w.bytes(kSessionMagic);
  w.u32(store.format_version);
  w.u32(static_cast<std::uint32_t>(store.banks.size()));
  w.u64(store.model_fingerprint);
  w.i64(store.created_unix);
  w.i64(store.updated_unix);
  for (const MemoryState& mem : store.banks) write_memory(w, mem);
  w.seal();
  return std::move(w.buffer());
}

SessionStore decode_session(std::span<const std::uint8_t> bytes, std::optional<std::uint64_t> expected_fingerprint) {
  ByteReader r(open_envelope(bytes, kSessionMagic, kSessionFormatVersion, "session"));
  SessionStore store;
  store.format_version = kSessionFormatVersion;
  const std::uint32_t layers = r.u32();
  store.model_fingerprint = r.u64();
  if (expected_fingerprint && *expected_fingerprint != store.model_fingerprint) {
    throw PersistenceError(PersistenceErrorKind::FingerprintMismatch,
                           "session: saved for a different model configuration");
  }
  store.created_unix = r.i64();
  store.updated_unix = r.i64();
  for (std::uint32_t l = 0; l < layers; ++l) store.banks.push_back(read_memory(r));
  if (r.remaining() != 0) throw PersistenceError(PersistenceErrorKind::Malformed, "session: trailing bytes");
  for (const MemoryState& mem : store.banks) {
    if (auto bad = memory_invariant_violation(mem)) {
      throw PersistenceError(PersistenceErrorKind::Malformed, "session: " + *bad);
    }
  }
  return store;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& source) {
  std::ifstream in(source, std::ios::binary);
  if (!in) throw PersistenceError(PersistenceErrorKind::Io, "cannot open " + source.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw PersistenceError(PersistenceErrorKind::Io, "read failed for " + source.string());
  return bytes;
}

void atomic_write(const std::filesystem::path& destination, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = destination;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError(PersistenceErrorKind::Io, "cannot create " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ignored;
      std::filesystem::remove(tmp, ignored);
      throw PersistenceError(PersistenceErrorKind::Io, "write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, destination, ec);
  if (ec) {
    std::error_code ignored;
    std::filesystem::remove(tmp, ignored);
    throw PersistenceError(PersistenceErrorKind::Io, "cannot replace " + destination.string() + ": " + ec.message());
  }
}

void save_session(const SessionStore& store, const std::filesystem::path& destination) {
  atomic_write(destination, encode_session(store));
}

SessionStore load_session(const std::filesystem::path& source, std::optional<std::uint64_t> expected_fingerprint) {
  return decode_session(read_file(source), expected_fingerprint);
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointFormatVersion);
  for (std::uint64_t v : {std::uint64_t{c.model.vocab}, std::uint64_t{c.model.d_model}, std::uint64_t{c.model.d_k},
                          std::uint64_t{c.model.heads}, std::uint64_t{c.model.d_ff}, std::uint64_t{c.model.layers},
                          std::uint64_t{c.model.max_len}}) {
    w.u64(v);
  }
  w.f64(c.model.dropout);
  w.f64(c.model.ln_eps);
  w.u8(c.model.causal ? 1 : 0);

  w.u64(c.retention.capacity);
  w.u8(c.retention.write_mode == WriteMode::Blend ? 1 : 0);
  w.u8(static_cast<std::uint8_t>(c.retention.gate.kind));
  w.f64(c.retention.gate.threshold);
  w.f64(c.retention.decay_rate);
  w.f64(c.retention.compaction_floor);
  w.u64(c.retention.read_heads);

  w.u64(c.task.num_keys);
  w.u64(c.task.num_values);
  w.u64(c.task.num_pairs);

  std::uint32_t count = 0;
  visit_model([&count](const std::string&, const Matrix&) { ++count; }, c.params);
  w.u32(count);
  visit_model(
      [&w](const std::string& name, const Matrix& m) {
        w.str(name);
        w.u64(m.rows());
        w.u64(m.cols());
        for (double v : m.data()) w.f64(v);
      },
      c.params);
  w.seal();
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(open_envelope(bytes, kCheckpointMagic, kCheckpointFormatVersion, "checkpoint"));
  Checkpoint c;
  c.model.vocab = r.u64();
  c.model.d_model = r.u64();
  c.model.d_k = r.u64();
  c.model.heads = r.u64();
  c.model.d_ff = r.u64();
  c.model.layers = r.u64();
  c.model.max_len = r.u64();
  c.model.dropout = r.f64();
  c.model.ln_eps = r.f64();
  c.model.causal = r.u8() != 0;

  c.retention.capacity = r.u64();
  c.retention.write_mode = r.u8() == 1 ? WriteMode::Blend : WriteMode::Append;
  const std::uint8_t gate = r.u8();
  if (gate > 2) throw PersistenceError(PersistenceErrorKind::Malformed, "checkpoint: unknown gate kind");
  c.retention.gate.kind = static_cast<WriteGate::Kind>(gate);
  c.retention.gate.threshold = r.f64();
  c.retention.decay_rate = r.f64();
  c.retention.compaction_floor = r.f64();
  c.retention.read_heads = r.u64();

  c.task.num_keys = r.u64();
  c.task.num_values = r.u64();
  c.task.num_pairs = r.u64();

  try {
    c.model.validate();
    c.retention.validate();
  } catch (const std::invalid_argument& e) {
    throw PersistenceError(PersistenceErrorKind::Malformed, std::string("checkpoint: ") + e.what());
  }

  // Shapes come from a fresh initialization of the stored configuration.
  Rng shape_rng(0);
  c.params = init_params(c.model, shape_rng);
  std::uint32_t expected = 0;
  visit_model([&expected](const std::string&, const Matrix&) { ++expected; }, c.params);
  if (r.u32() != expected) throw PersistenceError(PersistenceErrorKind::Malformed, "checkpoint: tensor count mismatch");
  visit_model(
      [&r](const std::string& name, Matrix& m) {
        const std::string stored = r.str();
        const std::uint64_t rows = r.u64();
        const std::uint64_t cols = r.u64();
        if (stored != name || rows != m.rows() || cols != m.cols()) {
          throw PersistenceError(PersistenceErrorKind::Malformed, "checkpoint: unexpected tensor " + stored);
        }
        for (double& v : m.data()) v = r.f64();
      },
      c.params);
  if (r.remaining() != 0) throw PersistenceError(PersistenceErrorKind::Malformed, "checkpoint: trailing bytes");
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& destination) {
  atomic_write(destination, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& source) { return decode_checkpoint(read_file(source)); }

}  // namespace recall
