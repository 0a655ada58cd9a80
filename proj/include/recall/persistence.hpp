#pragma once

// Binary session and checkpoint files. Layouts are documented in
// docs/file-formats.md; all integers little-endian, reals IEEE-754 binary64.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "recall/model.hpp"
#include "recall/retention.hpp"
#include "recall/task.hpp"

namespace recall {

enum class PersistenceErrorKind { Io, BadMagic, UnsupportedVersion, ChecksumMismatch, FingerprintMismatch, Malformed };

const char* to_string(PersistenceErrorKind kind);

class PersistenceError : public std::runtime_error {
 public:
  PersistenceError(PersistenceErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  PersistenceErrorKind kind() const { return kind_; }

 private:
  PersistenceErrorKind kind_;
};

inline constexpr std::array<char, 8> kSessionMagic = {'R', 'C', 'L', 'S', 'E', 'S', 'S', '\0'};
inline constexpr std::array<char, 8> kCheckpointMagic = {'R', 'C', 'L', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kSessionFormatVersion = 1;
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct SessionStore {
  std::uint32_t format_version = kSessionFormatVersion;
  std::uint64_t model_fingerprint = 0;
  std::int64_t created_unix = 0;
  std::int64_t updated_unix = 0;
  MemoryBank banks;  // one MemoryState per layer, next_seq included
};

/// FNV-1a 64-bit hash.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

/// Hash of (d_model, d_k, heads, layers, capacity, vocab, max_len).
std::uint64_t model_fingerprint(const ModelConfig& model, std::size_t capacity);

std::vector<std::uint8_t> encode_session(const SessionStore& store);
/// Checks magic, version, checksum, then (when given) the fingerprint, in that order.
SessionStore decode_session(std::span<const std::uint8_t> bytes,
                            std::optional<std::uint64_t> expected_fingerprint = std::nullopt);

/// Writes to a sibling temporary file and renames it over `destination`.
void save_session(const SessionStore& store, const std::filesystem::path& destination);
SessionStore load_session(const std::filesystem::path& source,
                          std::optional<std::uint64_t> expected_fingerprint = std::nullopt);

/// Everything needed to rebuild a trained model.
struct Checkpoint {
  ModelConfig model;
  RetentionConfig retention;
  TaskConfig task;
  ModelParams params;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& destination);
Checkpoint load_checkpoint(const std::filesystem::path& source);

std::vector<std::uint8_t> read_file(const std::filesystem::path& source);
void atomic_write(const std::filesystem::path& destination, std::span<const std::uint8_t> bytes);

}  // namespace recall
