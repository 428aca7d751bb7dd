/// \file checkpoint.hpp
/// In-memory neighbor checkpointing. Every rank keeps its own latest static
/// and dynamic checkpoint and additionally holds copies for its ring
/// predecessor: rank r's frames live at r itself and at holder (r+1) mod n.
/// Stores are two-phase (stage over point-to-point, verify with a collective,
/// then commit) so the latest committed epoch is identical on every rank.
///
/// Frame layout, packed little-endian:
///   magic "RKCP" | version u16 | kind u8 | owner u32 | epoch u32 |
///   payload_len u64 | checksum u64 (FNV-1a 64 of payload) | payload
///
/// A local snapshot slot gives the solver cheap same-process rollback for
/// soft-error recovery, independent of the neighbor machinery.

#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "resilab/runtime.hpp"

namespace resilab::checkpoint {

enum class Kind : std::uint8_t { Static = 0, Dynamic = 1 };

inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderSize = 4 + 2 + 1 + 4 + 4 + 8 + 8;

struct Header {
  std::uint16_t version = kFormatVersion;
  Kind kind = Kind::Static;
  std::uint32_t owner = 0;
  std::uint32_t epoch = 0;
  std::uint64_t payload_len = 0;
  std::uint64_t checksum = 0;
};

class CorruptCheckpoint : public std::runtime_error {
 public:
  explicit CorruptCheckpoint(const std::string& what) : std::runtime_error(what) {}
};

/// Misuse of the snapshot or store API (nested snapshots, stale tokens).
class UsageError : public std::logic_error {
 public:
  explicit UsageError(const std::string& what) : std::logic_error(what) {}
};

/// Raised by fetch_for_restore when some rank's frames are gone from both
/// the rank and its holder, i.e. rank and holder failed in the same repair
/// window. Recovery is impossible; callers abort rather than guess.
class HolderDead : public std::runtime_error {
 public:
  explicit HolderDead(runtime::RankId owner)
      : std::runtime_error("checkpoint chain broken: rank " + std::to_string(owner) +
                           " and its holder are both gone"),
        owner_(owner) {}
  runtime::RankId owner() const { return owner_; }

 private:
  runtime::RankId owner_;
};

std::vector<std::uint8_t> encode_frame(Kind kind, std::uint32_t owner, std::uint32_t epoch,
                                       const std::vector<std::uint8_t>& payload);

struct DecodedFrame {
  Header header;
  std::vector<std::uint8_t> payload;
};

/// Throws CorruptCheckpoint on bad magic, version, truncation, or checksum.
DecodedFrame decode_frame(const std::vector<std::uint8_t>& frame);

// -- payload serialization helpers -------------------------------------------

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v);
  void doubles(const std::vector<double>& v);
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64();
  std::vector<double> doubles();
  bool done() const { return at_ == buf_.size(); }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t at_ = 0;
};

// -- neighbor store -----------------------------------------------------------

/// Rank-local checkpoint memory: the rank's own latest frames plus the
/// frames it holds for its ring predecessor. All frames are stored framed,
/// exactly as transferred, so restores can be compared bitwise against
/// stores.
struct NeighborStore {
  std::optional<std::vector<std::uint8_t>> own_static;
  std::optional<std::vector<std::uint8_t>> own_dynamic;
  std::optional<std::vector<std::uint8_t>> held_static;
  std::optional<std::vector<std::uint8_t>> held_dynamic;

  /// Epoch of a stored dynamic frame, or -1 when absent.
  static std::int64_t dynamic_epoch(const std::optional<std::vector<std::uint8_t>>& frame);
};

inline runtime::RankId holder_of(runtime::RankId r, int n) { return (r + 1) % n; }
inline runtime::RankId predecessor_of(runtime::RankId r, int n) { return (r + n - 1) % n; }

/// Collective two-phase store: every rank frames its payload, stages it at
/// its holder, all verify, then everyone commits own and held copies.
/// Returns the framed size in bytes. Throws CommError if the world breaks
/// mid-store (nothing commits anywhere) and CorruptCheckpoint if
/// verification fails.
std::size_t store_blob(runtime::RankCtx& ctx, const runtime::Comm& comm, NeighborStore& store,
                       Kind kind, std::uint32_t epoch, const std::vector<std::uint8_t>& payload);

/// What a rank gets back from the restore rendezvous.
struct RestoreOutcome {
  std::uint32_t epoch = 0;                ///< dynamic epoch restored; 0 = restart from init
  bool have_dynamic = false;              ///< epoch > 0; payload below is valid
  std::vector<std::uint8_t> dynamic_payload;
  bool fetched_static = false;            ///< true for ranks that had to pull static state
  std::vector<std::uint8_t> static_payload;
};

/// Collective restore rendezvous over the repaired communicator. Determines
/// the newest epoch available for every rank, pulls missing own copies from
/// holders, refills holders that lost their predecessor's frames, and
/// returns the payloads to rebuild from. Every rank computes the same plan
/// from one allgather, so outcomes (including HolderDead) are uniform.
RestoreOutcome fetch_for_restore(runtime::RankCtx& ctx, const runtime::Comm& comm,
                                 const std::vector<runtime::RankId>& failed, NeighborStore& store);

// -- local snapshot -----------------------------------------------------------

/// Single-slot in-process snapshot for soft-error rollback. One token may be
/// live at a time; rollback is repeatable until commit retires the token.
class SnapshotSlot {
 public:
  struct Token {
    std::uint64_t serial = 0;
  };

  /// Throws UsageError if a token is still live.
  Token take(std::vector<std::uint8_t> state);

  /// Returns the snapshotted state. Throws UsageError for a stale token or
  /// one already committed.
  std::vector<std::uint8_t> rollback(const Token& token) const;

  /// Retires the token; the slot is free for the next take().
  void commit(const Token& token);

  bool live() const { return live_; }

 private:
  std::vector<std::uint8_t> state_;
  std::uint64_t serial_ = 0;
  bool live_ = false;
};

}  // namespace resilab::checkpoint
