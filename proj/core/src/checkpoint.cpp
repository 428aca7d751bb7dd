#include "resilab/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <limits>

#include "resilab/digest.hpp"

namespace resilab::checkpoint {

namespace {

constexpr char kMagic[4] = {'R', 'K', 'C', 'P'};

// Point-to-point tags used by the store and restore choreography.
constexpr int kTagStage = 201;
constexpr int kTagFetch = 203;
constexpr int kTagRefill = 205;

void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v & 0xff));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const std::uint8_t* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_frame(Kind kind, std::uint32_t owner, std::uint32_t epoch,
                                       const std::vector<std::uint8_t>& payload) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + payload.size());
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u16(out, kFormatVersion);
  out.push_back(static_cast<std::uint8_t>(kind));
  put_u32(out, owner);
  put_u32(out, epoch);
  put_u64(out, payload.size());
  put_u64(out, digest::fnv1a64(payload.data(), payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

DecodedFrame decode_frame(const std::vector<std::uint8_t>& frame) {
  if (frame.size() < kHeaderSize) throw CorruptCheckpoint("frame shorter than header");
  if (std::memcmp(frame.data(), kMagic, 4) != 0) throw CorruptCheckpoint("bad magic");
  DecodedFrame out;
  const std::uint8_t* p = frame.data() + 4;
  out.header.version = static_cast<std::uint16_t>(get_le(p, 2));
  p += 2;
  if (out.header.version != kFormatVersion)
    throw CorruptCheckpoint("unsupported version " + std::to_string(out.header.version));
  const std::uint8_t kind = *p++;
  if (kind > 1) throw CorruptCheckpoint("unknown checkpoint kind");
  out.header.kind = static_cast<Kind>(kind);
  out.header.owner = static_cast<std::uint32_t>(get_le(p, 4));
  p += 4;
  out.header.epoch = static_cast<std::uint32_t>(get_le(p, 4));
  p += 4;
  out.header.payload_len = get_le(p, 8);
  p += 8;
  out.header.checksum = get_le(p, 8);
  p += 8;
  if (frame.size() != kHeaderSize + out.header.payload_len)
    throw CorruptCheckpoint("payload length mismatch");
  out.payload.assign(p, p + out.header.payload_len);
  if (digest::fnv1a64(out.payload.data(), out.payload.size()) != out.header.checksum)
    throw CorruptCheckpoint("checksum mismatch");
  return out;
}

// -- byte writer / reader -----------------------------------------------------

void ByteWriter::u16(std::uint16_t v) { put_u16(buf_, v); }
void ByteWriter::u32(std::uint32_t v) { put_u32(buf_, v); }
void ByteWriter::u64(std::uint64_t v) { put_u64(buf_, v); }
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::doubles(const std::vector<double>& v) {
  u64(v.size());
  for (double d : v) f64(d);
}

std::uint8_t ByteReader::u8() {
  if (at_ + 1 > buf_.size()) throw CorruptCheckpoint("payload underrun");
  return buf_[at_++];
}

std::uint16_t ByteReader::u16() {
  if (at_ + 2 > buf_.size()) throw CorruptCheckpoint("payload underrun");
  const std::uint16_t v = static_cast<std::uint16_t>(get_le(buf_.data() + at_, 2));
  at_ += 2;
  return v;
}

std::uint32_t ByteReader::u32() {
  if (at_ + 4 > buf_.size()) throw CorruptCheckpoint("payload underrun");
  const std::uint32_t v = static_cast<std::uint32_t>(get_le(buf_.data() + at_, 4));
  at_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  if (at_ + 8 > buf_.size()) throw CorruptCheckpoint("payload underrun");
  const std::uint64_t v = get_le(buf_.data() + at_, 8);
  at_ += 8;
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::vector<double> ByteReader::doubles() {
  const std::uint64_t n = u64();
  if (at_ + n * 8 > buf_.size()) throw CorruptCheckpoint("payload underrun");
  std::vector<double> v(n);
  for (std::uint64_t i = 0; i < n; ++i) v[i] = f64();
  return v;
}

// -- neighbor store -----------------------------------------------------------

std::int64_t NeighborStore::dynamic_epoch(const std::optional<std::vector<std::uint8_t>>& frame) {
  if (!frame) return -1;
  return static_cast<std::int64_t>(decode_frame(*frame).header.epoch);
}

std::size_t store_blob(runtime::RankCtx& ctx, const runtime::Comm& comm, NeighborStore& store,
                       Kind kind, std::uint32_t epoch, const std::vector<std::uint8_t>& payload) {
  const int n = comm.size;
  const runtime::RankId me = ctx.rank();
  const runtime::RankId holder = holder_of(me, n);
  const runtime::RankId pred = predecessor_of(me, n);

  std::vector<std::uint8_t> framed = encode_frame(kind, static_cast<std::uint32_t>(me), epoch, payload);

  // Phase 1: stage. Everyone ships its frame to its holder and takes in the
  // predecessor's. Sends are buffered, so the ring cannot deadlock.
  std::vector<std::uint8_t> staged;
  if (n == 1) {
    staged = framed;
  } else {
    ctx.send(comm, holder, kTagStage, framed);
    staged = ctx.recv(comm, pred, kTagStage);
  }

  bool ok = true;
  try {
    const DecodedFrame d = decode_frame(staged);
    ok = d.header.kind == kind && d.header.epoch == epoch &&
         d.header.owner == static_cast<std::uint32_t>(pred);
  } catch (const CorruptCheckpoint&) {
    ok = false;
  }

  // Phase 2: verify everywhere, then commit locally. The verdict is uniform,
  // so either every rank advances its committed copies or none does.
  const bool all_ok = ctx.allreduce_land(comm, ok);
  if (!all_ok) throw CorruptCheckpoint("neighbor store failed verification");

  if (kind == Kind::Static) {
    store.own_static = std::move(framed);
    store.held_static = std::move(staged);
  } else {
    store.own_dynamic = std::move(framed);
    store.held_dynamic = std::move(staged);
  }
  return kHeaderSize + payload.size();
}

namespace {

struct RestorePlan {
  std::int64_t restore_epoch = -1;  // -1: no dynamic state anywhere
  std::vector<char> fetch_static;   // per rank: pull own static from holder
  std::vector<char> fetch_dynamic;  // per rank: pull own dynamic from holder
  std::vector<char> refill_static;  // per rank: holder refilled by predecessor
  std::vector<char> refill_dynamic;
};

/// The whole plan is a pure function of the gathered availability words, so
/// every rank derives the identical plan (and the identical HolderDead
/// verdict) without further agreement.
RestorePlan derive_plan(const std::vector<double>& words, int n) {
  auto own_static = [&](int r) { return words[4 * static_cast<std::size_t>(r)] > 0.5; };
  auto own_dyn = [&](int r) { return static_cast<std::int64_t>(words[4 * static_cast<std::size_t>(r) + 1]); };
  auto held_static = [&](int r) { return words[4 * static_cast<std::size_t>(r) + 2] > 0.5; };
  auto held_dyn = [&](int r) { return static_cast<std::int64_t>(words[4 * static_cast<std::size_t>(r) + 3]); };

  RestorePlan plan;
  plan.fetch_static.assign(static_cast<std::size_t>(n), 0);
  plan.fetch_dynamic.assign(static_cast<std::size_t>(n), 0);
  plan.refill_static.assign(static_cast<std::size_t>(n), 0);
  plan.refill_dynamic.assign(static_cast<std::size_t>(n), 0);

  for (int r = 0; r < n; ++r) {
    if (!own_static(r) && !held_static(holder_of(r, n))) throw HolderDead(r);
  }

  plan.restore_epoch = std::numeric_limits<std::int64_t>::max();
  for (int r = 0; r < n; ++r) {
    const std::int64_t avail = std::max(own_dyn(r), held_dyn(holder_of(r, n)));
    plan.restore_epoch = std::min(plan.restore_epoch, avail);
  }
  if (plan.restore_epoch < 0) plan.restore_epoch = -1;

  for (int r = 0; r < n; ++r) {
    if (!own_static(r)) plan.fetch_static[static_cast<std::size_t>(r)] = 1;
    if (!held_static(r)) plan.refill_static[static_cast<std::size_t>(r)] = 1;
    if (plan.restore_epoch >= 0) {
      if (own_dyn(r) != plan.restore_epoch) plan.fetch_dynamic[static_cast<std::size_t>(r)] = 1;
      if (held_dyn(r) != plan.restore_epoch) plan.refill_dynamic[static_cast<std::size_t>(r)] = 1;
    }
  }
  return plan;
}

std::vector<std::uint8_t> checked(std::vector<std::uint8_t> frame, Kind kind,
                                  runtime::RankId owner, std::int64_t epoch_or_any) {
  const DecodedFrame d = decode_frame(frame);
  if (d.header.kind != kind || d.header.owner != static_cast<std::uint32_t>(owner))
    throw CorruptCheckpoint("restored frame does not match its slot");
  if (epoch_or_any >= 0 && d.header.epoch != static_cast<std::uint32_t>(epoch_or_any))
    throw CorruptCheckpoint("restored frame has the wrong epoch");
  return frame;
}

}  // namespace

RestoreOutcome fetch_for_restore(runtime::RankCtx& ctx, const runtime::Comm& comm,
                                 const std::vector<runtime::RankId>& failed,
                                 NeighborStore& store) {
  (void)failed;  // the availability gather is authoritative; `failed` is diagnostic only
  const int n = comm.size;
  const runtime::RankId me = ctx.rank();
  const runtime::RankId my_holder = holder_of(me, n);
  const runtime::RankId my_pred = predecessor_of(me, n);

  const std::vector<double> mine = {
      store.own_static ? 1.0 : 0.0,
      static_cast<double>(NeighborStore::dynamic_epoch(store.own_dynamic)),
      store.held_static ? 1.0 : 0.0,
      static_cast<double>(NeighborStore::dynamic_epoch(store.held_dynamic)),
  };
  const std::vector<double> words = ctx.allgather(comm, mine);
  const RestorePlan plan = derive_plan(words, n);

  // Sends first, receives second; with buffered sends the schedule cannot
  // deadlock regardless of how fetches and refills overlap.
  if (plan.fetch_static[static_cast<std::size_t>(my_pred)])
    ctx.send(comm, my_pred, kTagFetch, *store.held_static);
  if (plan.fetch_dynamic[static_cast<std::size_t>(my_pred)])
    ctx.send(comm, my_pred, kTagFetch + 1, *store.held_dynamic);
  if (plan.refill_static[static_cast<std::size_t>(my_holder)])
    ctx.send(comm, my_holder, kTagRefill, *store.own_static);
  if (plan.refill_dynamic[static_cast<std::size_t>(my_holder)])
    ctx.send(comm, my_holder, kTagRefill + 1, *store.own_dynamic);

  if (plan.fetch_static[static_cast<std::size_t>(me)])
    store.own_static = checked(ctx.recv(comm, my_holder, kTagFetch), Kind::Static, me, -1);
  if (plan.fetch_dynamic[static_cast<std::size_t>(me)])
    store.own_dynamic =
        checked(ctx.recv(comm, my_holder, kTagFetch + 1), Kind::Dynamic, me, plan.restore_epoch);
  if (plan.refill_static[static_cast<std::size_t>(me)])
    store.held_static = checked(ctx.recv(comm, my_pred, kTagRefill), Kind::Static, my_pred, -1);
  if (plan.refill_dynamic[static_cast<std::size_t>(me)])
    store.held_dynamic =
        checked(ctx.recv(comm, my_pred, kTagRefill + 1), Kind::Dynamic, my_pred, plan.restore_epoch);

  RestoreOutcome out;
  out.fetched_static = plan.fetch_static[static_cast<std::size_t>(me)] != 0;
  if (out.fetched_static) out.static_payload = decode_frame(*store.own_static).payload;
  if (plan.restore_epoch >= 0) {
    out.epoch = static_cast<std::uint32_t>(plan.restore_epoch);
    out.have_dynamic = true;
    out.dynamic_payload = decode_frame(*store.own_dynamic).payload;
  }
  return out;
}

// -- local snapshot -----------------------------------------------------------

SnapshotSlot::Token SnapshotSlot::take(std::vector<std::uint8_t> state) {
  if (live_) throw UsageError("snapshot slot already holds a live token");
  state_ = std::move(state);
  live_ = true;
  ++serial_;
  return Token{serial_};
}

std::vector<std::uint8_t> SnapshotSlot::rollback(const Token& token) const {
  if (!live_ || token.serial != serial_)
    throw UsageError("rollback with a stale or committed snapshot token");
  return state_;
}

void SnapshotSlot::commit(const Token& token) {
  if (!live_ || token.serial != serial_)
    throw UsageError("commit with a stale or committed snapshot token");
  live_ = false;
  state_.clear();
}

}  // namespace resilab::checkpoint
