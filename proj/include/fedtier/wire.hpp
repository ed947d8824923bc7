// Copyright 2026 The fedtier Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fedtier/bytes.hpp"
#include "fedtier/digest.hpp"
#include "fedtier/error.hpp"

namespace fedtier::wire {

// Frame layout: 'F' 'W' | version (1) | type (1) | payload length (u32 LE) | payload.
inline constexpr std::size_t kFrameHeaderBytes = 8;
inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kMaxFramePayload = 2u << 20;

enum class MessageType : std::uint8_t {
  kHello = 1,
  kAssignment = 2,
  kHeartbeat = 3,
  kTrainRequest = 4,
  kValidateRequest = 5,
  kModelChunk = 6,
  kModelCommit = 7,
  kUpdateMeta = 8,
  kPartialMeta = 9,
  kValidationResult = 10,
  kRoundControl = 11,
  kAck = 12,
  kError = 13,
};

const char* to_string(MessageType t);
bool is_known_type(std::uint8_t raw);

struct Frame {
  MessageType type = MessageType::kAck;
  Bytes payload;
};

enum class FrameFault { kBadMagic, kBadVersion, kUnknownType, kOversize };
const char* to_string(FrameFault f);

class FrameError : public ProtocolError {
 public:
  FrameError(FrameFault fault, const std::string& what)
      : ProtocolError(what), fault_(fault) {}
  FrameFault fault() const { return fault_; }

 private:
  FrameFault fault_;
};

Bytes encode_frame(MessageType t, ByteView payload);
void encode_frame_header(std::uint8_t* out, MessageType t, std::size_t payload_len);

struct Decoded {
  Frame frame;
  std::size_t consumed = 0;
};
struct NeedMore {
  std::size_t bytes = 0;  // additional bytes required before retrying
};
struct Malformed {
  FrameFault fault;
};
using DecodeResult = std::variant<Decoded, NeedMore, Malformed>;

// Never throws on malformed input.
DecodeResult decode_frame(ByteView buf);

// Key/value text payload used by every metadata message. One `key=value`
// line per entry, keys sorted; values escape '\\' and newline.
class Fields {
 public:
  Fields() = default;
  Fields(std::initializer_list<std::pair<const std::string, std::string>> init)
      : values_(init) {}

  Fields& set(const std::string& key, std::string value);
  Fields& set(const std::string& key, const char* value) {
    return set(key, std::string(value));
  }
  Fields& set(const std::string& key, std::uint64_t value);
  Fields& set(const std::string& key, std::int64_t value);
  Fields& set(const std::string& key, int value) {
    return set(key, static_cast<std::int64_t>(value));
  }
  Fields& set(const std::string& key, double value);
  Fields& set(const std::string& key, bool value);

  bool has(const std::string& key) const { return values_.contains(key); }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, std::string fallback) const;
  std::uint64_t get_u64(const std::string& key) const;
  std::uint64_t get_u64_or(const std::string& key, std::uint64_t fallback) const;
  std::int64_t get_i64(const std::string& key) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key) const;
  bool get_bool_or(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string encode() const;
  static Fields decode(std::string_view text);

  friend bool operator==(const Fields&, const Fields&) = default;

 private:
  std::map<std::string, std::string> values_;
};

Frame make_frame(MessageType t, const Fields& f);
Fields fields_of(const Frame& f);
Frame error_frame(const std::string& code, const std::string& message);
// Throws RemoteError when `f` is an ERROR frame.
void throw_if_error(const Frame& f);

// ---- chunk streams -------------------------------------------------------

inline constexpr std::size_t kDefaultChunkSize = 1u << 20;
inline constexpr std::size_t kMinChunkSize = 4u << 10;
inline constexpr std::size_t kChunkHeaderBytes = 24;  // stream id + index
inline constexpr std::size_t kMaxChunkSize = kMaxFramePayload - kChunkHeaderBytes;
inline constexpr std::size_t kCommitBytes = 16 + 8 + 8 + 32;

using StreamId = std::array<std::uint8_t, 16>;

StreamId random_stream_id();
std::string to_hex(const StreamId& id);
StreamId stream_id_from_hex(std::string_view hex);

std::size_t chunk_count(std::size_t total_bytes, std::size_t chunk_size);
void check_chunk_size(std::size_t chunk_size);

struct CommitRecord {
  StreamId stream_id{};
  std::uint64_t total_bytes = 0;
  std::uint64_t chunk_count = 0;
  Digest digest{};
};

Bytes encode_commit(const CommitRecord& c);
CommitRecord decode_commit(ByteView payload);

// Emits the MODEL_CHUNK frames followed by the MODEL_COMMIT frame of `object`,
// one encoded frame at a time. The chunk view passed to `sink` aliases
// `object` so large objects are never copied whole. `digest`, when given, must
// be sha256(object); broadcasters pass it to hash once per object.
void for_each_stream_frame(
    ByteView object, std::size_t chunk_size, const StreamId& id,
    const std::function<void(MessageType, ByteView header, ByteView body)>& sink,
    const Digest* digest = nullptr);

std::vector<Frame> chunk_object(ByteView object, std::size_t chunk_size,
                                const StreamId& id = random_stream_id());
Bytes reassemble(const std::vector<Frame>& frames);

// Per-connection reassembly of interleaved chunk streams.
class StreamAssembler {
 public:
  using Clock = std::chrono::steady_clock;

  struct Completed {
    StreamId id;
    Bytes bytes;
  };

  // Accepts MODEL_CHUNK / MODEL_COMMIT frames. Returns the object when a
  // commit completes and verifies a stream.
  std::optional<Completed> feed(const Frame& f, Clock::time_point now = Clock::now());

  // Drops streams idle for longer than `timeout`; returns their ids.
  std::vector<StreamId> expire(Clock::time_point now, Clock::duration timeout);

  std::size_t open_streams() const { return open_.size(); }

 private:
  struct Partial {
    Bytes bytes;
    std::uint64_t next_index = 0;
    bool gap = false;
    Sha256 hash;
    Clock::time_point last_activity;
  };
  std::map<StreamId, Partial> open_;
};

}  // namespace fedtier::wire
