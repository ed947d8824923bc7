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

#include "fedtier/wire.hpp"

#include <charconv>
#include <cstring>
#include <random>

namespace fedtier::wire {

const char* to_string(MessageType t) {
  switch (t) {
    case MessageType::kHello: return "HELLO";
    case MessageType::kAssignment: return "ASSIGNMENT";
    case MessageType::kHeartbeat: return "HEARTBEAT";
    case MessageType::kTrainRequest: return "TRAIN_REQUEST";
    case MessageType::kValidateRequest: return "VALIDATE_REQUEST";
    case MessageType::kModelChunk: return "MODEL_CHUNK";
    case MessageType::kModelCommit: return "MODEL_COMMIT";
    case MessageType::kUpdateMeta: return "UPDATE_META";
    case MessageType::kPartialMeta: return "PARTIAL_META";
    case MessageType::kValidationResult: return "VALIDATION_RESULT";
    case MessageType::kRoundControl: return "ROUND_CONTROL";
    case MessageType::kAck: return "ACK";
    case MessageType::kError: return "ERROR";
  }
  return "UNKNOWN";
}

bool is_known_type(std::uint8_t raw) {
  return raw >= static_cast<std::uint8_t>(MessageType::kHello) &&
         raw <= static_cast<std::uint8_t>(MessageType::kError);
}

const char* to_string(FrameFault f) {
  switch (f) {
    case FrameFault::kBadMagic: return "bad frame magic";
    case FrameFault::kBadVersion: return "unknown protocol version";
    case FrameFault::kUnknownType: return "unknown message type";
    case FrameFault::kOversize: return "payload exceeds frame limit";
  }
  return "malformed frame";
}

void encode_frame_header(std::uint8_t* out, MessageType t,
                         std::size_t payload_len) {
  if (payload_len > kMaxFramePayload) {
    throw FrameError(FrameFault::kOversize, "payload exceeds frame limit");
  }
  out[0] = 'F';
  out[1] = 'W';
  out[2] = kProtocolVersion;
  out[3] = static_cast<std::uint8_t>(t);
  put_le<std::uint32_t>(out + 4, static_cast<std::uint32_t>(payload_len));
}

Bytes encode_frame(MessageType t, ByteView payload) {
  Bytes out(kFrameHeaderBytes + payload.size());
  encode_frame_header(out.data(), t, payload.size());
  if (!payload.empty()) {
    std::memcpy(out.data() + kFrameHeaderBytes, payload.data(), payload.size());
  }
  return out;
}

DecodeResult decode_frame(ByteView buf) {
  // Check whatever header bytes are present before asking for more.
  if (buf.size() >= 1 && buf[0] != 'F') return Malformed{FrameFault::kBadMagic};
  if (buf.size() >= 2 && buf[1] != 'W') return Malformed{FrameFault::kBadMagic};
  if (buf.size() >= 3 && buf[2] != kProtocolVersion) {
    return Malformed{FrameFault::kBadVersion};
  }
  if (buf.size() >= 4 && !is_known_type(buf[3])) {
    return Malformed{FrameFault::kUnknownType};
  }
  if (buf.size() < kFrameHeaderBytes) {
    return NeedMore{kFrameHeaderBytes - buf.size()};
  }
  const auto len = get_le<std::uint32_t>(buf.data() + 4);
  if (len > kMaxFramePayload) return Malformed{FrameFault::kOversize};
  const std::size_t total = kFrameHeaderBytes + len;
  if (buf.size() < total) return NeedMore{total - buf.size()};
  Decoded d;
  d.frame.type = static_cast<MessageType>(buf[3]);
  d.frame.payload.assign(buf.begin() + kFrameHeaderBytes, buf.begin() + total);
  d.consumed = total;
  return d;
}

// ---- Fields ---------------------------------------------------------------

namespace {

bool valid_key(std::string_view k) {
  if (k.empty()) return false;
  for (char c : k) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                    (c >= '0' && c <= '9') || c == '_' || c == '.' ||
                    c == '-' || c == '/';
    if (!ok) return false;
  }
  return true;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ProtocolError("field '" + key + "' is not a number: " + text);
  }
  return v;
}

}  // namespace

Fields& Fields::set(const std::string& key, std::string value) {
  if (!valid_key(key)) throw ProtocolError("invalid field key '" + key + "'");
  values_[key] = std::move(value);
  return *this;
}

Fields& Fields::set(const std::string& key, std::uint64_t value) {
  return set(key, std::to_string(value));
}

Fields& Fields::set(const std::string& key, std::int64_t value) {
  return set(key, std::to_string(value));
}

Fields& Fields::set(const std::string& key, double value) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return set(key, std::string(buf, ptr));
}

Fields& Fields::set(const std::string& key, bool value) {
  return set(key, std::string(value ? "1" : "0"));
}

const std::string& Fields::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ProtocolError("missing field '" + key + "'");
  return it->second;
}

std::string Fields::get_or(const std::string& key, std::string fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::uint64_t Fields::get_u64(const std::string& key) const {
  return parse_number<std::uint64_t>(key, get(key));
}

std::uint64_t Fields::get_u64_or(const std::string& key,
                                 std::uint64_t fallback) const {
  return has(key) ? get_u64(key) : fallback;
}

std::int64_t Fields::get_i64(const std::string& key) const {
  return parse_number<std::int64_t>(key, get(key));
}

double Fields::get_double(const std::string& key) const {
  return parse_number<double>(key, get(key));
}

double Fields::get_double_or(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

bool Fields::get_bool(const std::string& key) const {
  const auto& v = get(key);
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ProtocolError("field '" + key + "' is not a boolean: " + v);
}

bool Fields::get_bool_or(const std::string& key, bool fallback) const {
  return has(key) ? get_bool(key) : fallback;
}

std::string Fields::encode() const {
  std::string out;
  for (const auto& [k, v] : values_) {
    out += k;
    out += '=';
    for (char c : v) {
      if (c == '\\') {
        out += "\\\\";
      } else if (c == '\n') {
        out += "\\n";
      } else {
        out += c;
      }
    }
    out += '\n';
  }
  return out;
}

Fields Fields::decode(std::string_view text) {
  Fields f;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ProtocolError("metadata line without '='");
    }
    std::string value;
    const auto raw = line.substr(eq + 1);
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (raw[i] == '\\' && i + 1 < raw.size()) {
        const char n = raw[++i];
        value += n == 'n' ? '\n' : n;
      } else {
        value += raw[i];
      }
    }
    f.set(std::string(line.substr(0, eq)), std::move(value));
  }
  return f;
}

Frame make_frame(MessageType t, const Fields& f) {
  const auto text = f.encode();
  Frame out{t, Bytes(text.begin(), text.end())};
  if (out.payload.size() > kMaxFramePayload) {
    throw FrameError(FrameFault::kOversize, "payload exceeds frame limit");
  }
  return out;
}

Fields fields_of(const Frame& f) { return Fields::decode(as_string(f.payload)); }

Frame error_frame(const std::string& code, const std::string& message) {
  return make_frame(MessageType::kError,
                    Fields{{"code", code}, {"message", message}});
}

void throw_if_error(const Frame& f) {
  if (f.type != MessageType::kError) return;
  const auto fields = fields_of(f);
  throw RemoteError(fields.get_or("code", "error"),
                    fields.get_or("message", ""));
}

// ---- chunk streams --------------------------------------------------------

StreamId random_stream_id() {
  thread_local std::mt19937_64 rng{std::random_device{}()};
  StreamId id;
  for (std::size_t i = 0; i < id.size(); i += 8) {
    put_le<std::uint64_t>(id.data() + i, rng());
  }
  return id;
}

std::string to_hex(const StreamId& id) { return fedtier::to_hex(ByteView(id)); }

StreamId stream_id_from_hex(std::string_view hex) {
  const auto raw = from_hex(hex);
  if (raw.size() != 16) throw ProtocolError("stream id must be 16 bytes");
  StreamId id;
  std::memcpy(id.data(), raw.data(), 16);
  return id;
}

std::size_t chunk_count(std::size_t total_bytes, std::size_t chunk_size) {
  return (total_bytes + chunk_size - 1) / chunk_size;
}

void check_chunk_size(std::size_t chunk_size) {
  if (chunk_size < kMinChunkSize || chunk_size > kMaxChunkSize) {
    throw ProtocolError("chunk size " + std::to_string(chunk_size) +
                        " outside [" + std::to_string(kMinChunkSize) + ", " +
                        std::to_string(kMaxChunkSize) + "]");
  }
}

Bytes encode_commit(const CommitRecord& c) {
  Bytes out(kCommitBytes);
  std::memcpy(out.data(), c.stream_id.data(), 16);
  put_le<std::uint64_t>(out.data() + 16, c.total_bytes);
  put_le<std::uint64_t>(out.data() + 24, c.chunk_count);
  std::memcpy(out.data() + 32, c.digest.data(), 32);
  return out;
}

CommitRecord decode_commit(ByteView payload) {
  if (payload.size() != kCommitBytes) {
    throw ProtocolError("MODEL_COMMIT payload has wrong size");
  }
  CommitRecord c;
  std::memcpy(c.stream_id.data(), payload.data(), 16);
  c.total_bytes = get_le<std::uint64_t>(payload.data() + 16);
  c.chunk_count = get_le<std::uint64_t>(payload.data() + 24);
  std::memcpy(c.digest.data(), payload.data() + 32, 32);
  return c;
}

void for_each_stream_frame(
    ByteView object, std::size_t chunk_size, const StreamId& id,
    const std::function<void(MessageType, ByteView, ByteView)>& sink,
    const Digest* digest) {
  check_chunk_size(chunk_size);
  const std::size_t n = chunk_count(object.size(), chunk_size);
  std::uint8_t header[kChunkHeaderBytes];
  std::memcpy(header, id.data(), 16);
  for (std::size_t i = 0; i < n; ++i) {
    put_le<std::uint64_t>(header + 16, i);
    const std::size_t off = i * chunk_size;
    const std::size_t len = std::min(chunk_size, object.size() - off);
    sink(MessageType::kModelChunk, ByteView(header, kChunkHeaderBytes),
         object.subspan(off, len));
  }
  const auto commit =
      encode_commit({id, object.size(), n, digest ? *digest : sha256(object)});
  sink(MessageType::kModelCommit, commit, {});
}

std::vector<Frame> chunk_object(ByteView object, std::size_t chunk_size,
                                const StreamId& id) {
  std::vector<Frame> frames;
  for_each_stream_frame(object, chunk_size, id,
                        [&](MessageType t, ByteView head, ByteView body) {
                          Frame f{t, Bytes(head.begin(), head.end())};
                          f.payload.insert(f.payload.end(), body.begin(),
                                           body.end());
                          frames.push_back(std::move(f));
                        });
  return frames;
}

Bytes reassemble(const std::vector<Frame>& frames) {
  StreamAssembler a;
  for (const auto& f : frames) {
    if (auto done = a.feed(f)) return std::move(done->bytes);
  }
  throw StreamError("incomplete stream");
}

std::optional<StreamAssembler::Completed> StreamAssembler::feed(
    const Frame& f, Clock::time_point now) {
  if (f.type == MessageType::kModelChunk) {
    if (f.payload.size() < kChunkHeaderBytes) {
      throw ProtocolError("MODEL_CHUNK payload shorter than its header");
    }
    StreamId id;
    std::memcpy(id.data(), f.payload.data(), 16);
    const auto index = get_le<std::uint64_t>(f.payload.data() + 16);
    auto& s = open_[id];
    s.last_activity = now;
    if (index < s.next_index) {
      open_.erase(id);
      throw ProtocolError("duplicate chunk index " + std::to_string(index));
    }
    if (index > s.next_index) s.gap = true;
    const ByteView body(f.payload.data() + kChunkHeaderBytes,
                        f.payload.size() - kChunkHeaderBytes);
    s.bytes.insert(s.bytes.end(), body.begin(), body.end());
    s.hash.update(body);
    s.next_index = index + 1;
    return std::nullopt;
  }
  if (f.type != MessageType::kModelCommit) {
    throw ProtocolError(std::string("not a stream frame: ") + to_string(f.type));
  }
  const auto c = decode_commit(f.payload);
  auto it = open_.find(c.stream_id);
  if (it == open_.end()) {
    if (c.total_bytes == 0 && c.chunk_count == 0) {
      if (c.digest != sha256({})) throw StreamError("corrupt stream");
      return Completed{c.stream_id, {}};
    }
    throw StreamError("incomplete stream");
  }
  Partial s = std::move(it->second);
  open_.erase(it);
  if (s.gap || s.next_index != c.chunk_count || s.bytes.size() != c.total_bytes) {
    throw StreamError("incomplete stream");
  }
  if (s.hash.finish() != c.digest) throw StreamError("corrupt stream");
  return Completed{c.stream_id, std::move(s.bytes)};
}

std::vector<StreamId> StreamAssembler::expire(Clock::time_point now,
                                              Clock::duration timeout) {
  std::vector<StreamId> dropped;
  for (auto it = open_.begin(); it != open_.end();) {
    if (now - it->second.last_activity > timeout) {
      dropped.push_back(it->first);
      it = open_.erase(it);
    } else {
      ++it;
    }
  }
  return dropped;
}

}  // namespace fedtier::wire
