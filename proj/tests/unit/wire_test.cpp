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

#include <gtest/gtest.h>

#include <random>

namespace fedtier::wire {
namespace {

Bytes random_bytes(std::mt19937_64& rng, std::size_t n) {
  Bytes b(n);
  for (auto& x : b) x = static_cast<std::uint8_t>(rng());
  return b;
}

TEST(Frame, EmptyHeartbeatIsEightBytes) {
  const auto bytes = encode_frame(MessageType::kHeartbeat, {});
  ASSERT_EQ(bytes.size(), 8u);
  const auto r = decode_frame(bytes);
  ASSERT_TRUE(std::holds_alternative<Decoded>(r));
  const auto& d = std::get<Decoded>(r);
  EXPECT_EQ(d.frame.type, MessageType::kHeartbeat);
  EXPECT_TRUE(d.frame.payload.empty());
  EXPECT_EQ(d.consumed, 8u);
}

TEST(Frame, OversizePayloadRejected) {
  Bytes payload(kMaxFramePayload + 1);
  try {
    encode_frame(MessageType::kAck, payload);
    FAIL();
  } catch (const FrameError& e) {
    EXPECT_EQ(e.fault(), FrameFault::kOversize);
    EXPECT_STREQ(e.what(), "payload exceeds frame limit");
  }
  EXPECT_NO_THROW(encode_frame(MessageType::kAck, Bytes(kMaxFramePayload)));
}

TEST(Frame, DistinctDecodeErrors) {
  auto good = encode_frame(MessageType::kAck, as_bytes("x=1\n"));
  auto fault_of = [](const Bytes& b) {
    return std::get<Malformed>(decode_frame(b)).fault;
  };
  auto b = good;
  b[1] = 'X';
  EXPECT_EQ(fault_of(b), FrameFault::kBadMagic);
  b = good;
  b[2] = 2;
  EXPECT_EQ(fault_of(b), FrameFault::kBadVersion);
  b = good;
  b[3] = 0;
  EXPECT_EQ(fault_of(b), FrameFault::kUnknownType);
  b = good;
  b[3] = 14;
  EXPECT_EQ(fault_of(b), FrameFault::kUnknownType);
  b = good;
  put_le<std::uint32_t>(b.data() + 4, kMaxFramePayload + 1);
  EXPECT_EQ(fault_of(b), FrameFault::kOversize);
}

TEST(Frame, PartialBufferReportsExactShortfall) {
  const auto bytes = encode_frame(MessageType::kUpdateMeta, Bytes(100, 7));
  for (std::size_t cut = 0; cut < bytes.size(); ++cut) {
    const auto r = decode_frame(ByteView(bytes).first(cut));
    ASSERT_TRUE(std::holds_alternative<NeedMore>(r)) << cut;
    const auto need = std::get<NeedMore>(r).bytes;
    if (cut < kFrameHeaderBytes) {
      EXPECT_EQ(need, kFrameHeaderBytes - cut);
    } else {
      EXPECT_EQ(need, bytes.size() - cut);
    }
  }
}

TEST(Frame, ConcatenationIsSelfDelimiting) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Frame> sent;
    Bytes stream;
    const int n = 1 + trial % 7;
    for (int i = 0; i < n; ++i) {
      Frame f{static_cast<MessageType>(1 + rng() % 13),
              random_bytes(rng, rng() % 300)};
      const auto enc = encode_frame(f.type, f.payload);
      stream.insert(stream.end(), enc.begin(), enc.end());
      sent.push_back(std::move(f));
    }
    std::size_t off = 0;
    for (const auto& expect : sent) {
      auto r = decode_frame(ByteView(stream).subspan(off));
      ASSERT_TRUE(std::holds_alternative<Decoded>(r));
      auto& d = std::get<Decoded>(r);
      EXPECT_EQ(d.frame.type, expect.type);
      EXPECT_EQ(d.frame.payload, expect.payload);
      off += d.consumed;
    }
    EXPECT_EQ(off, stream.size());
  }
}

// Exhaustive over every buffer of length <= 2 plus random longer ones: the
// decoder must always classify, never crash or over-read.
TEST(Frame, FuzzNeverCrashes) {
  auto check = [](ByteView b) {
    const auto r = decode_frame(b);
    if (auto* d = std::get_if<Decoded>(&r)) {
      EXPECT_LE(d->consumed, b.size());
    } else if (auto* n = std::get_if<NeedMore>(&r)) {
      EXPECT_GT(n->bytes, 0u);
    }
  };
  check({});
  for (int a = 0; a < 256; ++a) {
    const std::uint8_t one[1] = {static_cast<std::uint8_t>(a)};
    check(one);
    for (int b = 0; b < 256; ++b) {
      const std::uint8_t two[2] = {static_cast<std::uint8_t>(a),
                                   static_cast<std::uint8_t>(b)};
      check(two);
    }
  }
  std::mt19937_64 rng(17);
  for (int i = 0; i < 200000; ++i) {
    auto b = random_bytes(rng, rng() % 48);
    if (i % 2 == 0 && b.size() >= 3) {  // bias toward valid prefixes
      b[0] = 'F';
      b[1] = 'W';
      b[2] = 1;
    }
    check(b);
  }
}

TEST(Fields, RoundTripWithEscapes) {
  Fields f;
  f.set("a", std::string("line1\nline2\\x=y"));
  f.set("n", std::uint64_t{42});
  f.set("d", 0.1);
  f.set("flag", true);
  const auto back = Fields::decode(f.encode());
  EXPECT_EQ(back, f);
  EXPECT_EQ(back.get_u64("n"), 42u);
  EXPECT_DOUBLE_EQ(back.get_double("d"), 0.1);
  EXPECT_TRUE(back.get_bool("flag"));
  EXPECT_THROW(back.get("missing"), ProtocolError);
  EXPECT_THROW(back.get_u64("a"), ProtocolError);
  EXPECT_THROW(Fields().set("bad key", "v"), ProtocolError);
}

TEST(Chunks, TenMegabyteModelSplitsIntoElevenChunks) {
  const std::size_t total = 10555580;
  const std::size_t chunk = 1048576;
  // Oracle: ceiling division and remainder.
  const std::size_t expect_chunks = total / chunk + (total % chunk != 0);
  const std::size_t expect_last = total - (expect_chunks - 1) * chunk;
  ASSERT_EQ(expect_chunks, 11u);
  ASSERT_EQ(expect_last, 69820u);

  Bytes model(total);
  for (std::size_t i = 0; i < total; ++i) model[i] = static_cast<std::uint8_t>(i * 31);
  const auto frames = chunk_object(model, chunk);
  ASSERT_EQ(frames.size(), 12u);
  for (std::size_t i = 0; i < 11; ++i) {
    EXPECT_EQ(frames[i].type, MessageType::kModelChunk);
    const std::size_t body = frames[i].payload.size() - kChunkHeaderBytes;
    EXPECT_EQ(body, i < 10 ? chunk : expect_last);
  }
  EXPECT_EQ(frames[11].type, MessageType::kModelCommit);
  EXPECT_EQ(reassemble(frames), model);
}

TEST(Chunks, EmptyObjectIsCommitOnly) {
  const auto frames = chunk_object({}, kDefaultChunkSize);
  ASSERT_EQ(frames.size(), 1u);
  EXPECT_EQ(frames[0].type, MessageType::kModelCommit);
  EXPECT_EQ(decode_commit(frames[0].payload).digest, sha256({}));
  EXPECT_TRUE(reassemble(frames).empty());
}

TEST(Chunks, RandomBlobRoundTrip) {
  std::mt19937_64 rng(5);
  const auto blob = random_bytes(rng, 5'000'000);
  EXPECT_EQ(reassemble(chunk_object(blob, 64 * 1024)), blob);
}

TEST(Chunks, ChunkSizeBounds) {
  EXPECT_THROW(chunk_object(Bytes(10), 4095), ProtocolError);
  EXPECT_THROW(chunk_object(Bytes(10), kMaxChunkSize + 1), ProtocolError);
}

TEST(Chunks, CorruptDigestDetected) {
  std::mt19937_64 rng(6);
  auto frames = chunk_object(random_bytes(rng, 20000), 4096);
  frames[2].payload[kChunkHeaderBytes + 5] ^= 1;
  try {
    reassemble(frames);
    FAIL();
  } catch (const StreamError& e) {
    EXPECT_STREQ(e.what(), "corrupt stream");
  }
}

TEST(Chunks, MissingChunkIsIncomplete) {
  std::mt19937_64 rng(7);
  auto frames = chunk_object(random_bytes(rng, 20000), 4096);
  frames.erase(frames.begin() + 1);
  try {
    reassemble(frames);
    FAIL();
  } catch (const StreamError& e) {
    EXPECT_STREQ(e.what(), "incomplete stream");
  }
}

TEST(Chunks, DuplicateChunkIsProtocolError) {
  std::mt19937_64 rng(8);
  auto frames = chunk_object(random_bytes(rng, 20000), 4096);
  frames.insert(frames.begin() + 2, frames[1]);
  StreamAssembler a;
  a.feed(frames[0]);
  a.feed(frames[1]);
  EXPECT_THROW(a.feed(frames[2]), ProtocolError);
}

TEST(Chunks, StalledStreamExpires) {
  std::mt19937_64 rng(9);
  auto frames = chunk_object(random_bytes(rng, 20000), 4096);
  StreamAssembler a;
  const auto t0 = StreamAssembler::Clock::now();
  a.feed(frames[0], t0);
  EXPECT_TRUE(a.expire(t0 + std::chrono::seconds(1), std::chrono::seconds(5)).empty());
  EXPECT_EQ(a.expire(t0 + std::chrono::seconds(6), std::chrono::seconds(5)).size(), 1u);
  EXPECT_EQ(a.open_streams(), 0u);
}

TEST(Chunks, InterleavedStreamsReassembleIndependently) {
  std::mt19937_64 rng(10);
  const auto x = random_bytes(rng, 50000);
  const auto y = random_bytes(rng, 30000);
  const auto fx = chunk_object(x, 4096);
  const auto fy = chunk_object(y, 4096);
  StreamAssembler a;
  std::map<StreamId, Bytes> done;
  std::size_t i = 0, j = 0;
  while (i < fx.size() || j < fy.size()) {
    const bool take_x = j >= fy.size() || (i < fx.size() && rng() % 2);
    const auto& f = take_x ? fx[i++] : fy[j++];
    if (auto c = a.feed(f)) done[c->id] = std::move(c->bytes);
  }
  ASSERT_EQ(done.size(), 2u);
  EXPECT_EQ(done[decode_commit(fx.back().payload).stream_id], x);
  EXPECT_EQ(done[decode_commit(fy.back().payload).stream_id], y);
}

}  // namespace
}  // namespace fedtier::wire
