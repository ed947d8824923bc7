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

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "fedtier/wire.hpp"

namespace fedtier::net {

using Clock = std::chrono::steady_clock;
using Duration = Clock::duration;

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  std::string str() const { return host + ":" + std::to_string(port); }
  static Endpoint parse(const std::string& text);
  friend bool operator==(const Endpoint&, const Endpoint&) = default;
};

// Owning file descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket();
  Socket(Socket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Socket& operator=(Socket&& o) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  // Wakes any thread blocked on the descriptor without releasing it.
  void shutdown();

 private:
  int fd_ = -1;
};

// Counts listening and outbound sockets per node name, so tests can check
// that a component never accepts inbound connections.
class SocketRegistry {
 public:
  static SocketRegistry& instance();
  void record_listen(const std::string& node);
  void record_connect(const std::string& node);
  std::size_t listens(const std::string& node) const;
  std::size_t connects(const std::string& node) const;

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::size_t> listens_;
  std::map<std::string, std::size_t> connects_;
};

// Model-stream bytes sent, bucketed by a per-connection tag.
class TrafficStats {
 public:
  static TrafficStats& instance();
  void add(const std::string& tag, std::uint64_t bytes);
  std::uint64_t get(const std::string& tag) const;
  void reset();

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::uint64_t> bytes_;
};

class Listener {
 public:
  Listener(const std::string& node, const Endpoint& bind_to);
  Endpoint endpoint() const { return endpoint_; }
  std::optional<Socket> accept(Duration timeout);
  void shutdown() { sock_.shutdown(); }

 private:
  Socket sock_;
  Endpoint endpoint_;
};

// A framed, bidirectional connection. One reader thread and any number of
// writers (serialized internally).
class Connection {
 public:
  Connection(Socket sock, std::string local_node);
  ~Connection();

  static std::shared_ptr<Connection> connect(const std::string& local_node,
                                             const Endpoint& to,
                                             Duration timeout = std::chrono::seconds(5));

  void set_peer(std::string peer);
  const std::string& peer() const { return peer_; }
  const std::string& local_node() const { return local_; }
  void set_traffic_tag(std::string tag) { tag_ = std::move(tag); }
  void set_chunk_size(std::size_t n);
  std::size_t chunk_size() const { return chunk_size_; }

  void send(const wire::Frame& f);
  void send(wire::MessageType t, const wire::Fields& f);
  // Sends `object` as a chunk stream and returns its id. `digest`, when
  // given, must be sha256(object).
  wire::StreamId send_object(ByteView object, const Digest* digest = nullptr);

  // Next frame of any type; nullopt on timeout. Throws NetworkError when the
  // peer closes.
  std::optional<wire::Frame> read_frame(std::optional<Duration> timeout = {});
  // Next non-stream frame; stream frames are reassembled on the side.
  std::optional<wire::Frame> read_message(std::optional<Duration> timeout = {});
  // Reads until a non-stream frame of type `t` arrives, throwing on ERROR.
  wire::Frame expect(wire::MessageType t, std::optional<Duration> timeout = {});
  // Returns a completed stream received on this connection.
  Bytes take_stream(const wire::StreamId& id);
  bool has_stream(const wire::StreamId& id) const;

  void shutdown();
  bool closed() const { return closed_.load(); }

  std::uint64_t bytes_sent() const { return bytes_sent_.load(); }
  std::uint64_t bytes_received() const { return bytes_received_.load(); }

 private:
  void write_all(const std::uint8_t* data, std::size_t len);
  void send_frame_parts(wire::MessageType t, ByteView head, ByteView body);
  bool read_exact(std::uint8_t* out, std::size_t len,
                  std::optional<Clock::time_point> deadline, bool frame_start);

  Socket sock_;
  std::string local_;
  std::string peer_;
  std::string tag_;
  std::size_t chunk_size_ = wire::kDefaultChunkSize;
  std::mutex write_mu_;
  std::atomic<bool> closed_{false};
  std::atomic<std::uint64_t> bytes_sent_{0};
  std::atomic<std::uint64_t> bytes_received_{0};
  wire::StreamAssembler assembler_;
  std::map<wire::StreamId, Bytes> completed_;
};

using ConnectionPtr = std::shared_ptr<Connection>;

// Accept loop running one handler thread per connection. stop() closes the
// listener, shuts down live connections and joins every thread.
class Server {
 public:
  using Handler = std::function<void(ConnectionPtr)>;

  Server(std::string node, const Endpoint& bind_to, Handler handler);
  ~Server();

  Endpoint endpoint() const { return endpoint_; }
  void stop();

 private:
  struct Worker {
    std::thread thread;
    ConnectionPtr conn;
    std::shared_ptr<std::atomic<bool>> done;
  };
  void accept_loop();
  void reap(bool all);

  std::string node_;
  std::unique_ptr<Listener> listener_;
  Endpoint endpoint_;
  Handler handler_;
  std::atomic<bool> stopping_{false};
  std::mutex mu_;
  std::list<Worker> workers_;
  std::thread acceptor_;
};

}  // namespace fedtier::net
