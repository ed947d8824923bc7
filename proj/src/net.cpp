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

#include "fedtier/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "fedtier/shaper.hpp"

namespace fedtier::net {

namespace {

std::string errno_text(const char* what) {
  return std::string(what) + ": " + std::strerror(errno);
}

sockaddr_in to_sockaddr(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  if (inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) != 1) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    addrinfo* res = nullptr;
    if (getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || !res) {
      throw NetworkError("cannot resolve host " + ep.host);
    }
    addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
    freeaddrinfo(res);
  }
  return addr;
}

void tune(int fd) {
  int one = 1;
  setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

// Returns false on timeout.
bool wait_readable(int fd, std::optional<Clock::time_point> deadline) {
  for (;;) {
    int ms = -1;
    if (deadline) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
          *deadline - Clock::now());
      ms = left.count() < 0 ? 0 : static_cast<int>(left.count());
    }
    pollfd p{fd, POLLIN, 0};
    const int rc = ::poll(&p, 1, ms);
    if (rc > 0) return true;
    if (rc == 0) return false;
    if (errno != EINTR) throw NetworkError(errno_text("poll"));
  }
}

}  // namespace

Endpoint Endpoint::parse(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) {
    throw ConfigError("endpoint '" + text + "' is not host:port");
  }
  Endpoint ep;
  ep.host = text.substr(0, colon);
  try {
    const int port = std::stoi(text.substr(colon + 1));
    if (port < 0 || port > 65535) throw std::out_of_range("port");
    ep.port = static_cast<std::uint16_t>(port);
  } catch (const std::exception&) {
    throw ConfigError("endpoint '" + text + "' has an invalid port");
  }
  return ep;
}

Socket::~Socket() {
  if (fd_ >= 0) ::close(fd_);
}

Socket& Socket::operator=(Socket&& o) noexcept {
  if (this != &o) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = o.fd_;
    o.fd_ = -1;
  }
  return *this;
}

void Socket::shutdown() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

SocketRegistry& SocketRegistry::instance() {
  static SocketRegistry r;
  return r;
}

void SocketRegistry::record_listen(const std::string& node) {
  std::lock_guard lock(mu_);
  ++listens_[node];
}

void SocketRegistry::record_connect(const std::string& node) {
  std::lock_guard lock(mu_);
  ++connects_[node];
}

std::size_t SocketRegistry::listens(const std::string& node) const {
  std::lock_guard lock(mu_);
  auto it = listens_.find(node);
  return it == listens_.end() ? 0 : it->second;
}

std::size_t SocketRegistry::connects(const std::string& node) const {
  std::lock_guard lock(mu_);
  auto it = connects_.find(node);
  return it == connects_.end() ? 0 : it->second;
}

TrafficStats& TrafficStats::instance() {
  static TrafficStats t;
  return t;
}

void TrafficStats::add(const std::string& tag, std::uint64_t bytes) {
  std::lock_guard lock(mu_);
  bytes_[tag] += bytes;
}

std::uint64_t TrafficStats::get(const std::string& tag) const {
  std::lock_guard lock(mu_);
  auto it = bytes_.find(tag);
  return it == bytes_.end() ? 0 : it->second;
}

void TrafficStats::reset() {
  std::lock_guard lock(mu_);
  bytes_.clear();
}

Listener::Listener(const std::string& node, const Endpoint& bind_to) {
  const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) throw NetworkError(errno_text("socket"));
  sock_ = Socket(fd);
  int one = 1;
  setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  auto addr = to_sockaddr(bind_to);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    throw NetworkError(errno_text(("bind " + bind_to.str()).c_str()));
  }
  if (::listen(fd, 1024) != 0) throw NetworkError(errno_text("listen"));
  socklen_t len = sizeof addr;
  getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  endpoint_ = {bind_to.host, ntohs(addr.sin_port)};
  SocketRegistry::instance().record_listen(node);
}

std::optional<Socket> Listener::accept(Duration timeout) {
  if (!wait_readable(sock_.fd(), Clock::now() + timeout)) return std::nullopt;
  const int fd = ::accept4(sock_.fd(), nullptr, nullptr, SOCK_CLOEXEC);
  if (fd < 0) {
    if (errno == EAGAIN || errno == EINTR || errno == ECONNABORTED) {
      return std::nullopt;
    }
    throw NetworkError(errno_text("accept"));
  }
  tune(fd);
  return Socket(fd);
}

Connection::Connection(Socket sock, std::string local_node)
    : sock_(std::move(sock)), local_(std::move(local_node)) {}

Connection::~Connection() = default;

std::shared_ptr<Connection> Connection::connect(const std::string& local_node,
                                                const Endpoint& to,
                                                Duration timeout) {
  const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) throw NetworkError(errno_text("socket"));
  Socket sock(fd);
  auto addr = to_sockaddr(to);
  const int flags = fcntl(fd, F_GETFL, 0);
  fcntl(fd, F_SETFL, flags | O_NONBLOCK);
  int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
  if (rc != 0 && errno != EINPROGRESS) {
    throw NetworkError(errno_text(("connect " + to.str()).c_str()));
  }
  if (rc != 0) {
    pollfd p{fd, POLLOUT, 0};
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(timeout);
    rc = ::poll(&p, 1, static_cast<int>(ms.count()));
    if (rc <= 0) throw NetworkError("connect " + to.str() + ": timed out");
    int err = 0;
    socklen_t len = sizeof err;
    getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) {
      throw NetworkError("connect " + to.str() + ": " + std::strerror(err));
    }
  }
  fcntl(fd, F_SETFL, flags);
  tune(fd);
  SocketRegistry::instance().record_connect(local_node);
  return std::make_shared<Connection>(std::move(sock), local_node);
}

void Connection::set_peer(std::string peer) { peer_ = std::move(peer); }

void Connection::set_chunk_size(std::size_t n) {
  wire::check_chunk_size(n);
  chunk_size_ = n;
}

void Connection::write_all(const std::uint8_t* data, std::size_t len) {
  while (len > 0) {
    const ssize_t n = ::send(sock_.fd(), data, len, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      closed_ = true;
      throw NetworkError(errno_text("send"));
    }
    data += n;
    len -= static_cast<std::size_t>(n);
  }
}

void Connection::send_frame_parts(wire::MessageType t, ByteView head,
                                  ByteView body) {
  const std::size_t payload = head.size() + body.size();
  std::uint8_t header[wire::kFrameHeaderBytes];
  wire::encode_frame_header(header, t, payload);
  const bool continuation =
      t == wire::MessageType::kModelChunk && head.size() >= 24 &&
      get_le<std::uint64_t>(head.data() + 16) > 0;
  std::lock_guard lock(write_mu_);
  if (closed_) throw NetworkError("connection closed");
  Shaper::instance().on_send(local_, peer_, wire::kFrameHeaderBytes + payload,
                             !continuation);
  write_all(header, sizeof header);
  if (!head.empty()) write_all(head.data(), head.size());
  if (!body.empty()) write_all(body.data(), body.size());
  bytes_sent_ += wire::kFrameHeaderBytes + payload;
  if (!tag_.empty() && t == wire::MessageType::kModelChunk) {
    TrafficStats::instance().add(tag_, body.size());
  }
}

void Connection::send(const wire::Frame& f) {
  send_frame_parts(f.type, f.payload, {});
}

void Connection::send(wire::MessageType t, const wire::Fields& f) {
  send(wire::make_frame(t, f));
}

wire::StreamId Connection::send_object(ByteView object, const Digest* digest) {
  const auto id = wire::random_stream_id();
  wire::for_each_stream_frame(
      object, chunk_size_, id,
      [this](wire::MessageType t, ByteView head, ByteView body) {
        send_frame_parts(t, head, body);
      },
      digest);
  return id;
}

bool Connection::read_exact(std::uint8_t* out, std::size_t len,
                            std::optional<Clock::time_point> deadline,
                            bool frame_start) {
  std::size_t got = 0;
  while (got < len) {
    if (got == 0 && frame_start && deadline) {
      if (!wait_readable(sock_.fd(), deadline)) return false;
    }
    const ssize_t n = ::recv(sock_.fd(), out + got, len - got, 0);
    if (n == 0) {
      closed_ = true;
      throw NetworkError("connection closed by peer");
    }
    if (n < 0) {
      if (errno == EINTR) continue;
      closed_ = true;
      throw NetworkError(errno_text("recv"));
    }
    got += static_cast<std::size_t>(n);
  }
  bytes_received_ += len;
  return true;
}

std::optional<wire::Frame> Connection::read_frame(
    std::optional<Duration> timeout) {
  std::optional<Clock::time_point> deadline;
  if (timeout) deadline = Clock::now() + *timeout;
  std::uint8_t header[wire::kFrameHeaderBytes];
  if (!read_exact(header, sizeof header, deadline, true)) return std::nullopt;
  auto probe = wire::decode_frame(ByteView(header, sizeof header));
  if (auto* bad = std::get_if<wire::Malformed>(&probe)) {
    throw wire::FrameError(bad->fault, wire::to_string(bad->fault));
  }
  wire::Frame f;
  f.type = static_cast<wire::MessageType>(header[3]);
  f.payload.resize(get_le<std::uint32_t>(header + 4));
  if (!f.payload.empty()) read_exact(f.payload.data(), f.payload.size(), {}, false);
  return f;
}

std::optional<wire::Frame> Connection::read_message(
    std::optional<Duration> timeout) {
  std::optional<Clock::time_point> deadline;
  if (timeout) deadline = Clock::now() + *timeout;
  for (;;) {
    std::optional<Duration> left;
    if (deadline) {
      left = std::max(Duration::zero(), *deadline - Clock::now());
    }
    auto f = read_frame(left);
    if (!f) return std::nullopt;
    if (f->type == wire::MessageType::kModelChunk ||
        f->type == wire::MessageType::kModelCommit) {
      if (auto done = assembler_.feed(*f)) {
        completed_[done->id] = std::move(done->bytes);
      }
      continue;
    }
    return f;
  }
}

wire::Frame Connection::expect(wire::MessageType t,
                               std::optional<Duration> timeout) {
  auto f = read_message(timeout);
  if (!f) {
    throw NetworkError(std::string("timed out waiting for ") + wire::to_string(t));
  }
  wire::throw_if_error(*f);
  if (f->type != t) {
    throw ProtocolError(std::string("expected ") + wire::to_string(t) +
                        ", got " + wire::to_string(f->type));
  }
  return std::move(*f);
}

Bytes Connection::take_stream(const wire::StreamId& id) {
  auto it = completed_.find(id);
  if (it == completed_.end()) {
    throw StreamError("no completed stream " + wire::to_hex(id));
  }
  Bytes out = std::move(it->second);
  completed_.erase(it);
  return out;
}

bool Connection::has_stream(const wire::StreamId& id) const {
  return completed_.contains(id);
}

void Connection::shutdown() {
  closed_ = true;
  sock_.shutdown();
}

Server::Server(std::string node, const Endpoint& bind_to, Handler handler)
    : node_(std::move(node)),
      listener_(std::make_unique<Listener>(node_, bind_to)),
      endpoint_(listener_->endpoint()),
      handler_(std::move(handler)) {
  acceptor_ = std::thread([this] { accept_loop(); });
}

Server::~Server() { stop(); }

void Server::accept_loop() {
  while (!stopping_) {
    std::optional<Socket> sock;
    try {
      sock = listener_->accept(std::chrono::milliseconds(100));
    } catch (const NetworkError&) {
      if (stopping_) break;
      continue;
    }
    if (!sock) {
      reap(false);
      continue;
    }
    auto conn = std::make_shared<Connection>(std::move(*sock), node_);
    auto done = std::make_shared<std::atomic<bool>>(false);
    std::lock_guard lock(mu_);
    if (stopping_) {
      conn->shutdown();
      break;
    }
    Worker w{{}, conn, done};
    w.thread = std::thread([this, conn, done] {
      try {
        handler_(conn);
      } catch (const std::exception&) {
      }
      conn->shutdown();
      *done = true;
    });
    workers_.push_back(std::move(w));
  }
}

void Server::reap(bool all) {
  std::list<Worker> finished;
  {
    std::lock_guard lock(mu_);
    for (auto it = workers_.begin(); it != workers_.end();) {
      if (all || *it->done) {
        finished.splice(finished.end(), workers_, it++);
      } else {
        ++it;
      }
    }
  }
  for (auto& w : finished) {
    if (w.thread.joinable()) w.thread.join();
  }
}

void Server::stop() {
  if (stopping_.exchange(true)) {
    if (acceptor_.joinable()) acceptor_.join();
    return;
  }
  listener_->shutdown();
  if (acceptor_.joinable()) acceptor_.join();
  {
    std::lock_guard lock(mu_);
    for (auto& w : workers_) w.conn->shutdown();
  }
  reap(true);
}

}  // namespace fedtier::net
