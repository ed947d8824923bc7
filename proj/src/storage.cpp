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

#include "fedtier/storage.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "fedtier/digest.hpp"
#include "fedtier/model.hpp"

namespace fedtier {

namespace fs = std::filesystem;

namespace {

// Holds an exclusive flock for its lifetime. flock locks belong to the open
// file description, so they also exclude other threads of this process.
class FileLock {
 public:
  explicit FileLock(const fs::path& path) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error("open lock " + path.string() + ": " + std::strerror(errno));
    while (::flock(fd_, LOCK_EX) != 0) {
      if (errno != EINTR) {
        ::close(fd_);
        throw Error("flock " + path.string() + ": " + std::strerror(errno));
      }
    }
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

std::string unique_suffix() {
  static std::atomic<std::uint64_t> counter{0};
  std::ostringstream os;
  os << ::getpid() << '.' << std::hash<std::thread::id>{}(std::this_thread::get_id())
     << '.' << counter++;
  return os.str();
}

void fsync_dir(const fs::path& dir) {
  const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY | O_CLOEXEC);
  if (fd >= 0) {
    ::fsync(fd);
    ::close(fd);
  }
}

// Writes `data` to a fresh temp file next to `target`, fsyncs and returns
// the temp path; the caller renames it into place.
fs::path write_temp(const fs::path& target, ByteView data) {
  fs::path tmp = target;
  tmp += ".tmp-" + unique_suffix();
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw Error("create " + tmp.string() + ": " + std::strerror(errno));
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::write(fd, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      const int err = errno;
      ::close(fd);
      throw Error("write " + tmp.string() + ": " + std::strerror(err));
    }
    off += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0) {
    ::close(fd);
    throw Error("fsync " + tmp.string());
  }
  ::close(fd);
  return tmp;
}

void atomic_replace(const fs::path& tmp, const fs::path& target) {
  if (::rename(tmp.c_str(), target.c_str()) != 0) {
    throw Error("rename " + tmp.string() + ": " + std::strerror(errno));
  }
  fsync_dir(target.parent_path());
}

std::optional<Bytes> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  Bytes out(size);
  if (size > 0) in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size));
  if (!in) throw Error("read " + path.string());
  return out;
}

bool is_hex_id(const std::string& id) {
  if (id.size() != 64) return false;
  for (char c : id) {
    if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
  }
  return true;
}

}  // namespace

std::int64_t to_millis(WallTime t) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(t.time_since_epoch())
      .count();
}

WallTime from_millis(std::int64_t ms) {
  return WallTime(std::chrono::milliseconds(ms));
}

std::string TrailEntry::encode() const {
  std::ostringstream os;
  os << "model_id=" << model_id << " round_id=" << round_id
     << " parent_id=" << parent_id << " created_at=" << created_at_ms
     << " byte_size=" << byte_size;
  return os.str();
}

TrailEntry TrailEntry::decode(std::string_view line) {
  wire::Fields f;
  std::size_t pos = 0;
  while (pos < line.size()) {
    auto sp = line.find(' ', pos);
    if (sp == std::string_view::npos) sp = line.size();
    const auto tok = line.substr(pos, sp - pos);
    pos = sp + 1;
    if (tok.empty()) continue;
    const auto eq = tok.find('=');
    if (eq == std::string_view::npos) throw IntegrityError("malformed trail record");
    f.set(std::string(tok.substr(0, eq)), std::string(tok.substr(eq + 1)));
  }
  try {
    TrailEntry e;
    e.model_id = f.get("model_id");
    e.round_id = f.get_u64("round_id");
    e.parent_id = f.get("parent_id");
    e.created_at_ms = f.get_i64("created_at");
    e.byte_size = f.get_u64("byte_size");
    return e;
  } catch (const ProtocolError& err) {
    throw IntegrityError(std::string("malformed trail record: ") + err.what());
  }
}

std::optional<TrailEntry> Store::trail_head() {
  auto entries = trail();
  if (entries.empty()) return std::nullopt;
  return entries.back();
}

std::string escape_state_key(std::string_view key) {
  static constexpr char kDigits[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : key) {
    const bool plain = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                       (c >= '0' && c <= '9') || c == '_' || c == '-';
    if (plain) {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += kDigits[c >> 4];
      out += kDigits[c & 0xf];
    }
  }
  return out;
}

std::string unescape_state_key(std::string_view name) {
  std::string out;
  for (std::size_t i = 0; i < name.size(); ++i) {
    if (name[i] == '%' && i + 2 < name.size()) {
      out += static_cast<char>(std::stoi(std::string(name.substr(i + 1, 2)), nullptr, 16));
      i += 2;
    } else {
      out += name[i];
    }
  }
  return out;
}

FsStore::FsStore(fs::path root) : root_(std::move(root)) {
  fs::create_directories(root_ / "models");
  fs::create_directories(root_ / "state");
}

std::string FsStore::put_model(ByteView bytes) {
  inspect_model(bytes);
  const std::string id = sha256_hex(bytes);
  const auto target = root_ / "models" / id;
  if (fs::exists(target)) return id;
  atomic_replace(write_temp(target, bytes), target);
  return id;
}

Bytes FsStore::get_model(const std::string& model_id) {
  if (!is_hex_id(model_id)) throw NotFound("model " + model_id + " not found");
  auto bytes = read_file(root_ / "models" / model_id);
  if (!bytes) throw NotFound("model " + model_id + " not found");
  if (sha256_hex(*bytes) != model_id) {
    throw IntegrityError("model " + model_id + " fails hash check");
  }
  return std::move(*bytes);
}

bool FsStore::has_model(const std::string& model_id) {
  return is_hex_id(model_id) && fs::exists(root_ / "models" / model_id);
}

std::vector<TrailEntry> FsStore::read_trail() const {
  std::vector<TrailEntry> out;
  std::ifstream in(root_ / "trail.log");
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(TrailEntry::decode(line));
  }
  return out;
}

std::vector<TrailEntry> FsStore::trail() { return read_trail(); }

void FsStore::trail_append(const TrailEntry& entry) {
  FileLock lock(root_ / "trail.lock");
  auto entries = read_trail();
  const std::string head = entries.empty() ? kNullModelId : entries.back().model_id;
  if (entry.parent_id != head) {
    throw TrailConflict("stale parent " + entry.parent_id + " (head is " + head + ")");
  }
  if (!entries.empty() && entry.round_id <= entries.back().round_id) {
    throw TrailConflict("round " + std::to_string(entry.round_id) +
                        " does not advance the trail");
  }
  std::string text;
  for (const auto& e : entries) text += e.encode() + "\n";
  text += entry.encode() + "\n";
  const auto target = root_ / "trail.log";
  const auto tmp = write_temp(target, as_bytes(text));
  if (crash_hook_) crash_hook_("temp_written");
  atomic_replace(tmp, target);
  if (crash_hook_) crash_hook_("renamed");
}

fs::path FsStore::state_path(const std::string& key) const {
  return root_ / "state" / escape_state_key(key);
}

std::optional<Versioned> FsStore::state_get(const std::string& key) {
  auto bytes = read_file(state_path(key));
  if (!bytes) return std::nullopt;
  const auto text = as_string(*bytes);
  const auto nl = text.find('\n');
  const auto head = text.substr(0, nl);
  if (head.rfind("version=", 0) != 0) {
    throw IntegrityError("state record " + key + " lacks a version");
  }
  Versioned v;
  v.version = std::stoull(std::string(head.substr(8)));
  if (nl != std::string_view::npos) v.value = wire::Fields::decode(text.substr(nl + 1));
  return v;
}

std::optional<std::uint64_t> FsStore::state_cas(const std::string& key,
                                                std::uint64_t expected_version,
                                                const wire::Fields& value) {
  const auto path = state_path(key);
  auto lock_path = path;
  lock_path += ".lock";
  FileLock lock(lock_path);
  const auto current = state_get(key);
  const std::uint64_t version = current ? current->version : 0;
  if (version != expected_version) return std::nullopt;
  const std::string text =
      "version=" + std::to_string(version + 1) + "\n" + value.encode();
  atomic_replace(write_temp(path, as_bytes(text)), path);
  return version + 1;
}

std::vector<std::string> FsStore::state_keys(const std::string& prefix) {
  std::vector<std::string> keys;
  for (const auto& entry : fs::directory_iterator(root_ / "state")) {
    const auto name = entry.path().filename().string();
    if (name.find('.') != std::string::npos) continue;  // locks and temps
    auto key = unescape_state_key(name);
    if (key.rfind(prefix, 0) == 0) keys.push_back(std::move(key));
  }
  std::sort(keys.begin(), keys.end());
  return keys;
}

wire::Fields state_update(
    Store& store, const std::string& key,
    const std::function<wire::Fields(const std::optional<Versioned>&)>& fn) {
  for (;;) {
    const auto current = store.state_get(key);
    auto next = fn(current);
    if (store.state_cas(key, current ? current->version : 0, next)) return next;
  }
}

std::vector<std::string> verify_trail(Store& store) {
  std::vector<std::string> problems;
  std::string expected_parent = kNullModelId;
  for (const auto& e : store.trail()) {
    if (e.parent_id != expected_parent) {
      problems.push_back("round " + std::to_string(e.round_id) +
                         ": parent link broken");
    }
    try {
      const auto bytes = store.get_model(e.model_id);
      if (bytes.size() != e.byte_size) {
        problems.push_back("round " + std::to_string(e.round_id) + ": size mismatch");
      }
    } catch (const Error& err) {
      problems.push_back("round " + std::to_string(e.round_id) + ": " + err.what());
    }
    expected_parent = e.model_id;
  }
  return problems;
}

std::optional<Lease> read_lease(Store& store, const std::string& name) {
  const auto v = store.state_get("lease/" + name);
  if (!v || !v->value.has("holder")) return std::nullopt;
  return Lease{name, v->value.get("holder"),
               from_millis(v->value.get_i64("expiry_ms"))};
}

bool acquire_or_renew_lease(Store& store, const std::string& name,
                            const std::string& holder, WallTime now,
                            std::chrono::milliseconds ttl) {
  const std::string key = "lease/" + name;
  const auto current = store.state_get(key);
  if (current && current->value.has("holder")) {
    const auto& owner = current->value.get("holder");
    const auto expiry = from_millis(current->value.get_i64("expiry_ms"));
    if (owner != holder && now < expiry) return false;
  }
  wire::Fields next;
  next.set("holder", holder);
  next.set("expiry_ms", static_cast<std::int64_t>(to_millis(now + ttl)));
  return store.state_cas(key, current ? current->version : 0, next).has_value();
}

}  // namespace fedtier
