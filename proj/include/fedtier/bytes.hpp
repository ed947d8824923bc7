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

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fedtier {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

static_assert(std::endian::native == std::endian::little,
              "little-endian hosts only");

template <typename T>
inline void put_le(std::uint8_t* out, T v) {
  std::memcpy(out, &v, sizeof(T));
}

template <typename T>
inline T get_le(const std::uint8_t* in) {
  T v;
  std::memcpy(&v, in, sizeof(T));
  return v;
}

template <typename T>
inline void append_le(Bytes& out, T v) {
  const auto n = out.size();
  out.resize(n + sizeof(T));
  put_le(out.data() + n, v);
}

inline ByteView as_bytes(std::string_view s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

inline std::string_view as_string(ByteView b) {
  return {reinterpret_cast<const char*>(b.data()), b.size()};
}

std::string to_hex(ByteView bytes);
Bytes from_hex(std::string_view hex);

}  // namespace fedtier
