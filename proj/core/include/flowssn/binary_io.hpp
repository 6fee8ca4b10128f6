// Copyright 2026 The FlowSSN Authors.
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

// Little-endian raw array files.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace flowssn::io {

template <typename T>
T byteswap_value(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  std::reverse(bytes, bytes + sizeof(T));
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

template <typename T>
void append_le(std::string& buffer, std::span<const T> values) {
  const std::size_t start = buffer.size();
  buffer.resize(start + values.size() * sizeof(T));
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    std::memcpy(buffer.data() + start, values.data(), values.size() * sizeof(T));
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T v = byteswap_value(values[i]);
      std::memcpy(buffer.data() + start + i * sizeof(T), &v, sizeof(T));
    }
  }
}

template <typename T>
void write_le_file(const std::filesystem::path& path, std::span<const T> values) {
  std::string buffer;
  append_le(buffer, values);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(buffer.data(), static_cast<std::streamsize>(buffer.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

template <typename T>
std::vector<T> decode_le(const char* data, std::size_t count) {
  std::vector<T> out(count);
  std::memcpy(out.data(), data, count * sizeof(T));
  if constexpr (std::endian::native != std::endian::little && sizeof(T) > 1) {
    for (auto& v : out) v = byteswap_value(v);
  }
  return out;
}

template <typename T>
std::vector<T> read_le_file(const std::filesystem::path& path, std::uint64_t offset,
                            std::uint64_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  in.seekg(static_cast<std::streamoff>(offset));
  std::string buffer(count * sizeof(T), '\0');
  in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
  if (static_cast<std::uint64_t>(in.gcount()) != buffer.size()) {
    throw std::runtime_error("short read: " + path.string());
  }
  return decode_le<T>(buffer.data(), count);
}

}  // namespace flowssn::io
