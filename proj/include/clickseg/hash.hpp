#pragma once

#include <span>
#include <string>
#include <string_view>

namespace clickseg {

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(std::string_view text);

template <typename T>
std::string sha256_of(std::span<const T> values) {
  return sha256_hex(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(values.data()),
                                                   values.size_bytes()));
}

}  // namespace clickseg
