#pragma once

#include <cstddef>
#include <cstdint>

namespace mlae {

// FNV-1a 64-bit. Every single-bit change of the input changes the digest
// (both the xor and the odd-prime multiply are invertible), which is all
// the checkpoint integrity check needs.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xCBF29CE484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace mlae
