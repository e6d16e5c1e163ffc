#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gpr
{

  using Bytes = std::vector<uint8_t>;
  using Digest = std::array<uint8_t, 32>;

  inline constexpr uint32_t kPageShift = 12;
  inline constexpr uint32_t kPageSize = 1u << kPageShift;
  inline constexpr uint64_t kPhysMemBytes = 16ull << 20;
  inline constexpr uint32_t kPhysPages = uint32_t(kPhysMemBytes >> kPageShift);

  constexpr uint64_t pageRoundUp(uint64_t n)
  { return (n + kPageSize - 1) & ~uint64_t(kPageSize - 1); }

  constexpr bool pageAligned(uint64_t a)
  { return (a & (kPageSize - 1)) == 0; }

  /// Base class of every error thrown by the library.
  class Error : public std::runtime_error
  {
  public:
    using std::runtime_error::runtime_error;
  };

  /// SHA-256 of a byte range.
  Digest sha256(std::span<const uint8_t> data);

  std::string hex32(uint32_t v);
  std::string hexDigest(const Digest& d);

  /// Little-endian helpers used by the codec and the device.
  inline uint32_t loadLe32(const uint8_t* p)
  { return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24; }

  inline void storeLe32(uint8_t* p, uint32_t v)
  {
    p[0] = uint8_t(v); p[1] = uint8_t(v >> 8); p[2] = uint8_t(v >> 16); p[3] = uint8_t(v >> 24);
  }

  /// Pack/unpack int32 element buffers as little-endian bytes.
  Bytes packI32(std::span<const int32_t> values);
  std::vector<int32_t> unpackI32(std::span<const uint8_t> bytes);

}
