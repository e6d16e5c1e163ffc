#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace gpr
{

  /// Logical page permissions, independent of any SKU's PTE bit order.
  enum class Perm : uint8_t { Valid = 1, Read = 2, Write = 4, Exec = 8 };

  /// Set of logical permissions (bit i of the mask is Perm value 1<<i).
  struct PermSet
  {
    uint8_t bits = 0;

    constexpr bool has(Perm p) const { return bits & uint8_t(p); }
    constexpr PermSet with(Perm p) const { return PermSet{uint8_t(bits | uint8_t(p))}; }
    constexpr bool operator==(const PermSet&) const = default;
  };

  constexpr PermSet operator|(Perm a, Perm b) { return PermSet{uint8_t(uint8_t(a) | uint8_t(b))}; }
  constexpr PermSet operator|(PermSet a, Perm b) { return a.with(b); }

  /// Which logical permission lives at each of PTE bits 0-3.
  using PermLayout = std::array<Perm, 4>;

  bool isBijection(const PermLayout& layout);

  /// Encode logical permissions into the low nibble of a PTE.
  uint8_t encodePerms(const PermLayout& layout, PermSet perms);

  /// Decode the low nibble of a PTE into logical permissions.
  PermSet decodePerms(const PermLayout& layout, uint8_t bits);

  /// Per-GPU-model interface description.
  struct SkuProfile
  {
    std::string name;
    uint32_t skuId = 0;
    uint32_t coreCount = 1;
    PermLayout permLayout{Perm::Valid, Perm::Read, Perm::Write, Perm::Exec};
    uint32_t expectedMmuConfig = 0;
    uint32_t gpuIdValue = 0;

    uint32_t fullCoreMask() const
    { return coreCount >= 32 ? 0xffffffffu : (1u << coreCount) - 1; }

    /// Throws gpr::Error when the invariants do not hold.
    void validate() const;

    bool operator==(const SkuProfile&) const = default;
  };

  const SkuProfile& skuA();
  const SkuProfile& skuB();

  /// Lookup among the built-in profiles.
  std::optional<SkuProfile> skuById(uint32_t skuId);
  std::optional<SkuProfile> skuByName(std::string_view name);

}
