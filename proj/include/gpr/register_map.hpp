#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gpr/common.hpp"

namespace gpr
{

  enum class RegAccess : uint8_t { ReadOnly, WriteOnly, ReadWrite };

  /// How register traffic relates to GPU state.
  enum class StateClass : uint8_t { StateChanging = 0, PureRead = 1, NondetRead = 2 };

  struct RegisterEntry
  {
    std::string name;
    uint32_t offset = 0;
    RegAccess access = RegAccess::ReadWrite;
    StateClass stateClass = StateClass::StateChanging;
    /// Value is a physical address chosen by whoever owns the page tables.
    bool relocatable = false;

    bool readable() const { return access != RegAccess::WriteOnly; }
    bool writable() const { return access != RegAccess::ReadOnly; }
    bool operator==(const RegisterEntry&) const = default;
  };

  /// Register byte offsets of the default map.
  namespace reg
  {
    inline constexpr uint32_t GPU_ID = 0x00;
    inline constexpr uint32_t GPU_STATUS = 0x04;
    inline constexpr uint32_t GPU_IRQ_RAWSTAT = 0x08;
    inline constexpr uint32_t GPU_IRQ_CLEAR = 0x0C;
    inline constexpr uint32_t GPU_IRQ_MASK = 0x10;
    inline constexpr uint32_t GPU_CMD = 0x14;
    inline constexpr uint32_t MMU_TABLE_BASE_LO = 0x18;
    inline constexpr uint32_t MMU_TABLE_BASE_HI = 0x1C;
    inline constexpr uint32_t MMU_CONFIG = 0x20;
    inline constexpr uint32_t JOB_HEAD_LO = 0x24;
    inline constexpr uint32_t JOB_HEAD_HI = 0x28;
    inline constexpr uint32_t JOB_START = 0x2C;
    inline constexpr uint32_t JOB_STATUS = 0x30;
    inline constexpr uint32_t JOB_AFFINITY = 0x34;
    inline constexpr uint32_t JOB_PROGRESS = 0x38;
    inline constexpr uint32_t CLOCK_DIV = 0x3C;
    inline constexpr uint32_t PWR_CORES_ON = 0x40;
    inline constexpr uint32_t MMU_FAULT_ADDR = 0x44;
    inline constexpr uint32_t kWindowBytes = 0x48;
  }

  class RegisterMap
  {
  public:
    RegisterMap() = default;

    /// Throws gpr::Error on duplicate names/offsets or a writable NONDET
    /// register.
    explicit RegisterMap(std::vector<RegisterEntry> entries);

    const RegisterEntry* byName(std::string_view name) const;
    const RegisterEntry* byOffset(uint32_t offset) const;

    /// Throws when the name is unknown.
    const RegisterEntry& at(std::string_view name) const;

    const std::vector<RegisterEntry>& entries() const { return entries_; }

    /// SHA-256 over the canonical text form; binds recordings to an
    /// interface version.
    Digest hash() const;

    /// One entry per line: name offset ro|wo|rw state|pure|nondet [reloc]
    std::string toText() const;
    static RegisterMap parse(std::string_view text);

    bool operator==(const RegisterMap& o) const { return entries_ == o.entries_; }

  private:
    std::vector<RegisterEntry> entries_;
  };

  /// The fixed register map shared by every built-in SKU.
  const RegisterMap& defaultRegisterMap();

  std::string_view toString(StateClass c);
  std::string_view toString(RegAccess a);

}
