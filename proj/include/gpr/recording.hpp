#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "gpr/common.hpp"
#include "gpr/register_map.hpp"

namespace gpr
{

  enum class ActionKind : uint8_t
  {
    RegWrite = 0x01,
    RegRead = 0x02,
    RegReadWait = 0x03,
    WaitIrq = 0x04,
    MapGpuMem = 0x05,
    UnmapGpuMem = 0x06,
    LoadMemDump = 0x07,
  };

  struct RegWrite
  {
    std::string reg;
    uint32_t value = 0;
    bool operator==(const RegWrite&) const = default;
  };

  struct RegRead
  {
    std::string reg;
    /// Meaningless for NondetRead.
    uint32_t expect = 0;
    StateClass cls = StateClass::StateChanging;
    bool operator==(const RegRead&) const = default;
  };

  struct RegReadWait
  {
    std::string reg;
    uint32_t mask = 0;
    uint32_t expect = 0;
    uint32_t maxPolls = 0;
    bool operator==(const RegReadWait&) const = default;
  };

  struct WaitIrq
  {
    uint32_t expectRawstat = 0;
    bool operator==(const WaitIrq&) const = default;
  };

  struct MapGpuMem
  {
    uint32_t va = 0;
    uint32_t len = 0;
    /// PTE low nibble in the recording SKU's bit layout.
    uint8_t perm = 0;
    bool operator==(const MapGpuMem&) const = default;
  };

  struct UnmapGpuMem
  {
    uint32_t va = 0;
    uint32_t len = 0;
    bool operator==(const UnmapGpuMem&) const = default;
  };

  struct LoadMemDump
  {
    uint32_t dumpId = 0;
    uint32_t va = 0;
    bool operator==(const LoadMemDump&) const = default;
  };

  using ActionBody = std::variant<RegWrite, RegRead, RegReadWait, WaitIrq, MapGpuMem, UnmapGpuMem, LoadMemDump>;

  struct ReplayAction
  {
    ActionBody body;
    /// Pacing floor T; 0 when the interval was proven idle.
    uint64_t minIntervalNs = 0;
    /// Interval observed at record time, start of this action to start
    /// of the next.
    uint64_t observedIntervalNs = 0;

    ActionKind kind() const { return ActionKind(body.index() + 1); }
    template <typename T> const T* as() const { return std::get_if<T>(&body); }
    template <typename T> T* as() { return std::get_if<T>(&body); }
    bool operator==(const ReplayAction&) const = default;
  };

  std::string describe(const ReplayAction& a);
  std::string_view toString(ActionKind k);

  enum class DumpOrigin : uint8_t { ExecPage = 0, MappedFallback = 1 };

  struct MemDump
  {
    uint32_t id = 0;
    uint32_t va = 0;
    uint32_t rawLen = 0;
    DumpOrigin origin = DumpOrigin::MappedFallback;
    /// Raw DEFLATE stream.
    Bytes payload;
    bool operator==(const MemDump&) const = default;
  };

  enum class IoRole : uint8_t { Input = 0, Output = 1 };
  enum class IoMode : uint8_t { ByValue = 0, ByAddress = 1, Both = 2 };

  struct IoDescriptor
  {
    IoRole role = IoRole::Input;
    uint32_t va = 0;
    uint32_t len = 0;
    IoMode mode = IoMode::ByAddress;
    bool operator==(const IoDescriptor&) const = default;
  };

  std::string_view toString(IoRole r);
  std::string_view toString(IoMode m);
  std::string_view toString(DumpOrigin o);

  enum class Granularity : uint8_t { Monolithic = 0, PerLayer = 1 };
  std::string_view toString(Granularity g);

  struct RecordingHeader
  {
    static constexpr uint16_t kVersion = 1;
    uint16_t version = kVersion;
    Granularity granularity = Granularity::Monolithic;
    uint32_t skuId = 0;
    Digest registerMapHash{};
    uint64_t createdUnix = 0;
    std::string label;
    bool operator==(const RecordingHeader&) const = default;
  };

  struct Recording
  {
    RecordingHeader header;
    std::vector<ReplayAction> actions;
    std::vector<MemDump> dumps;
    std::vector<IoDescriptor> io;

    const MemDump* findDump(uint32_t id) const;
    size_t jobCount() const;
    std::vector<IoDescriptor> inputs() const;
    std::vector<IoDescriptor> outputs() const;
    bool operator==(const Recording&) const = default;
  };

}
