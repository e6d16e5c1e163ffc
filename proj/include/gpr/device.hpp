#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <variant>
#include <vector>

#include "gpr/common.hpp"
#include "gpr/register_map.hpp"
#include "gpr/sku.hpp"

namespace gpr
{

  enum class Access : uint8_t { Read, Write, Exec };

  namespace irq
  {
    inline constexpr uint32_t kJobDone = 1u << 0;
    inline constexpr uint32_t kMmuFault = 1u << 1;
    inline constexpr uint32_t kResetDone = 1u << 2;
    inline constexpr uint32_t kAll = kJobDone | kMmuFault | kResetDone;
  }

  namespace status
  {
    inline constexpr uint32_t kJobActive = 1u << 0;
    inline constexpr uint32_t kFlushActive = 1u << 1;
    inline constexpr uint32_t kResetPending = 1u << 2;
    /// Every requested core that exists on the SKU is powered.
    inline constexpr uint32_t kCoresPowered = 1u << 3;
  }

  namespace cmd
  {
    inline constexpr uint32_t kSoftReset = 1;
    inline constexpr uint32_t kCacheFlush = 2;
    inline constexpr uint32_t kTlbInvalidate = 3;
  }

  namespace job_status
  {
    inline constexpr uint32_t kIdle = 0;
    inline constexpr uint32_t kRunning = 1;
    inline constexpr uint32_t kDone = 2;
    inline constexpr uint32_t kBadState = 3;
    inline constexpr uint32_t kMmuFault = 4;
    inline constexpr uint32_t kShaderFault = 5;
  }

  /// In-memory job descriptor: 12 little-endian words.
  struct JobDescriptor
  {
    static constexpr uint32_t kBytes = 48;
    static constexpr uint32_t kMaxChain = 4096;

    uint32_t nextVa = 0;
    uint32_t shaderVa = 0;
    uint32_t shaderLen = 0;
    std::array<uint32_t, 8> params{};
    /// 0 means "use JOB_AFFINITY as is".
    uint32_t affinity = 0;

    std::array<uint8_t, kBytes> toBytes() const;
    static JobDescriptor fromWords(std::span<const uint32_t, 12> words);
  };

  /// Job cost model and other device timing knobs.
  struct DeviceTiming
  {
    uint64_t jobBaseNs = 200;
    uint64_t nsPerInstruction = 2;
    uint64_t flushBaseNs = 100;
    /// Flush cost per dirty 32-bit word.
    double flushNsPerWord = 0.5;
    uint64_t resetNs = 500;
    double jitterLo = 0.9;
    double jitterHi = 1.3;
  };

  /// 16 MiB of shared physical memory as copy-on-write 4 KiB pages so
  /// snapshots stay cheap. A null page reads as zeros.
  class PhysicalMemory
  {
  public:
    using Page = std::array<uint8_t, kPageSize>;

    PhysicalMemory() : pages_(kPhysPages) {}

    bool contains(uint64_t pa, uint64_t len) const
    { return pa <= kPhysMemBytes && len <= kPhysMemBytes - pa; }

    void read(uint64_t pa, std::span<uint8_t> out) const;
    void write(uint64_t pa, std::span<const uint8_t> in);
    uint32_t read32(uint64_t pa) const;
    void write32(uint64_t pa, uint32_t v);
    uint64_t read64(uint64_t pa) const;
    void write64(uint64_t pa, uint64_t v);
    void zeroPage(uint32_t ppn) { pages_.at(ppn).reset(); }

    /// Pages holding at least one non-zero byte (or ever written).
    size_t residentPages() const;

    bool operator==(const PhysicalMemory& o) const;

  private:
    Page& writable(uint32_t ppn);
    std::vector<std::shared_ptr<Page>> pages_;
  };

  enum class JobPhase : uint8_t { Idle, Running, Done, Fault };

  /// Complete simulated-GPU state. Value type; copying it is a snapshot.
  struct DeviceState
  {
    uint32_t irqRawstat = 0;
    uint32_t irqMask = 0;
    uint64_t mmuBase = 0;
    uint32_t mmuConfig = 0;
    uint32_t jobHeadLo = 0;
    uint32_t jobHeadHi = 0;
    uint32_t jobAffinity = 0;
    uint32_t jobStatus = job_status::kIdle;
    uint32_t faultAddr = 0;
    uint32_t coresRequested = 0;
    uint32_t coresOn = 0;

    JobPhase phase = JobPhase::Idle;
    uint64_t jobFinishNs = 0;
    bool jobStalled = false;

    bool flushActive = false;
    uint64_t flushFinishNs = 0;
    bool resetPending = false;
    uint64_t resetFinishNs = 0;

    /// GPU L2 contents not yet written back (phys word address -> value).
    std::map<uint64_t, uint32_t> dirty;
    /// Lines being committed by an in-flight CACHE_FLUSH.
    std::map<uint64_t, uint32_t> cacheWriteback;
    /// Page-walk cache: VPN -> leaf PTE.
    std::map<uint32_t, uint64_t> walkCache;
    bool pageTableLive = false;

    uint32_t clockDiv = 1;
    uint64_t vclockNs = 0;
    std::mt19937_64 envRng;
    PhysicalMemory memory;

    bool operator==(const DeviceState&) const = default;

    /// Equality of everything software can observe or that affects
    /// execution, excluding memory contents, time, and the env stream.
    bool controlEquals(const DeviceState& o) const;
  };

  struct DeviceSnapshot
  {
    uint32_t skuId = 0;
    DeviceState state;
  };

  struct InterruptEvent
  {
    uint64_t timeNs = 0;
    uint32_t rawstat = 0;
    bool operator==(const InterruptEvent&) const = default;
  };

  /// Harness-only fault injections.
  struct OfflineCores { uint32_t mask = 0; };
  struct CorruptPte { uint32_t gpuVa = 0; };
  struct Stall { uint64_t extraNs = 0; };
  using Fault = std::variant<OfflineCores, CorruptPte, Stall>;

  /// Deterministic-under-seed GPU: MMIO registers, shared memory behind a
  /// two-level MMU, interrupts and autonomous job-chain execution in
  /// virtual time.
  ///
  /// Single owner. Nothing happens asynchronously: time only moves in
  /// tick(), which is also the only place interrupts are produced.
  class Device
  {
  public:
    Device(const SkuProfile& sku, uint64_t envSeed, DeviceTiming timing = {});

    Device(const Device&) = delete;
    Device& operator=(const Device&) = delete;

    /// Register window access. nullopt / false is a bus error.
    [[nodiscard]] std::optional<uint32_t> regRead(uint32_t offset);
    [[nodiscard]] bool regWrite(uint32_t offset, uint32_t value);

    /// Translate with fault side effects (MMU_FAULT raised, VA latched,
    /// running job faulted).
    std::optional<uint64_t> translate(uint32_t va, Access access);

    /// Side-effect-free walk, bypassing the walk cache.
    std::optional<uint64_t> probeTranslate(uint32_t va, Access access) const;

    /// Advance virtual time, running any device events that fall due.
    std::vector<InterruptEvent> tick(uint64_t dtNs);

    /// Absolute time of the next autonomous event, if any.
    std::optional<uint64_t> nextEventNs() const;

    /// Level of the interrupt line: rawstat when (rawstat & mask) != 0.
    uint32_t irqLine() const;

    DeviceSnapshot snapshot() const;
    /// Exact restore, time included. Throws on SKU mismatch.
    void restore(const DeviceSnapshot& snap);
    /// Restore but keep the clock moving forward: pending deadlines are
    /// shifted by the time elapsed since the snapshot.
    void restoreRebased(const DeviceSnapshot& snap);

    void injectFault(const Fault& fault);

    /// CPU view of the shared memory (no GPU cache involvement).
    void physRead(uint64_t pa, std::span<uint8_t> out) const;
    void physWrite(uint64_t pa, std::span<const uint8_t> in);
    void physZeroPage(uint32_t ppn);

    /// Environment clock divider (thermal/DVFS); visible via CLOCK_DIV.
    void setClockDiv(uint32_t div);

    uint64_t now() const { return s_.vclockNs; }
    const SkuProfile& sku() const { return sku_; }
    const DeviceState& state() const { return s_; }
    const DeviceTiming& timing() const { return timing_; }

    /// Times of autonomous state changes (job end, flush end, reset end).
    /// Ground truth for checking idle-skip decisions; not part of state.
    const std::vector<uint64_t>& autonomousEvents() const { return events_; }

    /// Session ownership.
    bool claim();
    void release();
    bool claimed() const { return owned_.load(); }

  private:
    uint32_t readStatus() const;
    double drawJitter();
    uint64_t scaled(double ns);
    void softReset();
    void startFlush();
    void startJob();
    void finishJob();
    void finishFlush();
    void raise(uint32_t bits) { s_.irqRawstat |= bits; }
    uint32_t effectiveCores() const;
    std::optional<uint64_t> walk(uint32_t va, Access access, uint64_t* leaf) const;
    bool permitted(uint64_t pte, Access access) const;
    void mmuFault(uint32_t va);

    struct ChainResult
    {
      enum Outcome : uint8_t { Ok, MmuFault, ShaderFault } outcome = Ok;
      uint64_t instructions = 0;
    };
    /// Walk and execute the chain at @p headVa. With @p overlay set this is
    /// a side-effect-free dry run whose stores land in the overlay.
    ChainResult runChain(uint32_t headVa, std::map<uint64_t, uint32_t>* overlay);
    std::optional<uint32_t> gpuLoad(uint32_t va, Access access, std::map<uint64_t, uint32_t>* overlay);
    bool gpuStore(uint32_t va, uint32_t value, std::map<uint64_t, uint32_t>* overlay);

    SkuProfile sku_;
    DeviceTiming timing_;
    DeviceState s_;
    std::vector<uint64_t> events_;
    std::atomic<bool> owned_{false};
  };

  /// Leaf/L1 PTE helpers shared by every page-table writer.
  namespace pte
  {
    inline constexpr uint64_t kAddrMask = 0x000000fffffff000ull;
    inline constexpr uint32_t kL1Shift = 22;
    inline constexpr uint32_t kL2Shift = 12;
    inline constexpr uint32_t kIndexMask = 0x3ff;
    inline constexpr uint32_t kTableBytes = 1024 * 8;

    inline uint64_t make(uint64_t pa, uint8_t permBits) { return (pa & kAddrMask) | (permBits & 0xf); }
    inline uint32_t l1Index(uint32_t va) { return va >> kL1Shift; }
    inline uint32_t l2Index(uint32_t va) { return (va >> kL2Shift) & kIndexMask; }
  }

}
