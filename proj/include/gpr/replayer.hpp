#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gpr/device.hpp"
#include "gpr/recording.hpp"
#include "gpr/verifier.hpp"

namespace gpr
{

  class ReplayError : public Error
  {
  public:
    using Error::Error;
  };

  struct ReplayConfig
  {
    /// Pace by min_interval (skips honored) or by the observed interval.
    bool honorSkips = true;
    /// Checkpoint after every K completed jobs; 0 disables checkpointing.
    uint32_t checkpointEveryJobs = 0;
    /// Skip verification and SKU / map-hash checks. The budget still holds.
    bool force = false;
    uint64_t memBudgetBytes = kDefaultMemBudget;
    uint32_t maxRecoveryAttempts = 4;
    /// Actions before a failure whose pacing is stretched on retries 2..N.
    uint32_t delayWindow = 8;
    uint64_t watchdogFloorNs = 1'000'000;
    uint32_t watchdogFactor = 10;
    uint64_t regAccessNs = 20;
    uint64_t pollGapNs = 40;
    /// Longest single tick while waiting for an interrupt.
    uint64_t waitQuantumNs = 10'000;
    double dumpNsPerByte = 0.25;
    double checkpointNsPerByte = 2.7;
    /// Start of the replayer's physical page arena.
    uint64_t paBase = 0x0020'0000;
  };

  enum class DivergenceKind : uint8_t { ValueMismatch, IrqMismatch, MmuFault, Timeout, IllegalAccess };
  std::string_view toString(DivergenceKind k);

  struct DivergenceReport
  {
    size_t actionIndex = 0;
    DivergenceKind kind = DivergenceKind::ValueMismatch;
    std::string reg;
    uint32_t expected = 0;
    uint32_t got = 0;
    uint32_t va = 0;
    uint64_t waitedNs = 0;

    std::string toText() const;
  };

  struct FinalReport
  {
    DivergenceReport divergence;
    std::string label;
    size_t actionIndex = 0;
    std::string action;
    /// Map / dump actions covering the faulting VA, if any.
    std::vector<std::pair<size_t, std::string>> related;

    std::string toText() const;
  };

  /// Register-level event used for state-transition equivalence.
  struct StateEvent
  {
    enum Kind : uint8_t { Write, Read, Poll, Irq } kind = Write;
    std::string reg;
    uint32_t value = 0;
    bool operator==(const StateEvent&) const = default;
  };

  /// Events a replay of @p rec must reproduce, derived from its actions.
  std::vector<StateEvent> expectedStateEvents(const Recording& rec);

  struct PreemptAck
  {
    uint64_t requestedNs = 0;
    uint64_t resetDoneNs = 0;
    uint64_t delayNs() const { return resetDoneNs - requestedNs; }
  };

  enum class ReplayStatus : uint8_t { Ok, Failed, Preempted };

  struct ReplayResult
  {
    ReplayStatus status = ReplayStatus::Failed;
    std::vector<Bytes> outputs;
    uint32_t recoveryAttempts = 0;
    std::vector<DivergenceReport> divergences;
    std::optional<FinalReport> finalReport;
    uint64_t durationNs = 0;
    std::vector<StateEvent> events;
    /// JOB_START writes issued during this call (all attempts).
    uint32_t jobsStarted = 0;
    uint32_t checkpointsTaken = 0;
    std::optional<PreemptAck> preemptAck;

    bool ok() const { return status == ReplayStatus::Ok; }
  };

  struct StepResult
  {
    bool done = false;
    bool preempted = false;
    std::optional<DivergenceReport> divergence;
  };

  struct Checkpoint
  {
    uint64_t loadId = 0;
    size_t actionIndex = 0;
    DeviceSnapshot snapshot;
    size_t eventCount = 0;
    uint32_t jobsCompleted = 0;
    uint64_t bytesCopied = 0;
  };

  enum class HookPhase : uint8_t { BeforeAction, AfterExecute };
  /// Test hook run around each action: (device, action index, attempt, phase).
  using StepHook = std::function<void(Device&, size_t, uint32_t, HookPhase)>;

  /// The nano driver plus replay control loop. One session owns a device
  /// from init() to cleanup().
  class ReplaySession
  {
  public:
    /// Claim the device and reset it. Throws ReplayError if the device is
    /// owned or does not come out of reset.
    ReplaySession(Device& dev, ReplayConfig cfg = {});
    ~ReplaySession();

    ReplaySession(const ReplaySession&) = delete;
    ReplaySession& operator=(const ReplaySession&) = delete;

    /// Verify (unless forced), allocate fresh pages, rebuild page tables,
    /// load dumps and program the MMU. Supersedes any previous load.
    void load(const Recording& rec);

    /// Run the loaded recording with recovery. One input buffer per INPUT
    /// descriptor, in I/O-table order; an empty buffer leaves a `both`
    /// input at its recorded value.
    ReplayResult replay(const std::vector<Bytes>& inputs);

    /// Continue after a preemption: from the latest checkpoint if any,
    /// else from the start.
    ReplayResult resume();

    /// Manual stepping (no recovery): begin() then step() until done.
    void begin(const std::vector<Bytes>& inputs);
    StepResult step();
    std::vector<Bytes> readOutputs() const;

    Checkpoint checkpoint();
    void restore(const Checkpoint& cp);
    /// Throws when checkpointing is off or nothing was taken yet.
    const Checkpoint& latestCheckpoint() const;
    void restoreLatest();

    /// Safe from any thread; the handoff runs at the next action boundary
    /// or wait quantum. @p requestedNs defaults to the current virtual time.
    void requestPreempt(std::optional<uint64_t> requestedNs = std::nullopt);
    /// Immediate handoff: flush, TLB invalidate, soft reset, scrub.
    PreemptAck preempt();

    /// Reset the GPU, scrub every page the session touched, release.
    void cleanup();

    void setHook(StepHook hook) { hook_ = std::move(hook); }

    Device& device() { return dev_; }
    const Recording& recording() const;
    size_t cursor() const { return cursor_; }
    uint64_t loadId() const { return loadId_; }
    const std::vector<StateEvent>& events() const { return events_; }
    const std::vector<double>& delayMultipliers() const { return mult_; }
    /// Physical address backing @p va under the mapping live at end.
    std::optional<uint64_t> physOf(uint32_t va) const;
    uint64_t tableBasePa() const { return l1Pa_; }
    size_t sessionPages() const { return pages_.size(); }

  private:
    struct MapSlot
    {
      size_t mapIndex = 0;
      size_t unmapIndex = SIZE_MAX;
      uint32_t va = 0;
      uint32_t len = 0;
      uint8_t perm = 0;
      uint64_t pa = 0;
    };

    void nanoReset();
    uint32_t rd(uint32_t offset);
    void wr(uint32_t offset, uint32_t value);
    bool waitReg(uint32_t offset, uint32_t mask, uint32_t expect, uint64_t timeoutNs);
    uint64_t allocPages(uint32_t n);
    void scrubPages();
    void buildTables();
    void preloadDumps();
    void writeInputs();
    void reapplyInputs(uint32_t va, uint32_t len);
    void freshStart();
    void writeLeaves(const MapSlot& m, bool present);
    const MapSlot* slotAt(uint32_t va, size_t actionIndex) const;
    const MapSlot* slotAtEnd(uint32_t va) const;
    uint64_t watchdogFor(size_t i) const;
    ReplayResult runLoop(ReplayResult r);
    void recover(uint32_t attempt, const DivergenceReport& rep);
    FinalReport makeFinal(const DivergenceReport& rep) const;
    uint64_t liveBytes() const;

    Device& dev_;
    ReplayConfig cfg_;
    std::optional<Recording> rec_;
    SkuProfile recSku_;
    uint64_t loadId_ = 0;

    std::vector<uint32_t> pages_;
    uint64_t nextPa_ = 0;
    uint64_t l1Pa_ = 0;
    std::map<uint32_t, uint64_t> l2Pa_;
    std::vector<MapSlot> slots_;
    std::map<uint32_t, Bytes> rawDumps_;

    std::vector<Bytes> inputs_;
    size_t cursor_ = 0;
    uint32_t attempt_ = 0;
    std::vector<double> mult_;
    std::vector<StateEvent> events_;
    uint32_t jobsCompleted_ = 0;
    uint32_t jobsStarted_ = 0;
    uint32_t checkpointsTaken_ = 0;
    std::vector<Checkpoint> checkpoints_;

    std::atomic<bool> preemptFlag_{false};
    std::atomic<uint64_t> preemptAt_{0};
    bool preempted_ = false;
    std::optional<PreemptAck> lastAck_;
    bool cleaned_ = false;
    StepHook hook_;
  };

  /// Replay per-layer recordings in order, feeding output k to input k+1.
  /// @p hooks[k], when present and set, runs during recording k.
  ReplayResult replaySequence(Device& dev, const ReplayConfig& cfg, const std::vector<Recording>& recs,
                              const std::vector<Bytes>& firstInputs, const std::vector<StepHook>& hooks = {});

  enum class FaultKind : uint8_t { OfflineCores, CorruptPte, Stall };

  struct FaultPlan
  {
    FaultKind kind = FaultKind::CorruptPte;
    /// Re-apply on every attempt instead of only the first run.
    bool persistent = false;
    uint32_t coreMask = 0xffffffffu;
    uint64_t stallNs = 5'000'000;
  };

  /// Action index where a fault of this kind is injected.
  size_t injectionPoint(const Recording& rec, FaultKind kind);
  /// Target VA for CORRUPT_PTE: the first input, else the first non-exec map.
  uint32_t corruptTarget(const Recording& rec);
  StepHook makeFaultHook(const Recording& rec, const FaultPlan& plan);

}
