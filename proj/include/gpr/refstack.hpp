#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gpr/common.hpp"
#include "gpr/device.hpp"
#include "gpr/register_map.hpp"
#include "gpr/shader.hpp"

namespace gpr
{

  class WorkloadError : public Error
  {
  public:
    WorkloadError(size_t layer, const std::string& what)
        : Error("layer " + std::to_string(layer) + ": " + what), layer_(layer) {}
    size_t layer() const { return layer_; }

  private:
    size_t layer_;
  };

  class DriverError : public Error
  {
  public:
    using Error::Error;
  };

  enum class LayerOp : uint8_t { VecAdd, Scale, Relu, Matmul, Copy };

  /// One graph layer. Elements are int32 with wrapping arithmetic.
  ///   vec_add n     : in = a[n] ++ b[n], out[n] = a + b
  ///   scale n k     : out = in * k
  ///   relu n        : out = max(in, 0)
  ///   matmul m n k  : in = A[m x k] ++ B[k x n] (row major), out = A B
  ///   copy n        : out = in
  struct Layer
  {
    LayerOp op = LayerOp::Copy;
    uint32_t n = 0;
    uint32_t m = 0;
    uint32_t k = 0;
    int32_t scale = 0;

    uint32_t inputElems() const;
    uint32_t outputElems() const;
    std::string toText() const;
    bool operator==(const Layer&) const = default;
  };

  struct WorkloadGraph
  {
    std::string label;
    std::vector<Layer> layers;

    /// Throws gpr::Error on empty graphs, bad sizes or shape mismatch.
    void validate() const;
    size_t inputBytes() const { return size_t(layers.front().inputElems()) * 4; }
    size_t outputBytes() const { return size_t(layers.back().outputElems()) * 4; }

    std::string toText() const;
    static WorkloadGraph parse(std::string_view text);
    static WorkloadGraph load(const std::string& path);
    bool operator==(const WorkloadGraph&) const = default;
  };

  namespace workloads
  {
    WorkloadGraph vecAdd(uint32_t n = 256);
    WorkloadGraph scale(uint32_t n = 256, int32_t k = 3);
    WorkloadGraph relu(uint32_t n = 256);
    WorkloadGraph matmul(uint32_t m = 8, uint32_t n = 8, uint32_t k = 8);
    /// vec_add 64 -> scale 64 (k=-2) -> relu 64.
    WorkloadGraph mixed();
    /// 49 scale layers of 64 elements alternating k=3 and k=-1; odd
    /// factors keep the data invertible. With output staging this submits
    /// 50 jobs.
    WorkloadGraph fiftyJobs();
    /// The five graphs every acceptance sweep runs over.
    std::vector<WorkloadGraph> builtin();
  }

  /// Shader JIT for one layer. Operand addresses are GPU VAs.
  struct CompiledKernel
  {
    std::vector<uint32_t> code;
    std::array<uint32_t, 8> params{};
    uint64_t expectedInstructions = 0;
  };

  CompiledKernel compileLayer(const Layer& layer, uint32_t inVa, uint32_t outVa);

  enum AllocFlag : uint8_t
  {
    kGpuExec = 1,
    kCpuVisible = 2,
    kInternalScratch = 4,
  };

  struct Allocation
  {
    uint32_t va = 0;
    /// Requested size; the mapping covers pageRoundUp(size).
    uint32_t size = 0;
    uint64_t pa = 0;
    uint8_t flags = 0;
    std::string purpose;
    int layer = -1;
    bool committed = false;
    bool freed = false;

    uint32_t mappedLen() const { return uint32_t(pageRoundUp(size)); }
    bool covers(uint32_t a, uint32_t len) const
    { return a >= va && uint64_t(a) + len <= uint64_t(va) + mappedLen(); }
  };

  struct StackDelays
  {
    uint64_t jitNs = 0;
    uint64_t mgmtNs = 0;
    /// Upper bound of a uniform sleep drawn before each driver call.
    uint64_t osJitterNs = 0;
  };

  struct BusyInterval
  {
    uint64_t begin = 0;
    uint64_t end = 0;
  };

  struct PollSite
  {
    uint32_t mask = 0;
  };

  class Driver;

  /// Instrumentation hooks on every driver <-> device interaction.
  class DriverProbe
  {
  public:
    virtual ~DriverProbe() = default;
    virtual void onRegWrite(const RegisterEntry&, uint32_t /*value*/, uint64_t /*t*/) {}
    virtual void onRegRead(const RegisterEntry&, uint32_t /*value*/, uint64_t /*t*/, std::optional<PollSite>) {}
    virtual void onPollEnd(const RegisterEntry&, uint32_t /*mask*/, uint32_t /*finalMasked*/, uint32_t /*polls*/) {}
    virtual void onMap(const Allocation&, uint8_t /*permBits*/, uint64_t /*t*/) {}
    virtual void onUnmap(const Allocation&, uint64_t /*t*/) {}
    virtual void beforeKick(Driver&, uint64_t /*t*/) {}
    virtual void onIrq(uint32_t /*rawstat*/, uint64_t /*t*/) {}
  };

  struct DriverTiming
  {
    uint64_t regAccessNs = 20;
    uint64_t pollGapNs = 40;
    uint64_t irqEntryNs = 200;
    uint64_t watchdogFloorNs = 1'000'000;
    uint32_t watchdogFactor = 10;
    uint64_t vaBase = 0x0010'0000;
    uint64_t paBase = 0x0010'0000;
  };

  /// Kernel-side driver: page tables, register access, depth-1 job
  /// submission and interrupt handling.
  class Driver
  {
  public:
    Driver(Device& dev, DriverProbe* probe = nullptr, DriverTiming timing = {});

    /// Reset allocator and page-table state, then bring the GPU up.
    void probe();

    uint32_t readReg(std::string_view name, std::optional<PollSite> poll = std::nullopt);
    void writeReg(std::string_view name, uint32_t value);
    /// Poll until (reg & mask) == expect; DriverError after @p timeoutNs.
    uint32_t waitFor(std::string_view name, uint32_t mask, uint32_t expect, uint64_t timeoutNs);

    /// Reserve VA + contiguous physical pages. PTEs are written lazily at
    /// the next submit.
    const Allocation& allocate(uint32_t size, uint8_t flags, std::string purpose, int layer);
    /// Unmap immediately and release.
    void free(uint32_t va);

    /// CPU access to an allocation, bypassing the GPU.
    void cpuWrite(uint32_t va, std::span<const uint8_t> bytes);
    Bytes cpuRead(uint32_t va, uint32_t len) const;

    /// Kick a chain and wait for completion and cache flush. @p layer names
    /// the failing layer in WorkloadError.
    void submit(uint32_t chainVa, uint64_t expectedCostNs, size_t layer);

    void sleep(uint64_t ns);
    /// Uniform OS-noise sleep drawn from the stack RNG.
    void osJitter();

    void setDelays(const StackDelays& d) { delays_ = d; }
    void seedStack(uint64_t seed) { rng_.seed(seed); }

    Device& device() { return dev_; }
    const SkuProfile& sku() const { return sku_; }
    const std::vector<Allocation>& allocations() const { return allocs_; }
    const Allocation* findAllocation(uint32_t va) const;
    const std::vector<BusyInterval>& busyIntervals() const { return busy_; }
    uint64_t l1TablePa() const { return l1Pa_; }
    bool jobOutstanding() const { return outstanding_; }

  private:
    uint64_t allocPhys(uint32_t pages);
    void commitPending();
    void writeLeafPtes(const Allocation& a, bool present);

    Device& dev_;
    DriverProbe* probe_;
    DriverTiming timing_;
    SkuProfile sku_;
    const RegisterMap& map_;
    StackDelays delays_;
    std::mt19937_64 rng_;

    std::vector<Allocation> allocs_;
    std::vector<BusyInterval> busy_;
    uint64_t nextVa_ = 0;
    uint64_t nextPa_ = 0;
    uint64_t l1Pa_ = 0;
    std::vector<uint64_t> l2Pa_;
    bool outstanding_ = false;
  };

  /// User-space runtime: JIT + memory management on top of the driver.
  class Runtime
  {
  public:
    Runtime(Device& dev, DriverProbe* probe = nullptr, StackDelays delays = {}, uint64_t stackSeed = 1);

    /// Run the graph from a freshly probed device and return the output.
    Bytes run(const WorkloadGraph& graph, std::span<const uint8_t> input);

    Driver& driver() { return drv_; }
    const Driver& driver() const { return drv_; }

    static constexpr uint32_t kScratchBytes = 16 * 1024;
    static constexpr uint32_t kShaderOffset = 64;

  private:
    uint32_t emitJob(const Layer& layer, size_t index, uint32_t inVa, uint32_t outVa, uint64_t& expectedNs);

    Driver drv_;
    StackDelays delays_;
  };

}
