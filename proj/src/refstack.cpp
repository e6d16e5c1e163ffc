#include "gpr/refstack.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace gpr
{

  // ---------------------------------------------------------------------
  // Graphs

  uint32_t Layer::inputElems() const
  {
    switch (op)
    {
      case LayerOp::VecAdd: return 2 * n;
      case LayerOp::Matmul: return m * k + k * n;
      default: return n;
    }
  }

  uint32_t Layer::outputElems() const
  {
    return op == LayerOp::Matmul ? m * n : n;
  }

  std::string Layer::toText() const
  {
    switch (op)
    {
      case LayerOp::VecAdd: return "layer vec_add " + std::to_string(n);
      case LayerOp::Scale: return "layer scale " + std::to_string(n) + " " + std::to_string(scale);
      case LayerOp::Relu: return "layer relu " + std::to_string(n);
      case LayerOp::Matmul:
        return "layer matmul " + std::to_string(m) + " " + std::to_string(n) + " " + std::to_string(k);
      case LayerOp::Copy: return "layer copy " + std::to_string(n);
    }
    return {};
  }

  void WorkloadGraph::validate() const
  {
    if (layers.empty())
      throw Error("workload has no layers");
    if (label.size() > 64)
      throw Error("workload label longer than 64 bytes");
    for (size_t i = 0; i < layers.size(); ++i)
    {
      const Layer& l = layers[i];
      std::string where = "layer " + std::to_string(i) + ": ";
      if (l.op == LayerOp::Matmul)
      {
        if (l.m == 0 || l.n == 0 || l.k == 0)
          throw Error(where + "matmul dimensions must be >= 1");
        if (uint64_t(l.n) * 4 > 32767)
          throw Error(where + "matmul n too large for the row stride immediate");
        if (uint64_t(l.m) * l.n * 18 + 1 > isa::kMaxShaderBytes / 4)
          throw Error(where + "matmul output too large for one shader");
      }
      else if (l.n == 0)
        throw Error(where + "element count must be >= 1");
      if (uint64_t(l.inputElems()) * 4 > 4u << 20)
        throw Error(where + "buffer larger than 4 MiB");
      if (i > 0 && layers[i - 1].outputElems() != l.inputElems())
        throw Error(where + "input of " + std::to_string(l.inputElems()) + " elements does not match previous output of " +
                    std::to_string(layers[i - 1].outputElems()));
    }
  }

  std::string WorkloadGraph::toText() const
  {
    std::string s;
    if (!label.empty())
      s += "label " + label + "\n";
    for (const auto& l : layers)
      s += l.toText() + "\n";
    return s;
  }

  WorkloadGraph WorkloadGraph::parse(std::string_view text)
  {
    WorkloadGraph g;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineNo = 0;
    while (std::getline(in, line))
    {
      ++lineNo;
      if (auto h = line.find('#'); h != std::string::npos)
        line.resize(h);
      std::istringstream ls(line);
      std::string kw;
      if (!(ls >> kw))
        continue;
      auto bad = [&](const std::string& why) {
        return Error("workload line " + std::to_string(lineNo) + ": " + why);
      };
      if (kw == "label")
      {
        if (!(ls >> g.label))
          throw bad("label needs a name");
        continue;
      }
      if (kw != "layer")
        throw bad("unknown keyword " + kw);
      std::string op;
      ls >> op;
      Layer l;
      int64_t a = 0, b = 0, c = 0;
      auto unsignedArg = [&](int64_t v) {
        if (v <= 0 || v > 0x7fffffff)
          throw bad("size must be a positive integer");
        return uint32_t(v);
      };
      if (op == "vec_add" || op == "relu" || op == "copy")
      {
        if (!(ls >> a))
          throw bad(op + " needs n");
        l.op = op == "vec_add" ? LayerOp::VecAdd : op == "relu" ? LayerOp::Relu : LayerOp::Copy;
        l.n = unsignedArg(a);
      }
      else if (op == "scale")
      {
        if (!(ls >> a >> b))
          throw bad("scale needs n k");
        if (b < INT32_MIN || b > INT32_MAX)
          throw bad("scale factor out of int32 range");
        l.op = LayerOp::Scale;
        l.n = unsignedArg(a);
        l.scale = int32_t(b);
      }
      else if (op == "matmul")
      {
        if (!(ls >> a >> b >> c))
          throw bad("matmul needs m n k");
        l.op = LayerOp::Matmul;
        l.m = unsignedArg(a);
        l.n = unsignedArg(b);
        l.k = unsignedArg(c);
      }
      else
        throw bad("unknown layer op '" + op + "'");
      std::string extra;
      if (ls >> extra)
        throw bad("trailing token " + extra);
      g.layers.push_back(l);
    }
    g.validate();
    return g;
  }

  WorkloadGraph WorkloadGraph::load(const std::string& path)
  {
    std::ifstream f(path);
    if (!f)
      throw Error("cannot open workload " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  namespace workloads
  {
    WorkloadGraph vecAdd(uint32_t n) { return {"vec_add", {{LayerOp::VecAdd, n}}}; }
    WorkloadGraph scale(uint32_t n, int32_t k) { return {"scale", {{LayerOp::Scale, n, 0, 0, k}}}; }
    WorkloadGraph relu(uint32_t n) { return {"relu", {{LayerOp::Relu, n}}}; }
    WorkloadGraph matmul(uint32_t m, uint32_t n, uint32_t k)
    {
      return {"matmul", {{LayerOp::Matmul, n, m, k}}};
    }

    WorkloadGraph mixed()
    {
      return {"mixed", {{LayerOp::VecAdd, 64}, {LayerOp::Scale, 64, 0, 0, -2}, {LayerOp::Relu, 64}}};
    }

    WorkloadGraph fiftyJobs()
    {
      WorkloadGraph g{"fifty_jobs", {}};
      for (int i = 0; i < 49; ++i)
        g.layers.push_back(Layer{LayerOp::Scale, 64, 0, 0, i % 2 == 0 ? 3 : -1});
      return g;
    }

    std::vector<WorkloadGraph> builtin()
    {
      return {vecAdd(), scale(), relu(), matmul(), mixed()};
    }
  }

  // ---------------------------------------------------------------------
  // JIT

  CompiledKernel compileLayer(const Layer& l, uint32_t inVa, uint32_t outVa)
  {
    CompiledKernel kc;
    isa::Assembler as;
    switch (l.op)
    {
      case LayerOp::VecAdd:
      {
        kc.params = {inVa, inVa + 4 * l.n, outVa, l.n};
        size_t top = as.here();
        as.ld(4, 0);
        as.ld(5, 1);
        as.add(4, 4, 5);
        as.st(2, 4);
        as.addi(0, 0, 4);
        as.addi(1, 1, 4);
        as.addi(2, 2, 4);
        as.addi(3, 3, -1);
        as.bnz(3, top);
        as.halt();
        kc.expectedInstructions = 9ull * l.n + 1;
        break;
      }
      case LayerOp::Scale:
      case LayerOp::Relu:
      {
        kc.params = {inVa, outVa, l.n, l.op == LayerOp::Scale ? uint32_t(l.scale) : 0u};
        size_t top = as.here();
        as.ld(4, 0);
        if (l.op == LayerOp::Scale)
          as.mul(4, 4, 3);
        else
          as.max(4, 4, 3);
        as.st(1, 4);
        as.addi(0, 0, 4);
        as.addi(1, 1, 4);
        as.addi(2, 2, -1);
        as.bnz(2, top);
        as.halt();
        kc.expectedInstructions = 7ull * l.n + 1;
        break;
      }
      case LayerOp::Copy:
      {
        kc.params = {inVa, outVa, l.n};
        size_t top = as.here();
        as.ld(4, 0);
        as.st(1, 4);
        as.addi(0, 0, 4);
        as.addi(1, 1, 4);
        as.addi(2, 2, -1);
        as.bnz(2, top);
        as.halt();
        kc.expectedInstructions = 6ull * l.n + 1;
        break;
      }
      case LayerOp::Matmul:
      {
        uint32_t bVa = inVa + 4 * l.m * l.k;
        for (uint32_t i = 0; i < l.m; ++i)
          for (uint32_t j = 0; j < l.n; ++j)
          {
            as.ldi(0, inVa + 4 * i * l.k);
            as.ldi(1, bVa + 4 * j);
            as.ldi(3, l.k);
            as.sub(4, 4, 4);
            size_t top = as.here();
            as.ld(2, 0);
            as.ld(5, 1);
            as.mul(2, 2, 5);
            as.add(4, 4, 2);
            as.addi(0, 0, 4);
            as.addi(1, 1, int32_t(4 * l.n));
            as.addi(3, 3, -1);
            as.bnz(3, top);
            as.ldi(6, outVa + 4 * (i * l.n + j));
            as.st(6, 4);
          }
        as.halt();
        kc.expectedInstructions = uint64_t(l.m) * l.n * (6 + 8ull * l.k) + 1;
        break;
      }
    }
    kc.code = as.code();
    return kc;
  }

  // ---------------------------------------------------------------------
  // Driver

  Driver::Driver(Device& dev, DriverProbe* probe, DriverTiming timing)
      : dev_(dev), probe_(probe), timing_(timing), sku_(dev.sku()), map_(defaultRegisterMap())
  {
  }

  void Driver::sleep(uint64_t ns)
  {
    if (ns)
      dev_.tick(ns);
  }

  void Driver::osJitter()
  {
    if (delays_.osJitterNs)
      sleep(std::uniform_int_distribution<uint64_t>(0, delays_.osJitterNs)(rng_));
  }

  uint32_t Driver::readReg(std::string_view name, std::optional<PollSite> poll)
  {
    const RegisterEntry& e = map_.at(name);
    if (!poll)
      osJitter();
    uint64_t t = dev_.now();
    auto v = dev_.regRead(e.offset);
    if (!v)
      throw DriverError("bus error reading " + e.name);
    if (probe_)
      probe_->onRegRead(e, *v, t, poll);
    sleep(timing_.regAccessNs);
    return *v;
  }

  void Driver::writeReg(std::string_view name, uint32_t value)
  {
    const RegisterEntry& e = map_.at(name);
    osJitter();
    uint64_t t = dev_.now();
    if (probe_)
      probe_->onRegWrite(e, value, t);
    if (!dev_.regWrite(e.offset, value))
      throw DriverError("bus error writing " + e.name);
    sleep(timing_.regAccessNs);
  }

  uint32_t Driver::waitFor(std::string_view name, uint32_t mask, uint32_t expect, uint64_t timeoutNs)
  {
    const RegisterEntry& e = map_.at(name);
    uint64_t start = dev_.now();
    uint32_t polls = 0;
    for (;;)
    {
      uint32_t v = readReg(name, PollSite{mask});
      ++polls;
      if ((v & mask) == expect)
      {
        if (probe_)
          probe_->onPollEnd(e, mask, v & mask, polls);
        return v;
      }
      if (dev_.now() - start > timeoutNs)
        throw DriverError("timeout polling " + e.name);
      sleep(timing_.pollGapNs);
    }
  }

  uint64_t Driver::allocPhys(uint32_t pages)
  {
    uint64_t pa = nextPa_;
    if (!dev_.state().memory.contains(pa, uint64_t(pages) * kPageSize))
      throw DriverError("out of GPU physical memory");
    nextPa_ += uint64_t(pages) * kPageSize;
    for (uint32_t i = 0; i < pages; ++i)
      dev_.physZeroPage(uint32_t((pa >> kPageShift) + i));
    return pa;
  }

  void Driver::probe()
  {
    allocs_.clear();
    busy_.clear();
    nextVa_ = timing_.vaBase;
    nextPa_ = timing_.paBase;
    l2Pa_.assign(1024, 0);
    outstanding_ = false;

    uint64_t t0 = dev_.now();
    writeReg("GPU_CMD", cmd::kSoftReset);
    waitFor("GPU_IRQ_RAWSTAT", irq::kResetDone, irq::kResetDone, timing_.watchdogFloorNs);
    busy_.push_back({t0, dev_.now()});
    writeReg("GPU_IRQ_CLEAR", irq::kResetDone);

    uint32_t id = readReg("GPU_ID");
    auto sku = skuById(id);
    if (!sku)
      throw DriverError("unsupported GPU id " + hex32(id));
    sku_ = *sku;
    writeReg("PWR_CORES_ON", 0xffffffffu);
    writeReg("MMU_CONFIG", sku_.expectedMmuConfig);
    l1Pa_ = allocPhys(pte::kTableBytes / kPageSize);
    writeReg("MMU_TABLE_BASE_LO", uint32_t(l1Pa_));
    writeReg("MMU_TABLE_BASE_HI", uint32_t(l1Pa_ >> 32));
    writeReg("GPU_IRQ_MASK", irq::kJobDone | irq::kMmuFault);
  }

  const Allocation& Driver::allocate(uint32_t size, uint8_t flags, std::string purpose, int layer)
  {
    if ((flags & kGpuExec) && (flags & kInternalScratch))
      throw DriverError("GPU_EXEC allocations cannot be INTERNAL_SCRATCH");
    if (size == 0)
      throw DriverError("zero-sized allocation");
    Allocation a;
    a.size = size;
    a.flags = flags;
    a.purpose = std::move(purpose);
    a.layer = layer;
    uint32_t pages = a.mappedLen() / kPageSize;
    if (nextVa_ + a.mappedLen() > 0xffff'f000ull)
      throw DriverError("out of GPU virtual address space");
    a.va = uint32_t(nextVa_);
    nextVa_ += a.mappedLen() + kPageSize;
    a.pa = allocPhys(pages);
    allocs_.push_back(std::move(a));
    return allocs_.back();
  }

  const Allocation* Driver::findAllocation(uint32_t va) const
  {
    for (const auto& a : allocs_)
      if (!a.freed && a.covers(va, 1))
        return &a;
    return nullptr;
  }

  void Driver::writeLeafPtes(const Allocation& a, bool present)
  {
    PermSet perms = (a.flags & kGpuExec) ? (Perm::Valid | Perm::Read | Perm::Exec)
                                         : (Perm::Valid | Perm::Read | Perm::Write);
    uint8_t bits = encodePerms(sku_.permLayout, perms);
    for (uint32_t off = 0; off < a.mappedLen(); off += kPageSize)
    {
      uint32_t va = a.va + off;
      uint32_t l1 = pte::l1Index(va);
      if (!l2Pa_[l1])
      {
        l2Pa_[l1] = allocPhys(pte::kTableBytes / kPageSize);
        uint8_t v = encodePerms(sku_.permLayout, PermSet{uint8_t(Perm::Valid)});
        uint8_t b[8];
        uint64_t e = pte::make(l2Pa_[l1], v);
        storeLe32(b, uint32_t(e));
        storeLe32(b + 4, uint32_t(e >> 32));
        dev_.physWrite(l1Pa_ + uint64_t(l1) * 8, b);
      }
      uint64_t e = present ? pte::make(a.pa + off, bits) : 0;
      uint8_t b[8];
      storeLe32(b, uint32_t(e));
      storeLe32(b + 4, uint32_t(e >> 32));
      dev_.physWrite(l2Pa_[l1] + uint64_t(pte::l2Index(va)) * 8, b);
    }
  }

  void Driver::commitPending()
  {
    bool any = false;
    for (auto& a : allocs_)
    {
      if (a.committed || a.freed)
        continue;
      writeLeafPtes(a, true);
      a.committed = true;
      any = true;
      if (probe_)
      {
        PermSet perms = (a.flags & kGpuExec) ? (Perm::Valid | Perm::Read | Perm::Exec)
                                             : (Perm::Valid | Perm::Read | Perm::Write);
        probe_->onMap(a, encodePerms(sku_.permLayout, perms), dev_.now());
      }
    }
    if (any)
      writeReg("GPU_CMD", cmd::kTlbInvalidate);
  }

  void Driver::free(uint32_t va)
  {
    for (auto& a : allocs_)
    {
      if (a.freed || a.va != va)
        continue;
      a.freed = true;
      if (!a.committed)
        return;
      writeLeafPtes(a, false);
      if (probe_)
        probe_->onUnmap(a, dev_.now());
      writeReg("GPU_CMD", cmd::kTlbInvalidate);
      return;
    }
    throw DriverError("free of unknown allocation " + hex32(va));
  }

  void Driver::cpuWrite(uint32_t va, std::span<const uint8_t> bytes)
  {
    const Allocation* a = findAllocation(va);
    if (!a || !a->covers(va, uint32_t(bytes.size())))
      throw DriverError("CPU write outside allocation at " + hex32(va));
    dev_.physWrite(a->pa + (va - a->va), bytes);
  }

  Bytes Driver::cpuRead(uint32_t va, uint32_t len) const
  {
    const Allocation* a = findAllocation(va);
    if (!a || !a->covers(va, len))
      throw DriverError("CPU read outside allocation at " + hex32(va));
    Bytes out(len);
    dev_.physRead(a->pa + (va - a->va), out);
    return out;
  }

  void Driver::submit(uint32_t chainVa, uint64_t expectedCostNs, size_t layer)
  {
    if (outstanding_)
      throw DriverError("job already outstanding");
    commitPending();

    uint32_t st = readReg("GPU_STATUS");
    if (st != status::kCoresPowered)
      throw DriverError("GPU not ready for submission, status " + hex32(st));
    writeReg("JOB_HEAD_LO", chainVa);
    writeReg("JOB_HEAD_HI", 0);
    writeReg("JOB_AFFINITY", sku_.fullCoreMask());
    if (probe_)
      probe_->beforeKick(*this, dev_.now());

    uint64_t kick = dev_.now();
    writeReg("JOB_START", 1);
    outstanding_ = true;
    uint64_t deadline = kick + std::max<uint64_t>(timing_.watchdogFactor * expectedCostNs, timing_.watchdogFloorNs);
    for (;;)
    {
      if (dev_.irqLine())
        break;
      auto next = dev_.nextEventNs();
      if (!next || *next > deadline)
      {
        outstanding_ = false;
        throw DriverError("job watchdog expired in layer " + std::to_string(layer));
      }
      dev_.tick(*next - dev_.now());
    }
    uint64_t arrival = dev_.now();
    busy_.push_back({kick, arrival});
    if (probe_)
      probe_->onIrq(dev_.irqLine(), arrival);
    sleep(timing_.irqEntryNs);

    uint32_t raw = readReg("GPU_IRQ_RAWSTAT");
    writeReg("GPU_IRQ_CLEAR", raw);
    outstanding_ = false;
    if (raw & irq::kMmuFault)
    {
      uint32_t va = readReg("MMU_FAULT_ADDR");
      throw WorkloadError(layer, "GPU MMU fault at " + hex32(va));
    }
    uint32_t js = readReg("JOB_STATUS");
    if (js != job_status::kDone)
      throw WorkloadError(layer, "job finished with status " + std::to_string(js));
    (void)readReg("JOB_PROGRESS");

    uint64_t f0 = dev_.now();
    writeReg("GPU_CMD", cmd::kCacheFlush);
    waitFor("GPU_STATUS", status::kFlushActive, 0, timing_.watchdogFloorNs);
    busy_.push_back({f0, dev_.now()});
  }

  // ---------------------------------------------------------------------
  // Runtime

  Runtime::Runtime(Device& dev, DriverProbe* probe, StackDelays delays, uint64_t stackSeed)
      : drv_(dev, probe), delays_(delays)
  {
    drv_.setDelays(delays);
    drv_.seedStack(stackSeed);
  }

  uint32_t Runtime::emitJob(const Layer& layer, size_t index, uint32_t inVa, uint32_t outVa, uint64_t& expectedNs)
  {
    drv_.sleep(delays_.jitNs + 1000);
    CompiledKernel kc = compileLayer(layer, inVa, outVa);
    uint32_t codeBytes = uint32_t(kc.code.size() * 4);
    const Allocation& exec = drv_.allocate(kShaderOffset + codeBytes, kGpuExec, "job", int(index));
    uint32_t va = exec.va;
    JobDescriptor d;
    d.shaderVa = va + kShaderOffset;
    d.shaderLen = codeBytes;
    d.params = kc.params;
    auto db = d.toBytes();
    drv_.cpuWrite(va, db);
    drv_.cpuWrite(va + kShaderOffset, packI32({reinterpret_cast<const int32_t*>(kc.code.data()), kc.code.size()}));
    const DeviceTiming& t = drv_.device().timing();
    expectedNs = t.jobBaseNs + t.nsPerInstruction * kc.expectedInstructions;
    return va;
  }

  Bytes Runtime::run(const WorkloadGraph& graph, std::span<const uint8_t> input)
  {
    graph.validate();
    if (input.size() != graph.inputBytes())
      throw Error("workload input is " + std::to_string(input.size()) + " bytes, expected " +
                  std::to_string(graph.inputBytes()));
    drv_.probe();
    const bool multi = graph.layers.size() > 1;
    uint32_t inVa = 0;
    for (size_t i = 0; i < graph.layers.size(); ++i)
    {
      const Layer& l = graph.layers[i];
      drv_.sleep(delays_.mgmtNs + 500);
      if (i == 0)
      {
        inVa = drv_.allocate(l.inputElems() * 4, kCpuVisible, "input", int(i)).va;
        drv_.cpuWrite(inVa, input);
      }
      bool final = !multi;
      uint32_t outVa = drv_.allocate(l.outputElems() * 4, final ? kCpuVisible : kInternalScratch,
                                     final ? "output" : "intermediate", int(i)).va;
      uint32_t scratchVa = drv_.allocate(kScratchBytes, kInternalScratch, "scratch", int(i)).va;
      {
        Bytes s(kScratchBytes, 0);
        for (uint32_t w = 0; w < kScratchBytes / 4; w += 64)
          storeLe32(s.data() + 4 * w, 0x5a000000u | uint32_t(i) << 16 | w);
        drv_.cpuWrite(scratchVa, s);
      }
      uint64_t expected = 0;
      uint32_t job = emitJob(l, i, inVa, outVa, expected);
      drv_.osJitter();
      drv_.submit(job, expected, i);
      drv_.free(scratchVa);
      if (i > 0)
        drv_.free(inVa);
      inVa = outVa;
    }
    uint32_t resultVa = inVa;
    if (multi)
    {
      uint32_t n = graph.layers.back().outputElems();
      drv_.sleep(delays_.mgmtNs + 500);
      resultVa = drv_.allocate(n * 4, kCpuVisible, "output", int(graph.layers.size())).va;
      uint64_t expected = 0;
      uint32_t job = emitJob(Layer{LayerOp::Copy, n}, graph.layers.size(), inVa, resultVa, expected);
      drv_.osJitter();
      drv_.submit(job, expected, graph.layers.size());
      drv_.free(inVa);
    }
    return drv_.cpuRead(resultVa, uint32_t(graph.outputBytes()));
  }

}
