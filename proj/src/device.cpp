#include "gpr/device.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "gpr/shader.hpp"

namespace gpr
{

  std::array<uint8_t, JobDescriptor::kBytes> JobDescriptor::toBytes() const
  {
    std::array<uint8_t, kBytes> out{};
    uint32_t words[12] = {nextVa, shaderVa, shaderLen};
    std::copy(params.begin(), params.end(), words + 3);
    words[11] = affinity;
    for (int i = 0; i < 12; ++i)
      storeLe32(out.data() + 4 * i, words[i]);
    return out;
  }

  JobDescriptor JobDescriptor::fromWords(std::span<const uint32_t, 12> w)
  {
    JobDescriptor d;
    d.nextVa = w[0];
    d.shaderVa = w[1];
    d.shaderLen = w[2];
    std::copy(w.begin() + 3, w.begin() + 11, d.params.begin());
    d.affinity = w[11];
    return d;
  }

  // ---------------------------------------------------------------------
  // PhysicalMemory

  PhysicalMemory::Page& PhysicalMemory::writable(uint32_t ppn)
  {
    auto& p = pages_.at(ppn);
    if (!p)
      p = std::make_shared<Page>(Page{});
    else if (p.use_count() > 1)
      p = std::make_shared<Page>(*p);
    return *p;
  }

  void PhysicalMemory::read(uint64_t pa, std::span<uint8_t> out) const
  {
    if (!contains(pa, out.size()))
      throw Error("physical read out of range at " + hex32(uint32_t(pa)));
    size_t done = 0;
    while (done < out.size())
    {
      uint64_t a = pa + done;
      uint32_t ppn = uint32_t(a >> kPageShift);
      size_t off = a & (kPageSize - 1);
      size_t n = std::min(out.size() - done, size_t(kPageSize) - off);
      if (const auto& p = pages_[ppn])
        std::memcpy(out.data() + done, p->data() + off, n);
      else
        std::memset(out.data() + done, 0, n);
      done += n;
    }
  }

  void PhysicalMemory::write(uint64_t pa, std::span<const uint8_t> in)
  {
    if (!contains(pa, in.size()))
      throw Error("physical write out of range at " + hex32(uint32_t(pa)));
    size_t done = 0;
    while (done < in.size())
    {
      uint64_t a = pa + done;
      uint32_t ppn = uint32_t(a >> kPageShift);
      size_t off = a & (kPageSize - 1);
      size_t n = std::min(in.size() - done, size_t(kPageSize) - off);
      std::memcpy(writable(ppn).data() + off, in.data() + done, n);
      done += n;
    }
  }

  uint32_t PhysicalMemory::read32(uint64_t pa) const
  {
    uint8_t b[4];
    read(pa, b);
    return loadLe32(b);
  }

  void PhysicalMemory::write32(uint64_t pa, uint32_t v)
  {
    uint8_t b[4];
    storeLe32(b, v);
    write(pa, b);
  }

  uint64_t PhysicalMemory::read64(uint64_t pa) const
  {
    return uint64_t(read32(pa)) | uint64_t(read32(pa + 4)) << 32;
  }

  void PhysicalMemory::write64(uint64_t pa, uint64_t v)
  {
    write32(pa, uint32_t(v));
    write32(pa + 4, uint32_t(v >> 32));
  }

  size_t PhysicalMemory::residentPages() const
  {
    return size_t(std::count_if(pages_.begin(), pages_.end(), [](const auto& p) { return p != nullptr; }));
  }

  bool PhysicalMemory::operator==(const PhysicalMemory& o) const
  {
    static const Page zero{};
    for (size_t i = 0; i < pages_.size(); ++i)
    {
      const auto& a = pages_[i];
      const auto& b = o.pages_[i];
      if (a == b)
        continue;
      if (*(a ? a.get() : &zero) != *(b ? b.get() : &zero))
        return false;
    }
    return true;
  }

  // ---------------------------------------------------------------------
  // DeviceState

  bool DeviceState::controlEquals(const DeviceState& o) const
  {
    return irqRawstat == o.irqRawstat && irqMask == o.irqMask && mmuBase == o.mmuBase &&
           mmuConfig == o.mmuConfig && jobHeadLo == o.jobHeadLo && jobHeadHi == o.jobHeadHi &&
           jobAffinity == o.jobAffinity && jobStatus == o.jobStatus && faultAddr == o.faultAddr &&
           coresRequested == o.coresRequested && coresOn == o.coresOn && phase == o.phase &&
           jobStalled == o.jobStalled && flushActive == o.flushActive && resetPending == o.resetPending &&
           dirty == o.dirty && cacheWriteback == o.cacheWriteback && walkCache == o.walkCache &&
           pageTableLive == o.pageTableLive && clockDiv == o.clockDiv;
  }

  // ---------------------------------------------------------------------
  // Device

  Device::Device(const SkuProfile& sku, uint64_t envSeed, DeviceTiming timing)
      : sku_(sku), timing_(timing)
  {
    sku_.validate();
    s_.envRng.seed(envSeed);
  }

  double Device::drawJitter()
  {
    double u = double(s_.envRng() >> 11) * 0x1.0p-53;
    return timing_.jitterLo + (timing_.jitterHi - timing_.jitterLo) * u;
  }

  uint64_t Device::scaled(double ns)
  {
    return uint64_t(std::llround(ns * double(s_.clockDiv) * drawJitter()));
  }

  uint32_t Device::readStatus() const
  {
    uint32_t v = 0;
    if (s_.phase == JobPhase::Running)
      v |= status::kJobActive;
    if (s_.flushActive)
      v |= status::kFlushActive;
    if (s_.resetPending)
      v |= status::kResetPending;
    if (s_.coresRequested != 0 && s_.coresOn == (s_.coresRequested & sku_.fullCoreMask()))
      v |= status::kCoresPowered;
    return v;
  }

  std::optional<uint32_t> Device::regRead(uint32_t offset)
  {
    const RegisterEntry* e = defaultRegisterMap().byOffset(offset);
    if (!e || !e->readable())
      return std::nullopt;
    switch (offset)
    {
      case reg::GPU_ID: return sku_.gpuIdValue;
      case reg::GPU_STATUS: return readStatus();
      case reg::GPU_IRQ_RAWSTAT: return s_.irqRawstat;
      case reg::GPU_IRQ_MASK: return s_.irqMask;
      case reg::MMU_TABLE_BASE_LO: return uint32_t(s_.mmuBase);
      case reg::MMU_TABLE_BASE_HI: return uint32_t(s_.mmuBase >> 32);
      case reg::MMU_CONFIG: return s_.mmuConfig;
      case reg::JOB_HEAD_LO: return s_.jobHeadLo;
      case reg::JOB_HEAD_HI: return s_.jobHeadHi;
      case reg::JOB_STATUS: return s_.jobStatus;
      case reg::JOB_AFFINITY: return s_.jobAffinity;
      case reg::JOB_PROGRESS: return uint32_t(s_.envRng() & 0xffff);
      case reg::CLOCK_DIV: return s_.clockDiv;
      case reg::PWR_CORES_ON: return s_.coresOn;
      case reg::MMU_FAULT_ADDR: return s_.faultAddr;
      default: return std::nullopt;
    }
  }

  bool Device::regWrite(uint32_t offset, uint32_t value)
  {
    const RegisterEntry* e = defaultRegisterMap().byOffset(offset);
    if (!e || !e->writable())
      return false;
    switch (offset)
    {
      case reg::GPU_IRQ_CLEAR:
        s_.irqRawstat &= ~value;
        break;
      case reg::GPU_IRQ_MASK:
        s_.irqMask = value & irq::kAll;
        break;
      case reg::GPU_CMD:
        if (value == cmd::kSoftReset)
          softReset();
        else if (value == cmd::kCacheFlush)
          startFlush();
        else if (value == cmd::kTlbInvalidate)
          s_.walkCache.clear();
        break;
      case reg::MMU_TABLE_BASE_LO:
        s_.mmuBase = (s_.mmuBase & ~0xffffffffull) | value;
        s_.walkCache.clear();
        s_.pageTableLive = s_.mmuBase != 0;
        break;
      case reg::MMU_TABLE_BASE_HI:
        s_.mmuBase = (s_.mmuBase & 0xffffffffull) | uint64_t(value & 0xff) << 32;
        s_.walkCache.clear();
        s_.pageTableLive = s_.mmuBase != 0;
        break;
      case reg::MMU_CONFIG:
        s_.mmuConfig = value;
        s_.walkCache.clear();
        break;
      case reg::JOB_HEAD_LO: s_.jobHeadLo = value; break;
      case reg::JOB_HEAD_HI: s_.jobHeadHi = value; break;
      case reg::JOB_AFFINITY: s_.jobAffinity = value; break;
      case reg::JOB_START:
        if (value & 1)
          startJob();
        break;
      case reg::PWR_CORES_ON:
        s_.coresRequested = value;
        s_.coresOn = value & sku_.fullCoreMask();
        if (s_.phase == JobPhase::Running && s_.jobStalled && effectiveCores() != 0)
        {
          s_.jobStalled = false;
          s_.jobFinishNs = std::max(s_.jobFinishNs, s_.vclockNs);
        }
        break;
      default:
        break;
    }
    return true;
  }

  void Device::softReset()
  {
    DeviceState fresh;
    fresh.clockDiv = s_.clockDiv;
    fresh.vclockNs = s_.vclockNs;
    fresh.envRng = s_.envRng;
    fresh.memory = std::move(s_.memory);
    s_ = std::move(fresh);
    s_.resetPending = true;
    s_.resetFinishNs = s_.vclockNs + scaled(double(timing_.resetNs));
  }

  void Device::startFlush()
  {
    for (const auto& [pa, v] : s_.dirty)
      s_.cacheWriteback[pa] = v;
    s_.dirty.clear();
    uint64_t finish = s_.vclockNs +
                      scaled(double(timing_.flushBaseNs) + timing_.flushNsPerWord * double(s_.cacheWriteback.size()));
    s_.flushFinishNs = s_.flushActive ? std::max(s_.flushFinishNs, finish) : finish;
    s_.flushActive = true;
  }

  void Device::finishFlush()
  {
    for (const auto& [pa, v] : s_.cacheWriteback)
      s_.memory.write32(pa, v);
    s_.cacheWriteback.clear();
    s_.flushActive = false;
  }

  uint32_t Device::effectiveCores() const
  {
    return s_.jobAffinity & s_.coresOn;
  }

  void Device::startJob()
  {
    if (s_.phase == JobPhase::Running || s_.resetPending)
    {
      s_.phase = JobPhase::Fault;
      s_.jobStalled = false;
      s_.jobStatus = job_status::kBadState;
      raise(irq::kJobDone);
      return;
    }
    std::map<uint64_t, uint32_t> overlay;
    ChainResult dry = runChain(s_.jobHeadLo, &overlay);
    double cost = double(timing_.jobBaseNs) + double(timing_.nsPerInstruction) * double(dry.instructions);
    s_.phase = JobPhase::Running;
    s_.jobStatus = job_status::kRunning;
    s_.jobStalled = false;
    s_.jobFinishNs = s_.vclockNs + scaled(cost);
  }

  void Device::finishJob()
  {
    if (effectiveCores() == 0)
    {
      s_.jobStalled = true;
      return;
    }
    ChainResult r = runChain(s_.jobHeadLo, nullptr);
    if (s_.phase != JobPhase::Running)
      return;
    if (r.outcome == ChainResult::Ok)
    {
      s_.phase = JobPhase::Done;
      s_.jobStatus = job_status::kDone;
      raise(irq::kJobDone);
    }
    else if (r.outcome == ChainResult::ShaderFault)
    {
      s_.phase = JobPhase::Fault;
      s_.jobStatus = job_status::kShaderFault;
      raise(irq::kJobDone);
    }
  }

  void Device::mmuFault(uint32_t va)
  {
    raise(irq::kMmuFault);
    s_.faultAddr = va;
    if (s_.phase == JobPhase::Running)
    {
      s_.phase = JobPhase::Fault;
      s_.jobStatus = job_status::kMmuFault;
    }
  }

  bool Device::permitted(uint64_t pte, Access access) const
  {
    PermSet p = decodePerms(sku_.permLayout, uint8_t(pte & 0xf));
    if (!p.has(Perm::Valid))
      return false;
    switch (access)
    {
      case Access::Read: return p.has(Perm::Read);
      case Access::Write: return p.has(Perm::Write);
      case Access::Exec: return p.has(Perm::Exec);
    }
    return false;
  }

  std::optional<uint64_t> Device::walk(uint32_t va, Access access, uint64_t* leaf) const
  {
    if (s_.mmuBase == 0 || s_.mmuConfig != sku_.expectedMmuConfig)
      return std::nullopt;
    uint64_t l1Addr = s_.mmuBase + uint64_t(pte::l1Index(va)) * 8;
    if (!s_.memory.contains(l1Addr, 8))
      return std::nullopt;
    uint64_t l1 = s_.memory.read64(l1Addr);
    if (!decodePerms(sku_.permLayout, uint8_t(l1 & 0xf)).has(Perm::Valid))
      return std::nullopt;
    uint64_t l2Addr = (l1 & pte::kAddrMask) + uint64_t(pte::l2Index(va)) * 8;
    if (!s_.memory.contains(l2Addr, 8))
      return std::nullopt;
    uint64_t e = s_.memory.read64(l2Addr);
    if (leaf)
      *leaf = e;
    if (!permitted(e, access))
      return std::nullopt;
    uint64_t pa = (e & pte::kAddrMask) | (va & (kPageSize - 1));
    if (!s_.memory.contains(pa, 4))
      return std::nullopt;
    return pa;
  }

  std::optional<uint64_t> Device::probeTranslate(uint32_t va, Access access) const
  {
    return walk(va, access, nullptr);
  }

  std::optional<uint64_t> Device::translate(uint32_t va, Access access)
  {
    uint32_t vpn = va >> kPageShift;
    if (auto it = s_.walkCache.find(vpn); it != s_.walkCache.end())
    {
      uint64_t pa = (it->second & pte::kAddrMask) | (va & (kPageSize - 1));
      if (permitted(it->second, access) && s_.memory.contains(pa, 4))
        return pa;
      mmuFault(va);
      return std::nullopt;
    }
    uint64_t leaf = 0;
    auto pa = walk(va, access, &leaf);
    if (!pa)
    {
      mmuFault(va);
      return std::nullopt;
    }
    s_.walkCache[vpn] = leaf;
    return pa;
  }

  std::optional<uint32_t> Device::gpuLoad(uint32_t va, Access access, std::map<uint64_t, uint32_t>* overlay)
  {
    auto pa = overlay ? probeTranslate(va, access) : translate(va, access);
    if (!pa)
      return std::nullopt;
    if (overlay)
      if (auto it = overlay->find(*pa); it != overlay->end())
        return it->second;
    if (auto it = s_.dirty.find(*pa); it != s_.dirty.end())
      return it->second;
    if (auto it = s_.cacheWriteback.find(*pa); it != s_.cacheWriteback.end())
      return it->second;
    return s_.memory.read32(*pa);
  }

  bool Device::gpuStore(uint32_t va, uint32_t value, std::map<uint64_t, uint32_t>* overlay)
  {
    auto pa = overlay ? probeTranslate(va, Access::Write) : translate(va, Access::Write);
    if (!pa)
      return false;
    (overlay ? *overlay : s_.dirty)[*pa] = value;
    return true;
  }

  Device::ChainResult Device::runChain(uint32_t headVa, std::map<uint64_t, uint32_t>* overlay)
  {
    ChainResult r;
    auto fail = [&](ChainResult::Outcome o) {
      r.outcome = o;
      return r;
    };
    uint32_t va = headVa;
    for (uint32_t n = 0; va != 0; ++n)
    {
      if (n >= JobDescriptor::kMaxChain || (va & 3))
        return fail(ChainResult::ShaderFault);
      uint32_t words[12];
      for (uint32_t i = 0; i < 12; ++i)
      {
        auto w = gpuLoad(va + 4 * i, Access::Read, overlay);
        if (!w)
          return fail(ChainResult::MmuFault);
        words[i] = *w;
      }
      JobDescriptor d = JobDescriptor::fromWords(std::span<const uint32_t, 12>(words));
      if ((d.shaderVa & 3) || (d.shaderLen & 3) || d.shaderLen == 0 || d.shaderLen > isa::kMaxShaderBytes)
        return fail(ChainResult::ShaderFault);
      std::vector<uint32_t> code(d.shaderLen / 4);
      for (size_t i = 0; i < code.size(); ++i)
      {
        auto w = gpuLoad(d.shaderVa + uint32_t(4 * i), Access::Exec, overlay);
        if (!w)
          return fail(ChainResult::MmuFault);
        code[i] = *w;
      }

      uint32_t regs[isa::kRegisterCount];
      std::copy(d.params.begin(), d.params.end(), regs);
      size_t pc = 0;
      bool halted = false;
      for (uint64_t steps = 0; steps < isa::kStepBudget; ++steps)
      {
        auto ins = isa::decode(code, pc);
        if (!ins)
          return fail(ChainResult::ShaderFault);
        ++r.instructions;
        size_t next = pc + ins->words;
        switch (ins->op)
        {
          case isa::Op::Halt: halted = true; break;
          case isa::Op::Ldi: regs[ins->rd] = uint32_t(ins->imm); break;
          case isa::Op::Ld:
          {
            if (regs[ins->ra] & 3)
              return fail(ChainResult::ShaderFault);
            auto v = gpuLoad(regs[ins->ra], Access::Read, overlay);
            if (!v)
              return fail(ChainResult::MmuFault);
            regs[ins->rd] = *v;
            break;
          }
          case isa::Op::St:
            if (regs[ins->ra] & 3)
              return fail(ChainResult::ShaderFault);
            if (!gpuStore(regs[ins->ra], regs[ins->rb], overlay))
              return fail(ChainResult::MmuFault);
            break;
          case isa::Op::Add: regs[ins->rd] = regs[ins->ra] + regs[ins->rb]; break;
          case isa::Op::Sub: regs[ins->rd] = regs[ins->ra] - regs[ins->rb]; break;
          case isa::Op::Mul: regs[ins->rd] = regs[ins->ra] * regs[ins->rb]; break;
          case isa::Op::Max:
            regs[ins->rd] = uint32_t(std::max(int32_t(regs[ins->ra]), int32_t(regs[ins->rb])));
            break;
          case isa::Op::Addi: regs[ins->rd] = regs[ins->ra] + uint32_t(ins->imm); break;
          case isa::Op::Bnz:
            if (regs[ins->ra] != 0)
              next = size_t(int64_t(pc) + 1 + ins->imm);
            break;
        }
        if (halted)
          break;
        pc = next;
      }
      if (!halted)
        return fail(ChainResult::ShaderFault);
      va = d.nextVa;
    }
    return r;
  }

  std::optional<uint64_t> Device::nextEventNs() const
  {
    std::optional<uint64_t> t;
    auto consider = [&](bool pending, uint64_t at) {
      if (pending && (!t || at < *t))
        t = at;
    };
    consider(s_.resetPending, s_.resetFinishNs);
    consider(s_.flushActive, s_.flushFinishNs);
    consider(s_.phase == JobPhase::Running && !s_.jobStalled, s_.jobFinishNs);
    return t;
  }

  std::vector<InterruptEvent> Device::tick(uint64_t dtNs)
  {
    std::vector<InterruptEvent> out;
    uint64_t target = s_.vclockNs + dtNs;
    for (;;)
    {
      auto t = nextEventNs();
      if (!t || *t > target)
        break;
      s_.vclockNs = std::max(s_.vclockNs, *t);
      if (s_.resetPending && s_.resetFinishNs == *t)
      {
        s_.resetPending = false;
        raise(irq::kResetDone);
      }
      else if (s_.flushActive && s_.flushFinishNs == *t)
        finishFlush();
      else
      {
        finishJob();
        if (s_.jobStalled)
          continue;
      }
      events_.push_back(s_.vclockNs);
      if (s_.irqRawstat & s_.irqMask)
        out.push_back({s_.vclockNs, s_.irqRawstat});
    }
    s_.vclockNs = target;
    return out;
  }

  uint32_t Device::irqLine() const
  {
    return (s_.irqRawstat & s_.irqMask) ? s_.irqRawstat : 0;
  }

  DeviceSnapshot Device::snapshot() const
  {
    return {sku_.skuId, s_};
  }

  void Device::restore(const DeviceSnapshot& snap)
  {
    if (snap.skuId != sku_.skuId)
      throw Error("snapshot from SKU " + hex32(snap.skuId) + " cannot be restored onto " + hex32(sku_.skuId));
    s_ = snap.state;
  }

  void Device::restoreRebased(const DeviceSnapshot& snap)
  {
    uint64_t now = s_.vclockNs;
    restore(snap);
    if (now <= s_.vclockNs)
      return;
    uint64_t delta = now - s_.vclockNs;
    s_.vclockNs = now;
    s_.jobFinishNs += delta;
    s_.flushFinishNs += delta;
    s_.resetFinishNs += delta;
  }

  void Device::injectFault(const Fault& fault)
  {
    if (auto* f = std::get_if<OfflineCores>(&fault))
      s_.coresOn &= ~f->mask;
    else if (auto* c = std::get_if<CorruptPte>(&fault))
    {
      if (s_.mmuBase == 0)
        return;
      uint64_t l1Addr = s_.mmuBase + uint64_t(pte::l1Index(c->gpuVa)) * 8;
      if (!s_.memory.contains(l1Addr, 8))
        return;
      uint64_t l1 = s_.memory.read64(l1Addr);
      if (!decodePerms(sku_.permLayout, uint8_t(l1 & 0xf)).has(Perm::Valid))
        return;
      uint64_t l2Addr = (l1 & pte::kAddrMask) + uint64_t(pte::l2Index(c->gpuVa)) * 8;
      if (!s_.memory.contains(l2Addr, 8))
        return;
      uint64_t validBit = encodePerms(sku_.permLayout, PermSet{uint8_t(Perm::Valid)});
      s_.memory.write64(l2Addr, s_.memory.read64(l2Addr) ^ validBit);
      s_.walkCache.erase(c->gpuVa >> kPageShift);
    }
    else if (auto* st = std::get_if<Stall>(&fault))
    {
      if (s_.phase == JobPhase::Running)
        s_.jobFinishNs += st->extraNs;
    }
  }

  void Device::physRead(uint64_t pa, std::span<uint8_t> out) const { s_.memory.read(pa, out); }
  void Device::physWrite(uint64_t pa, std::span<const uint8_t> in) { s_.memory.write(pa, in); }
  void Device::physZeroPage(uint32_t ppn) { s_.memory.zeroPage(ppn); }

  void Device::setClockDiv(uint32_t div)
  {
    if (div < 1)
      throw Error("clock divider must be >= 1");
    s_.clockDiv = div;
  }

  bool Device::claim()
  {
    return !owned_.exchange(true);
  }

  void Device::release()
  {
    owned_.store(false);
  }

}
