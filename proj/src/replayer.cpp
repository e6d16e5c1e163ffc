#include "gpr/replayer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gpr/recfmt.hpp"

namespace gpr
{

  std::string_view toString(DivergenceKind k)
  {
    switch (k)
    {
      case DivergenceKind::ValueMismatch: return "VALUE_MISMATCH";
      case DivergenceKind::IrqMismatch: return "IRQ_MISMATCH";
      case DivergenceKind::MmuFault: return "MMU_FAULT";
      case DivergenceKind::Timeout: return "TIMEOUT";
      case DivergenceKind::IllegalAccess: return "ILLEGAL_ACCESS";
    }
    return "?";
  }

  std::string DivergenceReport::toText() const
  {
    std::ostringstream os;
    os << toString(kind) << " at action " << actionIndex;
    switch (kind)
    {
      case DivergenceKind::ValueMismatch:
        os << ": " << reg << " expected " << hex32(expected) << " got " << hex32(got);
        break;
      case DivergenceKind::IrqMismatch:
        os << ": rawstat expected " << hex32(expected) << " got " << hex32(got);
        break;
      case DivergenceKind::MmuFault:
        os << ": GPU fault address " << hex32(va);
        break;
      case DivergenceKind::Timeout:
        os << ": no progress after " << waitedNs << " ns";
        break;
      case DivergenceKind::IllegalAccess:
        os << ": register " << reg << " refused";
        break;
    }
    return os.str();
  }

  std::string FinalReport::toText() const
  {
    std::ostringstream os;
    os << "replay failed: " << divergence.toText() << "\n";
    os << "  origin: " << label << " action " << actionIndex << " (" << action << ")\n";
    for (const auto& [i, what] : related)
      os << "  related: action " << i << " (" << what << ")\n";
    return os.str();
  }

  std::vector<StateEvent> expectedStateEvents(const Recording& rec)
  {
    std::vector<StateEvent> out;
    for (const auto& a : rec.actions)
    {
      if (auto* w = a.as<RegWrite>())
        out.push_back({StateEvent::Write, w->reg, w->value});
      else if (auto* r = a.as<RegRead>(); r && r->cls != StateClass::NondetRead)
        out.push_back({StateEvent::Read, r->reg, r->expect});
      else if (auto* p = a.as<RegReadWait>())
        out.push_back({StateEvent::Poll, p->reg, p->expect});
      else if (auto* q = a.as<WaitIrq>())
        out.push_back({StateEvent::Irq, "", q->expectRawstat});
    }
    return out;
  }

  // ---------------------------------------------------------------------
  // Nano driver

  ReplaySession::ReplaySession(Device& dev, ReplayConfig cfg) : dev_(dev), cfg_(cfg), recSku_(dev.sku())
  {
    if (!dev_.claim())
      throw ReplayError("device is owned by another session");
    try
    {
      nanoReset();
    }
    catch (...)
    {
      dev_.release();
      throw;
    }
  }

  ReplaySession::~ReplaySession()
  {
    try
    {
      cleanup();
    }
    catch (...)
    {
    }
  }

  uint32_t ReplaySession::rd(uint32_t offset)
  {
    auto v = dev_.regRead(offset);
    if (!v)
      throw ReplayError("bus error reading " + hex32(offset));
    dev_.tick(cfg_.regAccessNs);
    return *v;
  }

  void ReplaySession::wr(uint32_t offset, uint32_t value)
  {
    if (!dev_.regWrite(offset, value))
      throw ReplayError("bus error writing " + hex32(offset));
    dev_.tick(cfg_.regAccessNs);
  }

  bool ReplaySession::waitReg(uint32_t offset, uint32_t mask, uint32_t expect, uint64_t timeoutNs)
  {
    uint64_t start = dev_.now();
    for (;;)
    {
      if ((rd(offset) & mask) == expect)
        return true;
      if (dev_.now() - start >= timeoutNs)
        return false;
      dev_.tick(cfg_.pollGapNs);
    }
  }

  void ReplaySession::nanoReset()
  {
    wr(reg::GPU_CMD, cmd::kSoftReset);
    if (!waitReg(reg::GPU_IRQ_RAWSTAT, irq::kResetDone, irq::kResetDone, cfg_.watchdogFloorNs))
      throw ReplayError("GPU did not come out of reset");
    wr(reg::GPU_IRQ_CLEAR, irq::kResetDone);
  }

  uint64_t ReplaySession::allocPages(uint32_t n)
  {
    uint64_t pa = nextPa_;
    if (!dev_.state().memory.contains(pa, uint64_t(n) * kPageSize))
      throw ReplayError("recording does not fit in GPU physical memory");
    nextPa_ += uint64_t(n) * kPageSize;
    for (uint32_t i = 0; i < n; ++i)
    {
      uint32_t ppn = uint32_t(pa >> kPageShift) + i;
      dev_.physZeroPage(ppn);
      pages_.push_back(ppn);
    }
    return pa;
  }

  void ReplaySession::scrubPages()
  {
    for (uint32_t ppn : pages_)
      dev_.physZeroPage(ppn);
  }

  const Recording& ReplaySession::recording() const
  {
    if (!rec_)
      throw ReplayError("no recording loaded");
    return *rec_;
  }

  const ReplaySession::MapSlot* ReplaySession::slotAt(uint32_t va, size_t i) const
  {
    for (const auto& s : slots_)
      if (s.mapIndex < i && i < s.unmapIndex && va >= s.va && uint64_t(va) < uint64_t(s.va) + s.len)
        return &s;
    return nullptr;
  }

  const ReplaySession::MapSlot* ReplaySession::slotAtEnd(uint32_t va) const
  {
    return slotAt(va, rec_ ? rec_->actions.size() : 0);
  }

  std::optional<uint64_t> ReplaySession::physOf(uint32_t va) const
  {
    if (const MapSlot* s = slotAtEnd(va))
      return s->pa + (va - s->va);
    return std::nullopt;
  }

  void ReplaySession::buildTables()
  {
    uint8_t valid = encodePerms(dev_.sku().permLayout, PermSet{uint8_t(Perm::Valid)});
    for (const auto& [l1, pa] : l2Pa_)
    {
      uint64_t e = pte::make(pa, valid);
      uint8_t b[8];
      storeLe32(b, uint32_t(e));
      storeLe32(b + 4, uint32_t(e >> 32));
      dev_.physWrite(l1Pa_ + uint64_t(l1) * 8, b);
    }
  }

  void ReplaySession::writeLeaves(const MapSlot& m, bool present)
  {
    uint8_t bits = encodePerms(dev_.sku().permLayout, decodePerms(recSku_.permLayout, m.perm));
    for (uint32_t off = 0; off < m.len; off += kPageSize)
    {
      uint32_t va = m.va + off;
      uint64_t e = present ? pte::make(m.pa + off, bits) : 0;
      uint8_t b[8];
      storeLe32(b, uint32_t(e));
      storeLe32(b + 4, uint32_t(e >> 32));
      dev_.physWrite(l2Pa_.at(pte::l1Index(va)) + uint64_t(pte::l2Index(va)) * 8, b);
    }
  }

  void ReplaySession::preloadDumps()
  {
    const auto& acts = rec_->actions;
    for (size_t i = 0; i < acts.size(); ++i)
      if (auto* l = acts[i].as<LoadMemDump>())
      {
        const Bytes& raw = rawDumps_.at(l->dumpId);
        const MapSlot* s = slotAt(l->va, i);
        if (!s)
          throw ReplayError("dump " + std::to_string(l->dumpId) + " targets unmapped memory");
        dev_.physWrite(s->pa + (l->va - s->va), raw);
      }
  }

  void ReplaySession::writeInputs()
  {
    auto ins = rec_->inputs();
    for (size_t k = 0; k < ins.size() && k < inputs_.size(); ++k)
    {
      if (inputs_[k].empty())
        continue;
      auto pa = physOf(ins[k].va);
      dev_.physWrite(*pa, inputs_[k]);
    }
  }

  void ReplaySession::reapplyInputs(uint32_t va, uint32_t len)
  {
    auto ins = rec_->inputs();
    for (size_t k = 0; k < ins.size() && k < inputs_.size(); ++k)
    {
      const auto& d = ins[k];
      if (!inputs_[k].empty() && uint64_t(d.va) < uint64_t(va) + len && uint64_t(va) < uint64_t(d.va) + d.len)
        dev_.physWrite(*physOf(d.va), inputs_[k]);
    }
  }

  uint64_t ReplaySession::liveBytes() const
  {
    uint64_t b = (1 + l2Pa_.size()) * uint64_t(pte::kTableBytes);
    for (const auto& s : slots_)
      if (s.mapIndex < cursor_ && cursor_ <= s.unmapIndex)
        b += s.len;
    return b;
  }

  void ReplaySession::load(const Recording& rec)
  {
    if (!cfg_.force)
    {
      VerificationReport v = verify(rec, defaultRegisterMap(), cfg_.memBudgetBytes);
      if (!v.ok)
        throw ReplayError("recording failed verification: " + v.violations.front().rule + " " +
                          v.violations.front().message);
    }
    uint64_t peak = 0;
    try
    {
      peak = peakGpuMem(rec);
    }
    catch (const Error& e)
    {
      throw ReplayError(std::string("cannot size recording: ") + e.what());
    }
    if (peak > cfg_.memBudgetBytes)
      throw ReplayError("recording needs " + std::to_string(peak) + " bytes of GPU memory, budget is " +
                        std::to_string(cfg_.memBudgetBytes));
    if (!cfg_.force)
    {
      if (rec.header.skuId != dev_.sku().skuId)
        throw ReplayError("recording is for SKU " + hex32(rec.header.skuId) + ", device is " + hex32(dev_.sku().skuId) +
                          "; patch it first");
      if (rec.header.registerMapHash != defaultRegisterMap().hash())
        throw ReplayError("recording register map hash does not match this device");
    }
    std::map<uint32_t, Bytes> raws;
    for (const auto& d : rec.dumps)
    {
      try
      {
        raws[d.id] = inflateRaw(d.payload, d.rawLen);
      }
      catch (const FormatError&)
      {
        throw ReplayError("dump " + std::to_string(d.id) + " payload is corrupt");
      }
    }

    scrubPages();
    pages_.clear();
    slots_.clear();
    l2Pa_.clear();
    checkpoints_.clear();
    nextPa_ = cfg_.paBase;
    rec_ = rec;
    rawDumps_ = std::move(raws);
    recSku_ = skuById(rec.header.skuId).value_or(dev_.sku());

    l1Pa_ = allocPages(pte::kTableBytes / kPageSize);
    for (size_t i = 0; i < rec.actions.size(); ++i)
    {
      const auto& a = rec.actions[i];
      if (auto* m = a.as<MapGpuMem>())
      {
        MapSlot s;
        s.mapIndex = i;
        s.va = m->va;
        s.len = uint32_t(pageRoundUp(m->len));
        s.perm = m->perm;
        s.pa = allocPages(s.len / kPageSize);
        for (uint32_t off = 0; off < s.len; off += kPageSize)
        {
          uint32_t l1 = pte::l1Index(s.va + off);
          if (!l2Pa_.count(l1))
            l2Pa_[l1] = allocPages(pte::kTableBytes / kPageSize);
        }
        slots_.push_back(s);
      }
      else if (auto* u = a.as<UnmapGpuMem>())
      {
        for (auto it = slots_.rbegin(); it != slots_.rend(); ++it)
          if (it->va == u->va && it->unmapIndex == SIZE_MAX)
          {
            it->unmapIndex = i;
            break;
          }
      }
    }
    buildTables();
    preloadDumps();
    wr(reg::MMU_TABLE_BASE_LO, uint32_t(l1Pa_));
    wr(reg::MMU_TABLE_BASE_HI, uint32_t(l1Pa_ >> 32));
    ++loadId_;
    cursor_ = 0;
    attempt_ = 0;
    mult_.assign(rec.actions.size(), 1.0);
    events_.clear();
    preempted_ = false;
  }

  void ReplaySession::freshStart()
  {
    scrubPages();
    buildTables();
    preloadDumps();
    writeInputs();
    cursor_ = 0;
    events_.clear();
    jobsCompleted_ = 0;
    checkpoints_.clear();
  }

  void ReplaySession::begin(const std::vector<Bytes>& inputs)
  {
    const Recording& rec = recording();
    auto ins = rec.inputs();
    if (inputs.size() > ins.size())
      throw ReplayError("got " + std::to_string(inputs.size()) + " inputs, recording has " + std::to_string(ins.size()));
    for (size_t k = 0; k < ins.size(); ++k)
    {
      bool given = k < inputs.size() && !inputs[k].empty();
      if (!given && ins[k].mode != IoMode::Both)
        throw ReplayError("input " + std::to_string(k) + " is required");
      if (given && inputs[k].size() != ins[k].len)
        throw ReplayError("input " + std::to_string(k) + " is " + std::to_string(inputs[k].size()) +
                          " bytes, recording expects " + std::to_string(ins[k].len));
    }
    inputs_ = inputs;
    attempt_ = 0;
    jobsStarted_ = 0;
    checkpointsTaken_ = 0;
    mult_.assign(rec.actions.size(), 1.0);
    preempted_ = false;
    nanoReset();
    freshStart();
  }

  uint64_t ReplaySession::watchdogFor(size_t i) const
  {
    return std::max<uint64_t>(cfg_.watchdogFactor * rec_->actions[i].observedIntervalNs, cfg_.watchdogFloorNs);
  }

  StepResult ReplaySession::step()
  {
    const Recording& rec = recording();
    StepResult res;
    if (cursor_ >= rec.actions.size())
    {
      res.done = true;
      return res;
    }
    if (preemptFlag_.load(std::memory_order_acquire))
    {
      preempt();
      res.preempted = true;
      return res;
    }
    const size_t i = cursor_;
    const ReplayAction& a = rec.actions[i];
    const RegisterMap& map = defaultRegisterMap();
    const uint64_t start = dev_.now();
    if (hook_)
      hook_(dev_, i, attempt_, HookPhase::BeforeAction);

    auto diverge = [&](DivergenceKind k) {
      DivergenceReport d;
      d.actionIndex = i;
      d.kind = k;
      return d;
    };
    bool jobCompleted = false;

    if (auto* w = a.as<RegWrite>())
    {
      const RegisterEntry* e = map.byName(w->reg);
      if (!e || !e->writable())
      {
        auto d = diverge(DivergenceKind::IllegalAccess);
        d.reg = w->reg;
        res.divergence = d;
        return res;
      }
      uint32_t v = w->value;
      if (e->relocatable)
        v = e->offset == reg::MMU_TABLE_BASE_HI ? uint32_t(l1Pa_ >> 32) : uint32_t(l1Pa_);
      if (!dev_.regWrite(e->offset, v))
      {
        auto d = diverge(DivergenceKind::IllegalAccess);
        d.reg = w->reg;
        res.divergence = d;
        return res;
      }
      dev_.tick(cfg_.regAccessNs);
      events_.push_back({StateEvent::Write, w->reg, w->value});
      if (e->offset == reg::JOB_START && (v & 1))
        ++jobsStarted_;
    }
    else if (auto* r = a.as<RegRead>())
    {
      const RegisterEntry* e = map.byName(r->reg);
      std::optional<uint32_t> v;
      if (e && e->readable())
        v = dev_.regRead(e->offset);
      if (!v)
      {
        auto d = diverge(DivergenceKind::IllegalAccess);
        d.reg = r->reg;
        res.divergence = d;
        return res;
      }
      dev_.tick(cfg_.regAccessNs);
      if (r->cls != StateClass::NondetRead)
      {
        events_.push_back({StateEvent::Read, r->reg, *v});
        if (*v != r->expect)
        {
          auto d = diverge(DivergenceKind::ValueMismatch);
          d.reg = r->reg;
          d.expected = r->expect;
          d.got = *v;
          res.divergence = d;
          return res;
        }
      }
    }
    else if (auto* p = a.as<RegReadWait>())
    {
      const RegisterEntry* e = map.byName(p->reg);
      if (!e || !e->readable())
      {
        auto d = diverge(DivergenceKind::IllegalAccess);
        d.reg = p->reg;
        res.divergence = d;
        return res;
      }
      uint64_t wd = watchdogFor(i);
      for (;;)
      {
        auto v = dev_.regRead(e->offset);
        if (!v)
        {
          auto d = diverge(DivergenceKind::IllegalAccess);
          d.reg = p->reg;
          res.divergence = d;
          return res;
        }
        dev_.tick(cfg_.regAccessNs);
        if ((*v & p->mask) == p->expect)
        {
          events_.push_back({StateEvent::Poll, p->reg, p->expect});
          break;
        }
        if (dev_.now() - start >= wd)
        {
          auto d = diverge(DivergenceKind::Timeout);
          d.reg = p->reg;
          d.expected = p->expect;
          d.got = *v & p->mask;
          d.waitedNs = dev_.now() - start;
          res.divergence = d;
          return res;
        }
        dev_.tick(cfg_.pollGapNs);
      }
    }
    else if (auto* q = a.as<WaitIrq>())
    {
      uint64_t deadline = start + watchdogFor(i);
      for (;;)
      {
        uint32_t line = dev_.irqLine();
        if (line)
        {
          if (line == q->expectRawstat)
          {
            events_.push_back({StateEvent::Irq, "", line});
            jobCompleted = line & irq::kJobDone;
            break;
          }
          if (line & irq::kMmuFault)
          {
            auto d = diverge(DivergenceKind::MmuFault);
            d.expected = q->expectRawstat;
            d.got = line;
            d.va = rd(reg::MMU_FAULT_ADDR);
            res.divergence = d;
            return res;
          }
          auto d = diverge(DivergenceKind::IrqMismatch);
          d.expected = q->expectRawstat;
          d.got = line;
          res.divergence = d;
          return res;
        }
        if (preemptFlag_.load(std::memory_order_acquire))
        {
          preempt();
          res.preempted = true;
          return res;
        }
        uint64_t now = dev_.now();
        if (now >= deadline)
        {
          auto d = diverge(DivergenceKind::Timeout);
          d.expected = q->expectRawstat;
          d.waitedNs = now - start;
          res.divergence = d;
          return res;
        }
        uint64_t dt = std::min(cfg_.waitQuantumNs, deadline - now);
        if (auto next = dev_.nextEventNs())
          dt = std::min(dt, *next > now ? *next - now : 0);
        dev_.tick(dt);
      }
    }
    else if (a.as<MapGpuMem>())
    {
      for (const auto& s : slots_)
        if (s.mapIndex == i)
          writeLeaves(s, true);
      wr(reg::GPU_CMD, cmd::kTlbInvalidate);
    }
    else if (a.as<UnmapGpuMem>())
    {
      for (const auto& s : slots_)
        if (s.unmapIndex == i)
        {
          writeLeaves(s, false);
          for (uint32_t off = 0; off < s.len; off += kPageSize)
            dev_.physZeroPage(uint32_t((s.pa + off) >> kPageShift));
        }
      wr(reg::GPU_CMD, cmd::kTlbInvalidate);
    }
    else if (auto* l = a.as<LoadMemDump>())
    {
      const Bytes& raw = rawDumps_.at(l->dumpId);
      const MapSlot* s = slotAt(l->va, i);
      if (!s)
        throw ReplayError("dump target unmapped at action " + std::to_string(i));
      dev_.physWrite(s->pa + (l->va - s->va), raw);
      dev_.tick(uint64_t(std::llround(double(raw.size()) * cfg_.dumpNsPerByte)));
      reapplyInputs(l->va, uint32_t(raw.size()));
    }

    if (hook_)
      hook_(dev_, i, attempt_, HookPhase::AfterExecute);

    uint64_t t = cfg_.honorSkips ? a.minIntervalNs : a.observedIntervalNs;
    uint64_t target = uint64_t(std::llround(double(t) * mult_[i]));
    uint64_t elapsed = dev_.now() - start;
    if (elapsed < target)
      dev_.tick(target - elapsed);

    cursor_ = i + 1;
    if (jobCompleted)
    {
      ++jobsCompleted_;
      if (cfg_.checkpointEveryJobs && jobsCompleted_ % cfg_.checkpointEveryJobs == 0)
        checkpoint();
    }
    res.done = cursor_ == rec.actions.size();
    return res;
  }

  std::vector<Bytes> ReplaySession::readOutputs() const
  {
    std::vector<Bytes> out;
    for (const auto& d : recording().outputs())
    {
      Bytes b(d.len);
      auto pa = physOf(d.va);
      if (!pa)
        throw ReplayError("output " + hex32(d.va) + " not mapped at end");
      dev_.physRead(*pa, b);
      out.push_back(std::move(b));
    }
    return out;
  }

  // ---------------------------------------------------------------------
  // Checkpoints and preemption

  Checkpoint ReplaySession::checkpoint()
  {
    recording();
    Checkpoint cp;
    cp.loadId = loadId_;
    cp.actionIndex = cursor_;
    cp.snapshot = dev_.snapshot();
    cp.eventCount = events_.size();
    cp.jobsCompleted = jobsCompleted_;
    cp.bytesCopied = liveBytes();
    dev_.tick(uint64_t(std::llround(double(cp.bytesCopied) * cfg_.checkpointNsPerByte)));
    checkpoints_.push_back(cp);
    ++checkpointsTaken_;
    return cp;
  }

  void ReplaySession::restore(const Checkpoint& cp)
  {
    if (cp.loadId != loadId_)
      throw ReplayError("checkpoint belongs to a different load");
    dev_.restoreRebased(cp.snapshot);
    dev_.tick(uint64_t(std::llround(double(cp.bytesCopied) * cfg_.checkpointNsPerByte)));
    cursor_ = cp.actionIndex;
    events_.resize(std::min(events_.size(), cp.eventCount));
    jobsCompleted_ = cp.jobsCompleted;
    preempted_ = false;
  }

  const Checkpoint& ReplaySession::latestCheckpoint() const
  {
    if (!cfg_.checkpointEveryJobs)
      throw ReplayError("checkpointing is off");
    if (checkpoints_.empty())
      throw ReplayError("no checkpoint taken yet");
    return checkpoints_.back();
  }

  void ReplaySession::restoreLatest()
  {
    Checkpoint cp = latestCheckpoint();
    restore(cp);
  }

  void ReplaySession::requestPreempt(std::optional<uint64_t> requestedNs)
  {
    preemptAt_.store(requestedNs.value_or(dev_.now()), std::memory_order_relaxed);
    preemptFlag_.store(true, std::memory_order_release);
  }

  PreemptAck ReplaySession::preempt()
  {
    PreemptAck ack;
    ack.requestedNs = preemptFlag_.exchange(false, std::memory_order_acq_rel) ? preemptAt_.load() : dev_.now();
    wr(reg::GPU_CMD, cmd::kCacheFlush);
    if (!waitReg(reg::GPU_STATUS, status::kFlushActive, 0, cfg_.watchdogFloorNs))
      throw ReplayError("cache flush did not finish during handoff");
    wr(reg::GPU_CMD, cmd::kTlbInvalidate);
    wr(reg::GPU_CMD, cmd::kSoftReset);
    if (!waitReg(reg::GPU_IRQ_RAWSTAT, irq::kResetDone, irq::kResetDone, cfg_.watchdogFloorNs))
      throw ReplayError("GPU did not come out of reset during handoff");
    wr(reg::GPU_IRQ_CLEAR, irq::kResetDone);
    ack.resetDoneNs = dev_.now();
    scrubPages();
    preempted_ = true;
    lastAck_ = ack;
    return ack;
  }

  // ---------------------------------------------------------------------
  // Control loop

  void ReplaySession::recover(uint32_t attempt, const DivergenceReport& rep)
  {
    if (attempt >= 2)
    {
      double m = std::ldexp(1.0, int(attempt) - 1);
      size_t lo = rep.actionIndex > cfg_.delayWindow ? rep.actionIndex - cfg_.delayWindow : 0;
      for (size_t j = lo; j < rep.actionIndex; ++j)
        mult_[j] = std::max(mult_[j], m);
    }
    nanoReset();
    if (cfg_.checkpointEveryJobs && !checkpoints_.empty())
      restore(checkpoints_.back());
    else
      freshStart();
  }

  FinalReport ReplaySession::makeFinal(const DivergenceReport& rep) const
  {
    FinalReport f;
    f.divergence = rep;
    f.label = rec_->header.label;
    f.actionIndex = rep.actionIndex;
    f.action = describe(rec_->actions[rep.actionIndex]);
    if (rep.kind == DivergenceKind::MmuFault)
    {
      const auto& acts = rec_->actions;
      if (const MapSlot* s = slotAt(rep.va, rep.actionIndex))
        f.related.emplace_back(s->mapIndex, describe(acts[s->mapIndex]));
      for (size_t j = rep.actionIndex; j-- > 0;)
        if (auto* l = acts[j].as<LoadMemDump>())
        {
          const MemDump* d = rec_->findDump(l->dumpId);
          if (d && rep.va >= l->va && uint64_t(rep.va) < uint64_t(l->va) + d->rawLen)
          {
            f.related.emplace_back(j, describe(acts[j]));
            break;
          }
        }
    }
    return f;
  }

  ReplayResult ReplaySession::runLoop(ReplayResult r)
  {
    uint64_t t0 = dev_.now();
    for (;;)
    {
      StepResult s = step();
      if (s.preempted)
      {
        r.status = ReplayStatus::Preempted;
        r.preemptAck = lastAck_;
        break;
      }
      if (s.divergence)
      {
        r.divergences.push_back(*s.divergence);
        if (attempt_ >= cfg_.maxRecoveryAttempts)
        {
          r.status = ReplayStatus::Failed;
          r.finalReport = makeFinal(*s.divergence);
          break;
        }
        ++attempt_;
        recover(attempt_, *s.divergence);
        continue;
      }
      if (s.done)
      {
        r.status = ReplayStatus::Ok;
        r.outputs = readOutputs();
        break;
      }
    }
    r.recoveryAttempts = attempt_;
    r.durationNs += dev_.now() - t0;
    r.events = events_;
    r.jobsStarted = jobsStarted_;
    r.checkpointsTaken = checkpointsTaken_;
    return r;
  }

  ReplayResult ReplaySession::replay(const std::vector<Bytes>& inputs)
  {
    uint64_t t0 = dev_.now();
    begin(inputs);
    ReplayResult r;
    r.durationNs = dev_.now() - t0;
    return runLoop(std::move(r));
  }

  ReplayResult ReplaySession::resume()
  {
    if (!preempted_)
      throw ReplayError("session is not preempted");
    uint64_t t0 = dev_.now();
    preempted_ = false;
    jobsStarted_ = 0;
    checkpointsTaken_ = 0;
    if (cfg_.checkpointEveryJobs && !checkpoints_.empty())
      restore(checkpoints_.back());
    else
      freshStart();
    ReplayResult r;
    r.durationNs = dev_.now() - t0;
    return runLoop(std::move(r));
  }

  void ReplaySession::cleanup()
  {
    if (cleaned_)
      return;
    cleaned_ = true;
    try
    {
      nanoReset();
    }
    catch (...)
    {
      scrubPages();
      dev_.release();
      throw;
    }
    scrubPages();
    pages_.clear();
    dev_.release();
  }

  // ---------------------------------------------------------------------

  ReplayResult replaySequence(Device& dev, const ReplayConfig& cfg, const std::vector<Recording>& recs,
                              const std::vector<Bytes>& firstInputs, const std::vector<StepHook>& hooks)
  {
    ReplaySession s(dev, cfg);
    ReplayResult total;
    total.status = ReplayStatus::Ok;
    uint64_t t0 = dev.now();
    std::vector<Bytes> inputs = firstInputs;
    for (size_t k = 0; k < recs.size(); ++k)
    {
      s.load(recs[k]);
      if (k > 0)
      {
        auto ins = recs[k].inputs();
        std::vector<Bytes> next;
        for (size_t j = 0; j < ins.size(); ++j)
        {
          if (j >= total.outputs.size() || total.outputs[j].size() != ins[j].len)
            throw ReplayError("cannot wire output of recording " + std::to_string(k - 1) + " to input " +
                              std::to_string(j) + " of recording " + std::to_string(k));
          next.push_back(total.outputs[j]);
        }
        inputs = std::move(next);
      }
      s.setHook(k < hooks.size() ? hooks[k] : StepHook{});
      ReplayResult r = s.replay(inputs);
      total.recoveryAttempts += r.recoveryAttempts;
      total.divergences.insert(total.divergences.end(), r.divergences.begin(), r.divergences.end());
      total.events.insert(total.events.end(), r.events.begin(), r.events.end());
      total.jobsStarted += r.jobsStarted;
      total.checkpointsTaken += r.checkpointsTaken;
      total.outputs = std::move(r.outputs);
      if (!r.ok())
      {
        total.status = r.status;
        total.finalReport = r.finalReport;
        total.preemptAck = r.preemptAck;
        break;
      }
    }
    total.durationNs = dev.now() - t0;
    s.cleanup();
    return total;
  }

  size_t injectionPoint(const Recording& rec, FaultKind kind)
  {
    const auto& acts = rec.actions;
    size_t firstStart = acts.size();
    for (size_t i = 0; i < acts.size(); ++i)
      if (auto* w = acts[i].as<RegWrite>(); w && w->reg == "JOB_START")
      {
        firstStart = i;
        break;
      }
    if (firstStart == acts.size())
      throw Error("recording has no JOB_START");
    if (kind != FaultKind::OfflineCores)
      return firstStart;
    for (size_t i = firstStart; i-- > 0;)
      if (auto* r = acts[i].as<RegRead>(); r && r->reg == "GPU_STATUS")
        return i;
    throw Error("no GPU_STATUS read before the first JOB_START");
  }

  uint32_t corruptTarget(const Recording& rec)
  {
    for (const auto& d : rec.io)
      if (d.role == IoRole::Input)
        return d.va;
    for (const auto& a : rec.actions)
      if (auto* m = a.as<MapGpuMem>())
        return m->va;
    throw Error("recording maps no memory");
  }

  StepHook makeFaultHook(const Recording& rec, const FaultPlan& plan)
  {
    size_t at = injectionPoint(rec, plan.kind);
    HookPhase phase = plan.kind == FaultKind::Stall ? HookPhase::AfterExecute : HookPhase::BeforeAction;
    Fault f;
    switch (plan.kind)
    {
      case FaultKind::OfflineCores: f = OfflineCores{plan.coreMask}; break;
      case FaultKind::CorruptPte: f = CorruptPte{corruptTarget(rec)}; break;
      case FaultKind::Stall: f = Stall{plan.stallNs}; break;
    }
    bool persistent = plan.persistent;
    return [=](Device& dev, size_t i, uint32_t attempt, HookPhase p) {
      if (i == at && p == phase && (persistent || attempt == 0))
        dev.injectFault(f);
    };
  }

}
