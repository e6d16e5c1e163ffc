#include "gpr/verifier.hpp"

#include <map>
#include <sstream>

#include <json.hpp>

#include "gpr/recfmt.hpp"

namespace gpr
{

  bool VerificationReport::has(std::string_view rule) const
  {
    for (const auto& v : violations)
      if (v.rule == rule)
        return true;
    return false;
  }

  std::string VerificationReport::toText() const
  {
    std::ostringstream os;
    os << "ok " << (ok ? "true" : "false") << "\n";
    os << "peak_gpu_mem_bytes " << peakGpuMemBytes << "\n";
    for (const auto& v : violations)
      os << "violation " << v.rule << " action " << v.actionIndex << ": " << v.message << "\n";
    os << violations.size() << " violations\n";
    return os.str();
  }

  std::string VerificationReport::toJson() const
  {
    nlohmann::json j;
    j["ok"] = ok;
    j["peak_gpu_mem_bytes"] = peakGpuMemBytes;
    j["violations"] = nlohmann::json::array();
    for (const auto& v : violations)
      j["violations"].push_back({{"action_index", v.actionIndex}, {"rule", v.rule}, {"message", v.message}});
    return j.dump(2);
  }

  namespace
  {
    struct Live
    {
      uint32_t va;
      uint32_t len;
    };

    bool inside(const std::map<uint32_t, Live>& live, uint32_t va, uint64_t len)
    {
      auto it = live.upper_bound(va);
      if (it == live.begin())
        return false;
      --it;
      return va >= it->second.va && uint64_t(va) + len <= uint64_t(it->second.va) + it->second.len;
    }

    bool overlapsLive(const std::map<uint32_t, Live>& live, uint32_t va, uint64_t len)
    {
      for (const auto& [k, m] : live)
        if (uint64_t(va) < uint64_t(m.va) + m.len && uint64_t(m.va) < uint64_t(va) + len)
          return true;
      return false;
    }
  }

  uint64_t peakGpuMem(const Recording& rec)
  {
    std::map<uint32_t, uint64_t> live;
    uint64_t cur = 0, peak = 0;
    for (size_t i = 0; i < rec.actions.size(); ++i)
    {
      const auto& a = rec.actions[i];
      if (auto* m = a.as<MapGpuMem>())
      {
        uint64_t len = pageRoundUp(m->len);
        live[m->va] += len;
        cur += len;
        peak = std::max(peak, cur);
      }
      else if (auto* u = a.as<UnmapGpuMem>())
      {
        auto it = live.find(u->va);
        if (it == live.end() || it->second != pageRoundUp(u->len))
          throw Error("unmap before map at action " + std::to_string(i));
        cur -= it->second;
        live.erase(it);
      }
    }
    return peak;
  }

  VerificationReport verify(const Recording& rec, const RegisterMap& map, uint64_t budget)
  {
    VerificationReport r;
    auto flag = [&](size_t i, const char* rule, std::string msg) { r.violations.push_back({i, rule, std::move(msg)}); };

    std::map<uint32_t, Live> live;
    uint64_t cur = 0;
    bool overBudget = false;
    int pendingIrqSources = 0;

    for (size_t i = 0; i < rec.actions.size(); ++i)
    {
      const ReplayAction& a = rec.actions[i];
      auto checkReg = [&](const std::string& name, bool write) -> const RegisterEntry* {
        const RegisterEntry* e = map.byName(name);
        if (!e)
        {
          flag(i, "R1", "unknown register " + name);
          return nullptr;
        }
        if (write ? !e->writable() : !e->readable())
        {
          flag(i, "R2", std::string(write ? "write to non-writable" : "read of non-readable") + " register " + name);
          return nullptr;
        }
        return e;
      };

      if (auto* w = a.as<RegWrite>())
      {
        if (checkReg(w->reg, true))
          if ((w->reg == "JOB_START" && (w->value & 1)) || (w->reg == "GPU_CMD" && w->value == 1))
            ++pendingIrqSources;
      }
      else if (auto* rd = a.as<RegRead>())
      {
        if (const RegisterEntry* e = checkReg(rd->reg, false))
          if ((rd->cls == StateClass::NondetRead) != (e->stateClass == StateClass::NondetRead))
            flag(i, "R2", "read class of " + rd->reg + " disagrees with the register map");
      }
      else if (auto* pw = a.as<RegReadWait>())
      {
        if (const RegisterEntry* e = checkReg(pw->reg, false); e && e->stateClass == StateClass::NondetRead)
          flag(i, "R2", "poll on nondeterministic register " + pw->reg);
        if (pw->expect & ~pw->mask)
          flag(i, "R2", "poll expectation has bits outside the mask");
      }
      else if (a.as<WaitIrq>())
      {
        if (pendingIrqSources <= 0)
          flag(i, "R7", "WaitIrq without a preceding JOB_START or SOFT_RESET");
        else
          --pendingIrqSources;
      }
      else if (auto* m = a.as<MapGpuMem>())
      {
        if (m->len == 0 || (m->va & (kPageSize - 1)) || uint64_t(m->va) + pageRoundUp(m->len) > 0x1'0000'0000ull)
        {
          flag(i, "R8", "malformed map at " + hex32(m->va));
          continue;
        }
        if (overlapsLive(live, m->va, pageRoundUp(m->len)))
        {
          flag(i, "R8", "map at " + hex32(m->va) + " overlaps a live mapping");
          continue;
        }
        live[m->va] = {m->va, uint32_t(pageRoundUp(m->len))};
        cur += pageRoundUp(m->len);
        r.peakGpuMemBytes = std::max(r.peakGpuMemBytes, cur);
        if (cur > budget && !overBudget)
        {
          overBudget = true;
          flag(i, "R3", "mapped GPU memory " + std::to_string(cur) + " exceeds budget " + std::to_string(budget));
        }
      }
      else if (auto* u = a.as<UnmapGpuMem>())
      {
        auto it = live.find(u->va);
        if (it == live.end() || it->second.len != pageRoundUp(u->len))
        {
          flag(i, "R6", "unmap of unmapped range " + hex32(u->va));
          continue;
        }
        cur -= it->second.len;
        live.erase(it);
      }
      else if (auto* l = a.as<LoadMemDump>())
      {
        const MemDump* d = rec.findDump(l->dumpId);
        if (!d)
          flag(i, "R4", "unknown dump id " + std::to_string(l->dumpId));
        else if (d->va != l->va)
          flag(i, "R4", "dump " + std::to_string(d->id) + " va disagrees with action");
        else if (!inside(live, l->va, d->rawLen))
          flag(i, "R4", "dump " + std::to_string(d->id) + " at " + hex32(l->va) + " outside live mappings");
      }
    }

    for (const auto& io : rec.io)
      if (io.len == 0 || !inside(live, io.va, io.len))
        flag(rec.actions.size(), "R5",
             std::string(toString(io.role)) + " at " + hex32(io.va) + " not inside a mapping live at end");
    for (size_t i = 0; i < rec.io.size(); ++i)
      for (size_t j = 0; j < i; ++j)
      {
        const auto& a = rec.io[i];
        const auto& b = rec.io[j];
        if (uint64_t(a.va) < uint64_t(b.va) + b.len && uint64_t(b.va) < uint64_t(a.va) + a.len)
          flag(rec.actions.size(), "R5", "I/O descriptors " + std::to_string(j) + " and " + std::to_string(i) + " overlap");
      }

    r.ok = r.violations.empty();
    return r;
  }

  VerificationReport verifyBytes(std::span<const uint8_t> file, const RegisterMap& map, uint64_t budget)
  {
    try
    {
      return verify(decode(file), map, budget);
    }
    catch (const FormatError& e)
    {
      VerificationReport r;
      r.ok = false;
      r.violations.push_back({0, "R0", e.what()});
      return r;
    }
  }

}
