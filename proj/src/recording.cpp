#include "gpr/recording.hpp"

#include <cstdio>

namespace gpr
{

  std::string_view toString(ActionKind k)
  {
    switch (k)
    {
      case ActionKind::RegWrite: return "RegWrite";
      case ActionKind::RegRead: return "RegRead";
      case ActionKind::RegReadWait: return "RegReadWait";
      case ActionKind::WaitIrq: return "WaitIrq";
      case ActionKind::MapGpuMem: return "MapGpuMem";
      case ActionKind::UnmapGpuMem: return "UnmapGpuMem";
      case ActionKind::LoadMemDump: return "LoadMemDump";
    }
    return "?";
  }

  std::string_view toString(IoRole r) { return r == IoRole::Input ? "input" : "output"; }

  std::string_view toString(IoMode m)
  {
    switch (m)
    {
      case IoMode::ByValue: return "by_value";
      case IoMode::ByAddress: return "by_address";
      case IoMode::Both: return "both";
    }
    return "?";
  }

  std::string_view toString(DumpOrigin o) { return o == DumpOrigin::ExecPage ? "exec_page" : "mapped_fallback"; }
  std::string_view toString(Granularity g) { return g == Granularity::Monolithic ? "monolithic" : "per_layer"; }

  std::string describe(const ReplayAction& a)
  {
    char buf[160];
    std::visit(
        [&](const auto& b) {
          using T = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<T, RegWrite>)
            std::snprintf(buf, sizeof buf, "RegWrite %s = 0x%08x", b.reg.c_str(), b.value);
          else if constexpr (std::is_same_v<T, RegRead>)
          {
            if (b.cls == StateClass::NondetRead)
              std::snprintf(buf, sizeof buf, "RegRead %s (nondet)", b.reg.c_str());
            else
              std::snprintf(buf, sizeof buf, "RegRead %s == 0x%08x (%s)", b.reg.c_str(), b.expect,
                            std::string(toString(b.cls)).c_str());
          }
          else if constexpr (std::is_same_v<T, RegReadWait>)
            std::snprintf(buf, sizeof buf, "RegReadWait %s & 0x%08x == 0x%08x (max_polls %u)", b.reg.c_str(), b.mask,
                          b.expect, b.maxPolls);
          else if constexpr (std::is_same_v<T, WaitIrq>)
            std::snprintf(buf, sizeof buf, "WaitIrq rawstat == 0x%08x", b.expectRawstat);
          else if constexpr (std::is_same_v<T, MapGpuMem>)
            std::snprintf(buf, sizeof buf, "MapGpuMem va 0x%08x len 0x%x perm 0x%x", b.va, b.len, b.perm);
          else if constexpr (std::is_same_v<T, UnmapGpuMem>)
            std::snprintf(buf, sizeof buf, "UnmapGpuMem va 0x%08x len 0x%x", b.va, b.len);
          else
            std::snprintf(buf, sizeof buf, "LoadMemDump dump %u at va 0x%08x", b.dumpId, b.va);
        },
        a.body);
    return buf;
  }

  const MemDump* Recording::findDump(uint32_t id) const
  {
    for (const auto& d : dumps)
      if (d.id == id)
        return &d;
    return nullptr;
  }

  size_t Recording::jobCount() const
  {
    size_t n = 0;
    for (const auto& a : actions)
      if (auto* w = a.as<RegWrite>(); w && w->reg == "JOB_START")
        ++n;
    return n;
  }

  std::vector<IoDescriptor> Recording::inputs() const
  {
    std::vector<IoDescriptor> out;
    for (const auto& d : io)
      if (d.role == IoRole::Input)
        out.push_back(d);
    return out;
  }

  std::vector<IoDescriptor> Recording::outputs() const
  {
    std::vector<IoDescriptor> out;
    for (const auto& d : io)
      if (d.role == IoRole::Output)
        out.push_back(d);
    return out;
  }

}
