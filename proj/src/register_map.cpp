#include "gpr/register_map.hpp"

#include <charconv>
#include <set>
#include <sstream>

namespace gpr
{

  RegisterMap::RegisterMap(std::vector<RegisterEntry> entries) : entries_(std::move(entries))
  {
    std::set<std::string> names;
    std::set<uint32_t> offsets;
    for (const auto& e : entries_)
    {
      if (e.name.empty() || e.name.size() > 255)
        throw Error("register name must be 1..255 bytes");
      if (!names.insert(e.name).second)
        throw Error("duplicate register name " + e.name);
      if (!offsets.insert(e.offset).second)
        throw Error("duplicate register offset " + hex32(e.offset));
      if (e.offset % 4)
        throw Error("register " + e.name + " offset not word aligned");
      if (e.stateClass == StateClass::NondetRead && e.access != RegAccess::ReadOnly)
        throw Error("nondeterministic register " + e.name + " must be read-only");
    }
  }

  const RegisterEntry* RegisterMap::byName(std::string_view name) const
  {
    for (const auto& e : entries_)
      if (e.name == name)
        return &e;
    return nullptr;
  }

  const RegisterEntry* RegisterMap::byOffset(uint32_t offset) const
  {
    for (const auto& e : entries_)
      if (e.offset == offset)
        return &e;
    return nullptr;
  }

  const RegisterEntry& RegisterMap::at(std::string_view name) const
  {
    if (auto* e = byName(name))
      return *e;
    throw Error("unknown register " + std::string(name));
  }

  std::string_view toString(StateClass c)
  {
    switch (c)
    {
      case StateClass::StateChanging: return "state";
      case StateClass::PureRead: return "pure";
      case StateClass::NondetRead: return "nondet";
    }
    return "?";
  }

  std::string_view toString(RegAccess a)
  {
    switch (a)
    {
      case RegAccess::ReadOnly: return "ro";
      case RegAccess::WriteOnly: return "wo";
      case RegAccess::ReadWrite: return "rw";
    }
    return "?";
  }

  std::string RegisterMap::toText() const
  {
    std::ostringstream os;
    for (const auto& e : entries_)
    {
      os << e.name << ' ' << hex32(e.offset) << ' ' << toString(e.access) << ' ' << toString(e.stateClass);
      if (e.relocatable)
        os << " reloc";
      os << '\n';
    }
    return os.str();
  }

  Digest RegisterMap::hash() const
  {
    std::string text = toText();
    return sha256({reinterpret_cast<const uint8_t*>(text.data()), text.size()});
  }

  RegisterMap RegisterMap::parse(std::string_view text)
  {
    std::vector<RegisterEntry> entries;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineNo = 0;
    while (std::getline(in, line))
    {
      ++lineNo;
      if (auto hash = line.find('#'); hash != std::string::npos)
        line.resize(hash);
      std::istringstream ls(line);
      std::string name, off, acc, cls, extra;
      if (!(ls >> name))
        continue;
      auto bad = [&](const std::string& why) {
        return Error("register map line " + std::to_string(lineNo) + ": " + why);
      };
      if (!(ls >> off >> acc >> cls))
        throw bad("expected: name offset ro|wo|rw state|pure|nondet [reloc]");
      RegisterEntry e;
      e.name = name;
      std::string_view digits = off;
      int base = 10;
      if (digits.starts_with("0x") || digits.starts_with("0X"))
      {
        digits.remove_prefix(2);
        base = 16;
      }
      auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), e.offset, base);
      if (ec != std::errc() || p != digits.data() + digits.size())
        throw bad("bad offset " + off);
      if (acc == "ro") e.access = RegAccess::ReadOnly;
      else if (acc == "wo") e.access = RegAccess::WriteOnly;
      else if (acc == "rw") e.access = RegAccess::ReadWrite;
      else throw bad("bad access " + acc);
      if (cls == "state") e.stateClass = StateClass::StateChanging;
      else if (cls == "pure") e.stateClass = StateClass::PureRead;
      else if (cls == "nondet") e.stateClass = StateClass::NondetRead;
      else throw bad("bad class " + cls);
      if (ls >> extra)
      {
        if (extra != "reloc")
          throw bad("unexpected token " + extra);
        e.relocatable = true;
      }
      entries.push_back(std::move(e));
    }
    return RegisterMap(std::move(entries));
  }

  const RegisterMap& defaultRegisterMap()
  {
    using A = RegAccess;
    using C = StateClass;
    static const RegisterMap map({
      {"GPU_ID", reg::GPU_ID, A::ReadOnly, C::PureRead, false},
      {"GPU_STATUS", reg::GPU_STATUS, A::ReadOnly, C::StateChanging, false},
      {"GPU_IRQ_RAWSTAT", reg::GPU_IRQ_RAWSTAT, A::ReadOnly, C::StateChanging, false},
      {"GPU_IRQ_CLEAR", reg::GPU_IRQ_CLEAR, A::WriteOnly, C::StateChanging, false},
      {"GPU_IRQ_MASK", reg::GPU_IRQ_MASK, A::ReadWrite, C::StateChanging, false},
      {"GPU_CMD", reg::GPU_CMD, A::WriteOnly, C::StateChanging, false},
      {"MMU_TABLE_BASE_LO", reg::MMU_TABLE_BASE_LO, A::ReadWrite, C::StateChanging, true},
      {"MMU_TABLE_BASE_HI", reg::MMU_TABLE_BASE_HI, A::ReadWrite, C::StateChanging, true},
      {"MMU_CONFIG", reg::MMU_CONFIG, A::ReadWrite, C::StateChanging, false},
      {"JOB_HEAD_LO", reg::JOB_HEAD_LO, A::ReadWrite, C::StateChanging, false},
      {"JOB_HEAD_HI", reg::JOB_HEAD_HI, A::ReadWrite, C::StateChanging, false},
      {"JOB_START", reg::JOB_START, A::WriteOnly, C::StateChanging, false},
      {"JOB_STATUS", reg::JOB_STATUS, A::ReadOnly, C::StateChanging, false},
      {"JOB_AFFINITY", reg::JOB_AFFINITY, A::ReadWrite, C::StateChanging, false},
      {"JOB_PROGRESS", reg::JOB_PROGRESS, A::ReadOnly, C::NondetRead, false},
      {"CLOCK_DIV", reg::CLOCK_DIV, A::ReadOnly, C::PureRead, false},
      {"PWR_CORES_ON", reg::PWR_CORES_ON, A::ReadWrite, C::StateChanging, false},
      {"MMU_FAULT_ADDR", reg::MMU_FAULT_ADDR, A::ReadOnly, C::StateChanging, false},
    });
    return map;
  }

}
