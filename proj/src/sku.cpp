#include "gpr/sku.hpp"

#include "gpr/common.hpp"

namespace gpr
{

  bool isBijection(const PermLayout& layout)
  {
    uint8_t seen = 0;
    for (Perm p : layout)
    {
      uint8_t b = uint8_t(p);
      if (b == 0 || (b & (b - 1)) || b > 8 || (seen & b))
        return false;
      seen |= b;
    }
    return seen == 0xf;
  }

  uint8_t encodePerms(const PermLayout& layout, PermSet perms)
  {
    uint8_t out = 0;
    for (unsigned bit = 0; bit < 4; ++bit)
      if (perms.has(layout[bit]))
        out |= uint8_t(1u << bit);
    return out;
  }

  PermSet decodePerms(const PermLayout& layout, uint8_t bits)
  {
    PermSet out;
    for (unsigned bit = 0; bit < 4; ++bit)
      if (bits & (1u << bit))
        out = out.with(layout[bit]);
    return out;
  }

  void SkuProfile::validate() const
  {
    if (!isBijection(permLayout))
      throw Error("SKU " + name + ": permission layout is not a bijection");
    if (coreCount < 1 || coreCount > 32)
      throw Error("SKU " + name + ": core count " + std::to_string(coreCount) + " outside [1, 32]");
  }

  const SkuProfile& skuA()
  {
    static const SkuProfile p{"A", 0x0B31, 1, {Perm::Valid, Perm::Read, Perm::Write, Perm::Exec}, 0x0, 0x0B31};
    return p;
  }

  const SkuProfile& skuB()
  {
    static const SkuProfile p{"B", 0x0B71, 8, {Perm::Valid, Perm::Exec, Perm::Read, Perm::Write}, 0x8, 0x0B71};
    return p;
  }

  std::optional<SkuProfile> skuById(uint32_t skuId)
  {
    for (const SkuProfile* p : {&skuA(), &skuB()})
      if (p->skuId == skuId)
        return *p;
    return std::nullopt;
  }

  std::optional<SkuProfile> skuByName(std::string_view name)
  {
    for (const SkuProfile* p : {&skuA(), &skuB()})
      if (p->name == name || "SKU-" + p->name == name)
        return *p;
    return std::nullopt;
  }

}
