#include "gpr/patcher.hpp"

namespace gpr
{

  PatchResult patch(const Recording& rec, const SkuProfile& from, const SkuProfile& to, PatchOptions opt)
  {
    from.validate();
    to.validate();
    if (rec.header.skuId != from.skuId)
      throw PatchError("recording is for SKU " + hex32(rec.header.skuId) + ", not " + from.name);
    if (!skuById(from.skuId) || !skuById(to.skuId))
      throw PatchError("unknown SKU");
    if (to.coreCount < from.coreCount && !opt.allowFewerCores)
      throw PatchError("target SKU " + to.name + " has fewer cores than " + from.name);

    PatchResult out{rec, 0, 0};
    if (from == to)
      return out;

    for (auto& a : out.rec.actions)
    {
      if (auto* m = a.as<MapGpuMem>())
      {
        uint8_t p = encodePerms(to.permLayout, decodePerms(from.permLayout, m->perm));
        if (p != m->perm)
        {
          m->perm = p;
          ++out.pteEdits;
        }
      }
      else if (auto* r = a.as<RegRead>(); r && r->reg == "GPU_ID")
      {
        if (r->expect != to.gpuIdValue)
        {
          r->expect = to.gpuIdValue;
          ++out.registerEdits;
        }
      }
      else if (auto* w = a.as<RegWrite>())
      {
        uint32_t v = w->value;
        if (w->reg == "MMU_CONFIG")
          v = (v & ~from.expectedMmuConfig) | to.expectedMmuConfig;
        else if (w->reg == "JOB_AFFINITY")
          v = to.fullCoreMask();
        if (v != w->value)
        {
          w->value = v;
          ++out.registerEdits;
        }
      }
    }
    out.rec.header.skuId = to.skuId;
    return out;
  }

}
