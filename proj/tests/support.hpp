#pragma once

#include <random>
#include <vector>

#include "gpr/recorder.hpp"
#include "gpr/replayer.hpp"
#include "oracle/reference.hpp"

namespace support
{

  /// Uniform int32 input for @p g, with a few boundary values mixed in.
  inline gpr::Bytes randomInput(const gpr::WorkloadGraph& g, std::mt19937_64& rng)
  {
    static constexpr int32_t kEdges[] = {0, 1, -1, INT32_MAX, INT32_MIN, 2, -2};
    std::vector<int32_t> v(g.inputBytes() / 4);
    for (auto& x : v)
      x = (rng() % 16 == 0) ? kEdges[rng() % std::size(kEdges)] : int32_t(uint32_t(rng()));
    return gpr::packI32(v);
  }

  inline gpr::RecordResult recordDefault(const gpr::WorkloadGraph& g, gpr::RecordConfig cfg = {},
                                         gpr::RecordHarness h = {})
  {
    return gpr::record(g, h, cfg);
  }

  inline gpr::Recording recordOne(const gpr::WorkloadGraph& g, gpr::RecordConfig cfg = {}, gpr::RecordHarness h = {})
  {
    return gpr::record(g, h, cfg).recordings.at(0);
  }

  inline gpr::ReplayResult replayOnce(const gpr::Recording& rec, const gpr::Bytes& input, uint64_t envSeed = 1,
                                      gpr::ReplayConfig cfg = {}, const gpr::SkuProfile& sku = gpr::skuA(),
                                      gpr::StepHook hook = {})
  {
    gpr::Device dev(sku, envSeed);
    gpr::ReplaySession s(dev, cfg);
    s.load(rec);
    s.setHook(std::move(hook));
    std::vector<gpr::Bytes> ins;
    if (!rec.inputs().empty())
      ins.push_back(input);
    return s.replay(ins);
  }

  inline bool outputMatches(const gpr::ReplayResult& r, const gpr::WorkloadGraph& g, const gpr::Bytes& input)
  {
    return r.ok() && r.outputs.size() == 1 && r.outputs[0] == oracle::eval(g, input);
  }

}
