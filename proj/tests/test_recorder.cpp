#include <doctest.h>

#include <algorithm>
#include <random>

#include "gpr/recorder.hpp"
#include "gpr/replayer.hpp"
#include "gpr/verifier.hpp"
#include "support.hpp"

using namespace gpr;

namespace
{

  size_t countWrites(const Recording& r, std::string_view reg)
  {
    return size_t(std::count_if(r.actions.begin(), r.actions.end(), [&](const ReplayAction& a) {
      auto* w = a.as<RegWrite>();
      return w && w->reg == reg;
    }));
  }

  size_t countKind(const Recording& r, ActionKind k)
  {
    return size_t(std::count_if(r.actions.begin(), r.actions.end(), [&](const ReplayAction& a) { return a.kind() == k; }));
  }

  const Allocation* byPurpose(const RecordTrace& t, std::string_view p)
  {
    for (const auto& a : t.allocations)
      if (a.purpose == p)
        return &a;
    return nullptr;
  }

  bool dumpCovers(const Recording& r, uint32_t va)
  {
    return std::any_of(r.dumps.begin(), r.dumps.end(),
                       [&](const MemDump& d) { return va >= d.va && va < d.va + d.rawLen; });
  }

  struct PollCounter : DriverProbe
  {
    uint32_t polls = 0;
    void onPollEnd(const RegisterEntry& e, uint32_t, uint32_t, uint32_t n) override
    {
      if (e.name == "GPU_STATUS")
        polls = std::max(polls, n);
    }
  };

  /// Action list with poll counts, intervals and NONDET expectations erased.
  std::vector<ReplayAction> normalized(const Recording& r)
  {
    std::vector<ReplayAction> out;
    for (ReplayAction a : r.actions)
    {
      a.minIntervalNs = a.observedIntervalNs = 0;
      if (auto* w = a.as<RegReadWait>())
        w->maxPolls = 0;
      if (auto* rd = a.as<RegRead>(); rd && rd->cls == StateClass::NondetRead)
        rd->expect = 0;
      out.push_back(a);
    }
    return out;
  }

}

TEST_CASE("single-layer vec_add has one JOB_START and one WaitIrq")
{
  Recording r = support::recordOne(workloads::vecAdd());
  CHECK(countWrites(r, "JOB_START") == 1);
  CHECK(countKind(r, ActionKind::WaitIrq) == 1);
  CHECK(r.jobCount() == 1);
  auto it = std::find_if(r.actions.begin(), r.actions.end(), [](const ReplayAction& a) { return a.as<WaitIrq>(); });
  CHECK(it->as<WaitIrq>()->expectRawstat == irq::kJobDone);
}

TEST_CASE("flush poll collapses to one RegReadWait covering the observed polls")
{
  PollCounter pc;
  {
    Device dev(skuA(), 1);
    Runtime rt(dev, &pc);
    rt.run(workloads::vecAdd(), Bytes(workloads::vecAdd().inputBytes(), 1));
  }
  Recording r = support::recordOne(workloads::vecAdd());
  std::vector<const RegReadWait*> waits;
  for (const auto& a : r.actions)
    if (auto* w = a.as<RegReadWait>(); w && w->reg == "GPU_STATUS")
      waits.push_back(w);
  REQUIRE(waits.size() == 1);
  CHECK(waits[0]->mask == status::kFlushActive);
  CHECK(waits[0]->expect == 0);
  CHECK(waits[0]->maxPolls >= pc.polls);
  CHECK(pc.polls >= 1);
}

TEST_CASE("GPU_ID is a compared read, JOB_PROGRESS is NONDET")
{
  Recording r = support::recordOne(workloads::vecAdd());
  size_t ids = 0;
  size_t progress = 0;
  for (const auto& a : r.actions)
    if (auto* rd = a.as<RegRead>())
    {
      if (rd->reg == "GPU_ID")
      {
        ++ids;
        CHECK(rd->expect == 0x0B31);
        CHECK((rd->cls != StateClass::NondetRead));
      }
      if (rd->reg == "JOB_PROGRESS")
      {
        ++progress;
        CHECK((rd->cls == StateClass::NondetRead));
      }
    }
  CHECK(ids == 1);
  CHECK(progress == 1);
}

TEST_CASE("exec pages are dumped and scratch is filtered")
{
  RecordResult rr = support::recordDefault(workloads::mixed());
  const Recording& r = rr.recordings[0];
  const RecordTrace& t = rr.traces[0];
  size_t execAllocs = 0;
  for (const auto& a : t.allocations)
  {
    if (a.flags & kGpuExec)
    {
      ++execAllocs;
      for (uint32_t off = 0; off < a.mappedLen(); off += kPageSize)
        CHECK(dumpCovers(r, a.va + off));
    }
    if (a.purpose == "scratch")
      CHECK_FALSE(dumpCovers(r, a.va));
  }
  CHECK(execAllocs == 4);
  CHECK(t.execPageHashes.size() >= 4);
  const Allocation* in = byPurpose(t, "input");
  REQUIRE(in);
  CHECK_FALSE(dumpCovers(r, in->va));
}

TEST_CASE("scratch forced into dumps compresses below half")
{
  RecordHarness h;
  h.dumpScratch = true;
  RecordResult rr = support::recordDefault(workloads::vecAdd(), {}, h);
  const Allocation* s = byPurpose(rr.traces[0], "scratch");
  REQUIRE(s);
  const Recording& r = rr.recordings[0];
  bool seen = false;
  for (const auto& d : r.dumps)
    if (d.va == s->va)
    {
      seen = true;
      CHECK(double(d.payload.size()) < 0.5 * double(d.rawLen));
    }
  CHECK(seen);
}

TEST_CASE("skipped intervals contain no device state change")
{
  RecordConfig cfg;
  cfg.delays = {50'000, 20'000, 5'000};
  for (const WorkloadGraph& g : workloads::builtin())
  {
    RecordResult rr = support::recordDefault(g, cfg);
    const Recording& r = rr.recordings[0];
    const RecordTrace& t = rr.traces[0];
    REQUIRE(t.actionStartNs.size() == r.actions.size());
    size_t skipped = 0;
    for (size_t i = 0; i < r.actions.size(); ++i)
    {
      if (r.actions[i].minIntervalNs != 0)
        continue;
      ++skipped;
      uint64_t s = t.actionStartNs[i];
      uint64_t e = s + r.actions[i].observedIntervalNs;
      for (uint64_t ev : t.deviceEvents)
        CHECK_FALSE((ev > s && ev < e));
      for (const auto& b : t.busy)
        CHECK_FALSE((s < b.end && e > b.begin));
    }
    CHECK(double(skipped) / double(r.actions.size()) > 0.5);
    CHECK(countSkipped(r) == skipped);
  }
}

TEST_CASE("1 KiB random input matches exactly one VA")
{
  WorkloadGraph g = workloads::vecAdd(128);
  REQUIRE(g.inputBytes() == 1024);
  RecordResult rr = support::recordDefault(g);
  const RecordTrace& t = rr.traces[0];
  REQUIRE_FALSE(t.candidates.empty());
  CHECK(t.candidates[0].first == 1);
  CHECK(t.trials == 1);
  auto ins = rr.recordings[0].inputs();
  REQUIRE(ins.size() == 1);
  CHECK(ins[0].va == byPurpose(t, "input")->va);
  CHECK(ins[0].len == 1024);
}

TEST_CASE("low-entropy output is disambiguated within three trials")
{
  RecordHarness h;
  h.magicSource = [](uint32_t trial, size_t len) {
    if (trial == 0)
      return packI32(std::vector<int32_t>{5, -5});
    std::mt19937_64 rng(0x5eed + trial);
    Bytes b(len);
    for (auto& x : b)
      x = uint8_t(rng());
    return b;
  };
  WorkloadGraph g{"low", {{LayerOp::VecAdd, 1}}};
  RecordResult rr = support::recordDefault(g, {}, h);
  const RecordTrace& t = rr.traces[0];
  CHECK(t.candidates.at(0).second >= 3);
  CHECK(t.trials <= 3);
  REQUIRE(rr.recordings[0].outputs().size() == 1);
  CHECK(rr.recordings[0].outputs()[0].va == byPurpose(t, "output")->va);
}

TEST_CASE("trial cap turns persistent ambiguity into an error")
{
  RecordHarness h;
  h.maxTrials = 2;
  h.magicSource = [](uint32_t, size_t) { return packI32(std::vector<int32_t>{0, 0}); };
  WorkloadGraph g{"zeros", {{LayerOp::VecAdd, 1}}};
  CHECK_THROWS_AS(support::recordDefault(g, {}, h), IoDiscoveryError);
}

TEST_CASE("by_value input yields no INPUT descriptor and lands in a dump")
{
  WorkloadGraph g = workloads::vecAdd(64);
  RecordHarness h;
  h.inputMode = IoMode::ByValue;
  std::mt19937_64 rng(8);
  h.inputValue = support::randomInput(g, rng);
  RecordResult rr = support::recordDefault(g, {}, h);
  const Recording& r = rr.recordings[0];
  CHECK(r.inputs().empty());
  CHECK(r.outputs().size() == 1);
  bool found = false;
  for (const Bytes& raw : rr.traces[0].rawDumps)
    found |= std::search(raw.begin(), raw.end(), h.inputValue->begin(), h.inputValue->end()) != raw.end();
  CHECK(found);
  ReplayResult res = support::replayOnce(r, {});
  REQUIRE(res.ok());
  CHECK(res.outputs[0] == oracle::eval(g, *h.inputValue));
}

TEST_CASE("recording under two env seeds differs only in polls and intervals")
{
  for (const WorkloadGraph& g : workloads::builtin())
  {
    RecordConfig a;
    a.envSeed = 101;
    RecordConfig b;
    b.envSeed = 202;
    Recording ra = support::recordOne(g, a);
    Recording rb = support::recordOne(g, b);
    CHECK(normalized(ra) == normalized(rb));
    CHECK(ra.io == rb.io);
  }
}

TEST_CASE("exec pages after replayer load hash as at record time")
{
  RecordResult rr = support::recordDefault(workloads::mixed());
  Device dev(skuA(), 4);
  ReplaySession s(dev);
  s.load(rr.recordings[0]);
  REQUIRE_FALSE(rr.traces[0].execPageHashes.empty());
  for (const auto& [va, hash] : rr.traces[0].execPageHashes)
  {
    auto pa = s.physOf(va);
    REQUIRE(pa);
    Bytes page(kPageSize);
    dev.physRead(*pa, page);
    CHECK((sha256(page) == hash));
  }
}

TEST_CASE("per-layer granularity yields one verified recording per layer")
{
  RecordHarness h;
  h.granularity = Granularity::PerLayer;
  RecordResult rr = support::recordDefault(workloads::mixed(), {}, h);
  REQUIRE(rr.recordings.size() == 3);
  for (size_t k = 0; k < 3; ++k)
  {
    CHECK(rr.recordings[k].header.label == "mixed/L" + std::to_string(k));
    CHECK((rr.recordings[k].header.granularity == Granularity::PerLayer));
    CHECK(verify(rr.recordings[k], defaultRegisterMap()).ok);
  }
}

TEST_CASE("harness text")
{
  RecordHarness h = RecordHarness::parse("# c\ninput 0 both\nmagic_seed 7\ntrials 3\ngranularity per_layer\n"
                                         "dump_scratch on\n");
  CHECK((h.inputMode == IoMode::Both));
  CHECK(h.magicSeed == 7);
  CHECK(h.maxTrials == 3);
  CHECK((h.granularity == Granularity::PerLayer));
  CHECK(h.dumpScratch);
  CHECK_THROWS_AS(RecordHarness::parse("input 1 both\n"), Error);
  CHECK_THROWS_AS(RecordHarness::parse("trials 0\n"), Error);
  CHECK_THROWS_AS(RecordHarness::parse("colour blue\n"), Error);
}
