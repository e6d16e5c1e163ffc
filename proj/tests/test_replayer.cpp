#include <doctest.h>

#include <algorithm>
#include <random>
#include <thread>

#include "gpr/replayer.hpp"
#include "gpr/verifier.hpp"
#include "support.hpp"

using namespace gpr;

namespace
{

  size_t nthWaitIrq(const Recording& rec, size_t n)
  {
    for (size_t i = 0, jobs = 0; i < rec.actions.size(); ++i)
      if (rec.actions[i].as<WaitIrq>() && ++jobs == n)
        return i;
    return SIZE_MAX;
  }

  size_t firstJobStart(const Recording& rec, size_t after)
  {
    for (size_t i = after; i < rec.actions.size(); ++i)
      if (auto* w = rec.actions[i].as<RegWrite>(); w && w->reg == "JOB_START")
        return i;
    return SIZE_MAX;
  }

  WorkloadGraph scaleChain(uint32_t layers)
  {
    WorkloadGraph g{"chain", {}};
    for (uint32_t i = 0; i < layers; ++i)
      g.layers.push_back(Layer{LayerOp::Scale, 64, 0, 0, i % 2 ? -1 : 3});
    return g;
  }

  std::vector<Bytes> runToEnd(ReplaySession& s)
  {
    for (;;)
    {
      StepResult r = s.step();
      REQUIRE_FALSE(r.divergence.has_value());
      if (r.done)
        return s.readOutputs();
    }
  }

}

TEST_CASE("init leaves the GPU idle")
{
  Device dev(skuA(), 1);
  ReplaySession s(dev);
  CHECK(dev.claimed());
  CHECK((*dev.regRead(reg::GPU_STATUS) & ~status::kCoresPowered) == 0);
  CHECK(*dev.regRead(reg::GPU_IRQ_RAWSTAT) == 0);
}

TEST_CASE("init on an owned device fails")
{
  Device dev(skuA(), 1);
  ReplaySession s(dev);
  CHECK_THROWS_AS(ReplaySession{dev}, ReplayError);
}

TEST_CASE("cleanup scrubs the session's pages")
{
  WorkloadGraph g = workloads::vecAdd(64);
  RecordResult rr = support::recordDefault(g);
  const Recording& rec = rr.recordings[0];
  Device dev(skuA(), 1);
  uint64_t outPa = 0;
  {
    ReplaySession s(dev);
    s.load(rec);
    ReplayResult r = s.replay({rr.traces[0].input});
    REQUIRE(r.ok());
    outPa = *s.physOf(rec.outputs()[0].va);
    Bytes live(rec.outputs()[0].len);
    dev.physRead(outPa, live);
    CHECK(live == r.outputs[0]);
    s.cleanup();
    CHECK_FALSE(dev.claimed());
  }
  ReplaySession fresh(dev);
  Bytes after(rec.outputs()[0].len);
  dev.physRead(outPa, after);
  CHECK(std::all_of(after.begin(), after.end(), [](uint8_t b) { return b == 0; }));
}

TEST_CASE("vec_add with new inputs")
{
  WorkloadGraph g = workloads::vecAdd(2);
  Recording rec = support::recordOne(g);
  ReplayResult r = support::replayOnce(rec, packI32(std::vector<int32_t>{10, 20, 1, 2}));
  REQUIRE(r.ok());
  CHECK(unpackI32(r.outputs[0]) == std::vector<int32_t>{11, 22});
}

TEST_CASE("same input under 100 env seeds gives identical outputs")
{
  WorkloadGraph g = workloads::vecAdd(64);
  RecordResult rr = support::recordDefault(g);
  Bytes want = oracle::eval(g, rr.traces[0].input);
  for (uint64_t seed = 0; seed < 100; ++seed)
  {
    ReplayResult r = support::replayOnce(rr.recordings[0], rr.traces[0].input, seed);
    REQUIRE(r.ok());
    CHECK(r.outputs[0] == want);
  }
}

TEST_CASE("property: random inputs match the reference and the recorded state events")
{
  std::mt19937_64 rng(77);
  for (const WorkloadGraph& g : workloads::builtin())
  {
    Recording rec = support::recordOne(g);
    auto want = expectedStateEvents(rec);
    for (int i = 0; i < 5; ++i)
    {
      Bytes in = support::randomInput(g, rng);
      ReplayResult r = support::replayOnce(rec, in, rng());
      CHECK(support::outputMatches(r, g, in));
      CHECK(r.events == want);
    }
  }
}

TEST_CASE("load refuses a foreign SKU and a bad budget")
{
  Recording rec = support::recordOne(workloads::vecAdd(16));
  Device b(skuB(), 1);
  ReplaySession s(b);
  CHECK_THROWS_AS(s.load(rec), ReplayError);

  Device a(skuA(), 1);
  ReplayConfig tiny;
  tiny.memBudgetBytes = kPageSize;
  tiny.force = true;
  ReplaySession t(a, tiny);
  CHECK_THROWS_AS(t.load(rec), ReplayError);
}

TEST_CASE("second load supersedes the first")
{
  WorkloadGraph small = workloads::vecAdd(16);
  RecordResult big = support::recordDefault(workloads::mixed());
  RecordResult rr = support::recordDefault(small);
  size_t alonePages = 0;
  {
    Device dev(skuA(), 1);
    ReplaySession s(dev);
    s.load(rr.recordings[0]);
    alonePages = s.sessionPages();
  }
  Device dev(skuA(), 1);
  ReplaySession s(dev);
  s.load(big.recordings[0]);
  uint64_t firstLoad = s.loadId();
  s.load(rr.recordings[0]);
  CHECK(s.loadId() == firstLoad + 1);
  CHECK(s.sessionPages() == alonePages);
  ReplayResult r = s.replay({rr.traces[0].input});
  REQUIRE(r.ok());
  CHECK(r.outputs[0] == oracle::eval(small, rr.traces[0].input));
}

TEST_CASE("inputs are checked before any action runs")
{
  Recording rec = support::recordOne(workloads::vecAdd(16));
  Device dev(skuA(), 1);
  ReplaySession s(dev);
  s.load(rec);
  CHECK_THROWS_AS(s.replay({}), ReplayError);
  CHECK_THROWS_AS(s.replay({Bytes(3)}), ReplayError);
  CHECK(s.cursor() == 0);
}

TEST_CASE("GPU_ID expectation mismatch is VALUE_MISMATCH")
{
  Recording rec = support::recordOne(workloads::vecAdd(16));
  for (auto& a : rec.actions)
    if (auto* rd = a.as<RegRead>(); rd && rd->reg == "GPU_ID")
      rd->expect = 0x0B71;
  Device dev(skuA(), 1);
  ReplaySession s(dev);
  s.load(rec);
  s.begin({Bytes(rec.inputs()[0].len)});
  std::optional<DivergenceReport> d;
  while (!d)
  {
    StepResult r = s.step();
    REQUIRE_FALSE(r.done);
    d = r.divergence;
  }
  CHECK((d->kind == DivergenceKind::ValueMismatch));
  CHECK(d->reg == "GPU_ID");
  CHECK(d->expected == 0x0B71);
  CHECK(d->got == 0x0B31);
}

TEST_CASE("T of 50 us advances the clock at least 50 us")
{
  Recording rec = support::recordOne(workloads::vecAdd(16));
  rec.actions[0].minIntervalNs = 50'000;
  Device dev(skuA(), 1);
  ReplaySession s(dev);
  s.load(rec);
  s.begin({Bytes(rec.inputs()[0].len)});
  uint64_t t0 = dev.now();
  s.step();
  CHECK(dev.now() - t0 >= 50'000);
}

TEST_CASE("honoring skips never makes replay slower")
{
  RecordConfig cfg;
  cfg.delays = {50'000, 20'000, 0};
  for (const WorkloadGraph& g : workloads::builtin())
  {
    RecordResult rr = support::recordDefault(g, cfg);
    ReplayConfig noSkip;
    noSkip.honorSkips = false;
    ReplayResult a = support::replayOnce(rr.recordings[0], rr.traces[0].input, 5);
    ReplayResult b = support::replayOnce(rr.recordings[0], rr.traces[0].input, 5, noSkip);
    REQUIRE(a.ok());
    REQUIRE(b.ok());
    CHECK(a.durationNs < b.durationNs);
    CHECK(double(b.durationNs) >= 1.1 * double(a.durationNs));
  }
}

TEST_CASE("transient stall recovers on the first attempt")
{
  RecordResult rr = support::recordDefault(workloads::vecAdd(64));
  const Recording& rec = rr.recordings[0];
  FaultPlan plan;
  plan.kind = FaultKind::Stall;
  ReplayResult r = support::replayOnce(rec, rr.traces[0].input, 1, {}, skuA(), makeFaultHook(rec, plan));
  CHECK(r.ok());
  CHECK(r.recoveryAttempts == 1);
  REQUIRE(r.divergences.size() == 1);
  CHECK((r.divergences[0].kind == DivergenceKind::Timeout));
  CHECK(r.outputs[0] == rr.traces[0].output);
}

TEST_CASE("one-off CORRUPT_PTE recovers via re-execution")
{
  RecordResult rr = support::recordDefault(workloads::vecAdd(64));
  const Recording& rec = rr.recordings[0];
  FaultPlan plan;
  ReplayResult r = support::replayOnce(rec, rr.traces[0].input, 1, {}, skuA(), makeFaultHook(rec, plan));
  CHECK(r.ok());
  REQUIRE_FALSE(r.divergences.empty());
  CHECK((r.divergences[0].kind == DivergenceKind::MmuFault));
  CHECK(r.divergences[0].va / kPageSize == corruptTarget(rec) / kPageSize);
}

TEST_CASE("persistent CORRUPT_PTE ends in a final report naming the mapping")
{
  RecordResult rr = support::recordDefault(workloads::vecAdd(64));
  const Recording& rec = rr.recordings[0];
  FaultPlan plan;
  plan.persistent = true;
  ReplayResult r = support::replayOnce(rec, rr.traces[0].input, 1, {}, skuA(), makeFaultHook(rec, plan));
  CHECK_FALSE(r.ok());
  CHECK(r.recoveryAttempts == 4);
  REQUIRE(r.finalReport);
  CHECK(r.finalReport->label == rec.header.label);
  bool namesMap = false;
  for (const auto& [idx, what] : r.finalReport->related)
    namesMap |= rec.actions.at(idx).kind() == ActionKind::MapGpuMem;
  CHECK(namesMap);
  CHECK(r.finalReport->toText().find(rec.header.label) != std::string::npos);
}

TEST_CASE("delay multipliers double over the window on later attempts")
{
  RecordResult rr = support::recordDefault(workloads::vecAdd(64));
  const Recording& rec = rr.recordings[0];
  FaultPlan plan;
  plan.persistent = true;
  Device dev(skuA(), 1);
  ReplaySession s(dev);
  s.load(rec);
  s.setHook(makeFaultHook(rec, plan));
  ReplayResult r = s.replay({rr.traces[0].input});
  REQUIRE_FALSE(r.ok());
  size_t fail = r.divergences.back().actionIndex;
  const auto& m = s.delayMultipliers();
  for (size_t j = 0; j < m.size(); ++j)
  {
    bool inWindow = j < fail && j + 8 >= fail;
    CHECK(m[j] == doctest::Approx(inWindow ? 8.0 : 1.0));
  }
}

TEST_CASE("checkpoint, two more jobs, restore and rerun")
{
  WorkloadGraph g = workloads::mixed();
  RecordResult rr = support::recordDefault(g);
  const Recording& rec = rr.recordings[0];
  Device dev(skuA(), 3);
  ReplaySession s(dev);
  s.load(rec);
  s.begin({rr.traces[0].input});
  size_t boundary = nthWaitIrq(rec, 1) + 1;
  while (s.cursor() < boundary)
    REQUIRE_FALSE(s.step().divergence);
  Checkpoint cp = s.checkpoint();
  CHECK(cp.actionIndex == boundary);
  auto first = runToEnd(s);
  s.restore(cp);
  CHECK(s.cursor() == boundary);
  auto second = runToEnd(s);
  CHECK(first == second);
  CHECK(first[0] == oracle::eval(g, rr.traces[0].input));
}

TEST_CASE("restore is unavailable with checkpointing off or across loads")
{
  Recording rec = support::recordOne(workloads::vecAdd(16));
  Device dev(skuA(), 1);
  ReplaySession s(dev);
  s.load(rec);
  CHECK_THROWS_AS(s.latestCheckpoint(), ReplayError);
  CHECK_THROWS_AS(s.restoreLatest(), ReplayError);
  Checkpoint cp = s.checkpoint();
  s.load(rec);
  CHECK_THROWS_AS(s.restore(cp), ReplayError);
}

TEST_CASE("per-job checkpointing costs at least 2x on fifty jobs")
{
  RecordResult rr = support::recordDefault(workloads::fiftyJobs());
  ReplayConfig ck;
  ck.checkpointEveryJobs = 1;
  ReplayResult plain = support::replayOnce(rr.recordings[0], rr.traces[0].input);
  ReplayResult with = support::replayOnce(rr.recordings[0], rr.traces[0].input, 1, ck);
  REQUIRE(plain.ok());
  REQUIRE(with.ok());
  CHECK(with.outputs == plain.outputs);
  CHECK(with.checkpointsTaken == 50);
  CHECK(with.durationNs >= 2 * plain.durationNs);
}

TEST_CASE("preempt during a long chain acks within 1 ms and leaves boot state")
{
  RecordResult rr = support::recordDefault(WorkloadGraph::load(GPR_SOURCE_DIR "/workloads/underclock.txt"));
  const Recording& rec = rr.recordings[0];
  size_t wait = nthWaitIrq(rec, 1);
  Device dev(skuA(), 2);
  ReplaySession s(dev);
  s.load(rec);
  s.setHook([&](Device& d, size_t i, uint32_t, HookPhase ph) {
    if (i == wait && ph == HookPhase::BeforeAction)
      s.requestPreempt(d.now());
  });
  ReplayResult r = s.replay({rr.traces[0].input});
  REQUIRE(r.status == ReplayStatus::Preempted);
  REQUIRE(r.preemptAck);
  CHECK(r.preemptAck->delayNs() < 1'000'000);

  Device boot(skuA(), 2);
  {
    ReplaySession b(boot);
  }
  CHECK(dev.state().controlEquals(boot.state()));
  CHECK(dev.state().memory == boot.state().memory);

  s.setHook({});
  ReplayResult again = s.resume();
  REQUIRE(again.ok());
  CHECK(again.outputs[0] == rr.traces[0].output);
}

TEST_CASE("preempt requested from another thread is honored")
{
  RecordResult rr = support::recordDefault(workloads::vecAdd(64));
  Device dev(skuA(), 2);
  ReplaySession s(dev);
  s.load(rr.recordings[0]);
  std::thread([&] { s.requestPreempt(0); }).join();
  ReplayResult r = s.replay({rr.traces[0].input});
  CHECK(r.status == ReplayStatus::Preempted);
  ReplayResult again = s.resume();
  REQUIRE(again.ok());
  CHECK(again.outputs[0] == rr.traces[0].output);
}

TEST_CASE("checkpoint at job 16 of 20, resume replays jobs 17 to 20 only")
{
  WorkloadGraph g = scaleChain(19);
  RecordResult rr = support::recordDefault(g);
  const Recording& rec = rr.recordings[0];
  REQUIRE(rec.jobCount() == 20);
  ReplayConfig cfg;
  cfg.checkpointEveryJobs = 16;
  size_t kick17 = firstJobStart(rec, nthWaitIrq(rec, 16));
  REQUIRE(kick17 != SIZE_MAX);
  Device dev(skuA(), 6);
  ReplaySession s(dev, cfg);
  s.load(rec);
  s.setHook([&](Device& d, size_t i, uint32_t, HookPhase ph) {
    if (i == kick17 && ph == HookPhase::AfterExecute)
      s.requestPreempt(d.now());
  });
  ReplayResult r = s.replay({rr.traces[0].input});
  REQUIRE(r.status == ReplayStatus::Preempted);
  CHECK(r.jobsStarted == 17);
  CHECK(r.checkpointsTaken == 1);
  CHECK(s.latestCheckpoint().jobsCompleted == 16);
  s.setHook({});
  ReplayResult again = s.resume();
  REQUIRE(again.ok());
  CHECK(again.jobsStarted == 4);
  CHECK(again.outputs[0] == oracle::eval(g, rr.traces[0].input));
}

TEST_CASE("forced load of a fabricated recording is still bounds-checked")
{
  Recording rec = support::recordOne(workloads::vecAdd(16));
  rec.actions.insert(rec.actions.begin() + 1, ReplayAction{RegWrite{"DBG_BACKDOOR", 1}});
  Device dev(skuA(), 1);
  {
    ReplaySession s(dev);
    CHECK_THROWS_AS(s.load(rec), ReplayError);
  }
  ReplayConfig force;
  force.force = true;
  ReplaySession s(dev, force);
  s.load(rec);
  ReplayResult r = s.replay({Bytes(rec.inputs()[0].len)});
  CHECK_FALSE(r.ok());
  REQUIRE_FALSE(r.divergences.empty());
  CHECK((r.divergences[0].kind == DivergenceKind::IllegalAccess));
  CHECK(r.divergences[0].actionIndex == 1);
}

TEST_CASE("per-layer sequence wires outputs into inputs")
{
  WorkloadGraph g = workloads::mixed();
  RecordHarness h;
  h.granularity = Granularity::PerLayer;
  RecordResult rr = support::recordDefault(g, {}, h);
  std::mt19937_64 rng(4);
  Bytes in = support::randomInput(g, rng);
  Device dev(skuA(), 9);
  ReplayResult r = replaySequence(dev, {}, rr.recordings, {in});
  REQUIRE(r.ok());
  CHECK(r.outputs.back() == oracle::eval(g, in));
}

TEST_CASE("report text")
{
  DivergenceReport d;
  d.actionIndex = 12;
  d.kind = DivergenceKind::ValueMismatch;
  d.reg = "GPU_ID";
  d.expected = 0x0B71;
  d.got = 0x0B31;
  std::string t = d.toText();
  CHECK(t.find("12") != std::string::npos);
  CHECK(t.find("GPU_ID") != std::string::npos);
  CHECK(toString(DivergenceKind::Timeout) == "TIMEOUT");
}
