#include "gpr/recorder.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace gpr
{

  // ---------------------------------------------------------------------
  // Harness

  Bytes RecordHarness::magic(uint32_t trial, size_t len) const
  {
    if (magicSource)
    {
      Bytes b = magicSource(trial, len);
      if (b.size() != len)
        throw Error("magic source returned " + std::to_string(b.size()) + " bytes, expected " + std::to_string(len));
      return b;
    }
    std::mt19937_64 rng(magicSeed * 0x9e3779b97f4a7c15ull + trial);
    Bytes b(len);
    for (size_t i = 0; i < len; i += 8)
    {
      uint64_t v = rng();
      for (size_t j = 0; j < 8 && i + j < len; ++j)
        b[i + j] = uint8_t(v >> (8 * j));
    }
    return b;
  }

  RecordHarness RecordHarness::parse(std::string_view text, const std::string& baseDir)
  {
    RecordHarness h;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineNo = 0;
    while (std::getline(in, line))
    {
      ++lineNo;
      if (auto p = line.find('#'); p != std::string::npos)
        line.resize(p);
      std::istringstream ls(line);
      std::string kw;
      if (!(ls >> kw))
        continue;
      auto bad = [&](const std::string& why) {
        return Error("harness line " + std::to_string(lineNo) + ": " + why);
      };
      if (kw == "input")
      {
        int idx = -1;
        std::string mode, file;
        if (!(ls >> idx >> mode))
          throw bad("expected: input <index> by_value|by_address|both [file]");
        if (idx != 0)
          throw bad("only input 0 exists");
        if (mode == "by_value") h.inputMode = IoMode::ByValue;
        else if (mode == "by_address") h.inputMode = IoMode::ByAddress;
        else if (mode == "both") h.inputMode = IoMode::Both;
        else throw bad("bad mode " + mode);
        if (ls >> file)
        {
          std::filesystem::path p(file);
          if (p.is_relative())
            p = std::filesystem::path(baseDir) / p;
          h.inputValue = readFile(p.string());
        }
      }
      else if (kw == "magic_seed")
      {
        if (!(ls >> h.magicSeed))
          throw bad("magic_seed needs an integer");
      }
      else if (kw == "trials")
      {
        if (!(ls >> h.maxTrials) || h.maxTrials < 1)
          throw bad("trials needs a positive integer");
      }
      else if (kw == "granularity")
      {
        std::string g;
        ls >> g;
        if (g == "monolithic") h.granularity = Granularity::Monolithic;
        else if (g == "per_layer") h.granularity = Granularity::PerLayer;
        else throw bad("bad granularity " + g);
      }
      else if (kw == "dump_scratch")
      {
        std::string v;
        ls >> v;
        if (v != "on" && v != "off")
          throw bad("dump_scratch takes on|off");
        h.dumpScratch = v == "on";
      }
      else
        throw bad("unknown keyword " + kw);
    }
    return h;
  }

  RecordHarness RecordHarness::load(const std::string& path)
  {
    Bytes b = readFile(path);
    auto dir = std::filesystem::path(path).parent_path().string();
    return parse({reinterpret_cast<const char*>(b.data()), b.size()}, dir.empty() ? "." : dir);
  }

  size_t countSkipped(const Recording& rec)
  {
    return size_t(std::count_if(rec.actions.begin(), rec.actions.end(),
                                [](const ReplayAction& a) { return a.minIntervalNs == 0; }));
  }

  // ---------------------------------------------------------------------
  // One instrumented run

  namespace
  {
    struct RawDump
    {
      uint32_t va = 0;
      DumpOrigin origin = DumpOrigin::MappedFallback;
      Bytes raw;
    };

    struct Timed
    {
      ReplayAction action;
      uint64_t start = 0;
    };

    class RunRecorder : public DriverProbe
    {
    public:
      RunRecorder(bool dumpScratch, double overheadNsPerByte)
          : dumpScratch_(dumpScratch), overhead_(overheadNsPerByte) {}

      void onRegWrite(const RegisterEntry& e, uint32_t value, uint64_t t) override
      {
        push(RegWrite{e.name, value}, t);
      }

      void onRegRead(const RegisterEntry& e, uint32_t value, uint64_t t, std::optional<PollSite> poll) override
      {
        if (poll)
        {
          if (!pollStart_)
            pollStart_ = t;
          lastRead_[e.name] = value;
          return;
        }
        RegRead r{e.name, value, StateClass::StateChanging};
        if (e.stateClass == StateClass::NondetRead)
        {
          r.cls = StateClass::NondetRead;
          r.expect = 0;
        }
        else
        {
          auto it = lastRead_.find(e.name);
          r.cls = (it != lastRead_.end() && it->second == value) ? StateClass::PureRead : StateClass::StateChanging;
          lastRead_[e.name] = value;
        }
        push(std::move(r), t);
      }

      void onPollEnd(const RegisterEntry& e, uint32_t mask, uint32_t finalMasked, uint32_t polls) override
      {
        push(RegReadWait{e.name, mask, finalMasked, polls}, pollStart_.value_or(0));
        pollStart_.reset();
      }

      void onMap(const Allocation& a, uint8_t perm, uint64_t t) override
      {
        push(MapGpuMem{a.va, a.mappedLen(), perm}, t);
      }

      void onUnmap(const Allocation& a, uint64_t t) override
      {
        push(UnmapGpuMem{a.va, a.mappedLen()}, t);
      }

      void onIrq(uint32_t rawstat, uint64_t t) override
      {
        push(WaitIrq{rawstat}, t);
      }

      void beforeKick(Driver& drv, uint64_t t) override
      {
        uint64_t bytes = 0;
        for (const Allocation& a : drv.allocations())
        {
          if (!a.committed || a.freed)
            continue;
          bool exec = a.flags & kGpuExec;
          if (!exec && (a.flags & kInternalScratch) && !dumpScratch_)
            continue;
          Bytes content = drv.cpuRead(a.va, a.mappedLen());
          // Runs of pages whose content changed since their last dump.
          uint32_t runStart = 0;
          bool inRun = false;
          auto flush = [&](uint32_t endOff) {
            if (!inRun)
              return;
            RawDump d{a.va + runStart, exec ? DumpOrigin::ExecPage : DumpOrigin::MappedFallback,
                      Bytes(content.begin() + runStart, content.begin() + endOff)};
            bytes += d.raw.size();
            push(LoadMemDump{uint32_t(dumps_.size()), d.va}, t);
            dumps_.push_back(std::move(d));
            inRun = false;
          };
          for (uint32_t off = 0; off < a.mappedLen(); off += kPageSize)
          {
            Digest h = sha256({content.data() + off, kPageSize});
            uint32_t pageVa = a.va + off;
            auto it = pageHash_.find(pageVa);
            bool changed = it == pageHash_.end() || it->second != h;
            if (exec)
              execHashes_[pageVa] = h;
            if (changed)
            {
              pageHash_[pageVa] = h;
              if (!inRun)
              {
                runStart = off;
                inRun = true;
              }
            }
            else
              flush(off);
          }
          flush(a.mappedLen());
        }
        drv.sleep(uint64_t(double(bytes) * overhead_));
      }

      std::vector<Timed> actions;
      std::vector<RawDump> dumps_;
      std::map<uint32_t, Digest> execHashes_;

    private:
      template <typename T>
      void push(T body, uint64_t t)
      {
        actions.push_back({ReplayAction{ActionBody(std::move(body))}, t});
      }

      bool dumpScratch_;
      double overhead_;
      std::map<std::string, uint32_t> lastRead_;
      std::optional<uint64_t> pollStart_;
      std::map<uint32_t, Digest> pageHash_;
    };

    struct TrialRun
    {
      std::vector<Timed> actions;
      std::vector<RawDump> dumps;
      std::map<uint32_t, Digest> execHashes;
      std::vector<Allocation> allocations;
      std::vector<BusyInterval> busy;
      std::vector<uint64_t> deviceEvents;
      uint64_t endNs = 0;
      Bytes input;
      Bytes output;
      /// Live mapped memory at the end of the run: (va, bytes).
      std::vector<std::pair<uint32_t, Bytes>> live;
    };

    TrialRun runOnce(const WorkloadGraph& g, const Bytes& input, const RecordHarness& h, const RecordConfig& c)
    {
      Device dev(c.sku, c.envSeed, c.timing);
      dev.setClockDiv(c.clockDiv);
      RunRecorder rec(h.dumpScratch, c.overheadNsPerByte);
      Runtime rt(dev, &rec, c.delays, c.stackSeed);
      TrialRun out;
      out.input = input;
      out.output = rt.run(g, input);
      out.endNs = dev.now();
      out.actions = std::move(rec.actions);
      out.dumps = std::move(rec.dumps_);
      out.execHashes = std::move(rec.execHashes_);
      out.allocations = rt.driver().allocations();
      out.busy = rt.driver().busyIntervals();
      out.deviceEvents = dev.autonomousEvents();
      for (const auto& a : out.allocations)
        if (a.committed && !a.freed)
          out.live.emplace_back(a.va, rt.driver().cpuRead(a.va, a.mappedLen()));
      return out;
    }

    void findAll(std::set<uint32_t>& out, uint32_t baseVa, const Bytes& hay, const Bytes& needle)
    {
      if (needle.empty() || hay.size() < needle.size())
        return;
      for (size_t off = 0; off + needle.size() <= hay.size(); off += 4)
        if (std::memcmp(hay.data() + off, needle.data(), needle.size()) == 0)
          out.insert(baseVa + uint32_t(off));
    }

    std::set<uint32_t> intersect(const std::optional<std::set<uint32_t>>& prev, const std::set<uint32_t>& now)
    {
      if (!prev)
        return now;
      std::set<uint32_t> r;
      std::set_intersection(prev->begin(), prev->end(), now.begin(), now.end(), std::inserter(r, r.begin()));
      return r;
    }

    std::string listVas(const std::set<uint32_t>& s)
    {
      std::string out;
      size_t n = 0;
      for (uint32_t v : s)
      {
        if (n++ == 8)
        {
          out += " ...";
          break;
        }
        out += " " + hex32(v);
      }
      return out;
    }

    bool overlaps(uint32_t a, uint32_t alen, uint32_t b, uint32_t blen)
    {
      return uint64_t(a) < uint64_t(b) + blen && uint64_t(b) < uint64_t(a) + alen;
    }

    /// Drop dumped pages that overlap by-address-only regions, then compress,
    /// number dumps in action order and classify intervals.
    void finalize(const TrialRun& run, const std::vector<IoDescriptor>& io, Recording& rec, RecordTrace& trace)
    {
      std::vector<Timed> acts;
      std::vector<Bytes> raws;
      for (const Timed& t : run.actions)
      {
        const auto* l = t.action.as<LoadMemDump>();
        if (!l)
        {
          acts.push_back(t);
          continue;
        }
        const RawDump& d = run.dumps[l->dumpId];
        auto trimmed = [&](uint32_t pageVa) {
          for (const auto& r : io)
            if ((r.role == IoRole::Output || r.mode == IoMode::ByAddress) && overlaps(pageVa, kPageSize, r.va, r.len))
              return true;
          return false;
        };
        uint32_t len = uint32_t(d.raw.size());
        uint32_t off = 0;
        while (off < len)
        {
          if (trimmed(d.va + off))
          {
            off += kPageSize;
            continue;
          }
          uint32_t end = off;
          while (end < len && !trimmed(d.va + end))
            end += kPageSize;
          uint32_t id = uint32_t(rec.dumps.size());
          Bytes raw(d.raw.begin() + off, d.raw.begin() + end);
          rec.dumps.push_back({id, d.va + off, uint32_t(raw.size()), d.origin, deflateRaw(raw)});
          raws.push_back(std::move(raw));
          acts.push_back({ReplayAction{LoadMemDump{id, d.va + off}}, t.start});
          off = end;
        }
      }

      trace.actionStartNs.clear();
      for (size_t i = 0; i < acts.size(); ++i)
      {
        uint64_t s = acts[i].start;
        uint64_t e = i + 1 < acts.size() ? acts[i + 1].start : run.endNs;
        ReplayAction a = acts[i].action;
        a.observedIntervalNs = e - s;
        bool busy = std::any_of(run.busy.begin(), run.busy.end(),
                                [&](const BusyInterval& b) { return s < b.end && e > b.begin; });
        a.minIntervalNs = busy ? a.observedIntervalNs : 0;
        rec.actions.push_back(std::move(a));
        trace.actionStartNs.push_back(s);
      }
      rec.io = io;
      trace.rawDumps = std::move(raws);
      trace.allocations = run.allocations;
      trace.busy = run.busy;
      trace.deviceEvents = run.deviceEvents;
      trace.endNs = run.endNs;
      trace.execPageHashes = run.execHashes;
      trace.input = run.input;
      trace.output = run.output;
    }

    std::pair<Recording, RecordTrace> recordGraph(const WorkloadGraph& g, const RecordHarness& h, const RecordConfig& c,
                                                  Granularity gran)
    {
      g.validate();
      const size_t inLen = g.inputBytes();
      const bool wantInput = h.inputMode != IoMode::ByValue;
      std::optional<std::set<uint32_t>> inCand, outCand;
      std::optional<TrialRun> last;
      RecordTrace trace;
      uint32_t trial = 0;
      for (; trial < h.maxTrials; ++trial)
      {
        Bytes magic = h.magic(trial, inLen);
        TrialRun run = runOnce(g, magic, h, c);

        std::set<uint32_t> in;
        if (wantInput)
        {
          for (const auto& d : run.dumps)
            findAll(in, d.va, d.raw, magic);
          if (in.empty())
            for (const auto& [va, bytes] : run.live)
              findAll(in, va, bytes, magic);
          inCand = intersect(inCand, in);
          if (inCand->empty())
            throw IoDiscoveryError(g.label + ": input magic not found intact in GPU memory");
        }
        std::set<uint32_t> out;
        for (const auto& [va, bytes] : run.live)
          findAll(out, va, bytes, run.output);
        if (inCand)
          for (auto it = out.begin(); it != out.end();)
          {
            bool clash = std::any_of(inCand->begin(), inCand->end(), [&](uint32_t iv) {
              return overlaps(*it, uint32_t(run.output.size()), iv, uint32_t(inLen));
            });
            it = clash ? out.erase(it) : std::next(it);
          }
        outCand = intersect(outCand, out);
        if (outCand->empty())
          throw IoDiscoveryError(g.label + ": stack output not found in final GPU memory");
        trace.candidates.emplace_back(inCand ? inCand->size() : 0, outCand->size());
        last = std::move(run);
        if ((!wantInput || inCand->size() == 1) && outCand->size() == 1)
          break;
      }
      if (trial == h.maxTrials)
      {
        if (wantInput && inCand->size() != 1)
          throw IoDiscoveryError(g.label + ": input region ambiguous after " + std::to_string(h.maxTrials) +
                                 " trials, candidates" + listVas(*inCand));
        throw IoDiscoveryError(g.label + ": output region ambiguous after " + std::to_string(h.maxTrials) +
                               " trials, candidates" + listVas(*outCand));
      }
      trace.trials = trial + 1;

      if (h.inputValue && h.inputMode != IoMode::ByAddress)
      {
        if (h.inputValue->size() != inLen)
          throw Error("harness input value is " + std::to_string(h.inputValue->size()) + " bytes, expected " +
                      std::to_string(inLen));
        last = runOnce(g, *h.inputValue, h, c);
      }

      std::vector<IoDescriptor> io;
      if (wantInput)
        io.push_back({IoRole::Input, *inCand->begin(), uint32_t(inLen), h.inputMode});
      io.push_back({IoRole::Output, *outCand->begin(), uint32_t(g.outputBytes()), IoMode::ByAddress});

      Recording rec;
      rec.header.granularity = gran;
      rec.header.skuId = c.sku.skuId;
      rec.header.registerMapHash = defaultRegisterMap().hash();
      rec.header.createdUnix = c.createdUnix;
      rec.header.label = g.label.substr(0, 64);
      finalize(*last, io, rec, trace);
      return {std::move(rec), std::move(trace)};
    }
  }

  RecordResult record(const WorkloadGraph& graph, const RecordHarness& harness, const RecordConfig& config)
  {
    graph.validate();
    RecordResult out;
    if (harness.granularity == Granularity::Monolithic)
    {
      auto [rec, trace] = recordGraph(graph, harness, config, Granularity::Monolithic);
      out.recordings.push_back(std::move(rec));
      out.traces.push_back(std::move(trace));
      return out;
    }
    std::string base = graph.label.empty() ? "workload" : graph.label;
    for (size_t k = 0; k < graph.layers.size(); ++k)
    {
      WorkloadGraph g{base + "/L" + std::to_string(k), {graph.layers[k]}};
      RecordHarness h = harness;
      if (k > 0)
      {
        h.inputMode = IoMode::ByAddress;
        h.inputValue.reset();
      }
      auto [rec, trace] = recordGraph(g, h, config, Granularity::PerLayer);
      out.recordings.push_back(std::move(rec));
      out.traces.push_back(std::move(trace));
    }
    return out;
  }

}
