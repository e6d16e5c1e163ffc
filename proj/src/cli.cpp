#include "gpr/cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <iomanip>
#include <sstream>

#include "gpr/patcher.hpp"
#include "gpr/recfmt.hpp"
#include "gpr/recorder.hpp"
#include "gpr/replayer.hpp"
#include "gpr/verifier.hpp"

namespace gpr::cli
{

  namespace
  {

    class UsageError : public Error
    {
    public:
      using Error::Error;
    };

    SkuProfile parseSku(const std::string& s)
    {
      auto p = skuByName(s);
      if (!p)
        throw UsageError("unknown SKU " + s + " (expected A or B)");
      return *p;
    }

    /// "jit,mgmt,jitter" in microseconds.
    StackDelays parseDelays(const std::string& s)
    {
      std::vector<double> v;
      std::stringstream ss(s);
      std::string tok;
      while (std::getline(ss, tok, ','))
      {
        try
        {
          size_t used = 0;
          double d = std::stod(tok, &used);
          if (used != tok.size() || d < 0)
            throw UsageError("");
          v.push_back(d);
        }
        catch (const std::exception&)
        {
          throw UsageError("--delays expects jit,mgmt,jitter in microseconds");
        }
      }
      if (v.size() != 3)
        throw UsageError("--delays expects jit,mgmt,jitter in microseconds");
      auto ns = [](double us) { return uint64_t(std::llround(us * 1000.0)); };
      return StackDelays{ns(v[0]), ns(v[1]), ns(v[2])};
    }

    FaultPlan parseFault(const std::string& s)
    {
      FaultPlan p;
      std::string kind = s, arg;
      if (auto c = s.find(':'); c != std::string::npos)
      {
        kind = s.substr(0, c);
        arg = s.substr(c + 1);
      }
      auto number = [&](const std::string& what) {
        try
        {
          size_t used = 0;
          uint64_t v = std::stoull(arg, &used, 0);
          if (used != arg.size())
            throw UsageError("");
          return v;
        }
        catch (const std::exception&)
        {
          throw UsageError("bad " + what + " in --inject-fault " + s);
        }
      };
      if (kind == "offline_cores")
      {
        p.kind = FaultKind::OfflineCores;
        if (!arg.empty())
          p.coreMask = uint32_t(number("core mask"));
      }
      else if (kind == "corrupt_pte")
      {
        p.kind = FaultKind::CorruptPte;
        if (arg == "persistent")
          p.persistent = true;
        else if (!arg.empty() && arg != "once")
          throw UsageError("corrupt_pte takes once or persistent");
      }
      else if (kind == "stall")
      {
        p.kind = FaultKind::Stall;
        if (!arg.empty())
          p.stallNs = number("stall duration");
      }
      else
        throw UsageError("unknown fault kind " + kind + " (offline_cores, corrupt_pte, stall)");
      return p;
    }

    Recording loadRecording(const std::string& path)
    {
      return decode(readFile(path));
    }

    std::string layerPath(const std::string& out, size_t k)
    {
      std::filesystem::path p(out);
      std::string ext = p.has_extension() ? p.extension().string() : std::string(".gpr");
      std::filesystem::path q = p.parent_path() / (p.stem().string() + "_layer" + std::to_string(k) + ext);
      return q.string();
    }

    std::vector<Bytes> splitInputs(const Bytes& blob, const std::vector<IoDescriptor>& ins, bool given)
    {
      std::vector<Bytes> out;
      if (!given)
        return out;
      size_t total = 0;
      for (const auto& d : ins)
        total += d.len;
      if (blob.size() != total)
        throw UsageError("input file is " + std::to_string(blob.size()) + " bytes, recording expects " +
                         std::to_string(total));
      size_t off = 0;
      for (const auto& d : ins)
      {
        out.emplace_back(blob.begin() + off, blob.begin() + off + d.len);
        off += d.len;
      }
      return out;
    }

    Bytes concat(const std::vector<Bytes>& parts)
    {
      Bytes b;
      for (const auto& p : parts)
        b.insert(b.end(), p.begin(), p.end());
      return b;
    }

    uint64_t rawFileSize(const Recording& rec)
    {
      uint64_t n = encode(rec).size();
      for (const auto& d : rec.dumps)
        n = n - d.payload.size() + d.rawLen;
      return n;
    }

    std::string ratio(uint64_t a, uint64_t b)
    {
      std::ostringstream os;
      os << std::fixed << std::setprecision(3) << (b ? double(a) / double(b) : 0.0);
      return os.str();
    }

    void printInspect(const Recording& rec, std::ostream& out)
    {
      const auto& h = rec.header;
      out << "label: " << h.label << "\n";
      out << "version: " << h.version << "\n";
      out << "granularity: " << toString(h.granularity) << "\n";
      out << "sku_id: " << hex32(h.skuId) << "\n";
      out << "register_map_hash: " << hexDigest(h.registerMapHash) << "\n";
      out << "created_unix: " << h.createdUnix << "\n";
      out << "actions: " << rec.actions.size() << "\n";
      for (size_t i = 0; i < rec.actions.size(); ++i)
      {
        const auto& a = rec.actions[i];
        out << "  " << std::setw(5) << i << "  " << std::left << std::setw(48) << describe(a) << std::right
            << (a.minIntervalNs ? " keep " : " skip ") << a.minIntervalNs << "/" << a.observedIntervalNs << " ns\n";
      }
      out << "dumps: " << rec.dumps.size() << "\n";
      for (const auto& d : rec.dumps)
        out << "  #" << d.id << " va " << hex32(d.va) << " raw " << d.rawLen << " compressed " << d.payload.size()
            << " " << toString(d.origin) << "\n";
      out << "io: " << rec.io.size() << "\n";
      for (const auto& d : rec.io)
        out << "  " << toString(d.role) << " va " << hex32(d.va) << " len " << d.len << " " << toString(d.mode)
            << "\n";
    }

    struct Options
    {
      // record
      std::string workload, output, sku = "A", granularity, harness, delays;
      uint64_t seed = 1;
      // replay
      std::vector<std::string> recordings;
      std::string inputFile, outputFile, fault;
      bool noSkip = false, force = false;
      uint32_t checkpointEvery = 0, clockDiv = 1;
      // verify
      std::string recFile, mapFile;
      uint64_t memBudget = kDefaultMemBudget;
      bool json = false;
      // patch
      std::string from, to;
      bool allowFewerCores = false;
    };

    RecordConfig recordConfig(const Options& o)
    {
      RecordConfig c;
      c.sku = parseSku(o.sku);
      c.envSeed = o.seed;
      c.stackSeed = o.seed;
      if (!o.delays.empty())
        c.delays = parseDelays(o.delays);
      return c;
    }

    RecordHarness recordHarness(const Options& o)
    {
      RecordHarness h = o.harness.empty() ? RecordHarness{} : RecordHarness::load(o.harness);
      if (o.granularity == "monolithic")
        h.granularity = Granularity::Monolithic;
      else if (o.granularity == "per_layer")
        h.granularity = Granularity::PerLayer;
      else if (!o.granularity.empty())
        throw UsageError("--granularity takes monolithic or per_layer");
      return h;
    }

    int runRecord(const Options& o, std::ostream& out)
    {
      WorkloadGraph g = WorkloadGraph::load(o.workload);
      RecordHarness h = recordHarness(o);
      RecordResult r = record(g, h, recordConfig(o));
      for (size_t k = 0; k < r.recordings.size(); ++k)
      {
        const Recording& rec = r.recordings[k];
        std::string path = r.recordings.size() == 1 ? o.output : layerPath(o.output, k);
        Bytes file = encode(rec);
        writeFile(path, file);
        out << path << ": " << rec.actions.size() << " actions, " << countSkipped(rec) << " skipped, "
            << rec.dumps.size() << " dumps, " << rec.jobCount() << " jobs, " << file.size() << " bytes, "
            << r.traces[k].trials << " trials\n";
      }
      return kExitOk;
    }

    int runReplay(const Options& o, std::ostream& out, std::ostream& err)
    {
      std::vector<Recording> recs;
      for (const auto& p : o.recordings)
        recs.push_back(loadRecording(p));
      SkuProfile sku = o.sku.empty() ? skuById(recs.front().header.skuId).value_or(skuA()) : parseSku(o.sku);
      Device dev(sku, o.seed);
      if (o.clockDiv != 1)
        dev.setClockDiv(o.clockDiv);

      ReplayConfig cfg;
      cfg.honorSkips = !o.noSkip;
      cfg.checkpointEveryJobs = o.checkpointEvery;
      cfg.force = o.force;

      Bytes blob = o.inputFile.empty() ? Bytes{} : readFile(o.inputFile);
      std::vector<Bytes> inputs = splitInputs(blob, recs.front().inputs(), !o.inputFile.empty());

      std::vector<StepHook> hooks;
      if (!o.fault.empty())
        hooks.push_back(makeFaultHook(recs.front(), parseFault(o.fault)));

      ReplayResult r = replaySequence(dev, cfg, recs, inputs, hooks);
      for (const auto& d : r.divergences)
        err << "divergence: " << d.toText() << "\n";
      if (!r.ok())
      {
        if (r.finalReport)
          err << r.finalReport->toText();
        else
          err << "replay did not complete\n";
        return kExitFailure;
      }
      if (r.recoveryAttempts)
        err << "recovered after " << r.recoveryAttempts << " attempt(s)\n";
      if (!o.outputFile.empty())
        writeFile(o.outputFile, concat(r.outputs));
      out << "replay ok: " << recs.size() << " recording(s), " << r.jobsStarted << " jobs, vclock " << r.durationNs
          << " ns, recovery attempts " << r.recoveryAttempts << ", checkpoints " << r.checkpointsTaken << "\n";
      return kExitOk;
    }

    int runVerify(const Options& o, std::ostream& out, std::ostream& err)
    {
      RegisterMap map = o.mapFile.empty() ? defaultRegisterMap() : RegisterMap::parse([&] {
        Bytes b = readFile(o.mapFile);
        return std::string(b.begin(), b.end());
      }());
      VerificationReport rep = verifyBytes(readFile(o.recFile), map, o.memBudget);
      if (o.json)
        out << rep.toJson() << "\n";
      else
        (rep.ok ? out : err) << rep.toText();
      return rep.ok ? kExitOk : kExitFailure;
    }

    int runInspect(const Options& o, std::ostream& out)
    {
      printInspect(loadRecording(o.recFile), out);
      return kExitOk;
    }

    int runPatch(const Options& o, std::ostream& out)
    {
      Recording rec = loadRecording(o.recFile);
      PatchResult p = patch(rec, parseSku(o.from), parseSku(o.to), PatchOptions{o.allowFewerCores});
      writeFile(o.output, encode(p.rec));
      out << o.output << ": " << p.registerEdits << " register edits, " << p.pteEdits << " PTE edits\n";
      return kExitOk;
    }

    int runBench(const Options& o, std::ostream& out, std::ostream& err)
    {
      WorkloadGraph g = WorkloadGraph::load(o.workload);
      RecordConfig rc = recordConfig(o);
      RecordResult r = record(g, recordHarness(o), rc);
      const auto& recs = r.recordings;

      size_t actions = 0, skipped = 0;
      uint64_t raw = 0, packed = 0;
      for (const auto& rec : recs)
      {
        actions += rec.actions.size();
        skipped += countSkipped(rec);
        raw += rawFileSize(rec);
        packed += encode(rec).size();
      }
      std::vector<Bytes> inputs;
      if (!recs.front().inputs().empty())
        inputs.push_back(r.traces.front().input);

      auto run = [&](bool skips, uint32_t every) {
        Device dev(rc.sku, o.seed);
        ReplayConfig cfg;
        cfg.honorSkips = skips;
        cfg.checkpointEveryJobs = every;
        ReplayResult res = replaySequence(dev, cfg, recs, inputs);
        if (!res.ok())
          throw Error("bench replay failed" + (res.finalReport ? ": " + res.finalReport->toText() : std::string()));
        return res.durationNs;
      };
      uint32_t every = o.checkpointEvery ? o.checkpointEvery : 1;
      uint64_t withSkip = run(true, 0);
      uint64_t noSkip = run(false, 0);
      uint64_t withCkpt = run(true, every);
      (void)err;
      out << "workload: " << (g.label.empty() ? std::string("workload") : g.label) << ", " << recs.size()
          << " recording(s), " << actions << " actions, " << skipped << " skipped ("
          << ratio(skipped * 100, actions) << "%)\n";
      out << "replay vclock with skips: " << withSkip << " ns\n";
      out << "replay vclock without skips: " << noSkip << " ns\n";
      out << "no-skip / skip: " << ratio(noSkip, withSkip) << "\n";
      out << "replay vclock with checkpoint every " << every << " job(s): " << withCkpt << " ns\n";
      out << "checkpoint / plain: " << ratio(withCkpt, withSkip) << "\n";
      out << "file size: raw " << raw << " bytes, compressed " << packed << " bytes\n";
      return kExitOk;
    }

  }

  int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
  {
    CLI::App app{"GPU register and memory record/replay", "gpr"};
    app.require_subcommand(1);
    Options o;

    auto* rec = app.add_subcommand("record", "Record a workload with the reference stack");
    rec->add_option("workload", o.workload, "Workload description file")->required();
    rec->add_option("-o,--output", o.output, "Output recording (per-layer: <stem>_layer<k>.gpr)")->required();
    rec->add_option("--sku", o.sku, "SKU to record on (A or B)");
    rec->add_option("--granularity", o.granularity, "monolithic or per_layer");
    rec->add_option("--harness", o.harness, "Harness configuration file");
    rec->add_option("--delays", o.delays, "Stack delays jit,mgmt,jitter in microseconds");
    rec->add_option("--seed", o.seed, "Environment and stack seed");

    auto* rep = app.add_subcommand("replay", "Replay one recording or a per-layer sequence");
    rep->add_option("recordings", o.recordings, "Recording files, in layer order")->required();
    rep->add_option("--input", o.inputFile, "Input bytes, concatenated in I/O-table order");
    rep->add_option("--output", o.outputFile, "Where to write the output bytes");
    std::string replaySku;
    rep->add_option("--sku", replaySku, "Device SKU (default: the recording's)");
    rep->add_option("--seed", o.seed, "Device environment seed");
    rep->add_flag("--no-skip", o.noSkip, "Pace every interval by its observed length");
    rep->add_option("--checkpoint-every", o.checkpointEvery, "Checkpoint after every K jobs");
    rep->add_option("--inject-fault", o.fault, "offline_cores[:mask] | corrupt_pte[:once|persistent] | stall[:ns]");
    rep->add_flag("--force", o.force, "Skip verification and SKU checks");
    rep->add_option("--clock-div", o.clockDiv, "Device clock divider")->check(CLI::Range(1u, 1024u));

    auto* ver = app.add_subcommand("verify", "Statically check a recording");
    ver->add_option("recording", o.recFile, "Recording file")->required();
    ver->add_option("--mem-budget", o.memBudget, "GPU memory budget in bytes");
    ver->add_option("--map", o.mapFile, "Register map file");
    ver->add_flag("--json", o.json, "Print the report as JSON");

    auto* ins = app.add_subcommand("inspect", "List a recording's actions, dumps and I/O");
    ins->add_option("recording", o.recFile, "Recording file")->required();

    auto* pat = app.add_subcommand("patch", "Retarget a recording to another SKU");
    pat->add_option("recording", o.recFile, "Recording file")->required();
    pat->add_option("--from", o.from, "Recording SKU")->required();
    pat->add_option("--to", o.to, "Target SKU")->required();
    pat->add_option("-o,--output", o.output, "Patched recording")->required();
    pat->add_flag("--allow-fewer-cores", o.allowFewerCores, "Permit a target with fewer cores");

    auto* ben = app.add_subcommand("bench", "Record, then compare replay timings and sizes");
    ben->add_option("workload", o.workload, "Workload description file")->required();
    ben->add_option("--sku", o.sku, "SKU (A or B)");
    ben->add_option("--harness", o.harness, "Harness configuration file");
    ben->add_option("--delays", o.delays, "Stack delays jit,mgmt,jitter in microseconds");
    ben->add_option("--seed", o.seed, "Environment and stack seed");
    ben->add_option("--checkpoint-every", o.checkpointEvery, "Checkpoint interval for the checkpointed run");

    try
    {
      app.parse(argc, argv);
    }
    catch (const CLI::ParseError& e)
    {
      int code = app.exit(e, out, err);
      return code == 0 ? kExitOk : kExitUsage;
    }

    try
    {
      if (*rec)
        return runRecord(o, out);
      if (*rep)
      {
        o.sku = replaySku;
        return runReplay(o, out, err);
      }
      if (*ver)
        return runVerify(o, out, err);
      if (*ins)
        return runInspect(o, out);
      if (*pat)
        return runPatch(o, out);
      if (*ben)
        return runBench(o, out, err);
    }
    catch (const UsageError& e)
    {
      err << "gpr: " << e.what() << "\n";
      return kExitUsage;
    }
    catch (const std::exception& e)
    {
      err << "gpr: " << e.what() << "\n";
      return kExitFailure;
    }
    return kExitUsage;
  }

}
