#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gpr/device.hpp"
#include "gpr/recfmt.hpp"
#include "gpr/recording.hpp"
#include "gpr/refstack.hpp"

namespace gpr
{

  /// Record-time annotations and knobs.
  struct RecordHarness
  {
    /// Mode of input 0, the only graph input.
    IoMode inputMode = IoMode::ByAddress;
    /// Concrete input baked into the final run (by_value / both).
    std::optional<Bytes> inputValue;
    uint64_t magicSeed = 1;
    uint32_t maxTrials = 5;
    Granularity granularity = Granularity::Monolithic;
    /// Dump INTERNAL_SCRATCH pages too (filter off).
    bool dumpScratch = false;
    /// Magic input for a trial; defaults to seeded high-entropy bytes.
    std::function<Bytes(uint32_t trial, size_t len)> magicSource;

    Bytes magic(uint32_t trial, size_t len) const;

    /// Lines: `input 0 by_value|by_address|both [file]`, `magic_seed N`,
    /// `trials N`, `granularity monolithic|per_layer`, `dump_scratch on|off`.
    /// Relative value files resolve against @p baseDir.
    static RecordHarness parse(std::string_view text, const std::string& baseDir = ".");
    static RecordHarness load(const std::string& path);
  };

  struct RecordConfig
  {
    SkuProfile sku = skuA();
    uint64_t envSeed = 1;
    uint64_t stackSeed = 1;
    StackDelays delays;
    DeviceTiming timing;
    uint32_t clockDiv = 1;
    uint64_t createdUnix = defaultCreatedUnix();
    double overheadNsPerByte = 0.5;
  };

  /// Ground truth captured alongside the final trial of one recording.
  struct RecordTrace
  {
    std::vector<Allocation> allocations;
    std::vector<BusyInterval> busy;
    std::vector<uint64_t> deviceEvents;
    /// Start time of each action in the final recording.
    std::vector<uint64_t> actionStartNs;
    uint64_t endNs = 0;
    /// Page VA -> SHA-256 of GPU_EXEC page contents at dump time.
    std::map<uint32_t, Digest> execPageHashes;
    /// Dump bytes before compression, parallel to Recording::dumps.
    std::vector<Bytes> rawDumps;
    Bytes input;
    Bytes output;
    uint32_t trials = 0;
    /// Candidate counts after each trial (input, output).
    std::vector<std::pair<size_t, size_t>> candidates;
  };

  struct RecordResult
  {
    std::vector<Recording> recordings;
    std::vector<RecordTrace> traces;
  };

  class IoDiscoveryError : public Error
  {
  public:
    using Error::Error;
  };

  /// Record @p graph with the reference stack on a fresh simulated device.
  /// Per-layer granularity yields one recording per layer labelled
  /// `<label>/L<k>`.
  RecordResult record(const WorkloadGraph& graph, const RecordHarness& harness, const RecordConfig& config);

  /// Fraction helpers used by tests and the bench command.
  size_t countSkipped(const Recording& rec);

}
