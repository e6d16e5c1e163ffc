#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "gpr/cli.hpp"
#include "gpr/recfmt.hpp"
#include "gpr/refstack.hpp"

namespace fs = std::filesystem;
using namespace gpr;

namespace
{

  struct Run
  {
    int code = 0;
    std::string out;
    std::string err;
  };

  Run gprCli(std::vector<std::string> args)
  {
    args.insert(args.begin(), "gpr");
    std::vector<const char*> argv;
    for (const auto& a : args)
      argv.push_back(a.c_str());
    std::ostringstream out, err;
    Run r;
    r.code = cli::dispatch(int(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
  }

  struct TempDir
  {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("gpr_cli_" + name))
    {
      fs::remove_all(path);
      fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& f) const { return (path / f).string(); }
  };

  const std::string kWork = GPR_SOURCE_DIR "/workloads/";

  std::string recordVecAdd(const TempDir& t)
  {
    std::string rec = t / "good.gpr";
    REQUIRE(gprCli({"record", kWork + "vec_add.txt", "-o", rec}).code == cli::kExitOk);
    return rec;
  }

}

TEST_CASE("verify of a recorded file reports zero violations")
{
  TempDir t("verify");
  std::string rec = recordVecAdd(t);
  Run r = gprCli({"verify", rec});
  CHECK(r.code == cli::kExitOk);
  CHECK(r.out.find("0 violations") != std::string::npos);
  Run j = gprCli({"verify", rec, "--json"});
  CHECK(j.out.find("\"ok\": true") != std::string::npos);
  Run tight = gprCli({"verify", rec, "--mem-budget", "4096"});
  CHECK(tight.code == cli::kExitFailure);
  CHECK(tight.err.find("R3") != std::string::npos);
}

TEST_CASE("replay with a one-off corrupt_pte logs the recovery and succeeds")
{
  TempDir t("replay");
  std::string rec = recordVecAdd(t);
  std::vector<int32_t> in(512);
  for (size_t i = 0; i < in.size(); ++i)
    in[i] = int32_t(i);
  writeFile(t / "in.bin", packI32(in));
  Run r = gprCli({"replay", rec, "--input", t / "in.bin", "--output", t / "out.bin", "--inject-fault",
                  "corrupt_pte:once"});
  CHECK(r.code == cli::kExitOk);
  CHECK(r.err.find("MMU_FAULT") != std::string::npos);
  CHECK(r.err.find("recovered after 1 attempt") != std::string::npos);
  auto out = unpackI32(readFile(t / "out.bin"));
  REQUIRE(out.size() == 256);
  for (size_t i = 0; i < out.size(); ++i)
    CHECK(out[i] == int32_t(i + i + 256));
}

TEST_CASE("persistent fault exits with failure and a final report")
{
  TempDir t("persist");
  std::string rec = recordVecAdd(t);
  writeFile(t / "in.bin", Bytes(2048, 0));
  Run r = gprCli({"replay", rec, "--input", t / "in.bin", "--inject-fault", "corrupt_pte:persistent"});
  CHECK(r.code == cli::kExitFailure);
  CHECK(r.err.find("vec_add") != std::string::npos);
}

TEST_CASE("bench with stack delays shows a no-skip ratio of at least 1.1")
{
  Run r = gprCli({"bench", kWork + "mixed.txt", "--delays", "50,20,0"});
  REQUIRE(r.code == cli::kExitOk);
  auto at = r.out.find("no-skip / skip: ");
  REQUIRE(at != std::string::npos);
  double ratio = std::stod(r.out.substr(at + 16));
  CHECK(ratio >= 1.1);
}

TEST_CASE("usage errors exit 2")
{
  CHECK(gprCli({}).code == cli::kExitUsage);
  CHECK(gprCli({"bogus"}).code == cli::kExitUsage);
  CHECK(gprCli({"verify"}).code == cli::kExitUsage);
  CHECK(gprCli({"replay", "x.gpr", "--clock-div", "0"}).code == cli::kExitUsage);
}

TEST_CASE("missing file exits 1")
{
  Run r = gprCli({"verify", "/nonexistent/x.gpr"});
  CHECK(r.code == cli::kExitFailure);
}

TEST_CASE("per-layer record names one file per layer")
{
  TempDir t("layers");
  Run r = gprCli({"record", kWork + "mixed.txt", "-o", t / "m.gpr", "--granularity", "per_layer"});
  REQUIRE(r.code == cli::kExitOk);
  for (int k = 0; k < 3; ++k)
    CHECK(fs::exists(t / ("m_layer" + std::to_string(k) + ".gpr")));
  CHECK_FALSE(fs::exists(t / "m.gpr"));
  writeFile(t / "in.bin", Bytes(512, 1));
  Run rep = gprCli({"replay", t / "m_layer0.gpr", t / "m_layer1.gpr", t / "m_layer2.gpr", "--input", t / "in.bin",
                    "--output", t / "out.bin"});
  CHECK(rep.code == cli::kExitOk);
  // (1 + 1) * -2 then relu.
  auto out = unpackI32(readFile(t / "out.bin"));
  CHECK(out == std::vector<int32_t>(64, 0));
}

TEST_CASE("identical seeds give byte-identical recordings")
{
  TempDir t("seeds");
  REQUIRE(gprCli({"record", kWork + "mixed.txt", "-o", t / "a.gpr", "--seed", "9", "--delays", "10,5,3"}).code == 0);
  REQUIRE(gprCli({"record", kWork + "mixed.txt", "-o", t / "b.gpr", "--seed", "9", "--delays", "10,5,3"}).code == 0);
  CHECK(readFile(t / "a.gpr") == readFile(t / "b.gpr"));
}

TEST_CASE("patch then replay on the other SKU")
{
  TempDir t("patch");
  std::string rec = recordVecAdd(t);
  Run p = gprCli({"patch", rec, "--from", "A", "--to", "B", "-o", t / "b.gpr"});
  REQUIRE(p.code == cli::kExitOk);
  CHECK(p.out.find("3 register edits") != std::string::npos);
  writeFile(t / "in.bin", Bytes(2048, 0));
  CHECK(gprCli({"replay", t / "b.gpr", "--input", t / "in.bin"}).code == cli::kExitOk);
  CHECK(gprCli({"replay", rec, "--sku", "B", "--input", t / "in.bin"}).code == cli::kExitFailure);
  CHECK(gprCli({"patch", t / "b.gpr", "--from", "B", "--to", "A", "-o", t / "a.gpr"}).code == cli::kExitFailure);
  CHECK(gprCli({"patch", t / "b.gpr", "--from", "B", "--to", "A", "-o", t / "a.gpr", "--allow-fewer-cores"}).code ==
        cli::kExitOk);
  CHECK(readFile(t / "a.gpr") == readFile(rec));
}

TEST_CASE("inspect lists actions and io")
{
  TempDir t("inspect");
  std::string rec = recordVecAdd(t);
  Run r = gprCli({"inspect", rec});
  CHECK(r.code == cli::kExitOk);
  CHECK(r.out.find("JOB_START") != std::string::npos);
  CHECK(r.out.find("sku_id: 0x00000b31") != std::string::npos);
  CHECK(r.out.find("io: 2") != std::string::npos);
}
