#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "mpradon/experiment.hpp"

using namespace mpradon;
namespace fs = std::filesystem;

namespace {

const fs::path kTmp = "harness-tmp";

int runCli(const std::string& args) {
    const std::string cmd = "./mpradon " + args + " > " + (kTmp / "last-log.txt").string() +
                            " 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string readFile(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string lastLog() { return readFile(kTmp / "last-log.txt"); }

ExperimentConfig lineConfig(long grid, std::uint64_t seed) {
    ExperimentConfig cfg;
    cfg.scenario = "abelian-translation";
    cfg.gridPerAxis = grid;
    cfg.seed = seed;
    return cfg;
}

ScanSpec scan(const std::string& kind, Json options = Json::object()) {
    ScanSpec s;
    s.kind = kind;
    s.options = std::move(options);
    return s;
}

GateSpec gate(const std::string& metric, std::optional<double> lo, std::optional<double> hi) {
    return GateSpec{metric, lo, hi};
}

}  // namespace

TEST_CASE("config parsing fills defaults and rejects bad input") {
    const ExperimentConfig dflt = configFromJson(Json::object());
    CHECK(dflt.scenario == "heisenberg");
    CHECK(dflt.gridPerAxis == 12);
    CHECK(dflt.format == "csv");
    CHECK(dflt.cancelling);
    CHECK(dflt.scans.empty());

    const Json full = {
        {"scenario", "abelian-translation"},
        {"grid", 32},
        {"truncation", {3}},
        {"kernel", {{"radius", 0.4}, {"skew", 0.1}, {"cancelling", false}}},
        {"seed", 9},
        {"format", "json"},
        {"scans",
         {{{"kind", "norm"},
           {"gates", {{{"metric", "normL2"}, {"min", 0.0}, {"max", 5.0}}}}}}}};
    const ExperimentConfig cfg = configFromJson(full);
    CHECK(cfg.scenario == "abelian-translation");
    CHECK(cfg.gridPerAxis == 32);
    CHECK(cfg.truncation.size() == 1);
    CHECK(cfg.truncation[0] == 3);
    CHECK(cfg.kernelRadius == 0.4);
    CHECK(cfg.skew == 0.1);
    CHECK_FALSE(cfg.cancelling);
    CHECK(cfg.seed == 9);
    REQUIRE(cfg.scans.size() == 1);
    CHECK(cfg.scans[0].kind == "norm");
    REQUIRE(cfg.scans[0].gates.size() == 1);
    CHECK(cfg.scans[0].gates[0].metric == "normL2");
    CHECK(cfg.scans[0].gates[0].max == 5.0);

    CHECK_THROWS_AS(configFromJson(Json::array()), ConfigError);
    CHECK_THROWS_AS(configFromJson({{"scenario", "nope"}}), ConfigError);
    CHECK_THROWS_AS(configFromJson({{"grid", 3}}), ConfigError);
    CHECK_THROWS_AS(configFromJson({{"format", "xml"}}), ConfigError);
    CHECK_THROWS_AS(configFromJson({{"scans", {{{"range", 2}}}}}), ConfigError);
    CHECK_THROWS_AS(configFromJson({{"scans", {{{"kind", "bogus"}}}}}), ConfigError);

    const auto& kinds = knownScanKinds();
    CHECK(kinds.size() == 16);
    for (const char* k : {"conditions", "kernel", "decay", "uniformity", "vector-bk"})
        CHECK(std::find(kinds.begin(), kinds.end(), k) != kinds.end());

    // defaults resolve against the scenario when echoed back
    const Json resolved = resolvedConfigJson(lineConfig(16, 1));
    CHECK(resolved.at("truncation") == Json({6}));
    CHECK(resolved.at("kernel").at("radius") == 0.5);

    fs::create_directories(kTmp);
    const fs::path cfgPath = kTmp / "roundtrip.json";
    std::ofstream(cfgPath) << full.dump();
    CHECK(configFromFile(cfgPath.string()).gridPerAxis == 32);
    CHECK_THROWS_AS(configFromFile((kTmp / "missing.json").string()), ConfigError);
}

TEST_CASE("an empty scan list validates the config and stops") {
    const ExperimentResult res = runExperiment(lineConfig(16, 1));
    CHECK(res.exitCode() == 0);
    CHECK(res.artifacts.empty());
    CHECK(res.gates.empty());
    CHECK(res.summary.contains("config"));
    CHECK(res.summary.at("scenario").at("name") == "abelian-translation");
    bool noted = false;
    for (const std::string& line : res.lines)
        noted = noted || line.find("no scans requested") != std::string::npos;
    CHECK(noted);
}

TEST_CASE("gates decide the exit status") {
    ExperimentConfig cfg = lineConfig(24, 2);
    cfg.scans = {scan("norm")};
    cfg.scans[0].gates = {gate("normL2", 1e-6, 100.0)};
    const ExperimentResult ok = runExperiment(cfg);
    CHECK(ok.exitCode() == 0);
    REQUIRE(ok.gates.size() == 1);
    CHECK(ok.gates[0].pass);
    CHECK(ok.gates[0].value > 0.0);

    cfg.scans[0].gates = {gate("normL2", std::nullopt, 1e-9)};
    CHECK(runExperiment(cfg).exitCode() == 2);

    // a gate naming a metric the scan never produced can only fail
    cfg.scans[0].gates = {gate("noSuchMetric", 0.0, 1.0)};
    const ExperimentResult missing = runExperiment(cfg);
    CHECK(missing.exitCode() == 2);
    CHECK_FALSE(missing.gates[0].pass);

    ExperimentConfig cond = lineConfig(16, 2);
    cond.scenario = "cubic-counterexample";
    cond.scans = {scan("conditions")};
    cond.scans[0].gates = {gate("bothPass", 1.0, std::nullopt)};
    CHECK(runExperiment(cond).exitCode() == 2);

    cond.scenario = "abelian-translation";
    CHECK(runExperiment(cond).exitCode() == 0);
}

TEST_CASE("scan failures are recorded and only gates escalate them") {
    ExperimentConfig cfg = lineConfig(16, 3);
    cfg.scans = {scan("cc-ball", {{"xi", -1.0}})};
    const ExperimentResult soft = runExperiment(cfg);
    CHECK(soft.exitCode() == 0);
    const Json& entry = soft.summary.at("scans").at("cc-ball");
    REQUIRE(entry.contains("error"));
    CHECK_FALSE(entry.at("error").get<std::string>().empty());

    cfg.scans[0].gates = {gate("kept", 1.0, std::nullopt)};
    CHECK(runExperiment(cfg).exitCode() == 2);

    cfg.scans = {scan("cc-ball", {{"xi", -1.0}, {"fatal", true}})};
    CHECK_THROWS_AS(runExperiment(cfg), ConfigError);
}

TEST_CASE("artifact bundles are deterministic byte for byte") {
    ExperimentConfig cfg = lineConfig(32, 5);
    cfg.scans = {scan("decay", {{"range", 2}, {"quadPerAxis", 16}}), scan("modulus")};
    const ExperimentResult a = runExperiment(cfg);
    const ExperimentResult b = runExperiment(cfg);
    CHECK(a.artifacts == b.artifacts);
    CHECK(a.summary == b.summary);
    CHECK(a.lines == b.lines);
    REQUIRE(a.artifacts.count("decay.csv") == 1);
    CHECK(a.artifacts.at("decay.csv").rfind("# schema=1\n", 0) == 0);

    const fs::path dirA = kTmp / "det-a";
    const fs::path dirB = kTmp / "det-b";
    fs::remove_all(dirA);
    fs::remove_all(dirB);
    writeArtifacts(a, dirA.string());
    writeArtifacts(b, dirB.string());
    for (const char* name : {"decay.csv", "modulus.csv", "summary.json", "summary.txt"}) {
        CHECK(readFile(dirA / name) == readFile(dirB / name));
    }
    CHECK(readFile(dirA / "decay.csv") == a.artifacts.at("decay.csv"));

    // json table format swaps the artifact extension
    cfg.format = "json";
    const ExperimentResult j = runExperiment(cfg);
    CHECK(j.artifacts.count("decay.json") == 1);
    CHECK(j.artifacts.count("decay.csv") == 0);
}

TEST_CASE("the command line runs end to end") {
    fs::create_directories(kTmp);
    REQUIRE(fs::exists("mpradon"));

    const fs::path outA = kTmp / "cli-heis";
    CHECK(runCli("check-conditions --scenario heisenberg --grid 8 --out " + outA.string()) ==
          0);
    const std::string logA = lastLog();
    CHECK(logA.find("finite-type PASS") != std::string::npos);
    CHECK(logA.find("algebraic PASS") != std::string::npos);
    CHECK(readFile(outA / "conditions.csv").rfind("# schema=1\n", 0) == 0);
    const Json summary = Json::parse(readFile(outA / "summary.json"));
    CHECK(summary.at("config").at("scenario") == "heisenberg");
    REQUIRE(summary.at("gates").size() == 1);
    CHECK(summary.at("gates")[0].at("pass") == true);

    CHECK(runCli("check-conditions --scenario cubic-counterexample --grid 8 --out " +
                 (kTmp / "cli-cubic").string()) == 2);
    CHECK(lastLog().find("algebraic FAIL") != std::string::npos);

    CHECK(runCli("no-such-command") != 0);
    CHECK(runCli("check-conditions --bogus-flag 1") != 0);
    CHECK(runCli("run") != 0);  // --config is required

    CHECK(runCli("build-kernel --scenario abelian-translation --grid 16 --truncation 6 "
                 "--no-cancel --out " +
                 (kTmp / "cli-kernel").string()) == 2);

    const fs::path cfgPath = kTmp / "cli-run.json";
    const Json cfg = {{"scenario", "abelian-translation"},
                      {"grid", 48},
                      {"seed", 3},
                      {"scans", {{{"kind", "decay"}, {"range", 2}, {"quadPerAxis", 24}}}}};
    std::ofstream(cfgPath) << cfg.dump();
    const fs::path outR = kTmp / "cli-run";
    CHECK(runCli("run --config " + cfgPath.string() + " --out " + outR.string()) == 0);
    CHECK(fs::exists(outR / "decay.csv"));
    CHECK(Json::parse(readFile(outR / "summary.json")).at("config").at("grid") == 48);

    // same command, same seed: identical bytes on disk
    const fs::path d1 = kTmp / "cli-d1";
    const fs::path d2 = kTmp / "cli-d2";
    CHECK(runCli("decay-scan --scenario abelian-translation --grid 32 --seed 7 --out " +
                 d1.string()) == 0);
    CHECK(runCli("decay-scan --scenario abelian-translation --grid 32 --seed 7 --out " +
                 d2.string()) == 0);
    CHECK(readFile(d1 / "decay.csv") == readFile(d2 / "decay.csv"));
    CHECK(readFile(d1 / "summary.json") == readFile(d2 / "summary.json"));
}
