#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "mpradon/experiment.hpp"

namespace {

using mpradon::ExperimentConfig;
using mpradon::GateSpec;
using mpradon::Json;
using mpradon::ScanSpec;

struct CliState {
    std::string configPath;
    std::string outDir = "out";
    std::uint64_t seed = 1;
    long grid = 12;
    int threads = 1;
    std::string format = "csv";
    std::string scenario = "heisenberg";
    std::vector<long> truncation;
    double kernelRadius = 0.0;
    double skew = 0.0;
    bool noCancel = false;
    std::vector<std::string> opts;
};

struct CommandSpec {
    std::string cliName;
    std::string scanKind;
    std::string help;
    std::vector<GateSpec> gates;
};

const std::vector<CommandSpec>& commandTable() {
    static const std::vector<CommandSpec> table = {
        {"check-conditions", "conditions",
         "evaluate the curvature-type conditions for a scenario",
         {{"bothPass", 1.0, std::nullopt}}},
        {"build-kernel", "kernel", "synthesize the product kernel and validate its estimates",
         {{"pass", 1.0, std::nullopt}}},
        {"apply-op", "apply", "apply the singular average to a reference input", {}},
        {"estimate-norm", "norm", "estimate the operator norm on the grid", {}},
        {"decay-scan", "decay", "scan almost-orthogonality norms across scale separation", {}},
        {"partial-sum", "partial-sum", "track partial-sum operator norms across truncations",
         {}},
        {"square-function", "square-function",
         "compare square-function and input norms for the difference bank", {}},
        {"maximal", "maximal", "evaluate the grid maximal operator and its test ratios", {}},
        {"cc-ball", "cc-ball", "sample reachable endpoints of the control system", {}},
        {"frobenius-chart", "chart", "build a leaf chart at the scenario base point", {}},
        {"uniformity-scan", "uniformity",
         "compare chart diagnostics across dyadic frame scalings", {}},
        {"w-field", "w-field", "tabulate the frozen-flow displacement field", {}},
    };
    return table;
}

Json parseOptionValue(const std::string& text) {
    if (text == "true") return true;
    if (text == "false") return false;
    try {
        size_t used = 0;
        const double d = std::stod(text, &used);
        if (used == text.size()) {
            if (d == static_cast<long>(d) && text.find_first_of(".eE") == std::string::npos)
                return static_cast<long>(d);
            return d;
        }
    } catch (const std::exception&) {
    }
    return text;
}

Json optionsFromPairs(const std::vector<std::string>& pairs) {
    Json j = Json::object();
    for (const std::string& kv : pairs) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw mpradon::ConfigError("--opt expects key=value, got " + kv);
        j[kv.substr(0, eq)] = parseOptionValue(kv.substr(eq + 1));
    }
    return j;
}

void addCommonFlags(CLI::App* cmd, CliState& st) {
    cmd->add_option("--config", st.configPath, "base configuration file (json)");
    cmd->add_option("--out", st.outDir, "output directory for artifacts");
    cmd->add_option("--seed", st.seed, "deterministic seed");
    cmd->add_option("--grid", st.grid, "grid nodes per axis");
    cmd->add_option("--threads", st.threads, "worker thread count for dense kernels");
    cmd->add_option("--format", st.format, "table format: csv or json")
        ->check(CLI::IsMember({"csv", "json"}));
}

void addScanFlags(CLI::App* cmd, CliState& st) {
    cmd->add_option("--scenario", st.scenario, "scenario name");
    cmd->add_option("--truncation", st.truncation, "dyadic truncation per factor");
    cmd->add_option("--kernel-radius", st.kernelRadius, "parameter-space support radius");
    cmd->add_option("--skew", st.skew, "skew offset for the non-cancelling family variant");
    cmd->add_flag("--no-cancel", st.noCancel, "drop the moment cancellation of the family");
    cmd->add_option("--opt", st.opts, "extra scan option as key=value (repeatable)");
}

ExperimentConfig configForCommand(const CommandSpec& spec, const CliState& st,
                                  const CLI::App* cmd) {
    ExperimentConfig cfg;
    if (!st.configPath.empty()) cfg = mpradon::configFromFile(st.configPath);
    auto given = [&](const std::string& name) { return cmd->count(name) > 0; };
    if (st.configPath.empty() || given("--scenario")) cfg.scenario = st.scenario;
    if (st.configPath.empty() || given("--grid")) cfg.gridPerAxis = st.grid;
    if (st.configPath.empty() || given("--seed")) cfg.seed = st.seed;
    if (st.configPath.empty() || given("--format")) cfg.format = st.format;
    if (given("--out") || st.configPath.empty()) cfg.outDir = st.outDir;
    if (given("--truncation")) {
        cfg.truncation.resize(static_cast<long>(st.truncation.size()));
        for (size_t i = 0; i < st.truncation.size(); ++i)
            cfg.truncation[static_cast<long>(i)] = st.truncation[i];
    }
    if (given("--kernel-radius")) cfg.kernelRadius = st.kernelRadius;
    if (given("--skew")) cfg.skew = st.skew;
    if (given("--no-cancel")) cfg.cancelling = false;

    ScanSpec scan;
    scan.kind = spec.scanKind;
    scan.options = optionsFromPairs(st.opts);
    scan.gates = spec.gates;
    cfg.scans = {scan};
    return cfg;
}

int executeConfig(const ExperimentConfig& cfg) {
    const mpradon::ExperimentResult res = mpradon::runExperiment(cfg);
    mpradon::writeArtifacts(res, cfg.outDir);
    for (const std::string& line : res.lines) std::cout << line << "\n";
    std::cout << "artifacts: " << cfg.outDir << "\n";
    return res.exitCode();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mpradon: numerical laboratory for multi-parameter singular averages"};
    app.require_subcommand(1);

    CliState st;
    std::vector<std::pair<const CommandSpec*, CLI::App*>> bound;
    for (const CommandSpec& spec : commandTable()) {
        CLI::App* cmd = app.add_subcommand(spec.cliName, spec.help);
        addCommonFlags(cmd, st);
        addScanFlags(cmd, st);
        bound.emplace_back(&spec, cmd);
    }
    CLI::App* runCmd = app.add_subcommand("run", "execute every scan in a configuration file");
    addCommonFlags(runCmd, st);
    runCmd->get_option("--config")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (st.threads > 0) Eigen::setNbThreads(st.threads);
        if (runCmd->parsed()) {
            ExperimentConfig cfg = mpradon::configFromFile(st.configPath);
            auto given = [&](const std::string& name) { return runCmd->count(name) > 0; };
            if (given("--out")) cfg.outDir = st.outDir;
            if (given("--seed")) cfg.seed = st.seed;
            if (given("--grid")) cfg.gridPerAxis = st.grid;
            if (given("--format")) cfg.format = st.format;
            return executeConfig(cfg);
        }
        for (const auto& [spec, cmd] : bound) {
            if (cmd->parsed()) return executeConfig(configForCommand(*spec, st, cmd));
        }
        std::cerr << app.help() << std::flush;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
