#pragma once

#include "mpradon/analysis.hpp"
#include "mpradon/geometry.hpp"
#include "mpradon/scenario.hpp"

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mpradon {

using Json = nlohmann::json;

/// Pass band for one scan metric; missing bounds are unconstrained.
struct GateSpec {
    std::string metric;
    std::optional<double> min;
    std::optional<double> max;
};

struct ScanSpec {
    std::string kind;
    Json options;  // the raw scan object; runners read what they need
    std::vector<GateSpec> gates;
};

struct ExperimentConfig {
    std::string scenario = "heisenberg";
    long gridPerAxis = 12;
    IVec truncation;           // empty -> scenario default
    double kernelRadius = 0.0; // <= 0 -> scenario default
    double skew = 0.0;
    bool cancelling = true;
    std::uint64_t seed = 1;
    std::string outDir = "out";
    std::string format = "csv";  // table artifact format: csv | json
    std::vector<ScanSpec> scans;
};

/// Parse with full defaulting; unknown scan kinds are rejected here so a bad
/// config fails before any compute.
ExperimentConfig configFromJson(const Json& j);
ExperimentConfig configFromFile(const std::string& path);
/// Every field echoed back, defaults resolved against the scenario.
Json resolvedConfigJson(const ExperimentConfig& cfg);

const std::vector<std::string>& knownScanKinds();

struct GateOutcome {
    std::string scan;
    std::string metric;
    double value = 0.0;
    std::optional<double> min;
    std::optional<double> max;
    bool pass = false;
};

struct ExperimentResult {
    Json summary;                                  // resolved config + metrics + gates
    std::map<std::string, std::string> artifacts;  // filename -> file content
    std::vector<GateOutcome> gates;
    std::vector<std::string> lines;  // human-readable report

    bool gatedFailure() const;
    /// 0 success, 2 any gated check failed (internal errors surface as throws).
    int exitCode() const { return gatedFailure() ? 2 : 0; }
};

ExperimentResult runExperiment(const ExperimentConfig& cfg);

/// Writes every artifact plus summary.json / summary.txt under outDir,
/// creating the directory; content is deterministic for a fixed config.
void writeArtifacts(const ExperimentResult& res, const std::string& outDir);

}  // namespace mpradon
