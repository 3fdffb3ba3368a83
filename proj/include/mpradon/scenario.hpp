#pragma once

#include "mpradon/fields.hpp"

#include <string>
#include <vector>

namespace mpradon {

/// A ready-to-run field system: the curve family, its degreed frame, safe
/// integration region, and default experiment parameters.
struct Scenario {
    std::string name;
    std::string description;
    GammaSpec gamma;
    std::vector<DegreedField> frameFields;  // enumerated (field, degree) list
    Box box;                                // analysis window
    Box flowBox;                            // safety region for trajectories
    Vec x0;                                 // chart / ball base point
    double kernelRadius = 0.5;              // bump support radius in t
    IVec defaultTruncation;
};

const std::vector<std::string>& scenarioNames();
bool hasScenario(const std::string& name);
Scenario getScenario(const std::string& name);
std::vector<Scenario> allScenarios();

}  // namespace mpradon
