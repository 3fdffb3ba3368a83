#pragma once

#include "mpradon/fields.hpp"
#include "mpradon/flows.hpp"

#include <functional>
#include <string>
#include <vector>

namespace mpradon {

/// Anisotropically rescaled copy of a degreed field list: Z_i = 2^{-j0.d_i} X_i.
struct ScaledFrame {
    std::vector<DegreedField> base;
    IVec j0;
    std::vector<VectorField> fields;

    int q() const { return static_cast<int>(fields.size()); }
    int dim() const { return fields.empty() ? 0 : fields.front().dim(); }
};

ScaledFrame makeScaledFrame(const std::vector<DegreedField>& base, const IVec& j0);

struct BracketSpanReport {
    double worstResidual = 0.0;
    double coeffSup = 0.0;
    bool ok = false;
};

/// Least-squares expression of every [Z_i, Z_k] in the pointwise span of
/// {Z_l} over the probe points; ok when the residual stays under spanTol and
/// the coefficients under coeffBound.
BracketSpanReport scaledBracketSpan(const ScaledFrame& frame, const Mat& probes,
                                    const SpanCheckConfig& cfg);

/// Batched RK4 integration of dx/dt = sum_i controls(i, col) fields[i](x),
/// one control vector per column of start. Throws BoxExitError when a
/// trajectory leaves the box.
Mat controlledFlow(const std::vector<VectorField>& fields, const Mat& controls, const Mat& start,
                   double time, int steps, const Box& box);

struct CCBallConfig {
    Box box;
    int stepsPerSegment = 16;
    std::uint64_t seed = 1;
};

struct CCBallCloud {
    Mat points;  // endpoints, one per surviving path
    int requested = 0;
    int dropped = 0;
};

/// Endpoint cloud of horizontal paths gamma' = sum_i a_i(t) Z_i(gamma) with
/// piecewise-constant controls drawn uniformly from [-xi, xi]^q; an inner
/// sample of the control-metric ball of radius xi. Paths leaving the safety
/// box are dropped; losing more than half of them is an error.
CCBallCloud ccBallSample(const ScaledFrame& frame, const Vec& x0, double xi, int pathCount,
                         int segmentCount, const CCBallConfig& cfg);

struct ChartConfig {
    Box box;                         // safety region for all flow evaluations
    int rk4Steps = 64;               // time-1 integration steps
    double rankTol = 1e-8;           // leaf dimension cut at the base point
    double detFloorThreshold = 1e-4;
    int etaHalvings = 10;            // dyadic radius shrink attempts
    int meshPerAxis = 9;
    double jacobianStep = 1e-4;      // finite-difference step, relative to eta
    double c1Step = 0.05;            // derivative-diagnostic step, relative to eta
    double injectivityTol = 1e-8;    // min image separation, relative to eta
};

/// Local straightening chart: Phi(u) = time-1 flow of sum_m u_m Z_{i_m} from
/// x0, with the whole frame pulled back to chart coordinates by solving the
/// differential of Phi at mesh points.
struct FrobeniusChart {
    Vec x0;
    int n0 = 0;                 // leaf dimension at x0
    double eta = 0.0;           // chart radius that passed the mesh checks
    std::vector<int> selection; // frame indices spanning the leaf at x0
    double detFloor = 0.0;      // inf over mesh of best sub-frame |det|
    double cBound = 0.0;        // sup of pullback values and first differences
    long meshCount = 0;

    std::function<Mat(const Mat&)> phi;                        // u columns -> points
    std::function<std::vector<Mat>(const Mat&)> pullbackAll;   // u columns -> per-field coeffs
    Mat pullback(int fieldIndex, const Mat& u) const { return pullbackAll(u)[fieldIndex]; }
};

FrobeniusChart buildChart(const ScaledFrame& frame, const Vec& x0, const ChartConfig& cfg);

struct UniformityRow {
    IVec j0;
    bool ok = false;
    std::string error;
    int n0 = 0;
    double detFloor = 0.0;
    double cBound = 0.0;
    double eta = 0.0;
    double bracketCoeffSup = 0.0;
};

/// Chart diagnostics across a family of dyadic scalings of the same base
/// frame; failures are recorded per row and the scan continues.
std::vector<UniformityRow> uniformityScan(const std::vector<DegreedField>& base, const Vec& x0,
                                          const std::vector<IVec>& j0Range,
                                          const ChartConfig& cfg, const SpanCheckConfig& spanCfg,
                                          int probeCount = 32);

struct BallChartReport {
    int tested = 0;
    int found = 0;
    double fraction = 0.0;
};

/// Samples ball endpoints and attempts a Gauss-Newton preimage under the
/// chart map within radius eta; reports the fraction recovered.
BallChartReport chartContainsBallCheck(const ScaledFrame& frame, const FrobeniusChart& chart,
                                       double xi, int pathCount, int segmentCount,
                                       const CCBallConfig& cfg);

/// Spanning check for the two-slot rescaled pullback frame: for every pure
/// degreed field, copies scaled by 2^{-(k-j0).d} and 2^{-(j-j0).d} (so each
/// appears unscaled in at least one slot when j0 = min(j,k)); iterated
/// brackets must span the chart tangent space at sampled chart points.
ConditionReport pullbackHormanderCheck(const ScaledFrame& frame, const FrobeniusChart& chart,
                                       const IVec& j, const IVec& k, int maxDepth = 4,
                                       double rankTol = 1e-6, int probeCount = 5);

}  // namespace mpradon
