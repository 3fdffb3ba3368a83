#pragma once

#include "mpradon/operators.hpp"

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace mpradon {

struct NormEstimate {
    double value = 0.0;
    std::string method;  // power-iteration | dense-oracle | monte-carlo-lp
    int iterations = 0;
    double relTol = 0.0;
    bool converged = true;
};

struct PowerIterConfig {
    double tol = 1e-4;
    int maxIter = 400;
    int restarts = 3;
    std::uint64_t seed = 7;
    long denseThreshold = 4096;  // opNormL2 switches to the dense oracle at or below
};

/// Largest singular value by power iteration on adjoint(apply(.)), seeded
/// restarts, max taken.
NormEstimate powerNormL2(const std::function<Vec(const Vec&)>& apply,
                         const std::function<Vec(const Vec&)>& adjoint, long n,
                         const PowerIterConfig& cfg);

/// Largest singular value of the materialized matrix.
NormEstimate denseNormL2(const DiscretizedOperator& op, long maxNodes = 4096);
NormEstimate denseNormL2(const Mat& m);

/// Dense oracle at small grids, power iteration otherwise.
NormEstimate opNormL2(const DiscretizedOperator& op, const PowerIterConfig& cfg);

/// Empirical max of ||op f||_p / ||f||_p over seeded Gaussian draws.
NormEstimate lpOpNormMonteCarlo(const DiscretizedOperator& op, double p, int samples,
                                std::uint64_t seed);

struct LineFitResult {
    double slope = 0.0;
    double intercept = 0.0;
    double residual = 0.0;  // rms of fit residuals
    bool valid = false;
};

/// Least squares y vs x; valid only when xs carries >= minDistinct values.
LineFitResult fitLineOn(const std::vector<double>& xs, const std::vector<double>& ys,
                        int minDistinct = 4);

struct ScanRow {
    IVec j;
    IVec k;
    double dist = 0.0;
    NormEstimate norm;
    double auxNorm = 0.0;  // optional extra column (power variant / fixed-index)
};

struct DecayScan {
    std::vector<ScanRow> rows;
    LineFitResult fit;  // log2(norm) vs dist
};

/// Fit of log2 norm against distance over the scan rows (zero norms skipped).
LineFitResult fitDecay(const std::vector<ScanRow>& rows);

enum class CotlarMode { TjStarTk, TjTkStar };

struct CotlarConfig {
    CotlarMode mode = CotlarMode::TjTkStar;
    int quadPerAxis = 6;
    FlowConfig flow;
    PowerIterConfig power;
    bool powerVariantColumn = false;
    int powerVariantN = 1;  // order of the repeated composition column
};

/// Pairwise composition norms ||T_j^* T_k|| or ||T_j T_k^*|| over the given
/// index pairs, with distance |j - k| (Euclidean) and a decay fit.
DecayScan cotlarScan(const GammaSpec& gamma, const BumpFamily& family, const SmoothCutoff& psi,
                     std::shared_ptr<const Grid> grid,
                     const std::vector<std::pair<IVec, IVec>>& pairs, const CotlarConfig& cfg);

/// Star pattern around the origin: (0, m e) for every nonzero direction e in
/// {0,1}^nu and m = 0..range.
std::vector<std::pair<IVec, IVec>> starPairs(int nu, int range);

struct GrowthRow {
    IVec truncation;
    NormEstimate norm;
};

struct PartialSumConfig {
    int quadPerAxis = 64;
    FlowConfig flow;
    PowerIterConfig power;
    long denseLimit = 4096;  // dense assembly path for grids at or below this
};

/// Operator norm of the truncated synthesis as the truncation grows.
std::vector<GrowthRow> partialSumGrowth(const GammaSpec& gamma, const BumpFamily& family,
                                        const SmoothCutoff& psi, std::shared_ptr<const Grid> grid,
                                        const std::vector<IVec>& truncations,
                                        const PartialSumConfig& cfg);

struct SquareFunctionReport {
    double ratioMin = 0.0;  // ||(sum |D_j f|^2)^{1/2}||_p / ||f||_p over the set
    double ratioMax = 0.0;
    double reconstructionResidual = 0.0;  // sup |sum_j D_j f - psi0^{2nu} f|
    double signRatioWorst = 0.0;          // worst max/min over random sign draws
    std::vector<double> perFunctionRatio;
};

SquareFunctionReport squareFunctionCheck(const DjBank& bank,
                                         const std::vector<GridFunction>& fSet, double p,
                                         int signDraws, std::uint64_t seed);

struct MaximalReport {
    struct Row {
        std::string label;
        double p = 0.0;
        double ratio = 0.0;
    };
    std::vector<Row> rows;
    bool linftyPointwiseExact = false;  // M f <= ||f||_inf vol psi held node for node
    double bumpRatioMax = 0.0;          // max over the multiscale bump inputs
    double bumpRatioMin = 0.0;
};

MaximalReport maximalCheck(const MaximalOperator& maxOp,
                           const std::vector<std::pair<std::string, GridFunction>>& fSet,
                           const std::vector<double>& ps,
                           const std::vector<GridFunction>& bumpFamily, double bumpP);

struct ModulusReport {
    struct Row {
        IVec latticeShift;
        double shiftNorm = 0.0;
        double rawL1 = 0.0;  // integral of |h(. - z) - h|
    };
    std::vector<Row> rows;
    std::map<double, double> supModulus;  // delta -> sup over shifts of raw / |z|^delta
    double rawExponent = 0.0;             // slope of log raw vs log |z|
    /// rawExponent - delta: strictly positive means the modulus still decays.
    double modulusExponent(double delta) const { return rawExponent - delta; }
};

/// Translation L1 modulus over exact lattice shifts (no interpolation); a
/// shift whose displaced support would leave the box is an error.
ModulusReport l1DeltaModulus(const GridFunction& h, const std::vector<double>& deltas,
                             const std::vector<IVec>& latticeShifts);

struct VectorScanConfig {
    double p = 2.0;
    PowerIterConfig power;
    int mcSamples = 12;
    std::uint64_t seed = 11;
};

/// Norm decay of the sequence operator {f_j} -> {D_j T_{j+k1} D_{j+k2} f_j}
/// over shift pairs; distance is |k1|_1 + |k2|_1. auxNorm carries the fixed
/// j = 0 single-component composition norm.
DecayScan vectorTkkScan(const IndexedBank& dBank, const IndexedBank& tBank,
                        const std::vector<std::pair<IVec, IVec>>& kPairs,
                        const VectorScanConfig& cfg);

/// Same for {f_j} -> {B_j D_{j+k} f_j} with distance |k|_1.
DecayScan vectorBkScan(const IndexedBank& bBank, const IndexedBank& dBank,
                       const std::vector<IVec>& ks, const VectorScanConfig& cfg);

struct StabilityGate {
    double coarse = 0.0;
    double fine = 0.0;
    double relChange = 0.0;
    bool pass = false;
};

/// Relative change between a quantity at one resolution and its refinement.
StabilityGate refinementGate(double coarse, double fine, double tolFrac = 0.05);

}  // namespace mpradon
