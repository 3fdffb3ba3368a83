#pragma once

#include "mpradon/common.hpp"
#include "mpradon/expr.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace mpradon {

/// Smooth vector field on R^dim. Either symbolic (one Expr per component,
/// exact derivatives) or numeric (a batch callable; derivatives by central
/// differences). All scenario library fields are symbolic; numeric fields
/// arise from chart pullbacks.
class VectorField {
public:
    using BatchFn = std::function<Mat(const Mat&)>;

    VectorField() = default;
    explicit VectorField(std::vector<Expr> coeffs);
    VectorField(int dim, BatchFn fn);

    int dim() const { return dim_; }
    bool symbolic() const { return symbolic_; }
    const Expr& coeff(int i) const;

    Vec eval(const Vec& x) const;
    /// pts has one point per column; result has the same shape.
    Mat evalBatch(const Mat& pts) const;

    bool structurallyZero() const;

private:
    int dim_ = 0;
    bool symbolic_ = true;
    std::vector<Expr> coeffs_;
    BatchFn fn_;
};

VectorField addFields(const VectorField& a, const VectorField& b);
VectorField scaleField(const VectorField& a, double c);
VectorField linearCombination(const std::vector<VectorField>& fields, const Vec& weights);

/// Lie bracket [X, Y]. Symbolic (exact) when both inputs are symbolic,
/// otherwise backed by central differences of directional derivatives.
VectorField lieBracket(const VectorField& x, const VectorField& y, double fdStep = 1e-5);

double supNormOnPoints(const VectorField& f, const Mat& pts);

/// Formal degree in N^nu (one component per parameter factor).
struct FormalDegree {
    IVec c;

    int nu() const { return static_cast<int>(c.size()); }
    int total() const { return c.sum(); }
    bool isPure() const;
    bool operator<=(const FormalDegree& o) const;
    FormalDegree operator+(const FormalDegree& o) const;
    std::string str() const { return ivecToString(c); }
};

struct DegreedField {
    VectorField field;
    FormalDegree degree;
    std::string label;
    int depth = 1;
};

/// Specification of gamma_t(x) = exp(sum_{0<|alpha|<=L} t^alpha X_alpha) x.
/// The parameter space R^N is split into nu factors of dimensions factorDims.
struct GammaSpec {
    struct Term {
        IVec alpha;  // multi-index over the N parameter coordinates
        VectorField field;
    };

    int nu = 0;
    IVec factorDims;
    int maxOrder = 0;
    std::vector<Term> terms;

    int tDim() const { return factorDims.sum(); }
    int xDim() const;
    FormalDegree degreeOf(const IVec& alpha) const;
    void validate() const;

    std::vector<DegreedField> pureFields() const;
    std::vector<DegreedField> nonPureFields() const;
};

std::string multiIndexLabel(const IVec& alpha);

struct ClosureConfig {
    int maxBracketDepth = 6;
    int maxDegreePerComponent = 8;
    double zeroTol = 1e-10;
    int probeCount = 64;
    Box probeBox;
};

/// Bracket closure of the pure-power fields, organized by formal degree.
/// Depth-1 elements are the pure fields; [A, B] has depth(A)+depth(B) and
/// degree deg(A)+deg(B). Zero fields (sup over probes < zeroTol) are dropped,
/// duplicate labels removed, output ordered by (total degree, depth, label).
std::vector<DegreedField> generateClosure(const GammaSpec& gamma, const ClosureConfig& cfg);

/// Probe set for the span checkers: low-discrepancy interior points plus the
/// box center and dyadic approaches to it along every axis, so coefficient
/// blowups concentrated at a distinguished point are actually sampled.
Mat conditionProbes(const Box& box, int haltonCount, int approachLevels = 12);

struct SpanCheckConfig {
    double spanTol = 1e-7;   // bound on residual / max(|target|, floor)
    double coeffBound = 1e3;
};

struct ConditionReport {
    bool satisfied = false;
    double worstResidual = 0.0;  // relative to the target magnitude at the probe
    double worstCoeffNorm = 0.0;
    std::string witnessLabel;
    Vec witnessPoint;
    std::string summary;
    // Hoermander-specific fields
    int rank = 0;
    int depthUsed = 0;
    double smallestKeptSingular = 0.0;
};

/// Pointwise degree-filtered span test: every closure element (X, d) must be
/// representable at each probe as a combination of candidate elements (Y, e)
/// with e <= d componentwise, with small residual and bounded coefficients.
ConditionReport checkFiniteType(const std::vector<DegreedField>& closure,
                                const std::vector<DegreedField>& candidateF,
                                const Mat& probes, const SpanCheckConfig& cfg);

/// Same span test applied to the non-pure terms of gamma against the closure.
/// Vacuously satisfied when nu = 1 or there are no non-pure terms.
ConditionReport checkAlgebraic(const GammaSpec& gamma,
                               const std::vector<DegreedField>& closure,
                               const Mat& probes, const SpanCheckConfig& cfg);

/// Iterated-bracket spanning of the tangent space at a point. Reports the rank
/// achieved, the minimal depth at which it became full (if it did), and the
/// smallest singular value retained by the rank cut.
ConditionReport checkHormander(const std::vector<VectorField>& fields, const Vec& point,
                               int maxDepth, double rankTol = 1e-8);

/// Harness policy for the finite-type verdict: search for a depth prefix F_d
/// of the closure that spans all deeper closure elements. Satisfied trivially
/// when the closure stabilizes (no deeper nonzero elements).
ConditionReport finiteTypeVerdict(const std::vector<DegreedField>& closure,
                                  const Mat& probes, const SpanCheckConfig& cfg,
                                  int maxBracketDepth);

}  // namespace mpradon
