#pragma once

#include "mpradon/common.hpp"

#include <functional>
#include <vector>

namespace mpradon {

/// Raw 1-D mollifier profile exp(-1/(1-u^2)) on |u| < 1, 0 outside.
double mollifierRaw(double u);
/// Mass of the raw profile over [-1, 1] (fixed high-resolution quadrature).
double mollifierMass();

/// Midpoint tensor quadrature over a box: equal-weight nodes, none on any
/// coordinate axis.
struct QuadratureRule {
    Mat nodes;
    double weight = 0.0;
};
QuadratureRule midpointQuadrature(const Box& box, int pointsPerAxis);

/// Callable with support metadata, the currency of dilation and integration.
struct TFunc {
    std::function<double(const Vec&)> f;
    Box support;

    double eval(const Vec& t) const { return f(t); }
};

/// f^(2^j)(t) = 2^{sum_mu j_mu N_mu} f(2^{j_1} t_1, ..., 2^{j_nu} t_nu):
/// blockwise dyadic dilation, integral-preserving.
TFunc dilate(const TFunc& f, const IVec& j, const IVec& factorDims);

/// Midpoint integral of f over its own support box.
double integrate(const TFunc& f, int pointsPerAxis);

/// Family {eta_j} of tensor bumps: factor mu contributes a unit-integral
/// mollifier when j_mu = 0 and a zero-integral difference of two mollifiers
/// when j_mu > 0. Only the zero/nonzero pattern of j matters, so the family is
/// trivially bounded in C^1. skew shifts the coarse half of the difference,
/// producing nonzero odd moments while keeping exact cancellation.
struct BumpFamily {
    IVec factorDims;
    double supportRadius = 0.5;
    double skew = 0.0;
    bool cancelling = true;

    int tDim() const { return factorDims.sum(); }
    /// Half-width of the per-coordinate support budget (box inside the a-ball).
    double coordRadius() const;
    /// Base radius of the mollifier pieces after reserving room for the skew shift.
    double pieceRadius() const;

    double evalMember(const IVec& j, const Vec& t) const;
    Vec evalMemberBatch(const IVec& j, const Mat& ts) const;
    TFunc member(const IVec& j) const;
    Box supportBox() const { return Box::cube(tDim(), coordRadius()); }

    /// Sampled sup of |eta_j| + |grad eta_j| over the support, max over the
    /// distinct zero/nonzero patterns.
    double uniformC1Bound(int samplesPerAxis = 64) const;
};

/// pre: every factor dimension positive, a > 0, |skew| < 1.
BumpFamily makeCancellingFamily(const IVec& factorDims, double supportRadius,
                                double skew = 0.0);

struct FamilyAuditReport {
    double worstCancellation = 0.0;  // max |int eta_j dt_mu| over j with j_mu != 0
    double worstUnitIntegralError = 0.0;  // |int eta_0 - 1|
    double supportLeak = 0.0;             // max |eta_j| sampled outside the support box
    double c1Bound = 0.0;
    bool pass = false;
};

/// Quadrature audit of the family invariants up to the given truncation.
FamilyAuditReport auditFamily(const BumpFamily& family, const IVec& truncation,
                              int quadPerAxis = 128, double cancelTol = 1e-10);

/// Truncated dyadic synthesis K = sum_{0 <= j <= J} eta_j^(2^j).
struct ProductKernelSpec {
    BumpFamily family;
    IVec truncation;

    /// Throws AxisEvalError when any factor block of t vanishes.
    double eval(const Vec& t) const;
    double evalUnchecked(const Vec& t) const;
};

struct SizeEstimateFit {
    int factor = 0;
    IVec derivOrder;          // parameter-space derivative multi-index (empty = none)
    /// Measured power of the block distance along the approach to the axis.
    /// Valid syntheses never fall below expectedExponent = -(N_mu + |alpha_mu|);
    /// families whose halves do not telescope against each other saturate it.
    double fittedExponent = 0.0;
    double expectedExponent = 0.0;
    double constant = 0.0;    // fitted envelope constant
};

struct PairingRow {
    double scale = 0.0;  // R
    double constant = 0.0;
};

struct ValidationConfig {
    int quadPerAxis = 128;
    int fitScaleCount = 6;           // dyadic shells sampled for the size fit
    int pairingScaleCount = 10;      // scales R = 2^0 .. 2^pairingScaleCount
    double sizeExponentTol = 0.15;
    double pairingConstMax = 2.5;    // uniform bound on the pairing constants
};

struct ValidationReport {
    std::vector<SizeEstimateFit> sizeFits;
    std::vector<PairingRow> pairing;            // nu = 1 style pairing of the full kernel
    std::vector<PairingRow> recursivePairing;   // nu = 2: pair factor 1, then factor 2
    double pairingRatio = 0.0;  // max/min pairing constant across the scales R
    double pairingWorst = 0.0;  // largest pairing constant over bumps and scales
    bool sizeOk = false;   // no fitted exponent below its permitted floor
    bool pairingOk = false;  // pairingWorst within the uniform bound
    bool pass = false;
};

/// Size-estimate and bump-pairing validator for the truncated synthesis.
ValidationReport validateProductKernel(const ProductKernelSpec& spec,
                                       const std::vector<IVec>& derivOrders,
                                       const ValidationConfig& cfg);

}  // namespace mpradon
