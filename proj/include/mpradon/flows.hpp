#pragma once

#include "mpradon/common.hpp"
#include "mpradon/fields.hpp"

namespace mpradon {

/// Point in the parameter space R^N with its factor layout.
struct TPoint {
    Vec coords;
    IVec factorDims;

    static TPoint zero(const IVec& factorDims) {
        return TPoint{Vec::Zero(factorDims.sum()), factorDims};
    }

    int dim() const { return static_cast<int>(coords.size()); }
    int nu() const { return static_cast<int>(factorDims.size()); }

    /// Copy of the mu-th factor block.
    Vec factor(int mu) const;
    double factorNorm(int mu) const { return factor(mu).norm(); }

    /// Anisotropic dyadic scaling: factor mu multiplied by 2^{-j[mu]}.
    TPoint dyadicScaled(const IVec& j) const;
    TPoint scaled(double s) const { return TPoint{s * coords, factorDims}; }
};

enum class InverseMode { NegateTime, RootFind };

struct FlowConfig {
    int stepCount = 64;      // per unit time at unit field size; >= 16
    Box box;                 // integration domain; leaving it is an error
    InverseMode inverseMode = InverseMode::NegateTime;
    double wEps = 1e-4;      // relative half-width for the W central difference
    double rootTol = 1e-10;  // RootFind convergence tolerance
    int rootMaxIter = 50;

    void validate() const;
};

/// Time-1 RK4 flow of a fixed field, batched over columns of pts.
/// Throws BoxExitError when any trajectory leaves cfg.box.
Mat rk4FlowBatch(const VectorField& v, const Mat& pts, double time, const FlowConfig& cfg);

/// Frozen field V_t = sum_alpha t^alpha X_alpha of the gamma specification.
VectorField frozenField(const GammaSpec& gamma, const TPoint& t);
double tPower(const IVec& alpha, const Vec& t);

/// gamma_t(x): time-1 flow of the frozen field (exact identity at t = 0).
Vec gammaFlow(const GammaSpec& gamma, const TPoint& t, const Vec& x, const FlowConfig& cfg);
Mat gammaFlowBatch(const GammaSpec& gamma, const TPoint& t, const Mat& pts, const FlowConfig& cfg);

/// gamma_t^{-1}(x): negate-time flow, or Newton root-find per cfg.inverseMode.
Vec gammaInverse(const GammaSpec& gamma, const TPoint& t, const Vec& x, const FlowConfig& cfg);
Mat gammaInverseBatch(const GammaSpec& gamma, const TPoint& t, const Mat& pts,
                      const FlowConfig& cfg);

/// theta_{j,k}(s,t,x) = gamma_{2^{-k} t} ( gamma_{2^{-j} s}^{-1} (x) ).
Vec thetaMap(const GammaSpec& gamma, const IVec& j, const IVec& k, const TPoint& s,
             const TPoint& t, const Vec& x, const FlowConfig& cfg);

/// W(t, x) = d/d eps |_{eps=1} gamma_{eps t}(gamma_t^{-1}(x)), central difference
/// of half-width cfg.wEps; identically zero at t = 0.
Vec canonicalW(const GammaSpec& gamma, const TPoint& t, const Vec& x, const FlowConfig& cfg);

}  // namespace mpradon
