#include "mpradon/flows.hpp"

#include <cmath>

namespace mpradon {

Vec TPoint::factor(int mu) const {
    int pos = 0;
    for (int m = 0; m < mu; ++m) pos += factorDims[m];
    return coords.segment(pos, factorDims[mu]);
}

TPoint TPoint::dyadicScaled(const IVec& j) const {
    requireSameDim(static_cast<int>(j.size()), nu(), "TPoint::dyadicScaled");
    TPoint out = *this;
    int pos = 0;
    for (int mu = 0; mu < nu(); ++mu) {
        const double s = std::ldexp(1.0, -j[mu]);
        out.coords.segment(pos, factorDims[mu]) *= s;
        pos += factorDims[mu];
    }
    return out;
}

void FlowConfig::validate() const {
    if (stepCount < 16) throw ConfigError("FlowConfig: stepCount must be >= 16");
    if (box.dim() == 0) throw ConfigError("FlowConfig: box not set");
    if (wEps <= 0 || wEps > 1e-2) throw ConfigError("FlowConfig: wEps out of range");
}

namespace {

// A few deterministic probe points for sizing the integration step.
Mat stepProbePoints(const Box& box) { return haltonPoints(box, 16); }

int effectiveSteps(const VectorField& v, double time, const FlowConfig& cfg) {
    const double sup = supNormOnPoints(v, stepProbePoints(cfg.box));
    const double scale = std::max(1.0, sup * std::abs(time));
    const double raw = std::ceil(cfg.stepCount * scale);
    return std::max(16, static_cast<int>(std::min(raw, 1e6)));
}

void requireInside(const Mat& pts, const Box& box, const char* where) {
    for (Eigen::Index c = 0; c < pts.cols(); ++c) {
        for (int d = 0; d < box.dim(); ++d) {
            if (pts(d, c) < box.lo[d] || pts(d, c) > box.hi[d]) {
                throw BoxExitError(std::string(where) + ": trajectory left the working box",
                                   pts.col(c));
            }
        }
    }
}

}  // namespace

Mat rk4FlowBatch(const VectorField& v, const Mat& pts, double time, const FlowConfig& cfg) {
    cfg.validate();
    requireSameDim(v.dim(), static_cast<int>(pts.rows()), "rk4FlowBatch");
    if (time == 0.0 || v.structurallyZero()) return pts;
    const int steps = effectiveSteps(v, time, cfg);
    const double h = time / steps;
    Mat y = pts;
    Mat k1, k2, k3, k4;
    for (int s = 0; s < steps; ++s) {
        k1 = v.evalBatch(y);
        k2 = v.evalBatch(y + (0.5 * h) * k1);
        k3 = v.evalBatch(y + (0.5 * h) * k2);
        k4 = v.evalBatch(y + h * k3);
        y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        requireInside(y, cfg.box, "rk4FlowBatch");
    }
    return y;
}

double tPower(const IVec& alpha, const Vec& t) {
    requireSameDim(static_cast<int>(alpha.size()), static_cast<int>(t.size()), "tPower");
    double p = 1.0;
    for (int i = 0; i < alpha.size(); ++i) {
        for (int e = 0; e < alpha[i]; ++e) p *= t[i];
    }
    return p;
}

VectorField frozenField(const GammaSpec& gamma, const TPoint& t) {
    std::vector<VectorField> fields;
    Vec weights(static_cast<Eigen::Index>(gamma.terms.size()));
    fields.reserve(gamma.terms.size());
    for (size_t i = 0; i < gamma.terms.size(); ++i) {
        fields.push_back(gamma.terms[i].field);
        weights[static_cast<Eigen::Index>(i)] = tPower(gamma.terms[i].alpha, t.coords);
    }
    return linearCombination(fields, weights);
}

Mat gammaFlowBatch(const GammaSpec& gamma, const TPoint& t, const Mat& pts,
                   const FlowConfig& cfg) {
    requireSameDim(t.dim(), gamma.tDim(), "gammaFlowBatch: t dimension");
    if (t.coords.isZero(0.0)) return pts;
    VectorField v = frozenField(gamma, t);
    if (v.structurallyZero()) return pts;
    return rk4FlowBatch(v, pts, 1.0, cfg);
}

Vec gammaFlow(const GammaSpec& gamma, const TPoint& t, const Vec& x, const FlowConfig& cfg) {
    Mat p(x.size(), 1);
    p.col(0) = x;
    return gammaFlowBatch(gamma, t, p, cfg).col(0);
}

namespace {

Mat newtonInverseBatch(const GammaSpec& gamma, const TPoint& t, const Mat& pts,
                       const FlowConfig& cfg) {
    const int n = static_cast<int>(pts.rows());
    Mat u = pts;
    const double fd = 1e-6;
    for (Eigen::Index c = 0; c < pts.cols(); ++c) {
        Vec uc = u.col(c);
        bool done = false;
        for (int it = 0; it < cfg.rootMaxIter; ++it) {
            const Vec r = gammaFlow(gamma, t, uc, cfg) - pts.col(c);
            if (r.norm() < cfg.rootTol) {
                done = true;
                break;
            }
            Mat shifts(n, 2 * n);
            for (int d = 0; d < n; ++d) {
                shifts.col(2 * d) = uc;
                shifts.col(2 * d)[d] += fd;
                shifts.col(2 * d + 1) = uc;
                shifts.col(2 * d + 1)[d] -= fd;
            }
            const Mat im = gammaFlowBatch(gamma, t, shifts, cfg);
            Mat jac(n, n);
            for (int d = 0; d < n; ++d)
                jac.col(d) = (im.col(2 * d) - im.col(2 * d + 1)) / (2.0 * fd);
            uc -= jac.partialPivLu().solve(r);
        }
        if (!done) {
            const double res = (gammaFlow(gamma, t, uc, cfg) - pts.col(c)).norm();
            if (res >= cfg.rootTol)
                throw PreconditionError("gammaInverse: Newton iteration did not converge", res);
        }
        u.col(c) = uc;
    }
    return u;
}

}  // namespace

Mat gammaInverseBatch(const GammaSpec& gamma, const TPoint& t, const Mat& pts,
                      const FlowConfig& cfg) {
    requireSameDim(t.dim(), gamma.tDim(), "gammaInverseBatch: t dimension");
    if (t.coords.isZero(0.0)) return pts;
    if (cfg.inverseMode == InverseMode::RootFind) return newtonInverseBatch(gamma, t, pts, cfg);
    VectorField v = frozenField(gamma, t);
    if (v.structurallyZero()) return pts;
    return rk4FlowBatch(v, pts, -1.0, cfg);
}

Vec gammaInverse(const GammaSpec& gamma, const TPoint& t, const Vec& x, const FlowConfig& cfg) {
    Mat p(x.size(), 1);
    p.col(0) = x;
    return gammaInverseBatch(gamma, t, p, cfg).col(0);
}

Vec thetaMap(const GammaSpec& gamma, const IVec& j, const IVec& k, const TPoint& s,
             const TPoint& t, const Vec& x, const FlowConfig& cfg) {
    const Vec mid = gammaInverse(gamma, s.dyadicScaled(j), x, cfg);
    return gammaFlow(gamma, t.dyadicScaled(k), mid, cfg);
}

Vec canonicalW(const GammaSpec& gamma, const TPoint& t, const Vec& x, const FlowConfig& cfg) {
    if (t.coords.isZero(0.0)) return Vec::Zero(x.size());
    const Vec y = gammaInverse(gamma, t, x, cfg);
    const double eps = cfg.wEps;
    const Vec plus = gammaFlow(gamma, t.scaled(1.0 + eps), y, cfg);
    const Vec minus = gammaFlow(gamma, t.scaled(1.0 - eps), y, cfg);
    return (plus - minus) / (2.0 * eps);
}

}  // namespace mpradon
