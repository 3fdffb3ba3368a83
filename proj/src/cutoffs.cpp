#include "mpradon/cutoffs.hpp"

#include <cmath>

namespace mpradon {

namespace {
double expBranch(double v) { return v > 0.0 ? std::exp(-1.0 / v) : 0.0; }
}  // namespace

double plateauProfile(double r, double plateau, double support) {
    if (support <= plateau) throw ConfigError("plateauProfile: support must exceed plateau");
    const double a = std::abs(r);
    if (a <= plateau) return 1.0;
    if (a >= support) return 0.0;
    const double u = (a - plateau) / (support - plateau);
    const double up = expBranch(1.0 - u);
    const double dn = expBranch(u);
    return up / (up + dn);
}

double SmoothCutoff::eval(const Vec& x) const {
    requireSameDim(box.dim(), static_cast<int>(x.size()), "SmoothCutoff::eval");
    const Vec c = box.center();
    const Vec h = box.halfWidth();
    double v = 1.0;
    for (int d = 0; d < box.dim(); ++d) {
        v *= plateauProfile((x[d] - c[d]) / h[d], plateauFrac, supportFrac);
        if (v == 0.0) break;
    }
    return v;
}

Vec SmoothCutoff::evalBatch(const Mat& pts) const {
    Vec out(pts.cols());
    for (Eigen::Index c = 0; c < pts.cols(); ++c) out[c] = eval(pts.col(c));
    return out;
}

CutoffSet CutoffSet::defaults(const Box& box) {
    CutoffSet s;
    s.psi = SmoothCutoff{box, 0.35, 0.55};
    s.psi0 = SmoothCutoff{box, 0.5, 0.8};
    s.psi1 = SmoothCutoff{box, 0.4, 0.6};
    s.psi2 = SmoothCutoff{box, 0.3, 0.45};
    return s;
}

void CutoffSet::validateNesting() const {
    if (!(psi2.supportFrac < psi1.supportFrac && psi1.supportFrac < psi0.supportFrac))
        throw ConfigError("CutoffSet: supports must nest strictly (psi2 in psi1 in psi0)");
    for (const SmoothCutoff* c : {&psi, &psi0, &psi1, &psi2}) {
        if (!(c->plateauFrac > 0.0 && c->plateauFrac < c->supportFrac))
            throw ConfigError("CutoffSet: each member needs a nonempty plateau");
    }
}

double SigmaBump::eval(const Vec& t) const {
    requireSameDim(dim, static_cast<int>(t.size()), "SigmaBump::eval");
    double v = 1.0;
    for (int d = 0; d < dim; ++d) {
        v *= plateauProfile(t[d], plateau, support);
        if (v == 0.0) break;
    }
    return v;
}

Vec SigmaBump::evalBatch(const Mat& ts) const {
    Vec out(ts.cols());
    for (Eigen::Index c = 0; c < ts.cols(); ++c) out[c] = eval(ts.col(c));
    return out;
}

double SigmaBump::quadIntegral(int pointsPerAxis) const {
    // tensor structure: the integral is the 1-D integral to the dim-th power
    const double h = 2.0 * support / pointsPerAxis;
    double one = 0.0;
    for (int i = 0; i < pointsPerAxis; ++i) {
        const double t = -support + (i + 0.5) * h;
        one += plateauProfile(t, plateau, support) * h;
    }
    double v = 1.0;
    for (int d = 0; d < dim; ++d) v *= one;
    return v;
}

}  // namespace mpradon
