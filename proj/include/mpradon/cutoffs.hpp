#pragma once

#include "mpradon/common.hpp"

namespace mpradon {

/// C-infinity plateau profile of a scalar radius: 1 on [0, plateau], 0 beyond
/// support, strictly between on the transition band.
double plateauProfile(double r, double plateau, double support);

/// Tensor-product plateau cutoff over a box: the product over dimensions of
/// 1-D profiles in the centered, half-width-scaled coordinate. Identically 1
/// on the plateau sub-box, supported in the support sub-box.
struct SmoothCutoff {
    Box box;
    double plateauFrac = 0.5;
    double supportFrac = 0.8;

    double eval(const Vec& x) const;
    Vec evalBatch(const Mat& pts) const;
};

/// Cutoffs used by the operator builders; supports nest strictly
/// (supp psi2 inside supp psi1 inside supp psi0) and every member is 1 on an
/// inner plateau box.
struct CutoffSet {
    SmoothCutoff psi;
    SmoothCutoff psi0;
    SmoothCutoff psi1;
    SmoothCutoff psi2;

    static CutoffSet defaults(const Box& box);
    /// Error unless the supports nest strictly and each plateau is nonempty.
    void validateNesting() const;
};

/// Nonnegative tensor bump in t-space with value identically 1 near 0.
struct SigmaBump {
    int dim = 1;
    double plateau = 0.1;
    double support = 0.25;

    double eval(const Vec& t) const;
    Vec evalBatch(const Mat& ts) const;
    Box supportBox() const { return Box::cube(dim, support); }
    /// Quadrature value of the integral; the module-wide convention for [int sigma].
    double quadIntegral(int pointsPerAxis = 128) const;
};

}  // namespace mpradon
