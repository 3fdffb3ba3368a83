#include "mpradon/fields.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace mpradon {

VectorField::VectorField(std::vector<Expr> coeffs)
    : dim_(static_cast<int>(coeffs.size())), symbolic_(true), coeffs_(std::move(coeffs)) {
    for (const Expr& e : coeffs_) {
        if (!e.isZero()) requireSameDim(e.dim(), dim_, "VectorField");
    }
}

VectorField::VectorField(int dim, BatchFn fn) : dim_(dim), symbolic_(false), fn_(std::move(fn)) {}

const Expr& VectorField::coeff(int i) const {
    if (!symbolic_) throw Error("VectorField::coeff: numeric field has no symbolic coefficients");
    return coeffs_[static_cast<size_t>(i)];
}

Vec VectorField::eval(const Vec& x) const {
    Mat p(x.size(), 1);
    p.col(0) = x;
    return evalBatch(p).col(0);
}

Mat VectorField::evalBatch(const Mat& pts) const {
    requireSameDim(dim_, static_cast<int>(pts.rows()), "VectorField::evalBatch");
    if (!symbolic_) return fn_(pts);
    Mat out(dim_, pts.cols());
    for (int i = 0; i < dim_; ++i) {
        if (coeffs_[static_cast<size_t>(i)].isZero())
            out.row(i).setZero();
        else
            out.row(i) = coeffs_[static_cast<size_t>(i)].evalBatch(pts).transpose();
    }
    return out;
}

bool VectorField::structurallyZero() const {
    if (!symbolic_) return false;
    for (const Expr& e : coeffs_)
        if (!e.isZero()) return false;
    return true;
}

VectorField addFields(const VectorField& a, const VectorField& b) {
    requireSameDim(a.dim(), b.dim(), "addFields");
    if (a.symbolic() && b.symbolic()) {
        std::vector<Expr> c;
        c.reserve(static_cast<size_t>(a.dim()));
        for (int i = 0; i < a.dim(); ++i) c.push_back(a.coeff(i) + b.coeff(i));
        return VectorField(std::move(c));
    }
    return VectorField(a.dim(), [a, b](const Mat& pts) { return a.evalBatch(pts) + b.evalBatch(pts); });
}

VectorField scaleField(const VectorField& a, double c) {
    if (a.symbolic()) {
        std::vector<Expr> s;
        s.reserve(static_cast<size_t>(a.dim()));
        for (int i = 0; i < a.dim(); ++i) s.push_back(a.coeff(i).scaled(c));
        return VectorField(std::move(s));
    }
    return VectorField(a.dim(), [a, c](const Mat& pts) { return (a.evalBatch(pts) * c).eval(); });
}

VectorField linearCombination(const std::vector<VectorField>& fields, const Vec& weights) {
    if (fields.empty()) throw DimensionError("linearCombination: empty field list");
    requireSameDim(static_cast<int>(fields.size()), static_cast<int>(weights.size()),
                   "linearCombination");
    bool allSym = true;
    for (const VectorField& f : fields) allSym = allSym && f.symbolic();
    const int dim = fields[0].dim();
    if (allSym) {
        std::vector<Expr> c(static_cast<size_t>(dim), Expr::zero(dim));
        for (size_t k = 0; k < fields.size(); ++k) {
            if (weights[static_cast<Eigen::Index>(k)] == 0.0) continue;
            for (int i = 0; i < dim; ++i)
                c[static_cast<size_t>(i)] =
                    c[static_cast<size_t>(i)] +
                    fields[k].coeff(i).scaled(weights[static_cast<Eigen::Index>(k)]);
        }
        return VectorField(std::move(c));
    }
    std::vector<VectorField> copies = fields;
    Vec w = weights;
    return VectorField(dim, [copies, w](const Mat& pts) {
        Mat out = Mat::Zero(pts.rows(), pts.cols());
        for (size_t k = 0; k < copies.size(); ++k) {
            if (w[static_cast<Eigen::Index>(k)] == 0.0) continue;
            out += w[static_cast<Eigen::Index>(k)] * copies[k].evalBatch(pts);
        }
        return out;
    });
}

namespace {

/// Directional derivative of f along the direction field values u, by central
/// differences with a per-point step scaled to the direction magnitude.
Mat directionalDerivative(const VectorField& f, const Mat& pts, const Mat& u, double fdStep) {
    const auto n = pts.cols();
    Mat plus = pts, minus = pts;
    Vec steps(n);
    for (Eigen::Index c = 0; c < n; ++c) {
        const double mag = u.col(c).template lpNorm<Eigen::Infinity>();
        const double s = fdStep / std::max(1.0, mag);
        steps[c] = s;
        plus.col(c) += s * u.col(c);
        minus.col(c) -= s * u.col(c);
    }
    Mat fp = f.evalBatch(plus);
    Mat fm = f.evalBatch(minus);
    for (Eigen::Index c = 0; c < n; ++c) fp.col(c) = (fp.col(c) - fm.col(c)) / (2.0 * steps[c]);
    return fp;
}

}  // namespace

VectorField lieBracket(const VectorField& x, const VectorField& y, double fdStep) {
    requireSameDim(x.dim(), y.dim(), "lieBracket");
    const int dim = x.dim();
    if (x.symbolic() && y.symbolic()) {
        std::vector<Expr> c(static_cast<size_t>(dim), Expr::zero(dim));
        for (int i = 0; i < dim; ++i) {
            Expr acc = Expr::zero(dim);
            for (int j = 0; j < dim; ++j) {
                if (!x.coeff(j).isZero() && !y.coeff(i).isZero())
                    acc = acc + x.coeff(j) * y.coeff(i).derivative(j);
                if (!y.coeff(j).isZero() && !x.coeff(i).isZero())
                    acc = acc - y.coeff(j) * x.coeff(i).derivative(j);
            }
            c[static_cast<size_t>(i)] = acc;
        }
        return VectorField(std::move(c));
    }
    VectorField xc = x, yc = y;
    return VectorField(dim, [xc, yc, fdStep](const Mat& pts) {
        const Mat xv = xc.evalBatch(pts);
        const Mat yv = yc.evalBatch(pts);
        return (directionalDerivative(yc, pts, xv, fdStep) -
                directionalDerivative(xc, pts, yv, fdStep))
            .eval();
    });
}

double supNormOnPoints(const VectorField& f, const Mat& pts) {
    return f.evalBatch(pts).array().abs().maxCoeff();
}

bool FormalDegree::isPure() const {
    int nonzero = 0;
    for (int i = 0; i < c.size(); ++i) {
        if (c[i] < 0) throw Error("FormalDegree: negative component");
        if (c[i] > 0) ++nonzero;
    }
    return nonzero == 1;
}

bool FormalDegree::operator<=(const FormalDegree& o) const {
    requireSameDim(nu(), o.nu(), "FormalDegree::operator<=");
    for (int i = 0; i < c.size(); ++i)
        if (c[i] > o.c[i]) return false;
    return true;
}

FormalDegree FormalDegree::operator+(const FormalDegree& o) const {
    requireSameDim(nu(), o.nu(), "FormalDegree::operator+");
    return FormalDegree{c + o.c};
}

int GammaSpec::xDim() const {
    if (terms.empty()) throw ConfigError("GammaSpec: no terms");
    return terms[0].field.dim();
}

FormalDegree GammaSpec::degreeOf(const IVec& alpha) const {
    requireSameDim(static_cast<int>(alpha.size()), tDim(), "GammaSpec::degreeOf");
    IVec d = IVec::Zero(nu);
    int pos = 0;
    for (int mu = 0; mu < nu; ++mu) {
        for (int i = 0; i < factorDims[mu]; ++i) d[mu] += alpha[pos + i];
        pos += factorDims[mu];
    }
    return FormalDegree{d};
}

void GammaSpec::validate() const {
    if (nu <= 0 || factorDims.size() != nu) throw ConfigError("GammaSpec: bad factor layout");
    for (int mu = 0; mu < nu; ++mu)
        if (factorDims[mu] <= 0) throw ConfigError("GammaSpec: factor dimension must be positive");
    if (terms.empty()) throw ConfigError("GammaSpec: no terms");
    const int n = terms[0].field.dim();
    std::set<std::string> seen;
    for (const Term& t : terms) {
        requireSameDim(static_cast<int>(t.alpha.size()), tDim(), "GammaSpec term alpha");
        requireSameDim(t.field.dim(), n, "GammaSpec term field");
        int total = 0;
        for (int i = 0; i < t.alpha.size(); ++i) {
            if (t.alpha[i] < 0) throw ConfigError("GammaSpec: negative multi-index entry");
            total += t.alpha[i];
        }
        if (total < 1) throw ConfigError("GammaSpec: |alpha| must be >= 1");
        if (maxOrder > 0 && total > maxOrder) throw ConfigError("GammaSpec: |alpha| exceeds maxOrder");
        if (!seen.insert(multiIndexLabel(t.alpha)).second)
            throw ConfigError("GammaSpec: duplicate multi-index " + multiIndexLabel(t.alpha));
    }
}

std::string multiIndexLabel(const IVec& alpha) {
    std::string s = "X(";
    for (int i = 0; i < alpha.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(alpha[i]);
    }
    return s + ")";
}

std::vector<DegreedField> GammaSpec::pureFields() const {
    std::vector<DegreedField> out;
    for (const Term& t : terms) {
        FormalDegree d = degreeOf(t.alpha);
        if (d.isPure()) out.push_back({t.field, d, multiIndexLabel(t.alpha), 1});
    }
    return out;
}

std::vector<DegreedField> GammaSpec::nonPureFields() const {
    std::vector<DegreedField> out;
    for (const Term& t : terms) {
        FormalDegree d = degreeOf(t.alpha);
        if (!d.isPure()) out.push_back({t.field, d, multiIndexLabel(t.alpha), 1});
    }
    return out;
}

std::vector<DegreedField> generateClosure(const GammaSpec& gamma, const ClosureConfig& cfg) {
    gamma.validate();
    std::vector<DegreedField> pure = gamma.pureFields();
    if (pure.empty())
        throw PreconditionError("generateClosure: gamma has no pure-power terms");
    if (cfg.probeBox.dim() != gamma.xDim())
        throw DimensionError("generateClosure: probe box dimension != field dimension");

    const Mat probes = haltonPoints(cfg.probeBox, cfg.probeCount);
    auto isNumericallyZero = [&](const VectorField& f) {
        if (f.structurallyZero()) return true;
        return supNormOnPoints(f, probes) < cfg.zeroTol;
    };
    auto degreeOk = [&](const FormalDegree& d) {
        for (int i = 0; i < d.c.size(); ++i)
            if (d.c[i] > cfg.maxDegreePerComponent) return false;
        return true;
    };

    std::vector<DegreedField> elements;
    std::vector<std::vector<size_t>> byDepth(static_cast<size_t>(cfg.maxBracketDepth) + 1);
    std::set<std::string> labels;
    for (const DegreedField& f : pure) {
        if (!labels.insert(f.label).second) continue;
        byDepth[1].push_back(elements.size());
        elements.push_back(f);
    }

    for (int d = 2; d <= cfg.maxBracketDepth; ++d) {
        for (int d1 = 1; 2 * d1 <= d; ++d1) {
            const int d2 = d - d1;
            for (size_t ia : byDepth[static_cast<size_t>(d1)]) {
                for (size_t ib : byDepth[static_cast<size_t>(d2)]) {
                    if (d1 == d2 && ib <= ia) continue;
                    const DegreedField& a = elements[ia];
                    const DegreedField& b = elements[ib];
                    FormalDegree deg = a.degree + b.degree;
                    if (!degreeOk(deg)) continue;
                    std::string label = "[" + a.label + "," + b.label + "]";
                    if (labels.count(label)) continue;
                    VectorField br = lieBracket(a.field, b.field);
                    if (isNumericallyZero(br)) continue;
                    labels.insert(label);
                    byDepth[static_cast<size_t>(d)].push_back(elements.size());
                    elements.push_back({std::move(br), deg, std::move(label), d});
                }
            }
        }
    }

    std::sort(elements.begin(), elements.end(), [](const DegreedField& a, const DegreedField& b) {
        if (a.degree.total() != b.degree.total()) return a.degree.total() < b.degree.total();
        if (a.depth != b.depth) return a.depth < b.depth;
        return a.label < b.label;
    });
    return elements;
}

Mat conditionProbes(const Box& box, int haltonCount, int approachLevels) {
    const int dim = box.dim();
    const Mat halton = haltonPoints(box, haltonCount);
    const Vec center = box.center();
    const Vec half = box.halfWidth();
    Mat out(dim, haltonCount + 1 + 2 * dim * approachLevels);
    out.leftCols(haltonCount) = halton;
    Eigen::Index col = haltonCount;
    out.col(col++) = center;
    for (int d = 0; d < dim; ++d) {
        for (int m = 1; m <= approachLevels; ++m) {
            const double step = std::ldexp(half[d], -m);
            Vec plus = center, minus = center;
            plus[d] += step;
            minus[d] -= step;
            out.col(col++) = plus;
            out.col(col++) = minus;
        }
    }
    return out;
}

namespace {

struct SpanOutcome {
    bool ok = true;
    double worstResidual = 0.0;
    double worstCoeff = 0.0;
    double worstBadness = 0.0;
    std::string witnessLabel;
    Vec witnessPoint;
};

/// Degree-filtered pointwise least-squares span of each target by the
/// candidates, minimum-norm solutions, residual and coefficient caps.
SpanOutcome spanCheck(const std::vector<DegreedField>& targets,
                      const std::vector<DegreedField>& candidates, const Mat& probes,
                      const SpanCheckConfig& cfg) {
    SpanOutcome out;
    if (targets.empty()) return out;
    const int n = targets[0].field.dim();

    std::vector<Mat> candVals;
    candVals.reserve(candidates.size());
    for (const DegreedField& c : candidates) candVals.push_back(c.field.evalBatch(probes));

    for (const DegreedField& tgt : targets) {
        std::vector<int> eligible;
        for (size_t ci = 0; ci < candidates.size(); ++ci)
            if (candidates[ci].degree <= tgt.degree) eligible.push_back(static_cast<int>(ci));
        const Mat tgtVals = tgt.field.evalBatch(probes);

        for (Eigen::Index p = 0; p < probes.cols(); ++p) {
            const Vec b = tgtVals.col(p);
            double residual, coeffNorm = 0.0;
            if (eligible.empty()) {
                residual = b.norm();
            } else {
                Mat A(n, static_cast<Eigen::Index>(eligible.size()));
                for (size_t e = 0; e < eligible.size(); ++e)
                    A.col(static_cast<Eigen::Index>(e)) = candVals[static_cast<size_t>(eligible[e])].col(p);
                Eigen::CompleteOrthogonalDecomposition<Mat> cod(A);
                const Vec c = cod.solve(b);
                residual = (A * c - b).norm();
                coeffNorm = c.size() ? c.cwiseAbs().maxCoeff() : 0.0;
            }
            // Relative residual: a target too small for the solver to resolve
            // against the surviving columns still counts as unspanned.
            residual /= std::max(b.norm(), 1e-30);
            out.worstResidual = std::max(out.worstResidual, residual);
            out.worstCoeff = std::max(out.worstCoeff, coeffNorm);
            const double badness =
                std::max(residual / cfg.spanTol, coeffNorm / cfg.coeffBound);
            if (badness > out.worstBadness) {
                out.worstBadness = badness;
                out.witnessLabel = tgt.label;
                out.witnessPoint = probes.col(p);
            }
            if (residual >= cfg.spanTol || coeffNorm > cfg.coeffBound) out.ok = false;
        }
    }
    return out;
}

ConditionReport reportFromSpan(const SpanOutcome& s, const std::string& what) {
    ConditionReport r;
    r.satisfied = s.ok;
    r.worstResidual = s.worstResidual;
    r.worstCoeffNorm = s.worstCoeff;
    r.witnessLabel = s.witnessLabel;
    r.witnessPoint = s.witnessPoint;
    r.summary = what + (s.ok ? ": satisfied" : ": violated at " + s.witnessLabel);
    return r;
}

}  // namespace

ConditionReport checkFiniteType(const std::vector<DegreedField>& closure,
                                const std::vector<DegreedField>& candidateF,
                                const Mat& probes, const SpanCheckConfig& cfg) {
    return reportFromSpan(spanCheck(closure, candidateF, probes, cfg), "finite-type span");
}

ConditionReport checkAlgebraic(const GammaSpec& gamma,
                               const std::vector<DegreedField>& closure,
                               const Mat& probes, const SpanCheckConfig& cfg) {
    std::vector<DegreedField> targets = gamma.nonPureFields();
    if (gamma.nu == 1 || targets.empty()) {
        ConditionReport r;
        r.satisfied = true;
        r.summary = "algebraic condition: vacuously satisfied (no non-pure terms)";
        return r;
    }
    return reportFromSpan(spanCheck(targets, closure, probes, cfg), "algebraic span");
}

ConditionReport checkHormander(const std::vector<VectorField>& fields, const Vec& point,
                               int maxDepth, double rankTol) {
    if (fields.empty()) throw PreconditionError("checkHormander: empty field list");
    const int n = fields[0].dim();
    requireSameDim(n, static_cast<int>(point.size()), "checkHormander");

    std::vector<std::vector<VectorField>> byDepth(static_cast<size_t>(maxDepth) + 1);
    byDepth[1] = fields;

    ConditionReport r;
    r.satisfied = false;
    std::vector<Vec> collected;

    auto currentRank = [&](double* smallestKept) {
        if (collected.empty()) return 0;
        Mat m(n, static_cast<Eigen::Index>(collected.size()));
        for (size_t i = 0; i < collected.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = collected[i];
        Eigen::JacobiSVD<Mat> svd(m);
        int rank = 0;
        double kept = 0.0;
        for (int i = 0; i < svd.singularValues().size(); ++i) {
            if (svd.singularValues()[i] > rankTol) {
                ++rank;
                kept = svd.singularValues()[i];
            }
        }
        if (smallestKept) *smallestKept = kept;
        return rank;
    };

    for (int d = 1; d <= maxDepth; ++d) {
        if (d >= 2) {
            for (int d1 = 1; 2 * d1 <= d; ++d1) {
                const int d2 = d - d1;
                for (size_t ia = 0; ia < byDepth[static_cast<size_t>(d1)].size(); ++ia) {
                    const size_t bStart = (d1 == d2) ? ia + 1 : 0;
                    for (size_t ib = bStart; ib < byDepth[static_cast<size_t>(d2)].size(); ++ib) {
                        byDepth[static_cast<size_t>(d)].push_back(lieBracket(
                            byDepth[static_cast<size_t>(d1)][ia], byDepth[static_cast<size_t>(d2)][ib]));
                    }
                }
            }
        }
        for (const VectorField& f : byDepth[static_cast<size_t>(d)]) collected.push_back(f.eval(point));
        double kept = 0.0;
        const int rank = currentRank(&kept);
        r.rank = rank;
        r.smallestKeptSingular = kept;
        if (rank == n) {
            r.satisfied = true;
            r.depthUsed = d;
            r.summary = "spanning condition: full rank " + std::to_string(n) + " at depth " +
                        std::to_string(d);
            return r;
        }
    }
    r.depthUsed = maxDepth;
    r.summary = "spanning condition: rank " + std::to_string(r.rank) + " < " + std::to_string(n) +
                " up to depth " + std::to_string(maxDepth);
    return r;
}

ConditionReport finiteTypeVerdict(const std::vector<DegreedField>& closure,
                                  const Mat& probes, const SpanCheckConfig& cfg,
                                  int maxBracketDepth) {
    ConditionReport last;
    last.satisfied = false;
    last.summary = "finite-type: empty closure";
    for (int d = 1; d < maxBracketDepth; ++d) {
        std::vector<DegreedField> prefix;
        bool hasDeeper = false;
        for (const DegreedField& e : closure) {
            if (e.depth <= d)
                prefix.push_back(e);
            else
                hasDeeper = true;
        }
        if (prefix.empty()) continue;
        if (!hasDeeper) {
            ConditionReport r = checkFiniteType(closure, prefix, probes, cfg);
            r.depthUsed = d;
            r.summary = "finite-type: closure stabilized at depth " + std::to_string(d);
            return r;
        }
        ConditionReport r = checkFiniteType(closure, prefix, probes, cfg);
        r.depthUsed = d;
        if (r.satisfied) {
            r.summary = "finite-type: spanned by depth-" + std::to_string(d) + " prefix";
            return r;
        }
        last = r;
        last.summary = "finite-type: no depth prefix spans the deeper closure elements";
    }
    return last;
}

}  // namespace mpradon
