#include "mpradon/operators.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>

namespace mpradon {

GridFunction DiscretizedOperator::apply(const GridFunction& f) const {
    if (!(*f.grid == *grid)) throw DimensionError(label + ": grid mismatch in apply");
    return GridFunction(grid, applyFn(f.values));
}

GridFunction DiscretizedOperator::applyAdjoint(const GridFunction& f) const {
    if (!(*f.grid == *grid)) throw DimensionError(label + ": grid mismatch in applyAdjoint");
    return GridFunction(grid, adjointFn(f.values));
}

DiscretizedOperator identityOp(std::shared_ptr<const Grid> g) {
    auto id = [](const Vec& v) { return v; };
    return DiscretizedOperator{g, "I", id, id};
}

DiscretizedOperator zeroOp(std::shared_ptr<const Grid> g) {
    const long n = g->count();
    auto z = [n](const Vec&) { return Vec(Vec::Zero(n)); };
    return DiscretizedOperator{g, "0", z, z};
}

DiscretizedOperator multiplyOp(const GridFunction& m, const std::string& label) {
    Vec vals = m.values;
    auto mul = [vals](const Vec& v) { return Vec(vals.array() * v.array()); };
    return DiscretizedOperator{m.grid, label, mul, mul};
}

DiscretizedOperator multiplyCutoffOp(std::shared_ptr<const Grid> g, const SmoothCutoff& c,
                                     int power, const std::string& label) {
    Vec vals = c.evalBatch(g->allPoints());
    if (power != 1) vals = vals.array().pow(power).matrix();
    return multiplyOp(GridFunction(g, vals), label);
}

DiscretizedOperator composeOp(const DiscretizedOperator& a, const DiscretizedOperator& b) {
    if (!(*a.grid == *b.grid)) throw DimensionError("composeOp: grid mismatch");
    auto af = a.applyFn, bf = b.applyFn, aT = a.adjointFn, bT = b.adjointFn;
    return DiscretizedOperator{a.grid, a.label + "*" + b.label,
                               [af, bf](const Vec& v) { return af(bf(v)); },
                               [aT, bT](const Vec& v) { return bT(aT(v)); }};
}

DiscretizedOperator sumOp(std::vector<DiscretizedOperator> ops, const std::string& label) {
    if (ops.empty()) throw ConfigError("sumOp: empty operand list");
    for (const auto& o : ops)
        if (!(*o.grid == *ops.front().grid)) throw DimensionError("sumOp: grid mismatch");
    auto grid = ops.front().grid;
    auto shared = std::make_shared<std::vector<DiscretizedOperator>>(std::move(ops));
    return DiscretizedOperator{
        grid, label,
        [shared](const Vec& v) {
            Vec out = (*shared)[0].applyFn(v);
            for (size_t i = 1; i < shared->size(); ++i) out += (*shared)[i].applyFn(v);
            return out;
        },
        [shared](const Vec& v) {
            Vec out = (*shared)[0].adjointFn(v);
            for (size_t i = 1; i < shared->size(); ++i) out += (*shared)[i].adjointFn(v);
            return out;
        }};
}

DiscretizedOperator scaleOp(double c, const DiscretizedOperator& a) {
    auto af = a.applyFn, aT = a.adjointFn;
    return DiscretizedOperator{a.grid, formatDouble(c) + "*" + a.label,
                               [af, c](const Vec& v) { return Vec(c * af(v)); },
                               [aT, c](const Vec& v) { return Vec(c * aT(v)); }};
}

DiscretizedOperator adjointOp(const DiscretizedOperator& a) {
    return DiscretizedOperator{a.grid, a.label + "^T", a.adjointFn, a.applyFn};
}

Mat materialize(const DiscretizedOperator& op, long maxNodes) {
    const long n = op.grid->count();
    if (n > maxNodes)
        throw ConfigError("materialize: grid has " + std::to_string(n) +
                          " nodes, above the dense threshold " + std::to_string(maxNodes));
    Mat m(n, n);
    Vec e = Vec::Zero(n);
    for (long i = 0; i < n; ++i) {
        e[i] = 1.0;
        m.col(i) = op.applyFn(e);
        e[i] = 0.0;
    }
    return m;
}

std::vector<IVec> enumerateIndices(const IVec& truncation) {
    for (int d = 0; d < truncation.size(); ++d)
        if (truncation[d] < 0) throw ConfigError("enumerateIndices: negative truncation");
    std::vector<IVec> out;
    IVec j = IVec::Zero(truncation.size());
    for (;;) {
        out.push_back(j);
        int d = 0;
        for (; d < truncation.size(); ++d) {
            if (++j[d] <= truncation[d]) break;
            j[d] = 0;
        }
        if (d == truncation.size()) break;
    }
    return out;
}

long indexCount(const IVec& truncation) {
    long c = 1;
    for (int d = 0; d < truncation.size(); ++d) c *= truncation[d] + 1;
    return c;
}

long flattenIndex(const IVec& j, const IVec& truncation) {
    long flat = 0, stride = 1;
    for (int d = 0; d < truncation.size(); ++d) {
        if (j[d] < 0 || j[d] > truncation[d]) throw ConfigError("flattenIndex: out of range");
        flat += stride * j[d];
        stride *= truncation[d] + 1;
    }
    return flat;
}

ExtIVec allInfinite(int nu) { return ExtIVec(nu, ExtIndex::inf()); }

ExtIVec allFinite(const IVec& j) {
    ExtIVec out;
    for (int d = 0; d < j.size(); ++d) out.push_back(ExtIndex::at(j[d]));
    return out;
}

FlowQuadrature makeFlowQuadrature(const GammaSpec& gamma, const Mat& nodes, double weight,
                                  std::shared_ptr<const Grid> grid, const FlowConfig& cfg) {
    FlowQuadrature fq;
    fq.nodes = nodes;
    fq.weight = weight;
    const Mat pts = grid->allPoints();
    fq.tables.reserve(nodes.cols());
    for (Eigen::Index q = 0; q < nodes.cols(); ++q) {
        const TPoint t{nodes.col(q), gamma.factorDims};
        try {
            fq.tables.push_back(makeGatherTable(grid, gammaFlowBatch(gamma, t, pts, cfg)));
        } catch (const BoxExitError& e) {
            std::ostringstream msg;
            msg << "flow left the safety box at parameter node t = "
                << vecToString(nodes.col(q)) << ", trajectory point " << vecToString(e.exitPoint);
            throw BoxExitError(msg.str(), e.exitPoint);
        }
    }
    return fq;
}

namespace {

struct AverageData {
    std::shared_ptr<const FlowQuadrature> fq;
    Vec weights;            // per node, quadrature weight folded in
    Vec outer;              // outer multiplier on the grid
    std::vector<Vec> inner; // optional per-node multiplier at the flow targets
};

Vec averageApply(const std::shared_ptr<const AverageData>& d, const Vec& v) {
    Vec out = Vec::Zero(v.size());
    for (size_t q = 0; q < d->fq->tables.size(); ++q) {
        if (d->weights[q] == 0.0) continue;
        Vec g = applyGather(d->fq->tables[q], v);
        if (!d->inner.empty()) g.array() *= d->inner[q].array();
        out += d->weights[q] * g;
    }
    out.array() *= d->outer.array();
    return out;
}

Vec averageAdjoint(const std::shared_ptr<const AverageData>& d, const Vec& v) {
    const Vec w = (d->outer.array() * v.array()).matrix();
    Vec out = Vec::Zero(v.size());
    for (size_t q = 0; q < d->fq->tables.size(); ++q) {
        if (d->weights[q] == 0.0) continue;
        Vec h = w;
        if (!d->inner.empty()) h.array() *= d->inner[q].array();
        out += d->weights[q] * applyScatter(d->fq->tables[q], h);
    }
    return out;
}

/// Value of the j-th dilated family member 2^{j.N} eta_j(2^j t).
double dilatedMemberValue(const BumpFamily& family, const IVec& j, const Vec& t) {
    double amp = 1.0;
    Vec ts(t.size());
    int pos = 0;
    for (int mu = 0; mu < family.factorDims.size(); ++mu) {
        const double s = std::ldexp(1.0, j[mu]);
        amp *= std::pow(s, family.factorDims[mu]);
        for (int i = 0; i < family.factorDims[mu]; ++i) ts[pos + i] = t[pos + i] * s;
        pos += family.factorDims[mu];
    }
    return amp * family.evalMember(j, ts);
}

TPoint scaledPerFactor(const Vec& coords, const IVec& factorDims, const Vec& delta) {
    Vec out = coords;
    int pos = 0;
    for (int mu = 0; mu < factorDims.size(); ++mu) {
        out.segment(pos, factorDims[mu]) *= delta[mu];
        pos += factorDims[mu];
    }
    return TPoint{out, factorDims};
}

/// Spectral norm estimate via power iteration on adjoint(apply(.)); local
/// helper for the Neumann contraction precondition.
double roughNorm2(const std::function<Vec(const Vec&)>& apply,
                  const std::function<Vec(const Vec&)>& adjoint, long n, double tol, int maxIter,
                  std::uint64_t seed) {
    auto rng = makeRng(seed);
    std::normal_distribution<double> gauss;
    Vec v(n);
    for (long i = 0; i < n; ++i) v[i] = gauss(rng);
    v.normalize();
    double lambda = 0.0;
    for (int it = 0; it < maxIter; ++it) {
        Vec w = adjoint(apply(v));
        const double nl = w.norm();
        if (nl == 0.0) return 0.0;
        w /= nl;
        if (std::abs(nl - lambda) <= tol * std::max(1.0, nl)) {
            lambda = nl;
            break;
        }
        lambda = nl;
        v = w;
    }
    return std::sqrt(lambda);
}

}  // namespace

DiscretizedOperator flowAverageOp(std::shared_ptr<const Grid> grid,
                                  std::shared_ptr<const FlowQuadrature> fq, Vec nodeWeights,
                                  Vec outer, std::vector<Vec> inner, const std::string& label) {
    if (nodeWeights.size() != static_cast<Eigen::Index>(fq->tables.size()))
        throw DimensionError("flowAverageOp: one weight per quadrature node required");
    auto data = std::make_shared<AverageData>(
        AverageData{std::move(fq), std::move(nodeWeights), std::move(outer), std::move(inner)});
    return DiscretizedOperator{grid, label,
                               [data](const Vec& v) { return averageApply(data, v); },
                               [data](const Vec& v) { return averageAdjoint(data, v); }};
}

DiscretizedOperator buildT(const ProductKernelSpec& spec, const SmoothCutoff& psi,
                           std::shared_ptr<const Grid> grid,
                           std::shared_ptr<const FlowQuadrature> fq) {
    Vec w(fq->nodes.cols());
    for (Eigen::Index q = 0; q < fq->nodes.cols(); ++q)
        w[q] = fq->weight * spec.eval(fq->nodes.col(q));
    return flowAverageOp(grid, fq, std::move(w), psi.evalBatch(grid->allPoints()), {}, "T");
}

DiscretizedOperator buildTjShared(const BumpFamily& family, const IVec& j,
                                  const SmoothCutoff& psi, std::shared_ptr<const Grid> grid,
                                  std::shared_ptr<const FlowQuadrature> fq) {
    Vec w(fq->nodes.cols());
    for (Eigen::Index q = 0; q < fq->nodes.cols(); ++q)
        w[q] = fq->weight * dilatedMemberValue(family, j, fq->nodes.col(q));
    return flowAverageOp(grid, fq, std::move(w), psi.evalBatch(grid->allPoints()), {},
                         "T_" + ivecToString(j));
}

DiscretizedOperator buildTj(const GammaSpec& gamma, const BumpFamily& family, const IVec& j,
                            const SmoothCutoff& psi, std::shared_ptr<const Grid> grid,
                            int quadPerAxis, const FlowConfig& flowCfg) {
    const QuadratureRule rule = midpointQuadrature(family.supportBox(), quadPerAxis);
    Mat scaled(rule.nodes.rows(), rule.nodes.cols());
    Vec w(rule.nodes.cols());
    for (Eigen::Index q = 0; q < rule.nodes.cols(); ++q) {
        const TPoint t = TPoint{rule.nodes.col(q), family.factorDims}.dyadicScaled(j);
        scaled.col(q) = t.coords;
        w[q] = rule.weight * family.evalMember(j, rule.nodes.col(q));
    }
    auto fq = std::make_shared<FlowQuadrature>(
        makeFlowQuadrature(gamma, scaled, rule.weight, grid, flowCfg));
    return flowAverageOp(grid, fq, std::move(w), psi.evalBatch(grid->allPoints()), {},
                         "T_" + ivecToString(j));
}

DiscretizedOperator buildScaleAverage(const std::vector<DegreedField>& factorFields, int scale,
                                      const SmoothCutoff& inner,
                                      std::shared_ptr<const Grid> grid,
                                      const FactorAverageConfig& cfg) {
    if (factorFields.empty())
        throw PreconditionError("buildScaleAverage: empty factor field list");
    const int q = static_cast<int>(factorFields.size());
    IVec degrees(q);
    Vec radii(q);
    for (int i = 0; i < q; ++i) {
        degrees[i] = factorFields[i].degree.total();
        if (degrees[i] < 1) throw ConfigError("buildScaleAverage: degree must be >= 1");
        radii[i] = cfg.radius * std::ldexp(1.0, -degrees[i]);
    }
    const Box supp{-radii, radii};
    const QuadratureRule rule = midpointQuadrature(supp, cfg.quadPerAxis);

    // synthetic one-factor parameter map t -> sum t_i X_i
    GammaSpec flowSpec;
    flowSpec.nu = 1;
    flowSpec.factorDims = IVec::Constant(1, q);
    flowSpec.maxOrder = 1;
    for (int i = 0; i < q; ++i) {
        IVec alpha = IVec::Zero(q);
        alpha[i] = 1;
        flowSpec.terms.push_back({alpha, factorFields[i].field});
    }

    // self-normalized mollifier weights: the discrete measure has unit mass
    Vec w(rule.nodes.cols());
    const double mass = mollifierMass();
    for (Eigen::Index c = 0; c < rule.nodes.cols(); ++c) {
        double v = 1.0;
        for (int i = 0; i < q; ++i) v *= mollifierRaw(rule.nodes(i, c) / radii[i]) / (radii[i] * mass);
        w[c] = rule.weight * v;
    }
    w /= w.sum();

    Mat scaled(q, rule.nodes.cols());
    for (Eigen::Index c = 0; c < rule.nodes.cols(); ++c)
        for (int i = 0; i < q; ++i)
            scaled(i, c) = std::ldexp(rule.nodes(i, c), -scale * degrees[i]);

    const Mat pts = grid->allPoints();
    auto fq = std::make_shared<FlowQuadrature>();
    fq->nodes = scaled;
    fq->weight = rule.weight;
    std::vector<Vec> innerVals;
    fq->tables.reserve(scaled.cols());
    innerVals.reserve(scaled.cols());
    for (Eigen::Index c = 0; c < scaled.cols(); ++c) {
        const TPoint t{scaled.col(c), flowSpec.factorDims};
        Mat targets;
        try {
            targets = gammaFlowBatch(flowSpec, t, pts, cfg.flow);
        } catch (const BoxExitError& e) {
            throw BoxExitError("scale average flow left the safety box at t = " +
                                   vecToString(scaled.col(c)),
                               e.exitPoint);
        }
        fq->tables.push_back(makeGatherTable(grid, targets));
        innerVals.push_back(inner.evalBatch(targets));
    }
    return flowAverageOp(grid, fq, std::move(w), Vec::Ones(grid->count()),
                         std::move(innerVals), "S_" + std::to_string(scale));
}

DiscretizedOperator buildDjMu(const std::vector<DegreedField>& factorFields, int j,
                              const CutoffSet& cutoffs, std::shared_ptr<const Grid> grid,
                              const FactorAverageConfig& cfg) {
    if (j < 0) throw ConfigError("buildDjMu: negative scale");
    const DiscretizedOperator outer = multiplyCutoffOp(grid, cutoffs.psi0, 1, "psi0");
    if (j == 0)
        return composeOp(outer, buildScaleAverage(factorFields, 0, cutoffs.psi0, grid, cfg));
    DiscretizedOperator fine = buildScaleAverage(factorFields, j, cutoffs.psi0, grid, cfg);
    DiscretizedOperator coarse = buildScaleAverage(factorFields, j - 1, cutoffs.psi0, grid, cfg);
    DiscretizedOperator diff = sumOp({fine, scaleOp(-1.0, coarse)}, "dS_" + std::to_string(j));
    DiscretizedOperator op = composeOp(outer, diff);
    op.label = "D_" + std::to_string(j);
    return op;
}

DjBank::DjBank(std::vector<std::vector<DegreedField>> factorFields, IVec truncation,
               CutoffSet cutoffs, std::shared_ptr<const Grid> grid, FactorAverageConfig cfg)
    : factorFields_(std::move(factorFields)),
      truncation_(std::move(truncation)),
      cutoffs_(std::move(cutoffs)),
      grid_(std::move(grid)),
      cfg_(std::move(cfg)) {
    if (static_cast<int>(factorFields_.size()) != truncation_.size())
        throw DimensionError("DjBank: one truncation entry per factor required");
    for (const auto& fl : factorFields_)
        if (fl.empty())
            throw PreconditionError("DjBank: a factor has no pure-degree fields");
    scaleCache_.resize(factorFields_.size());
    for (size_t mu = 0; mu < factorFields_.size(); ++mu)
        scaleCache_[mu].resize(truncation_[mu] + 1);
}

const DiscretizedOperator& DjBank::scaleAverage(int mu, int m) const {
    if (mu < 0 || mu >= nu()) throw ConfigError("DjBank: factor out of range");
    if (m < 0 || m > truncation_[mu]) throw ConfigError("DjBank: scale out of range");
    DiscretizedOperator& slot = scaleCache_[mu][m];
    if (!slot.applyFn) {
        slot = buildScaleAverage(factorFields_[mu], m, cutoffs_.psi0, grid_, cfg_);
        slot.label = "S^" + std::to_string(mu + 1) + "_" + std::to_string(m);
    }
    return slot;
}

DiscretizedOperator DjBank::dMu(int mu, int m) const {
    const DiscretizedOperator outer = multiplyCutoffOp(grid_, cutoffs_.psi0, 1, "psi0");
    DiscretizedOperator op;
    if (m == 0) {
        op = composeOp(outer, scaleAverage(mu, 0));
    } else {
        DiscretizedOperator diff =
            sumOp({scaleAverage(mu, m), scaleOp(-1.0, scaleAverage(mu, m - 1))}, "dS");
        op = composeOp(outer, diff);
    }
    op.label = "D^" + std::to_string(mu + 1) + "_" + std::to_string(m);
    return op;
}

DiscretizedOperator DjBank::d(const IVec& j) const {
    if (j.size() != nu()) throw DimensionError("DjBank::d: index arity mismatch");
    DiscretizedOperator op = dMu(nu() - 1, j[nu() - 1]);
    for (int mu = nu() - 2; mu >= 0; --mu) op = composeOp(dMu(mu, j[mu]), op);
    op.label = "D_" + ivecToString(j);
    return op;
}

DiscretizedOperator buildAjMu(const std::vector<DegreedField>& factorFields, ExtIndex j,
                              const SigmaBump& sigma, const CutoffSet& cutoffs,
                              std::shared_ptr<const Grid> grid, const FactorAverageConfig& cfg) {
    if (factorFields.empty()) throw PreconditionError("buildAjMu: empty factor field list");
    const int q = static_cast<int>(factorFields.size());
    SigmaBump sig = sigma;
    sig.dim = q;
    if (j.infinite) {
        Vec vals = cutoffs.psi1.evalBatch(grid->allPoints());
        vals = (sig.quadIntegral() * vals.array().square()).matrix();
        return multiplyOp(GridFunction(grid, vals), "A_inf");
    }
    if (j.value < 0) throw ConfigError("buildAjMu: negative scale");

    IVec degrees(q);
    for (int i = 0; i < q; ++i) degrees[i] = factorFields[i].degree.total();
    const QuadratureRule rule = midpointQuadrature(sig.supportBox(), cfg.quadPerAxis);

    GammaSpec flowSpec;
    flowSpec.nu = 1;
    flowSpec.factorDims = IVec::Constant(1, q);
    flowSpec.maxOrder = 1;
    for (int i = 0; i < q; ++i) {
        IVec alpha = IVec::Zero(q);
        alpha[i] = 1;
        flowSpec.terms.push_back({alpha, factorFields[i].field});
    }

    Vec w(rule.nodes.cols());
    for (Eigen::Index c = 0; c < rule.nodes.cols(); ++c)
        w[c] = rule.weight * sig.eval(rule.nodes.col(c));

    Mat scaled(q, rule.nodes.cols());
    for (Eigen::Index c = 0; c < rule.nodes.cols(); ++c)
        for (int i = 0; i < q; ++i)
            scaled(i, c) = std::ldexp(rule.nodes(i, c), -j.value * degrees[i]);

    const Mat pts = grid->allPoints();
    auto fq = std::make_shared<FlowQuadrature>();
    fq->nodes = scaled;
    fq->weight = rule.weight;
    std::vector<Vec> innerVals;
    for (Eigen::Index c = 0; c < scaled.cols(); ++c) {
        if (w[c] == 0.0) {
            fq->tables.push_back(GatherTable{grid, Eigen::VectorX<long>::Zero(0), Mat()});
            innerVals.push_back(Vec::Zero(0));
            continue;
        }
        const TPoint t{scaled.col(c), flowSpec.factorDims};
        Mat targets = gammaFlowBatch(flowSpec, t, pts, cfg.flow);
        fq->tables.push_back(makeGatherTable(grid, targets));
        innerVals.push_back(cutoffs.psi1.evalBatch(targets));
    }
    return flowAverageOp(grid, fq, std::move(w),
                         cutoffs.psi1.evalBatch(grid->allPoints()), std::move(innerVals),
                         "A_" + std::to_string(j.value));
}

DiscretizedOperator buildAj(const std::vector<std::vector<DegreedField>>& factorFields,
                            const ExtIVec& j, const SigmaBump& sigma, const CutoffSet& cutoffs,
                            std::shared_ptr<const Grid> grid, const FactorAverageConfig& cfg) {
    if (factorFields.size() != j.size()) throw DimensionError("buildAj: index arity mismatch");
    const int nu = static_cast<int>(j.size());
    DiscretizedOperator op = buildAjMu(factorFields[nu - 1], j[nu - 1], sigma, cutoffs, grid, cfg);
    for (int mu = nu - 2; mu >= 0; --mu)
        op = composeOp(buildAjMu(factorFields[mu], j[mu], sigma, cutoffs, grid, cfg), op);
    return op;
}

DiscretizedOperator buildMj(const GammaSpec& gamma, const ExtIVec& j, const SigmaBump& sigma,
                            const CutoffSet& cutoffs, std::shared_ptr<const Grid> grid,
                            int quadPerAxis, const FlowConfig& flowCfg) {
    if (static_cast<int>(j.size()) != gamma.nu) throw DimensionError("buildMj: index arity");
    const int N = gamma.tDim();
    SigmaBump sig1 = sigma;
    sig1.dim = 1;
    const double oneDim = sig1.quadIntegral();

    // coordinates whose factor index is finite carry quadrature nodes
    std::vector<int> liveCoords;
    int pos = 0;
    for (int mu = 0; mu < gamma.nu; ++mu) {
        for (int i = 0; i < gamma.factorDims[mu]; ++i)
            if (!j[mu].infinite) liveCoords.push_back(pos + i);
        pos += gamma.factorDims[mu];
    }
    const int frozen = N - static_cast<int>(liveCoords.size());
    double constant = 1.0;
    for (int i = 0; i < frozen; ++i) constant *= oneDim;

    const Vec psi2Grid = cutoffs.psi2.evalBatch(grid->allPoints());
    if (liveCoords.empty()) {
        Vec vals = (constant * psi2Grid.array().square()).matrix();
        return multiplyOp(GridFunction(grid, vals), "M_inf");
    }

    const Box liveBox = Box::cube(static_cast<int>(liveCoords.size()), sigma.support);
    const QuadratureRule rule = midpointQuadrature(liveBox, quadPerAxis);

    Vec w(rule.nodes.cols());
    Mat scaled = Mat::Zero(N, rule.nodes.cols());
    for (Eigen::Index c = 0; c < rule.nodes.cols(); ++c) {
        double sv = 1.0;
        for (size_t i = 0; i < liveCoords.size(); ++i)
            sv *= plateauProfile(rule.nodes(static_cast<int>(i), c), sigma.plateau, sigma.support);
        w[c] = rule.weight * constant * sv;
        // fill the live coordinates, dyadically scaled per factor
        for (size_t i = 0; i < liveCoords.size(); ++i) {
            const int coord = liveCoords[i];
            int mu = 0, acc = gamma.factorDims[0];
            while (coord >= acc) acc += gamma.factorDims[++mu];
            scaled(coord, c) = std::ldexp(rule.nodes(static_cast<int>(i), c), -j[mu].value);
        }
    }

    auto fq = std::make_shared<FlowQuadrature>();
    fq->nodes = scaled;
    fq->weight = rule.weight;
    const Mat pts = grid->allPoints();
    std::vector<Vec> innerVals;
    for (Eigen::Index c = 0; c < scaled.cols(); ++c) {
        if (w[c] == 0.0) {
            fq->tables.push_back(GatherTable{grid, Eigen::VectorX<long>::Zero(0), Mat()});
            innerVals.push_back(Vec::Zero(0));
            continue;
        }
        const TPoint t{scaled.col(c), gamma.factorDims};
        Mat targets = gammaFlowBatch(gamma, t, pts, flowCfg);
        fq->tables.push_back(makeGatherTable(grid, targets));
        innerVals.push_back(cutoffs.psi2.evalBatch(targets));
    }
    return flowAverageOp(grid, fq, std::move(w), psi2Grid, std::move(innerVals), "M");
}

DiscretizedOperator buildBj(const GammaSpec& gamma,
                            const std::vector<std::vector<DegreedField>>& factorFields,
                            const IVec& j, const SigmaBump& sigmaFactor,
                            const SigmaBump& sigmaFull, const CutoffSet& cutoffs,
                            std::shared_ptr<const Grid> grid, const FactorAverageConfig& cfg,
                            int mQuadPerAxis, const FlowConfig& mFlowCfg) {
    const int nu = gamma.nu;
    if (j.size() != nu) throw DimensionError("buildBj: index arity mismatch");
    std::vector<DiscretizedOperator> parts;
    for (int mask = 0; mask < (1 << nu); ++mask) {
        ExtIVec aIdx, mIdx;
        int bits = 0;
        for (int mu = 0; mu < nu; ++mu) {
            const bool inE = (mask >> mu) & 1;
            bits += inE ? 1 : 0;
            aIdx.push_back(inE ? ExtIndex::inf() : ExtIndex::at(j[mu]));
            mIdx.push_back(inE ? ExtIndex::at(j[mu]) : ExtIndex::inf());
        }
        DiscretizedOperator am =
            composeOp(buildAj(factorFields, aIdx, sigmaFactor, cutoffs, grid, cfg),
                      buildMj(gamma, mIdx, sigmaFull, cutoffs, grid, mQuadPerAxis, mFlowCfg));
        parts.push_back(bits % 2 == 0 ? am : scaleOp(-1.0, am));
    }
    DiscretizedOperator op = sumOp(std::move(parts), "B_" + ivecToString(j));
    return op;
}

namespace {

struct BandSquareData {
    std::vector<DiscretizedOperator> ops;  // D_j in enumeration order
    std::vector<IVec> js;
    int band = 0;      // |k - j|_inf threshold
    bool inside = true;  // near-diagonal (<= band) or complement

    bool pairLive(size_t a, size_t b) const {
        const long dist = (js[a] - js[b]).cwiseAbs().maxCoeff();
        return inside ? dist <= band : dist > band;
    }
};

Vec bandSquareApply(const std::shared_ptr<const BandSquareData>& d, const Vec& v, bool adjoint) {
    std::vector<Vec> first(d->ops.size());
    for (size_t k = 0; k < d->ops.size(); ++k)
        first[k] = adjoint ? d->ops[k].adjointFn(v) : d->ops[k].applyFn(v);
    Vec out = Vec::Zero(v.size());
    for (size_t a = 0; a < d->ops.size(); ++a) {
        Vec acc = Vec::Zero(v.size());
        bool any = false;
        for (size_t b = 0; b < d->ops.size(); ++b) {
            if (!d->pairLive(a, b)) continue;
            acc += first[b];
            any = true;
        }
        if (!any) continue;
        out += adjoint ? d->ops[a].adjointFn(acc) : d->ops[a].applyFn(acc);
    }
    return out;
}

DiscretizedOperator bandSquareOp(const DjBank& bank, int M, bool inside,
                                 const std::string& label) {
    auto data = std::make_shared<BandSquareData>();
    data->js = enumerateIndices(bank.truncation());
    for (const IVec& j : data->js) data->ops.push_back(bank.d(j));
    data->band = M;
    data->inside = inside;
    return DiscretizedOperator{
        bank.grid(), label,
        [data](const Vec& v) { return bandSquareApply(data, v, false); },
        [data](const Vec& v) { return bandSquareApply(data, v, true); }};
}

}  // namespace

DiscretizedOperator buildUM(const DjBank& bank, int M) {
    if (M < 0) throw ConfigError("buildUM: negative band");
    return bandSquareOp(bank, M, true, "U_" + std::to_string(M));
}

DiscretizedOperator buildRM(const DjBank& bank, int M) {
    if (M < 0) throw ConfigError("buildRM: negative band");
    return bandSquareOp(bank, M, false, "R_" + std::to_string(M));
}

DiscretizedOperator buildVM(const DjBank& bank, int M, const NeumannConfig& cfg) {
    if (cfg.terms < 0) throw ConfigError("buildVM: negative term count");
    const int power = 4 * bank.nu();
    DiscretizedOperator plateau = multiplyCutoffOp(bank.grid(), bank.cutoffs().psi0, power, "p0^4nu");
    DiscretizedOperator um = buildUM(bank, M);
    DiscretizedOperator g = sumOp({plateau, scaleOp(-1.0, um)}, "G");

    const double norm = roughNorm2(g.applyFn, g.adjointFn, bank.grid()->count(), cfg.normTol,
                                   cfg.normMaxIter, deriveSeed(cfg.seed, 0x564d));
    if (!(norm < 1.0))
        throw PreconditionError("buildVM: Neumann remainder norm estimate " + formatDouble(norm) +
                                    " is not a contraction; increase the band M or enlarge "
                                    "the dyadic truncation",
                                norm);

    auto gf = g.applyFn;
    auto gT = g.adjointFn;
    const int terms = cfg.terms;
    return DiscretizedOperator{bank.grid(), "V_" + std::to_string(M),
                               [gf, terms](const Vec& v) {
                                   Vec acc = v, out = v;
                                   for (int m = 1; m <= terms; ++m) {
                                       acc = gf(acc);
                                       out += acc;
                                   }
                                   return out;
                               },
                               [gT, terms](const Vec& v) {
                                   Vec acc = v, out = v;
                                   for (int m = 1; m <= terms; ++m) {
                                       acc = gT(acc);
                                       out += acc;
                                   }
                                   return out;
                               }};
}

MaximalOperator::MaximalOperator(GammaSpec gamma, SmoothCutoff psi,
                                 std::shared_ptr<const Grid> grid, std::vector<Vec> deltaGrid,
                                 MaximalConfig cfg)
    : gamma_(std::move(gamma)),
      psi_(std::move(psi)),
      grid_(std::move(grid)),
      deltaGrid_(std::move(deltaGrid)),
      cfg_(std::move(cfg)) {
    if (deltaGrid_.empty()) throw ConfigError("MaximalOperator: empty delta grid");
    for (const Vec& d : deltaGrid_) {
        if (d.size() != gamma_.nu) throw DimensionError("MaximalOperator: delta arity");
        for (int mu = 0; mu < d.size(); ++mu)
            if (!(d[mu] > 0.0 && d[mu] <= 1.0))
                throw ConfigError("MaximalOperator: delta components must lie in (0, 1]");
    }
    const QuadratureRule rule =
        midpointQuadrature(Box::cube(gamma_.tDim(), cfg_.ballRadius), cfg_.quadPerAxis);
    std::vector<long> keep;
    for (Eigen::Index c = 0; c < rule.nodes.cols(); ++c)
        if (rule.nodes.col(c).norm() <= cfg_.ballRadius) keep.push_back(c);
    ballNodes_.resize(gamma_.tDim(), static_cast<Eigen::Index>(keep.size()));
    for (size_t i = 0; i < keep.size(); ++i) ballNodes_.col(i) = rule.nodes.col(keep[i]);
    ballWeight_ = rule.weight;
}

double MaximalOperator::ballVolume() const { return ballWeight_ * ballNodes_.cols(); }

Vec MaximalOperator::psiValues() const { return psi_.evalBatch(grid_->allPoints()); }

std::vector<GridFunction> MaximalOperator::applyBatch(const std::vector<GridFunction>& fs) const {
    for (const auto& f : fs)
        if (!(*f.grid == *grid_)) throw DimensionError("MaximalOperator: grid mismatch");
    const Mat pts = grid_->allPoints();
    std::vector<Vec> best(fs.size(), Vec::Zero(grid_->count()));
    for (const Vec& delta : deltaGrid_) {
        std::vector<Vec> avg(fs.size(), Vec::Zero(grid_->count()));
        for (Eigen::Index c = 0; c < ballNodes_.cols(); ++c) {
            const TPoint t = scaledPerFactor(ballNodes_.col(c), gamma_.factorDims, delta);
            const GatherTable table =
                makeGatherTable(grid_, gammaFlowBatch(gamma_, t, pts, cfg_.flow));
            for (size_t i = 0; i < fs.size(); ++i)
                avg[i] += ballWeight_ * applyGather(table, fs[i].values.cwiseAbs());
        }
        for (size_t i = 0; i < fs.size(); ++i) best[i] = best[i].cwiseMax(avg[i]);
    }
    const Vec psiVals = psi_.evalBatch(pts);
    std::vector<GridFunction> out;
    for (size_t i = 0; i < fs.size(); ++i)
        out.push_back(GridFunction(grid_, (psiVals.array() * best[i].array()).matrix()));
    return out;
}

GridFunction MaximalOperator::apply(const GridFunction& f) const {
    return applyBatch({f}).front();
}

MaximalOperator buildMaximal(const GammaSpec& gamma, const SmoothCutoff& psi,
                             std::shared_ptr<const Grid> grid, const std::vector<Vec>& deltaGrid,
                             const MaximalConfig& cfg) {
    return MaximalOperator(gamma, psi, grid, deltaGrid, cfg);
}

DiscretizedOperator buildDeltaAverage(const GammaSpec& gamma, const SmoothCutoff& psi,
                                      std::shared_ptr<const Grid> grid, const Vec& delta,
                                      const MaximalConfig& cfg) {
    if (delta.size() != gamma.nu) throw DimensionError("buildDeltaAverage: delta arity");
    const QuadratureRule rule =
        midpointQuadrature(Box::cube(gamma.tDim(), cfg.ballRadius), cfg.quadPerAxis);
    std::vector<long> keep;
    for (Eigen::Index c = 0; c < rule.nodes.cols(); ++c)
        if (rule.nodes.col(c).norm() <= cfg.ballRadius) keep.push_back(c);
    Mat nodes(gamma.tDim(), static_cast<Eigen::Index>(keep.size()));
    for (size_t i = 0; i < keep.size(); ++i) {
        const TPoint t = scaledPerFactor(rule.nodes.col(keep[i]), gamma.factorDims, delta);
        nodes.col(i) = t.coords;
    }
    auto fq = std::make_shared<FlowQuadrature>(
        makeFlowQuadrature(gamma, nodes, rule.weight, grid, cfg.flow));
    Vec w = Vec::Constant(nodes.cols(), rule.weight);
    return flowAverageOp(grid, fq, std::move(w), psi.evalBatch(grid->allPoints()), {}, "Avg");
}

IndexedBank::IndexedBank(IVec truncation, std::shared_ptr<const Grid> grid,
                         std::function<DiscretizedOperator(const IVec&)> builder)
    : truncation_(std::move(truncation)), grid_(std::move(grid)), builder_(std::move(builder)) {}

bool IndexedBank::inRange(const IVec& j) const {
    if (j.size() != truncation_.size()) return false;
    for (int d = 0; d < j.size(); ++d)
        if (j[d] < 0 || j[d] > truncation_[d]) return false;
    return true;
}

const DiscretizedOperator& IndexedBank::at(const IVec& j) const {
    if (!inRange(j)) throw ConfigError("IndexedBank: index out of range " + ivecToString(j));
    const long flat = flattenIndex(j, truncation_);
    auto it = cache_.find(flat);
    if (it == cache_.end()) it = cache_.emplace(flat, builder_(j)).first;
    return it->second;
}

namespace {

struct SequenceData {
    std::shared_ptr<const Grid> grid;
    IVec truncation;
    // per component: composed operator, or nothing when an index shift leaves
    // the valid range (the zero-extension convention)
    std::vector<std::optional<DiscretizedOperator>> comps;
};

Vec sequenceApply(const std::shared_ptr<const SequenceData>& d, const Vec& v, bool adjoint) {
    const long n = d->grid->count();
    const long count = static_cast<long>(d->comps.size());
    if (v.size() != n * count) throw DimensionError("sequence operator: stacked size mismatch");
    Vec out = Vec::Zero(v.size());
    for (long c = 0; c < count; ++c) {
        if (!d->comps[c]) continue;
        const Vec seg = v.segment(c * n, n);
        out.segment(c * n, n) =
            adjoint ? d->comps[c]->adjointFn(seg) : d->comps[c]->applyFn(seg);
    }
    return out;
}

SequenceOperator makeSequenceOp(std::shared_ptr<SequenceData> data, const std::string& label) {
    auto shared = std::shared_ptr<const SequenceData>(std::move(data));
    SequenceOperator op;
    op.grid = shared->grid;
    op.truncation = shared->truncation;
    op.label = label;
    op.applyFn = [shared](const Vec& v) { return sequenceApply(shared, v, false); };
    op.adjointFn = [shared](const Vec& v) { return sequenceApply(shared, v, true); };
    return op;
}

}  // namespace

SequenceOperator vectorTkk(const IndexedBank& dBank, const IndexedBank& tBank, const IVec& k1,
                           const IVec& k2) {
    auto data = std::make_shared<SequenceData>();
    data->grid = dBank.grid();
    data->truncation = dBank.truncation();
    for (const IVec& j : enumerateIndices(dBank.truncation())) {
        const IVec jk1 = j + k1, jk2 = j + k2;
        if (!tBank.inRange(jk1) || !dBank.inRange(jk2)) {
            data->comps.push_back(std::nullopt);
            continue;
        }
        data->comps.push_back(
            composeOp(dBank.at(j), composeOp(tBank.at(jk1), dBank.at(jk2))));
    }
    return makeSequenceOp(std::move(data), "Tseq_" + ivecToString(k1) + "_" + ivecToString(k2));
}

SequenceOperator vectorBk(const IndexedBank& bBank, const IndexedBank& dBank, const IVec& k) {
    auto data = std::make_shared<SequenceData>();
    data->grid = dBank.grid();
    data->truncation = dBank.truncation();
    for (const IVec& j : enumerateIndices(dBank.truncation())) {
        const IVec jk = j + k;
        if (!bBank.inRange(j) || !dBank.inRange(jk)) {
            data->comps.push_back(std::nullopt);
            continue;
        }
        data->comps.push_back(composeOp(bBank.at(j), dBank.at(jk)));
    }
    return makeSequenceOp(std::move(data), "Bseq_" + ivecToString(k));
}

}  // namespace mpradon
