#include "mpradon/analysis.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <set>

namespace mpradon {

namespace {

double powerIterationOnce(const std::function<Vec(const Vec&)>& apply,
                          const std::function<Vec(const Vec&)>& adjoint, long n, double tol,
                          int maxIter, std::uint64_t seed, int& itersOut, bool& convergedOut) {
    auto rng = makeRng(seed);
    std::normal_distribution<double> gauss;
    Vec v(n);
    for (long i = 0; i < n; ++i) v[i] = gauss(rng);
    const double vn = v.norm();
    if (vn == 0.0) return 0.0;
    v /= vn;
    double lambda = 0.0;
    convergedOut = false;
    for (int it = 0; it < maxIter; ++it) {
        Vec w = adjoint(apply(v));
        const double nl = w.norm();
        ++itersOut;
        if (nl == 0.0) {
            convergedOut = true;
            return 0.0;
        }
        w /= nl;
        if (it > 0 && std::abs(nl - lambda) <= tol * std::max(nl, 1e-300)) {
            lambda = nl;
            convergedOut = true;
            break;
        }
        lambda = nl;
        v = w;
    }
    return std::sqrt(lambda);
}

}  // namespace

NormEstimate powerNormL2(const std::function<Vec(const Vec&)>& apply,
                         const std::function<Vec(const Vec&)>& adjoint, long n,
                         const PowerIterConfig& cfg) {
    NormEstimate est;
    est.method = "power-iteration";
    est.relTol = cfg.tol;
    est.converged = false;
    for (int r = 0; r < std::max(1, cfg.restarts); ++r) {
        bool conv = false;
        const double v = powerIterationOnce(apply, adjoint, n, cfg.tol, cfg.maxIter,
                                            deriveSeed(cfg.seed, 0x504f57 + r), est.iterations,
                                            conv);
        est.value = std::max(est.value, v);
        est.converged = est.converged || conv;
    }
    return est;
}

NormEstimate denseNormL2(const Mat& m) {
    NormEstimate est;
    est.method = "dense-oracle";
    est.converged = true;
    if (m.size() == 0) return est;
    Eigen::BDCSVD<Mat> svd(m);
    est.value = svd.singularValues()(0);
    return est;
}

NormEstimate denseNormL2(const DiscretizedOperator& op, long maxNodes) {
    return denseNormL2(materialize(op, maxNodes));
}

NormEstimate opNormL2(const DiscretizedOperator& op, const PowerIterConfig& cfg) {
    if (op.grid->count() <= cfg.denseThreshold) return denseNormL2(op, cfg.denseThreshold);
    return powerNormL2(op.applyFn, op.adjointFn, op.grid->count(), cfg);
}

NormEstimate lpOpNormMonteCarlo(const DiscretizedOperator& op, double p, int samples,
                                std::uint64_t seed) {
    NormEstimate est;
    est.method = "monte-carlo-lp";
    est.converged = true;
    est.iterations = samples;
    auto rng = makeRng(seed);
    std::normal_distribution<double> gauss;
    const long n = op.grid->count();
    for (int s = 0; s < samples; ++s) {
        Vec f(n);
        for (long i = 0; i < n; ++i) f[i] = gauss(rng);
        const GridFunction gf(op.grid, f);
        const double denom = quadNorm(gf, p);
        if (denom == 0.0) continue;
        est.value = std::max(est.value, quadNorm(op.apply(gf), p) / denom);
    }
    return est;
}

LineFitResult fitLineOn(const std::vector<double>& xs, const std::vector<double>& ys,
                        int minDistinct) {
    LineFitResult fit;
    if (xs.size() != ys.size() || xs.empty()) return fit;
    std::set<double> distinct(xs.begin(), xs.end());
    if (static_cast<int>(distinct.size()) < minDistinct) return fit;
    const double n = static_cast<double>(xs.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ys[i];
    }
    const double denom = n * sxx - sx * sx;
    if (denom == 0.0) return fit;
    fit.slope = (n * sxy - sx * sy) / denom;
    fit.intercept = (sy - fit.slope * sx) / n;
    double rss = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        const double r = ys[i] - (fit.intercept + fit.slope * xs[i]);
        rss += r * r;
    }
    fit.residual = std::sqrt(rss / n);
    fit.valid = true;
    return fit;
}

LineFitResult fitDecay(const std::vector<ScanRow>& rows) {
    std::vector<double> xs, ys;
    for (const ScanRow& r : rows) {
        if (r.norm.value <= 0.0) continue;
        xs.push_back(r.dist);
        ys.push_back(std::log2(r.norm.value));
    }
    return fitLineOn(xs, ys, 4);
}

std::vector<std::pair<IVec, IVec>> starPairs(int nu, int range) {
    std::vector<std::pair<IVec, IVec>> pairs;
    const IVec zero = IVec::Zero(nu);
    pairs.push_back({zero, zero});
    for (int mask = 1; mask < (1 << nu); ++mask) {
        IVec dir = IVec::Zero(nu);
        for (int mu = 0; mu < nu; ++mu) dir[mu] = (mask >> mu) & 1;
        for (int m = 1; m <= range; ++m) pairs.push_back({zero, IVec(m * dir)});
    }
    return pairs;
}

DecayScan cotlarScan(const GammaSpec& gamma, const BumpFamily& family, const SmoothCutoff& psi,
                     std::shared_ptr<const Grid> grid,
                     const std::vector<std::pair<IVec, IVec>>& pairs, const CotlarConfig& cfg) {
    DecayScan scan;
    std::map<std::string, DiscretizedOperator> cache;
    std::string pinned;
    if (!pairs.empty()) pinned = ivecToString(pairs.front().first);
    auto getT = [&](const IVec& j) -> const DiscretizedOperator& {
        const std::string key = ivecToString(j);
        auto it = cache.find(key);
        if (it == cache.end()) {
            if (cache.size() > 4) {
                for (auto c = cache.begin(); c != cache.end();)
                    c = (c->first == pinned) ? std::next(c) : cache.erase(c);
            }
            it = cache.emplace(key, buildTj(gamma, family, j, psi, grid, cfg.quadPerAxis,
                                            cfg.flow))
                     .first;
        }
        return it->second;
    };

    for (const auto& [j, k] : pairs) {
        const DiscretizedOperator& tj = getT(j);
        const DiscretizedOperator& tk = getT(k);
        DiscretizedOperator comp = (cfg.mode == CotlarMode::TjStarTk)
                                       ? composeOp(adjointOp(tj), tk)
                                       : composeOp(tj, adjointOp(tk));
        ScanRow row;
        row.j = j;
        row.k = k;
        row.dist = (j - k).cast<double>().norm();
        row.norm = opNormL2(comp, cfg.power);
        if (cfg.powerVariantColumn) {
            // repeated self-composition (T_k^* T_j)(T_j^* T_k) ... of the stated order
            DiscretizedOperator block =
                composeOp(composeOp(adjointOp(tk), tj), composeOp(adjointOp(tj), tk));
            DiscretizedOperator powered = block;
            for (int i = 1; i <= cfg.powerVariantN; ++i) powered = composeOp(powered, block);
            row.auxNorm = opNormL2(powered, cfg.power).value;
        }
        scan.rows.push_back(std::move(row));
    }
    scan.fit = fitDecay(scan.rows);
    return scan;
}

namespace {

/// Dense matrix assembly of psi .* sum_q w_q f(flow targets at node q); builds
/// one gather table at a time so memory stays at one dense matrix.
Mat assembleDenseAverage(const GammaSpec& gamma, const Mat& nodes, const Vec& weights,
                         const Vec& outer, std::shared_ptr<const Grid> grid,
                         const FlowConfig& cfg) {
    const long n = grid->count();
    const int dim = grid->dim();
    std::vector<long> stride(dim);
    stride[0] = 1;
    for (int d = 1; d < dim; ++d) stride[d] = stride[d - 1] * grid->nodes[d - 1];
    Mat m = Mat::Zero(n, n);
    const Mat pts = grid->allPoints();
    for (Eigen::Index q = 0; q < nodes.cols(); ++q) {
        if (weights[q] == 0.0) continue;
        const TPoint t{nodes.col(q), gamma.factorDims};
        const GatherTable table = makeGatherTable(grid, gammaFlowBatch(gamma, t, pts, cfg));
        for (long i = 0; i < n; ++i) {
            const double wi = weights[q] * outer[i];
            if (wi == 0.0) continue;
            for (int corner = 0; corner < (1 << dim); ++corner) {
                double cw = 1.0;
                long col = table.base[i];
                for (int d = 0; d < dim; ++d) {
                    const double fr = table.fracs(d, i);
                    if ((corner >> d) & 1) {
                        cw *= fr;
                        col += stride[d];
                    } else {
                        cw *= 1.0 - fr;
                    }
                }
                if (cw != 0.0) m(i, col) += wi * cw;
            }
        }
    }
    return m;
}

}  // namespace

std::vector<GrowthRow> partialSumGrowth(const GammaSpec& gamma, const BumpFamily& family,
                                        const SmoothCutoff& psi, std::shared_ptr<const Grid> grid,
                                        const std::vector<IVec>& truncations,
                                        const PartialSumConfig& cfg) {
    std::vector<GrowthRow> rows;
    const QuadratureRule rule = midpointQuadrature(family.supportBox(), cfg.quadPerAxis);
    const Vec outer = psi.evalBatch(grid->allPoints());
    const bool dense = grid->count() <= cfg.denseLimit;

    std::shared_ptr<FlowQuadrature> fq;
    if (!dense) {
        const double tableBytes = 8.0 * (1 + grid->dim() * 1.25) * grid->count();
        if (tableBytes * rule.nodes.cols() > 1.5e9)
            throw ConfigError("partialSumGrowth: flow tables would exceed the memory budget; "
                              "use a denser-capable grid or fewer quadrature nodes");
        fq = std::make_shared<FlowQuadrature>(
            makeFlowQuadrature(gamma, rule.nodes, rule.weight, grid, cfg.flow));
    }

    for (const IVec& J : truncations) {
        const ProductKernelSpec spec{family, J};
        GrowthRow row;
        row.truncation = J;
        if (dense) {
            Vec w(rule.nodes.cols());
            for (Eigen::Index q = 0; q < rule.nodes.cols(); ++q)
                w[q] = rule.weight * spec.eval(rule.nodes.col(q));
            const Mat m = assembleDenseAverage(gamma, rule.nodes, w, outer, grid, cfg.flow);
            const Mat mt = m.transpose();
            row.norm = powerNormL2([&m](const Vec& v) { return Vec(m * v); },
                                   [&mt](const Vec& v) { return Vec(mt * v); }, grid->count(),
                                   cfg.power);
        } else {
            const DiscretizedOperator op = buildT(spec, psi, grid, fq);
            row.norm = powerNormL2(op.applyFn, op.adjointFn, grid->count(), cfg.power);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

SquareFunctionReport squareFunctionCheck(const DjBank& bank,
                                         const std::vector<GridFunction>& fSet, double p,
                                         int signDraws, std::uint64_t seed) {
    SquareFunctionReport rep;
    rep.ratioMin = std::numeric_limits<double>::infinity();
    const int nu = bank.nu();
    const long n = bank.grid()->count();
    const Vec plateau = [&] {
        SmoothCutoff psi0 = bank.cutoffs().psi0;
        Vec v = psi0.evalBatch(bank.grid()->allPoints());
        return Vec(v.array().pow(2 * nu).matrix());
    }();

    auto rng = makeRng(deriveSeed(seed, 0x5351));
    std::bernoulli_distribution coin(0.5);

    for (const GridFunction& f : fSet) {
        // per-factor application tree: after processing factor mu the list is
        // indexed by (j_mu, ..., j_{nu-1}) with j_mu fastest
        std::vector<Vec> partial = {f.values};
        for (int mu = nu - 1; mu >= 0; --mu) {
            const int width = bank.truncation()[mu] + 1;
            std::vector<Vec> next(partial.size() * width);
            for (size_t s = 0; s < partial.size(); ++s)
                for (int m = 0; m < width; ++m)
                    next[s * width + m] = bank.dMu(mu, m).applyFn(partial[s]);
            partial = std::move(next);
        }

        Vec sumAll = Vec::Zero(n);
        Vec sq = Vec::Zero(n);
        for (const Vec& c : partial) {
            sumAll += c;
            sq.array() += c.array().square();
        }
        const GridFunction sf(f.grid, Vec(sq.array().sqrt().matrix()));
        const double denom = quadNorm(f, p);
        if (denom > 0.0) {
            const double ratio = quadNorm(sf, p) / denom;
            rep.perFunctionRatio.push_back(ratio);
            rep.ratioMin = std::min(rep.ratioMin, ratio);
            rep.ratioMax = std::max(rep.ratioMax, ratio);
        }
        const Vec recon = sumAll - (plateau.array() * f.values.array()).matrix();
        rep.reconstructionResidual =
            std::max(rep.reconstructionResidual, recon.cwiseAbs().maxCoeff());

        // random product signs over the factor scales
        double best = 0.0, worst = std::numeric_limits<double>::infinity();
        for (int d = 0; d < signDraws; ++d) {
            std::vector<std::vector<double>> eps(nu);
            for (int mu = 0; mu < nu; ++mu)
                for (int m = 0; m <= bank.truncation()[mu]; ++m)
                    eps[mu].push_back(coin(rng) ? 1.0 : -1.0);
            Vec acc = Vec::Zero(n);
            size_t idx = 0;
            for (const IVec& j : enumerateIndices(bank.truncation())) {
                double s = 1.0;
                for (int mu = 0; mu < nu; ++mu) s *= eps[mu][j[mu]];
                acc += s * partial[idx++];
            }
            const double nr = quadNorm(GridFunction(f.grid, acc), p);
            best = std::max(best, nr);
            worst = std::min(worst, nr);
        }
        if (worst > 0.0) rep.signRatioWorst = std::max(rep.signRatioWorst, best / worst);
    }
    if (!std::isfinite(rep.ratioMin)) rep.ratioMin = 0.0;
    return rep;
}

MaximalReport maximalCheck(const MaximalOperator& maxOp,
                           const std::vector<std::pair<std::string, GridFunction>>& fSet,
                           const std::vector<double>& ps,
                           const std::vector<GridFunction>& bumpFamily, double bumpP) {
    MaximalReport rep;
    std::vector<GridFunction> inputs;
    for (const auto& [label, f] : fSet) inputs.push_back(f);
    for (const GridFunction& b : bumpFamily) inputs.push_back(b);
    const std::vector<GridFunction> outputs = maxOp.applyBatch(inputs);

    rep.linftyPointwiseExact = true;
    const Vec psiVals = maxOp.psiValues();
    for (size_t i = 0; i < inputs.size(); ++i) {
        const double bound = supNorm(inputs[i]) * maxOp.ballVolume();
        const Vec slack =
            (bound * psiVals.array() - outputs[i].values.array() + 1e-13).matrix();
        if (slack.minCoeff() < 0.0) rep.linftyPointwiseExact = false;
    }

    for (size_t i = 0; i < fSet.size(); ++i) {
        for (double p : ps) {
            const double denom = quadNorm(fSet[i].second, p);
            if (denom == 0.0) continue;
            rep.rows.push_back({fSet[i].first, p, quadNorm(outputs[i], p) / denom});
        }
    }

    rep.bumpRatioMin = std::numeric_limits<double>::infinity();
    for (size_t b = 0; b < bumpFamily.size(); ++b) {
        const GridFunction& f = bumpFamily[b];
        const GridFunction& mf = outputs[fSet.size() + b];
        const double denom = quadNorm(f, bumpP);
        if (denom == 0.0) continue;
        const double ratio = quadNorm(mf, bumpP) / denom;
        rep.bumpRatioMax = std::max(rep.bumpRatioMax, ratio);
        rep.bumpRatioMin = std::min(rep.bumpRatioMin, ratio);
    }
    if (!std::isfinite(rep.bumpRatioMin)) rep.bumpRatioMin = 0.0;
    return rep;
}

ModulusReport l1DeltaModulus(const GridFunction& h, const std::vector<double>& deltas,
                             const std::vector<IVec>& latticeShifts) {
    ModulusReport rep;
    const Grid& g = *h.grid;
    const Vec spacing = g.spacing();
    const double hSup = h.values.cwiseAbs().maxCoeff();
    const double supportTol = 1e-12 * std::max(1.0, hSup);

    for (const IVec& z : latticeShifts) {
        if (z.size() != g.dim()) throw DimensionError("l1DeltaModulus: shift arity");
        if (z.cwiseAbs().maxCoeff() == 0)
            throw ConfigError("l1DeltaModulus: zero shift excluded by precondition");
        Vec shifted = Vec::Zero(g.count());
        for (long i = 0; i < g.count(); ++i) {
            IVec idx = g.unflatten(i) - z;
            bool inside = true;
            for (int d = 0; d < g.dim(); ++d)
                if (idx[d] < 0 || idx[d] >= g.nodes[d]) inside = false;
            if (inside) {
                shifted[i] = h.values[g.flatIndex(idx)];
            } else if (std::abs(h.values[i]) > supportTol) {
                throw ConfigError("l1DeltaModulus: shift " + ivecToString(z) +
                                  " pushes the support outside the box");
            }
        }
        // the mirrored margin: values leaving the box must also be negligible
        for (long i = 0; i < g.count(); ++i) {
            IVec idx = g.unflatten(i) + z;
            bool inside = true;
            for (int d = 0; d < g.dim(); ++d)
                if (idx[d] < 0 || idx[d] >= g.nodes[d]) inside = false;
            if (!inside && std::abs(h.values[i]) > supportTol)
                throw ConfigError("l1DeltaModulus: shift " + ivecToString(z) +
                                  " pushes the support outside the box");
        }
        ModulusReport::Row row;
        row.latticeShift = z;
        row.shiftNorm = (z.cast<double>().array() * spacing.array()).matrix().norm();
        row.rawL1 = g.cellVolume() * (shifted - h.values).cwiseAbs().sum();
        rep.rows.push_back(std::move(row));
    }

    std::vector<double> xs, ys;
    for (const auto& row : rep.rows) {
        if (row.rawL1 <= 0.0) continue;
        xs.push_back(std::log2(row.shiftNorm));
        ys.push_back(std::log2(row.rawL1));
    }
    const LineFitResult fit = fitLineOn(xs, ys, 2);
    rep.rawExponent = fit.valid ? fit.slope : 0.0;

    for (double d : deltas) {
        double sup = 0.0;
        for (const auto& row : rep.rows)
            sup = std::max(sup, row.rawL1 / std::pow(row.shiftNorm, d));
        rep.supModulus[d] = sup;
    }
    return rep;
}

namespace {

double sequenceLpNorm(const Vec& stacked, std::shared_ptr<const Grid> grid, long count,
                      double p) {
    const long n = grid->count();
    Vec sq = Vec::Zero(n);
    for (long c = 0; c < count; ++c)
        sq.array() += stacked.segment(c * n, n).array().square();
    return quadNorm(GridFunction(grid, Vec(sq.array().sqrt().matrix())), p);
}

NormEstimate sequenceNorm(const SequenceOperator& seq, const VectorScanConfig& cfg) {
    if (cfg.p == 2.0)
        return powerNormL2(seq.applyFn, seq.adjointFn, seq.stackedSize(), cfg.power);
    NormEstimate est;
    est.method = "monte-carlo-lp";
    est.iterations = cfg.mcSamples;
    est.converged = true;
    auto rng = makeRng(deriveSeed(cfg.seed, 0x564c));
    std::normal_distribution<double> gauss;
    for (int s = 0; s < cfg.mcSamples; ++s) {
        Vec f(seq.stackedSize());
        for (long i = 0; i < f.size(); ++i) f[i] = gauss(rng);
        const double denom = sequenceLpNorm(f, seq.grid, seq.componentCount(), cfg.p);
        if (denom == 0.0) continue;
        est.value = std::max(
            est.value, sequenceLpNorm(seq.applyFn(f), seq.grid, seq.componentCount(), cfg.p) /
                           denom);
    }
    return est;
}

}  // namespace

DecayScan vectorTkkScan(const IndexedBank& dBank, const IndexedBank& tBank,
                        const std::vector<std::pair<IVec, IVec>>& kPairs,
                        const VectorScanConfig& cfg) {
    DecayScan scan;
    for (const auto& [k1, k2] : kPairs) {
        const SequenceOperator seq = vectorTkk(dBank, tBank, k1, k2);
        ScanRow row;
        row.j = k1;
        row.k = k2;
        row.dist = static_cast<double>(k1.cwiseAbs().sum() + k2.cwiseAbs().sum());
        row.norm = sequenceNorm(seq, cfg);
        const IVec zero = IVec::Zero(k1.size());
        if (tBank.inRange(zero + k1) && dBank.inRange(zero + k2)) {
            const DiscretizedOperator comp = composeOp(
                dBank.at(zero), composeOp(tBank.at(zero + k1), dBank.at(zero + k2)));
            row.auxNorm =
                powerNormL2(comp.applyFn, comp.adjointFn, comp.grid->count(), cfg.power).value;
        }
        scan.rows.push_back(std::move(row));
    }
    scan.fit = fitDecay(scan.rows);
    return scan;
}

DecayScan vectorBkScan(const IndexedBank& bBank, const IndexedBank& dBank,
                       const std::vector<IVec>& ks, const VectorScanConfig& cfg) {
    DecayScan scan;
    for (const IVec& k : ks) {
        const SequenceOperator seq = vectorBk(bBank, dBank, k);
        ScanRow row;
        row.j = k;
        row.k = k;
        row.dist = static_cast<double>(k.cwiseAbs().sum());
        row.norm = sequenceNorm(seq, cfg);
        const IVec zero = IVec::Zero(k.size());
        if (bBank.inRange(zero) && dBank.inRange(zero + k)) {
            const DiscretizedOperator comp = composeOp(bBank.at(zero), dBank.at(zero + k));
            row.auxNorm =
                powerNormL2(comp.applyFn, comp.adjointFn, comp.grid->count(), cfg.power).value;
        }
        scan.rows.push_back(std::move(row));
    }
    scan.fit = fitDecay(scan.rows);
    return scan;
}

StabilityGate refinementGate(double coarse, double fine, double tolFrac) {
    StabilityGate g;
    g.coarse = coarse;
    g.fine = fine;
    const double denom = std::max(std::abs(fine), 1e-300);
    g.relChange = std::abs(fine - coarse) / denom;
    g.pass = g.relChange < tolFrac;
    return g;
}

}  // namespace mpradon
