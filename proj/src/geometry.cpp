#include "mpradon/geometry.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace mpradon {

namespace {

Mat controlVelocity(const std::vector<VectorField>& fields, const Mat& controls,
                    const Mat& pts) {
    Mat v = Mat::Zero(pts.rows(), pts.cols());
    for (size_t i = 0; i < fields.size(); ++i)
        v += (fields[i].evalBatch(pts).array().rowwise() * controls.row(i).array()).matrix();
    return v;
}

/// Shared RK4 core; columns flagged dead stop advancing at their last
/// in-box position. alive is initialized when its size does not match.
Mat controlledFlowMasked(const std::vector<VectorField>& fields, const Mat& controls,
                         const Mat& start, double time, int steps, const Box& box,
                         std::vector<char>& alive) {
    if (alive.size() != static_cast<size_t>(start.cols()))
        alive.assign(start.cols(), 1);
    Mat x = start;
    const double h = time / std::max(1, steps);
    for (int s = 0; s < steps; ++s) {
        const Mat k1 = controlVelocity(fields, controls, x);
        const Mat k2 = controlVelocity(fields, controls, x + (0.5 * h) * k1);
        const Mat k3 = controlVelocity(fields, controls, x + (0.5 * h) * k2);
        const Mat k4 = controlVelocity(fields, controls, x + h * k3);
        const Mat next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            if (!alive[c]) continue;
            if (box.contains(Vec(next.col(c))))
                x.col(c) = next.col(c);
            else
                alive[c] = 0;
        }
    }
    return x;
}

std::vector<std::vector<int>> subsetCombinations(int q, int r) {
    std::vector<std::vector<int>> out;
    std::vector<int> cur;
    const std::function<void(int)> rec = [&](int next) {
        if (static_cast<int>(cur.size()) == r) {
            out.push_back(cur);
            return;
        }
        for (int i = next; i < q; ++i) {
            cur.push_back(i);
            rec(i + 1);
            cur.pop_back();
        }
    };
    rec(0);
    return out;
}

/// Tensor mesh on the unit ball: perAxis points per axis on [-1, 1], columns
/// outside the closed Euclidean unit ball discarded.
Mat meshUnitBall(int n0, int perAxis) {
    std::vector<double> line(perAxis);
    for (int i = 0; i < perAxis; ++i)
        line[i] = (perAxis == 1) ? 0.0 : -1.0 + 2.0 * i / (perAxis - 1);
    long total = 1;
    for (int d = 0; d < n0; ++d) total *= perAxis;
    Mat mesh(n0, total);
    long kept = 0;
    std::vector<int> idx(n0, 0);
    for (long c = 0; c < total; ++c) {
        Vec u(n0);
        for (int d = 0; d < n0; ++d) u[d] = line[idx[d]];
        if (u.norm() <= 1.0 + 1e-12) mesh.col(kept++) = u;
        for (int d = 0; d < n0; ++d) {
            if (++idx[d] < perAxis) break;
            idx[d] = 0;
        }
    }
    return mesh.leftCols(kept);
}

}  // namespace

ScaledFrame makeScaledFrame(const std::vector<DegreedField>& base, const IVec& j0) {
    if (base.empty()) throw ConfigError("makeScaledFrame: empty field list");
    ScaledFrame frame;
    frame.base = base;
    frame.j0 = j0;
    for (const DegreedField& df : base) {
        if (df.degree.c.size() != j0.size())
            throw DimensionError("makeScaledFrame: degree arity does not match j0");
        frame.fields.push_back(scaleField(df.field, std::ldexp(1.0, -j0.dot(df.degree.c))));
    }
    return frame;
}

BracketSpanReport scaledBracketSpan(const ScaledFrame& frame, const Mat& probes,
                                    const SpanCheckConfig& cfg) {
    BracketSpanReport rep;
    rep.ok = true;
    const int q = frame.q();
    for (int i = 0; i < q; ++i) {
        for (int k = i + 1; k < q; ++k) {
            const VectorField br = lieBracket(frame.fields[i], frame.fields[k]);
            const Mat brVals = br.evalBatch(probes);
            for (Eigen::Index p = 0; p < probes.cols(); ++p) {
                Mat a(frame.dim(), q);
                for (int l = 0; l < q; ++l) a.col(l) = frame.fields[l].eval(probes.col(p));
                Eigen::CompleteOrthogonalDecomposition<Mat> cod(a);
                const Vec rhs = brVals.col(p);
                const Vec coeff = cod.solve(rhs);
                const double res = (a * coeff - rhs).norm() / std::max(1.0, rhs.norm());
                rep.worstResidual = std::max(rep.worstResidual, res);
                rep.coeffSup = std::max(rep.coeffSup, coeff.cwiseAbs().maxCoeff());
            }
        }
    }
    rep.ok = rep.worstResidual < cfg.spanTol && rep.coeffSup < cfg.coeffBound;
    return rep;
}

Mat controlledFlow(const std::vector<VectorField>& fields, const Mat& controls, const Mat& start,
                   double time, int steps, const Box& box) {
    std::vector<char> alive;
    const Mat out = controlledFlowMasked(fields, controls, start, time, steps, box, alive);
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
        if (!alive[c])
            throw BoxExitError("controlledFlow: trajectory left the safety box",
                               Vec(out.col(c)));
    }
    return out;
}

CCBallCloud ccBallSample(const ScaledFrame& frame, const Vec& x0, double xi, int pathCount,
                         int segmentCount, const CCBallConfig& cfg) {
    if (xi <= 0.0) throw ConfigError("ccBallSample: xi must be positive");
    if (pathCount < 1 || segmentCount < 1)
        throw ConfigError("ccBallSample: path and segment counts must be positive");
    const int q = frame.q();

    // controls drawn per path from an independently derived stream
    std::vector<Mat> pathControls(pathCount);
    for (int p = 0; p < pathCount; ++p) {
        auto rng = makeRng(deriveSeed(cfg.seed, 0xCCBA0000ULL + p));
        std::uniform_real_distribution<double> uni(-xi, xi);
        Mat c(q, segmentCount);
        for (int s = 0; s < segmentCount; ++s)
            for (int i = 0; i < q; ++i) c(i, s) = uni(rng);
        pathControls[p] = std::move(c);
    }

    Mat x = x0.replicate(1, pathCount);
    std::vector<char> alive(pathCount, 1);
    for (int s = 0; s < segmentCount; ++s) {
        Mat controls(q, pathCount);
        for (int p = 0; p < pathCount; ++p) controls.col(p) = pathControls[p].col(s);
        x = controlledFlowMasked(frame.fields, controls, x, 1.0 / segmentCount,
                                 cfg.stepsPerSegment, cfg.box, alive);
    }

    CCBallCloud cloud;
    cloud.requested = pathCount;
    long kept = 0;
    Mat pts(x.rows(), pathCount);
    for (int p = 0; p < pathCount; ++p) {
        if (alive[p])
            pts.col(kept++) = x.col(p);
        else
            ++cloud.dropped;
    }
    if (2 * cloud.dropped > pathCount)
        throw PreconditionError("ccBallSample: more than half the paths left the safety box",
                                static_cast<double>(cloud.dropped) / pathCount);
    cloud.points = pts.leftCols(kept);
    return cloud;
}

namespace {

struct MeshDiagnostics {
    double detFloor = 0.0;
    double cBound = 0.0;
    double minPairDist = 0.0;
    long meshCount = 0;
    bool pass = false;
};

}  // namespace

FrobeniusChart buildChart(const ScaledFrame& frame, const Vec& x0, const ChartConfig& cfg) {
    requireSameDim(frame.dim(), static_cast<int>(x0.size()), "buildChart");
    if (!cfg.box.contains(x0)) throw ConfigError("buildChart: base point outside the safety box");
    const int n = frame.dim();
    const int q = frame.q();

    Mat a(n, q);
    for (int i = 0; i < q; ++i) a.col(i) = frame.fields[i].eval(x0);
    Eigen::JacobiSVD<Mat> svd(a);
    const double sigmaMax = svd.singularValues()(0);
    if (!(sigmaMax > 0.0))
        throw PreconditionError("buildChart: all frame fields vanish at the base point", 0.0);
    int n0 = 0;
    for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i)
        if (svd.singularValues()(i) > cfg.rankTol * sigmaMax) ++n0;

    // greedy max-volume column selection; ties broken by enumeration order
    std::vector<int> selection;
    {
        Mat resid = a;
        std::vector<char> used(q, 0);
        for (int m = 0; m < n0; ++m) {
            int best = -1;
            double bestNorm = 0.0;
            for (int i = 0; i < q; ++i) {
                if (used[i]) continue;
                const double nr = resid.col(i).norm();
                if (nr > bestNorm) {
                    bestNorm = nr;
                    best = i;
                }
            }
            if (best < 0 || bestNorm <= cfg.rankTol * sigmaMax)
                throw PreconditionError("buildChart: greedy selection lost rank", bestNorm);
            used[best] = 1;
            selection.push_back(best);
            const Vec v = resid.col(best) / bestNorm;
            resid -= v * (v.transpose() * resid);
        }
    }

    std::vector<VectorField> selFields;
    for (int i : selection) selFields.push_back(frame.fields[i]);
    const std::vector<VectorField> allFields = frame.fields;
    const int steps = cfg.rk4Steps;
    const Box box = cfg.box;

    auto phiFn = [selFields, x0, steps, box](const Mat& u) {
        return controlledFlow(selFields, u, x0.replicate(1, u.cols()), 1.0, steps, box);
    };

    // pullbacks at arbitrary chart points: finite-difference differential of
    // the chart map, then a least-squares solve against each frame field
    auto pullbacksAt = [allFields, selFields, x0, steps, box, n, q](
                           const Mat& u, double hJ) -> std::vector<Mat> {
        const int m = static_cast<int>(u.rows());
        const long count = u.cols();
        const int block = 1 + 2 * m;
        Mat controls(m, count * block);
        for (long p = 0; p < count; ++p) {
            controls.col(p * block) = u.col(p);
            for (int d = 0; d < m; ++d) {
                Vec up = u.col(p), um = u.col(p);
                up[d] += hJ;
                um[d] -= hJ;
                controls.col(p * block + 1 + 2 * d) = up;
                controls.col(p * block + 2 + 2 * d) = um;
            }
        }
        const Mat flows =
            controlledFlow(selFields, controls, x0.replicate(1, controls.cols()), 1.0, steps,
                           box);
        Mat centers(n, count);
        for (long p = 0; p < count; ++p) centers.col(p) = flows.col(p * block);
        std::vector<Mat> fieldVals(q);
        for (int i = 0; i < q; ++i) fieldVals[i] = allFields[i].evalBatch(centers);

        std::vector<Mat> out(q, Mat(m, count));
        for (long p = 0; p < count; ++p) {
            Mat jac(n, m);
            for (int d = 0; d < m; ++d)
                jac.col(d) = (flows.col(p * block + 1 + 2 * d) -
                              flows.col(p * block + 2 + 2 * d)) /
                             (2.0 * hJ);
            Eigen::CompleteOrthogonalDecomposition<Mat> cod(jac);
            Mat rhs(n, q);
            for (int i = 0; i < q; ++i) rhs.col(i) = fieldVals[i].col(p);
            const Mat y = cod.solve(rhs);
            for (int i = 0; i < q; ++i) out[i].col(p) = y.col(i);
        }
        return out;
    };

    const Mat unitMesh = meshUnitBall(n0, cfg.meshPerAxis);
    const auto combos = subsetCombinations(q, n0);

    auto diagnose = [&](double eta) {
        MeshDiagnostics diag;
        const Mat mesh = eta * unitMesh;
        const long m = mesh.cols();
        diag.meshCount = m;
        const double hc = cfg.c1Step * eta;
        const int block = 1 + 2 * n0;
        Mat evalPts(n0, m * block);
        for (long p = 0; p < m; ++p) {
            evalPts.col(p * block) = mesh.col(p);
            for (int d = 0; d < n0; ++d) {
                Vec up = mesh.col(p), um = mesh.col(p);
                up[d] += hc;
                um[d] -= hc;
                evalPts.col(p * block + 1 + 2 * d) = up;
                evalPts.col(p * block + 2 + 2 * d) = um;
            }
        }
        const std::vector<Mat> y = pullbacksAt(evalPts, cfg.jacobianStep * eta);

        diag.detFloor = std::numeric_limits<double>::infinity();
        for (long p = 0; p < m; ++p) {
            double bestDet = 0.0;
            Mat frameMat(n0, q);
            for (int i = 0; i < q; ++i) frameMat.col(i) = y[i].col(p * block);
            for (const auto& combo : combos) {
                Mat sub(n0, n0);
                for (int c = 0; c < n0; ++c) sub.col(c) = frameMat.col(combo[c]);
                bestDet = std::max(bestDet, std::abs(sub.determinant()));
            }
            diag.detFloor = std::min(diag.detFloor, bestDet);
        }

        for (int i = 0; i < q; ++i) {
            for (long p = 0; p < m; ++p) {
                diag.cBound =
                    std::max(diag.cBound, y[i].col(p * block).cwiseAbs().maxCoeff());
                for (int d = 0; d < n0; ++d) {
                    const Vec diff = (y[i].col(p * block + 1 + 2 * d) -
                                      y[i].col(p * block + 2 + 2 * d)) /
                                     (2.0 * hc);
                    diag.cBound = std::max(diag.cBound, diff.cwiseAbs().maxCoeff());
                }
            }
        }

        const Mat images = phiFn(mesh);
        diag.minPairDist = std::numeric_limits<double>::infinity();
        for (long i = 0; i < m; ++i)
            for (long j = i + 1; j < m; ++j)
                diag.minPairDist =
                    std::min(diag.minPairDist, (images.col(i) - images.col(j)).norm());
        diag.pass = diag.detFloor >= cfg.detFloorThreshold &&
                    diag.minPairDist > cfg.injectivityTol * eta;
        return diag;
    };

    double eta = 1.0;
    std::string lastFailure = "no attempt made";
    double lastDetFloor = 0.0;
    for (int attempt = 0; attempt <= cfg.etaHalvings; ++attempt, eta *= 0.5) {
        MeshDiagnostics diag;
        try {
            diag = diagnose(eta);
        } catch (const BoxExitError& e) {
            lastFailure = e.what();
            continue;
        }
        lastDetFloor = diag.detFloor;
        if (!diag.pass) {
            lastFailure = "detFloor " + formatDouble(diag.detFloor) + ", min separation " +
                          formatDouble(diag.minPairDist) + " at radius " + formatDouble(eta);
            continue;
        }
        FrobeniusChart chart;
        chart.x0 = x0;
        chart.n0 = n0;
        chart.eta = eta;
        chart.selection = selection;
        chart.detFloor = diag.detFloor;
        chart.cBound = diag.cBound;
        chart.meshCount = diag.meshCount;
        chart.phi = phiFn;
        const double hJ = cfg.jacobianStep * eta;
        chart.pullbackAll = [pullbacksAt, hJ](const Mat& u) { return pullbacksAt(u, hJ); };
        return chart;
    }
    throw PreconditionError("buildChart: no chart radius passed the mesh checks (" +
                                lastFailure + ")",
                            lastDetFloor);
}

std::vector<UniformityRow> uniformityScan(const std::vector<DegreedField>& base, const Vec& x0,
                                          const std::vector<IVec>& j0Range,
                                          const ChartConfig& cfg, const SpanCheckConfig& spanCfg,
                                          int probeCount) {
    std::vector<UniformityRow> rows;
    const Vec h = 0.35 * cfg.box.halfWidth();
    const Box probeBox{x0 - h, x0 + h};
    const Mat probes = haltonPoints(probeBox, probeCount);
    for (const IVec& j0 : j0Range) {
        UniformityRow row;
        row.j0 = j0;
        try {
            const ScaledFrame frame = makeScaledFrame(base, j0);
            const FrobeniusChart chart = buildChart(frame, x0, cfg);
            const BracketSpanReport span = scaledBracketSpan(frame, probes, spanCfg);
            row.ok = true;
            row.n0 = chart.n0;
            row.detFloor = chart.detFloor;
            row.cBound = chart.cBound;
            row.eta = chart.eta;
            row.bracketCoeffSup = span.coeffSup;
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

BallChartReport chartContainsBallCheck(const ScaledFrame& frame, const FrobeniusChart& chart,
                                       double xi, int pathCount, int segmentCount,
                                       const CCBallConfig& cfg) {
    const CCBallCloud cloud = ccBallSample(frame, chart.x0, xi, pathCount, segmentCount, cfg);
    const long count = cloud.points.cols();
    const int n0 = chart.n0;
    const double eta = chart.eta;
    const double hJ = 1e-5 * eta;
    const int block = 1 + 2 * n0;

    Mat u = Mat::Zero(n0, count);
    std::vector<char> found(count, 0);
    Vec tol(count);
    for (long p = 0; p < count; ++p) tol[p] = 1e-7 * (1.0 + cloud.points.col(p).norm());

    try {
        for (int iter = 0; iter < 30; ++iter) {
            Mat controls(n0, count * block);
            for (long p = 0; p < count; ++p) {
                controls.col(p * block) = u.col(p);
                for (int d = 0; d < n0; ++d) {
                    Vec up = u.col(p), um = u.col(p);
                    up[d] += hJ;
                    um[d] -= hJ;
                    controls.col(p * block + 1 + 2 * d) = up;
                    controls.col(p * block + 2 + 2 * d) = um;
                }
            }
            const Mat flows = chart.phi(controls);
            bool allDone = true;
            for (long p = 0; p < count; ++p) {
                if (found[p]) continue;
                const Vec r = cloud.points.col(p) - flows.col(p * block);
                if (r.norm() <= tol[p]) {
                    found[p] = 1;
                    continue;
                }
                allDone = false;
                Mat jac(static_cast<int>(cloud.points.rows()), n0);
                for (int d = 0; d < n0; ++d)
                    jac.col(d) = (flows.col(p * block + 1 + 2 * d) -
                                  flows.col(p * block + 2 + 2 * d)) /
                                 (2.0 * hJ);
                Eigen::CompleteOrthogonalDecomposition<Mat> cod(jac);
                Vec next = u.col(p) + cod.solve(r);
                if (next.norm() > 1.05 * eta) next *= 1.05 * eta / next.norm();
                u.col(p) = next;
            }
            if (allDone) break;
        }
    } catch (const BoxExitError&) {
        // remaining endpoints stay unrecovered; counted honestly below
    }

    BallChartReport rep;
    rep.tested = static_cast<int>(count);
    for (long p = 0; p < count; ++p)
        if (found[p] && u.col(p).norm() <= eta * (1.0 + 1e-9)) ++rep.found;
    rep.fraction = count > 0 ? static_cast<double>(rep.found) / count : 0.0;
    return rep;
}

ConditionReport pullbackHormanderCheck(const ScaledFrame& frame, const FrobeniusChart& chart,
                                       const IVec& j, const IVec& k, int maxDepth,
                                       double rankTol, int probeCount) {
    if (j.size() != frame.j0.size() || k.size() != frame.j0.size())
        throw DimensionError("pullbackHormanderCheck: index arity");
    if (frame.j0 != j.cwiseMin(k))
        throw ConfigError(
            "pullbackHormanderCheck: the frame scaling must be the componentwise minimum of "
            "the two indices");

    std::vector<VectorField> slots;
    const int n0 = chart.n0;
    for (size_t i = 0; i < frame.base.size(); ++i) {
        const DegreedField& df = frame.base[i];
        if (!df.degree.isPure()) continue;
        const double s1 = std::ldexp(1.0, -(k - frame.j0).dot(df.degree.c));
        const double s2 = std::ldexp(1.0, -(j - frame.j0).dot(df.degree.c));
        const auto pull = chart.pullbackAll;
        const int idx = static_cast<int>(i);
        for (double s : {s1, s2}) {
            slots.emplace_back(n0, [pull, idx, s](const Mat& u) {
                return Mat(s * pull(u)[idx]);
            });
            if (s1 == s2) break;  // identical copies add nothing
        }
    }
    if (slots.empty())
        throw ConfigError("pullbackHormanderCheck: frame has no pure-degree fields");

    const Mat probes = haltonPoints(Box::cube(n0, 0.5 * chart.eta / std::sqrt(n0)), probeCount);
    ConditionReport agg;
    agg.satisfied = true;
    agg.rank = n0;
    agg.smallestKeptSingular = std::numeric_limits<double>::infinity();
    for (Eigen::Index p = 0; p < probes.cols(); ++p) {
        const ConditionReport rep = checkHormander(slots, probes.col(p), maxDepth, rankTol);
        agg.satisfied = agg.satisfied && rep.satisfied;
        agg.rank = std::min(agg.rank, rep.rank);
        agg.depthUsed = std::max(agg.depthUsed, rep.depthUsed);
        if (rep.smallestKeptSingular < agg.smallestKeptSingular) {
            agg.smallestKeptSingular = rep.smallestKeptSingular;
            agg.witnessPoint = probes.col(p);
        }
    }
    if (!std::isfinite(agg.smallestKeptSingular)) agg.smallestKeptSingular = 0.0;
    agg.summary = "two-slot rescaled pullback frame: rank " + std::to_string(agg.rank) + "/" +
                  std::to_string(n0) + " at depth " + std::to_string(agg.depthUsed) +
                  " over " + std::to_string(probes.cols()) + " chart points";
    return agg;
}

}  // namespace mpradon
