#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "mpradon/cutoffs.hpp"
#include "mpradon/grid.hpp"
#include "mpradon/kernels.hpp"
#include "mpradon/operators.hpp"
#include "mpradon/scenario.hpp"
#include "oracles.hpp"

using namespace mpradon;

namespace {

struct LineSetup {
    Scenario sc = getScenario("abelian-translation");
    std::shared_ptr<const Grid> grid;
    CutoffSet cuts;
    FlowConfig flow;
    FactorAverageConfig fcfg;
    std::vector<std::vector<DegreedField>> lists;

    explicit LineSetup(long nodes = 96) {
        grid = std::make_shared<Grid>(Grid{sc.box, IVec::Constant(1, nodes)});
        cuts = CutoffSet::defaults(sc.box);
        flow.box = sc.flowBox;
        fcfg.flow = flow;
        fcfg.quadPerAxis = 24;
        lists.resize(1);
        for (const DegreedField& df : sc.gamma.pureFields()) lists[0].push_back(df);
    }
};

GridFunction cosineOn(std::shared_ptr<const Grid> g, double freq) {
    return sampleOnGrid(g, [freq](const Mat& pts) -> Vec {
        return (pts.row(0).array() * freq).cos().matrix().transpose();
    });
}

GridFunction compactBumpOn(std::shared_ptr<const Grid> g, double radius) {
    return sampleOnGrid(g, [radius](const Mat& pts) -> Vec {
        Vec out(pts.cols());
        for (Eigen::Index c = 0; c < pts.cols(); ++c) {
            const double u = pts(0, c) / radius;
            out[c] = std::abs(u) < 1.0 ? std::exp(-1.0 / (1.0 - u * u)) : 0.0;
        }
        return out;
    });
}

double supDiff(const Vec& a, const Vec& b) { return (a - b).cwiseAbs().maxCoeff(); }

DiscretizedOperator lineTransform(const LineSetup& s, const ProductKernelSpec& spec,
                                  int quadPerAxis) {
    const QuadratureRule rule = midpointQuadrature(spec.family.supportBox(), quadPerAxis);
    auto fq = std::make_shared<FlowQuadrature>(
        makeFlowQuadrature(s.sc.gamma, rule.nodes, rule.weight, s.grid, s.flow));
    return buildT(spec, s.cuts.psi, s.grid, fq);
}

double adjointPairingGap(const DiscretizedOperator& op, const GridFunction& f,
                         const GridFunction& g) {
    const double lhs = quadInner(op.apply(f), g);
    const double rhs = quadInner(f, op.applyAdjoint(g));
    return std::abs(lhs - rhs) / std::max(std::abs(lhs), 1e-12);
}

}  // namespace

TEST_CASE("translation transform matches the direct convolution oracle") {
    LineSetup s;
    // support small enough that every interpolation target stays strictly
    // inside the node range, where the oracle's interpolation rule coincides
    const BumpFamily fam = makeCancellingFamily(IVec::Ones(1), 0.15);
    const ProductKernelSpec spec{fam, IVec::Zero(1)};
    const QuadratureRule rule = midpointQuadrature(fam.supportBox(), 256);
    auto fq = std::make_shared<FlowQuadrature>(
        makeFlowQuadrature(s.sc.gamma, rule.nodes, rule.weight, s.grid, s.flow));
    const DiscretizedOperator op = buildT(spec, s.cuts.psi, s.grid, fq);

    const GridFunction f = sampleOnGrid(s.grid, [](const Mat& pts) -> Vec {
        return (0.4 + 0.7 * pts.row(0).array()).matrix().transpose();
    });
    const Vec oracle = oracles::directTranslationAverage(
        f, [&](double t) { return spec.eval(Vec::Constant(1, t)); }, rule.nodes, rule.weight,
        [&](double x) { return s.cuts.psi.eval(Vec::Constant(1, x)); });
    CHECK(supDiff(op.apply(f).values, oracle) < 1e-10);

    const GridFunction zero = GridFunction::zero(s.grid);
    CHECK(op.apply(zero).values.cwiseAbs().maxCoeff() == 0.0);

    // linearity of the realized map
    const GridFunction g = cosineOn(s.grid, 1.3);
    const Vec combo =
        op.apply(GridFunction(s.grid, 2.5 * f.values - 1.25 * g.values)).values;
    const Vec split = 2.5 * op.apply(f).values - 1.25 * op.apply(g).values;
    CHECK(supDiff(combo, split) < 1e-12);
}

TEST_CASE("shrinking single-bump kernels approach the cutoff multiplier") {
    LineSetup s;
    const GridFunction f = cosineOn(s.grid, 2.1);
    const Vec psi = s.cuts.psi.evalBatch(s.grid->allPoints());
    const Vec target = (psi.array() * f.values.array()).matrix();
    std::vector<double> errs;
    for (double a : {0.1, 0.04, 0.015}) {
        const BumpFamily fam = makeCancellingFamily(IVec::Ones(1), a);
        const DiscretizedOperator op = lineTransform(s, {fam, IVec::Zero(1)}, 256);
        errs.push_back(supDiff(op.apply(f).values, target));
    }
    CHECK(errs[1] < errs[0]);
    CHECK(errs[2] < errs[1]);
    CHECK(errs[1] < 1e-3);
    CHECK(errs[2] < 1e-3);
}

TEST_CASE("dyadic pieces sum to the full transform node for node") {
    LineSetup s;
    const BumpFamily fam = makeCancellingFamily(IVec::Ones(1), s.sc.kernelRadius, 0.25);
    const IVec trunc = IVec::Constant(1, 6);
    const ProductKernelSpec spec{fam, trunc};
    const QuadratureRule rule = midpointQuadrature(fam.supportBox(), 512);
    auto fq = std::make_shared<FlowQuadrature>(
        makeFlowQuadrature(s.sc.gamma, rule.nodes, rule.weight, s.grid, s.flow));
    const DiscretizedOperator full = buildT(spec, s.cuts.psi, s.grid, fq);
    const GridFunction f = cosineOn(s.grid, 1.9);
    Vec sum = Vec::Zero(s.grid->count());
    for (const IVec& j : enumerateIndices(trunc))
        sum += buildTjShared(fam, j, s.cuts.psi, s.grid, fq).apply(f).values;
    CHECK(supDiff(full.apply(f).values, sum) < 1e-12);

    // at the trivial truncation the single piece is the whole transform
    const ProductKernelSpec base{fam, IVec::Zero(1)};
    const DiscretizedOperator t0 = buildT(base, s.cuts.psi, s.grid, fq);
    const DiscretizedOperator piece = buildTjShared(fam, IVec::Zero(1), s.cuts.psi, s.grid, fq);
    CHECK(supDiff(t0.apply(f).values, piece.apply(f).values) < 1e-14);
}

TEST_CASE("two-factor pieces sum to the full transform on a spatial grid") {
    const Scenario sc = getScenario("heisenberg");
    auto grid = std::make_shared<Grid>(Grid{sc.box, IVec::Constant(3, 12)});
    const CutoffSet cuts = CutoffSet::defaults(sc.box);
    const BumpFamily fam = makeCancellingFamily(sc.gamma.factorDims, sc.kernelRadius, 0.25);
    const IVec trunc = IVec::Constant(2, 2);
    const ProductKernelSpec spec{fam, trunc};
    const QuadratureRule rule = midpointQuadrature(fam.supportBox(), 20);
    FlowConfig flow;
    flow.box = sc.flowBox;
    auto fq = std::make_shared<FlowQuadrature>(
        makeFlowQuadrature(sc.gamma, rule.nodes, rule.weight, grid, flow));
    const DiscretizedOperator full = buildT(spec, cuts.psi, grid, fq);
    const GridFunction f = sampleOnGrid(grid, [](const Mat& pts) -> Vec {
        return ((pts.row(0).array() * 1.3).cos() + (pts.row(2).array() * 0.9).sin())
            .matrix()
            .transpose();
    });
    const Vec tf = full.apply(f).values;
    Vec sum = Vec::Zero(grid->count());
    for (const IVec& j : enumerateIndices(trunc))
        sum += buildTjShared(fam, j, cuts.psi, grid, fq).apply(f).values;
    CHECK(supDiff(tf, sum) < 1e-12);

    const GridFunction g = sampleOnGrid(grid, [](const Mat& pts) -> Vec {
        return (pts.row(1).array() * 1.7).sin().matrix().transpose();
    });
    CHECK(adjointPairingGap(full, f, g) < 1e-10);
}

TEST_CASE("substituted single-scale pieces decay on smooth data") {
    LineSetup s;
    const BumpFamily fam = makeCancellingFamily(IVec::Ones(1), s.sc.kernelRadius, 0.3);
    const GridFunction f = cosineOn(s.grid, 1.9);
    std::vector<double> sups;
    for (int j = 1; j <= 4; ++j) {
        const DiscretizedOperator op =
            buildTj(s.sc.gamma, fam, IVec::Constant(1, j), s.cuts.psi, s.grid, 128, s.flow);
        sups.push_back(op.apply(f).values.cwiseAbs().maxCoeff());
    }
    for (size_t i = 1; i < sups.size(); ++i) CHECK(sups[i] < sups[i - 1]);
    CHECK(sups.back() < 0.2 * sups.front());
}

TEST_CASE("infinite-index averages collapse to multiplier closed forms") {
    LineSetup s;
    SigmaBump sigma;
    SigmaBump oneDim = sigma;
    oneDim.dim = 1;
    const double is = oneDim.quadIntegral();
    const GridFunction f = cosineOn(s.grid, 1.9);
    const Vec psi1 = s.cuts.psi1.evalBatch(s.grid->allPoints());
    const Vec psi2 = s.cuts.psi2.evalBatch(s.grid->allPoints());

    const DiscretizedOperator aInf = buildAj(s.lists, allInfinite(1), sigma, s.cuts, s.grid, s.fcfg);
    CHECK(supDiff(aInf.apply(f).values,
                  (is * psi1.array().square() * f.values.array()).matrix()) < 1e-10);

    const DiscretizedOperator mInf =
        buildMj(s.sc.gamma, allInfinite(1), sigma, s.cuts, s.grid, 64, s.flow);
    CHECK(supDiff(mInf.apply(f).values,
                  (is * psi2.array().square() * f.values.array()).matrix()) < 1e-10);

    // two factors: product of the per-factor multiplier constants
    const Scenario hb = getScenario("heisenberg");
    auto g3 = std::make_shared<Grid>(Grid{hb.box, IVec::Constant(3, 10)});
    const CutoffSet hc = CutoffSet::defaults(hb.box);
    std::vector<std::vector<DegreedField>> lists(2);
    for (const DegreedField& df : hb.gamma.pureFields())
        for (int mu = 0; mu < 2; ++mu)
            if (df.degree.c[mu] > 0) {
                lists[mu].push_back(df);
                break;
            }
    FactorAverageConfig fcfg;
    fcfg.flow.box = hb.flowBox;
    const GridFunction h = sampleOnGrid(g3, [](const Mat& pts) -> Vec {
        return (pts.row(0).array() * 1.1).cos().matrix().transpose();
    });
    const Vec hPsi1 = hc.psi1.evalBatch(g3->allPoints());
    const DiscretizedOperator aInf2 = buildAj(lists, allInfinite(2), sigma, hc, g3, fcfg);
    CHECK(supDiff(aInf2.apply(h).values,
                  (is * is * hPsi1.array().square().square() * h.values.array()).matrix()) <
          1e-10);

    // positivity of the finite averages
    const GridFunction pos = compactBumpOn(s.grid, 0.45);
    const DiscretizedOperator a0 =
        buildAjMu(s.lists[0], ExtIndex::at(0), sigma, s.cuts, s.grid, s.fcfg);
    const DiscretizedOperator m1 =
        buildMj(s.sc.gamma, allFinite(IVec::Constant(1, 1)), sigma, s.cuts, s.grid, 64, s.flow);
    CHECK(a0.apply(pos).values.minCoeff() >= -1e-14);
    CHECK(m1.apply(pos).values.minCoeff() >= -1e-14);
    CHECK(adjointPairingGap(a0, pos, f) < 1e-10);
    CHECK(adjointPairingGap(m1, pos, f) < 1e-10);
}

TEST_CASE("frozen factors drop out of the partial flow averages") {
    const Scenario sc = getScenario("heisenberg");
    auto grid = std::make_shared<Grid>(Grid{sc.box, IVec::Constant(3, 12)});
    const CutoffSet cuts = CutoffSet::defaults(sc.box);
    FlowConfig flow;
    flow.box = sc.flowBox;
    SigmaBump sigma;
    const ExtIVec idx = {ExtIndex::at(2), ExtIndex::inf()};
    const DiscretizedOperator full = buildMj(sc.gamma, idx, sigma, cuts, grid, 10, flow);

    // same flow with every term touching the second factor removed: freezing
    // those coordinates at zero must already have erased them
    GammaSpec firstOnly;
    firstOnly.nu = 2;
    firstOnly.factorDims = sc.gamma.factorDims;
    firstOnly.maxOrder = sc.gamma.maxOrder;
    for (const auto& term : sc.gamma.terms)
        if (term.alpha[1] == 0) firstOnly.terms.push_back(term);
    firstOnly.validate();
    const DiscretizedOperator reduced = buildMj(firstOnly, idx, sigma, cuts, grid, 10, flow);

    const GridFunction f = sampleOnGrid(grid, [](const Mat& pts) -> Vec {
        return ((pts.row(0).array() * 1.3).cos() + (pts.row(2).array() * 0.9).sin())
            .matrix()
            .transpose();
    });
    CHECK(supDiff(full.apply(f).values, reduced.apply(f).values) < 1e-14);
}

TEST_CASE("single-factor inclusion-exclusion matches its two-term expansion") {
    LineSetup s;
    s.fcfg.quadPerAxis = 64;
    SigmaBump sigma;
    SigmaBump oneDim = sigma;
    oneDim.dim = 1;
    const double is = oneDim.quadIntegral();
    const GridFunction f = cosineOn(s.grid, 1.9);
    const Vec psi1 = s.cuts.psi1.evalBatch(s.grid->allPoints());
    const Vec psi2 = s.cuts.psi2.evalBatch(s.grid->allPoints());
    const GridFunction one(s.grid, Vec::Ones(s.grid->count()));

    for (int j : {0, 2}) {
        const DiscretizedOperator bj = buildBj(s.sc.gamma, s.lists, IVec::Constant(1, j), sigma,
                                               sigma, s.cuts, s.grid, s.fcfg, 64, s.flow);
        const DiscretizedOperator aj =
            buildAjMu(s.lists[0], ExtIndex::at(j), sigma, s.cuts, s.grid, s.fcfg);
        const DiscretizedOperator mj =
            buildMj(s.sc.gamma, allFinite(IVec::Constant(1, j)), sigma, s.cuts, s.grid, 64,
                    s.flow);
        const GridFunction p2f(s.grid, (psi2.array().square() * f.values.array()).matrix());
        const Vec rhs = is * aj.apply(p2f).values -
                        (is * psi1.array().square() * mj.apply(f).values.array()).matrix();
        const Vec bv = bj.apply(f).values;
        CHECK(supDiff(bv, rhs) < 1e-10);
        CHECK(adjointPairingGap(bj, f, compactBumpOn(s.grid, 0.45)) < 1e-10);

        // alternating sum nearly annihilates constants; compare against the
        // size of a single summand
        const DiscretizedOperator am = composeOp(
            aj, buildMj(s.sc.gamma, allInfinite(1), sigma, s.cuts, s.grid, 64, s.flow));
        const double cancelSup = bj.apply(one).values.cwiseAbs().maxCoeff();
        const double termSup = am.apply(one).values.cwiseAbs().maxCoeff();
        CHECK(cancelSup < 0.6 * termSup);
    }
}

TEST_CASE("scale differences telescope and annihilate plateau constants") {
    LineSetup s;
    const IVec trunc = IVec::Constant(1, 4);
    const DjBank bank(s.lists, trunc, s.cuts, s.grid, s.fcfg);
    const GridFunction f = cosineOn(s.grid, 2.1);
    const Vec psi0 = s.cuts.psi0.evalBatch(s.grid->allPoints());

    Vec sum = Vec::Zero(s.grid->count());
    for (const IVec& j : enumerateIndices(trunc)) sum += bank.d(j).apply(f).values;
    const Vec collapsed =
        (psi0.array() * bank.scaleAverage(0, trunc[0]).apply(f).values.array()).matrix();
    CHECK(supDiff(sum, collapsed) < 1e-12);

    // partial sums approach the squared-cutoff multiplier as the depth grows
    const Vec target = (psi0.array().square() * f.values.array()).matrix();
    auto residualAt = [&](int depth) {
        Vec acc = Vec::Zero(s.grid->count());
        for (int m = 0; m <= depth; ++m) acc += bank.d(IVec::Constant(1, m)).apply(f).values;
        return supDiff(acc, target);
    };
    const double shallow = residualAt(2);
    const double deep = residualAt(4);
    CHECK(deep < shallow);
    CHECK(deep < 1e-3);

    // inside the plateau every difference kills constants outright
    const GridFunction one(s.grid, Vec::Ones(s.grid->count()));
    const Mat pts = s.grid->allPoints();
    for (int j : {1, 3}) {
        const Vec dv = bank.d(IVec::Constant(1, j)).apply(one).values;
        double worst = 0.0;
        for (long i = 0; i < s.grid->count(); ++i)
            if (std::abs(pts(0, i)) <= 0.3) worst = std::max(worst, std::abs(dv[i]));
        CHECK(worst < 1e-12);
    }

    CHECK(adjointPairingGap(bank.d(IVec::Constant(1, 2)), f, compactBumpOn(s.grid, 0.45)) <
          1e-10);
    CHECK_THROWS_AS(DjBank({{}}, trunc, s.cuts, s.grid, s.fcfg), PreconditionError);
    CHECK_THROWS_AS(buildDjMu(s.lists[0], -1, s.cuts, s.grid, s.fcfg), ConfigError);
}

TEST_CASE("near and far bands split the squared sum exactly") {
    LineSetup s;
    const IVec trunc = IVec::Constant(1, 4);
    const DjBank bank(s.lists, trunc, s.cuts, s.grid, s.fcfg);
    const GridFunction f = cosineOn(s.grid, 2.1);

    Vec sum = Vec::Zero(s.grid->count());
    for (const IVec& j : enumerateIndices(trunc)) sum += bank.d(j).apply(f).values;
    Vec squared = Vec::Zero(s.grid->count());
    {
        const GridFunction sf(s.grid, sum);
        for (const IVec& j : enumerateIndices(trunc)) squared += bank.d(j).apply(sf).values;
    }

    std::vector<double> rmSups;
    for (int M : {0, 1, 4}) {
        const DiscretizedOperator um = buildUM(bank, M);
        const DiscretizedOperator rm = buildRM(bank, M);
        const Vec split = um.apply(f).values + rm.apply(f).values;
        CHECK(supDiff(split, squared) < 1e-12);
        rmSups.push_back(rm.apply(f).values.cwiseAbs().maxCoeff());
        CHECK(adjointPairingGap(um, f, cosineOn(s.grid, 1.3)) < 1e-10);
    }
    CHECK(rmSups[1] < rmSups[0]);
    // the band covers the whole index set, so the far part vanishes identically
    CHECK(rmSups[2] == 0.0);
    const DiscretizedOperator umFull = buildUM(bank, 4);
    CHECK(supDiff(umFull.apply(f).values, squared) < 1e-12);
    CHECK_THROWS_AS(buildUM(bank, -1), ConfigError);
    CHECK_THROWS_AS(buildRM(bank, -2), ConfigError);
}

TEST_CASE("truncated geometric series inverts the near-diagonal part") {
    LineSetup s;
    const IVec trunc = IVec::Constant(1, 4);
    const DjBank bank(s.lists, trunc, s.cuts, s.grid, s.fcfg);
    const GridFunction f = cosineOn(s.grid, 2.1);
    const Vec psi1 = s.cuts.psi1.evalBatch(s.grid->allPoints());
    const int band = 2;
    const DiscretizedOperator um = buildUM(bank, band);

    NeumannConfig zero;
    zero.terms = 0;
    CHECK(supDiff(buildVM(bank, band, zero).apply(f).values, f.values) == 0.0);

    auto reproducing = [&](int terms) {
        NeumannConfig cfg;
        cfg.terms = terms;
        const DiscretizedOperator vm = buildVM(bank, band, cfg);
        const Vec uv = um.apply(vm.apply(f)).values;
        return ((uv - f.values).array() * psi1.array()).abs().maxCoeff();
    };
    const double r0 = reproducing(0);
    const double r2 = reproducing(2);
    const double r8 = reproducing(8);
    CHECK(r2 < r0);
    CHECK(r8 < r2);

    // dense linear-solve oracle for the series limit
    NeumannConfig deep;
    deep.terms = 40;
    const DiscretizedOperator vm = buildVM(bank, band, deep);
    const DiscretizedOperator plateau =
        multiplyCutoffOp(s.grid, s.cuts.psi0, 4 * bank.nu(), "p0^4");
    const DiscretizedOperator remainder = sumOp({plateau, scaleOp(-1.0, um)}, "G");
    const Mat gm = materialize(remainder, 8192);
    const Mat lhs = Mat::Identity(s.grid->count(), s.grid->count()) - gm;
    const Vec dense = lhs.partialPivLu().solve(f.values);
    CHECK(supDiff(vm.apply(f).values, dense) < 1e-10);
    CHECK(adjointPairingGap(vm, f, cosineOn(s.grid, 1.3)) < 1e-10);
}

TEST_CASE("maximal average dominates every fixed dilation") {
    LineSetup s;
    MaximalConfig mcfg;
    mcfg.quadPerAxis = 64;
    mcfg.flow.box = s.sc.flowBox;
    std::vector<Vec> deltas;
    for (int k = 0; k < 3; ++k) deltas.push_back(Vec::Constant(1, std::ldexp(1.0, -k)));
    const MaximalOperator mx = buildMaximal(s.sc.gamma, s.cuts.psi, s.grid, deltas, mcfg);

    // on the line the dilation body has length exactly two
    CHECK(mx.ballVolume() == doctest::Approx(2.0).epsilon(1e-14));
    const GridFunction one(s.grid, Vec::Ones(s.grid->count()));
    const Vec psi = s.cuts.psi.evalBatch(s.grid->allPoints());
    CHECK(supDiff(mx.apply(one).values, mx.ballVolume() * psi) < 1e-12);

    const GridFunction f = compactBumpOn(s.grid, 0.45);
    const Vec mf = mx.apply(f).values;

    // brute-force dyadic maximum with standalone interpolation
    const QuadratureRule rule = midpointQuadrature(Box::cube(1, mcfg.ballRadius), 64);
    Vec brute = Vec::Zero(s.grid->count());
    for (const Vec& d : deltas) {
        const Mat tn = rule.nodes * d[0];
        const Vec avg = oracles::directTranslationAverage(
            GridFunction(s.grid, f.values.cwiseAbs()), [](double) { return 1.0; }, tn,
            rule.weight, [&](double x) { return s.cuts.psi.eval(Vec::Constant(1, x)); });
        brute = brute.cwiseMax(avg);
    }
    CHECK(supDiff(mf, brute) < 1e-10);

    for (const Vec& d : deltas) {
        const DiscretizedOperator avg = buildDeltaAverage(s.sc.gamma, s.cuts.psi, s.grid, d, mcfg);
        CHECK((mf - avg.apply(f).values.cwiseAbs()).minCoeff() >= -1e-12);
    }

    // monotone and sublinear
    const GridFunction g = compactBumpOn(s.grid, 0.3);
    const GridFunction fg(s.grid, f.values + g.values);
    CHECK((mx.apply(fg).values - mf).minCoeff() >= -1e-12);
    CHECK((mf + mx.apply(g).values - mx.apply(fg).values).minCoeff() >= -1e-12);

    CHECK_THROWS_AS(buildMaximal(s.sc.gamma, s.cuts.psi, s.grid, {}, mcfg), ConfigError);
    CHECK_THROWS_AS(
        buildMaximal(s.sc.gamma, s.cuts.psi, s.grid, {Vec::Constant(1, 1.5)}, mcfg),
        ConfigError);
}

TEST_CASE("flows that leave the safety box raise a located error") {
    LineSetup s;
    Mat nodes(1, 1);
    nodes(0, 0) = 4.0;  // outside the 2.5 half-width safety box
    bool thrown = false;
    try {
        makeFlowQuadrature(s.sc.gamma, nodes, 1.0, s.grid, s.flow);
    } catch (const BoxExitError& e) {
        thrown = true;
        CHECK(std::string(e.what()).find("safety box") != std::string::npos);
    }
    CHECK(thrown);
}

TEST_CASE("sequence operators follow the zero-extension convention") {
    LineSetup s;
    const IVec trunc = IVec::Constant(1, 2);
    const DjBank bank(s.lists, trunc, s.cuts, s.grid, s.fcfg);
    const BumpFamily fam = makeCancellingFamily(IVec::Ones(1), s.sc.kernelRadius, 0.25);
    const QuadratureRule rule = midpointQuadrature(fam.supportBox(), 128);
    auto fq = std::make_shared<FlowQuadrature>(
        makeFlowQuadrature(s.sc.gamma, rule.nodes, rule.weight, s.grid, s.flow));

    const IndexedBank dBank(trunc, s.grid,
                            [&](const IVec& j) { return bank.d(j); });
    const IndexedBank tBank(trunc, s.grid, [&](const IVec& j) {
        return buildTjShared(fam, j, s.cuts.psi, s.grid, fq);
    });

    const long n = s.grid->count();
    const long comps = indexCount(trunc);
    Vec stacked(n * comps);
    for (long c = 0; c < comps; ++c)
        stacked.segment(c * n, n) = cosineOn(s.grid, 1.1 + 0.4 * c).values;

    const SequenceOperator offRange = vectorTkk(dBank, tBank, IVec::Constant(1, 10), IVec::Zero(1));
    CHECK(offRange.applyFn(stacked).cwiseAbs().maxCoeff() == 0.0);

    const SequenceOperator aligned = vectorTkk(dBank, tBank, IVec::Zero(1), IVec::Zero(1));
    const Vec out = aligned.applyFn(stacked);
    for (long c = 0; c < comps; ++c) {
        const IVec j = IVec::Constant(1, c);
        const DiscretizedOperator direct =
            composeOp(bank.d(j), composeOp(tBank.at(j), bank.d(j)));
        const Vec expect = direct.apply(GridFunction(s.grid, stacked.segment(c * n, n))).values;
        CHECK(supDiff(out.segment(c * n, n), expect) < 1e-12);
    }

    SigmaBump sigma;
    const IndexedBank bBank(trunc, s.grid, [&](const IVec& j) {
        return buildBj(s.sc.gamma, s.lists, j, sigma, sigma, s.cuts, s.grid, s.fcfg, 24, s.flow);
    });
    const SequenceOperator bShift = vectorBk(bBank, dBank, IVec::Constant(1, 1));
    const Vec bOut = bShift.applyFn(stacked);
    // the last component's shifted index leaves the range and contributes zero
    CHECK(bOut.segment((comps - 1) * n, n).cwiseAbs().maxCoeff() == 0.0);
    const DiscretizedOperator direct0 =
        composeOp(bBank.at(IVec::Zero(1)), dBank.at(IVec::Constant(1, 1)));
    const Vec expect0 = direct0.apply(GridFunction(s.grid, stacked.segment(0, n))).values;
    CHECK(supDiff(bOut.segment(0, n), expect0) < 1e-12);

    // stacked transpose pairing
    Vec probe(n * comps);
    for (long c = 0; c < comps; ++c)
        probe.segment(c * n, n) = compactBumpOn(s.grid, 0.4).values * (1.0 + 0.3 * c);
    const double lhs = aligned.applyFn(stacked).dot(probe);
    const double rhs = stacked.dot(aligned.adjointFn(probe));
    CHECK(std::abs(lhs - rhs) / std::max(std::abs(lhs), 1e-12) < 1e-10);
}

TEST_CASE("factor composition nearly commutes on a two-factor scenario") {
    const Scenario sc = getScenario("heisenberg");
    auto grid = std::make_shared<Grid>(Grid{sc.box, IVec::Constant(3, 12)});
    const CutoffSet cuts = CutoffSet::defaults(sc.box);
    std::vector<std::vector<DegreedField>> lists(2);
    for (const DegreedField& df : sc.gamma.pureFields())
        for (int mu = 0; mu < 2; ++mu)
            if (df.degree.c[mu] > 0) {
                lists[mu].push_back(df);
                break;
            }
    FactorAverageConfig fcfg;
    fcfg.flow.box = sc.flowBox;
    fcfg.quadPerAxis = 12;
    const DjBank bank(lists, IVec::Ones(2), cuts, grid, fcfg);
    const GridFunction f = sampleOnGrid(grid, [](const Mat& pts) -> Vec {
        return ((pts.row(0).array() * 1.3).cos() * (pts.row(1).array() * 0.7).sin())
            .matrix()
            .transpose();
    });
    const Vec forward = bank.d(IVec::Ones(2)).apply(f).values;
    const Vec swapped =
        composeOp(bank.dMu(1, 1), bank.dMu(0, 1)).apply(f).values;
    CHECK(supDiff(forward, swapped) < 1e-2);
}
