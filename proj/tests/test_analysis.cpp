#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <vector>

#include "mpradon/analysis.hpp"
#include "mpradon/cutoffs.hpp"
#include "mpradon/grid.hpp"
#include "mpradon/kernels.hpp"
#include "mpradon/operators.hpp"
#include "mpradon/scenario.hpp"
#include "oracles.hpp"

using namespace mpradon;

namespace {

struct LineLab {
    Scenario sc = getScenario("abelian-translation");
    std::shared_ptr<const Grid> grid;
    CutoffSet cuts;
    FlowConfig flow;
    BumpFamily fam;

    explicit LineLab(long nodes = 64)
        : fam(makeCancellingFamily(IVec::Ones(1), 0.5, 0.25)) {
        grid = std::make_shared<Grid>(Grid{sc.box, IVec::Constant(1, nodes)});
        cuts = CutoffSet::defaults(sc.box);
        flow.box = sc.flowBox;
    }
};

GridFunction bumpOn(std::shared_ptr<const Grid> g, double radius, double freq = 0.0) {
    return sampleOnGrid(g, [radius, freq](const Mat& pts) -> Vec {
        Vec out(pts.cols());
        for (Eigen::Index c = 0; c < pts.cols(); ++c) {
            const double u = pts(0, c) / radius;
            double v = std::abs(u) < 1.0 ? std::exp(-1.0 / (1.0 - u * u)) : 0.0;
            if (freq > 0.0) v *= std::cos(freq * pts(0, c));
            out[c] = v;
        }
        return out;
    });
}

std::vector<std::vector<DegreedField>> lineFields(const Scenario& sc) {
    std::vector<std::vector<DegreedField>> lists(1);
    for (const DegreedField& df : sc.gamma.pureFields()) lists[0].push_back(df);
    return lists;
}

}  // namespace

TEST_CASE("norm estimates recover known spectra") {
    auto grid = std::make_shared<Grid>(Grid{Box::cube(1, 1.0), IVec::Constant(1, 48)});
    PowerIterConfig cfg;

    const NormEstimate ident = opNormL2(identityOp(grid), cfg);
    CHECK(ident.method == "dense-oracle");
    CHECK(ident.value == doctest::Approx(1.0).epsilon(1e-10));

    const GridFunction three(grid, Vec::Constant(grid->count(), 3.0));
    CHECK(opNormL2(multiplyOp(three, "x3"), cfg).value == doctest::Approx(3.0).epsilon(1e-10));

    // above the dense threshold the iterative path takes over
    PowerIterConfig tiny = cfg;
    tiny.denseThreshold = 8;
    const NormEstimate iter = opNormL2(identityOp(grid), tiny);
    CHECK(iter.method == "power-iteration");
    CHECK(iter.converged);
    CHECK(iter.value == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("power iteration matches the dense singular value oracle") {
    std::mt19937_64 rng(deriveSeed(99, 0x535644));
    std::normal_distribution<double> gauss;
    Mat m(200, 200);
    for (long i = 0; i < 200; ++i)
        for (long j = 0; j < 200; ++j) m(i, j) = gauss(rng) / std::sqrt(200.0);
    const Mat mt = m.transpose();

    PowerIterConfig cfg;
    cfg.tol = 1e-8;
    cfg.maxIter = 20000;
    const NormEstimate power = powerNormL2([&m](const Vec& v) { return Vec(m * v); },
                                           [&mt](const Vec& v) { return Vec(mt * v); }, 200, cfg);
    const NormEstimate dense = denseNormL2(m);
    CHECK(power.converged);
    CHECK(std::abs(power.value - dense.value) / dense.value < 1e-3);
}

TEST_CASE("operator norms are homogeneous and square under self-composition") {
    LineLab s;
    const DiscretizedOperator t0 =
        buildTj(s.sc.gamma, s.fam, IVec::Zero(1), s.cuts.psi, s.grid, 64, s.flow);
    PowerIterConfig cfg;
    const double base = opNormL2(t0, cfg).value;
    CHECK(base > 0.0);
    CHECK(opNormL2(scaleOp(-2.5, t0), cfg).value == doctest::Approx(2.5 * base).epsilon(1e-8));
    const double selfAdj = opNormL2(composeOp(t0, adjointOp(t0)), cfg).value;
    CHECK(selfAdj == doctest::Approx(base * base).epsilon(1e-8));
}

TEST_CASE("sampled p-norm ratios never exceed the true operator norm") {
    LineLab s;
    const DiscretizedOperator t0 =
        buildTj(s.sc.gamma, s.fam, IVec::Zero(1), s.cuts.psi, s.grid, 64, s.flow);
    const NormEstimate mc = lpOpNormMonteCarlo(t0, 2.0, 16, 31);
    CHECK(mc.method == "monte-carlo-lp");
    const double dense = denseNormL2(t0).value;
    CHECK(mc.value > 0.0);
    CHECK(mc.value <= dense * (1.0 + 1e-10));
}

TEST_CASE("line fits recover exact affine data and gate on distinct abscissae") {
    std::vector<double> xs = {0, 1, 2, 3, 4};
    std::vector<double> ys;
    for (double x : xs) ys.push_back(3.0 - 0.7 * x);
    const LineFitResult fit = fitLineOn(xs, ys);
    CHECK(fit.valid);
    CHECK(fit.slope == doctest::Approx(-0.7).epsilon(1e-12));
    CHECK(fit.intercept == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(fit.residual < 1e-12);

    CHECK_FALSE(fitLineOn({0, 1, 2}, {1, 2, 3}).valid);
    CHECK_FALSE(fitLineOn({1, 1, 1, 1}, {1, 2, 3, 4}).valid);
    CHECK_FALSE(fitLineOn({}, {}).valid);
}

TEST_CASE("decay fits skip vanished rows and ignore row order") {
    auto row = [](double dist, double value) {
        ScanRow r;
        r.j = IVec::Zero(1);
        r.k = IVec::Zero(1);
        r.dist = dist;
        r.norm.value = value;
        return r;
    };
    std::vector<ScanRow> rows;
    for (int d = 0; d <= 4; ++d) rows.push_back(row(d, 1.7 * std::pow(2.0, -0.8 * d)));
    rows.push_back(row(9.0, 0.0));  // zero-extension entry, must not enter the fit
    const LineFitResult fit = fitDecay(rows);
    CHECK(fit.valid);
    CHECK(fit.slope == doctest::Approx(-0.8).epsilon(1e-10));

    std::vector<ScanRow> shuffled = {rows[3], rows[5], rows[0], rows[4], rows[1], rows[2]};
    CHECK(fitDecay(shuffled).slope == doctest::Approx(fit.slope).epsilon(1e-12));
}

TEST_CASE("star pair pattern covers every direction once") {
    const auto pairs = starPairs(2, 3);
    CHECK(pairs.size() == 1 + 3 * 3);
    CHECK(pairs.front().first == IVec::Zero(2));
    CHECK(pairs.front().second == IVec::Zero(2));
    int diag = 0;
    for (const auto& [j, k] : pairs) {
        CHECK(j == IVec::Zero(2));
        if (k[0] == k[1] && k[0] > 0) ++diag;
    }
    CHECK(diag == 3);
}

TEST_CASE("pair scans decay and square at coincident indices") {
    LineLab s;
    CotlarConfig ccfg;
    ccfg.quadPerAxis = 64;
    ccfg.flow = s.flow;

    for (CotlarMode mode : {CotlarMode::TjStarTk, CotlarMode::TjTkStar}) {
        ccfg.mode = mode;
        const DecayScan scan =
            cotlarScan(s.sc.gamma, s.fam, s.cuts.psi, s.grid, starPairs(1, 4), ccfg);
        REQUIRE(scan.rows.size() == 5);
        for (size_t i = 1; i < scan.rows.size(); ++i)
            CHECK(scan.rows[i].norm.value < scan.rows[i - 1].norm.value);
        CHECK(scan.fit.valid);
        CHECK(scan.fit.slope < -0.5);
    }

    ccfg.mode = CotlarMode::TjStarTk;
    const DecayScan diag =
        cotlarScan(s.sc.gamma, s.fam, s.cuts.psi, s.grid, {{IVec::Zero(1), IVec::Zero(1)}}, ccfg);
    const DiscretizedOperator t0 =
        buildTj(s.sc.gamma, s.fam, IVec::Zero(1), s.cuts.psi, s.grid, 64, s.flow);
    const double tn = denseNormL2(t0).value;
    CHECK(diag.rows[0].norm.value == doctest::Approx(tn * tn).epsilon(1e-8));

    // optional repeated-composition column; the base block is symmetric
    // positive semidefinite, so its powers square the norm exactly
    ccfg.powerVariantColumn = true;
    ccfg.powerVariantN = 1;
    const DecayScan aug =
        cotlarScan(s.sc.gamma, s.fam, s.cuts.psi, s.grid, {{IVec::Zero(1), IVec::Zero(1)}}, ccfg);
    const double n0 = aug.rows[0].norm.value;
    CHECK(aug.rows[0].auxNorm == doctest::Approx(n0 * n0 * n0 * n0).epsilon(1e-6));
}

TEST_CASE("partial sums of the telescoping synthesis stay bounded") {
    LineLab s;
    const BumpFamily sym = makeCancellingFamily(IVec::Ones(1), 0.5);
    PartialSumConfig pcfg;
    pcfg.flow = s.flow;
    std::vector<IVec> truncs;
    for (int J = 0; J <= 4; ++J) truncs.push_back(IVec::Constant(1, J));
    const auto rows = partialSumGrowth(s.sc.gamma, sym, s.cuts.psi, s.grid, truncs, pcfg);
    REQUIRE(rows.size() == truncs.size());
    const double first = rows.front().norm.value;
    CHECK(first > 0.0);
    for (const auto& r : rows) CHECK(r.norm.value / first < 1.5);
    // the grid-resolved scales settle immediately
    CHECK(std::abs(rows[1].norm.value - first) / first < 0.05);
    CHECK(std::abs(rows[2].norm.value - first) / first < 0.05);
}

TEST_CASE("square function report sits inside a two-sided band") {
    LineLab s;
    FactorAverageConfig fcfg;
    fcfg.flow = s.flow;
    fcfg.quadPerAxis = 24;
    const DjBank bank(lineFields(s.sc), IVec::Constant(1, 6), s.cuts, s.grid, fcfg);
    const std::vector<GridFunction> fSet = {bumpOn(s.grid, 0.45), bumpOn(s.grid, 0.2),
                                            bumpOn(s.grid, 0.45, 6.0)};
    const SquareFunctionReport rep = squareFunctionCheck(bank, fSet, 2.0, 12, 123);
    CHECK(rep.perFunctionRatio.size() == fSet.size());
    CHECK(rep.ratioMin > 0.4);
    CHECK(rep.ratioMax < 2.5);
    CHECK(rep.ratioMax / rep.ratioMin < 2.0);
    CHECK(rep.reconstructionResidual < 5e-3);
    CHECK(rep.signRatioWorst >= 1.0);
    CHECK(rep.signRatioWorst < 3.0);
}

TEST_CASE("maximal report bounds stay uniform over bump scales") {
    LineLab s(256);
    MaximalConfig mcfg;
    mcfg.quadPerAxis = 64;
    mcfg.flow.box = s.sc.flowBox;
    std::vector<Vec> deltas;
    for (int k = 0; k < 5; ++k) deltas.push_back(Vec::Constant(1, std::ldexp(1.0, -k)));
    const MaximalOperator mx = buildMaximal(s.sc.gamma, s.cuts.psi, s.grid, deltas, mcfg);

    const std::vector<std::pair<std::string, GridFunction>> fSet = {
        {"wide", bumpOn(s.grid, 0.45)}, {"osc", bumpOn(s.grid, 0.45, 6.0)}};
    std::vector<GridFunction> bumps;
    for (int m = 0; m <= 4; ++m) bumps.push_back(bumpOn(s.grid, 0.4 * std::ldexp(1.0, -m)));
    const MaximalReport rep = maximalCheck(mx, fSet, {1.5, 2.0, 4.0}, bumps, 2.0);

    CHECK(rep.rows.size() == fSet.size() * 3);
    for (const auto& r : rep.rows) {
        CHECK(r.ratio > 0.0);
        CHECK(r.ratio < 10.0);
    }
    CHECK(rep.linftyPointwiseExact);
    CHECK(rep.bumpRatioMin > 0.0);
    CHECK(rep.bumpRatioMax / rep.bumpRatioMin < 4.0);

    // constant input: the ratio in sup norm is exactly the plateau constant
    const GridFunction one(s.grid, Vec::Ones(s.grid->count()));
    const GridFunction m1 = mx.apply(one);
    CHECK(supNorm(m1) == doctest::Approx(mx.ballVolume() * mx.psiValues().maxCoeff()));
}

TEST_CASE("translation modulus separates smooth mass from point mass") {
    LineLab s(256);
    const GridFunction h = bumpOn(s.grid, 0.45);
    std::vector<IVec> shifts;
    for (long z : {1L, 2L, 4L, 8L, 16L}) shifts.push_back(IVec::Constant(1, z));
    const ModulusReport rep = l1DeltaModulus(h, {0.5, 1.0}, shifts);
    REQUIRE(rep.rows.size() == shifts.size());
    for (size_t i = 1; i < rep.rows.size(); ++i)
        CHECK(rep.rows[i].rawL1 > rep.rows[i - 1].rawL1);
    CHECK(rep.rawExponent == doctest::Approx(1.0).epsilon(0.05));
    CHECK(rep.modulusExponent(0.5) > 0.4);

    // the gradient sets the first-order modulus scale: int |h'| = 2 max h
    const double gradMass = 2.0 * std::exp(-1.0);
    CHECK(rep.supModulus.at(1.0) > 0.5 * gradMass);
    CHECK(rep.supModulus.at(1.0) < 2.0 * gradMass);

    // a one-cell spike translates to disjoint copies: constant raw distance
    Vec spike = Vec::Zero(s.grid->count());
    spike[s.grid->count() / 2] = 1.0;
    const ModulusReport srep = l1DeltaModulus(GridFunction(s.grid, spike), {1.0}, shifts);
    for (const auto& r : srep.rows)
        CHECK(r.rawL1 == doctest::Approx(2.0 * s.grid->cellVolume()).epsilon(1e-12));
    CHECK(std::abs(srep.rawExponent) < 0.05);
    CHECK(srep.modulusExponent(1.0) < -0.8);

    CHECK_THROWS_AS(l1DeltaModulus(h, {1.0}, {IVec::Zero(1)}), ConfigError);
    CHECK_THROWS_AS(l1DeltaModulus(h, {1.0}, {IVec::Constant(1, 200)}), ConfigError);
}

TEST_CASE("sequence scans decay with the shift and vanish off range") {
    LineLab s;
    FactorAverageConfig fcfg;
    fcfg.flow = s.flow;
    fcfg.quadPerAxis = 24;
    const IVec trunc = IVec::Constant(1, 3);
    const DjBank bank(lineFields(s.sc), trunc, s.cuts, s.grid, fcfg);
    const QuadratureRule rule = midpointQuadrature(s.fam.supportBox(), 64);
    auto fq = std::make_shared<FlowQuadrature>(
        makeFlowQuadrature(s.sc.gamma, rule.nodes, rule.weight, s.grid, s.flow));
    const IndexedBank dB(trunc, s.grid, [&](const IVec& j) { return bank.d(j); });
    const IndexedBank tB(trunc, s.grid, [&](const IVec& j) {
        return buildTjShared(s.fam, j, s.cuts.psi, s.grid, fq);
    });

    VectorScanConfig vcfg;
    std::vector<std::pair<IVec, IVec>> kPairs;
    for (int k = 0; k <= 3; ++k) kPairs.push_back({IVec::Constant(1, k), IVec::Zero(1)});
    kPairs.push_back({IVec::Constant(1, 9), IVec::Zero(1)});
    const DecayScan ts = vectorTkkScan(dB, tB, kPairs, vcfg);
    REQUIRE(ts.rows.size() == kPairs.size());
    for (int k = 1; k <= 3; ++k) CHECK(ts.rows[k].norm.value < ts.rows[k - 1].norm.value);
    CHECK(ts.rows.back().norm.value == 0.0);
    CHECK(ts.fit.valid);
    CHECK(ts.fit.slope < 0.0);

    // the diagonal auxiliary column is the plain composition norm
    const DiscretizedOperator comp = composeOp(
        dB.at(IVec::Zero(1)), composeOp(tB.at(IVec::Zero(1)), dB.at(IVec::Zero(1))));
    CHECK(ts.rows[0].auxNorm == doctest::Approx(denseNormL2(comp).value).epsilon(0.02));

    SigmaBump sigma;
    const IndexedBank bB(trunc, s.grid, [&](const IVec& j) {
        return buildBj(s.sc.gamma, lineFields(s.sc), j, sigma, sigma, s.cuts, s.grid, fcfg, 24,
                       s.flow);
    });
    std::vector<IVec> ks;
    for (int k = 0; k <= 3; ++k) ks.push_back(IVec::Constant(1, k));
    ks.push_back(IVec::Constant(1, 9));
    const DecayScan bs = vectorBkScan(bB, dB, ks, vcfg);
    for (int k = 1; k <= 3; ++k) CHECK(bs.rows[k].norm.value < bs.rows[k - 1].norm.value);
    CHECK(bs.rows.back().norm.value == 0.0);
    CHECK(bs.fit.valid);
    CHECK(bs.fit.slope < 0.0);

    // p = 4 falls back to the sampled surrogate
    VectorScanConfig v4 = vcfg;
    v4.p = 4.0;
    const DecayScan t4 = vectorTkkScan(dB, tB, {kPairs[0]}, v4);
    CHECK(t4.rows[0].norm.method == "monte-carlo-lp");
    CHECK(t4.rows[0].norm.value > 0.0);
}

TEST_CASE("refinement gate passes small changes and rejects jumps") {
    const StabilityGate ok = refinementGate(1.0, 1.03);
    CHECK(ok.pass);
    CHECK(ok.relChange == doctest::Approx(0.03 / 1.03).epsilon(1e-12));
    CHECK_FALSE(refinementGate(1.0, 1.2).pass);
    CHECK(refinementGate(0.0, 0.0).pass);
    CHECK(refinementGate(5.0, 5.0).relChange == 0.0);
}
