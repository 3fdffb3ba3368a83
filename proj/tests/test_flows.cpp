#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mpradon/flows.hpp"
#include "mpradon/scenario.hpp"
#include "oracles.hpp"

using namespace mpradon;

namespace {

FlowConfig wideFlow(int dim, double halfWidth = 6.0, int steps = 64) {
    FlowConfig cfg;
    cfg.stepCount = steps;
    cfg.box = Box::cube(dim, halfWidth);
    return cfg;
}

TPoint tpoint2(double t1, double t2) {
    return TPoint{(Vec(2) << t1, t2).finished(), IVec::Ones(2)};
}

}  // namespace

TEST_CASE("rk4 converges at fourth order on a nonpolynomial field") {
    const Expr x = Expr::coord(2, 0), y = Expr::coord(2, 1);
    const VectorField v({Expr::sin(y) + Expr::cos(x).scaled(0.3), x});
    Mat start(2, 3);
    start << 0.2, -0.4, 0.7, 0.1, 0.5, -0.3;

    const Mat ref = rk4FlowBatch(v, start, 1.0, wideFlow(2, 6.0, 4096));
    std::vector<double> logH, logErr;
    for (int steps : {16, 32, 64, 128}) {
        const Mat got = rk4FlowBatch(v, start, 1.0, wideFlow(2, 6.0, steps));
        logH.push_back(std::log2(1.0 / steps));
        logErr.push_back(std::log2((got - ref).cwiseAbs().maxCoeff()));
    }
    // least-squares slope of log error vs log step size
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(logH.size());
    for (size_t i = 0; i < logH.size(); ++i) {
        sx += logH[i];
        sy += logErr[i];
        sxx += logH[i] * logH[i];
        sxy += logH[i] * logErr[i];
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    CHECK(slope >= 3.5);
}

TEST_CASE("trajectories leaving the integration box raise a diagnostic error") {
    const VectorField v({Expr::constant(1, 1.0)});
    Mat start(1, 1);
    start << 0.0;
    CHECK_THROWS_AS(rk4FlowBatch(v, start, 1.0, wideFlow(1, 0.25)), BoxExitError);
}

TEST_CASE("frozen field assembles the parameter-weighted combination") {
    const Scenario sc = getScenario("heisenberg");
    const TPoint t = tpoint2(0.3, -0.5);
    const VectorField v = frozenField(sc.gamma, t);
    Vec p(3);
    p << 0.2, 0.4, -0.1;
    // t1*X + t2*Y + t1*t2*T at p, with X = dx - (y/2) dtau, Y = dy + (x/2) dtau
    Vec expected(3);
    expected << 0.3, -0.5, 0.3 * (-0.4 / 2.0) + (-0.5) * (0.2 / 2.0) + (0.3 * -0.5);
    CHECK((v.evalBatch(p).col(0) - expected).norm() < 1e-14);
    CHECK(tPower((IVec(2) << 1, 1).finished(), t.coords) == doctest::Approx(-0.15));
    CHECK(tPower((IVec(2) << 3, 0).finished(), t.coords) == doctest::Approx(0.027));
}

TEST_CASE("step-2 flow matches the closed-form group law") {
    const Scenario sc = getScenario("heisenberg");
    const FlowConfig cfg = wideFlow(3);
    const Mat probes = oracles::probePoints(Box::cube(3, 0.8), 10, 41);
    for (double t1 : {-0.4, 0.25}) {
        for (double t2 : {0.3, -0.15}) {
            const TPoint t = tpoint2(t1, t2);
            Vec w(3);
            w << t1, t2, t1 * t2;
            for (Eigen::Index c = 0; c < probes.cols(); ++c) {
                const Vec got = gammaFlow(sc.gamma, t, probes.col(c), cfg);
                const Vec expected = oracles::nilpotentMul(probes.col(c), w);
                CHECK((got - expected).norm() < 1e-12);
            }
        }
    }
}

TEST_CASE("gamma at t = 0 is the exact identity") {
    const Scenario sc = getScenario("grushin");
    const Mat probes = oracles::probePoints(sc.box, 8, 43);
    const Mat out = gammaFlowBatch(sc.gamma, TPoint::zero(sc.gamma.factorDims), probes,
                                   wideFlow(2));
    CHECK((out - probes).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("inverse flow round-trips under both modes") {
    for (const char* name : {"heisenberg", "grushin"}) {
        CAPTURE(name);
        const Scenario sc = getScenario(name);
        const int dim = sc.box.dim();
        FlowConfig cfg = wideFlow(dim);
        const Mat probes = oracles::probePoints(Box::cube(dim, 0.6), 8, 47);
        const TPoint t = dim == 3 ? tpoint2(0.35, -0.2)
                                  : TPoint{(Vec(2) << 0.35, -0.2).finished(),
                                           (IVec(1) << 2).finished()};
        for (InverseMode mode : {InverseMode::NegateTime, InverseMode::RootFind}) {
            cfg.inverseMode = mode;
            const Mat fwd = gammaFlowBatch(sc.gamma, t, probes, cfg);
            const Mat back = gammaInverseBatch(sc.gamma, t, fwd, cfg);
            CHECK((back - probes).cwiseAbs().maxCoeff() < 1e-8);
        }
    }
}

TEST_CASE("two-scale composition with equal arguments is the identity") {
    const Scenario sc = getScenario("heisenberg");
    const FlowConfig cfg = wideFlow(3);
    const TPoint s = tpoint2(0.4, 0.3);
    const IVec j = (IVec(2) << 1, 2).finished();
    Vec p(3);
    p << 0.1, -0.2, 0.05;
    const Vec out = thetaMap(sc.gamma, j, j, s, s, p, cfg);
    CHECK((out - p).norm() < 1e-9);
}

TEST_CASE("scaling derivative of the cubic translation matches the symbolic value") {
    const Scenario sc = getScenario("cubic-counterexample");
    const FlowConfig cfg = wideFlow(1, 8.0);
    Vec x(1);
    x << 0.3;
    for (double t1 : {-0.45, 0.2, 0.5}) {
        for (double t2 : {0.4, -0.3}) {
            const TPoint t = tpoint2(t1, t2);
            const Vec w = canonicalW(sc.gamma, t, x, cfg);
            const double expected =
                3.0 * t1 * t1 * t1 + 2.0 * t1 * t2 + 3.0 * t2 * t2 * t2;
            CHECK(w[0] == doctest::Approx(expected).epsilon(1e-7));
        }
    }
}

TEST_CASE("scaling derivative of plain translation is the negated parameter") {
    const Scenario sc = getScenario("abelian-translation");
    const FlowConfig cfg = wideFlow(1, 8.0);
    Vec x(1);
    x << -0.2;
    for (double t1 : {-0.5, 0.1, 0.45}) {
        const TPoint t{Vec::Constant(1, t1), (IVec(1) << 1).finished()};
        const Vec w = canonicalW(sc.gamma, t, x, cfg);
        CHECK(w[0] == doctest::Approx(-t1).epsilon(1e-8));
    }
    const Vec w0 = canonicalW(sc.gamma, TPoint::zero(sc.gamma.factorDims), x, cfg);
    CHECK(w0.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("anisotropic scaling acts factorwise on parameter points") {
    const TPoint t{(Vec(3) << 0.8, 0.4, -0.6).finished(), (IVec(2) << 2, 1).finished()};
    const TPoint s = t.dyadicScaled((IVec(2) << 1, 2).finished());
    CHECK(s.coords[0] == doctest::Approx(0.4));
    CHECK(s.coords[1] == doctest::Approx(0.2));
    CHECK(s.coords[2] == doctest::Approx(-0.15));
    CHECK(t.factorNorm(0) == doctest::Approx(std::hypot(0.8, 0.4)));
    CHECK(t.factor(1).size() == 1);
}
