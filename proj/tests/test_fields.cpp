#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mpradon/fields.hpp"
#include "mpradon/scenario.hpp"
#include "oracles.hpp"

using namespace mpradon;

namespace {

VectorField polyField(std::vector<Expr> comps) { return VectorField(std::move(comps)); }

const Box kBox{Vec::Constant(3, -1.0), Vec::Constant(3, 1.0)};

}  // namespace

TEST_CASE("symbolic lie bracket matches central differences") {
    const Expr x = Expr::coord(3, 0), y = Expr::coord(3, 1), z = Expr::coord(3, 2);
    const VectorField a = polyField({x * y, Expr::constant(3, 1.0), z * z});
    const VectorField b = polyField({Expr::sin(y), x, Expr::exp(z.scaled(0.5))});
    const Mat probes = oracles::probePoints(kBox, 25, 17);
    const VectorField br = lieBracket(a, b);
    for (Eigen::Index c = 0; c < probes.cols(); ++c) {
        const Vec expected = oracles::fdBracket(a, b, probes.col(c), 1e-5);
        const Vec got = br.evalBatch(probes.col(c)).col(0);
        CHECK((got - expected).norm() < 1e-8);
    }
}

TEST_CASE("bracket antisymmetry and jacobi identity at probes") {
    const Expr x = Expr::coord(3, 0), y = Expr::coord(3, 1), z = Expr::coord(3, 2);
    const VectorField a = polyField({y * z, x, Expr::constant(3, 2.0)});
    const VectorField b = polyField({x * x, z, y});
    const VectorField c = polyField({z, x * y, x});
    const Mat probes = oracles::probePoints(kBox, 40, 23);

    const VectorField ab = lieBracket(a, b);
    const VectorField ba = lieBracket(b, a);
    const Mat anti = ab.evalBatch(probes) + ba.evalBatch(probes);
    CHECK(anti.cwiseAbs().maxCoeff() < 1e-8);

    const Mat jac = lieBracket(a, lieBracket(b, c)).evalBatch(probes) +
                    lieBracket(b, lieBracket(c, a)).evalBatch(probes) +
                    lieBracket(c, lieBracket(a, b)).evalBatch(probes);
    CHECK(jac.cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("step-2 frame brackets close on the central field") {
    const Scenario sc = getScenario("heisenberg");
    REQUIRE(sc.frameFields.size() == 3);
    const VectorField& X = sc.frameFields[0].field;
    const VectorField& Y = sc.frameFields[1].field;
    const VectorField& T = sc.frameFields[2].field;
    const Mat probes = oracles::probePoints(sc.box, 20, 31);
    CHECK((lieBracket(X, Y).evalBatch(probes) - T.evalBatch(probes)).cwiseAbs().maxCoeff() <
          1e-10);
    CHECK(lieBracket(X, T).evalBatch(probes).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(lieBracket(Y, T).evalBatch(probes).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("formal degrees order componentwise and add under brackets") {
    FormalDegree a{(IVec(2) << 1, 0).finished()};
    FormalDegree b{(IVec(2) << 0, 1).finished()};
    FormalDegree m{(IVec(2) << 1, 1).finished()};
    CHECK(a.isPure());
    CHECK(b.isPure());
    CHECK_FALSE(m.isPure());
    CHECK(a <= m);
    CHECK(b <= m);
    CHECK_FALSE(m <= a);
    CHECK((a + b).c == m.c);
    CHECK(m.total() == 2);
}

TEST_CASE("closure of the step-2 scenario recovers the central direction") {
    const Scenario sc = getScenario("heisenberg");
    ClosureConfig cfg;
    cfg.probeBox = sc.box;
    const auto closure = generateClosure(sc.gamma, cfg);
    REQUIRE(closure.size() == 3);
    bool foundMixed = false;
    for (const auto& e : closure) {
        CHECK(e.degree.total() == e.degree.c.sum());
        if (e.depth == 2) {
            foundMixed = true;
            CHECK(e.degree.c[0] == 1);
            CHECK(e.degree.c[1] == 1);
        }
    }
    CHECK(foundMixed);
}

TEST_CASE("iterated-bracket rank reports match hand-computed counts" *
          doctest::description("grushin bracket [d/dx, x d/dy] = d/dy raises rank at depth 2")) {
    const Scenario gr = getScenario("grushin");
    std::vector<VectorField> fields;
    for (const auto& df : gr.gamma.pureFields()) fields.push_back(df.field);
    const ConditionReport depth1 = checkHormander(fields, gr.x0, 1);
    CHECK_FALSE(depth1.satisfied);
    CHECK(depth1.rank == 1);
    const ConditionReport depth2 = checkHormander(fields, gr.x0, 2);
    CHECK(depth2.satisfied);
    CHECK(depth2.rank == 2);
    CHECK(depth2.depthUsed == 2);

    // cross-check: the depth-2 bracket is exactly d/dy at the base point
    const Vec br = lieBracket(fields[0], fields[1]).evalBatch(gr.x0).col(0);
    Vec dy(2);
    dy << 0.0, 1.0;
    CHECK((br - dy).norm() < 1e-8);
}

TEST_CASE("coordinate frame spans at depth 1") {
    std::vector<VectorField> frame;
    for (int i = 0; i < 3; ++i) {
        std::vector<Expr> comps(3, Expr::zero(3));
        comps[static_cast<size_t>(i)] = Expr::constant(3, 1.0);
        frame.push_back(VectorField(comps));
    }
    const ConditionReport r = checkHormander(frame, Vec::Zero(3), 1);
    CHECK(r.satisfied);
    CHECK(r.rank == 3);
    CHECK(r.depthUsed == 1);
}

TEST_CASE("condition verdicts are pinned for the whole scenario library") {
    struct Expected {
        const char* name;
        bool finiteType;
        bool algebraic;
        int rank;
    };
    const Expected table[] = {
        {"heisenberg", true, true, 3},
        {"cubic-counterexample", true, false, 1},
        {"square-variant", true, false, 1},
        {"euclidean-negative", true, false, 2},
        {"degenerate-flat", false, true, 2},
        {"grushin", true, true, 2},
        {"abelian-translation", true, true, 1},
    };
    for (const Expected& e : table) {
        CAPTURE(e.name);
        const Scenario sc = getScenario(e.name);
        ClosureConfig ccfg;
        ccfg.probeBox = sc.box;
        const auto closure = generateClosure(sc.gamma, ccfg);
        const Mat probes = conditionProbes(sc.box, 64);
        SpanCheckConfig scfg;
        const ConditionReport ft =
            finiteTypeVerdict(closure, probes, scfg, ccfg.maxBracketDepth);
        const ConditionReport alg = checkAlgebraic(sc.gamma, closure, probes, scfg);
        CHECK(ft.satisfied == e.finiteType);
        CHECK(alg.satisfied == e.algebraic);
        std::vector<VectorField> pure;
        for (const auto& df : sc.gamma.pureFields()) pure.push_back(df.field);
        CHECK(checkHormander(pure, sc.x0, 6).rank == e.rank);
    }
}

TEST_CASE("enlarging the candidate set never flips a satisfied span to failing") {
    const Scenario sc = getScenario("heisenberg");
    ClosureConfig ccfg;
    ccfg.probeBox = sc.box;
    const auto closure = generateClosure(sc.gamma, ccfg);
    const Mat probes = conditionProbes(sc.box, 32);
    SpanCheckConfig scfg;

    std::vector<DegreedField> small, large = closure;
    for (const auto& e : closure)
        if (e.depth <= 1) small.push_back(e);
    const ConditionReport before = checkFiniteType(closure, large, probes, scfg);
    CHECK(before.satisfied);
    // adding an unrelated constant field keeps the verdict satisfied
    large.push_back(DegreedField{
        VectorField({Expr::constant(3, 1.0), Expr::zero(3), Expr::zero(3)}),
        FormalDegree{(IVec(2) << 1, 0).finished()}, "extra", 1});
    CHECK(checkFiniteType(closure, large, probes, scfg).satisfied);
}

TEST_CASE("degenerate flat coefficients blow up under the degree filter") {
    const Scenario sc = getScenario("degenerate-flat");
    ClosureConfig ccfg;
    ccfg.probeBox = sc.box;
    const auto closure = generateClosure(sc.gamma, ccfg);
    CHECK(closure.size() > 3);  // the flat field keeps generating new directions
    const Mat probes = conditionProbes(sc.box, 64);
    SpanCheckConfig scfg;
    const ConditionReport ft = finiteTypeVerdict(closure, probes, scfg, ccfg.maxBracketDepth);
    CHECK_FALSE(ft.satisfied);
    // ... while the plain frame still spans the tangent space away from x = 0
    std::vector<VectorField> pure;
    for (const auto& df : sc.gamma.pureFields()) pure.push_back(df.field);
    CHECK(checkHormander(pure, sc.x0, 2).satisfied);
}
