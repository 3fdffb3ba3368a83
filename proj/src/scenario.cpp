#include "mpradon/scenario.hpp"

#include <functional>
#include <map>

namespace mpradon {

namespace {

VectorField constField(int dim, int axis, double c = 1.0) {
    std::vector<Expr> coeffs(dim, Expr::zero(dim));
    coeffs[axis] = Expr::constant(dim, c);
    return VectorField(std::move(coeffs));
}

IVec ivec(std::initializer_list<long> v) {
    IVec out(static_cast<int>(v.size()));
    int i = 0;
    for (long x : v) out[i++] = x;
    return out;
}

FormalDegree deg(std::initializer_list<long> v) { return FormalDegree{ivec(v)}; }

Scenario makeHeisenberg() {
    // step-2 nilpotent frame on R^3: X = dx - (y/2) dtau, Y = dy + (x/2) dtau,
    // central T = dtau carried on the mixed parameter slot
    const int n = 3;
    std::vector<Expr> xc = {Expr::constant(n, 1.0), Expr::zero(n),
                            Expr::monomial(n, {0, 1, 0}, -0.5)};
    std::vector<Expr> yc = {Expr::zero(n), Expr::constant(n, 1.0),
                            Expr::monomial(n, {1, 0, 0}, 0.5)};
    VectorField x(std::move(xc));
    VectorField y(std::move(yc));
    VectorField t = constField(n, 2);

    Scenario s;
    s.name = "heisenberg";
    s.description =
        "Step-2 nilpotent frame on R^3; the central direction rides the mixed parameter slot, "
        "so both structural conditions hold.";
    s.gamma.nu = 2;
    s.gamma.factorDims = ivec({1, 1});
    s.gamma.maxOrder = 2;
    s.gamma.terms = {{ivec({1, 0}), x}, {ivec({0, 1}), y}, {ivec({1, 1}), t}};
    s.gamma.validate();
    s.frameFields = {{x, deg({1, 0}), "X", 1}, {y, deg({0, 1}), "Y", 1}, {t, deg({1, 1}), "T", 2}};
    s.box = Box::cube(n, 1.0);
    s.flowBox = Box::cube(n, 3.0);
    s.x0 = Vec::Zero(n);
    s.kernelRadius = 0.5;
    s.defaultTruncation = ivec({4, 4});
    return s;
}

Scenario makeCubic() {
    const int n = 1;
    const VectorField dx = constField(n, 0);
    Scenario s;
    s.name = "cubic-counterexample";
    s.description =
        "Translations of the line driven by t1^3 + t1 t2 + t2^3; the mixed term escapes the "
        "degree-filtered bracket span, so partial synthesis norms can grow.";
    s.gamma.nu = 2;
    s.gamma.factorDims = ivec({1, 1});
    s.gamma.maxOrder = 3;
    s.gamma.terms = {{ivec({3, 0}), dx}, {ivec({1, 1}), dx}, {ivec({0, 3}), dx}};
    s.gamma.validate();
    s.frameFields = {{dx, deg({3, 0}), "D30", 1}, {dx, deg({0, 3}), "D03", 1}};
    s.box = Box::cube(n, 1.0);
    s.flowBox = Box::cube(n, 3.0);
    s.x0 = Vec::Zero(n);
    s.kernelRadius = 0.35;
    s.defaultTruncation = ivec({4, 4});
    return s;
}

Scenario makeSquareVariant() {
    const int n = 1;
    const VectorField dx = constField(n, 0);
    Scenario s;
    s.name = "square-variant";
    s.description =
        "Translations of the line driven by t1^2 + t1 t2 + t2^2; the even-power analogue whose "
        "partial synthesis norms stay bounded.";
    s.gamma.nu = 2;
    s.gamma.factorDims = ivec({1, 1});
    s.gamma.maxOrder = 2;
    s.gamma.terms = {{ivec({2, 0}), dx}, {ivec({1, 1}), dx}, {ivec({0, 2}), dx}};
    s.gamma.validate();
    s.frameFields = {{dx, deg({2, 0}), "D20", 1}, {dx, deg({0, 2}), "D02", 1}};
    s.box = Box::cube(n, 1.0);
    s.flowBox = Box::cube(n, 3.0);
    s.x0 = Vec::Zero(n);
    s.kernelRadius = 0.35;
    s.defaultTruncation = ivec({4, 4});
    return s;
}

Scenario makeEuclideanNegative() {
    const int n = 3;
    const VectorField dx = constField(n, 0);
    const VectorField dy = constField(n, 1);
    const VectorField dt = constField(n, 2);
    Scenario s;
    s.name = "euclidean-negative";
    s.description =
        "Coordinate translations of R^3 with the third direction on the mixed slot; the pure "
        "directions commute, so the mixed-slot span condition fails.";
    s.gamma.nu = 2;
    s.gamma.factorDims = ivec({1, 1});
    s.gamma.maxOrder = 2;
    s.gamma.terms = {{ivec({1, 0}), dx}, {ivec({0, 1}), dy}, {ivec({1, 1}), dt}};
    s.gamma.validate();
    s.frameFields = {{dx, deg({1, 0}), "DX", 1}, {dy, deg({0, 1}), "DY", 1}};
    s.box = Box::cube(n, 1.0);
    s.flowBox = Box::cube(n, 3.0);
    s.x0 = Vec::Zero(n);
    s.kernelRadius = 0.5;
    s.defaultTruncation = ivec({4, 4});
    return s;
}

Scenario makeDegenerateFlat() {
    const int n = 2;
    const VectorField dx = constField(n, 0);
    std::vector<Expr> flatC = {Expr::zero(n), Expr::flat(Expr::coord(n, 0))};
    const VectorField flatY(std::move(flatC));
    const VectorField dy = constField(n, 1);
    Scenario s;
    s.name = "degenerate-flat";
    s.description =
        "Plane frame containing exp(-1/x^2) dy: every bracket order produces a new flat "
        "coefficient, so no finite bracket set controls the deeper ones near x = 0.";
    s.gamma.nu = 2;
    s.gamma.factorDims = ivec({1, 1});
    s.gamma.maxOrder = 2;
    s.gamma.terms = {{ivec({1, 0}), dx}, {ivec({2, 0}), flatY}, {ivec({0, 1}), dy}};
    s.gamma.validate();
    s.frameFields = {{dx, deg({1, 0}), "DX", 1},
                     {flatY, deg({2, 0}), "FLATY", 1},
                     {dy, deg({0, 1}), "DY", 1}};
    s.box = Box::cube(n, 1.0);
    s.flowBox = Box::cube(n, 3.0);
    s.x0 = (Vec(n) << 0.3, 0.0).finished();
    s.kernelRadius = 0.5;
    s.defaultTruncation = ivec({4, 4});
    return s;
}

Scenario makeGrushin() {
    const int n = 2;
    const VectorField dx = constField(n, 0);
    std::vector<Expr> xdyC = {Expr::zero(n), Expr::monomial(n, {1, 0})};
    const VectorField xdy(std::move(xdyC));
    const VectorField dy = constField(n, 1);
    Scenario s;
    s.name = "grushin";
    s.description =
        "One-factor plane frame {dx, x dy}: rank drops on the line x = 0 and is restored by a "
        "single bracket.";
    s.gamma.nu = 1;
    s.gamma.factorDims = ivec({2});
    s.gamma.maxOrder = 1;
    s.gamma.terms = {{ivec({1, 0}), dx}, {ivec({0, 1}), xdy}};
    s.gamma.validate();
    s.frameFields = {{dx, deg({1}), "DX", 1}, {xdy, deg({1}), "XDY", 1}, {dy, deg({2}), "DY", 2}};
    s.box = Box::cube(n, 1.0);
    s.flowBox = Box::cube(n, 3.0);
    s.x0 = Vec::Zero(n);
    s.kernelRadius = 0.5;
    s.defaultTruncation = ivec({4});
    return s;
}

Scenario makeAbelianTranslation() {
    const int n = 1;
    const VectorField mdx = constField(n, 0, -1.0);
    Scenario s;
    s.name = "abelian-translation";
    s.description =
        "Plain translations of the line, gamma_t(x) = x - t; the fully commutative reference "
        "case for averages, maximal bounds, and charts.";
    s.gamma.nu = 1;
    s.gamma.factorDims = ivec({1});
    s.gamma.maxOrder = 1;
    s.gamma.terms = {{ivec({1}), mdx}};
    s.gamma.validate();
    s.frameFields = {{mdx, deg({1}), "MDX", 1}};
    s.box = Box::cube(n, 1.0);
    s.flowBox = Box::cube(n, 2.5);
    s.x0 = Vec::Zero(n);
    s.kernelRadius = 0.5;
    s.defaultTruncation = ivec({6});
    return s;
}

const std::map<std::string, std::function<Scenario()>>& registry() {
    static const std::map<std::string, std::function<Scenario()>> reg = {
        {"heisenberg", makeHeisenberg},
        {"cubic-counterexample", makeCubic},
        {"square-variant", makeSquareVariant},
        {"euclidean-negative", makeEuclideanNegative},
        {"degenerate-flat", makeDegenerateFlat},
        {"grushin", makeGrushin},
        {"abelian-translation", makeAbelianTranslation},
    };
    return reg;
}

}  // namespace

const std::vector<std::string>& scenarioNames() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& [name, fn] : registry()) out.push_back(name);
        return out;
    }();
    return names;
}

bool hasScenario(const std::string& name) { return registry().count(name) > 0; }

Scenario getScenario(const std::string& name) {
    auto it = registry().find(name);
    if (it == registry().end()) {
        std::string known;
        for (const auto& n : scenarioNames()) known += (known.empty() ? "" : ", ") + n;
        throw ConfigError("unknown scenario '" + name + "' (known: " + known + ")");
    }
    return it->second();
}

std::vector<Scenario> allScenarios() {
    std::vector<Scenario> out;
    for (const auto& name : scenarioNames()) out.push_back(getScenario(name));
    return out;
}

}  // namespace mpradon
