#include "mpradon/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace mpradon {

namespace {

constexpr double kBandSentinel = 1e18;  // stands in for an unbounded column ratio

double jget(const Json& j, const char* key, double dflt) {
    return j.is_object() && j.contains(key) ? j.at(key).get<double>() : dflt;
}
long jgetl(const Json& j, const char* key, long dflt) {
    return j.is_object() && j.contains(key) ? j.at(key).get<long>() : dflt;
}
bool jgetb(const Json& j, const char* key, bool dflt) {
    return j.is_object() && j.contains(key) ? j.at(key).get<bool>() : dflt;
}

IVec ivecFromJson(const Json& arr) {
    IVec v(arr.size());
    for (size_t i = 0; i < arr.size(); ++i) v[static_cast<int>(i)] = arr.at(i).get<long>();
    return v;
}

Json ivecToJson(const IVec& v) {
    Json arr = Json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
    return arr;
}

struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    std::string toCsv() const {
        std::ostringstream out;
        out << "# schema=1\n";
        for (size_t c = 0; c < columns.size(); ++c)
            out << columns[c] << (c + 1 < columns.size() ? "," : "\n");
        for (const auto& row : rows)
            for (size_t c = 0; c < row.size(); ++c)
                out << row[c] << (c + 1 < row.size() ? "," : "\n");
        return out.str();
    }

    std::string toJsonText() const {
        Json j;
        j["schema"] = 1;
        j["columns"] = columns;
        j["rows"] = rows;
        return j.dump(2) + "\n";
    }
};

struct Lab {
    ExperimentConfig cfg;
    Scenario sc;
    std::shared_ptr<const Grid> grid;
    CutoffSet cutoffs;
    BumpFamily family;
    FlowConfig flow;
    IVec truncation;
    double radius = 0.0;
};

Lab makeLab(const ExperimentConfig& cfg) {
    Lab lab;
    lab.cfg = cfg;
    lab.sc = getScenario(cfg.scenario);
    const int dim = lab.sc.box.dim();
    lab.grid = std::make_shared<Grid>(lab.sc.box, IVec::Constant(dim, cfg.gridPerAxis));
    lab.cutoffs = CutoffSet::defaults(lab.sc.box);
    lab.radius = cfg.kernelRadius > 0.0 ? cfg.kernelRadius : lab.sc.kernelRadius;
    lab.family = makeCancellingFamily(lab.sc.gamma.factorDims, lab.radius, cfg.skew);
    lab.family.cancelling = cfg.cancelling;
    lab.flow.box = lab.sc.flowBox;
    lab.truncation =
        cfg.truncation.size() > 0 ? cfg.truncation : lab.sc.defaultTruncation;
    if (lab.truncation.size() != lab.sc.gamma.nu)
        throw ConfigError("truncation arity does not match the scenario factor count");
    return lab;
}

std::vector<std::vector<DegreedField>> factorFieldLists(const Scenario& sc) {
    std::vector<std::vector<DegreedField>> lists(sc.gamma.nu);
    for (const DegreedField& df : sc.gamma.pureFields()) {
        for (int mu = 0; mu < sc.gamma.nu; ++mu) {
            if (df.degree.c[mu] > 0) {
                lists[mu].push_back(df);
                break;
            }
        }
    }
    for (int mu = 0; mu < sc.gamma.nu; ++mu)
        if (lists[mu].empty())
            throw ConfigError("scenario has no pure field on factor " + std::to_string(mu));
    return lists;
}

GridFunction gaussianOn(std::shared_ptr<const Grid> g, const Vec& center, double width) {
    return sampleOnGrid(g, [&](const Mat& pts) -> Vec {
        return (-(pts.colwise() - center).colwise().squaredNorm() / (width * width))
            .array()
            .exp()
            .transpose();
    });
}

std::vector<GridFunction> testFunctions(const Lab& lab) {
    const Vec c = lab.sc.box.center();
    const Vec h = lab.sc.box.halfWidth();
    const double w = 0.35 * h.minCoeff();
    const GridFunction f1 = gaussianOn(lab.grid, c + 0.1 * h, w);
    GridFunction f2 = sampleOnGrid(lab.grid, [&](const Mat& pts) -> Vec {
        const Vec bump = (-(pts.colwise() - c).colwise().squaredNorm() / (w * w))
                             .array()
                             .exp()
                             .transpose();
        return bump.array() * (4.0 * pts.row(0).transpose().array()).cos();
    });
    return {f1, f2};
}

PowerIterConfig scanPower(const Lab& lab, const Json& opt, std::uint64_t salt) {
    PowerIterConfig p;
    p.tol = jget(opt, "powerTol", 1e-3);
    p.maxIter = static_cast<int>(jgetl(opt, "powerMaxIter", 120));
    p.restarts = 1;
    p.seed = deriveSeed(lab.cfg.seed, salt);
    p.denseThreshold = 0;  // flow operators are applied, never materialized here
    return p;
}

struct ScanOutcome {
    std::map<std::string, double> metrics;
    std::map<std::string, std::string> artifacts;
    Json detail;
    std::vector<std::string> lines;
};

void putTable(const Lab& lab, ScanOutcome& out, const std::string& base, const Table& t) {
    if (lab.cfg.format == "json")
        out.artifacts[base + ".json"] = t.toJsonText();
    else
        out.artifacts[base + ".csv"] = t.toCsv();
}

std::string passFail(bool ok) { return ok ? "PASS" : "FAIL"; }

ScanOutcome runConditions(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    ClosureConfig ccfg;
    ccfg.probeBox = lab.sc.box;
    const auto closure = generateClosure(lab.sc.gamma, ccfg);
    const Mat probes =
        conditionProbes(lab.sc.box, static_cast<int>(jgetl(opt, "probes", 64)));
    SpanCheckConfig scfg;
    const ConditionReport ft =
        finiteTypeVerdict(closure, probes, scfg, ccfg.maxBracketDepth);
    const ConditionReport alg = checkAlgebraic(lab.sc.gamma, closure, probes, scfg);
    std::vector<VectorField> pure;
    for (const DegreedField& df : lab.sc.gamma.pureFields()) pure.push_back(df.field);
    const ConditionReport hor = checkHormander(pure, lab.sc.x0, 6);

    Table t;
    t.columns = {"check", "satisfied", "worstResidual", "worstCoeffNorm", "rank", "depth",
                 "summary"};
    auto row = [&](const char* name, const ConditionReport& r) {
        t.rows.push_back({name, r.satisfied ? "1" : "0", formatDouble(r.worstResidual),
                          formatDouble(r.worstCoeffNorm), std::to_string(r.rank),
                          std::to_string(r.depthUsed), r.summary});
    };
    row("finite-type", ft);
    row("algebraic", alg);
    row("hormander", hor);
    putTable(lab, out, "conditions", t);

    out.metrics["finiteType"] = ft.satisfied ? 1.0 : 0.0;
    out.metrics["algebraic"] = alg.satisfied ? 1.0 : 0.0;
    out.metrics["bothPass"] = (ft.satisfied && alg.satisfied) ? 1.0 : 0.0;
    out.metrics["hormanderRank"] = hor.rank;
    out.metrics["closureSize"] = static_cast<double>(closure.size());
    out.detail["finiteType"] = ft.summary;
    out.detail["algebraic"] = alg.summary;
    out.detail["hormander"] = hor.summary;
    out.lines.push_back("conditions: finite-type " + passFail(ft.satisfied) + ", algebraic " +
                        passFail(alg.satisfied) + ", bracket rank " + std::to_string(hor.rank));
    return out;
}

ScanOutcome runStability(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    const int tdim = lab.sc.gamma.tDim();
    const int quad = static_cast<int>(jgetl(opt, "quadPerAxis", tdim >= 2 ? 4 : 16));
    const int dim = lab.sc.box.dim();
    const long coarseN = lab.cfg.gridPerAxis;
    const long fineN = std::max(coarseN + 2, static_cast<long>(std::lround(1.25 * coarseN)));

    auto normAt = [&](long perAxis) {
        auto g = std::make_shared<Grid>(lab.sc.box, IVec::Constant(dim, perAxis));
        const QuadratureRule rule = midpointQuadrature(lab.family.supportBox(), quad);
        auto fq = std::make_shared<FlowQuadrature>(
            makeFlowQuadrature(lab.sc.gamma, rule.nodes, rule.weight, g, lab.flow));
        const DiscretizedOperator op =
            buildT(ProductKernelSpec{lab.family, lab.truncation}, lab.cutoffs.psi, g, fq);
        return powerNormL2(op.applyFn, op.adjointFn, g->count(),
                           scanPower(lab, opt, 0x57AB1117))
            .value;
    };
    const double coarse = normAt(coarseN);
    const double fine = normAt(fineN);
    const StabilityGate gate = refinementGate(coarse, fine, jget(opt, "tolFrac", 0.05));

    out.metrics["coarseNorm"] = gate.coarse;
    out.metrics["fineNorm"] = gate.fine;
    out.metrics["relChange"] = gate.relChange;
    out.metrics["stable"] = gate.pass ? 1.0 : 0.0;
    out.lines.push_back("stability: norm " + formatDouble(coarse) + " -> " +
                        formatDouble(fine) + " (rel change " + formatDouble(gate.relChange) +
                        ", " + passFail(gate.pass) + ")");
    return out;
}

ScanOutcome runKernel(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    const int tdim = lab.family.tDim();
    std::vector<IVec> orders;
    for (int i = 0; i < tdim; ++i) {
        IVec e = IVec::Zero(tdim);
        e[i] = 1;
        orders.push_back(e);
    }
    ValidationConfig vcfg;
    vcfg.quadPerAxis = static_cast<int>(jgetl(opt, "quadPerAxis", tdim >= 2 ? 64 : 128));
    vcfg.pairingScaleCount = static_cast<int>(jgetl(opt, "pairingScales", 8));
    const ValidationReport rep =
        validateProductKernel(ProductKernelSpec{lab.family, lab.truncation}, orders, vcfg);

    Table t;
    t.columns = {"factor", "derivOrder", "fittedExponent", "expectedExponent", "constant"};
    for (const SizeEstimateFit& f : rep.sizeFits)
        t.rows.push_back({std::to_string(f.factor), ivecToString(f.derivOrder),
                          formatDouble(f.fittedExponent), formatDouble(f.expectedExponent),
                          formatDouble(f.constant)});
    putTable(lab, out, "kernel-size", t);
    Table p;
    p.columns = {"scale", "constant"};
    for (const PairingRow& r : (rep.recursivePairing.empty() ? rep.pairing
                                                             : rep.recursivePairing))
        p.rows.push_back({formatDouble(r.scale), formatDouble(r.constant)});
    putTable(lab, out, "kernel-pairing", p);

    const FamilyAuditReport audit = auditFamily(lab.family, lab.truncation);
    out.metrics["sizeOk"] = rep.sizeOk ? 1.0 : 0.0;
    out.metrics["pairingOk"] = rep.pairingOk ? 1.0 : 0.0;
    out.metrics["pairingRatio"] = rep.pairingRatio;
    out.metrics["pairingWorst"] = rep.pairingWorst;
    out.metrics["pass"] = (rep.pass && audit.pass) ? 1.0 : 0.0;
    out.metrics["auditPass"] = audit.pass ? 1.0 : 0.0;
    out.metrics["cancellation"] = audit.worstCancellation;
    out.metrics["c1Bound"] = audit.c1Bound;
    out.lines.push_back("kernel: size " + passFail(rep.sizeOk) + ", pairing worst " +
                        formatDouble(rep.pairingWorst) + " (" + passFail(rep.pairingOk) +
                        "), audit " + passFail(audit.pass));
    return out;
}

std::shared_ptr<FlowQuadrature> sharedQuadrature(const Lab& lab, int quad) {
    const QuadratureRule rule = midpointQuadrature(lab.family.supportBox(), quad);
    return std::make_shared<FlowQuadrature>(
        makeFlowQuadrature(lab.sc.gamma, rule.nodes, rule.weight, lab.grid, lab.flow));
}

ScanOutcome runNorm(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    const int tdim = lab.sc.gamma.tDim();
    const int quad = static_cast<int>(jgetl(opt, "quadPerAxis", tdim >= 2 ? 6 : 24));
    const DiscretizedOperator op = buildT(ProductKernelSpec{lab.family, lab.truncation},
                                          lab.cutoffs.psi, lab.grid, sharedQuadrature(lab, quad));
    const NormEstimate est =
        powerNormL2(op.applyFn, op.adjointFn, lab.grid->count(), scanPower(lab, opt, 0x4E4F));
    out.metrics["normL2"] = est.value;
    out.metrics["iterations"] = est.iterations;
    out.metrics["converged"] = est.converged ? 1.0 : 0.0;
    if (opt.is_object() && opt.contains("p")) {
        const double p = opt.at("p").get<double>();
        out.metrics["normLpLower"] =
            lpOpNormMonteCarlo(op, p, static_cast<int>(jgetl(opt, "samples", 12)),
                               deriveSeed(lab.cfg.seed, 0x4C50))
                .value;
    }
    out.lines.push_back("norm: " + formatDouble(est.value) + " (" + est.method + ", " +
                        std::to_string(est.iterations) + " iterations)");
    return out;
}

ScanOutcome runApply(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    const int tdim = lab.sc.gamma.tDim();
    const int quad = static_cast<int>(jgetl(opt, "quadPerAxis", tdim >= 2 ? 6 : 24));
    const DiscretizedOperator op = buildT(ProductKernelSpec{lab.family, lab.truncation},
                                          lab.cutoffs.psi, lab.grid, sharedQuadrature(lab, quad));
    const GridFunction f = testFunctions(lab).front();
    const GridFunction g = op.apply(f);

    Table t;
    const int dim = lab.sc.box.dim();
    for (int d = 0; d < dim; ++d) t.columns.push_back("x" + std::to_string(d));
    t.columns.push_back("input");
    t.columns.push_back("output");
    const Mat pts = lab.grid->allPoints();
    for (long i = 0; i < lab.grid->count(); ++i) {
        std::vector<std::string> row;
        for (int d = 0; d < dim; ++d) row.push_back(formatDouble(pts(d, i)));
        row.push_back(formatDouble(f.values[i]));
        row.push_back(formatDouble(g.values[i]));
        t.rows.push_back(std::move(row));
    }
    putTable(lab, out, "apply", t);
    out.metrics["inputNorm"] = quadNorm(f, 2.0);
    out.metrics["outputNorm"] = quadNorm(g, 2.0);
    out.metrics["outputSup"] = supNorm(g);
    out.lines.push_back("apply: |f| " + formatDouble(out.metrics["inputNorm"]) + " -> |Tf| " +
                        formatDouble(out.metrics["outputNorm"]));
    return out;
}

ScanOutcome runDecay(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    CotlarConfig ccfg;
    ccfg.mode = CotlarMode::TjTkStar;
    ccfg.quadPerAxis = static_cast<int>(jgetl(opt, "quadPerAxis", 5));
    ccfg.flow = lab.flow;
    ccfg.power = scanPower(lab, opt, 0xDECA);
    const int range = static_cast<int>(jgetl(opt, "range", 3));
    const auto pairs = starPairs(lab.sc.gamma.nu, range);
    const DecayScan scan =
        cotlarScan(lab.sc.gamma, lab.family, lab.cutoffs.psi, lab.grid, pairs, ccfg);

    Table t;
    t.columns = {"j", "k", "dist", "norm", "auxNorm"};
    for (const ScanRow& r : scan.rows)
        t.rows.push_back({ivecToString(r.j), ivecToString(r.k), formatDouble(r.dist),
                          formatDouble(r.norm.value), formatDouble(r.auxNorm)});
    putTable(lab, out, "decay", t);

    out.metrics["epsilon"] = scan.fit.valid ? -scan.fit.slope : 0.0;
    out.metrics["fitValid"] = scan.fit.valid ? 1.0 : 0.0;
    out.metrics["fitResidual"] = scan.fit.residual;
    out.metrics["rows"] = static_cast<double>(scan.rows.size());
    out.lines.push_back("decay: fitted exponent " + formatDouble(out.metrics["epsilon"]) +
                        " over " + std::to_string(scan.rows.size()) + " pairs");
    return out;
}

ScanOutcome runPartialSum(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    const int dim = lab.sc.box.dim();
    std::shared_ptr<const Grid> grid = lab.grid;
    if (dim == 1) {
        const long n = jgetl(opt, "gridPerAxis", 512);
        grid = std::make_shared<Grid>(lab.sc.box, IVec::Constant(1, n));
    }
    PartialSumConfig pcfg;
    pcfg.quadPerAxis = static_cast<int>(jgetl(opt, "quadPerAxis", 32));
    pcfg.flow = lab.flow;
    pcfg.power = scanPower(lab, opt, 0x9A47);
    const int range = static_cast<int>(jgetl(opt, "range", 4));
    std::vector<IVec> truncations;
    for (int m = 0; m <= range; ++m)
        truncations.push_back(IVec::Constant(lab.sc.gamma.nu, m));
    const auto rows =
        partialSumGrowth(lab.sc.gamma, lab.family, lab.cutoffs.psi, grid, truncations, pcfg);

    Table t;
    t.columns = {"truncation", "norm"};
    for (const GrowthRow& r : rows)
        t.rows.push_back({ivecToString(r.truncation), formatDouble(r.norm.value)});
    putTable(lab, out, "partial-sum", t);

    int increasing = 0;
    for (size_t i = 1; i < rows.size(); ++i)
        if (rows[i].norm.value > rows[i - 1].norm.value) ++increasing;
    out.metrics["growthRatio"] =
        rows.front().norm.value > 0.0 ? rows.back().norm.value / rows.front().norm.value : 0.0;
    out.metrics["increasingSteps"] = increasing;
    out.metrics["rows"] = static_cast<double>(rows.size());
    out.lines.push_back("partial-sum: norm ratio last/first " +
                        formatDouble(out.metrics["growthRatio"]) + ", " +
                        std::to_string(increasing) + "/" + std::to_string(rows.size() - 1) +
                        " steps increasing");
    return out;
}

ScanOutcome runSquareFunction(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    IVec trunc = lab.truncation.cwiseMin(static_cast<long>(jgetl(opt, "maxScale", 3)));
    FactorAverageConfig fcfg;
    fcfg.radius = jget(opt, "averageRadius", 0.35);
    fcfg.quadPerAxis = static_cast<int>(jgetl(opt, "quadPerAxis", 16));
    fcfg.flow = lab.flow;
    const DjBank bank(factorFieldLists(lab.sc), trunc, lab.cutoffs, lab.grid, fcfg);
    const SquareFunctionReport rep =
        squareFunctionCheck(bank, testFunctions(lab), jget(opt, "p", 2.0),
                            static_cast<int>(jgetl(opt, "signDraws", 8)),
                            deriveSeed(lab.cfg.seed, 0x5153));
    out.metrics["ratioMin"] = rep.ratioMin;
    out.metrics["ratioMax"] = rep.ratioMax;
    out.metrics["reconstructionResidual"] = rep.reconstructionResidual;
    out.metrics["signRatioWorst"] = rep.signRatioWorst;
    out.lines.push_back("square-function: ratio band [" + formatDouble(rep.ratioMin) + ", " +
                        formatDouble(rep.ratioMax) + "], sign ratio " +
                        formatDouble(rep.signRatioWorst) + ", reconstruction residual " +
                        formatDouble(rep.reconstructionResidual));
    return out;
}

ScanOutcome runMaximal(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    const int nu = lab.sc.gamma.nu;
    std::vector<Vec> deltaGrid;
    const int scales = static_cast<int>(jgetl(opt, "scales", 4));
    for (int m = 0; m <= scales; ++m)
        deltaGrid.push_back(Vec::Constant(nu, std::ldexp(1.0, -m)));
    if (nu >= 2) {
        for (int a = 0; a <= 2; ++a)
            for (int b = 0; b <= 2; ++b) {
                if (a == b) continue;
                Vec d = Vec::Constant(nu, std::ldexp(1.0, -a));
                d[1] = std::ldexp(1.0, -b);
                deltaGrid.push_back(d);
            }
    }
    MaximalConfig mcfg;
    mcfg.quadPerAxis = static_cast<int>(jgetl(opt, "quadPerAxis", 6));
    mcfg.ballRadius = jget(opt, "ballRadius", 0.5);
    mcfg.flow = lab.flow;
    const MaximalOperator maxOp =
        buildMaximal(lab.sc.gamma, lab.cutoffs.psi, lab.grid, deltaGrid, mcfg);

    const auto fs = testFunctions(lab);
    std::vector<std::pair<std::string, GridFunction>> labeled = {{"smooth-bump", fs[0]},
                                                                 {"modulated", fs[1]}};
    std::vector<GridFunction> bumps;
    const Vec c = lab.sc.box.center();
    const double w0 = 0.3 * lab.sc.box.halfWidth().minCoeff();
    for (int m = 0; m <= 5; ++m) bumps.push_back(gaussianOn(lab.grid, c, w0 * std::ldexp(1.0, -m)));
    const MaximalReport rep = maximalCheck(maxOp, labeled, {1.5, 2.0, 4.0}, bumps, 2.0);

    Table t;
    t.columns = {"input", "p", "ratio"};
    for (const auto& r : rep.rows)
        t.rows.push_back({r.label, formatDouble(r.p), formatDouble(r.ratio)});
    putTable(lab, out, "maximal", t);

    double worst = 0.0;
    for (const auto& r : rep.rows) worst = std::max(worst, r.ratio);
    out.metrics["worstRatio"] = worst;
    out.metrics["linftyExact"] = rep.linftyPointwiseExact ? 1.0 : 0.0;
    out.metrics["bumpRatioMax"] = rep.bumpRatioMax;
    out.metrics["bumpRatioMin"] = rep.bumpRatioMin;
    out.metrics["bumpBand"] =
        rep.bumpRatioMin > 0.0 ? rep.bumpRatioMax / rep.bumpRatioMin : kBandSentinel;
    out.lines.push_back("maximal: worst L^p ratio " + formatDouble(worst) + ", bump band " +
                        formatDouble(out.metrics["bumpBand"]) + ", sup bound exact " +
                        passFail(rep.linftyPointwiseExact));
    return out;
}

ScanOutcome runModulus(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    const double width = jget(opt, "stepWidth", 0.5);
    const GridFunction h = sampleOnGrid(lab.grid, [&](const Mat& pts) -> Vec {
        Vec v = Vec::Zero(pts.cols());
        for (Eigen::Index i = 0; i < pts.cols(); ++i)
            if (pts(0, i) >= -width && pts(0, i) < 0.0) v[i] = 1.0;
        return v;
    });
    const int dim = lab.sc.box.dim();
    std::vector<IVec> shifts;
    for (long m = 1; 8 * m <= lab.cfg.gridPerAxis; m *= 2) {
        IVec z = IVec::Zero(dim);
        z[0] = m;
        shifts.push_back(z);
    }
    const ModulusReport rep = l1DeltaModulus(h, {0.25, 0.5, 1.0}, shifts);

    Table t;
    t.columns = {"shift", "shiftNorm", "rawL1"};
    for (const auto& r : rep.rows)
        t.rows.push_back(
            {ivecToString(r.latticeShift), formatDouble(r.shiftNorm), formatDouble(r.rawL1)});
    putTable(lab, out, "modulus", t);

    out.metrics["rawExponent"] = rep.rawExponent;
    out.metrics["modulusExponentAt1"] = rep.modulusExponent(1.0);
    out.metrics["supModulusAt1"] =
        rep.supModulus.count(1.0) ? rep.supModulus.at(1.0) : 0.0;
    out.lines.push_back("modulus: raw exponent " + formatDouble(rep.rawExponent) +
                        ", exponent margin at delta=1 " +
                        formatDouble(rep.modulusExponent(1.0)));
    return out;
}

ScanOutcome runCcBall(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    const ScaledFrame frame =
        makeScaledFrame(lab.sc.frameFields, IVec::Zero(lab.sc.gamma.nu));
    CCBallConfig ccfg;
    ccfg.box = lab.sc.flowBox;
    ccfg.stepsPerSegment = static_cast<int>(jgetl(opt, "stepsPerSegment", 12));
    ccfg.seed = deriveSeed(lab.cfg.seed, 0xCCBB);
    const double xi = jget(opt, "xi", 1.0);
    const CCBallCloud cloud =
        ccBallSample(frame, lab.sc.x0, xi, static_cast<int>(jgetl(opt, "paths", 200)),
                     static_cast<int>(jgetl(opt, "segments", 8)), ccfg);

    Table t;
    const int dim = lab.sc.box.dim();
    for (int d = 0; d < dim; ++d) t.columns.push_back("x" + std::to_string(d));
    for (Eigen::Index p = 0; p < cloud.points.cols(); ++p) {
        std::vector<std::string> row;
        for (int d = 0; d < dim; ++d) row.push_back(formatDouble(cloud.points(d, p)));
        t.rows.push_back(std::move(row));
    }
    putTable(lab, out, "cc-ball", t);

    out.metrics["kept"] = static_cast<double>(cloud.points.cols());
    out.metrics["dropped"] = cloud.dropped;
    double maxR = 0.0;
    for (Eigen::Index p = 0; p < cloud.points.cols(); ++p)
        maxR = std::max(maxR, (cloud.points.col(p) - lab.sc.x0).norm());
    out.metrics["maxRadius"] = maxR;
    for (int d = 0; d < dim; ++d) {
        double reach = 0.0;
        for (Eigen::Index p = 0; p < cloud.points.cols(); ++p)
            reach = std::max(reach, std::abs(cloud.points(d, p) - lab.sc.x0[d]));
        out.metrics["axisReach" + std::to_string(d)] = reach;
    }
    out.lines.push_back("cc-ball: " + std::to_string(cloud.points.cols()) + " endpoints, max radius " +
                        formatDouble(maxR));
    return out;
}

ChartConfig chartConfigFor(const Lab& lab, const Json& opt) {
    ChartConfig ccfg;
    ccfg.box = lab.sc.flowBox;
    ccfg.rk4Steps = static_cast<int>(jgetl(opt, "rk4Steps", 64));
    ccfg.meshPerAxis = static_cast<int>(jgetl(opt, "meshPerAxis", 9));
    ccfg.detFloorThreshold = jget(opt, "detFloorThreshold", 1e-4);
    return ccfg;
}

ScanOutcome runChart(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    const ScaledFrame frame =
        makeScaledFrame(lab.sc.frameFields, IVec::Zero(lab.sc.gamma.nu));
    const FrobeniusChart chart = buildChart(frame, lab.sc.x0, chartConfigFor(lab, opt));

    Json detail;
    detail["n0"] = chart.n0;
    detail["eta"] = chart.eta;
    detail["selection"] = chart.selection;
    detail["detFloor"] = chart.detFloor;
    detail["cBound"] = chart.cBound;
    detail["meshCount"] = chart.meshCount;
    out.artifacts["chart.json"] = detail.dump(2) + "\n";
    out.detail = detail;

    out.metrics["n0"] = chart.n0;
    out.metrics["eta"] = chart.eta;
    out.metrics["detFloor"] = chart.detFloor;
    out.metrics["cBound"] = chart.cBound;
    if (jgetb(opt, "ballCheck", false)) {
        CCBallConfig ccfg;
        ccfg.box = lab.sc.flowBox;
        ccfg.seed = deriveSeed(lab.cfg.seed, 0xBA11);
        const BallChartReport rep = chartContainsBallCheck(
            frame, chart, jget(opt, "xi", 1.0), static_cast<int>(jgetl(opt, "paths", 200)),
            static_cast<int>(jgetl(opt, "segments", 8)), ccfg);
        out.metrics["ballFraction"] = rep.fraction;
    }
    out.lines.push_back("chart: leaf dim " + std::to_string(chart.n0) + ", radius " +
                        formatDouble(chart.eta) + ", det floor " +
                        formatDouble(chart.detFloor));
    return out;
}

ScanOutcome runUniformity(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    const int range = static_cast<int>(jgetl(opt, "range", 2));
    const int nu = lab.sc.gamma.nu;
    std::vector<IVec> j0Range;
    if (nu == 1) {
        for (int m = 0; m <= range; ++m) j0Range.push_back(IVec::Constant(1, m));
    } else {
        for (int a = 0; a <= range; ++a)
            for (int b = 0; b <= range; ++b) {
                IVec j0 = IVec::Zero(nu);
                j0[0] = a;
                j0[1] = b;
                j0Range.push_back(j0);
            }
    }
    SpanCheckConfig scfg;
    const auto rows = uniformityScan(lab.sc.frameFields, lab.sc.x0, j0Range,
                                     chartConfigFor(lab, opt), scfg,
                                     static_cast<int>(jgetl(opt, "probes", 32)));

    Table t;
    t.columns = {"j0", "ok", "n0", "detFloor", "cBound", "eta", "bracketCoeffSup", "error"};
    for (const UniformityRow& r : rows)
        t.rows.push_back({ivecToString(r.j0), r.ok ? "1" : "0", std::to_string(r.n0),
                          formatDouble(r.detFloor), formatDouble(r.cBound),
                          formatDouble(r.eta), formatDouble(r.bracketCoeffSup), r.error});
    putTable(lab, out, "uniformity", t);

    auto band = [&](auto get) {
        double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
        for (const UniformityRow& r : rows) {
            if (!r.ok) continue;
            lo = std::min(lo, get(r));
            hi = std::max(hi, get(r));
        }
        if (!std::isfinite(lo)) return kBandSentinel;
        return lo > 0.0 ? hi / lo : (hi == 0.0 ? 1.0 : kBandSentinel);
    };
    long fails = 0;
    for (const UniformityRow& r : rows)
        if (!r.ok) ++fails;
    bool allConstant = fails == 0;
    for (size_t i = 1; i < rows.size() && allConstant; ++i)
        allConstant = rows[i].n0 == rows[0].n0 && rows[i].detFloor == rows[0].detFloor &&
                      rows[i].cBound == rows[0].cBound && rows[i].eta == rows[0].eta &&
                      rows[i].bracketCoeffSup == rows[0].bracketCoeffSup;

    out.metrics["rows"] = static_cast<double>(rows.size());
    out.metrics["failures"] = static_cast<double>(fails);
    out.metrics["detFloorBand"] = band([](const UniformityRow& r) { return r.detFloor; });
    out.metrics["cBoundBand"] = band([](const UniformityRow& r) { return r.cBound; });
    out.metrics["etaBand"] = band([](const UniformityRow& r) { return r.eta; });
    out.metrics["columnsConstant"] = allConstant ? 1.0 : 0.0;
    out.lines.push_back("uniformity: " + std::to_string(rows.size() - fails) + "/" +
                        std::to_string(rows.size()) + " charts built, det floor band " +
                        formatDouble(out.metrics["detFloorBand"]));
    return out;
}

ScanOutcome runWField(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    const int tdim = lab.sc.gamma.tDim();
    const Mat ts = haltonPoints(lab.family.supportBox(),
                                static_cast<int>(jgetl(opt, "samples", 64)));
    Table t;
    for (int d = 0; d < tdim; ++d) t.columns.push_back("t" + std::to_string(d));
    const int dim = lab.sc.box.dim();
    for (int d = 0; d < dim; ++d) t.columns.push_back("w" + std::to_string(d));
    double sup = 0.0;
    for (Eigen::Index c = 0; c < ts.cols(); ++c) {
        const TPoint tp{ts.col(c), lab.sc.gamma.factorDims};
        const Vec w = canonicalW(lab.sc.gamma, tp, lab.sc.x0, lab.flow);
        sup = std::max(sup, w.cwiseAbs().maxCoeff());
        std::vector<std::string> row;
        for (int d = 0; d < tdim; ++d) row.push_back(formatDouble(ts(d, c)));
        for (int d = 0; d < dim; ++d) row.push_back(formatDouble(w[d]));
        t.rows.push_back(std::move(row));
    }
    putTable(lab, out, "w-field", t);
    out.metrics["supW"] = sup;
    out.metrics["samples"] = static_cast<double>(ts.cols());
    out.lines.push_back("w-field: sup |W| " + formatDouble(sup) + " over " +
                        std::to_string(ts.cols()) + " parameter points");
    return out;
}

ScanOutcome runVectorTkk(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    const int nu = lab.sc.gamma.nu;
    const IVec trunc = lab.truncation.cwiseMin(static_cast<long>(jgetl(opt, "maxScale", 2)));
    FactorAverageConfig fcfg;
    fcfg.radius = jget(opt, "averageRadius", 0.35);
    fcfg.quadPerAxis = static_cast<int>(jgetl(opt, "quadPerAxis", 12));
    fcfg.flow = lab.flow;
    auto bank = std::make_shared<DjBank>(factorFieldLists(lab.sc), trunc, lab.cutoffs,
                                         lab.grid, fcfg);
    const IndexedBank dBank(trunc, lab.grid,
                            [bank](const IVec& j) { return bank->d(j); });
    auto fq = sharedQuadrature(lab, static_cast<int>(jgetl(opt, "tQuadPerAxis", 4)));
    const BumpFamily family = lab.family;
    const SmoothCutoff psi = lab.cutoffs.psi;
    auto grid = lab.grid;
    const IndexedBank tBank(trunc, grid, [family, psi, grid, fq](const IVec& j) {
        return buildTjShared(family, j, psi, grid, fq);
    });

    std::vector<std::pair<IVec, IVec>> kPairs;
    const int range = static_cast<int>(jgetl(opt, "range", 2));
    kPairs.push_back({IVec::Zero(nu), IVec::Zero(nu)});
    for (int mu = 0; mu < nu; ++mu)
        for (int m = 1; m <= range; ++m) {
            IVec e = IVec::Zero(nu);
            e[mu] = m;
            kPairs.push_back({e, IVec::Zero(nu)});
            kPairs.push_back({IVec::Zero(nu), e});
        }
    VectorScanConfig vcfg;
    vcfg.p = jget(opt, "p", 2.0);
    vcfg.power = scanPower(lab, opt, 0x564B);
    vcfg.seed = deriveSeed(lab.cfg.seed, 0x564C);
    const DecayScan scan = vectorTkkScan(dBank, tBank, kPairs, vcfg);

    Table t;
    t.columns = {"k1", "k2", "dist", "norm", "fixedIndexNorm"};
    for (const ScanRow& r : scan.rows)
        t.rows.push_back({ivecToString(r.j), ivecToString(r.k), formatDouble(r.dist),
                          formatDouble(r.norm.value), formatDouble(r.auxNorm)});
    putTable(lab, out, "vector-tkk", t);
    out.metrics["slope"] = scan.fit.valid ? scan.fit.slope : 0.0;
    out.metrics["rows"] = static_cast<double>(scan.rows.size());
    out.lines.push_back("vector-tkk: fitted slope " + formatDouble(out.metrics["slope"]) +
                        " over " + std::to_string(scan.rows.size()) + " shifts");
    return out;
}

ScanOutcome runVectorBk(const Lab& lab, const Json& opt) {
    ScanOutcome out;
    const int nu = lab.sc.gamma.nu;
    const IVec trunc = lab.truncation.cwiseMin(static_cast<long>(jgetl(opt, "maxScale", 2)));
    FactorAverageConfig fcfg;
    fcfg.radius = jget(opt, "averageRadius", 0.35);
    fcfg.quadPerAxis = static_cast<int>(jgetl(opt, "quadPerAxis", 12));
    fcfg.flow = lab.flow;
    auto bank = std::make_shared<DjBank>(factorFieldLists(lab.sc), trunc, lab.cutoffs,
                                         lab.grid, fcfg);
    const IndexedBank dBank(trunc, lab.grid,
                            [bank](const IVec& j) { return bank->d(j); });
    const SigmaBump sigmaFactor{1, 0.1, 0.25};
    const SigmaBump sigmaFull{lab.sc.gamma.tDim(), 0.1, 0.25};
    const auto lists = factorFieldLists(lab.sc);
    const GammaSpec gamma = lab.sc.gamma;
    const CutoffSet cutoffs = lab.cutoffs;
    auto grid = lab.grid;
    const int mQuad = static_cast<int>(jgetl(opt, "mQuadPerAxis", 4));
    const FlowConfig flow = lab.flow;
    const IndexedBank bBank(trunc, grid, [=](const IVec& j) {
        return buildBj(gamma, lists, j, sigmaFactor, sigmaFull, cutoffs, grid, fcfg, mQuad,
                       flow);
    });

    std::vector<IVec> ks = {IVec::Zero(nu)};
    const int range = static_cast<int>(jgetl(opt, "range", 2));
    for (int mu = 0; mu < nu; ++mu)
        for (int m = 1; m <= range; ++m) {
            IVec e = IVec::Zero(nu);
            e[mu] = m;
            ks.push_back(e);
        }
    VectorScanConfig vcfg;
    vcfg.p = jget(opt, "p", 2.0);
    vcfg.power = scanPower(lab, opt, 0x424B);
    vcfg.seed = deriveSeed(lab.cfg.seed, 0x424C);
    const DecayScan scan = vectorBkScan(bBank, dBank, ks, vcfg);

    Table t;
    t.columns = {"k", "dist", "norm", "fixedIndexNorm"};
    for (const ScanRow& r : scan.rows)
        t.rows.push_back({ivecToString(r.k), formatDouble(r.dist),
                          formatDouble(r.norm.value), formatDouble(r.auxNorm)});
    putTable(lab, out, "vector-bk", t);
    out.metrics["slope"] = scan.fit.valid ? scan.fit.slope : 0.0;
    out.metrics["rows"] = static_cast<double>(scan.rows.size());
    out.lines.push_back("vector-bk: fitted slope " + formatDouble(out.metrics["slope"]) +
                        " over " + std::to_string(scan.rows.size()) + " shifts");
    return out;
}

using Runner = ScanOutcome (*)(const Lab&, const Json&);

const std::map<std::string, Runner>& runners() {
    static const std::map<std::string, Runner> reg = {
        {"conditions", runConditions},
        {"stability", runStability},
        {"kernel", runKernel},
        {"norm", runNorm},
        {"apply", runApply},
        {"decay", runDecay},
        {"partial-sum", runPartialSum},
        {"square-function", runSquareFunction},
        {"maximal", runMaximal},
        {"modulus", runModulus},
        {"cc-ball", runCcBall},
        {"chart", runChart},
        {"uniformity", runUniformity},
        {"w-field", runWField},
        {"vector-tkk", runVectorTkk},
        {"vector-bk", runVectorBk},
    };
    return reg;
}

int scanPriority(const std::string& kind) {
    if (kind == "conditions") return 0;
    if (kind == "stability") return 1;
    return 2;
}

}  // namespace

const std::vector<std::string>& knownScanKinds() {
    static const std::vector<std::string> kinds = [] {
        std::vector<std::string> out;
        for (const auto& [k, fn] : runners()) out.push_back(k);
        return out;
    }();
    return kinds;
}

ExperimentConfig configFromJson(const Json& j) {
    ExperimentConfig cfg;
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    cfg.scenario = j.value("scenario", cfg.scenario);
    if (!hasScenario(cfg.scenario)) throw ConfigError("config: unknown scenario " + cfg.scenario);
    cfg.gridPerAxis = j.value("grid", cfg.gridPerAxis);
    if (cfg.gridPerAxis < 4) throw ConfigError("config: grid must be at least 4 per axis");
    if (j.contains("truncation")) cfg.truncation = ivecFromJson(j.at("truncation"));
    if (j.contains("kernel")) {
        const Json& k = j.at("kernel");
        cfg.kernelRadius = jget(k, "radius", cfg.kernelRadius);
        cfg.skew = jget(k, "skew", cfg.skew);
        cfg.cancelling = jgetb(k, "cancelling", cfg.cancelling);
    }
    cfg.seed = j.value("seed", cfg.seed);
    cfg.outDir = j.value("out", cfg.outDir);
    cfg.format = j.value("format", cfg.format);
    if (cfg.format != "csv" && cfg.format != "json")
        throw ConfigError("config: format must be csv or json");
    if (j.contains("scans")) {
        for (const Json& s : j.at("scans")) {
            ScanSpec spec;
            if (!s.contains("kind")) throw ConfigError("config: scan without kind");
            spec.kind = s.at("kind").get<std::string>();
            if (runners().find(spec.kind) == runners().end())
                throw ConfigError("config: unknown scan kind " + spec.kind);
            spec.options = s;
            if (s.contains("gates")) {
                for (const Json& g : s.at("gates")) {
                    GateSpec gate;
                    gate.metric = g.at("metric").get<std::string>();
                    if (g.contains("min")) gate.min = g.at("min").get<double>();
                    if (g.contains("max")) gate.max = g.at("max").get<double>();
                    spec.gates.push_back(std::move(gate));
                }
            }
            cfg.scans.push_back(std::move(spec));
        }
    }
    return cfg;
}

ExperimentConfig configFromFile(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    Json j;
    in >> j;
    return configFromJson(j);
}

Json resolvedConfigJson(const ExperimentConfig& cfg) {
    const Scenario sc = getScenario(cfg.scenario);
    Json j;
    j["scenario"] = cfg.scenario;
    j["grid"] = cfg.gridPerAxis;
    j["truncation"] =
        ivecToJson(cfg.truncation.size() > 0 ? cfg.truncation : sc.defaultTruncation);
    j["kernel"] = {{"radius", cfg.kernelRadius > 0.0 ? cfg.kernelRadius : sc.kernelRadius},
                   {"skew", cfg.skew},
                   {"cancelling", cfg.cancelling}};
    j["seed"] = cfg.seed;
    j["format"] = cfg.format;
    Json scans = Json::array();
    for (const ScanSpec& s : cfg.scans) {
        Json e = s.options.is_object() ? s.options : Json::object();
        e["kind"] = s.kind;
        scans.push_back(e);
    }
    j["scans"] = scans;
    return j;
}

bool ExperimentResult::gatedFailure() const {
    for (const GateOutcome& g : gates)
        if (!g.pass) return true;
    return false;
}

ExperimentResult runExperiment(const ExperimentConfig& cfg) {
    ExperimentResult res;
    const Lab lab = makeLab(cfg);
    res.summary["config"] = resolvedConfigJson(cfg);
    res.summary["scenario"] = {{"name", lab.sc.name},
                               {"description", lab.sc.description},
                               {"spaceDim", lab.sc.box.dim()},
                               {"parameterDim", lab.sc.gamma.tDim()},
                               {"factorCount", lab.sc.gamma.nu}};
    res.lines.push_back("scenario " + lab.sc.name + ": " + lab.sc.description);
    if (cfg.scans.empty()) {
        res.lines.push_back("no scans requested; configuration validated");
        res.summary["scans"] = Json::object();
        res.summary["gates"] = Json::array();
        return res;
    }

    std::vector<size_t> order(cfg.scans.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return scanPriority(cfg.scans[a].kind) < scanPriority(cfg.scans[b].kind);
    });

    Json scanSummaries = Json::object();
    for (size_t idx : order) {
        const ScanSpec& spec = cfg.scans[idx];
        Json entry;
        std::map<std::string, double> metrics;
        try {
            ScanOutcome outcome = runners().at(spec.kind)(lab, spec.options);
            metrics = outcome.metrics;
            entry["metrics"] = outcome.metrics;
            if (!outcome.detail.is_null()) entry["detail"] = outcome.detail;
            for (auto& [name, content] : outcome.artifacts)
                res.artifacts[name] = std::move(content);
            for (const std::string& line : outcome.lines) res.lines.push_back(line);
        } catch (const std::exception& e) {
            entry["error"] = e.what();
            res.lines.push_back(spec.kind + ": failed (" + std::string(e.what()) + ")");
            if (jgetb(spec.options, "fatal", false)) throw;
        }
        for (const GateSpec& gate : spec.gates) {
            GateOutcome g;
            g.scan = spec.kind;
            g.metric = gate.metric;
            g.min = gate.min;
            g.max = gate.max;
            const auto it = metrics.find(gate.metric);
            if (it == metrics.end()) {
                g.pass = false;
            } else {
                g.value = it->second;
                g.pass = (!gate.min || g.value >= *gate.min) &&
                         (!gate.max || g.value <= *gate.max);
            }
            res.lines.push_back("gate " + g.scan + "." + g.metric + " = " +
                                formatDouble(g.value) + ": " + passFail(g.pass));
            res.gates.push_back(std::move(g));
        }
        scanSummaries[spec.kind] = entry;
    }
    res.summary["scans"] = scanSummaries;

    Json gateJson = Json::array();
    for (const GateOutcome& g : res.gates) {
        Json e;
        e["scan"] = g.scan;
        e["metric"] = g.metric;
        e["value"] = g.value;
        if (g.min) e["min"] = *g.min;
        if (g.max) e["max"] = *g.max;
        e["pass"] = g.pass;
        gateJson.push_back(e);
    }
    res.summary["gates"] = gateJson;
    res.lines.push_back(std::string("result: ") +
                        (res.gatedFailure() ? "gated checks FAILED" : "all gated checks passed"));
    return res;
}

void writeArtifacts(const ExperimentResult& res, const std::string& outDir) {
    std::filesystem::create_directories(outDir);
    for (const auto& [name, content] : res.artifacts) {
        std::ofstream out(std::filesystem::path(outDir) / name, std::ios::binary);
        if (!out) throw Error("cannot write artifact " + name);
        out << content;
    }
    {
        std::ofstream out(std::filesystem::path(outDir) / "summary.json", std::ios::binary);
        out << res.summary.dump(2) << "\n";
    }
    {
        std::ofstream out(std::filesystem::path(outDir) / "summary.txt", std::ios::binary);
        for (const std::string& line : res.lines) out << line << "\n";
    }
}

}  // namespace mpradon
