#pragma once

#include "mpradon/common.hpp"
#include "mpradon/cutoffs.hpp"
#include "mpradon/fields.hpp"
#include "mpradon/flows.hpp"
#include "mpradon/grid.hpp"
#include "mpradon/kernels.hpp"

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace mpradon {

/// Linear map on grid functions together with its quadrature transpose.
/// With uniform cell volumes the transpose in the quadrature inner product is
/// the plain matrix transpose, which gather/scatter pairs realize exactly.
struct DiscretizedOperator {
    std::shared_ptr<const Grid> grid;
    std::string label;
    std::function<Vec(const Vec&)> applyFn;
    std::function<Vec(const Vec&)> adjointFn;

    GridFunction apply(const GridFunction& f) const;
    GridFunction applyAdjoint(const GridFunction& f) const;
};

DiscretizedOperator identityOp(std::shared_ptr<const Grid> g);
DiscretizedOperator zeroOp(std::shared_ptr<const Grid> g);
DiscretizedOperator multiplyOp(const GridFunction& m, const std::string& label);
DiscretizedOperator multiplyCutoffOp(std::shared_ptr<const Grid> g, const SmoothCutoff& c,
                                     int power, const std::string& label);
/// a after b.
DiscretizedOperator composeOp(const DiscretizedOperator& a, const DiscretizedOperator& b);
DiscretizedOperator sumOp(std::vector<DiscretizedOperator> ops, const std::string& label);
DiscretizedOperator scaleOp(double c, const DiscretizedOperator& a);
/// Swaps apply and adjoint.
DiscretizedOperator adjointOp(const DiscretizedOperator& a);

/// Dense matrix of the operator by applying it to every impulse.
Mat materialize(const DiscretizedOperator& op, long maxNodes = 4096);

/// Lexicographic enumeration of integer multi-indices 0 <= j <= truncation,
/// first component fastest.
std::vector<IVec> enumerateIndices(const IVec& truncation);
long indexCount(const IVec& truncation);
long flattenIndex(const IVec& j, const IVec& truncation);

/// Index in the one-point compactification of the naturals.
struct ExtIndex {
    int value = 0;
    bool infinite = false;

    static ExtIndex at(int v) { return ExtIndex{v, false}; }
    static ExtIndex inf() { return ExtIndex{0, true}; }
};
using ExtIVec = std::vector<ExtIndex>;
ExtIVec allInfinite(int nu);
ExtIVec allFinite(const IVec& j);

/// Shared t-quadrature with one interpolation table per node: the expensive
/// flow work is done once and reused by every operator built on top of it.
struct FlowQuadrature {
    Mat nodes;      // parameter nodes as columns
    double weight;  // common midpoint cell weight
    std::vector<GatherTable> tables;
};

/// Flows every grid node under gamma at each quadrature node. Box exits are
/// rethrown with the offending parameter node in the message.
FlowQuadrature makeFlowQuadrature(const GammaSpec& gamma, const Mat& nodes, double weight,
                                  std::shared_ptr<const Grid> grid, const FlowConfig& cfg);

/// outer .* sum_q w_q (inner_q .* gather_q f); inner values may be empty.
DiscretizedOperator flowAverageOp(std::shared_ptr<const Grid> grid,
                                  std::shared_ptr<const FlowQuadrature> fq, Vec nodeWeights,
                                  Vec outer, std::vector<Vec> inner, const std::string& label);

/// Singular average f -> psi .* sum_q w_q K(t_q) f(gamma_{t_q}(x)).
DiscretizedOperator buildT(const ProductKernelSpec& spec, const SmoothCutoff& psi,
                           std::shared_ptr<const Grid> grid,
                           std::shared_ptr<const FlowQuadrature> fq);

/// Single dyadic piece on the shared quadrature of buildT; summing over all
/// j <= truncation reproduces buildT node for node.
DiscretizedOperator buildTjShared(const BumpFamily& family, const IVec& j,
                                  const SmoothCutoff& psi, std::shared_ptr<const Grid> grid,
                                  std::shared_ptr<const FlowQuadrature> fq);

/// Single dyadic piece with the substitution u = 2^j t: quadrature runs over
/// the unit-scale support of the family member, flows at 2^{-j} u.
DiscretizedOperator buildTj(const GammaSpec& gamma, const BumpFamily& family, const IVec& j,
                            const SmoothCutoff& psi, std::shared_ptr<const Grid> grid,
                            int quadPerAxis, const FlowConfig& flowCfg);

/// Settings shared by the one-factor scale averages behind D and A.
struct FactorAverageConfig {
    double radius = 0.35;  // per-coordinate base radius before degree shrink
    int quadPerAxis = 24;
    FlowConfig flow;
};

/// S_m f(x) = int f(e^{(2^-m u) X} x) inner(e^{(2^-m u) X} x) phi(u) du with a
/// self-normalized mollifier weight phi over the factor fields' parameter
/// block; the scaling of u is anisotropic per the one-parameter degrees.
DiscretizedOperator buildScaleAverage(const std::vector<DegreedField>& factorFields, int scale,
                                      const SmoothCutoff& inner,
                                      std::shared_ptr<const Grid> grid,
                                      const FactorAverageConfig& cfg);

/// Dyadic difference piece psi0 .* (S_j - S_{j-1}) (just psi0 .* S_0 at j=0):
/// summing over j <= J telescopes exactly to psi0 .* S_J.
DiscretizedOperator buildDjMu(const std::vector<DegreedField>& factorFields, int j,
                              const CutoffSet& cutoffs, std::shared_ptr<const Grid> grid,
                              const FactorAverageConfig& cfg);

/// Caches the per-factor scale averages so that every D_j^mu, D_j, and their
/// sums share flow tables.
class DjBank {
  public:
    DjBank(std::vector<std::vector<DegreedField>> factorFields, IVec truncation,
           CutoffSet cutoffs, std::shared_ptr<const Grid> grid, FactorAverageConfig cfg);

    int nu() const { return static_cast<int>(factorFields_.size()); }
    const IVec& truncation() const { return truncation_; }
    std::shared_ptr<const Grid> grid() const { return grid_; }
    const CutoffSet& cutoffs() const { return cutoffs_; }

    const DiscretizedOperator& scaleAverage(int mu, int m) const;
    DiscretizedOperator dMu(int mu, int m) const;
    /// D_j = D^1_{j_1} ... D^nu_{j_nu}, composed in factor order.
    DiscretizedOperator d(const IVec& j) const;

  private:
    std::vector<std::vector<DegreedField>> factorFields_;
    IVec truncation_;
    CutoffSet cutoffs_;
    std::shared_ptr<const Grid> grid_;
    FactorAverageConfig cfg_;
    mutable std::vector<std::vector<DiscretizedOperator>> scaleCache_;
};

/// A^mu_j: nonnegative sigma-weighted average at scale 2^-j over the factor
/// fields (identity direction); j = infinity degenerates to the multiplier
/// [int sigma] psi1^2.
DiscretizedOperator buildAjMu(const std::vector<DegreedField>& factorFields, ExtIndex j,
                              const SigmaBump& sigma, const CutoffSet& cutoffs,
                              std::shared_ptr<const Grid> grid, const FactorAverageConfig& cfg);

DiscretizedOperator buildAj(const std::vector<std::vector<DegreedField>>& factorFields,
                            const ExtIVec& j, const SigmaBump& sigma, const CutoffSet& cutoffs,
                            std::shared_ptr<const Grid> grid, const FactorAverageConfig& cfg);

/// M_j f = psi2 .* int f(gamma_{2^-j t}) psi2(gamma_{2^-j t}) sigma(t) dt with
/// per-factor dyadic scaling; infinite components freeze their block of t at 0
/// and contribute the analytic sigma marginal as a constant factor.
DiscretizedOperator buildMj(const GammaSpec& gamma, const ExtIVec& j, const SigmaBump& sigma,
                            const CutoffSet& cutoffs, std::shared_ptr<const Grid> grid,
                            int quadPerAxis, const FlowConfig& flowCfg);

/// B_j = sum over subsets E of {1..nu} of (-1)^|E| A_{j on E^c} M_{j on E}.
DiscretizedOperator buildBj(const GammaSpec& gamma,
                            const std::vector<std::vector<DegreedField>>& factorFields,
                            const IVec& j, const SigmaBump& sigmaFactor,
                            const SigmaBump& sigmaFull, const CutoffSet& cutoffs,
                            std::shared_ptr<const Grid> grid, const FactorAverageConfig& cfg,
                            int mQuadPerAxis, const FlowConfig& mFlowCfg);

/// Near-diagonal / far-field split of (sum_j D_j)^2 by the sup-norm band
/// |k - j|_inf <= M; U_M + R_M is the full square by construction.
DiscretizedOperator buildUM(const DjBank& bank, int M);
DiscretizedOperator buildRM(const DjBank& bank, int M);

struct NeumannConfig {
    int terms = 20;
    double normTol = 1e-3;   // power-iteration tolerance for the contraction check
    int normMaxIter = 200;
    std::uint64_t seed = 1;
};

/// V_M = sum_{m<=terms} G^m with G = mult(psi0^{4 nu}) - U_M; requires the
/// estimated contraction norm ||G|| < 1 (PreconditionError otherwise).
DiscretizedOperator buildVM(const DjBank& bank, int M, const NeumannConfig& cfg);

struct MaximalConfig {
    int quadPerAxis = 6;
    double ballRadius = 1.0;
    FlowConfig flow;
};

/// Sublinear dilated maximal average: psi .* max over the delta grid of the
/// |f| average over the parameter ball. Tables are rebuilt per call, so batch
/// application amortizes the flow work across inputs.
class MaximalOperator {
  public:
    MaximalOperator(GammaSpec gamma, SmoothCutoff psi, std::shared_ptr<const Grid> grid,
                    std::vector<Vec> deltaGrid, MaximalConfig cfg);

    GridFunction apply(const GridFunction& f) const;
    std::vector<GridFunction> applyBatch(const std::vector<GridFunction>& fs) const;
    /// Quadrature volume of the parameter ball (the f == 1 plateau value).
    double ballVolume() const;
    /// Outer cutoff sampled on the grid nodes.
    Vec psiValues() const;
    std::shared_ptr<const Grid> grid() const { return grid_; }

  private:
    GammaSpec gamma_;
    SmoothCutoff psi_;
    std::shared_ptr<const Grid> grid_;
    std::vector<Vec> deltaGrid_;
    MaximalConfig cfg_;
    Mat ballNodes_;
    double ballWeight_ = 0.0;
};

MaximalOperator buildMaximal(const GammaSpec& gamma, const SmoothCutoff& psi,
                             std::shared_ptr<const Grid> grid, const std::vector<Vec>& deltaGrid,
                             const MaximalConfig& cfg);

/// Fixed-delta linear averaging operator (no absolute value), for dominance
/// and oracle comparisons against the maximal function.
DiscretizedOperator buildDeltaAverage(const GammaSpec& gamma, const SmoothCutoff& psi,
                                      std::shared_ptr<const Grid> grid, const Vec& delta,
                                      const MaximalConfig& cfg);

/// Lazy bank of operators indexed by multi-indices in [0, truncation]; out of
/// range indices denote the zero operator.
class IndexedBank {
  public:
    IndexedBank(IVec truncation, std::shared_ptr<const Grid> grid,
                std::function<DiscretizedOperator(const IVec&)> builder);

    bool inRange(const IVec& j) const;
    const DiscretizedOperator& at(const IVec& j) const;
    const IVec& truncation() const { return truncation_; }
    std::shared_ptr<const Grid> grid() const { return grid_; }

  private:
    IVec truncation_;
    std::shared_ptr<const Grid> grid_;
    std::function<DiscretizedOperator(const IVec&)> builder_;
    mutable std::map<long, DiscretizedOperator> cache_;
};

/// Linear map on finite sequences of grid functions, stored stacked (component
/// j at offset flattenIndex(j) * grid count).
struct SequenceOperator {
    std::shared_ptr<const Grid> grid;
    IVec truncation;
    std::string label;
    std::function<Vec(const Vec&)> applyFn;
    std::function<Vec(const Vec&)> adjointFn;

    long componentCount() const { return indexCount(truncation); }
    long stackedSize() const { return componentCount() * grid->count(); }
};

/// {f_j} -> {D_j T_{j+k1} D_{j+k2} f_j}; components whose shifted index leaves
/// the truncation range are zero.
SequenceOperator vectorTkk(const IndexedBank& dBank, const IndexedBank& tBank, const IVec& k1,
                           const IVec& k2);

/// {f_j} -> {B_j D_{j+k} f_j}.
SequenceOperator vectorBk(const IndexedBank& bBank, const IndexedBank& dBank, const IVec& k);

}  // namespace mpradon
