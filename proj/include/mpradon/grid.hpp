#pragma once

#include "mpradon/common.hpp"

#include <memory>
#include <string>

namespace mpradon {

/// Uniform cell-centered tensor grid over a box. Node d-th coordinate values
/// are lo[d] + (i + 1/2) h[d]; the flat index runs fastest in dimension 0.
/// The quadrature weight of every node is the cell volume, so inner-product
/// adjoints are plain transposes.
struct Grid {
    Box box;
    IVec nodes;

    Grid() = default;
    Grid(Box b, IVec n);

    int dim() const { return box.dim(); }
    long count() const;
    Vec spacing() const;
    double cellVolume() const;

    long flatIndex(const IVec& idx) const;
    IVec unflatten(long flat) const;
    Vec point(long flat) const;
    /// All nodes as columns, column i = point(i).
    Mat allPoints() const;

    bool operator==(const Grid& o) const;
};

struct GridFunction {
    std::shared_ptr<const Grid> grid;
    Vec values;

    GridFunction() = default;
    GridFunction(std::shared_ptr<const Grid> g, Vec v);
    static GridFunction zero(std::shared_ptr<const Grid> g);
};

/// Quadrature inner product and norms (uniform cell-volume weights).
double quadInner(const GridFunction& f, const GridFunction& g);
double quadNorm(const GridFunction& f, double p);
double supNorm(const GridFunction& f);

/// Sample a callable (batch: points matrix -> values) onto a grid.
template <typename F>
GridFunction sampleOnGrid(std::shared_ptr<const Grid> g, F&& fn) {
    return GridFunction(g, fn(g->allPoints()));
}

/// Precomputed clamped multilinear interpolation table for a fixed set of
/// target points. Weights are nonnegative and sum to 1 per target, so the
/// interpolation preserves positivity; gather/scatter are exact transposes.
struct GatherTable {
    std::shared_ptr<const Grid> grid;
    Eigen::VectorX<long> base;  // flat index of the lower corner per target
    Mat fracs;                  // dim x targetCount, each in [0, 1]

    long targetCount() const { return base.size(); }
};

GatherTable makeGatherTable(std::shared_ptr<const Grid> g, const Mat& targets);
Vec applyGather(const GatherTable& t, const Vec& values);
Vec applyScatter(const GatherTable& t, const Vec& g);

/// Flat binary format: magic, version, dim, nodes, box bounds, dtype, values.
void writeGridFunctionBinary(const GridFunction& f, const std::string& path);
GridFunction readGridFunctionBinary(const std::string& path);

/// CSV with a schema header line, coordinates then value per row.
void writeGridFunctionCsv(const GridFunction& f, const std::string& path);

}  // namespace mpradon
