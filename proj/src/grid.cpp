#include "mpradon/grid.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace mpradon {

Grid::Grid(Box b, IVec n) : box(std::move(b)), nodes(std::move(n)) {
    requireSameDim(box.dim(), static_cast<int>(nodes.size()), "Grid");
    for (int d = 0; d < dim(); ++d) {
        if (nodes[d] < 2) throw ConfigError("Grid: need at least 2 nodes per dimension");
        if (box.hi[d] <= box.lo[d]) throw ConfigError("Grid: empty box");
    }
}

long Grid::count() const {
    long c = 1;
    for (int d = 0; d < dim(); ++d) c *= nodes[d];
    return c;
}

Vec Grid::spacing() const {
    Vec h(dim());
    for (int d = 0; d < dim(); ++d) h[d] = (box.hi[d] - box.lo[d]) / nodes[d];
    return h;
}

double Grid::cellVolume() const { return spacing().prod(); }

long Grid::flatIndex(const IVec& idx) const {
    long f = 0, stride = 1;
    for (int d = 0; d < dim(); ++d) {
        f += idx[d] * stride;
        stride *= nodes[d];
    }
    return f;
}

IVec Grid::unflatten(long flat) const {
    IVec idx(dim());
    for (int d = 0; d < dim(); ++d) {
        idx[d] = static_cast<int>(flat % nodes[d]);
        flat /= nodes[d];
    }
    return idx;
}

Vec Grid::point(long flat) const {
    const IVec idx = unflatten(flat);
    const Vec h = spacing();
    Vec p(dim());
    for (int d = 0; d < dim(); ++d) p[d] = box.lo[d] + (idx[d] + 0.5) * h[d];
    return p;
}

Mat Grid::allPoints() const {
    const long n = count();
    const Vec h = spacing();
    Mat pts(dim(), n);
    IVec idx = IVec::Zero(dim());
    for (long f = 0; f < n; ++f) {
        for (int d = 0; d < dim(); ++d) pts(d, f) = box.lo[d] + (idx[d] + 0.5) * h[d];
        for (int d = 0; d < dim(); ++d) {
            if (++idx[d] < nodes[d]) break;
            idx[d] = 0;
        }
    }
    return pts;
}

bool Grid::operator==(const Grid& o) const {
    return nodes == o.nodes && box.lo == o.box.lo && box.hi == o.box.hi;
}

GridFunction::GridFunction(std::shared_ptr<const Grid> g, Vec v)
    : grid(std::move(g)), values(std::move(v)) {
    if (values.size() != grid->count())
        throw DimensionError("GridFunction: value count != node count");
}

GridFunction GridFunction::zero(std::shared_ptr<const Grid> g) {
    Vec v = Vec::Zero(g->count());
    return GridFunction(std::move(g), std::move(v));
}

double quadInner(const GridFunction& f, const GridFunction& g) {
    if (!(*f.grid == *g.grid)) throw DimensionError("quadInner: grids differ");
    return f.grid->cellVolume() * f.values.dot(g.values);
}

double quadNorm(const GridFunction& f, double p) {
    if (std::isinf(p)) return supNorm(f);
    if (p <= 0) throw ConfigError("quadNorm: p must be positive");
    const double s = f.values.array().abs().pow(p).sum() * f.grid->cellVolume();
    return std::pow(s, 1.0 / p);
}

double supNorm(const GridFunction& f) {
    return f.values.size() ? f.values.array().abs().maxCoeff() : 0.0;
}

GatherTable makeGatherTable(std::shared_ptr<const Grid> g, const Mat& targets) {
    requireSameDim(g->dim(), static_cast<int>(targets.rows()), "makeGatherTable");
    const int dim = g->dim();
    const Vec h = g->spacing();
    GatherTable t;
    t.grid = g;
    t.base.resize(targets.cols());
    t.fracs.resize(dim, targets.cols());
    for (Eigen::Index c = 0; c < targets.cols(); ++c) {
        long flat = 0, stride = 1;
        for (int d = 0; d < dim; ++d) {
            // continuous node coordinate; clamp to the valid cell range
            const double s = (targets(d, c) - g->box.lo[d]) / h[d] - 0.5;
            double fl = std::floor(s);
            double frac = s - fl;
            long i = static_cast<long>(fl);
            if (i < 0) {
                i = 0;
                frac = 0.0;
            }
            if (i > g->nodes[d] - 2) {
                i = g->nodes[d] - 2;
                frac = 1.0;
            }
            t.fracs(d, c) = frac;
            flat += i * stride;
            stride *= g->nodes[d];
        }
        t.base[c] = flat;
    }
    return t;
}

namespace {

void cornerStrides(const Grid& g, long* strides) {
    long s = 1;
    for (int d = 0; d < g.dim(); ++d) {
        strides[d] = s;
        s *= g.nodes[d];
    }
}

}  // namespace

Vec applyGather(const GatherTable& t, const Vec& values) {
    const Grid& g = *t.grid;
    if (values.size() != g.count()) throw DimensionError("applyGather: value size");
    const int dim = g.dim();
    long strides[8];
    cornerStrides(g, strides);
    const int corners = 1 << dim;
    Vec out(t.targetCount());
    for (long c = 0; c < t.targetCount(); ++c) {
        double acc = 0.0;
        for (int m = 0; m < corners; ++m) {
            double w = 1.0;
            long idx = t.base[c];
            for (int d = 0; d < dim; ++d) {
                const double f = t.fracs(d, c);
                if (m & (1 << d)) {
                    w *= f;
                    idx += strides[d];
                } else {
                    w *= 1.0 - f;
                }
            }
            if (w != 0.0) acc += w * values[idx];
        }
        out[c] = acc;
    }
    return out;
}

Vec applyScatter(const GatherTable& t, const Vec& gvals) {
    const Grid& g = *t.grid;
    if (gvals.size() != t.targetCount()) throw DimensionError("applyScatter: value size");
    const int dim = g.dim();
    long strides[8];
    cornerStrides(g, strides);
    const int corners = 1 << dim;
    Vec out = Vec::Zero(g.count());
    for (long c = 0; c < t.targetCount(); ++c) {
        const double v = gvals[c];
        if (v == 0.0) continue;
        for (int m = 0; m < corners; ++m) {
            double w = 1.0;
            long idx = t.base[c];
            for (int d = 0; d < dim; ++d) {
                const double f = t.fracs(d, c);
                if (m & (1 << d)) {
                    w *= f;
                    idx += strides[d];
                } else {
                    w *= 1.0 - f;
                }
            }
            if (w != 0.0) out[idx] += w * v;
        }
    }
    return out;
}

namespace {
constexpr char kMagic[4] = {'M', 'P', 'G', 'F'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kDtypeF64 = 0;
}  // namespace

void writeGridFunctionBinary(const GridFunction& f, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("writeGridFunctionBinary: cannot open " + path);
    out.write(kMagic, 4);
    auto w32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    auto w64 = [&](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };
    auto wd = [&](double v) { out.write(reinterpret_cast<const char*>(&v), 8); };
    w32(kVersion);
    w32(static_cast<std::uint32_t>(f.grid->dim()));
    w32(kDtypeF64);
    for (int d = 0; d < f.grid->dim(); ++d) w64(static_cast<std::uint64_t>(f.grid->nodes[d]));
    for (int d = 0; d < f.grid->dim(); ++d) {
        wd(f.grid->box.lo[d]);
        wd(f.grid->box.hi[d]);
    }
    out.write(reinterpret_cast<const char*>(f.values.data()),
              static_cast<std::streamsize>(sizeof(double)) * f.values.size());
    if (!out) throw Error("writeGridFunctionBinary: write failed for " + path);
}

GridFunction readGridFunctionBinary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("readGridFunctionBinary: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw Error("readGridFunctionBinary: bad magic in " + path);
    auto r32 = [&] {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    auto r64 = [&] {
        std::uint64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };
    auto rd = [&] {
        double v = 0;
        in.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };
    const std::uint32_t version = r32();
    if (version != kVersion) throw Error("readGridFunctionBinary: unsupported version");
    const int dim = static_cast<int>(r32());
    const std::uint32_t dtype = r32();
    if (dtype != kDtypeF64) throw Error("readGridFunctionBinary: unsupported dtype");
    IVec nodes(dim);
    for (int d = 0; d < dim; ++d) nodes[d] = static_cast<int>(r64());
    Vec lo(dim), hi(dim);
    for (int d = 0; d < dim; ++d) {
        lo[d] = rd();
        hi[d] = rd();
    }
    auto grid = std::make_shared<Grid>(Box{lo, hi}, nodes);
    Vec values(grid->count());
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(sizeof(double)) * values.size());
    if (!in) throw Error("readGridFunctionBinary: truncated file " + path);
    return GridFunction(grid, std::move(values));
}

void writeGridFunctionCsv(const GridFunction& f, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("writeGridFunctionCsv: cannot open " + path);
    out << "# schema=1\n";
    for (int d = 0; d < f.grid->dim(); ++d) out << "x" << d << ",";
    out << "value\n";
    for (long i = 0; i < f.grid->count(); ++i) {
        const Vec p = f.grid->point(i);
        for (int d = 0; d < f.grid->dim(); ++d) out << formatDouble(p[d]) << ",";
        out << formatDouble(f.values[i]) << "\n";
    }
}

}  // namespace mpradon
