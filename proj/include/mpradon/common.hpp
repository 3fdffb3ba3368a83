#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpradon {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using IVec = Eigen::VectorXi;

/// Base class for all structured errors thrown by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Thrown when an integration or sampling step leaves the working box.
class BoxExitError : public Error {
public:
    BoxExitError(const std::string& what, Vec exitPoint)
        : Error(what), exitPoint(std::move(exitPoint)) {}
    Vec exitPoint;
};

/// Thrown when a kernel is evaluated on one of the coordinate-subspace axes.
class AxisEvalError : public Error {
public:
    AxisEvalError(const std::string& what, Vec point)
        : Error(what), point(std::move(point)) {}
    Vec point;
};

/// Thrown when a checked precondition fails (carries a diagnostic value).
class PreconditionError : public Error {
public:
    PreconditionError(const std::string& what, double value = 0.0)
        : Error(what), value(value) {}
    double value;
};

/// Axis-aligned box in R^n.
struct Box {
    Vec lo;
    Vec hi;

    int dim() const { return static_cast<int>(lo.size()); }

    bool contains(const Vec& x, double margin = 0.0) const {
        for (int d = 0; d < dim(); ++d) {
            if (x[d] < lo[d] - margin || x[d] > hi[d] + margin) return false;
        }
        return true;
    }

    Vec center() const { return 0.5 * (lo + hi); }
    Vec halfWidth() const { return 0.5 * (hi - lo); }
    double volume() const { return (hi - lo).prod(); }

    Box inflated(double factor) const {
        Vec c = center();
        Vec h = halfWidth() * factor;
        return Box{c - h, c + h};
    }

    static Box cube(int dim, double halfWidth) {
        return Box{Vec::Constant(dim, -halfWidth), Vec::Constant(dim, halfWidth)};
    }
};

inline void requireSameDim(int a, int b, const char* where) {
    if (a != b) {
        throw DimensionError(std::string(where) + ": dimension mismatch (" +
                             std::to_string(a) + " vs " + std::to_string(b) + ")");
    }
}

/// SplitMix64 step; used to derive independent sub-seeds deterministically.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t deriveSeed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t s = seed ^ (0xa0761d6478bd642fULL * (stream + 1));
    return splitmix64(s);
}

inline std::mt19937_64 makeRng(std::uint64_t seed, std::uint64_t stream = 0) {
    return std::mt19937_64(deriveSeed(seed, stream));
}

/// Radical-inverse (van der Corput) value of index i in the given base.
inline double radicalInverse(std::uint64_t i, std::uint64_t base) {
    double inv = 1.0 / static_cast<double>(base);
    double f = inv;
    double r = 0.0;
    while (i > 0) {
        r += f * static_cast<double>(i % base);
        i /= base;
        f *= inv;
    }
    return r;
}

/// Deterministic low-discrepancy points filling a box (Halton sequence).
/// Columns are points; a nonzero skip offsets the sequence start.
inline Mat haltonPoints(const Box& box, int count, std::uint64_t skip = 0) {
    static const std::uint64_t bases[] = {2, 3, 5, 7, 11, 13, 17, 19};
    const int dim = box.dim();
    if (dim > 8) throw ConfigError("haltonPoints: dimension > 8 unsupported");
    Mat pts(dim, count);
    for (int c = 0; c < count; ++c) {
        const std::uint64_t idx = skip + static_cast<std::uint64_t>(c) + 1;
        for (int d = 0; d < dim; ++d) {
            const double u = radicalInverse(idx, bases[d]);
            pts(d, c) = box.lo[d] + (box.hi[d] - box.lo[d]) * u;
        }
    }
    return pts;
}

/// Fixed-format double rendering used by all CSV writers (round-trip exact).
std::string formatDouble(double v);

inline std::string vecToString(const Vec& v) {
    std::string s = "(";
    for (int i = 0; i < v.size(); ++i) {
        if (i) s += ", ";
        s += formatDouble(v[i]);
    }
    return s + ")";
}

inline std::string ivecToString(const IVec& v) {
    std::string s = "(";
    for (int i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s + ")";
}

}  // namespace mpradon
