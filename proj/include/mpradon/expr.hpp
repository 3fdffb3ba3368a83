#pragma once

#include "mpradon/common.hpp"

#include <memory>
#include <string>
#include <vector>

namespace mpradon {

class Expr;

enum class PrimKind { Exp, Sin, Cos, Recip, Flat };

/// One non-polynomial factor of a term: kind(arg)^power.
/// Flat represents exp(-m/arg^2) * arg^(-k), the value at arg = 0 being 0;
/// this family is closed under differentiation, so brackets of flat-coefficient
/// fields stay exact.
struct Prim {
    PrimKind kind = PrimKind::Exp;
    int power = 1;
    int flatM = 1;
    int flatK = 0;
    std::shared_ptr<const Expr> arg;

    std::string key() const;
    double evalScalar(double u) const;
};

/// coeff * prod_i x_i^mono[i] * prod_j prims[j]
struct Term {
    double coeff = 0.0;
    std::vector<int> mono;
    std::vector<Prim> prims;

    std::string key() const;
};

/// Canonical sum-of-terms scalar expression on R^dim. Supports the coefficient
/// whitelist needed by the scenario library: polynomials, exp/sin/cos of
/// subexpressions, reciprocals with nonvanishing denominator, and the flat
/// exp(-1/u^2) primitive. Differentiation is exact.
class Expr {
public:
    Expr() = default;

    static Expr zero(int dim);
    static Expr constant(int dim, double c);
    static Expr coord(int dim, int i);
    static Expr monomial(int dim, const std::vector<int>& exponents, double c = 1.0);

    static Expr exp(const Expr& arg);
    static Expr sin(const Expr& arg);
    static Expr cos(const Expr& arg);
    static Expr recip(const Expr& arg);
    static Expr flat(const Expr& arg);

    int dim() const { return dim_; }
    bool isZero() const { return terms_.empty(); }
    bool isPolynomial() const;
    const std::vector<Term>& terms() const { return terms_; }

    Expr operator+(const Expr& o) const;
    Expr operator-(const Expr& o) const;
    Expr operator-() const;
    Expr operator*(const Expr& o) const;
    Expr scaled(double c) const;

    Expr derivative(int i) const;

    double eval(const Vec& x) const;
    /// pts has one point per column; returns one value per column.
    Vec evalBatch(const Mat& pts) const;

    std::string str() const;

private:
    static Expr fromTerm(int dim, Term t);
    void normalize();

    int dim_ = 0;
    std::vector<Term> terms_;
};

inline Expr operator*(double c, const Expr& e) { return e.scaled(c); }

}  // namespace mpradon
