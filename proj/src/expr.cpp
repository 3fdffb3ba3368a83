#include "mpradon/expr.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

namespace mpradon {

std::string formatDouble(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

namespace {

const char* primName(PrimKind k) {
    switch (k) {
        case PrimKind::Exp: return "exp";
        case PrimKind::Sin: return "sin";
        case PrimKind::Cos: return "cos";
        case PrimKind::Recip: return "recip";
        case PrimKind::Flat: return "flat";
    }
    return "?";
}

double flatEval(double u, int m, int k) {
    if (u == 0.0) return 0.0;
    const double a = -static_cast<double>(m) / (u * u) -
                     static_cast<double>(k) * std::log(std::abs(u));
    if (a < -745.0) return 0.0;
    double v = std::exp(a);
    if (u < 0.0 && (k % 2 != 0)) v = -v;
    return v;
}

}  // namespace

std::string Prim::key() const {
    std::string s = primName(kind);
    s += "[";
    s += arg ? arg->str() : "";
    s += "]";
    if (kind == PrimKind::Flat) {
        s += "{" + std::to_string(flatM) + "," + std::to_string(flatK) + "}";
    } else {
        s += "^" + std::to_string(power);
    }
    return s;
}

double Prim::evalScalar(double u) const {
    switch (kind) {
        case PrimKind::Exp: return std::exp(power * u);
        case PrimKind::Sin: return std::pow(std::sin(u), power);
        case PrimKind::Cos: return std::pow(std::cos(u), power);
        case PrimKind::Recip: return 1.0 / std::pow(u, power);
        case PrimKind::Flat: return flatEval(u, flatM, flatK);
    }
    return 0.0;
}

std::string Term::key() const {
    std::string s;
    for (size_t i = 0; i < mono.size(); ++i) {
        if (mono[i] != 0) s += "x" + std::to_string(i) + "^" + std::to_string(mono[i]) + " ";
    }
    for (const Prim& p : prims) s += p.key() + " ";
    return s;
}

Expr Expr::zero(int dim) {
    Expr e;
    e.dim_ = dim;
    return e;
}

Expr Expr::constant(int dim, double c) {
    Expr e;
    e.dim_ = dim;
    if (c != 0.0) {
        Term t;
        t.coeff = c;
        t.mono.assign(dim, 0);
        e.terms_.push_back(std::move(t));
    }
    return e;
}

Expr Expr::coord(int dim, int i) {
    std::vector<int> exps(dim, 0);
    exps[i] = 1;
    return monomial(dim, exps);
}

Expr Expr::monomial(int dim, const std::vector<int>& exponents, double c) {
    if (static_cast<int>(exponents.size()) != dim)
        throw DimensionError("Expr::monomial: exponent count != dim");
    Expr e;
    e.dim_ = dim;
    if (c != 0.0) {
        Term t;
        t.coeff = c;
        t.mono = exponents;
        e.terms_.push_back(std::move(t));
    }
    return e;
}

Expr Expr::fromTerm(int dim, Term t) {
    Expr e;
    e.dim_ = dim;
    if (t.coeff != 0.0) e.terms_.push_back(std::move(t));
    e.normalize();
    return e;
}

Expr Expr::exp(const Expr& arg) {
    Prim p;
    p.kind = PrimKind::Exp;
    p.arg = std::make_shared<Expr>(arg);
    Term t;
    t.coeff = 1.0;
    t.mono.assign(arg.dim(), 0);
    t.prims.push_back(std::move(p));
    return fromTerm(arg.dim(), std::move(t));
}

Expr Expr::sin(const Expr& arg) {
    Prim p;
    p.kind = PrimKind::Sin;
    p.arg = std::make_shared<Expr>(arg);
    Term t;
    t.coeff = 1.0;
    t.mono.assign(arg.dim(), 0);
    t.prims.push_back(std::move(p));
    return fromTerm(arg.dim(), std::move(t));
}

Expr Expr::cos(const Expr& arg) {
    Prim p;
    p.kind = PrimKind::Cos;
    p.arg = std::make_shared<Expr>(arg);
    Term t;
    t.coeff = 1.0;
    t.mono.assign(arg.dim(), 0);
    t.prims.push_back(std::move(p));
    return fromTerm(arg.dim(), std::move(t));
}

Expr Expr::recip(const Expr& arg) {
    Prim p;
    p.kind = PrimKind::Recip;
    p.arg = std::make_shared<Expr>(arg);
    Term t;
    t.coeff = 1.0;
    t.mono.assign(arg.dim(), 0);
    t.prims.push_back(std::move(p));
    return fromTerm(arg.dim(), std::move(t));
}

Expr Expr::flat(const Expr& arg) {
    Prim p;
    p.kind = PrimKind::Flat;
    p.flatM = 1;
    p.flatK = 0;
    p.arg = std::make_shared<Expr>(arg);
    Term t;
    t.coeff = 1.0;
    t.mono.assign(arg.dim(), 0);
    t.prims.push_back(std::move(p));
    return fromTerm(arg.dim(), std::move(t));
}

bool Expr::isPolynomial() const {
    for (const Term& t : terms_)
        if (!t.prims.empty()) return false;
    return true;
}

void Expr::normalize() {
    for (Term& t : terms_) {
        std::sort(t.prims.begin(), t.prims.end(),
                  [](const Prim& a, const Prim& b) { return a.key() < b.key(); });
    }
    std::map<std::string, Term> merged;
    for (Term& t : terms_) {
        if (t.coeff == 0.0) continue;
        std::string k = t.key();
        auto it = merged.find(k);
        if (it == merged.end()) {
            merged.emplace(std::move(k), std::move(t));
        } else {
            it->second.coeff += t.coeff;
        }
    }
    terms_.clear();
    for (auto& [k, t] : merged) {
        if (t.coeff != 0.0) terms_.push_back(std::move(t));
    }
}

Expr Expr::operator+(const Expr& o) const {
    requireSameDim(dim_, o.dim_, "Expr::operator+");
    Expr r;
    r.dim_ = dim_;
    r.terms_ = terms_;
    r.terms_.insert(r.terms_.end(), o.terms_.begin(), o.terms_.end());
    r.normalize();
    return r;
}

Expr Expr::operator-() const {
    Expr r = *this;
    for (Term& t : r.terms_) t.coeff = -t.coeff;
    return r;
}

Expr Expr::operator-(const Expr& o) const { return *this + (-o); }

Expr Expr::scaled(double c) const {
    Expr r;
    r.dim_ = dim_;
    if (c == 0.0) return r;
    r.terms_ = terms_;
    for (Term& t : r.terms_) t.coeff *= c;
    return r;
}

namespace {

/// Merge the prim lists of a product term. Matching is by (kind, arg);
/// Flat merges additively in (m, k), the others in power.
std::vector<Prim> mergePrims(const std::vector<Prim>& a, const std::vector<Prim>& b) {
    std::vector<Prim> out = a;
    for (const Prim& p : b) {
        bool merged = false;
        for (Prim& q : out) {
            if (q.kind != p.kind) continue;
            const std::string pa = p.arg ? p.arg->str() : "";
            const std::string qa = q.arg ? q.arg->str() : "";
            if (pa != qa) continue;
            if (q.kind == PrimKind::Flat) {
                q.flatM += p.flatM;
                q.flatK += p.flatK;
            } else {
                q.power += p.power;
            }
            merged = true;
            break;
        }
        if (!merged) out.push_back(p);
    }
    return out;
}

}  // namespace

Expr Expr::operator*(const Expr& o) const {
    requireSameDim(dim_, o.dim_, "Expr::operator*");
    Expr r;
    r.dim_ = dim_;
    for (const Term& ta : terms_) {
        for (const Term& tb : o.terms_) {
            Term t;
            t.coeff = ta.coeff * tb.coeff;
            t.mono.resize(dim_);
            for (int d = 0; d < dim_; ++d) t.mono[d] = ta.mono[d] + tb.mono[d];
            t.prims = mergePrims(ta.prims, tb.prims);
            r.terms_.push_back(std::move(t));
        }
    }
    r.normalize();
    return r;
}

Expr Expr::derivative(int i) const {
    Expr result = Expr::zero(dim_);
    for (const Term& t : terms_) {
        // polynomial part
        if (t.mono[i] > 0) {
            Term dt = t;
            dt.coeff *= t.mono[i];
            dt.mono[i] -= 1;
            result = result + fromTerm(dim_, std::move(dt));
        }
        // product rule over the primitive factors
        for (size_t j = 0; j < t.prims.size(); ++j) {
            const Prim& p = t.prims[j];
            const Expr dArg = p.arg->derivative(i);
            if (dArg.isZero()) continue;

            Term base = t;
            base.prims.erase(base.prims.begin() + static_cast<long>(j));
            Expr rest = fromTerm(dim_, std::move(base));

            Expr factor = Expr::zero(dim_);
            switch (p.kind) {
                case PrimKind::Exp: {
                    Term f;
                    f.coeff = p.power;
                    f.mono.assign(dim_, 0);
                    f.prims.push_back(p);
                    factor = fromTerm(dim_, std::move(f));
                    break;
                }
                case PrimKind::Sin: {
                    Term f;
                    f.coeff = p.power;
                    f.mono.assign(dim_, 0);
                    Prim s = p;
                    s.power = p.power - 1;
                    if (s.power > 0) f.prims.push_back(s);
                    Prim c = p;
                    c.kind = PrimKind::Cos;
                    c.power = 1;
                    f.prims.push_back(c);
                    f.prims = mergePrims(f.prims, {});
                    factor = fromTerm(dim_, std::move(f));
                    break;
                }
                case PrimKind::Cos: {
                    Term f;
                    f.coeff = -static_cast<double>(p.power);
                    f.mono.assign(dim_, 0);
                    Prim c = p;
                    c.power = p.power - 1;
                    if (c.power > 0) f.prims.push_back(c);
                    Prim s = p;
                    s.kind = PrimKind::Sin;
                    s.power = 1;
                    f.prims.push_back(s);
                    f.prims = mergePrims(f.prims, {});
                    factor = fromTerm(dim_, std::move(f));
                    break;
                }
                case PrimKind::Recip: {
                    Term f;
                    f.coeff = -static_cast<double>(p.power);
                    f.mono.assign(dim_, 0);
                    Prim q = p;
                    q.power = p.power + 1;
                    f.prims.push_back(q);
                    factor = fromTerm(dim_, std::move(f));
                    break;
                }
                case PrimKind::Flat: {
                    Term f1;
                    f1.coeff = 2.0 * p.flatM;
                    f1.mono.assign(dim_, 0);
                    Prim q1 = p;
                    q1.flatK = p.flatK + 3;
                    f1.prims.push_back(q1);
                    Expr e1 = fromTerm(dim_, std::move(f1));
                    Expr e2 = Expr::zero(dim_);
                    if (p.flatK != 0) {
                        Term f2;
                        f2.coeff = -static_cast<double>(p.flatK);
                        f2.mono.assign(dim_, 0);
                        Prim q2 = p;
                        q2.flatK = p.flatK + 1;
                        f2.prims.push_back(q2);
                        e2 = fromTerm(dim_, std::move(f2));
                    }
                    factor = e1 + e2;
                    break;
                }
            }
            result = result + rest * factor * dArg;
        }
    }
    return result;
}

double Expr::eval(const Vec& x) const {
    requireSameDim(dim_, static_cast<int>(x.size()), "Expr::eval");
    double sum = 0.0;
    for (const Term& t : terms_) {
        double v = t.coeff;
        for (int d = 0; d < dim_; ++d) {
            for (int e = 0; e < t.mono[d]; ++e) v *= x[d];
        }
        for (const Prim& p : t.prims) v *= p.evalScalar(p.arg->eval(x));
        sum += v;
    }
    return sum;
}

Vec Expr::evalBatch(const Mat& pts) const {
    requireSameDim(dim_, static_cast<int>(pts.rows()), "Expr::evalBatch");
    const auto n = pts.cols();
    Vec sum = Vec::Zero(n);
    Vec v(n), argv(n);
    for (const Term& t : terms_) {
        v.setConstant(t.coeff);
        for (int d = 0; d < dim_; ++d) {
            for (int e = 0; e < t.mono[d]; ++e) v.array() *= pts.row(d).transpose().array();
        }
        for (const Prim& p : t.prims) {
            argv = p.arg->evalBatch(pts);
            switch (p.kind) {
                case PrimKind::Exp:
                    v.array() *= (argv.array() * p.power).exp();
                    break;
                case PrimKind::Sin:
                    v.array() *= argv.array().sin().pow(p.power);
                    break;
                case PrimKind::Cos:
                    v.array() *= argv.array().cos().pow(p.power);
                    break;
                case PrimKind::Recip:
                    v.array() /= argv.array().pow(p.power);
                    break;
                case PrimKind::Flat:
                    for (Eigen::Index c = 0; c < n; ++c)
                        v[c] *= flatEval(argv[c], p.flatM, p.flatK);
                    break;
            }
        }
        sum += v;
    }
    return sum;
}

std::string Expr::str() const {
    if (terms_.empty()) return "0";
    std::string s;
    for (size_t i = 0; i < terms_.size(); ++i) {
        if (i) s += " + ";
        s += formatDouble(terms_[i].coeff);
        std::string k = terms_[i].key();
        if (!k.empty()) s += " " + k;
    }
    return s;
}

}  // namespace mpradon
