#pragma once

// Exact bigraded exterior calculus on flat T*R^n with polynomial
// coefficients.
//
// A form is a sum of terms p(x, y) dx_I ^ dy_J with I, J ascending index sets,
// always written in that canonical order. A term with |I| = b, |J| = c has
// type (b, c). On the flat model the horizontal distribution is integrable,
// so d = d_+ + d_- and the (2,-1) component delta vanishes identically.

#include "defham/expr.hpp"
#include "defham/rational.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace defham::forms {

class NotPolynomial : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Exponent vector of length 2n ordered (x1..xn, y1..yn).
using Monomial = std::vector<int>;

/// Multivariate polynomial with exact rational coefficients. Zero
/// coefficients are never stored.
class Poly {
public:
    explicit Poly(int n = 1) : n_(n) {
        if (n < 1) throw std::invalid_argument("dimension must be >= 1");
    }

    static Poly constant(int n, const Rational& c) {
        Poly p(n);
        p.add_term(Monomial(2 * n, 0), c);
        return p;
    }

    /// The coordinate function at position `slot` of z = (x, y).
    static Poly coordinate(int n, int slot) {
        Poly p(n);
        Monomial m(2 * n, 0);
        m.at(slot) = 1;
        p.add_term(std::move(m), 1);
        return p;
    }
    static Poly x(int n, int i) { return coordinate(n, i - 1); }
    static Poly y(int n, int i) { return coordinate(n, n + i - 1); }

    int dimension() const { return n_; }
    const std::map<Monomial, Rational>& terms() const { return terms_; }
    bool is_zero() const { return terms_.empty(); }

    bool is_constant() const {
        return terms_.empty() || (terms_.size() == 1 && is_unit(terms_.begin()->first));
    }
    Rational constant_term() const {
        auto it = terms_.find(Monomial(2 * n_, 0));
        return it == terms_.end() ? Rational(0) : it->second;
    }

    void add_term(Monomial m, const Rational& c) {
        if (static_cast<int>(m.size()) != 2 * n_) throw std::invalid_argument("monomial length must be 2n");
        for (int e : m)
            if (e < 0) throw std::invalid_argument("negative exponent");
        if (c == 0) return;
        auto [it, inserted] = terms_.try_emplace(std::move(m), c);
        if (!inserted) {
            it->second += c;
            if (it->second == 0) terms_.erase(it);
        }
    }

    Poly& operator+=(const Poly& o) {
        check(o);
        for (const auto& [m, c] : o.terms_) add_term(m, c);
        return *this;
    }
    Poly& operator-=(const Poly& o) {
        check(o);
        for (const auto& [m, c] : o.terms_) add_term(m, -c);
        return *this;
    }
    friend Poly operator+(Poly a, const Poly& b) { return a += b; }
    friend Poly operator-(Poly a, const Poly& b) { return a -= b; }
    friend Poly operator-(const Poly& a) { return a * Rational(-1); }

    friend Poly operator*(const Poly& a, const Rational& s) {
        Poly r(a.n_);
        if (s == 0) return r;
        for (const auto& [m, c] : a.terms_) r.terms_.emplace(m, c * s);
        return r;
    }
    friend Poly operator*(const Rational& s, const Poly& a) { return a * s; }

    friend Poly operator*(const Poly& a, const Poly& b) {
        a.check(b);
        Poly r(a.n_);
        for (const auto& [ma, ca] : a.terms_)
            for (const auto& [mb, cb] : b.terms_) {
                Monomial m(ma.size());
                for (std::size_t i = 0; i < m.size(); ++i) m[i] = ma[i] + mb[i];
                r.add_term(std::move(m), ca * cb);
            }
        return r;
    }

    friend bool operator==(const Poly& a, const Poly& b) { return a.n_ == b.n_ && a.terms_ == b.terms_; }

    /// Partial derivative with respect to the coordinate at `slot`.
    Poly derivative(int slot) const {
        if (slot < 0 || slot >= 2 * n_) throw std::out_of_range("derivative slot");
        Poly r(n_);
        for (const auto& [m, c] : terms_) {
            if (m[slot] == 0) continue;
            Monomial d = m;
            --d[slot];
            r.add_term(std::move(d), c * m[slot]);
        }
        return r;
    }
    Poly dx(int i) const { return derivative(i - 1); }
    Poly dy(int i) const { return derivative(n_ + i - 1); }

    double evaluate(const Eigen::VectorXd& z) const {
        double s = 0.0;
        for (const auto& [m, c] : terms_) {
            double t = to_double(c);
            for (std::size_t i = 0; i < m.size(); ++i)
                for (int k = 0; k < m[i]; ++k) t *= z[static_cast<Eigen::Index>(i)];
            s += t;
        }
        return s;
    }

    expr::Expression to_expression() const {
        using namespace expr;
        NodePtr sum = expr::constant(0);
        for (const auto& [m, c] : terms_) {
            NodePtr t = expr::constant(c);
            for (int i = 0; i < 2 * n_; ++i)
                if (m[i] > 0) t = mul(t, pow(expr::variable(Variable::from_slot(i, n_)), m[i]));
            sum = add(sum, t);
        }
        return {n_, sum};
    }

    std::string to_string() const { return to_expression().to_string(); }

private:
    static bool is_unit(const Monomial& m) {
        for (int e : m)
            if (e != 0) return false;
        return true;
    }
    void check(const Poly& o) const {
        if (o.n_ != n_) throw std::invalid_argument("polynomial dimension mismatch");
    }

    int n_;
    std::map<Monomial, Rational> terms_;
};

/// Converts a polynomial expression; throws NotPolynomial for functions,
/// negative powers or division by a non-constant.
inline Poly to_poly(const expr::Expression& e) {
    using expr::Op;
    const int n = e.dimension();
    auto rec = [n](auto&& self, const expr::NodePtr& p) -> Poly {
        switch (p->op) {
            case Op::constant: return Poly::constant(n, p->value);
            case Op::variable: return Poly::coordinate(n, p->var.slot(n));
            case Op::add: return self(self, p->lhs) + self(self, p->rhs);
            case Op::sub: return self(self, p->lhs) - self(self, p->rhs);
            case Op::neg: return -self(self, p->lhs);
            case Op::mul: return self(self, p->lhs) * self(self, p->rhs);
            case Op::div: {
                Poly den = self(self, p->rhs);
                if (!den.is_constant() || den.is_zero())
                    throw NotPolynomial("division by non-constant '" + expr::print(p->rhs) + "'");
                return self(self, p->lhs) * Rational(1 / den.constant_term());
            }
            case Op::pow: {
                if (p->exponent < 0) throw NotPolynomial("negative power in '" + expr::print(p) + "'");
                Poly base = self(self, p->lhs);
                Poly r = Poly::constant(n, 1);
                for (int k = 0; k < p->exponent; ++k) r = r * base;
                return r;
            }
            default: throw NotPolynomial("non-polynomial function in '" + expr::print(p) + "'");
        }
    };
    return rec(rec, e.root());
}

// ---------------------------------------------------------------------------

/// Bitmask over indices 1..n (bit i-1 set means index i present).
using IndexSet = std::uint32_t;

inline int count(IndexSet s) { return std::popcount(s); }
inline int count_below(IndexSet s, int i) { return std::popcount(s & ((IndexSet{1} << (i - 1)) - 1)); }

inline std::vector<int> to_indices(IndexSet s) {
    std::vector<int> out;
    for (int i = 1; s; ++i, s >>= 1)
        if (s & 1u) out.push_back(i);
    return out;
}

/// Sign of the shuffle putting the concatenation (A, B) in ascending order.
inline int merge_sign(IndexSet a, IndexSet b) {
    int inversions = 0;
    for (int k : to_indices(b)) inversions += count(a) - count_below(a, k);
    return inversions % 2 ? -1 : 1;
}

struct Type {
    int b = 0;  // horizontal degree
    int c = 0;  // vertical degree
    friend auto operator<=>(const Type&, const Type&) = default;
};

class BigradedForm {
public:
    using Key = std::pair<IndexSet, IndexSet>;  // (dx indices, dy indices)

    explicit BigradedForm(int n = 1) : n_(n) {
        if (n < 1 || n > 16) throw std::invalid_argument("dimension must be in 1..16");
    }

    static BigradedForm function(const Poly& p) {
        BigradedForm f(p.dimension());
        f.add_term(0, 0, p);
        return f;
    }
    static BigradedForm dx(int n, int i) {
        BigradedForm f(n);
        f.add_term(bit(i), 0, Poly::constant(n, 1));
        return f;
    }
    static BigradedForm dy(int n, int i) {
        BigradedForm f(n);
        f.add_term(0, bit(i), Poly::constant(n, 1));
        return f;
    }
    /// omega = sum_i dy_i ^ dx_i = -sum_i dx_i ^ dy_i, of type (1,1).
    static BigradedForm omega(int n) {
        BigradedForm f(n);
        for (int i = 1; i <= n; ++i) f.add_term(bit(i), bit(i), Poly::constant(n, -1));
        return f;
    }

    static IndexSet bit(int i) { return IndexSet{1} << (i - 1); }

    int dimension() const { return n_; }
    const std::map<Key, Poly>& terms() const { return terms_; }
    bool is_zero() const { return terms_.empty(); }

    std::set<Type> types() const {
        std::set<Type> t;
        for (const auto& [k, p] : terms_) t.insert({count(k.first), count(k.second)});
        return t;
    }

    /// Coefficient of dx_I ^ dy_J (zero polynomial when absent).
    Poly coefficient(IndexSet dxs, IndexSet dys) const {
        auto it = terms_.find({dxs, dys});
        return it == terms_.end() ? Poly(n_) : it->second;
    }

    void add_term(IndexSet dxs, IndexSet dys, const Poly& p) {
        if (p.dimension() != n_) throw std::invalid_argument("coefficient dimension mismatch");
        const IndexSet full = (IndexSet{1} << n_) - 1;
        if ((dxs & ~full) || (dys & ~full)) throw std::invalid_argument("form index out of range");
        if (p.is_zero()) return;
        auto [it, inserted] = terms_.try_emplace({dxs, dys}, p);
        if (!inserted) {
            it->second += p;
            if (it->second.is_zero()) terms_.erase(it);
        }
    }

    BigradedForm& operator+=(const BigradedForm& o) {
        check(o);
        for (const auto& [k, p] : o.terms_) add_term(k.first, k.second, p);
        return *this;
    }
    friend BigradedForm operator+(BigradedForm a, const BigradedForm& b) { return a += b; }
    friend BigradedForm operator-(BigradedForm a, const BigradedForm& b) { return a += b * Rational(-1); }

    friend BigradedForm operator*(const BigradedForm& a, const Rational& s) {
        BigradedForm r(a.n_);
        for (const auto& [k, p] : a.terms_) r.add_term(k.first, k.second, p * s);
        return r;
    }
    friend BigradedForm operator*(const Rational& s, const BigradedForm& a) { return a * s; }
    /// Multiplication by a 0-form.
    friend BigradedForm operator*(const Poly& f, const BigradedForm& a) {
        BigradedForm r(a.n_);
        for (const auto& [k, p] : a.terms_) r.add_term(k.first, k.second, f * p);
        return r;
    }

    friend bool operator==(const BigradedForm& a, const BigradedForm& b) {
        return a.n_ == b.n_ && a.terms_ == b.terms_;
    }

    void check(const BigradedForm& o) const {
        if (o.n_ != n_) throw std::invalid_argument("form dimension mismatch");
    }

private:
    int n_;
    std::map<Key, Poly> terms_;
};

/// Exterior product with Koszul signs, normalized to dx_I ^ dy_J order.
inline BigradedForm wedge(const BigradedForm& a, const BigradedForm& b) {
    a.check(b);
    BigradedForm r(a.dimension());
    for (const auto& [ka, pa] : a.terms()) {
        for (const auto& [kb, pb] : b.terms()) {
            const auto [i, j] = ka;
            const auto [k, l] = kb;
            if ((i & k) || (j & l)) continue;
            // dx_I dy_J dx_K dy_L -> dx_I dx_K dy_J dy_L -> dx_{IK} dy_{JL}
            int sign = (count(j) * count(k)) % 2 ? -1 : 1;
            sign *= merge_sign(i, k) * merge_sign(j, l);
            r.add_term(i | k, j | l, (pa * pb) * Rational(sign));
        }
    }
    return r;
}

/// d_+ a = sum_i dx_i ^ (d a / d x_i); raises the horizontal degree by one.
inline BigradedForm partial_plus(const BigradedForm& a) {
    const int n = a.dimension();
    BigradedForm r(n);
    for (const auto& [key, p] : a.terms()) {
        const auto [dxs, dys] = key;
        for (int i = 1; i <= n; ++i) {
            if (dxs & BigradedForm::bit(i)) continue;
            Poly d = p.dx(i);
            if (d.is_zero()) continue;
            const int sign = count_below(dxs, i) % 2 ? -1 : 1;
            r.add_term(dxs | BigradedForm::bit(i), dys, d * Rational(sign));
        }
    }
    return r;
}

/// d_- a = sum_i dy_i ^ (d a / d y_i); raises the vertical degree by one.
inline BigradedForm partial_minus(const BigradedForm& a) {
    const int n = a.dimension();
    BigradedForm r(n);
    for (const auto& [key, p] : a.terms()) {
        const auto [dxs, dys] = key;
        for (int i = 1; i <= n; ++i) {
            if (dys & BigradedForm::bit(i)) continue;
            Poly d = p.dy(i);
            if (d.is_zero()) continue;
            const int sign = (count(dxs) + count_below(dys, i)) % 2 ? -1 : 1;
            r.add_term(dxs, dys | BigradedForm::bit(i), d * Rational(sign));
        }
    }
    return r;
}

/// The (2,-1) component of d. Zero on the flat model, where the horizontal
/// coordinate distribution is integrable.
inline BigradedForm partial_delta(const BigradedForm& a) { return BigradedForm(a.dimension()); }

inline BigradedForm exterior_derivative(const BigradedForm& a) {
    return partial_plus(a) + partial_minus(a) + partial_delta(a);
}

/// d_q = d_+ + q^{-1} d_- + q delta.
inline BigradedForm deformed_derivative(const BigradedForm& a, const Rational& q) {
    if (q == 0) throw std::invalid_argument("q must be nonzero");
    return partial_plus(a) + partial_minus(a) * Rational(1 / q) + partial_delta(a) * q;
}

struct Classification {
    bool simple = false;
    bool exceptionally_simple = false;
    std::optional<Rational> conformal_ratio;  // c' with omega = c' d_- d_+ H
};

inline Classification classify_hamiltonian(const Poly& h) {
    const int n = h.dimension();
    const BigradedForm dplus = partial_plus(BigradedForm::function(h));
    const BigradedForm mixed = partial_minus(dplus);
    Classification c;
    c.exceptionally_simple = dplus.is_zero();
    c.simple = mixed.is_zero();
    if (!c.simple) {
        const BigradedForm omega = BigradedForm::omega(n);
        const IndexSet e1 = BigradedForm::bit(1);
        const Poly lead = mixed.coefficient(e1, e1);
        if (lead.is_constant() && !lead.is_zero()) {
            // mixed = lambda * omega with omega's (dx1, dy1) coefficient -1
            const Rational lambda = -lead.constant_term();
            if (mixed == omega * lambda) c.conformal_ratio = Rational(1 / lambda);
        }
    }
    return c;
}

/// {H, F}_q = omega(X^q_H, X_F) = sum_i (q^{-1} H_yi F_xi - H_xi F_yi).
inline Poly symbolic_bracket(const Poly& h, const Poly& f, const Rational& q) {
    if (q == 0) throw std::invalid_argument("q must be nonzero");
    if (h.dimension() != f.dimension()) throw std::invalid_argument("polynomial dimension mismatch");
    const int n = h.dimension();
    const Rational qinv = 1 / q;
    Poly r(n);
    for (int i = 1; i <= n; ++i) {
        // X^q_H = (a, b) = (q^{-1} H_y, -H_x); X_F = (F_y, -F_x)
        const Poly a_h = h.dy(i) * qinv, b_h = -h.dx(i);
        const Poly a_f = f.dy(i), b_f = -f.dx(i);
        r += b_h * a_f - a_h * b_f;
    }
    return r;
}

// ---------------------------------------------------------------------------
// JSON: {"n": int, "terms": [{"dx": [..], "dy": [..],
//                             "poly": [{"exps": [..], "num": int, "den": int}]}]}

inline nlohmann::json to_json(const Poly& p) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [m, c] : p.terms())
        arr.push_back({{"exps", m}, {"num", to_int64(numerator(c))}, {"den", to_int64(denominator(c))}});
    return arr;
}

inline nlohmann::json to_json(const BigradedForm& f) {
    nlohmann::json terms = nlohmann::json::array();
    for (const auto& [k, p] : f.terms())
        terms.push_back({{"dx", to_indices(k.first)}, {"dy", to_indices(k.second)}, {"poly", to_json(p)}});
    return {{"n", f.dimension()}, {"terms", terms}};
}

/// Parses the JSON form document. Index lists may come in any order; the
/// permutation sign is applied when normalizing to dx_I ^ dy_J.
inline BigradedForm form_from_json(const nlohmann::json& j) {
    const int n = j.at("n").get<int>();
    BigradedForm f(n);
    for (const auto& t : j.at("terms")) {
        auto collect = [n](const nlohmann::json& list, IndexSet& set) {
            int sign = 1;
            set = 0;
            for (int i : list.get<std::vector<int>>()) {
                if (i < 1 || i > n) throw std::invalid_argument("form index out of range");
                const IndexSet b = BigradedForm::bit(i);
                if (set & b) return 0;
                // appending i after the current set: move it left past larger indices
                if ((count(set) - count_below(set, i)) % 2) sign = -sign;
                set |= b;
            }
            return sign;
        };
        IndexSet dxs = 0, dys = 0;
        const int sign = collect(t.at("dx"), dxs) * collect(t.at("dy"), dys);
        Poly p(n);
        for (const auto& m : t.at("poly")) {
            const auto den = m.at("den").get<std::int64_t>();
            if (den == 0) throw std::invalid_argument("zero denominator");
            p.add_term(m.at("exps").get<Monomial>(), Rational(m.at("num").get<std::int64_t>()) / den);
        }
        f.add_term(dxs, dys, p * Rational(sign));
    }
    return f;
}

}  // namespace defham::forms
