#pragma once

// Numeric deformed bracket {H, F}_q = omega(X^q_H, X_F) and the identities
// behind its Lie-admissibility.

#include "defham/dynamics.hpp"
#include "defham/expr.hpp"
#include "defham/phase.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace defham::bracket {

using expr::Expression;
using phase::PhasePoint;

inline double deformed_bracket(const Expression& h, const Expression& f, double q, const PhasePoint& z) {
    return phase::omega(dynamics::deformed_field(h, q, z), dynamics::deformed_field(f, 1.0, z));
}

/// Commutator of the deformed bracket, {H,F}_q - {F,H}_q.
inline double commutator(const Expression& h, const Expression& f, double q, const PhasePoint& z) {
    return deformed_bracket(h, f, q, z) - deformed_bracket(f, h, q, z);
}

/// |({H,F}_q - {F,H}_q) - (1 + q^{-1}) {H,F}_1| at z, relative to
/// max(1, |(1 + q^{-1}) {H,F}_1|).
inline double admissibility_defect(const Expression& h, const Expression& f, double q, const PhasePoint& z) {
    if (q == 0.0 || q == -1.0) throw std::invalid_argument("admissibility defect needs q outside {0, -1}");
    const double expected = (1.0 + 1.0 / q) * deformed_bracket(h, f, 1.0, z);
    return std::abs(commutator(h, f, q, z) - expected) / std::max(1.0, std::abs(expected));
}

namespace detail {

/// omega(X^q_A, X_B) as an expression: sum_i (b_A a_B - a_A b_B) with
/// X^q_A = (q^{-1} A_y, -A_x) and X_B = (B_y, -B_x).
inline expr::NodePtr bracket_expression(const Expression& a, const Expression& b, const Rational& q) {
    using namespace expr;
    const int n = a.dimension();
    NodePtr sum = constant(0);
    for (int i = 1; i <= n; ++i) {
        const Variable xi{VarKind::base, i}, yi{VarKind::fibre, i};
        const NodePtr a_a = div(derivative(a.root(), yi), constant(q));
        const NodePtr b_a = neg(derivative(a.root(), xi));
        const NodePtr a_b = derivative(b.root(), yi);
        const NodePtr b_b = neg(derivative(b.root(), xi));
        sum = add(sum, sub(mul(b_a, a_b), mul(a_a, b_b)));
    }
    return sum;
}

inline Expression commutator_expression(const Expression& a, const Expression& b, double q) {
    const Rational qr(q);
    return {a.dimension(), expr::sub(bracket_expression(a, b, qr), bracket_expression(b, a, qr))};
}

}  // namespace detail

/// Cyclic sum [[H,F],G] + [[F,G],H] + [[G,H],F] of the commutator bracket
/// [A,B] = {A,B}_q - {B,A}_q. Inner brackets are built symbolically, outer
/// ones evaluated numerically at z. Relative to max(1, sum of |terms|).
inline double jacobi_defect(const Expression& h, const Expression& f, const Expression& g, double q,
                            const PhasePoint& z) {
    if (q == 0.0 || q == -1.0) throw std::invalid_argument("jacobi defect needs q outside {0, -1}");
    const double t1 = commutator(detail::commutator_expression(h, f, q), g, q, z);
    const double t2 = commutator(detail::commutator_expression(f, g, q), h, q, z);
    const double t3 = commutator(detail::commutator_expression(g, h, q), f, q, z);
    return std::abs(t1 + t2 + t3) / std::max({1.0, std::abs(t1), std::abs(t2), std::abs(t3)});
}

struct BracketReport {
    double q = 1.0;
    int sample_count = 0;
    double max_admissibility_defect = 0.0;
    double max_jacobi_defect = 0.0;
};

inline nlohmann::json to_json(const BracketReport& r) {
    return {{"q", r.q},
            {"samples", r.sample_count},
            {"max_admissibility_defect", r.max_admissibility_defect},
            {"max_jacobi_defect", r.max_jacobi_defect}};
}

}  // namespace defham::bracket
