#pragma once

// Seeded generators for property sweeps. Everything is built on
// std::mt19937_64, whose output sequence is fixed by the standard; the
// mapping to doubles and ranges is done here rather than through the
// <random> distributions, whose algorithms are implementation-defined.

#include "defham/expr.hpp"
#include "defham/forms.hpp"
#include "defham/rational.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <vector>

namespace defham::random {

class Generator {
public:
    explicit Generator(std::uint64_t seed) : engine_(seed) {}

    /// Uniform in [0, 1) with 53 random bits.
    double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

    /// Uniform integer in [lo, hi] (rejection sampling, no modulo bias).
    std::int64_t integer(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<std::int64_t>(engine_());
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t r;
        do r = engine_();
        while (r >= limit);
        return lo + static_cast<std::int64_t>(r % span);
    }

    Eigen::VectorXd vector(int size, double lo, double hi) {
        Eigen::VectorXd v(size);
        for (int i = 0; i < size; ++i) v[i] = uniform(lo, hi);
        return v;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

struct PolyShape {
    int max_degree = 3;
    int max_terms = 4;
    int max_numerator = 5;
    int max_denominator = 3;
};

/// Random rational between -num/1 and num/1 with denominator in 1..den, nonzero.
inline Rational random_coefficient(Generator& rng, const PolyShape& s) {
    std::int64_t p = 0;
    while (p == 0) p = rng.integer(-s.max_numerator, s.max_numerator);
    return Rational(p, rng.integer(1, s.max_denominator));
}

/// Random polynomial in 2n variables with total degree <= max_degree.
inline forms::Poly random_poly(Generator& rng, int n, const PolyShape& s = {}) {
    forms::Poly p(n);
    const int terms = static_cast<int>(rng.integer(1, s.max_terms));
    for (int t = 0; t < terms; ++t) {
        forms::Monomial m(2 * n, 0);
        const int degree = static_cast<int>(rng.integer(0, s.max_degree));
        for (int d = 0; d < degree; ++d) ++m[rng.integer(0, 2 * n - 1)];
        p.add_term(std::move(m), random_coefficient(rng, s));
    }
    return p;
}

inline expr::Expression random_polynomial_expression(Generator& rng, int n, const PolyShape& s = {}) {
    return random_poly(rng, n, s).to_expression();
}

/// Random form of the given total degree (0 or higher) with polynomial coefficients.
inline forms::BigradedForm random_form(Generator& rng, int n, int degree, const PolyShape& s = {}) {
    forms::BigradedForm f(n);
    const int terms = static_cast<int>(rng.integer(1, 3));
    for (int t = 0; t < terms; ++t) {
        forms::IndexSet dxs = 0, dys = 0;
        // choose `degree` distinct slots among the 2n differentials
        std::vector<int> slots(2 * n);
        for (int i = 0; i < 2 * n; ++i) slots[i] = i;
        for (int k = 0; k < degree && k < 2 * n; ++k) {
            const auto j = static_cast<std::size_t>(rng.integer(k, 2 * n - 1));
            std::swap(slots[k], slots[j]);
            const int slot = slots[k];
            if (slot < n)
                dxs |= forms::BigradedForm::bit(slot + 1);
            else
                dys |= forms::BigradedForm::bit(slot - n + 1);
        }
        f.add_term(dxs, dys, random_poly(rng, n, s));
    }
    return f;
}

}  // namespace defham::random
