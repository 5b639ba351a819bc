#include "defham/expr.hpp"
#include "defham/forms.hpp"
#include "defham/random.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <vector>

using namespace defham;
using forms::BigradedForm;
using forms::Poly;

namespace {

Poly P(const char* text, int n) { return forms::to_poly(expr::parse(text, n)); }
BigradedForm fn(const char* text, int n) { return BigradedForm::function(P(text, n)); }

// Brute-force wedge: every term is expanded into a list of differential
// slots (dx_i -> i-1, dy_i -> n+i-1), the lists are concatenated and sorted
// by adjacent swaps, flipping the sign each time. Repeated slots give zero.
BigradedForm oracle_wedge(const BigradedForm& a, const BigradedForm& b) {
    const int n = a.dimension();
    auto slots = [n](forms::IndexSet dxs, forms::IndexSet dys) {
        std::vector<int> s;
        for (int i : forms::to_indices(dxs)) s.push_back(i - 1);
        for (int i : forms::to_indices(dys)) s.push_back(n + i - 1);
        return s;
    };
    BigradedForm out(n);
    for (const auto& [ka, pa] : a.terms())
        for (const auto& [kb, pb] : b.terms()) {
            std::vector<int> s = slots(ka.first, ka.second);
            const std::vector<int> t = slots(kb.first, kb.second);
            s.insert(s.end(), t.begin(), t.end());
            int sign = 1;
            for (std::size_t i = 0; i < s.size(); ++i)
                for (std::size_t j = 0; j + 1 < s.size() - i; ++j)
                    if (s[j] > s[j + 1]) {
                        std::swap(s[j], s[j + 1]);
                        sign = -sign;
                    }
            if (std::adjacent_find(s.begin(), s.end()) != s.end()) continue;
            forms::IndexSet dxs = 0, dys = 0;
            for (int v : s) (v < n ? dxs : dys) |= BigradedForm::bit(v < n ? v + 1 : v - n + 1);
            out.add_term(dxs, dys, pa * pb * Rational(sign));
        }
    return out;
}

int degree(const BigradedForm& f) {
    int d = -1;
    for (const auto& [k, p] : f.terms()) d = std::max(d, forms::count(k.first) + forms::count(k.second));
    return d;
}

}  // namespace

TEST(Poly, NoStoredZerosAndRingAxioms) {
    random::Generator rng(1);
    for (int i = 0; i < 100; ++i) {
        const Poly a = random::random_poly(rng, 2), b = random::random_poly(rng, 2), c = random::random_poly(rng, 2);
        EXPECT_EQ((a + b) * c, a * c + b * c);
        EXPECT_EQ(a * b, b * a);
        EXPECT_TRUE((a - a).is_zero());
        const Poly mixed = a * b - b * a + c;
        for (const auto& [m, coef] : mixed.terms()) EXPECT_NE(coef, 0);
    }
}

TEST(Poly, RejectsTranscendentals) {
    EXPECT_THROW(P("sin(x1)", 1), forms::NotPolynomial);
    EXPECT_THROW(P("x1/y1", 1), forms::NotPolynomial);
    EXPECT_EQ(P("(x1^2 + y1^2)/2", 1), P("x1^2/2 + y1^2/2", 1));
}

TEST(Wedge, RepeatedFactorVanishes) { EXPECT_TRUE(forms::wedge(BigradedForm::dx(1, 1), BigradedForm::dx(1, 1)).is_zero()); }

TEST(Wedge, AnticommutesToCanonicalOrder) {
    const auto yx = forms::wedge(BigradedForm::dy(1, 1), BigradedForm::dx(1, 1));
    const auto xy = forms::wedge(BigradedForm::dx(1, 1), BigradedForm::dy(1, 1));
    EXPECT_EQ(yx, xy * Rational(-1));
    EXPECT_EQ(xy.coefficient(BigradedForm::bit(1), BigradedForm::bit(1)), Poly::constant(1, 1));
}

TEST(Wedge, OmegaSquaredInTwoDimensions) {
    // (dy1^dx1 + dy2^dx2)^2 = 2 dy1^dx1^dy2^dx2; sorting (dy1,dx1,dy2,dx2)
    // into (dx1,dx2,dy1,dy2) takes three transpositions.
    const auto w2 = forms::wedge(BigradedForm::omega(2), BigradedForm::omega(2));
    const forms::IndexSet both = BigradedForm::bit(1) | BigradedForm::bit(2);
    EXPECT_EQ(w2.terms().size(), 1u);
    EXPECT_EQ(w2.coefficient(both, both), Poly::constant(2, -2));
    EXPECT_EQ(w2, oracle_wedge(BigradedForm::omega(2), BigradedForm::omega(2)));
}

TEST(Wedge, MatchesBruteForceAndIsGradedCommutative) {
    random::Generator rng(5);
    random::PolyShape small;
    small.max_degree = 2;
    small.max_terms = 2;
    for (int i = 0; i < 60; ++i) {
        const int n = static_cast<int>(rng.integer(1, 3));
        const auto a = random::random_form(rng, n, static_cast<int>(rng.integer(0, 2)), small);
        const auto b = random::random_form(rng, n, static_cast<int>(rng.integer(0, 2)), small);
        const auto ab = forms::wedge(a, b);
        EXPECT_EQ(ab, oracle_wedge(a, b));
        const int sign = (degree(a) * degree(b)) % 2 == 0 ? 1 : -1;
        EXPECT_EQ(ab, forms::wedge(b, a) * Rational(sign));
        for (const auto& t : ab.types()) EXPECT_LE(t.b + t.c, 2 * n);
    }
}

TEST(Partials, FunctionCase) {
    const auto h = fn("x1*y1", 1);
    EXPECT_EQ(forms::partial_plus(h), P("y1", 1) * BigradedForm::dx(1, 1));
    EXPECT_EQ(forms::partial_minus(h), P("x1", 1) * BigradedForm::dy(1, 1));
}

TEST(Partials, MixedDerivativeOfXYIsOmega) {
    const auto mixed = forms::partial_minus(forms::partial_plus(fn("x1*y1", 1)));
    EXPECT_EQ(mixed, forms::wedge(BigradedForm::dy(1, 1), BigradedForm::dx(1, 1)));
    EXPECT_EQ(mixed, BigradedForm::omega(1));
}

TEST(Partials, SquaresVanishAndTypesShift) {
    random::Generator rng(8);
    for (int i = 0; i < 50; ++i) {
        const int n = static_cast<int>(rng.integer(1, 3));
        const auto a = random::random_form(rng, n, static_cast<int>(rng.integer(0, 2)));
        EXPECT_TRUE(forms::partial_plus(forms::partial_plus(a)).is_zero());
        EXPECT_TRUE(forms::partial_minus(forms::partial_minus(a)).is_zero());
        EXPECT_EQ(forms::partial_plus(forms::partial_minus(a)), forms::partial_minus(forms::partial_plus(a)) * Rational(-1));
        std::set<forms::Type> shifted;
        for (auto t : a.types()) shifted.insert({t.b + 1, t.c});
        for (const auto& t : forms::partial_plus(a).types()) EXPECT_TRUE(shifted.count(t));
        EXPECT_TRUE(forms::partial_delta(a).is_zero());
    }
}

TEST(DeformedDerivative, HandExample) {
    const Rational q(2, 3);
    const auto d = forms::deformed_derivative(fn("x1*y1", 1), q);
    EXPECT_EQ(d, P("y1", 1) * BigradedForm::dx(1, 1) + (P("x1", 1) * Rational(3, 2)) * BigradedForm::dy(1, 1));
}

TEST(DeformedDerivative, QOneIsExteriorDerivative) {
    random::Generator rng(3);
    for (int i = 0; i < 30; ++i) {
        const auto a = random::random_form(rng, 2, static_cast<int>(rng.integer(0, 2)));
        EXPECT_EQ(forms::deformed_derivative(a, 1), forms::partial_plus(a) + forms::partial_minus(a));
    }
}

TEST(DeformedDerivative, SquaresToZeroExactly) {
    random::Generator rng(42);
    for (const Rational& q : {Rational(-1), Rational(1, 2), Rational(1), Rational(2), Rational(-7, 3)})
        for (int degree : {0, 1, 2})
            for (int i = 0; i < 50; ++i) {
                const auto a = random::random_form(rng, 2, degree);
                EXPECT_TRUE(forms::deformed_derivative(forms::deformed_derivative(a, q), q).is_zero());
            }
}

TEST(DeformedDerivative, OmegaIsClosedAndOfType11) {
    for (int n = 1; n <= 3; ++n) {
        const auto w = BigradedForm::omega(n);
        EXPECT_EQ(w.types(), (std::set<forms::Type>{{1, 1}}));
        EXPECT_TRUE(forms::deformed_derivative(w, Rational(1, 3)).is_zero());
    }
}

TEST(DeformedDerivative, RejectsZeroQ) { EXPECT_THROW(forms::deformed_derivative(fn("x1", 1), 0), std::invalid_argument); }

TEST(Classification, Examples) {
    const auto a = forms::classify_hamiltonian(P("x1^2 + y1^3", 1));
    EXPECT_TRUE(a.simple);
    EXPECT_FALSE(a.exceptionally_simple);
    EXPECT_FALSE(a.conformal_ratio);

    EXPECT_TRUE(forms::classify_hamiltonian(P("y1^2", 1)).exceptionally_simple);

    for (int n = 1; n <= 3; ++n) {
        Poly h(n);
        for (int i = 1; i <= n; ++i) h += Poly::x(n, i) * Poly::y(n, i);
        const auto c = forms::classify_hamiltonian(h);
        ASSERT_TRUE(c.conformal_ratio) << "n=" << n;
        EXPECT_EQ(*c.conformal_ratio, 1);
        EXPECT_FALSE(c.simple);
    }
    EXPECT_EQ(*forms::classify_hamiltonian(P("-2*x1*y1", 1)).conformal_ratio, Rational(-1, 2));
    EXPECT_FALSE(forms::classify_hamiltonian(P("x1*y1", 2)).conformal_ratio);  // only one of the two planes
    EXPECT_FALSE(forms::classify_hamiltonian(P("x1^2*y1^2", 1)).conformal_ratio);
}

TEST(Classification, SplitHamiltoniansAreSimple) {
    random::Generator rng(17);
    for (int i = 0; i < 50; ++i) {
        // H+ in x only, H- in y only: build from random polys by zeroing exponents.
        Poly hp(2), hm(2);
        const Poly source = random::random_poly(rng, 2);
        for (const auto& [m, c] : source.terms()) {
            forms::Monomial mx = m, my = m;
            mx[2] = mx[3] = 0;
            my[0] = my[1] = 0;
            hp.add_term(mx, c);
            hm.add_term(my, c);
        }
        const auto c = forms::classify_hamiltonian(hp + hm);
        EXPECT_TRUE(c.simple);
        if (c.exceptionally_simple) {
            EXPECT_TRUE(c.simple);
        }
        EXPECT_FALSE(c.conformal_ratio);
    }
}

TEST(Classification, FlagInvariantsOnRandomPolys) {
    random::Generator rng(23);
    for (int i = 0; i < 200; ++i) {
        const auto c = forms::classify_hamiltonian(random::random_poly(rng, 2));
        if (c.exceptionally_simple) {
            EXPECT_TRUE(c.simple);
        }
        if (c.conformal_ratio) {
            EXPECT_FALSE(c.simple);
        }
    }
}

TEST(SymbolicBracket, SelfBracketVanishesAtQOne) {
    random::Generator rng(31);
    for (int i = 0; i < 20; ++i) {
        const Poly h = random::random_poly(rng, 2);
        EXPECT_TRUE(forms::symbolic_bracket(h, h, 1).is_zero());
    }
    EXPECT_THROW(forms::symbolic_bracket(P("x1", 1), P("y1", 1), 0), std::invalid_argument);
}

TEST(SymbolicBracket, AntisymmetrizationIsScaledPoisson) {
    random::Generator rng(37);
    for (const Rational& q : {Rational(-2), Rational(-1), Rational(1, 2), Rational(1), Rational(3)})
        for (int i = 0; i < 50; ++i) {
            const Poly h = random::random_poly(rng, 2), f = random::random_poly(rng, 2);
            EXPECT_EQ(forms::symbolic_bracket(h, f, q) - forms::symbolic_bracket(f, h, q),
                      forms::symbolic_bracket(h, f, 1) * (1 + 1 / q));
        }
}

// Independent oracle: the canonical bracket as a sum of 2x2 determinants
// det [[H_yi, H_xi], [F_yi, F_xi]], with the partials taken from the
// floating-point jet engine rather than from Poly.
TEST(SymbolicBracket, QOneMatchesDeterminantOracle) {
    random::Generator rng(41);
    for (int i = 0; i < 100; ++i) {
        const int n = static_cast<int>(rng.integer(1, 3));
        const Poly h = random::random_poly(rng, n), f = random::random_poly(rng, n);
        const Eigen::VectorXd z = rng.vector(2 * n, -1.5, 1.5);
        const Eigen::VectorXd gh = expr::evaluate_jet(h.to_expression(), z).gradient;
        const Eigen::VectorXd gf = expr::evaluate_jet(f.to_expression(), z).gradient;
        double oracle = 0.0;
        for (int k = 0; k < n; ++k) {
            Eigen::Matrix2d m;
            m << gh[n + k], gh[k], gf[n + k], gf[k];
            oracle += m.determinant();
        }
        const double got = forms::symbolic_bracket(h, f, 1).evaluate(z);
        EXPECT_NEAR(got, oracle, 1e-10 * std::max(1.0, std::abs(oracle)));
    }
}

TEST(SymbolicBracket, JacobiOfCommutatorIsExactlyZero) {
    auto comm = [](const Poly& a, const Poly& b, const Rational& q) {
        return forms::symbolic_bracket(a, b, q) - forms::symbolic_bracket(b, a, q);
    };
    auto cyclic = [&](const Poly& a, const Poly& b, const Poly& c, const Rational& q) {
        return comm(comm(a, b, q), c, q) + comm(comm(b, c, q), a, q) + comm(comm(c, a, q), b, q);
    };
    EXPECT_TRUE(cyclic(P("x1^2", 1), P("y1^2", 1), P("x1*y1", 1), Rational(1, 2)).is_zero());
    random::Generator rng(43);
    for (int i = 0; i < 20; ++i) {
        const Poly a = random::random_poly(rng, 2), b = random::random_poly(rng, 2), c = random::random_poly(rng, 2);
        EXPECT_TRUE(cyclic(a, b, c, Rational(2, 5)).is_zero());
    }
}

TEST(Json, FormRoundTrip) {
    random::Generator rng(47);
    for (int i = 0; i < 30; ++i) {
        const auto a = random::random_form(rng, 3, static_cast<int>(rng.integer(0, 3)));
        const auto j = forms::to_json(a);
        EXPECT_EQ(j["n"], 3);
        EXPECT_EQ(forms::form_from_json(j), a);
    }
    const auto w = forms::to_json(BigradedForm::omega(1));
    EXPECT_EQ(w["terms"][0]["dx"], nlohmann::json::array({1}));
    EXPECT_EQ(w["terms"][0]["poly"][0]["num"], -1);
}
