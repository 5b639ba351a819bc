#include "defham/expr.hpp"
#include "defham/random.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace defham;
using expr::Expression;
using expr::VarKind;
using expr::Variable;

namespace {

Eigen::VectorXd point(std::initializer_list<double> v) {
    Eigen::VectorXd z(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double d : v) z[i++] = d;
    return z;
}

// Central differences, used as an oracle independent of the symbolic path.
Eigen::VectorXd fd_gradient(const Expression& e, const Eigen::VectorXd& z, double h) {
    Eigen::VectorXd g(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        Eigen::VectorXd a = z, b = z;
        a[i] += h;
        b[i] -= h;
        g[i] = (expr::evaluate(e, a) - expr::evaluate(e, b)) / (2 * h);
    }
    return g;
}

}  // namespace

TEST(Parse, OscillatorHasQuotientOfSum) {
    const auto e = expr::parse("(x1^2 + y1^2)/2", 1);
    ASSERT_EQ(e.root()->op, expr::Op::div);
    EXPECT_EQ(e.root()->lhs->op, expr::Op::add);
    EXPECT_TRUE(e.depends_on(VarKind::base));
    EXPECT_TRUE(e.depends_on(VarKind::fibre));
    EXPECT_DOUBLE_EQ(expr::evaluate(e, point({1, 2})), 2.5);
}

TEST(Parse, MultiplierTermInTwoDimensions) {
    const auto e = expr::parse("y1*(x1^2 + x2^2 - 1)", 2);
    EXPECT_EQ(e.root()->op, expr::Op::mul);
    // y1 * (x1^2 + x2^2 - 1) at x = (1, 2), y = (3, 0)
    EXPECT_DOUBLE_EQ(expr::evaluate(e, point({1, 2, 3, 0})), 12.0);
}

TEST(Parse, TrailingOperatorReportsOffset) {
    try {
        expr::parse("x1 +", 1);
        FAIL() << "expected a parse error";
    } catch (const expr::ParseError& e) {
        EXPECT_EQ(e.offset(), 4u);
    }
}

TEST(Parse, VariableOutOfRange) {
    EXPECT_THROW(expr::parse("x2", 1), expr::ParseError);
    EXPECT_THROW(expr::parse("y0", 1), expr::ParseError);
    EXPECT_NO_THROW(expr::parse("x2 + y2", 2));
}

TEST(Parse, Precedence) {
    // ^ binds tighter than unary minus, which binds tighter than * and /.
    EXPECT_DOUBLE_EQ(expr::evaluate(expr::parse("-x1^2", 1), point({3, 0})), -9.0);
    EXPECT_DOUBLE_EQ(expr::evaluate(expr::parse("2*x1 - y1/4*2", 1), point({1, 2})), 1.0);
    EXPECT_DOUBLE_EQ(expr::evaluate(expr::parse("x1 - y1 - 1", 1), point({5, 2})), 2.0);  // left-assoc
    EXPECT_DOUBLE_EQ(expr::evaluate(expr::parse("x1/y1/2", 1), point({8, 2})), 2.0);
    EXPECT_DOUBLE_EQ(expr::evaluate(expr::parse("x1^-2", 1), point({2, 0})), 0.25);
}

TEST(Parse, ExactDecimalConstants) {
    const auto e = expr::parse("0.1", 1);
    ASSERT_TRUE(e.is_constant());
    EXPECT_EQ(e.root()->value, Rational(1, 10));
}

TEST(Parse, FunctionsAndRejections) {
    EXPECT_NEAR(expr::evaluate(expr::parse("sin(x1) + cos(y1) + exp(0)", 1), point({0.5, 0.25})),
                std::sin(0.5) + std::cos(0.25) + 1.0, 1e-15);
    EXPECT_THROW(expr::parse("tan(x1)", 1), expr::ParseError);
    EXPECT_THROW(expr::parse("x1^1.5", 1), expr::ParseError);
    EXPECT_THROW(expr::parse("(x1", 1), expr::ParseError);
    EXPECT_THROW(expr::parse("", 1), expr::ParseError);
}

// Derivatives are compared by evaluation: only constant folding and 0/1
// identities are applied, so the printed form is not canonical.
void expect_same_function(const Expression& a, const Expression& b) {
    random::Generator rng(5);
    for (int i = 0; i < 20; ++i) {
        const Eigen::VectorXd z = rng.vector(2 * a.dimension(), -2, 2);
        EXPECT_NEAR(expr::evaluate(a, z), expr::evaluate(b, z), 1e-14) << a.to_string() << " vs " << b.to_string();
    }
}

TEST(Differentiate, PolynomialRule) {
    const auto e = expr::parse("(x1^2+y1^2)/2", 1);
    expect_same_function(expr::differentiate(e, Variable{VarKind::fibre, 1}), expr::parse("y1", 1));
    expect_same_function(expr::differentiate(e, Variable{VarKind::base, 1}), expr::parse("x1", 1));
}

TEST(Differentiate, ProductRule) {
    const auto d = expr::differentiate(expr::parse("sin(x1)*y1", 1), Variable{VarKind::base, 1});
    expect_same_function(d, expr::parse("cos(x1)*y1", 1));
}

TEST(Differentiate, ZeroIdentities) {
    // d/dy1 of a base-only expression folds to the constant 0.
    const auto d = expr::differentiate(expr::parse("sin(x1)*x1^3", 1), Variable{VarKind::fibre, 1});
    ASSERT_TRUE(d.is_constant());
    EXPECT_EQ(d.root()->value, 0);
}

TEST(Differentiate, MixedSecondDerivativeOfXY) {
    const auto e = expr::parse("x1*y1", 1);
    const auto d = expr::differentiate(expr::differentiate(e, Variable{VarKind::base, 1}), Variable{VarKind::fibre, 1});
    ASSERT_TRUE(d.is_constant());
    EXPECT_EQ(d.root()->value, 1);
}

TEST(Differentiate, QuotientAndChainRules) {
    const auto e = expr::parse("exp(x1*y1)/(1 + x1^2)", 1);
    const Eigen::VectorXd z = point({0.3, -0.7});
    const auto g = expr::evaluate_jet(e, z).gradient;
    const Eigen::VectorXd fd = fd_gradient(e, z, 1e-6);
    EXPECT_NEAR(g[0], fd[0], 1e-8);
    EXPECT_NEAR(g[1], fd[1], 1e-8);
}

TEST(Jet, OscillatorValueAndGradient) {
    const auto jet = expr::evaluate_jet(expr::parse("(x1^2+y1^2)/2", 1), point({1, 2}));
    EXPECT_DOUBLE_EQ(jet.value, 2.5);
    EXPECT_DOUBLE_EQ(jet.gradient[0], 1.0);
    EXPECT_DOUBLE_EQ(jet.gradient[1], 2.0);
    EXPECT_DOUBLE_EQ(jet.hessian(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(jet.hessian(0, 1), 0.0);
}

TEST(Jet, DivisionByZeroNamesSubexpression) {
    try {
        expr::evaluate_jet(expr::parse("x1/y1", 1), point({1, 0}));
        FAIL() << "expected an evaluation error";
    } catch (const expr::EvalError& e) {
        EXPECT_NE(std::string(e.what()).find("y1"), std::string::npos) << e.what();
    }
}

TEST(Jet, DimensionMismatch) {
    EXPECT_THROW(expr::evaluate_jet(expr::parse("x1", 1), point({1, 2, 3, 4})), std::invalid_argument);
}

// Property: symbolic gradients agree with central differences on random
// polynomials (relative error <= 1e-6), and the Hessian is exactly symmetric.
TEST(Property, GradientMatchesFiniteDifferences) {
    random::Generator rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = static_cast<int>(rng.integer(1, 3));
        const auto e = random::random_polynomial_expression(rng, n);
        const Eigen::VectorXd z = rng.vector(2 * n, -1.5, 1.5);
        const auto jet = expr::evaluate_jet(e, z);
        const Eigen::VectorXd fd = fd_gradient(e, z, 1e-5);
        const double scale = std::max(1.0, jet.gradient.cwiseAbs().maxCoeff());
        EXPECT_LE((jet.gradient - fd).cwiseAbs().maxCoeff() / scale, 1e-6) << e.to_string();
        EXPECT_EQ(jet.hessian, jet.hessian.transpose()) << e.to_string();
    }
}

TEST(Property, HessianSymmetricWithTranscendentals) {
    random::Generator rng(7);
    const auto e = expr::parse("sin(x1*y2) + exp(x2)*cos(y1) + x1^3*y1/(2 + x2^2)", 2);
    for (int i = 0; i < 20; ++i) {
        const auto jet = expr::evaluate_jet(e, rng.vector(4, -2, 2));
        EXPECT_EQ(jet.hessian, jet.hessian.transpose());
    }
}

// Property: parse(print(parse(s))) reproduces the same tree.
TEST(Property, PrintParseRoundTrip) {
    const char* fixed[] = {"(x1^2 + y1^2)/2", "y1*(x1^2 + x2^2 - 1)", "-x1^2", "sin(x1)*y1 - -y2",
                           "x1^-3 + 0.25*y1", "exp(cos(sin(x2)))/(1 - y1)", "2/3*x1 - 5/7"};
    for (const char* s : fixed) {
        const auto a = expr::parse(s, 2);
        const auto b = expr::parse(a.to_string(), 2);
        EXPECT_EQ(a, b) << s << " printed as " << a.to_string();
    }
    random::Generator rng(99);
    for (int i = 0; i < 100; ++i) {
        const auto a = random::random_polynomial_expression(rng, 2);
        EXPECT_EQ(a, expr::parse(a.to_string(), 2)) << a.to_string();
    }
}
