#include "defham/dynamics.hpp"
#include "defham/random.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace defham;
using dynamics::FlowSpec;
using phase::PhasePoint;

namespace {

const auto oscillator = expr::parse("(x1^2 + y1^2)/2", 1);
const auto pendulum = expr::parse("y1^2/2 + (1 - cos(x1))", 1);

PhasePoint pt(double x, double y) { return PhasePoint::from_coords(Eigen::Vector2d(x, y)); }

FlowSpec flow(const expr::Expression& h, double q, double t_final, double step = 1e-3, int stride = 1) {
    return {h, q, phase::Space::plane, ode::Rk4{step}, t_final, stride};
}

}  // namespace

TEST(DeformedField, HandValues) {
    const auto v = dynamics::deformed_field(oscillator, 0.5, pt(1, 2));
    EXPECT_EQ(v.a[0], 4.0);
    EXPECT_EQ(v.b[0], -1.0);
    const auto c = dynamics::deformed_field(oscillator, 1.0, pt(1, 2));  // canonical field (y, -x)
    EXPECT_EQ(c.a[0], 2.0);
    EXPECT_EQ(c.b[0], -1.0);
}

TEST(DeformedField, VanishesAtCriticalPoints) {
    for (double q : {0.1, 0.5, 1.0, 2.0, -3.0}) {
        EXPECT_TRUE(dynamics::deformed_field(oscillator, q, pt(0, 0)).coords().isZero(0));
        EXPECT_TRUE(dynamics::deformed_field(pendulum, q, pt(phase::two_pi / 2, 0)).coords().isZero(1e-15));
    }
    EXPECT_THROW(dynamics::deformed_field(oscillator, 0.0, pt(1, 2)), std::invalid_argument);
}

TEST(DeformedField, JacobianMatchesFiniteDifferences) {
    const auto h = expr::parse("x1^2*y2 + sin(x2)*y1^2 + exp(y2)/3", 2);
    const dynamics::DeformedField field(h, 0.4);
    const Eigen::Vector4d z(0.3, -0.2, 0.8, 0.1);
    const Eigen::MatrixXd j = field.jacobian(z);
    for (int c = 0; c < 4; ++c) {
        Eigen::Vector4d a = z, b = z;
        a[c] += 1e-6;
        b[c] -= 1e-6;
        const Eigen::VectorXd col = (field(a) - field(b)) / 2e-6;
        EXPECT_LE((j.col(c) - col).cwiseAbs().maxCoeff(), 1e-7);
    }
}

TEST(EnergyIdentity, HandExamples) {
    const dynamics::DeformedField f(oscillator, 0.5);
    EXPECT_DOUBLE_EQ(dynamics::energy_rate(f, Eigen::Vector2d(1, 2)), 2.0);
    EXPECT_LE(dynamics::energy_derivative_defect(oscillator, 0.5, pt(1, 2)), 1e-12);
    EXPECT_EQ(dynamics::energy_rate(dynamics::DeformedField(oscillator, 1.0), Eigen::Vector2d(1, 2)), 0.0);
    const auto fibre_only = expr::parse("y1^2", 1);
    for (double q : {0.1, 0.5, 2.0, -1.0})
        EXPECT_EQ(dynamics::energy_rate(dynamics::DeformedField(fibre_only, q), Eigen::Vector2d(0.3, 1.7)), 0.0);
}

TEST(EnergyIdentity, RandomSamples) {
    random::Generator rng(2);
    const double qs[] = {-2, -1, 0.5, 2.0 / 3.0, 1, 1.5, 2};
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const int n = static_cast<int>(rng.integer(1, 3));
        const auto h = random::random_polynomial_expression(rng, n);
        const double q = qs[rng.integer(0, 6)];
        worst = std::max(worst, dynamics::energy_derivative_defect(h, q, PhasePoint::from_coords(rng.vector(2 * n, -2, 2))));
    }
    EXPECT_LE(worst, 1e-12);
}

TEST(Integrate, TrajectoryShape) {
    const auto traj = dynamics::integrate(flow(oscillator, 1.0, 1.0, 1e-2, 7), pt(1, 2));
    EXPECT_EQ(traj.samples.front().t, 0.0);
    EXPECT_EQ(traj.samples.front().z.coords(), Eigen::Vector2d(1, 2));
    EXPECT_EQ(traj.samples.back().t, 1.0);
    for (std::size_t i = 1; i < traj.samples.size(); ++i) EXPECT_GT(traj.samples[i].t, traj.samples[i - 1].t);
    EXPECT_EQ(traj.samples.size(), 16u);  // steps 0, 7, ..., 98 and the final step 100
}

TEST(Integrate, OscillatorStaysOnCircle) {
    const auto traj = dynamics::integrate(flow(oscillator, 1.0, 10.0), pt(1, 2));
    EXPECT_LE(std::abs(traj.samples.back().z.coords().squaredNorm() - 5.0), 1e-8);
}

// Closed-form oracle for q = 1: rotation by angle t.
TEST(Integrate, Rk4IsFourthOrder) {
    auto error = [](double h) {
        const auto traj = dynamics::integrate(flow(oscillator, 1.0, 2.0, h), pt(1, 2));
        const Eigen::Vector2d exact(std::cos(2.0) + 2 * std::sin(2.0), -std::sin(2.0) + 2 * std::cos(2.0));
        return (traj.samples.back().z.coords() - exact).norm();
    };
    const double factor = error(0.1) / error(0.05);
    EXPECT_GE(factor, 12.0);
    EXPECT_LE(factor, 20.0);
}

TEST(Integrate, RegimesOfTheOscillator) {
    // From (1, 2) the product x*y stays positive for a while; along that
    // stretch H must fall for q > 1 and rise for q < 1.
    for (double q : {2.0, 0.5}) {
        const auto traj = dynamics::integrate(flow(oscillator, q, 0.4, 1e-3, 10), pt(1, 2));
        for (std::size_t i = 1; i < traj.samples.size(); ++i) {
            const auto& z = traj.samples[i].z;
            ASSERT_GT(z.x()[0] * z.y()[0], 0.0);
            const double dh = traj.samples[i].h_value - traj.samples[i - 1].h_value;
            EXPECT_EQ(dh > 0 ? 1 : -1, q > 1 ? -1 : 1) << "q=" << q << " t=" << traj.samples[i].t;
        }
    }
}

TEST(Integrate, AdaptiveStepperAgreesWithRk4) {
    FlowSpec spec = flow(pendulum, 0.5, 3.0);
    const auto fixed = dynamics::integrate(spec, pt(1, 0.5)).samples.back().z.coords();
    spec.integrator = ode::Rkf45{1e-11, 1e-13, 1e-3, 0.05};
    const auto adaptive = dynamics::integrate(spec, pt(1, 0.5)).samples.back().z.coords();
    EXPECT_LE((fixed - adaptive).norm(), 1e-9);
}

TEST(Integrate, TorusSamplesAreWrapped) {
    FlowSpec spec = flow(pendulum, 1.0, 10.0, 1e-3, 50);
    spec.space = phase::Space::torus;
    const auto traj = dynamics::integrate(spec, PhasePoint(Eigen::VectorXd::Constant(1, 0.0), Eigen::VectorXd::Constant(1, 3.0)));
    bool wrapped = false;
    for (const auto& s : traj.samples) {
        EXPECT_GE(s.z.x()[0], 0.0);
        EXPECT_LT(s.z.x()[0], phase::two_pi);
        wrapped = wrapped || s.z.x()[0] < 1.0;
    }
    EXPECT_TRUE(wrapped);  // the rotating orbit passes x = 0 mod 2 pi again
    // energy is conserved at q = 1 even though samples are reduced
    EXPECT_NEAR(traj.samples.back().h_value, traj.samples.front().h_value, 1e-9);
}

TEST(Integrate, Validation) {
    EXPECT_THROW(dynamics::integrate(flow(oscillator, 0.0, 1.0), pt(1, 2)), std::invalid_argument);
    EXPECT_THROW(dynamics::integrate(flow(oscillator, -0.5, 1.0), pt(1, 2)), std::invalid_argument);
    EXPECT_THROW(dynamics::integrate(flow(oscillator, 1.0, 0.0), pt(1, 2)), std::invalid_argument);
    EXPECT_THROW(dynamics::integrate(flow(oscillator, 1.0, 1.0, -1e-3), pt(1, 2)), std::invalid_argument);
    EXPECT_THROW(dynamics::integrate(flow(oscillator, 1.0, 1.0),
                                     PhasePoint::from_coords(Eigen::Vector4d::Zero())),
                 std::invalid_argument);
}

// x*y obeys p' = 2 p^2 for H = x^2 y^2 at q = 1/2, so from (1, 1) it blows
// up at t = 1/2.
TEST(Integrate, BlowUpIsReportedWithItsTime) {
    try {
        dynamics::integrate(flow(expr::parse("x1^2*y1^2", 1), 0.5, 1.0), pt(1, 1));
        FAIL() << "expected blow-up";
    } catch (const ode::FlowError& e) {
        EXPECT_NEAR(e.time(), 0.5, 0.01);
    }
}

TEST(Variational, StartsAtIdentityWithPositiveDeterminant) {
    const auto vf = dynamics::integrate_variational(flow(pendulum, 0.7, 2.0, 1e-3, 100), pt(1, 0.5));
    ASSERT_EQ(vf.jacobians.size(), vf.trajectory.samples.size());
    EXPECT_EQ(vf.jacobians.front(), Eigen::Matrix2d::Identity());
    for (const auto& d : vf.jacobians) EXPECT_GT(d.determinant(), 0.0);
}

TEST(Variational, LinearFixtureClosedForm) {
    const double q = 0.5;
    const auto vf = dynamics::integrate_variational(flow(expr::parse("x1*y1", 1), q, 1.0, 1e-3, 10), pt(0.3, -0.2));
    for (std::size_t i = 0; i < vf.jacobians.size(); ++i) {
        const double t = vf.trajectory.samples[i].t;
        Eigen::Matrix2d expected = Eigen::Matrix2d::Zero();
        expected(0, 0) = std::exp(t / q);
        expected(1, 1) = std::exp(-t);
        EXPECT_LE((vf.jacobians[i] - expected).cwiseAbs().maxCoeff(), 1e-6) << "t=" << t;
    }
}

TEST(Variational, LiouvilleAtQOne) {
    for (const char* h : {"(x1^2 + y1^2)/2 + x1^3/3", "y1^2/2 + (1 - cos(x1)) + x1*y1", "x1*y2 - x2*y1 + y1^2*x2^2/4"}) {
        const auto e = expr::parse(h, 2);
        const auto vf = dynamics::integrate_variational(flow(e, 1.0, 1.0, 1e-3, 50),
                                                        PhasePoint::from_coords(Eigen::Vector4d(0.2, -0.1, 0.3, 0.25)));
        EXPECT_LE(dynamics::max_defect(dynamics::pullback_defect(vf, dynamics::Symplectic{})), 1e-6) << h;
    }
}

TEST(Pullback, SimplePendulumIsSymplectic) {
    const auto vf = dynamics::integrate_variational(flow(pendulum, 1.0 / 3.0, 10.0, 1e-3, 100), pt(1, 0.5));
    EXPECT_LE(dynamics::max_defect(dynamics::pullback_defect(vf, dynamics::Symplectic{})), 1e-6);
}

TEST(Pullback, SimpleDefectShrinksWithStep) {
    auto defect = [](double h) {
        const auto vf = dynamics::integrate_variational(flow(pendulum, 1.0 / 3.0, 5.0, h, 1000000), pt(1, 0.5));
        return dynamics::pullback_defect(vf, dynamics::Symplectic{}).back().defect;
    };
    EXPECT_LT(defect(0.025), defect(0.05) / 8);
}

TEST(Pullback, ConformalFixture) {
    const double q = 0.5;
    const auto vf = dynamics::integrate_variational(flow(expr::parse("x1*y1 + x2*y2", 2), q, 1.0, 1e-3, 10),
                                                    PhasePoint::from_coords(Eigen::Vector4d(1, -0.5, 0.25, 2)));
    const double c = dynamics::conformal_rate(q, 1.0);
    EXPECT_EQ(c, 1.0);
    EXPECT_LE(dynamics::max_defect(dynamics::pullback_defect(vf, dynamics::Conformal{c})), 1e-6);
    EXPECT_GT(dynamics::max_defect(dynamics::pullback_defect(vf, dynamics::Symplectic{})), 1.0);
}

// For n = 1, D^T Omega D = det(D) Omega. With H = x^2 y^2, q = 1/2 and
// z0 = (1, -1) one finds det D(t) = (1 + 2t)^-2, so the defect at t = 1 is 8/9.
TEST(Pullback, NonSimpleDefectConvergesToNonZeroLimit) {
    const auto h = expr::parse("x1^2*y1^2", 1);
    double prev = 0.0;
    for (double step : {0.01, 0.005, 0.0025}) {
        const auto vf = dynamics::integrate_variational(flow(h, 0.5, 1.0, step, 1000000), pt(1, -1));
        const double d = dynamics::pullback_defect(vf, dynamics::Symplectic{}).back().defect;
        EXPECT_NEAR(d, 8.0 / 9.0, 1e-7);
        if (prev > 0) {
            EXPECT_NEAR(d, prev, 1e-7);
        }
        prev = d;
    }
    EXPECT_GT(prev, 1e-2);
}

TEST(Csv, HeaderAndRoundTrip) {
    const auto traj = dynamics::integrate(flow(expr::parse("x1*y2 + y1^2", 2), 0.3, 0.01, 1e-3, 5),
                                          PhasePoint::from_coords(Eigen::Vector4d(0.1, 0.2, 0.3, 0.4)));
    const std::string csv = dynamics::to_csv(traj);
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "t,x1,x2,y1,y2,H");
    std::size_t row = 0;
    while (std::getline(in, line)) {
        std::istringstream cells(line);
        std::string cell;
        std::vector<double> v;
        while (std::getline(cells, cell, ',')) v.push_back(std::stod(cell));
        ASSERT_EQ(v.size(), 6u);
        const auto& s = traj.samples[row++];
        EXPECT_EQ(v[0], s.t);
        EXPECT_EQ(v[1], s.z.x()[0]);
        EXPECT_EQ(v[4], s.z.y()[1]);
        EXPECT_EQ(v[5], s.h_value);
    }
    EXPECT_EQ(row, traj.samples.size());
}
