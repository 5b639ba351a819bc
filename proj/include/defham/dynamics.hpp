#pragma once

// Deformed Hamiltonian flows: the field X^q_H, its integral curves, the
// variational (Jacobian) flow and the pullback of omega along it.

#include "defham/expr.hpp"
#include "defham/ode.hpp"
#include "defham/phase.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace defham::dynamics {

using expr::Expression;
using phase::PhasePoint;
using phase::Space;
using phase::TangentVector;

inline void require_nonzero_q(double q) {
    if (q == 0.0 || !std::isfinite(q)) throw std::invalid_argument("q must be nonzero");
}

/// X^q_H(z) = (q^{-1} dH/dy, -dH/dx) with the Jacobian assembled from the
/// exact symbolic Hessian of H.
class DeformedField {
public:
    DeformedField(const Expression& h, double q) : jet_(h), q_(q) { require_nonzero_q(q); }

    int dimension() const { return jet_.dimension(); }
    double q() const { return q_; }
    const expr::JetEvaluator& hamiltonian() const { return jet_; }

    Eigen::VectorXd operator()(const Eigen::VectorXd& z) const {
        const int n = dimension();
        const Eigen::VectorXd g = jet_.gradient(z);
        Eigen::VectorXd v(2 * n);
        v.head(n) = g.tail(n) / q_;
        v.tail(n) = -g.head(n);
        return v;
    }

    /// d X^q_H / dz.
    Eigen::MatrixXd jacobian(const Eigen::VectorXd& z) const {
        const int n = dimension();
        const Eigen::MatrixXd hs = jet_.hessian(z);
        Eigen::MatrixXd a(2 * n, 2 * n);
        a.topRows(n) = hs.bottomRows(n) / q_;
        a.bottomRows(n) = -hs.topRows(n);
        return a;
    }

private:
    expr::JetEvaluator jet_;
    double q_;
};

inline TangentVector deformed_field(const Expression& h, double q, const PhasePoint& z) {
    if (h.dimension() != z.dimension()) throw std::invalid_argument("point dimension mismatch");
    return TangentVector::from_coords(DeformedField(h, q)(z.coords()));
}

/// |dH(X^q_H) - (q^{-1} - 1) sum_i H_xi H_yi| at z, relative to the scale
/// max(1, (|q^{-1}| + 1) sum_i |H_xi H_yi|).
inline double energy_derivative_defect(const DeformedField& field, const Eigen::VectorXd& z) {
    const int n = field.dimension();
    const Eigen::VectorXd g = field.hamiltonian().gradient(z);
    const Eigen::VectorXd x = field(z);
    const double rate = g.dot(x);
    double sum = 0.0, scale = 0.0;
    for (int i = 0; i < n; ++i) {
        sum += g[i] * g[n + i];
        scale += std::abs(g[i] * g[n + i]);
    }
    const double predicted = (1.0 / field.q() - 1.0) * sum;
    scale = std::max(1.0, (std::abs(1.0 / field.q()) + 1.0) * scale);
    return std::abs(rate - predicted) / scale;
}

inline double energy_derivative_defect(const Expression& h, double q, const PhasePoint& z) {
    return energy_derivative_defect(DeformedField(h, q), z.coords());
}

/// dH/dt = dH(X^q_H) at z.
inline double energy_rate(const DeformedField& field, const Eigen::VectorXd& z) {
    return field.hamiltonian().gradient(z).dot(field(z));
}

struct FlowSpec {
    Expression hamiltonian;
    double q = 1.0;
    Space space = Space::plane;
    ode::Integrator integrator = ode::Rk4{1e-3};
    double t_final = 1.0;
    int sample_stride = 1;

    int dimension() const { return hamiltonian.dimension(); }

    void validate() const {
        require_nonzero_q(q);
        if (q < 0.0) throw std::invalid_argument("flows are defined for q > 0");
        if (!(t_final > 0.0)) throw std::invalid_argument("t_final must be > 0");
        if (sample_stride < 1) throw std::invalid_argument("sample_stride must be >= 1");
        ode::validate(integrator);
    }
};

struct Sample {
    double t = 0.0;
    PhasePoint z;
    double h_value = 0.0;
};

struct Trajectory {
    int n = 1;
    std::vector<Sample> samples;
};

struct VariationalFlow {
    Trajectory trajectory;
    std::vector<Eigen::MatrixXd> jacobians;  // D phi_t, aligned with samples
};

namespace detail {

inline PhasePoint to_point(const Eigen::VectorXd& z, int n, Space space) {
    return {z.head(n), z.segment(n, n), space};
}

}  // namespace detail

inline Trajectory integrate(const FlowSpec& spec, const PhasePoint& z0) {
    spec.validate();
    const int n = spec.dimension();
    if (z0.dimension() != n) throw std::invalid_argument("initial point dimension mismatch");
    const DeformedField field(spec.hamiltonian, spec.q);
    Trajectory traj{n, {}};
    auto rhs = [&](double, const Eigen::VectorXd& z) { return field(z); };
    ode::integrate(rhs, z0.coords(), spec.integrator, spec.t_final,
                   [&](long k, double t, const Eigen::VectorXd& z, bool last) {
                       if (k % spec.sample_stride != 0 && !last) return;
                       traj.samples.push_back({t, detail::to_point(z, n, spec.space), field.hamiltonian().value(z)});
                   });
    return traj;
}

/// Co-integrates D' = (dX/dz) D, D(0) = I, with the same stepper.
inline VariationalFlow integrate_variational(const FlowSpec& spec, const PhasePoint& z0) {
    spec.validate();
    const int n = spec.dimension();
    const int m = 2 * n;
    if (z0.dimension() != n) throw std::invalid_argument("initial point dimension mismatch");
    const DeformedField field(spec.hamiltonian, spec.q);
    auto rhs = [&](double, const Eigen::VectorXd& s) {
        Eigen::VectorXd out(s.size());
        const Eigen::VectorXd z = s.head(m);
        out.head(m) = field(z);
        const Eigen::Map<const Eigen::MatrixXd> d(s.data() + m, m, m);
        Eigen::Map<Eigen::MatrixXd>(out.data() + m, m, m) = field.jacobian(z) * d;
        return out;
    };
    Eigen::VectorXd s0(m + m * m);
    s0.head(m) = z0.coords();
    Eigen::Map<Eigen::MatrixXd>(s0.data() + m, m, m).setIdentity();

    VariationalFlow vf{{n, {}}, {}};
    ode::integrate(rhs, s0, spec.integrator, spec.t_final, [&](long k, double t, const Eigen::VectorXd& s, bool last) {
        if (k % spec.sample_stride != 0 && !last) return;
        const Eigen::VectorXd z = s.head(m);
        vf.trajectory.samples.push_back({t, detail::to_point(z, n, spec.space), field.hamiltonian().value(z)});
        vf.jacobians.emplace_back(Eigen::Map<const Eigen::MatrixXd>(s.data() + m, m, m));
    });
    return vf;
}

struct Symplectic {};
struct Conformal {
    double c = 0.0;  // expected pullback e^{ct} omega
};
using PullbackMode = std::variant<Symplectic, Conformal>;

/// Rate c of the conformal pullback for a Hamiltonian with omega = c' d_- d_+ H:
/// c = (q^{-1} - 1) / c'.
inline double conformal_rate(double q, double c_prime) { return (1.0 / q - 1.0) / c_prime; }

struct PullbackSample {
    double t = 0.0;
    double defect = 0.0;
};

/// max-norm of D^T Omega D - s(t) Omega, with s = 1 (symplectic) or e^{ct}.
inline std::vector<PullbackSample> pullback_defect(const VariationalFlow& vf, const PullbackMode& mode) {
    const int n = vf.trajectory.n;
    const Eigen::MatrixXd omega = phase::omega_matrix(n);
    std::vector<PullbackSample> out;
    out.reserve(vf.jacobians.size());
    for (std::size_t i = 0; i < vf.jacobians.size(); ++i) {
        const double t = vf.trajectory.samples[i].t;
        const double s = std::holds_alternative<Conformal>(mode) ? std::exp(std::get<Conformal>(mode).c * t) : 1.0;
        const Eigen::MatrixXd& d = vf.jacobians[i];
        out.push_back({t, (d.transpose() * omega * d - s * omega).cwiseAbs().maxCoeff()});
    }
    return out;
}

inline double max_defect(const std::vector<PullbackSample>& s) {
    double m = 0.0;
    for (const auto& p : s) m = std::max(m, p.defect);
    return m;
}

/// Formats with 17 significant digits, which round-trips doubles.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// CSV with header `t,x1..xn,y1..yn,H`, one row per sample.
inline std::string to_csv(const Trajectory& traj) {
    std::string out = "t";
    for (int i = 1; i <= traj.n; ++i) out += ",x" + std::to_string(i);
    for (int i = 1; i <= traj.n; ++i) out += ",y" + std::to_string(i);
    out += ",H\n";
    for (const auto& s : traj.samples) {
        out += format_double(s.t);
        for (double v : s.z.x()) out += "," + format_double(v);
        for (double v : s.z.y()) out += "," + format_double(v);
        out += "," + format_double(s.h_value) + "\n";
    }
    return out;
}

}  // namespace defham::dynamics
