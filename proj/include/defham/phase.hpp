#pragma once

// Coordinate conventions on flat T*R^n and T*T^n.
//
//   omega = sum_i dy_i ^ dx_i,  omega(u, v) = sum_i (b_u,i a_v,i - a_u,i b_v,i)
//   G_q   = G_B (+) q G_B^{-1}   (horizontal block, fibre block)
//
// With these signs the field solving omega(X, .) = -d_q H is
// (q^{-1} dH/dy, -dH/dx). See docs/conventions.md.

#include "defham/expr.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>

namespace defham::phase {

enum class Space { plane, torus };

inline constexpr double two_pi = 2.0 * std::numbers::pi;

/// Reduces an angle into [0, 2pi).
inline double wrap_angle(double v) {
    double r = std::fmod(v, two_pi);
    if (r < 0.0) r += two_pi;
    if (r >= two_pi) r = 0.0;
    return r;
}

class PhasePoint {
public:
    PhasePoint() = default;
    PhasePoint(Eigen::VectorXd x, Eigen::VectorXd y, Space space = Space::plane)
        : x_(std::move(x)), y_(std::move(y)), space_(space) {
        if (x_.size() != y_.size() || x_.size() < 1) throw std::invalid_argument("x and y must have equal size >= 1");
        if (space_ == Space::torus)
            for (auto& v : x_) v = wrap_angle(v);
    }

    /// Splits z = (x, y).
    static PhasePoint from_coords(const Eigen::VectorXd& z, Space space = Space::plane) {
        if (z.size() % 2 != 0 || z.size() == 0) throw std::invalid_argument("coordinate vector must have even size");
        const auto n = z.size() / 2;
        return {z.head(n), z.tail(n), space};
    }

    int dimension() const { return static_cast<int>(x_.size()); }
    const Eigen::VectorXd& x() const { return x_; }
    const Eigen::VectorXd& y() const { return y_; }
    Space space() const { return space_; }

    Eigen::VectorXd coords() const {
        Eigen::VectorXd z(2 * x_.size());
        z << x_, y_;
        return z;
    }

private:
    Eigen::VectorXd x_, y_;
    Space space_ = Space::plane;
};

/// Tangent vector split into horizontal (d/dx) and vertical (d/dy) parts.
struct TangentVector {
    Eigen::VectorXd a;
    Eigen::VectorXd b;

    int dimension() const { return static_cast<int>(a.size()); }

    static TangentVector from_coords(const Eigen::VectorXd& v) {
        const auto n = v.size() / 2;
        return {v.head(n), v.tail(n)};
    }
    Eigen::VectorXd coords() const {
        Eigen::VectorXd v(2 * a.size());
        v << a, b;
        return v;
    }
};

inline expr::Jet evaluate_jet(const expr::Expression& e, const PhasePoint& z) {
    if (e.dimension() != z.dimension()) throw std::invalid_argument("point dimension mismatch");
    return expr::evaluate_jet(e, z.coords());
}

/// Matrix of omega in z = (x, y) coordinates: omega(u, v) = u^T Omega v.
inline Eigen::MatrixXd omega_matrix(int n) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(2 * n, 2 * n);
    m.topRightCorner(n, n) = -Eigen::MatrixXd::Identity(n, n);
    m.bottomLeftCorner(n, n) = Eigen::MatrixXd::Identity(n, n);
    return m;
}

inline double omega(const TangentVector& u, const TangentVector& v) {
    if (u.dimension() != v.dimension()) throw std::invalid_argument("tangent vector dimension mismatch");
    return u.b.dot(v.a) - u.a.dot(v.b);
}

class MetricFamily {
public:
    MetricFamily(int n, double q) : MetricFamily(Eigen::MatrixXd::Identity(n, n), q) {}

    MetricFamily(Eigen::MatrixXd base_metric, double q) : base_(std::move(base_metric)), q_(q) {
        if (base_.rows() != base_.cols() || base_.rows() < 1) throw std::invalid_argument("base metric must be square");
        if (!base_.isApprox(base_.transpose(), 1e-14)) throw std::invalid_argument("base metric must be symmetric");
        Eigen::LLT<Eigen::MatrixXd> llt(base_);
        if (llt.info() != Eigen::Success) throw std::invalid_argument("base metric must be positive definite");
        base_inv_ = llt.solve(Eigen::MatrixXd::Identity(base_.rows(), base_.cols()));
    }

    int dimension() const { return static_cast<int>(base_.rows()); }
    double q() const { return q_; }
    const Eigen::MatrixXd& base_metric() const { return base_; }
    const Eigen::MatrixXd& base_metric_inverse() const { return base_inv_; }

    MetricFamily with_q(double q) const {
        MetricFamily m = *this;
        m.q_ = q;
        return m;
    }

    /// 2n x 2n matrix of G_q.
    Eigen::MatrixXd matrix() const {
        const int n = dimension();
        Eigen::MatrixXd g = Eigen::MatrixXd::Zero(2 * n, 2 * n);
        g.topLeftCorner(n, n) = base_;
        g.bottomRightCorner(n, n) = q_ * base_inv_;
        return g;
    }

private:
    Eigen::MatrixXd base_;
    Eigen::MatrixXd base_inv_;
    double q_;
};

inline double metric(const TangentVector& u, const TangentVector& v, const MetricFamily& fam) {
    if (u.dimension() != fam.dimension() || v.dimension() != fam.dimension())
        throw std::invalid_argument("tangent vector dimension mismatch");
    return u.a.dot(fam.base_metric() * v.a) + fam.q() * u.b.dot(fam.base_metric_inverse() * v.b);
}

/// Counts of positive and negative eigenvalues of G_q.
struct Signature {
    int positive = 0;
    int negative = 0;
    int zero = 0;
    friend bool operator==(const Signature&, const Signature&) = default;
};

inline Signature signature(const MetricFamily& fam, double tol = 1e-12) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fam.matrix(), Eigen::EigenvaluesOnly);
    Signature s;
    for (double ev : es.eigenvalues()) {
        if (ev > tol)
            ++s.positive;
        else if (ev < -tol)
            ++s.negative;
        else
            ++s.zero;
    }
    return s;
}

/// Linear map on tangent vectors, stored as its matrix in (a, b) coordinates.
class LinearMap {
public:
    explicit LinearMap(Eigen::MatrixXd m) : m_(std::move(m)) {}
    const Eigen::MatrixXd& matrix() const { return m_; }
    TangentVector operator()(const TangentVector& v) const { return TangentVector::from_coords(m_ * v.coords()); }
    LinearMap operator*(const LinearMap& o) const { return LinearMap(m_ * o.m_); }

private:
    Eigen::MatrixXd m_;
};

/// The unique J_q with omega(u, J_q v) = G_q(u, v), i.e. J_q = Omega^{-1} G_q.
/// For G_B = I this is J_q(a, b) = (q b, -a) and J_q^2 = -q id.
inline LinearMap dual_endomorphism(const MetricFamily& fam) {
    if (fam.q() == 0.0) throw std::invalid_argument("q = 0: G_q is degenerate on the fibres");
    const int n = fam.dimension();
    Eigen::MatrixXd j = Eigen::MatrixXd::Zero(2 * n, 2 * n);
    j.topRightCorner(n, n) = fam.q() * fam.base_metric_inverse();
    j.bottomLeftCorner(n, n) = -fam.base_metric();
    return LinearMap(std::move(j));
}

/// Volume density of a fibre under G_q relative to G_1; equals q^{n/2} for a
/// constant base metric.
inline double fibre_volume_ratio(const MetricFamily& fam) {
    if (!(fam.q() > 0.0)) throw std::invalid_argument("fibre volume ratio needs q > 0");
    const Eigen::MatrixXd& ginv = fam.base_metric_inverse();
    const double scaled = (fam.q() * ginv).determinant();
    return std::sqrt(scaled / ginv.determinant());
}

}  // namespace defham::phase
