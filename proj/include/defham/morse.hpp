#pragma once

// Lagrange-multiplier Morse theory on T*B for the family
//
//   H_q(x, y) = f(x) + sum_i y_i w_i(x) + q g(y),   q in (0, 1],
//
// with negative gradient flow in the metric G_q = I (+) q I:
//
//   u' = -grad_q H_q = (-dH/dx, -q^{-1} dH/dy).
//
// Pipeline: Newton search for critical points, Morse indices with a
// base + fibre + k certificate, flow-line counting by shooting from the
// unstable sphere, the mod-2 Morse complex and its homology, and the
// distance of flow lines from the constraint set Z as q -> 0.

#include "defham/expr.hpp"
#include "defham/ode.hpp"
#include "defham/phase.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace defham::morse {

using expr::Expression;
using phase::PhasePoint;
using phase::Space;

/// Violations of the Morse assumptions found at run time (degenerate
/// critical points, 0 not a regular value of w, inconsistent complex).
class MorseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Interval bounds for each of the 2n coordinates, ordered (x, y).
struct Box {
    std::vector<std::pair<double, double>> bounds;

    static Box cube(int n, double lo, double hi) { return {std::vector<std::pair<double, double>>(2 * n, {lo, hi})}; }
};

struct MorseSpec {
    int n = 1;
    Expression f;               // base variables only
    std::vector<Expression> w;  // n entries, base variables only
    Expression g;               // fibre variables only
    double q = 1.0;
    Space space = Space::plane;

    /// Number of constraint functions that are not identically zero.
    int rank() const {
        int k = 0;
        for (const auto& wi : w) k += wi.is_zero() ? 0 : 1;
        return k;
    }

    void validate() const {
        if (n < 1) throw std::invalid_argument("n must be >= 1");
        if (static_cast<int>(w.size()) != n) throw std::invalid_argument("w must have n entries");
        auto dim = [&](const Expression& e, const std::string& name) {
            if (e.dimension() != n) throw std::invalid_argument(name + " has dimension " + std::to_string(e.dimension()));
        };
        dim(f, "f");
        dim(g, "g");
        if (f.depends_on(expr::VarKind::fibre))
            throw std::invalid_argument("f must depend on base variables only: '" + f.to_string() + "'");
        for (std::size_t i = 0; i < w.size(); ++i) {
            dim(w[i], "w" + std::to_string(i + 1));
            if (w[i].depends_on(expr::VarKind::fibre))
                throw std::invalid_argument("w" + std::to_string(i + 1) +
                                            " must depend on base variables only: '" + w[i].to_string() + "'");
        }
        if (g.depends_on(expr::VarKind::base))
            throw std::invalid_argument("g must depend on fibre variables only: '" + g.to_string() + "'");
        if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("q must lie in (0, 1]");
    }

    MorseSpec with_q(double q_new) const {
        MorseSpec s = *this;
        s.q = q_new;
        return s;
    }
};

/// H_q = f + sum_i y_i w_i + q g.
inline Expression build_hamiltonian(const MorseSpec& spec) {
    spec.validate();
    using namespace expr;
    NodePtr h = spec.f.root();
    for (int i = 0; i < spec.n; ++i)
        h = add(h, mul(variable(Variable{VarKind::fibre, i + 1}), spec.w[i].root()));
    h = add(h, mul(constant(Rational(spec.q)), spec.g.root()));
    return {spec.n, h};
}

struct SearchOptions {
    Box box;
    int grid = 7;
    double newton_tol = 1e-12;
    int max_newton = 100;
    double dedup = 1e-6;
    double residual_tol = 1e-10;
    double degeneracy_tol = 1e-8;
};

struct CriticalPoint {
    PhasePoint z;
    int index = 0;
    double residual = 0.0;
    Eigen::VectorXd hessian_spectrum;  // ascending eigenvalues of G_q^{-1/2} Hess G_q^{-1/2}
    double energy = 0.0;               // H_q(z)
};

struct IndexCertificate {
    int index = 0;
    int base_index = 0;   // index of f restricted to w^{-1}(0) at x
    int fibre_index = 0;  // index of g on the fibre Z_x
    int k = 0;
    bool consistent = false;
};

struct ShootingOptions {
    double epsilon = 1e-4;       // radius of the unstable sphere
    double capture = 1e-3;       // radius of the ball around p+
    int mesh = 64;               // angular mesh for 2-dimensional unstable spaces
    double step = 1e-2;          // rk4 step at q = 1, scaled by sqrt(q) below
    double t_max = 100.0;        // per trajectory
    double bisect_tol = 1e-14;   // separation that ends a bisection
    double separation = 1e-7;    // separation that triggers re-bisection
    int max_restarts = 400;
    int refine_depth = 3;        // local mesh refinements after a failed track
    int refine_factor = 8;
    long label_budget = 4000;   // label evaluations per tracked boundary
    double escape_warning = 0.5; // fraction of escaping mesh trajectories
};

struct MorseOptions {
    SearchOptions search;
    ShootingOptions shooting;
};

// ---------------------------------------------------------------------------

namespace detail {

inline double wrapped_diff(double a, double b) { return std::remainder(a - b, phase::two_pi); }

}  // namespace detail

/// Compiled H_q with the geometry needed by the pipeline.
class MorseProblem {
public:
    explicit MorseProblem(MorseSpec spec)
        : spec_(std::move(spec)), h_(build_hamiltonian(spec_)), f_(spec_.f) {
        for (const auto& wi : spec_.w) {
            if (wi.is_zero()) continue;
            w_.emplace_back(wi);
        }
    }

    const MorseSpec& spec() const { return spec_; }
    int n() const { return spec_.n; }
    int dim() const { return 2 * spec_.n; }
    double q() const { return spec_.q; }
    const expr::JetEvaluator& hamiltonian() const { return h_; }

    /// -grad_q H_q.
    Eigen::VectorXd flow(const Eigen::VectorXd& z) const {
        Eigen::VectorXd g = h_.gradient(z);
        g.head(n()) *= -1.0;
        g.tail(n()) *= -1.0 / q();
        return g;
    }

    /// Difference a - b, with base coordinates reduced mod 2pi on the torus.
    Eigen::VectorXd difference(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const {
        Eigen::VectorXd d = a - b;
        if (spec_.space == Space::torus)
            for (int i = 0; i < n(); ++i) d[i] = detail::wrapped_diff(a[i], b[i]);
        return d;
    }
    double distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const { return difference(a, b).norm(); }

    Eigen::VectorXd normalize(Eigen::VectorXd z) const {
        if (spec_.space == Space::torus)
            for (int i = 0; i < n(); ++i) z[i] = phase::wrap_angle(z[i]);
        return z;
    }

    bool inside(const Eigen::VectorXd& z, const Box& box, double slack = 0.0) const {
        for (int i = 0; i < dim(); ++i) {
            if (spec_.space == Space::torus && i < n()) continue;
            const auto [lo, hi] = box.bounds[i];
            if (z[i] < lo - slack || z[i] > hi + slack) return false;
        }
        return true;
    }

    /// G_q^{-1/2} as a diagonal.
    Eigen::VectorXd metric_inv_sqrt() const {
        Eigen::VectorXd s = Eigen::VectorXd::Ones(dim());
        s.tail(n()).setConstant(1.0 / std::sqrt(q()));
        return s;
    }

    /// Eigen-decomposition of the G_q-symmetrized Hessian at z.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> scaled_hessian(const Eigen::VectorXd& z) const {
        const Eigen::VectorXd s = metric_inv_sqrt();
        const Eigen::MatrixXd hs = s.asDiagonal() * h_.hessian(z) * s.asDiagonal();
        return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(hs);
    }

    /// Jacobian of the nonzero constraints (k x n) at base point x.
    Eigen::MatrixXd constraint_jacobian(const Eigen::VectorXd& z) const {
        Eigen::MatrixXd r(static_cast<Eigen::Index>(w_.size()), n());
        for (std::size_t i = 0; i < w_.size(); ++i) r.row(static_cast<Eigen::Index>(i)) = w_[i].gradient(z).head(n()).transpose();
        return r;
    }

    /// ||w(x)|| + ||P_row(df + sum_i y_i dw_i)||, where P_row projects onto the
    /// span of the constraint differentials. Vanishes exactly on Z.
    double distance_to_constraint_set(const Eigen::VectorXd& z) const {
        const Eigen::VectorXd y = z.tail(n());
        Eigen::VectorXd v = f_.gradient(z).head(n());
        double wnorm2 = 0.0;
        std::size_t k = 0;
        for (int i = 0; i < n(); ++i) {
            if (spec_.w[i].is_zero()) continue;
            const expr::JetEvaluator& wi = w_[k++];
            const double val = wi.value(z);
            wnorm2 += val * val;
            v += y[i] * wi.gradient(z).head(n());
        }
        if (w_.empty()) return 0.0;
        const Eigen::MatrixXd r = constraint_jacobian(z);
        // projection onto row space of r: r^T (r r^T)^+ r v
        const Eigen::VectorXd coeffs = r.transpose().completeOrthogonalDecomposition().solve(v);
        const Eigen::VectorXd proj = r.transpose() * coeffs;
        return std::sqrt(wnorm2) + proj.norm();
    }

    /// Hessian blocks used by the index certificate.
    Eigen::MatrixXd lagrangian_base_hessian(const Eigen::VectorXd& z) const {
        return h_.hessian(z).topLeftCorner(n(), n());
    }

    const expr::JetEvaluator& f_jet() const { return f_; }

private:
    MorseSpec spec_;
    expr::JetEvaluator h_;
    expr::JetEvaluator f_;
    std::vector<expr::JetEvaluator> w_;
};

// ---------------------------------------------------------------------------
// Critical points

inline int count_negative(const Eigen::VectorXd& ev) {
    int c = 0;
    for (double v : ev) c += v < 0.0 ? 1 : 0;
    return c;
}

namespace detail {

inline std::optional<Eigen::VectorXd> newton(const MorseProblem& pb, Eigen::VectorXd z, const SearchOptions& opt) {
    Eigen::VectorXd g = pb.hamiltonian().gradient(z);
    for (int it = 0; it < opt.max_newton; ++it) {
        if (!g.allFinite()) return std::nullopt;
        if (g.lpNorm<Eigen::Infinity>() <= opt.newton_tol) return z;
        const Eigen::MatrixXd hs = pb.hamiltonian().hessian(z);
        const Eigen::VectorXd dz = hs.completeOrthogonalDecomposition().solve(g);
        if (!dz.allFinite()) return std::nullopt;
        // backtrack on ||grad H||
        double lambda = 1.0;
        Eigen::VectorXd z_new, g_new;
        for (int ls = 0; ls < 30; ++ls) {
            z_new = z - lambda * dz;
            g_new = pb.hamiltonian().gradient(z_new);
            if (g_new.allFinite() && g_new.norm() < g.norm()) break;
            lambda *= 0.5;
        }
        if (!(g_new.allFinite() && g_new.norm() <= g.norm())) return g.norm() <= opt.residual_tol ? std::optional(z) : std::nullopt;
        z = std::move(z_new);
        g = std::move(g_new);
        if (z.lpNorm<Eigen::Infinity>() > 1e8) return std::nullopt;
    }
    if (g.allFinite() && g.norm() <= opt.residual_tol) return z;
    return std::nullopt;
}

}  // namespace detail

inline CriticalPoint make_critical_point(const MorseProblem& pb, const Eigen::VectorXd& z) {
    CriticalPoint cp;
    cp.z = PhasePoint::from_coords(z, pb.spec().space);
    cp.residual = pb.hamiltonian().gradient(z).norm();
    cp.hessian_spectrum = pb.scaled_hessian(z).eigenvalues();
    cp.index = count_negative(cp.hessian_spectrum);
    cp.energy = pb.hamiltonian().value(z);
    return cp;
}

/// Newton iteration on grad H_q = 0 from every grid seed of the box.
/// Solutions are deduplicated, sorted by (index, coordinates) and checked
/// for nondegeneracy and regularity of the constraint.
inline std::vector<CriticalPoint> find_critical_points(const MorseProblem& pb, const SearchOptions& opt) {
    const int m = pb.dim();
    if (static_cast<int>(opt.box.bounds.size()) != m) throw std::invalid_argument("search box must have 2n intervals");
    if (opt.grid < 2) throw std::invalid_argument("grid must be >= 2");
    for (const auto& [lo, hi] : opt.box.bounds)
        if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi)) throw std::invalid_argument("search box must be bounded");

    std::vector<Eigen::VectorXd> found;
    std::vector<int> counter(m, 0);
    long total = 1;
    for (int i = 0; i < m; ++i) total *= opt.grid;
    for (long s = 0; s < total; ++s) {
        long rem = s;
        Eigen::VectorXd seed(m);
        for (int i = 0; i < m; ++i) {
            const int c = static_cast<int>(rem % opt.grid);
            rem /= opt.grid;
            const auto [lo, hi] = opt.box.bounds[i];
            seed[i] = lo + (hi - lo) * c / (opt.grid - 1);
        }
        auto sol = detail::newton(pb, seed, opt);
        if (!sol) continue;
        Eigen::VectorXd z = pb.normalize(*sol);
        if (!pb.inside(z, opt.box, 1e-9)) continue;
        bool dup = false;
        for (const auto& other : found)
            if (pb.distance(z, other) < opt.dedup) {
                dup = true;
                break;
            }
        if (!dup) found.push_back(z);
    }

    std::vector<CriticalPoint> out;
    for (const auto& z : found) {
        CriticalPoint cp = make_critical_point(pb, z);
        if (cp.residual > opt.residual_tol)
            throw MorseError("critical point residual " + std::to_string(cp.residual) + " above tolerance");
        for (double ev : cp.hessian_spectrum)
            if (std::abs(ev) <= opt.degeneracy_tol) {
                std::string where;
                for (int i = 0; i < m; ++i) where += (i ? ", " : "") + std::to_string(z[i]);
                throw MorseError("Morse condition fails: degenerate critical point at (" + where + ")");
            }
        const int k = pb.spec().rank();
        if (k > 0) {
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(pb.constraint_jacobian(z));
            int rank = 0;
            for (double s : svd.singularValues()) rank += s > 1e-8 ? 1 : 0;
            if (rank != k) throw MorseError("0 is not a regular value of w at a critical point");
        }
        out.push_back(std::move(cp));
    }
    std::sort(out.begin(), out.end(), [](const CriticalPoint& a, const CriticalPoint& b) {
        if (a.index != b.index) return a.index < b.index;
        const Eigen::VectorXd za = a.z.coords(), zb = b.z.coords();
        for (Eigen::Index i = 0; i < za.size(); ++i)
            if (std::abs(za[i] - zb[i]) > 1e-9) return za[i] < zb[i];
        return false;
    });
    return out;
}

inline std::vector<CriticalPoint> find_critical_points(const MorseSpec& spec, const SearchOptions& opt) {
    return find_critical_points(MorseProblem(spec), opt);
}

namespace detail {

/// Orthonormal basis of ker(a) (columns).
inline Eigen::MatrixXd kernel_basis(const Eigen::MatrixXd& a, int cols) {
    if (a.rows() == 0) return Eigen::MatrixXd::Identity(cols, cols);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
    int rank = 0;
    for (double s : svd.singularValues()) rank += s > 1e-10 ? 1 : 0;
    return svd.matrixV().rightCols(cols - rank);
}

inline int restricted_index(const Eigen::MatrixXd& hess, const Eigen::MatrixXd& basis) {
    if (basis.cols() == 0) return 0;
    const Eigen::MatrixXd r = basis.transpose() * hess * basis;
    return count_negative(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(r, Eigen::EigenvaluesOnly).eigenvalues());
}

}  // namespace detail

/// Index of p with its decomposition: index of f|w^{-1}(0) at x (the
/// Lagrangian Hessian on ker dw) + index of g on Z_x = ker(Dw^T) + k.
inline IndexCertificate critical_index(const MorseProblem& pb, const CriticalPoint& p,
                                       double degeneracy_tol = 1e-8) {
    const Eigen::VectorXd z = p.z.coords();
    const auto es = pb.scaled_hessian(z);
    for (double ev : es.eigenvalues())
        if (std::abs(ev) <= degeneracy_tol) throw MorseError("Morse condition fails: near-zero Hessian eigenvalue");
    IndexCertificate c;
    c.index = count_negative(es.eigenvalues());
    c.k = pb.spec().rank();
    const int n = pb.n();
    const Eigen::MatrixXd hess = pb.hamiltonian().hessian(z);
    c.base_index = detail::restricted_index(hess.topLeftCorner(n, n), detail::kernel_basis(pb.constraint_jacobian(z), n));

    Eigen::MatrixXd full(n, n);  // rows dw_i, zero rows for vanishing w_i
    full.setZero();
    {
        const Eigen::MatrixXd r = pb.constraint_jacobian(z);
        int k = 0;
        for (int i = 0; i < n; ++i)
            if (!pb.spec().w[i].is_zero()) full.row(i) = r.row(k++);
    }
    // The y-Hessian of H_q is q Hess g; q > 0 leaves the signs alone.
    c.fibre_index = detail::restricted_index(hess.bottomRightCorner(n, n), detail::kernel_basis(full.transpose(), n));
    c.consistent = c.base_index + c.fibre_index + c.k == c.index;
    return c;
}

// ---------------------------------------------------------------------------
// Flow lines

struct FlowLine {
    std::vector<Eigen::VectorXd> path;  // points along the computed line, p- to p+
};

struct FlowLineCount {
    int raw = 0;
    int mod2 = 0;
    int shot = 0;     // mesh trajectories
    int escaped = 0;  // mesh trajectories that left the search box
    bool escape_warning = false;
    std::vector<FlowLine> lines;
};

namespace detail {

enum class Outcome { captured, exited, timeout };

struct Label {
    Outcome outcome = Outcome::timeout;
    int id = -1;    // captured critical point or exit face
    int side = 0;   // sign along the unstable direction of p+ at closest approach
    friend bool operator==(const Label&, const Label&) = default;
};

class Shooter {
public:
    Shooter(const MorseProblem& pb, const std::vector<CriticalPoint>& crit, std::size_t minus, std::size_t plus,
            const Box& box, const ShootingOptions& opt)
        : pb_(pb), crit_(crit), minus_(minus), plus_(plus), box_(box), opt_(opt) {
        h_ = opt.step * std::min(1.0, std::sqrt(pb.q()));
        p_plus_ = crit[plus].z.coords();
        e_plus_ = crit[plus].energy;
        // unstable direction(s) of p+ in flow coordinates
        const auto es = pb.scaled_hessian(p_plus_);
        const Eigen::VectorXd s = pb.metric_inv_sqrt();
        for (int i = 0; i < pb.dim(); ++i)
            if (es.eigenvalues()[i] < 0.0) {
                unstable_plus_ = (s.asDiagonal() * es.eigenvectors().col(i)).normalized();
                break;
            }
        for (const auto& c : crit) points_.push_back(c.z.coords());
    }

    double step() const { return h_; }

    Eigen::VectorXd advance(const Eigen::VectorXd& z) const {
        auto rhs = [this](double, const Eigen::VectorXd& u) { return pb_.flow(u); };
        Eigen::VectorXd out = ode::rk4_step(rhs, 0.0, z, h_);
        if (!out.allFinite()) throw ode::FlowError("non-finite state in gradient flow (q=" + std::to_string(pb_.q()) + ")", 0.0);
        return out;
    }

    bool captured_by_plus(const Eigen::VectorXd& z) const { return pb_.distance(z, p_plus_) < opt_.capture; }

    /// Where the trajectory from z ends. With `capture_plus` unset the ball
    /// around p+ is not absorbing: trajectories close to its stable manifold
    /// then report the side on which they leave, which is what the boundary
    /// follower needs.
    Label label(Eigen::VectorXd z, bool capture_plus = true) const {
        Label lab;
        double closest = std::numeric_limits<double>::infinity();
        for (double t = 0.0; t < opt_.t_max; t += h_) {
            const Eigen::VectorXd d = pb_.difference(z, p_plus_);
            const double dist = d.norm();
            if (dist < closest) {
                closest = dist;
                const double proj = unstable_plus_.size() ? unstable_plus_.dot(d) : 0.0;
                lab.side = proj > 0.0 ? 1 : (proj < 0.0 ? -1 : 0);
            }
            for (std::size_t j = 0; j < points_.size(); ++j) {
                if (j == minus_ || (j == plus_ && !capture_plus)) continue;
                if (pb_.distance(z, points_[j]) < opt_.capture) {
                    lab.outcome = Outcome::captured;
                    lab.id = static_cast<int>(j);
                    return lab;
                }
            }
            if (!pb_.inside(z, box_)) {
                lab.outcome = Outcome::exited;
                lab.id = exit_face(z);
                return lab;
            }
            z = advance(z);
        }
        lab.outcome = Outcome::timeout;
        return lab;
    }

    /// Follows the boundary between two differently labelled states by
    /// repeated bisection and returns the traced path when it reaches p+.
    /// A midpoint with a third label means the segment crosses more than one
    /// boundary (one side of a line may leave the box through several faces);
    /// both halves are then followed, within a budget of label evaluations.
    std::optional<FlowLine> track(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& origin) const {
        const Label la = label(a, false), lb = label(b, false);
        if (la == lb) return std::nullopt;
        Walk w{a, b, la, lb, FlowLine{}, 0.0, 0};
        w.line.path.push_back(origin);
        long budget = opt_.label_budget;
        return follow(std::move(w), budget);
    }

private:
    struct Walk {
        Eigen::VectorXd a, b;
        Label la, lb;
        FlowLine line;
        double elapsed;
        int restart;
    };

    std::optional<FlowLine> follow(Walk w, long& budget) const {
        for (; w.restart < opt_.max_restarts; ++w.restart) {
            for (int it = 0; it < 200 && pb_.distance(w.a, w.b) > opt_.bisect_tol; ++it) {
                if (--budget < 0) return std::nullopt;
                const Eigen::VectorXd mid = 0.5 * (w.a + w.b);
                const Label lm = label(mid, false);
                if (lm == w.la) {
                    w.a = mid;
                } else if (lm == w.lb) {
                    w.b = mid;
                } else {
                    Walk left = w;
                    left.b = mid;
                    left.lb = lm;
                    if (auto found = follow(std::move(left), budget)) return found;
                    w.a = mid;
                    w.la = lm;
                }
            }
            for (;;) {
                const Eigen::VectorXd mid = 0.5 * (w.a + w.b);
                w.line.path.push_back(pb_.normalize(mid));
                if (captured_by_plus(mid)) {
                    w.line.path.push_back(p_plus_);
                    return std::move(w.line);
                }
                if (w.elapsed > opt_.t_max || !pb_.inside(mid, box_)) return std::nullopt;
                // below the level of p+ the flow can no longer reach it; close to p+
                // the midpoint may dip under that level by O(separation^2)
                if (pb_.distance(mid, p_plus_) > 10.0 * opt_.capture &&
                    pb_.hamiltonian().value(mid) < e_plus_ - 1e-12 * std::max(1.0, std::abs(e_plus_)))
                    return std::nullopt;
                for (std::size_t j = 0; j < points_.size(); ++j)
                    if (j != minus_ && j != plus_ && pb_.distance(mid, points_[j]) < opt_.capture) return std::nullopt;
                if (pb_.distance(w.a, w.b) > opt_.separation) break;
                w.a = advance(w.a);
                w.b = advance(w.b);
                w.elapsed += h_;
            }
            budget -= 2;
            w.la = label(w.a, false);
            w.lb = label(w.b, false);
            if (w.la == w.lb) return std::nullopt;
        }
        return std::nullopt;
    }

    int exit_face(const Eigen::VectorXd& z) const {
        for (int i = 0; i < pb_.dim(); ++i) {
            if (pb_.spec().space == Space::torus && i < pb_.n()) continue;
            if (z[i] < box_.bounds[i].first) return 2 * i;
            if (z[i] > box_.bounds[i].second) return 2 * i + 1;
        }
        return -1;
    }

    const MorseProblem& pb_;
    const std::vector<CriticalPoint>& crit_;
    std::size_t minus_, plus_;
    Box box_;
    ShootingOptions opt_;
    double h_ = 1e-2;
    Eigen::VectorXd p_plus_;
    double e_plus_ = 0.0;
    Eigen::VectorXd unstable_plus_;
    std::vector<Eigen::VectorXd> points_;
};

/// Euclidean-orthonormal basis of the unstable subspace of -grad_q H_q at z.
inline Eigen::MatrixXd unstable_basis(const MorseProblem& pb, const Eigen::VectorXd& z) {
    const auto es = pb.scaled_hessian(z);
    const Eigen::VectorXd s = pb.metric_inv_sqrt();
    std::vector<Eigen::VectorXd> dirs;
    for (int i = 0; i < pb.dim(); ++i)
        if (es.eigenvalues()[i] < 0.0) dirs.push_back(s.asDiagonal() * es.eigenvectors().col(i));
    Eigen::MatrixXd basis(pb.dim(), static_cast<Eigen::Index>(dirs.size()));
    for (std::size_t i = 0; i < dirs.size(); ++i) basis.col(static_cast<Eigen::Index>(i)) = dirs[i];
    if (basis.cols() == 0) return basis;
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(basis);
    Eigen::MatrixXd qm = qr.householderQ() * Eigen::MatrixXd::Identity(pb.dim(), basis.cols());
    // fix the sign so that the basis is deterministic
    for (Eigen::Index c = 0; c < qm.cols(); ++c) {
        Eigen::Index arg;
        qm.col(c).cwiseAbs().maxCoeff(&arg);
        if (qm(arg, c) < 0) qm.col(c) *= -1.0;
    }
    return qm;
}

}  // namespace detail

/// Counts negative-gradient flow lines from p- (index m) to p+ (index m - 1)
/// by shooting from the radius-epsilon sphere in the unstable space of p-.
/// Mesh trajectories that enter the capture ball of p+ are grouped into
/// connected arcs; between adjacent mesh points whose trajectories end
/// differently the dividing line is followed by bisection and counted when
/// it reaches p+. Supports unstable dimension 1 and 2.
inline FlowLineCount count_flow_lines(const MorseProblem& pb, const std::vector<CriticalPoint>& crit,
                                      std::size_t minus, std::size_t plus, const Box& box,
                                      const ShootingOptions& opt) {
    if (minus >= crit.size() || plus >= crit.size()) throw std::out_of_range("critical point index");
    const int m = crit[minus].index;
    if (m - crit[plus].index != 1)
        throw std::invalid_argument("flow lines are counted only between indices differing by one (got " +
                                    std::to_string(m) + " and " + std::to_string(crit[plus].index) + ")");
    if (m > 2) throw std::invalid_argument("shooting supports unstable dimension <= 2 (got " + std::to_string(m) + ")");
    const detail::Shooter shooter(pb, crit, minus, plus, box, opt);
    const Eigen::VectorXd origin = crit[minus].z.coords();
    const Eigen::MatrixXd basis = detail::unstable_basis(pb, origin);

    std::vector<Eigen::VectorXd> starts;
    if (m == 1) {
        starts = {origin + opt.epsilon * basis.col(0), origin - opt.epsilon * basis.col(0)};
    } else {
        for (int i = 0; i < opt.mesh; ++i) {
            const double th = phase::two_pi * i / opt.mesh;
            starts.push_back(origin + opt.epsilon * (std::cos(th) * basis.col(0) + std::sin(th) * basis.col(1)));
        }
    }

    FlowLineCount out;
    out.shot = static_cast<int>(starts.size());
    std::vector<detail::Label> labels;
    for (const auto& s : starts) {
        labels.push_back(shooter.label(s));
        if (labels.back().outcome == detail::Outcome::exited) ++out.escaped;
    }
    auto hits = [&](std::size_t i) {
        return labels[i].outcome == detail::Outcome::captured && labels[i].id == static_cast<int>(plus);
    };
    auto trace = [&](const Eigen::VectorXd& s) {
        FlowLine line;
        line.path.push_back(origin);
        Eigen::VectorXd z = s;
        for (double t = 0.0; t < opt.t_max && !shooter.captured_by_plus(z); t += shooter.step()) {
            line.path.push_back(pb.normalize(z));
            z = shooter.advance(z);
        }
        line.path.push_back(crit[plus].z.coords());
        return line;
    };

    const std::size_t count = starts.size();
    if (m == 1) {
        for (std::size_t i = 0; i < count; ++i)
            if (hits(i)) out.lines.push_back(trace(starts[i]));
    } else {
        auto start_at = [&](double th) {
            return Eigen::VectorXd(origin + opt.epsilon * (std::cos(th) * basis.col(0) + std::sin(th) * basis.col(1)));
        };
        auto theta = [&](std::size_t i) { return phase::two_pi * static_cast<double>(i) / static_cast<double>(count); };
        // A registering arc is one line. Its path is recomputed by following the
        // boundary between the arc's two neighbours: a single mesh trajectory
        // lying on the line drifts off it at the rate of the fast directions.
        auto arc_line = [&](double th_before, double th_after, double th_inside) {
            if (auto line = shooter.track(start_at(th_before), start_at(th_after), origin)) return std::move(*line);
            return trace(start_at(th_inside));
        };
        // arcs of registering mesh points, counted on the circle
        bool all = true;
        for (std::size_t i = 0; i < count; ++i) all = all && hits(i);
        if (all) {
            out.lines.push_back(trace(starts[0]));
        } else {
            for (std::size_t i = 0; i < count; ++i) {
                const std::size_t prev = (i + count - 1) % count;
                if (!hits(i) || hits(prev)) continue;
                std::size_t len = 0;
                while (hits((i + len) % count)) ++len;
                const double before = theta(i) - phase::two_pi / static_cast<double>(count);
                const double after = theta(i) + phase::two_pi * static_cast<double>(len) / static_cast<double>(count);
                out.lines.push_back(arc_line(before, after, theta(i + len / 2)));
            }
        }
        auto is_hit = [&](const detail::Label& l) {
            return l.outcome == detail::Outcome::captured && l.id == static_cast<int>(plus);
        };
        // Follows the label boundary inside [th_a, th_b]; when that fails the
        // interval is subdivided, since it may hold a line next to a boundary
        // that only reflects which face of the box a trajectory leaves by.
        auto scan = [&](auto&& self, double th_a, double th_b, const detail::Label& la, const detail::Label& lb,
                        int depth) -> void {
            if (la == lb) return;
            if (auto line = shooter.track(start_at(th_a), start_at(th_b), origin)) {
                out.lines.push_back(std::move(*line));
                return;
            }
            if (depth >= opt.refine_depth) return;
            const int k = std::max(2, opt.refine_factor);
            std::vector<double> th(k + 1);
            std::vector<detail::Label> lab(k + 1);
            for (int j = 0; j <= k; ++j) th[j] = th_a + (th_b - th_a) * j / k;
            lab[0] = la;
            lab[k] = lb;
            for (int j = 1; j < k; ++j) lab[j] = shooter.label(start_at(th[j]));
            for (int j = 1; j < k; ++j) {
                if (!is_hit(lab[j]) || is_hit(lab[j - 1])) continue;
                int e = j;
                while (is_hit(lab[e + 1])) ++e;  // lab[k] is not a hit
                out.lines.push_back(arc_line(th[j - 1], th[e + 1], th[(j + e) / 2]));
            }
            for (int j = 0; j < k; ++j)
                if (!is_hit(lab[j]) && !is_hit(lab[j + 1])) self(self, th[j], th[j + 1], lab[j], lab[j + 1], depth + 1);
        };
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t next = (i + 1) % count;
            if (hits(i) || hits(next) || labels[i] == labels[next]) continue;
            scan(scan, theta(i), theta(i + 1), labels[i], labels[next], 0);
        }
    }
    out.raw = static_cast<int>(out.lines.size());
    out.mod2 = out.raw % 2;
    out.escape_warning = out.escaped > opt.escape_warning * out.shot;
    return out;
}

// ---------------------------------------------------------------------------
// Complex and homology

/// Dense matrix over Z/2.
struct Mod2Matrix {
    int rows = 0, cols = 0;
    std::vector<std::uint8_t> data;

    Mod2Matrix() = default;
    Mod2Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0) {}
    std::uint8_t& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    std::uint8_t at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    bool is_zero() const {
        return std::all_of(data.begin(), data.end(), [](std::uint8_t v) { return v == 0; });
    }

    friend Mod2Matrix operator*(const Mod2Matrix& a, const Mod2Matrix& b) {
        if (a.cols != b.rows) throw std::invalid_argument("mod-2 matrix shape mismatch");
        Mod2Matrix r(a.rows, b.cols);
        for (int i = 0; i < a.rows; ++i)
            for (int k = 0; k < a.cols; ++k)
                if (a.at(i, k))
                    for (int j = 0; j < b.cols; ++j) r.at(i, j) ^= b.at(k, j);
        return r;
    }

    int rank() const {
        Mod2Matrix m = *this;
        int rank = 0;
        for (int c = 0; c < cols && rank < rows; ++c) {
            int pivot = -1;
            for (int r = rank; r < rows; ++r)
                if (m.at(r, c)) {
                    pivot = r;
                    break;
                }
            if (pivot < 0) continue;
            for (int j = 0; j < cols; ++j) std::swap(m.at(pivot, j), m.at(rank, j));
            for (int r = 0; r < rows; ++r)
                if (r != rank && m.at(r, c))
                    for (int j = 0; j < cols; ++j) m.at(r, j) ^= m.at(rank, j);
            ++rank;
        }
        return rank;
    }
};

struct MorseComplex {
    std::vector<CriticalPoint> critical_points;             // sorted by index
    std::map<int, std::vector<std::size_t>> generators;     // index -> positions in critical_points
    std::map<int, Mod2Matrix> boundary;                     // d_m : C_m -> C_{m-1}; rows C_{m-1}, cols C_m
    std::map<std::pair<std::size_t, std::size_t>, int> flow_line_counts;  // (p-, p+) -> raw count
    std::vector<std::string> warnings;
};

/// Verifies d_{m-1} d_m = 0 for all m; throws MorseError otherwise.
inline void check_boundary_squares_to_zero(const MorseComplex& c) {
    for (const auto& [m, dm] : c.boundary) {
        auto it = c.boundary.find(m - 1);
        if (it == c.boundary.end()) continue;
        if (!(it->second * dm).is_zero())
            throw MorseError("boundary does not square to zero in degree " + std::to_string(m));
    }
}

inline MorseComplex build_complex(const MorseProblem& pb, const MorseOptions& opt) {
    MorseComplex c;
    c.critical_points = find_critical_points(pb, opt.search);
    for (std::size_t i = 0; i < c.critical_points.size(); ++i) c.generators[c.critical_points[i].index].push_back(i);
    for (const auto& [m, gens] : c.generators) {
        auto lower = c.generators.find(m - 1);
        const int rows = lower == c.generators.end() ? 0 : static_cast<int>(lower->second.size());
        Mod2Matrix dm(rows, static_cast<int>(gens.size()));
        for (int col = 0; col < dm.cols; ++col) {
            for (int row = 0; row < rows; ++row) {
                const std::size_t pm = gens[col], pp = lower->second[row];
                const FlowLineCount fl = count_flow_lines(pb, c.critical_points, pm, pp, opt.search.box, opt.shooting);
                c.flow_line_counts[{pm, pp}] = fl.raw;
                dm.at(row, col) = static_cast<std::uint8_t>(fl.mod2);
                if (fl.escape_warning)
                    c.warnings.push_back("more than half of the trajectories from critical point " + std::to_string(pm) +
                                         " left the search box (possible Morse-Smale failure)");
            }
        }
        c.boundary[m] = std::move(dm);
    }
    check_boundary_squares_to_zero(c);
    return c;
}

inline MorseComplex build_complex(const MorseSpec& spec, const MorseOptions& opt) {
    return build_complex(MorseProblem(spec), opt);
}

/// rank H_m = dim C_m - rank d_m - rank d_{m+1}, for every m with generators.
inline std::map<int, int> homology_ranks(const MorseComplex& c) {
    std::map<int, int> ranks;
    for (const auto& [m, gens] : c.generators) {
        int r = static_cast<int>(gens.size());
        if (auto it = c.boundary.find(m); it != c.boundary.end()) r -= it->second.rank();
        if (auto it = c.boundary.find(m + 1); it != c.boundary.end()) r -= it->second.rank();
        ranks[m] = r;
    }
    return ranks;
}

// ---------------------------------------------------------------------------
// Adiabatic limit

struct AdiabaticSample {
    double q = 0.0;
    double deviation = 0.0;
};

/// For each q: re-solve the critical points, pick those nearest to the given
/// approximate p- and p+, compute the first flow line between them and
/// report the largest distance of the line from Z.
inline std::vector<AdiabaticSample> adiabatic_deviation(const MorseSpec& spec, const std::vector<double>& q_list,
                                                        const Eigen::VectorXd& near_minus,
                                                        const Eigen::VectorXd& near_plus, const MorseOptions& opt) {
    for (std::size_t i = 0; i < q_list.size(); ++i) {
        if (!(q_list[i] > 0.0 && q_list[i] <= 1.0)) throw std::invalid_argument("adiabatic q values must lie in (0, 1]");
        if (i > 0 && !(q_list[i] < q_list[i - 1])) throw std::invalid_argument("adiabatic q values must be decreasing");
    }
    std::vector<AdiabaticSample> out;
    for (double q : q_list) {
        const MorseProblem pb(spec.with_q(q));
        const auto crit = find_critical_points(pb, opt.search);
        auto nearest = [&](const Eigen::VectorXd& target) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < crit.size(); ++i)
                if (pb.distance(crit[i].z.coords(), target) < pb.distance(crit[best].z.coords(), target)) best = i;
            return best;
        };
        if (crit.empty()) throw MorseError("no critical points found at q=" + std::to_string(q));
        FlowLineCount fl;
        try {
            fl = count_flow_lines(pb, crit, nearest(near_minus), nearest(near_plus), opt.search.box, opt.shooting);
        } catch (const ode::FlowError& e) {
            throw ode::FlowError(std::string(e.what()) + "; stiff at q=" + std::to_string(q) +
                                     ", use a smaller shooting step",
                                 e.time());
        }
        if (fl.lines.empty()) throw MorseError("no flow line found at q=" + std::to_string(q));
        double dev = 0.0;
        for (const auto& z : fl.lines.front().path) dev = std::max(dev, pb.distance_to_constraint_set(z));
        out.push_back({q, dev});
    }
    return out;
}

// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const MorseComplex& c, const std::vector<AdiabaticSample>& adiabatic = {}) {
    nlohmann::json j;
    j["critical_points"] = nlohmann::json::array();
    for (const auto& cp : c.critical_points) {
        const Eigen::VectorXd z = cp.z.coords();
        j["critical_points"].push_back(
            {{"z", std::vector<double>(z.data(), z.data() + z.size())}, {"index", cp.index}, {"residual", cp.residual}});
    }
    j["boundary"] = nlohmann::json::object();
    for (const auto& [m, dm] : c.boundary) {
        nlohmann::json rows = nlohmann::json::array();
        for (int r = 0; r < dm.rows; ++r) {
            nlohmann::json row = nlohmann::json::array();
            for (int col = 0; col < dm.cols; ++col) row.push_back(static_cast<int>(dm.at(r, col)));
            rows.push_back(row);
        }
        j["boundary"][std::to_string(m)] = rows;
    }
    j["homology_ranks"] = nlohmann::json::object();
    for (const auto& [m, r] : homology_ranks(c)) j["homology_ranks"][std::to_string(m)] = r;
    j["adiabatic"] = nlohmann::json::array();
    for (const auto& a : adiabatic) j["adiabatic"].push_back({{"q", a.q}, {"deviation", a.deviation}});
    return j;
}

}  // namespace defham::morse
