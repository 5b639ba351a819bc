#pragma once

// Explicit Runge-Kutta steppers over Eigen vectors.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <variant>

namespace defham::ode {

/// Raised when integration cannot continue (step-size underflow or a
/// non-finite state). `time()` is where it happened.
class FlowError : public std::runtime_error {
public:
    FlowError(const std::string& what, double t) : std::runtime_error(what + " at t=" + fmt(t)), t_(t) {}
    double time() const noexcept { return t_; }

private:
    static std::string fmt(double t) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", t);
        return buf;
    }
    double t_;
};

struct Rk4 {
    double step = 1e-3;
};

struct Rkf45 {
    double rel_tol = 1e-10;
    double abs_tol = 1e-12;
    double initial_step = 1e-3;
    double max_step = 0.1;
};

using Integrator = std::variant<Rk4, Rkf45>;

inline void validate(const Integrator& integ) {
    if (auto* r = std::get_if<Rk4>(&integ)) {
        if (!(r->step > 0.0)) throw std::invalid_argument("rk4 step must be > 0");
    } else {
        const auto& a = std::get<Rkf45>(integ);
        if (!(a.rel_tol > 0.0) || !(a.abs_tol > 0.0)) throw std::invalid_argument("rkf45 tolerances must be > 0");
        if (!(a.initial_step > 0.0) || !(a.max_step > 0.0)) throw std::invalid_argument("rkf45 step bounds must be > 0");
    }
}

template <class Rhs>
Eigen::VectorXd rk4_step(const Rhs& f, double t, const Eigen::VectorXd& y, double h) {
    const Eigen::VectorXd k1 = f(t, y);
    const Eigen::VectorXd k2 = f(t + 0.5 * h, y + 0.5 * h * k1);
    const Eigen::VectorXd k3 = f(t + 0.5 * h, y + 0.5 * h * k2);
    const Eigen::VectorXd k4 = f(t + h, y + h * k3);
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// One Runge-Kutta-Fehlberg 4(5) step. Returns the 5th-order solution and
/// writes the scaled error norm (<= 1 means acceptable) to `err`.
template <class Rhs>
Eigen::VectorXd rkf45_step(const Rhs& f, double t, const Eigen::VectorXd& y, double h, double rtol, double atol,
                           double& err) {
    const Eigen::VectorXd k1 = f(t, y);
    const Eigen::VectorXd k2 = f(t + h / 4.0, y + h * (k1 / 4.0));
    const Eigen::VectorXd k3 = f(t + 3.0 * h / 8.0, y + h * (3.0 / 32.0 * k1 + 9.0 / 32.0 * k2));
    const Eigen::VectorXd k4 =
        f(t + 12.0 * h / 13.0, y + h * (1932.0 / 2197.0 * k1 - 7200.0 / 2197.0 * k2 + 7296.0 / 2197.0 * k3));
    const Eigen::VectorXd k5 =
        f(t + h, y + h * (439.0 / 216.0 * k1 - 8.0 * k2 + 3680.0 / 513.0 * k3 - 845.0 / 4104.0 * k4));
    const Eigen::VectorXd k6 = f(t + h / 2.0, y + h * (-8.0 / 27.0 * k1 + 2.0 * k2 - 3544.0 / 2565.0 * k3 +
                                                       1859.0 / 4104.0 * k4 - 11.0 / 40.0 * k5));
    const Eigen::VectorXd y5 =
        y + h * (16.0 / 135.0 * k1 + 6656.0 / 12825.0 * k3 + 28561.0 / 56430.0 * k4 - 9.0 / 50.0 * k5 + 2.0 / 55.0 * k6);
    const Eigen::VectorXd diff =
        h * (1.0 / 360.0 * k1 - 128.0 / 4275.0 * k3 - 2197.0 / 75240.0 * k4 + 1.0 / 50.0 * k5 + 2.0 / 55.0 * k6);
    double e = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double scale = atol + rtol * std::max(std::abs(y[i]), std::abs(y5[i]));
        e = std::max(e, std::abs(diff[i]) / scale);
    }
    err = std::isfinite(e) ? e : std::numeric_limits<double>::infinity();
    return y5;
}

/// Integrates y' = f(t, y) from t = 0 to t_final. `on_step(index, t, y, last)`
/// is called for the initial state (index 0) and after every accepted step;
/// the call with `last` set has t == t_final exactly.
template <class Rhs, class OnStep>
void integrate(const Rhs& f, Eigen::VectorXd y, const Integrator& integ, double t_final, OnStep&& on_step) {
    validate(integ);
    if (!(t_final > 0.0)) throw std::invalid_argument("t_final must be > 0");
    double t = 0.0;
    long step = 0;
    on_step(step, t, y, false);
    auto check = [&](const Eigen::VectorXd& v, double at) {
        if (!v.allFinite()) throw FlowError("non-finite state (blow-up)", at);
    };
    if (auto* r = std::get_if<Rk4>(&integ)) {
        const long n_steps = static_cast<long>(std::ceil(t_final / r->step - 1e-9));
        for (long k = 1; k <= n_steps; ++k) {
            const double t_next = k == n_steps ? t_final : static_cast<double>(k) * r->step;
            y = rk4_step(f, t, y, t_next - t);
            check(y, t_next);
            t = t_next;
            on_step(k, t, y, k == n_steps);
        }
        return;
    }
    const auto& a = std::get<Rkf45>(integ);
    double h = std::min({a.initial_step, a.max_step, t_final});
    while (t < t_final) {
        const bool last = t + h >= t_final;
        const double h_try = last ? t_final - t : h;
        double err = 0.0;
        Eigen::VectorXd y_new = rkf45_step(f, t, y, h_try, a.rel_tol, a.abs_tol, err);
        if (err <= 1.0 && y_new.allFinite()) {
            t = last ? t_final : t + h_try;
            y = std::move(y_new);
            on_step(++step, t, y, last);
            const double grow = err == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err, -0.2), 0.2, 5.0);
            h = std::min(h_try * grow, a.max_step);
        } else {
            const double shrink = std::isfinite(err) ? std::clamp(0.9 * std::pow(err, -0.25), 0.1, 0.5) : 0.1;
            h = h_try * shrink;
            if (h < 1e-14 * std::max(1.0, std::abs(t))) throw FlowError("step-size underflow", t);
        }
    }
}

}  // namespace defham::ode
