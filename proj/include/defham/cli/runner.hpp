#pragma once

// Executes a parsed Scenario: runs the computation for its kind, evaluates
// the requested checks and produces the artifacts in memory. Writing them
// to disk (atomically) is a separate step so tests can inspect the bytes.

#include "defham/bracket.hpp"
#include "defham/cli/scenario.hpp"
#include "defham/dynamics.hpp"
#include "defham/forms.hpp"
#include "defham/morse.hpp"
#include "defham/phase.hpp"
#include "defham/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace defham::cli {

struct CheckRecord {
    std::string name;
    json measured;
    json threshold;
    std::string comparison;  // "<=", ">=", "==", ...
    bool pass = false;
    json detail;  // optional extra context, null when absent
};

struct RunResult {
    json report;
    std::vector<std::pair<std::string, std::string>> artifacts;  // (file name, bytes), report last
    std::vector<CheckRecord> checks;
    std::vector<std::string> warnings;
    std::string error;  // non-empty when the computation itself failed
    bool pass = false;
    double wall_seconds = 0.0;  // printed, never written to artifacts

    int exit_code() const { return pass ? 0 : 1; }
};

namespace detail {

inline CheckRecord at_most(std::string name, double measured, double threshold) {
    return {std::move(name), measured, threshold, "<=", measured <= threshold, nullptr};
}
inline CheckRecord at_least(std::string name, double measured, double threshold) {
    return {std::move(name), measured, threshold, ">=", measured >= threshold, nullptr};
}
inline CheckRecord same(std::string name, json measured, json expected) {
    const bool ok = measured == expected;
    return {std::move(name), std::move(measured), std::move(expected), "==", ok, nullptr};
}

inline int sign_of(double v, double tol) { return v > tol ? 1 : (v < -tol ? -1 : 0); }

/// sign(1/q - 1) for q > 0, evaluated exactly.
inline int regime_sign(const Rational& q) { return q < 1 ? 1 : (q == 1 ? 0 : -1); }

inline std::string sign_text(int s) { return s > 0 ? "+" : (s < 0 ? "-" : "0"); }

/// Runs `body(i)` for i in [0, count) on up to `threads` workers. The body
/// must not throw.
template <class Body>
void parallel_for(std::size_t count, int threads, Body&& body) {
    const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, threads)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) body(i);
        });
}

struct RegimeStats {
    long considered = 0;  // samples with sum H_x H_y > 0
    long mismatches = 0;
};

/// Compares sign(dH/dt) with sign(1/q - 1) at every sample where
/// sum_i H_xi H_yi > 0. dH/dt is evaluated from the field, not from the
/// closed form, so the comparison is a genuine test.
inline RegimeStats regime_stats(const dynamics::Trajectory& traj, const expr::Expression& h, const QValue& q) {
    const dynamics::DeformedField field(h, q.value);
    const int expected = regime_sign(q.exact);
    const int n = traj.n;
    RegimeStats st;
    for (const auto& s : traj.samples) {
        const Eigen::VectorXd z = s.z.coords();
        const Eigen::VectorXd g = field.hamiltonian().gradient(z);
        double sum = 0.0, scale = 0.0;
        for (int i = 0; i < n; ++i) {
            sum += g[i] * g[n + i];
            scale += std::abs(g[i] * g[n + i]);
        }
        if (!(sum > 0.0)) continue;
        ++st.considered;
        const double tol = 64 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(1.0 / q.value)) * scale;
        if (sign_of(dynamics::energy_rate(field, z), tol) != expected) ++st.mismatches;
    }
    return st;
}

inline CheckRecord regime_record(const std::string& name, const RegimeStats& st) {
    CheckRecord r{name, st.mismatches, 0, "==", st.considered > 0 && st.mismatches == 0,
                  {{"samples_considered", st.considered}}};
    if (st.considered == 0) r.detail["note"] = "no sample had sum H_x H_y > 0";
    return r;
}

inline double energy_drift(const dynamics::Trajectory& traj) {
    double drift = 0.0;
    const double h0 = traj.samples.front().h_value;
    for (const auto& s : traj.samples) drift = std::max(drift, std::abs(s.h_value - h0));
    return drift;
}

inline double rate_value(const std::string& text, double q) {
    if (text == "1/q") return 1.0 / q;
    if (text == "-1/q") return -1.0 / q;
    return to_double(parse_rational(text));
}

inline json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

// ---------------------------------------------------------------------------
// simulate / verify-flow

inline void run_flow(const QValue& q, const FlowSetup& flow, const std::vector<Check>& checks, int n,
                     std::uint64_t seed, RunResult& out, const Outputs& names) {
    bool need_jacobian = false;
    for (const auto& c : checks)
        need_jacobian = need_jacobian || std::holds_alternative<SymplecticCheck>(c) ||
                        std::holds_alternative<ConformalCheck>(c) || std::holds_alternative<LinearJacobianCheck>(c);
    const dynamics::FlowSpec spec = flow.spec(q.value);
    dynamics::VariationalFlow vf;
    if (need_jacobian)
        vf = dynamics::integrate_variational(spec, flow.start());
    else
        vf.trajectory = dynamics::integrate(spec, flow.start());
    const auto& traj = vf.trajectory;
    out.artifacts.emplace_back(names.trajectory, dynamics::to_csv(traj));

    random::Generator rng(seed);
    for (const auto& check : checks) {
        if (auto* c = std::get_if<EnergyDriftCheck>(&check)) {
            out.checks.push_back(at_most("energy_drift", energy_drift(traj), c->max));
        } else if (std::holds_alternative<RegimeCheck>(check)) {
            out.checks.push_back(regime_record("regime", regime_stats(traj, flow.hamiltonian, q)));
        } else if (auto* c = std::get_if<SymplecticCheck>(&check)) {
            out.checks.push_back(
                at_most("symplectic_defect", dynamics::max_defect(dynamics::pullback_defect(vf, dynamics::Symplectic{})),
                        c->max));
        } else if (auto* c = std::get_if<ConformalCheck>(&check)) {
            const double rate = dynamics::conformal_rate(q.value, to_double(c->c_prime));
            auto rec = at_most("conformal_defect",
                               dynamics::max_defect(dynamics::pullback_defect(vf, dynamics::Conformal{rate})), c->max);
            rec.detail = {{"rate", rate}};
            out.checks.push_back(rec);
        } else if (auto* c = std::get_if<DissipationCheck>(&check)) {
            std::vector<double> steps = c->steps;
            std::sort(steps.begin(), steps.end(), std::greater<>());
            json per_step = json::array();
            std::vector<double> defects;
            for (double h : steps) {
                dynamics::FlowSpec s = spec;
                s.integrator = ode::Rk4{h};
                s.t_final = c->time;
                s.sample_stride = std::numeric_limits<int>::max();
                const auto v = dynamics::integrate_variational(s, flow.start());
                const double d = dynamics::pullback_defect(v, dynamics::Symplectic{}).back().defect;
                defects.push_back(d);
                per_step.push_back({{"step", h}, {"defect", d}});
            }
            auto lo = at_least("dissipation_min_defect", *std::min_element(defects.begin(), defects.end()), c->min);
            lo.detail = {{"time", c->time}, {"defects", per_step}};
            out.checks.push_back(lo);
            const double last = defects.back(), prev = defects[defects.size() - 2];
            out.checks.push_back(at_most("dissipation_convergence", std::abs(last - prev) / std::abs(last), c->max_spread));
        } else if (auto* c = std::get_if<LinearJacobianCheck>(&check)) {
            Eigen::VectorXd rates(2 * n);
            for (int i = 0; i < 2 * n; ++i) rates[i] = rate_value(c->rates[static_cast<std::size_t>(i)], q.value);
            double worst = 0.0;
            for (std::size_t i = 0; i < vf.jacobians.size(); ++i) {
                const double t = traj.samples[i].t;
                const Eigen::MatrixXd expected = (rates * t).array().exp().matrix().asDiagonal();
                worst = std::max(worst, (vf.jacobians[i] - expected).cwiseAbs().maxCoeff());
            }
            auto rec = at_most("linear_jacobian", worst, c->max);
            rec.detail = {{"rates", vector_json(rates)}};
            out.checks.push_back(rec);
        } else if (auto* c = std::get_if<EnergyIdentityCheck>(&check)) {
            random::PolyShape shape;
            shape.max_degree = c->degree;
            double worst = 0.0;
            for (int s = 0; s < c->samples; ++s) {
                const auto& qs = c->q_values[static_cast<std::size_t>(
                    rng.integer(0, static_cast<std::int64_t>(c->q_values.size()) - 1))];
                const auto h = random::random_polynomial_expression(rng, n, shape);
                const Eigen::VectorXd z = rng.vector(2 * n, -c->box, c->box);
                worst = std::max(worst, dynamics::energy_derivative_defect(h, qs.value, phase::PhasePoint::from_coords(z)));
            }
            auto rec = at_most("energy_identity", worst, c->max);
            rec.detail = {{"samples", c->samples}};
            out.checks.push_back(rec);
        }
    }
}

// ---------------------------------------------------------------------------
// classify

inline std::string rational_json_text(const std::optional<Rational>& r) { return r ? to_string(*r) : "none"; }

inline void run_classify(const ClassifyScenario& sc, int n, std::uint64_t seed, RunResult& out,
                         const Outputs& names) {
    json data;
    data["hamiltonians"] = json::array();
    for (std::size_t i = 0; i < sc.hamiltonians.size(); ++i) {
        const auto& item = sc.hamiltonians[i];
        const forms::Classification c = forms::classify_hamiltonian(item.poly);
        json entry = {{"text", item.text},
                      {"simple", c.simple},
                      {"exceptionally_simple", c.exceptionally_simple},
                      {"conformal_ratio", c.conformal_ratio ? json(to_string(*c.conformal_ratio)) : json(nullptr)}};
        data["hamiltonians"].push_back(entry);
        const std::string base = "classify[" + std::to_string(i) + "]";
        if (item.simple) out.checks.push_back(same(base + ".simple", c.simple, *item.simple));
        if (item.exceptionally_simple)
            out.checks.push_back(same(base + ".exceptionally_simple", c.exceptionally_simple, *item.exceptionally_simple));
        if (item.expect_ratio)
            out.checks.push_back(
                same(base + ".conformal_ratio", rational_json_text(c.conformal_ratio), rational_json_text(item.conformal_ratio)));
    }

    random::Generator rng(seed);
    for (const auto& check : sc.checks) {
        if (auto* c = std::get_if<NilpotencyCheck>(&check)) {
            long nonzero = 0, tested = 0;
            for (const auto& q : c->q_values)
                for (int degree : c->degrees)
                    for (int k = 0; k < c->forms; ++k) {
                        const auto form = random::random_form(rng, n, degree);
                        const auto dd = forms::deformed_derivative(forms::deformed_derivative(form, q.exact), q.exact);
                        ++tested;
                        if (!dd.is_zero()) ++nonzero;
                    }
            CheckRecord r = same("nilpotency", nonzero, 0);
            r.detail = {{"forms_tested", tested}};
            out.checks.push_back(r);
            data["nilpotency"] = {{"forms_tested", tested}, {"nonzero", nonzero}};
        } else if (auto* c = std::get_if<SymbolicAdmissibilityCheck>(&check)) {
            long nonzero = 0, tested = 0;
            for (int k = 0; k < c->pairs; ++k) {
                const auto h = random::random_poly(rng, n), f = random::random_poly(rng, n);
                const auto plain = forms::symbolic_bracket(h, f, 1);
                for (const auto& q : c->q_values) {
                    const auto defect = forms::symbolic_bracket(h, f, q.exact) - forms::symbolic_bracket(f, h, q.exact) -
                                        plain * (1 + 1 / q.exact);
                    ++tested;
                    if (!defect.is_zero()) ++nonzero;
                }
            }
            CheckRecord r = same("symbolic_admissibility", nonzero, 0);
            r.detail = {{"pairs_tested", tested}};
            out.checks.push_back(r);
            data["symbolic_admissibility"] = {{"pairs_tested", tested}, {"nonzero", nonzero}};
        } else if (auto* c = std::get_if<SymbolicJacobiCheck>(&check)) {
            long nonzero = 0, tested = 0;
            for (int k = 0; k < c->triples; ++k) {
                const auto a = random::random_poly(rng, n), b = random::random_poly(rng, n),
                           g = random::random_poly(rng, n);
                for (const auto& q : c->q_values) {
                    auto comm = [&](const forms::Poly& u, const forms::Poly& v) {
                        return forms::symbolic_bracket(u, v, q.exact) - forms::symbolic_bracket(v, u, q.exact);
                    };
                    const auto cyclic = comm(comm(a, b), g) + comm(comm(b, g), a) + comm(comm(g, a), b);
                    ++tested;
                    if (!cyclic.is_zero()) ++nonzero;
                }
            }
            CheckRecord r = same("symbolic_jacobi", nonzero, 0);
            r.detail = {{"triples_tested", tested}};
            out.checks.push_back(r);
            data["symbolic_jacobi"] = {{"triples_tested", tested}, {"nonzero", nonzero}};
        }
    }
    out.artifacts.emplace_back(names.data, data.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// bracket

inline void run_bracket(const BracketScenario& sc, int n, std::uint64_t seed, RunResult& out, const Outputs& names) {
    random::Generator rng(seed);
    random::PolyShape shape;
    shape.max_degree = sc.degree;
    struct Pair {
        forms::Poly h, f;
        expr::Expression he, fe;
        std::vector<phase::PhasePoint> points;
    };
    std::vector<Pair> pairs;
    for (int k = 0; k < sc.pairs; ++k) {
        Pair p{random::random_poly(rng, n, shape), random::random_poly(rng, n, shape), {}, {}, {}};
        p.he = p.h.to_expression();
        p.fe = p.f.to_expression();
        for (int s = 0; s < sc.points; ++s)
            p.points.push_back(phase::PhasePoint::from_coords(rng.vector(2 * n, -sc.box, sc.box)));
        pairs.push_back(std::move(p));
    }
    struct Triple {
        expr::Expression a, b, c;
        phase::PhasePoint z;
    };
    std::vector<Triple> triples;
    for (int k = 0; k < sc.triples; ++k) {
        Triple t{random::random_polynomial_expression(rng, n, shape), random::random_polynomial_expression(rng, n, shape),
                 random::random_polynomial_expression(rng, n, shape), {}};
        t.z = phase::PhasePoint::from_coords(rng.vector(2 * n, -sc.box, sc.box));
        triples.push_back(std::move(t));
    }

    json data = {{"pairs", sc.pairs}, {"points_per_pair", sc.points}, {"triples", sc.triples}};
    data["reports"] = json::array();
    for (const auto& q : sc.q_values) {
        bracket::BracketReport rep;
        rep.q = q.value;
        long symbolic_nonzero = 0;
        for (const auto& p : pairs) {
            for (const auto& z : p.points) {
                rep.max_admissibility_defect =
                    std::max(rep.max_admissibility_defect, bracket::admissibility_defect(p.he, p.fe, q.value, z));
                ++rep.sample_count;
            }
            if (sc.symbolic) {
                const auto defect = forms::symbolic_bracket(p.h, p.f, q.exact) - forms::symbolic_bracket(p.f, p.h, q.exact) -
                                    forms::symbolic_bracket(p.h, p.f, 1) * (1 + 1 / q.exact);
                if (!defect.is_zero()) ++symbolic_nonzero;
            }
        }
        for (const auto& t : triples)
            rep.max_jacobi_defect = std::max(rep.max_jacobi_defect, bracket::jacobi_defect(t.a, t.b, t.c, q.value, t.z));

        json entry = bracket::to_json(rep);
        entry["q_text"] = q.text;
        if (sc.symbolic) entry["symbolic_nonzero"] = symbolic_nonzero;
        data["reports"].push_back(entry);

        const std::string suffix = "[q=" + q.text + "]";
        out.checks.push_back(at_most("admissibility" + suffix, rep.max_admissibility_defect, sc.max_admissibility));
        if (sc.triples > 0) out.checks.push_back(at_most("jacobi" + suffix, rep.max_jacobi_defect, sc.max_jacobi));
        if (sc.symbolic) out.checks.push_back(same("symbolic_admissibility" + suffix, symbolic_nonzero, 0));
    }
    out.artifacts.emplace_back(names.data, data.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// morse

struct MorseRun {
    double q = 0.0;
    morse::MorseComplex complex;
    std::map<int, int> ranks;
    std::vector<morse::IndexCertificate> certificates;
    std::string error;
};

inline MorseRun run_morse_once(const MorseSetup& setup, double q) {
    MorseRun r;
    r.q = q;
    try {
        const morse::MorseProblem pb(setup.spec.with_q(q));
        r.complex = morse::build_complex(pb, setup.options);
        r.ranks = morse::homology_ranks(r.complex);
        for (const auto& cp : r.complex.critical_points)
            r.certificates.push_back(morse::critical_index(pb, cp, setup.options.search.degeneracy_tol));
    } catch (const std::exception& e) {
        r.error = e.what();
    }
    return r;
}

inline json ranks_json(const std::map<int, int>& ranks) {
    json j = json::object();
    for (const auto& [m, r] : ranks) j[std::to_string(m)] = r;
    return j;
}

inline void adiabatic_checks(const std::vector<morse::AdiabaticSample>& samples, const AdiabaticSetup& a,
                             RunResult& out) {
    if (samples.empty()) return;
    if (a.strictly_decreasing) {
        long violations = 0;
        for (std::size_t i = 1; i < samples.size(); ++i)
            if (!(samples[i].deviation < samples[i - 1].deviation)) ++violations;
        out.checks.push_back(same("adiabatic_strictly_decreasing", violations, 0));
    }
    if (a.min_ratio) {
        const double ratio = samples.front().deviation / samples.back().deviation;
        out.checks.push_back(at_least("adiabatic_decrease_factor", ratio, *a.min_ratio));
    }
    if (a.max_deviation) {
        double worst = 0.0;
        for (const auto& s : samples) worst = std::max(worst, s.deviation);
        out.checks.push_back(at_most("adiabatic_max_deviation", worst, *a.max_deviation));
    }
}

inline void run_morse(const MorseScenario& sc, int threads, RunResult& out, const Outputs& names) {
    std::vector<MorseRun> runs(sc.q_values.size());
    parallel_for(runs.size(), threads, [&](std::size_t i) { runs[i] = run_morse_once(sc.setup, sc.q_values[i]); });

    for (const auto& r : runs)
        if (!r.error.empty()) throw std::runtime_error(r.error + " (q=" + dynamics::format_double(r.q) + ")");

    const MorseRun& primary = runs.front();
    const auto& cps = primary.complex.critical_points;
    for (const auto& r : runs)
        for (const auto& w : r.complex.warnings) {
            const std::string msg = "q=" + dynamics::format_double(r.q) + ": " + w;
            if (std::find(out.warnings.begin(), out.warnings.end(), msg) == out.warnings.end()) out.warnings.push_back(msg);
        }

    std::vector<morse::AdiabaticSample> adiabatic;
    if (sc.adiabatic)
        adiabatic = morse::adiabatic_deviation(sc.setup.spec, sc.adiabatic->q_list, sc.adiabatic->minus,
                                               sc.adiabatic->plus, sc.setup.options);

    // Invariants checked on every run regardless of expectations.
    double worst_residual = 0.0;
    for (const auto& r : runs)
        for (const auto& cp : r.complex.critical_points) worst_residual = std::max(worst_residual, cp.residual);
    out.checks.push_back(at_most("critical_point_residual", worst_residual, sc.setup.options.search.residual_tol));
    {
        long failures = 0;
        for (const auto& r : runs)
            for (const auto& [m, dm] : r.complex.boundary)
                if (auto it = r.complex.boundary.find(m - 1); it != r.complex.boundary.end() && !(it->second * dm).is_zero())
                    ++failures;
        out.checks.push_back(same("boundary_squares_to_zero", failures, 0));
    }

    if (sc.expect) {
        const MorseExpect& e = *sc.expect;
        if (!e.critical_points.empty()) {
            out.checks.push_back(same("critical_point_count", cps.size(), e.critical_points.size()));
            const morse::MorseProblem pb(sc.setup.spec.with_q(primary.q));
            double worst = 0.0;
            for (const auto& target : e.critical_points) {
                double best = std::numeric_limits<double>::infinity();
                for (const auto& cp : cps) best = std::min(best, pb.distance(cp.z.coords(), target));
                worst = std::max(worst, best);
            }
            out.checks.push_back(at_most("critical_point_location", worst, e.tolerance));
        }
        if (!e.indices.empty()) {
            std::vector<int> got, want = e.indices;
            for (const auto& cp : cps) got.push_back(cp.index);
            std::sort(got.begin(), got.end());
            std::sort(want.begin(), want.end());
            out.checks.push_back(same("indices", got, want));
        }
        if (e.certificates) {
            long inconsistent = 0;
            for (const auto& r : runs)
                for (const auto& c : r.certificates) inconsistent += c.consistent ? 0 : 1;
            out.checks.push_back(same("index_certificates", inconsistent, 0));
        }
        for (const auto& fl : e.flow_lines) {
            const std::string name = "flow_lines[" + std::to_string(fl.minus) + "->" + std::to_string(fl.plus) + "]";
            auto it = primary.complex.flow_line_counts.find({fl.minus, fl.plus});
            if (it == primary.complex.flow_line_counts.end()) {
                out.checks.push_back({name, nullptr, fl.raw, "==", false, {{"note", "pair not counted (index gap is not 1)"}}});
                continue;
            }
            out.checks.push_back(same(name, it->second, fl.raw));
        }
        if (!e.homology_ranks.empty())
            for (const auto& r : runs)
                out.checks.push_back(same("homology_ranks[q=" + dynamics::format_double(r.q) + "]", ranks_json(r.ranks),
                                           ranks_json(e.homology_ranks)));
        if (e.ranks_q_independent && runs.size() > 1) {
            long differing = 0;
            for (const auto& r : runs) differing += r.ranks == primary.ranks ? 0 : 1;
            out.checks.push_back(same("ranks_q_independent", differing, 0));
        }
    }
    if (sc.adiabatic) adiabatic_checks(adiabatic, *sc.adiabatic, out);

    json data = morse::to_json(primary.complex, adiabatic);
    data["q"] = primary.q;
    data["certificates"] = json::array();
    for (const auto& c : primary.certificates)
        data["certificates"].push_back(
            {{"index", c.index}, {"base_index", c.base_index}, {"fibre_index", c.fibre_index}, {"k", c.k}});
    data["flow_line_counts"] = json::array();
    for (const auto& [pair, raw] : primary.complex.flow_line_counts)
        data["flow_line_counts"].push_back({{"minus", pair.first}, {"plus", pair.second}, {"raw", raw}});
    data["ranks_by_q"] = json::array();
    for (const auto& r : runs) data["ranks_by_q"].push_back({{"q", r.q}, {"homology_ranks", ranks_json(r.ranks)}});
    out.artifacts.emplace_back(names.data, data.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// sweep

struct SweepRow {
    QValue q;
    std::map<std::string, std::string> cells;
    std::vector<std::string> errors;
    std::optional<double> delta_h;
    std::optional<double> fibre_ratio;
    std::optional<RegimeStats> regime;
    std::optional<double> drift;
};

inline SweepRow sweep_row(const SweepScenario& sc, const QValue& q, int n, double zero_tol) {
    SweepRow row;
    row.q = q;
    auto wants = [&](const char* name) {
        return std::find(sc.observables.begin(), sc.observables.end(), name) != sc.observables.end();
    };
    auto fail = [&](const std::string& what, const std::exception& e) { row.errors.push_back(what + ": " + e.what()); };

    if (sc.flow) {
        try {
            const dynamics::FlowSpec spec = sc.flow->spec(q.value);
            dynamics::VariationalFlow vf;
            if (wants("pullback_defect"))
                vf = dynamics::integrate_variational(spec, sc.flow->start());
            else
                vf.trajectory = dynamics::integrate(spec, sc.flow->start());
            const auto& traj = vf.trajectory;
            const double h0 = traj.samples.front().h_value, h1 = traj.samples.back().h_value;
            row.delta_h = h1 - h0;
            row.drift = energy_drift(traj);
            row.cells["final_H"] = dynamics::format_double(h1);
            row.cells["delta_H"] = dynamics::format_double(h1 - h0);
            row.cells["delta_H_sign"] = sign_text(sign_of(h1 - h0, zero_tol));
            if (wants("pullback_defect"))
                row.cells["pullback_defect"] =
                    dynamics::format_double(dynamics::max_defect(dynamics::pullback_defect(vf, dynamics::Symplectic{})));
            row.regime = regime_stats(traj, sc.flow->hamiltonian, q);
        } catch (const std::exception& e) {
            fail("flow", e);
        }
    }
    if (wants("fibre_volume_ratio")) {
        try {
            row.fibre_ratio = phase::fibre_volume_ratio(phase::MetricFamily(n, q.value));
            row.cells["fibre_volume_ratio"] = dynamics::format_double(*row.fibre_ratio);
        } catch (const std::exception& e) {
            fail("fibre_volume_ratio", e);
        }
    }
    if (wants("adiabatic_deviation")) {
        try {
            const auto s = morse::adiabatic_deviation(sc.morse->spec, {q.value}, sc.adiabatic->minus, sc.adiabatic->plus,
                                                      sc.morse->options);
            row.cells["adiabatic_deviation"] = dynamics::format_double(s.front().deviation);
        } catch (const std::exception& e) {
            fail("adiabatic_deviation", e);
        }
    }
    return row;
}

inline std::string csv_cell(std::string s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

inline void run_sweep(const SweepScenario& sc, int n, int threads, RunResult& out, const Outputs& names) {
    double zero_tol = 1e-10;
    for (const auto& c : sc.checks)
        if (auto* r = std::get_if<RegimeSignCheck>(&c)) zero_tol = r->zero_tolerance;

    std::vector<SweepRow> rows(sc.q_list.size());
    parallel_for(rows.size(), threads, [&](std::size_t i) { rows[i] = sweep_row(sc, sc.q_list[i], n, zero_tol); });
    std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) { return a.q.exact < b.q.exact; });

    std::string csv = "q";
    for (const auto& o : sc.observables) csv += "," + o;
    csv += ",error\n";
    for (const auto& r : rows) {
        csv += dynamics::format_double(r.q.value);
        for (const auto& o : sc.observables) {
            auto it = r.cells.find(o);
            csv += "," + (it == r.cells.end() ? std::string() : it->second);
        }
        std::string err;
        for (const auto& e : r.errors) err += (err.empty() ? "" : "; ") + e;
        csv += "," + csv_cell(err) + "\n";
        if (!err.empty()) out.warnings.push_back("q=" + r.q.text + ": " + err);
    }
    out.artifacts.emplace_back(names.data, csv);

    for (const auto& check : sc.checks) {
        if (std::holds_alternative<RegimeSignCheck>(check)) {
            long mismatches = 0;
            json detail = json::array();
            for (const auto& r : rows) {
                const int expected = r.q.value > 0 ? regime_sign(r.q.exact) : 2;  // no regime for q < 0
                const int got = r.delta_h ? sign_of(*r.delta_h, zero_tol) : 3;
                if (got != expected) ++mismatches;
                detail.push_back({{"q", r.q.text},
                                  {"expected", expected == 2 ? "n/a" : sign_text(expected)},
                                  {"observed", got == 3 ? "error" : sign_text(got)}});
            }
            CheckRecord rec = same("regime_sign", mismatches, 0);
            rec.detail = detail;
            out.checks.push_back(rec);
        } else if (std::holds_alternative<RegimeCheck>(check)) {
            for (const auto& r : rows)
                out.checks.push_back(regime_record("regime[q=" + r.q.text + "]", r.regime.value_or(RegimeStats{})));
        } else if (auto* c = std::get_if<EnergyDriftCheck>(&check)) {
            for (const auto& r : rows)
                if (r.q.exact == c->q->exact) {
                    CheckRecord rec = at_most("energy_drift[q=" + r.q.text + "]",
                                              r.drift.value_or(std::numeric_limits<double>::infinity()), c->max);
                    if (!r.drift) rec.measured = nullptr;
                    out.checks.push_back(rec);
                }
        } else if (auto* c = std::get_if<FibreVolumeCheck>(&check)) {
            double worst = 0.0;
            bool complete = true;
            for (const auto& r : rows) {
                if (!r.fibre_ratio) {
                    complete = false;
                    continue;
                }
                worst = std::max(worst, std::abs(*r.fibre_ratio - std::pow(r.q.value, n / 2.0)));
            }
            CheckRecord rec = at_most("fibre_volume_ratio", worst, c->max);
            if (!complete) {
                rec.pass = false;
                rec.detail = {{"note", "some rows failed"}};
            }
            out.checks.push_back(rec);
        } else if (auto* c = std::get_if<SignatureCheck>(&check)) {
            const auto sig = phase::signature(phase::MetricFamily(n, c->q.value));
            out.checks.push_back(same("signature[q=" + c->q.text + "]", json::array({sig.positive, sig.negative}),
                                       json::array({c->positive, c->negative})));
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// Runs a scenario. Computation errors are reported in the result (exit 1)
/// unless the scenario expects them; ScenarioError propagates (exit 2).
inline RunResult run(const Scenario& sc, int threads = 1) {
    RunResult out;
    const auto start = std::chrono::steady_clock::now();
    try {
        std::visit(
            [&](const auto& body) {
                using T = std::decay_t<decltype(body)>;
                if constexpr (std::is_same_v<T, SimulateScenario> || std::is_same_v<T, VerifyFlowScenario>)
                    detail::run_flow(body.q, body.flow, body.checks, sc.n, sc.seed, out, sc.outputs);
                else if constexpr (std::is_same_v<T, ClassifyScenario>)
                    detail::run_classify(body, sc.n, sc.seed, out, sc.outputs);
                else if constexpr (std::is_same_v<T, BracketScenario>)
                    detail::run_bracket(body, sc.n, sc.seed, out, sc.outputs);
                else if constexpr (std::is_same_v<T, MorseScenario>)
                    detail::run_morse(body, threads, out, sc.outputs);
                else
                    detail::run_sweep(body, sc.n, threads, out, sc.outputs);
            },
            sc.body);
    } catch (const ScenarioError&) {
        throw;
    } catch (const std::exception& e) {
        out.error = e.what();
        out.artifacts.clear();
        out.checks.clear();
    }

    if (sc.expect_error) {
        const bool matched = !out.error.empty() && out.error.find(*sc.expect_error) != std::string::npos;
        out.checks.push_back({"expected_error", out.error.empty() ? json(nullptr) : json(out.error), *sc.expect_error,
                              "contains", matched, nullptr});
        if (matched) out.error.clear();
    }
    out.pass = out.error.empty() && std::all_of(out.checks.begin(), out.checks.end(),
                                                [](const CheckRecord& c) { return c.pass; });

    json report;
    report["name"] = sc.name;
    report["kind"] = sc.kind;
    report["scenario"] = sc.source;
    report["checks"] = json::array();
    for (const auto& c : out.checks) {
        json r = {{"name", c.name},
                  {"measured", c.measured},
                  {"threshold", c.threshold},
                  {"comparison", c.comparison},
                  {"pass", c.pass}};
        if (!c.detail.is_null()) r["detail"] = c.detail;
        report["checks"].push_back(r);
    }
    report["warnings"] = out.warnings;
    json files = json::array();
    for (const auto& a : out.artifacts) files.push_back(a.first);
    report["artifacts"] = files;
    if (!out.error.empty()) report["error"] = out.error;
    report["pass"] = out.pass;
    out.report = report;
    out.artifacts.emplace_back(sc.outputs.report, report.dump(2) + "\n");
    out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

// ---------------------------------------------------------------------------
// File-level entry points used by the executable.

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ScenarioError("", "cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ScenarioError("", std::string("invalid JSON: ") + e.what());
    }
}

inline Scenario load_scenario(const std::filesystem::path& path) { return parse_scenario(read_json_file(path)); }

/// Writes `bytes` to dir/name via a temporary file and rename.
inline void write_atomic(const std::filesystem::path& dir, const std::string& name, const std::string& bytes) {
    const auto target = dir / name;
    const auto tmp = dir / ("." + name + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, target);
}

inline void write_artifacts(const RunResult& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& [name, bytes] : r.artifacts) write_atomic(dir, name, bytes);
}

inline void print_summary(const Scenario& sc, const RunResult& r, std::ostream& os) {
    os << (sc.name.empty() ? sc.kind : sc.name) << "\n";
    for (const auto& c : r.checks)
        os << "  " << (c.pass ? "PASS" : "FAIL") << "  " << c.name << "  measured=" << c.measured.dump()
           << " " << c.comparison << " " << c.threshold.dump() << "\n";
    for (const auto& w : r.warnings) os << "  warning: " << w << "\n";
    if (!r.error.empty()) os << "  error: " << r.error << "\n";
    std::ostringstream wall;
    wall.precision(3);
    wall << std::fixed << r.wall_seconds;
    os << (r.pass ? "PASS" : "FAIL") << " (" << wall.str() << " s)\n";
}

/// `defham run`: returns the process exit code.
inline int run_command(const std::filesystem::path& scenario, const std::filesystem::path& out_dir, int threads,
                       std::ostream& os, std::ostream& err) {
    Scenario sc;
    try {
        sc = load_scenario(scenario);
    } catch (const ScenarioError& e) {
        err << "invalid scenario: " << e.what() << "\n";
        return 2;
    }
    RunResult r;
    try {
        r = run(sc, threads);
    } catch (const ScenarioError& e) {
        err << "invalid scenario: " << e.what() << "\n";
        return 2;
    }
    try {
        write_artifacts(r, out_dir);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    print_summary(sc, r, os);
    return r.exit_code();
}

/// `defham validate`: exit 0 when the scenario is well-formed, 2 otherwise.
inline int validate_command(const std::filesystem::path& scenario, std::ostream& os, std::ostream& err) {
    try {
        const Scenario sc = load_scenario(scenario);
        os << "valid " << sc.kind << " scenario" << (sc.name.empty() ? "" : ": " + sc.name) << "\n";
        return 0;
    } catch (const ScenarioError& e) {
        err << "invalid scenario: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace defham::cli
