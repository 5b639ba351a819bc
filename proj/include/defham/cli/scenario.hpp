#pragma once

// Scenario files: JSON documents describing one run of the command-line
// tool. Parsing is strict (unknown keys are rejected) and every error
// carries the JSON pointer of the offending value.

#include "defham/dynamics.hpp"
#include "defham/expr.hpp"
#include "defham/forms.hpp"
#include "defham/morse.hpp"
#include "defham/ode.hpp"
#include "defham/phase.hpp"
#include "defham/rational.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/Dense>

#include <cctype>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace defham::cli {

using nlohmann::json;

/// Invalid scenario input. `pointer()` is an RFC 6901 JSON pointer.
class ScenarioError : public std::runtime_error {
public:
    ScenarioError(std::string pointer, const std::string& message)
        : std::runtime_error((pointer.empty() ? std::string("/") : pointer) + ": " + message),
          pointer_(std::move(pointer)) {}
    const std::string& pointer() const noexcept { return pointer_; }

private:
    std::string pointer_;
};

/// Cursor into a JSON document that knows its own pointer.
class Node {
public:
    Node(const json& value, std::string pointer) : v_(&value), ptr_(std::move(pointer)) {}

    const json& raw() const { return *v_; }
    const std::string& pointer() const { return ptr_; }
    [[noreturn]] void fail(const std::string& message) const { throw ScenarioError(ptr_, message); }

    bool has(const std::string& key) const { return v_->is_object() && v_->contains(key); }

    Node operator[](const std::string& key) const {
        if (!v_->is_object()) fail("expected an object");
        auto it = v_->find(key);
        if (it == v_->end()) throw ScenarioError(ptr_ + "/" + escape(key), "missing required key");
        return {*it, ptr_ + "/" + escape(key)};
    }
    Node operator[](std::size_t i) const { return {v_->at(i), ptr_ + "/" + std::to_string(i)}; }

    /// Rejects keys outside `allowed`.
    void only(std::initializer_list<const char*> allowed) const {
        if (!v_->is_object()) fail("expected an object");
        std::set<std::string> ok(allowed.begin(), allowed.end());
        for (auto it = v_->begin(); it != v_->end(); ++it)
            if (!ok.count(it.key())) throw ScenarioError(ptr_ + "/" + escape(it.key()), "unknown key");
    }

    std::size_t size() const {
        if (!v_->is_array()) fail("expected an array");
        return v_->size();
    }

    std::vector<Node> items() const {
        std::vector<Node> out;
        for (std::size_t i = 0; i < size(); ++i) out.push_back((*this)[i]);
        return out;
    }

    double number() const {
        if (v_->is_number()) return v_->get<double>();
        if (v_->is_string()) return to_double(rational());
        fail("expected a number");
    }
    double finite() const {
        const double d = number();
        if (!std::isfinite(d)) fail("expected a finite number");
        return d;
    }
    double positive() const {
        const double d = finite();
        if (!(d > 0.0)) fail("must be > 0");
        return d;
    }
    double non_negative() const {
        const double d = finite();
        if (!(d >= 0.0)) fail("must be >= 0");
        return d;
    }

    /// A number, or a string holding an exact rational such as "1/3".
    Rational rational() const {
        if (v_->is_number_integer()) return Rational(v_->get<std::int64_t>());
        if (v_->is_number_float()) {
            const double d = v_->get<double>();
            if (!std::isfinite(d)) fail("expected a finite number");
            return Rational(d);
        }
        if (v_->is_string()) {
            try {
                return parse_rational(v_->get<std::string>());
            } catch (const std::exception& e) {
                fail(e.what());
            }
        }
        fail("expected a number or a rational string like \"1/2\"");
    }

    long integer() const {
        if (!v_->is_number_integer()) fail("expected an integer");
        return v_->get<long>();
    }
    long integer(long lo, long hi) const {
        const long k = integer();
        if (k < lo || k > hi) fail("must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
        return k;
    }
    bool boolean() const {
        if (!v_->is_boolean()) fail("expected true or false");
        return v_->get<bool>();
    }
    std::string string() const {
        if (!v_->is_string()) fail("expected a string");
        return v_->get<std::string>();
    }
    std::string one_of(std::initializer_list<const char*> choices) const {
        const std::string s = string();
        std::string list;
        for (const char* c : choices) {
            if (s == c) return s;
            list += std::string(list.empty() ? "" : ", ") + c;
        }
        fail("must be one of: " + list);
    }

private:
    static std::string escape(const std::string& key) {
        std::string out;
        for (char c : key) {
            if (c == '~')
                out += "~0";
            else if (c == '/')
                out += "~1";
            else
                out += c;
        }
        return out;
    }

    const json* v_;
    std::string ptr_;
};

// ---------------------------------------------------------------------------
// Typed pieces

/// q as given in the scenario: exact where it came from a string.
struct QValue {
    Rational exact;
    double value = 0.0;
    std::string text;  // canonical text, used as a key in outputs
};

inline QValue read_q(const Node& node, bool nonzero = true) {
    QValue q;
    q.exact = node.rational();
    q.value = to_double(q.exact);
    if (nonzero && q.exact == 0) node.fail("q must be nonzero");
    q.text = node.raw().is_string() ? node.string() : dynamics::format_double(q.value);
    return q;
}

inline std::vector<QValue> read_q_list(const Node& node, bool nonzero = true) {
    if (node.size() == 0) node.fail("q list must not be empty");
    std::vector<QValue> out;
    for (const auto& item : node.items()) out.push_back(read_q(item, nonzero));
    return out;
}

inline expr::Expression read_expression(const Node& node, int n) {
    const std::string text = node.string();
    try {
        return expr::parse(text, n);
    } catch (const expr::ParseError& e) {
        node.fail(std::string("cannot parse expression: ") + e.what());
    }
}

inline forms::Poly read_poly(const Node& node, const expr::Expression& e) {
    try {
        return forms::to_poly(e);
    } catch (const forms::NotPolynomial& err) {
        node.fail(std::string("classification needs a polynomial: ") + err.what());
    }
}

inline Eigen::VectorXd read_vector(const Node& node, std::size_t size) {
    if (node.size() != size) node.fail("expected " + std::to_string(size) + " numbers");
    Eigen::VectorXd v(static_cast<Eigen::Index>(size));
    for (std::size_t i = 0; i < size; ++i) v[static_cast<Eigen::Index>(i)] = node[i].finite();
    return v;
}

inline ode::Integrator read_integrator(const Node& node) {
    node.only({"method", "step", "rel_tol", "abs_tol", "initial_step", "max_step"});
    const std::string method = node["method"].one_of({"rk4", "rkf45"});
    if (method == "rk4") {
        ode::Rk4 r;
        if (node.has("step")) r.step = node["step"].positive();
        for (const char* k : {"rel_tol", "abs_tol", "initial_step", "max_step"})
            if (node.has(k)) node[k].fail("not used by rk4");
        return r;
    }
    ode::Rkf45 a;
    if (node.has("step")) node["step"].fail("not used by rkf45 (use initial_step)");
    if (node.has("rel_tol")) a.rel_tol = node["rel_tol"].positive();
    if (node.has("abs_tol")) a.abs_tol = node["abs_tol"].positive();
    if (node.has("initial_step")) a.initial_step = node["initial_step"].positive();
    if (node.has("max_step")) a.max_step = node["max_step"].positive();
    return a;
}

inline phase::Space read_space(const Node& parent) {
    if (!parent.has("space")) return phase::Space::plane;
    return parent["space"].one_of({"plane", "torus"}) == "torus" ? phase::Space::torus : phase::Space::plane;
}

/// Shared by simulate, verify-flow and sweep.
struct FlowSetup {
    expr::Expression hamiltonian;
    phase::Space space = phase::Space::plane;
    Eigen::VectorXd z0;
    ode::Integrator integrator = ode::Rk4{1e-3};
    double t_final = 1.0;
    int sample_stride = 1;

    dynamics::FlowSpec spec(double q) const {
        return {hamiltonian, q, space, integrator, t_final, sample_stride};
    }
    phase::PhasePoint start() const { return phase::PhasePoint::from_coords(z0, space); }
};

inline FlowSetup read_flow(const Node& root, int n) {
    FlowSetup f;
    f.hamiltonian = read_expression(root["hamiltonian"], n);
    f.space = read_space(root);
    f.z0 = read_vector(root["z0"], static_cast<std::size_t>(2 * n));
    if (root.has("integrator")) f.integrator = read_integrator(root["integrator"]);
    f.t_final = root["t_final"].positive();
    if (root.has("sample_stride")) f.sample_stride = static_cast<int>(root["sample_stride"].integer(1, 1000000000));
    return f;
}

// ---------------------------------------------------------------------------
// Checks. Each kind accepts a subset of these.

struct EnergyDriftCheck {  // max |H(t) - H(0)| over samples
    std::optional<QValue> q;  // sweep only: which q
    double max = 1e-8;
};
struct RegimeCheck {};  // sign(dH/dt) == sign(1/q - 1) wherever sum H_x H_y > 0
struct SymplecticCheck {
    double max = 1e-6;
};
struct ConformalCheck {
    Rational c_prime = 1;
    double max = 1e-6;
};
struct DissipationCheck {  // symplectic defect at `time` >= min for every step, converging
    double time = 1.0;
    double min = 1e-2;
    std::vector<double> steps;
    double max_spread = 0.1;  // relative change between the two finest steps
};
struct LinearJacobianCheck {  // D phi_t = diag(exp(rate_i t))
    std::vector<std::string> rates;  // numbers, or expressions of q: "1/q", "-1"
    double max = 1e-6;
};
struct EnergyIdentityCheck {
    int samples = 1000;
    std::vector<QValue> q_values;
    double max = 1e-12;
    int degree = 3;
    double box = 2.0;
};
struct NilpotencyCheck {
    int forms = 50;
    std::vector<int> degrees{0, 1};
    std::vector<QValue> q_values;
};
struct SymbolicAdmissibilityCheck {
    int pairs = 50;
    std::vector<QValue> q_values;
};
struct SymbolicJacobiCheck {
    int triples = 10;
    std::vector<QValue> q_values;
};
struct RegimeSignCheck {  // sweep: sign(Delta H) column equals sign(1/q - 1)
    double zero_tolerance = 1e-10;
};
struct FibreVolumeCheck {
    double max = 1e-15;
};
struct SignatureCheck {
    QValue q;
    int positive = 0;
    int negative = 0;
};

using Check = std::variant<EnergyDriftCheck, RegimeCheck, SymplecticCheck, ConformalCheck, DissipationCheck,
                           LinearJacobianCheck, EnergyIdentityCheck, NilpotencyCheck, SymbolicAdmissibilityCheck,
                           SymbolicJacobiCheck, RegimeSignCheck, FibreVolumeCheck, SignatureCheck>;

inline std::vector<QValue> read_q_list_exact(const Node& node) { return read_q_list(node, true); }

inline Check read_check(const Node& node, const std::set<std::string>& allowed, int n) {
    const std::string type = node["type"].string();
    if (!allowed.count(type)) {
        std::string list;
        for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
        node["type"].fail("check type not available for this kind (expected one of: " + list + ")");
    }
    if (type == "energy_drift") {
        node.only({"type", "q", "max"});
        EnergyDriftCheck c;
        if (node.has("q")) c.q = read_q(node["q"]);
        if (node.has("max")) c.max = node["max"].non_negative();
        return c;
    }
    if (type == "regime") {
        node.only({"type"});
        return RegimeCheck{};
    }
    if (type == "symplectic") {
        node.only({"type", "max"});
        SymplecticCheck c;
        if (node.has("max")) c.max = node["max"].non_negative();
        return c;
    }
    if (type == "conformal") {
        node.only({"type", "c_prime", "max"});
        ConformalCheck c;
        if (node.has("c_prime")) c.c_prime = node["c_prime"].rational();
        if (c.c_prime == 0) node["c_prime"].fail("c_prime must be nonzero");
        if (node.has("max")) c.max = node["max"].non_negative();
        return c;
    }
    if (type == "dissipation") {
        node.only({"type", "time", "min", "steps", "max_spread"});
        DissipationCheck c;
        if (node.has("time")) c.time = node["time"].positive();
        if (node.has("min")) c.min = node["min"].non_negative();
        if (node.has("max_spread")) c.max_spread = node["max_spread"].non_negative();
        for (const auto& s : node["steps"].items()) c.steps.push_back(s.positive());
        if (c.steps.size() < 2) node["steps"].fail("need at least two step sizes");
        return c;
    }
    if (type == "linear_jacobian") {
        node.only({"type", "rates", "max"});
        LinearJacobianCheck c;
        const Node rates = node["rates"];
        if (rates.size() != static_cast<std::size_t>(2 * n)) rates.fail("expected 2n rates");
        for (const auto& r : rates.items()) {
            if (r.raw().is_number())
                c.rates.push_back(dynamics::format_double(r.finite()));
            else {
                const std::string s = r.string();
                if (s != "1/q" && s != "-1/q") (void)r.rational();
                c.rates.push_back(s);
            }
        }
        if (node.has("max")) c.max = node["max"].non_negative();
        return c;
    }
    if (type == "energy_identity") {
        node.only({"type", "samples", "q_values", "max", "degree", "box"});
        EnergyIdentityCheck c;
        if (node.has("samples")) c.samples = static_cast<int>(node["samples"].integer(1, 10000000));
        c.q_values = read_q_list_exact(node["q_values"]);
        if (node.has("max")) c.max = node["max"].non_negative();
        if (node.has("degree")) c.degree = static_cast<int>(node["degree"].integer(1, 8));
        if (node.has("box")) c.box = node["box"].positive();
        return c;
    }
    if (type == "nilpotency") {
        node.only({"type", "forms", "degrees", "q_values"});
        NilpotencyCheck c;
        if (node.has("forms")) c.forms = static_cast<int>(node["forms"].integer(1, 100000));
        if (node.has("degrees")) {
            c.degrees.clear();
            for (const auto& d : node["degrees"].items()) c.degrees.push_back(static_cast<int>(d.integer(0, 2 * n)));
        }
        c.q_values = read_q_list_exact(node["q_values"]);
        return c;
    }
    if (type == "symbolic_admissibility") {
        node.only({"type", "pairs", "q_values"});
        SymbolicAdmissibilityCheck c;
        if (node.has("pairs")) c.pairs = static_cast<int>(node["pairs"].integer(1, 100000));
        c.q_values = read_q_list_exact(node["q_values"]);
        return c;
    }
    if (type == "symbolic_jacobi") {
        node.only({"type", "triples", "q_values"});
        SymbolicJacobiCheck c;
        if (node.has("triples")) c.triples = static_cast<int>(node["triples"].integer(1, 100000));
        c.q_values = read_q_list_exact(node["q_values"]);
        for (std::size_t i = 0; i < c.q_values.size(); ++i)
            if (c.q_values[i].exact == -1) node["q_values"][i].fail("q = -1 makes the commutator vanish");
        return c;
    }
    if (type == "regime_sign") {
        node.only({"type", "zero_tolerance"});
        RegimeSignCheck c;
        if (node.has("zero_tolerance")) c.zero_tolerance = node["zero_tolerance"].non_negative();
        return c;
    }
    if (type == "fibre_volume") {
        node.only({"type", "max"});
        FibreVolumeCheck c;
        if (node.has("max")) c.max = node["max"].non_negative();
        return c;
    }
    if (type == "signature") {
        node.only({"type", "q", "expected"});
        SignatureCheck c;
        c.q = read_q(node["q"]);
        const Node e = node["expected"];
        if (e.size() != 2) e.fail("expected [positive, negative]");
        c.positive = static_cast<int>(e[0].integer(0, 2 * n));
        c.negative = static_cast<int>(e[1].integer(0, 2 * n));
        return c;
    }
    node["type"].fail("unknown check type");
}

inline std::vector<Check> read_checks(const Node& root, const std::set<std::string>& allowed, int n) {
    std::vector<Check> out;
    if (!root.has("checks")) return out;
    for (const auto& c : root["checks"].items()) out.push_back(read_check(c, allowed, n));
    return out;
}

// ---------------------------------------------------------------------------
// Morse blocks

struct MorseExpect {
    std::vector<Eigen::VectorXd> critical_points;
    double tolerance = 1e-8;
    std::vector<int> indices;
    std::map<int, int> homology_ranks;
    struct Count {
        std::size_t minus = 0, plus = 0;
        int raw = 0;
    };
    std::vector<Count> flow_lines;
    bool certificates = true;
    bool ranks_q_independent = true;
};

struct AdiabaticSetup {
    std::vector<double> q_list;
    Eigen::VectorXd minus, plus;
    bool strictly_decreasing = false;
    std::optional<double> min_ratio;
    std::optional<double> max_deviation;
};

struct MorseSetup {
    morse::MorseSpec spec;  // q filled per run
    morse::MorseOptions options;
};

inline morse::Box read_box(const Node& node, int n) {
    if (node.size() != static_cast<std::size_t>(2 * n)) node.fail("expected 2n intervals [lo, hi]");
    morse::Box b;
    for (const auto& iv : node.items()) {
        if (iv.size() != 2) iv.fail("expected [lo, hi]");
        const double lo = iv[0].finite(), hi = iv[1].finite();
        if (!(lo < hi)) iv.fail("interval must satisfy lo < hi");
        b.bounds.emplace_back(lo, hi);
    }
    return b;
}

inline MorseSetup read_morse_setup(const Node& root, int n) {
    MorseSetup m;
    m.spec.n = n;
    m.spec.f = read_expression(root["f"], n);
    const Node w = root["w"];
    if (w.size() != static_cast<std::size_t>(n)) w.fail("expected n constraint functions");
    for (const auto& wi : w.items()) m.spec.w.push_back(read_expression(wi, n));
    m.spec.g = read_expression(root["g"], n);
    m.spec.space = read_space(root);
    m.spec.q = 1.0;
    try {
        m.spec.validate();
    } catch (const std::invalid_argument& e) {
        // point at the expression the message names, when there is one
        const std::string msg = e.what();
        if (msg.rfind("f ", 0) == 0) root["f"].fail(msg);
        if (msg.rfind("g ", 0) == 0) root["g"].fail(msg);
        if (msg.rfind("w", 0) == 0 && msg.size() > 1 && std::isdigit(static_cast<unsigned char>(msg[1]))) {
            const std::size_t i = static_cast<std::size_t>(std::stoi(msg.substr(1))) - 1;
            if (i < w.size()) w[i].fail(msg);
        }
        root.fail(msg);
    }

    const Node s = root["search"];
    s.only({"box", "grid", "newton_tol", "dedup", "residual_tol", "degeneracy_tol", "max_newton"});
    auto& so = m.options.search;
    so.box = read_box(s["box"], n);
    if (s.has("grid")) so.grid = static_cast<int>(s["grid"].integer(2, 64));
    if (s.has("newton_tol")) so.newton_tol = s["newton_tol"].positive();
    if (s.has("dedup")) so.dedup = s["dedup"].positive();
    if (s.has("residual_tol")) so.residual_tol = s["residual_tol"].positive();
    if (s.has("degeneracy_tol")) so.degeneracy_tol = s["degeneracy_tol"].positive();
    if (s.has("max_newton")) so.max_newton = static_cast<int>(s["max_newton"].integer(1, 100000));

    if (root.has("shooting")) {
        const Node sh = root["shooting"];
        sh.only({"epsilon", "capture", "mesh", "step", "t_max", "separation", "bisect_tol", "refine_depth",
                 "refine_factor", "label_budget", "escape_warning"});
        auto& o = m.options.shooting;
        if (sh.has("epsilon")) o.epsilon = sh["epsilon"].positive();
        if (sh.has("capture")) o.capture = sh["capture"].positive();
        if (sh.has("mesh")) o.mesh = static_cast<int>(sh["mesh"].integer(4, 1 << 20));
        if (sh.has("step")) o.step = sh["step"].positive();
        if (sh.has("t_max")) o.t_max = sh["t_max"].positive();
        if (sh.has("separation")) o.separation = sh["separation"].positive();
        if (sh.has("bisect_tol")) o.bisect_tol = sh["bisect_tol"].positive();
        if (sh.has("refine_depth")) o.refine_depth = static_cast<int>(sh["refine_depth"].integer(0, 10));
        if (sh.has("refine_factor")) o.refine_factor = static_cast<int>(sh["refine_factor"].integer(2, 64));
        if (sh.has("label_budget")) o.label_budget = sh["label_budget"].integer(1, 100000000);
        if (sh.has("escape_warning")) o.escape_warning = sh["escape_warning"].non_negative();
    }
    return m;
}

inline AdiabaticSetup read_adiabatic(const Node& node, int n, bool with_q_list) {
    node.only({"q_list", "minus", "plus", "strictly_decreasing", "min_ratio", "max_deviation"});
    AdiabaticSetup a;
    if (with_q_list) {
        const Node ql = node["q_list"];
        if (ql.size() == 0) ql.fail("q list must not be empty");
        for (std::size_t i = 0; i < ql.size(); ++i) {
            const double q = ql[i].finite();
            if (!(q > 0.0 && q <= 1.0)) ql[i].fail("adiabatic q values must lie in (0, 1]");
            if (i > 0 && !(q < a.q_list.back())) ql[i].fail("adiabatic q values must be decreasing");
            a.q_list.push_back(q);
        }
    } else if (node.has("q_list")) {
        node["q_list"].fail("the sweep's q_list is used here");
    }
    a.minus = read_vector(node["minus"], static_cast<std::size_t>(2 * n));
    a.plus = read_vector(node["plus"], static_cast<std::size_t>(2 * n));
    if (node.has("strictly_decreasing")) a.strictly_decreasing = node["strictly_decreasing"].boolean();
    if (node.has("min_ratio")) a.min_ratio = node["min_ratio"].positive();
    if (node.has("max_deviation")) a.max_deviation = node["max_deviation"].non_negative();
    return a;
}

inline MorseExpect read_morse_expect(const Node& node, int n) {
    node.only({"critical_points", "tolerance", "indices", "homology_ranks", "flow_lines", "certificates",
               "ranks_q_independent"});
    MorseExpect e;
    if (node.has("critical_points"))
        for (const auto& p : node["critical_points"].items())
            e.critical_points.push_back(read_vector(p, static_cast<std::size_t>(2 * n)));
    if (node.has("tolerance")) e.tolerance = node["tolerance"].positive();
    if (node.has("indices"))
        for (const auto& i : node["indices"].items()) e.indices.push_back(static_cast<int>(i.integer(0, 2 * n)));
    if (node.has("homology_ranks")) {
        const Node hr = node["homology_ranks"];
        if (!hr.raw().is_object()) hr.fail("expected an object {degree: rank}");
        for (auto it = hr.raw().begin(); it != hr.raw().end(); ++it) {
            const Node v = hr[it.key()];
            int degree = -1;
            try {
                std::size_t used = 0;
                degree = std::stoi(it.key(), &used);
                if (used != it.key().size()) degree = -1;
            } catch (const std::exception&) {
                degree = -1;
            }
            if (degree < 0 || degree > 2 * n) v.fail("degree keys must be integers in [0, 2n]");
            e.homology_ranks[degree] = static_cast<int>(v.integer(0, 1 << 20));
        }
    }
    if (node.has("flow_lines"))
        for (const auto& fl : node["flow_lines"].items()) {
            fl.only({"minus", "plus", "raw"});
            e.flow_lines.push_back({static_cast<std::size_t>(fl["minus"].integer(0, 1 << 20)),
                                    static_cast<std::size_t>(fl["plus"].integer(0, 1 << 20)),
                                    static_cast<int>(fl["raw"].integer(0, 1 << 20))});
        }
    if (node.has("certificates")) e.certificates = node["certificates"].boolean();
    if (node.has("ranks_q_independent")) e.ranks_q_independent = node["ranks_q_independent"].boolean();
    return e;
}

// ---------------------------------------------------------------------------
// Scenario kinds

struct SimulateScenario {
    QValue q;
    FlowSetup flow;
    std::vector<Check> checks;
};

struct VerifyFlowScenario {
    QValue q;
    FlowSetup flow;
    std::vector<Check> checks;
};

struct ClassifyScenario {
    struct Item {
        std::string text;
        expr::Expression expression;
        forms::Poly poly;
        std::optional<bool> simple, exceptionally_simple;
        bool expect_ratio = false;            // compare conformal_ratio
        std::optional<Rational> conformal_ratio;  // nullopt: expect none
    };
    std::vector<Item> hamiltonians;
    std::vector<Check> checks;
};

struct BracketScenario {
    std::vector<QValue> q_values;
    int pairs = 100;
    int points = 1;  // points per pair
    int triples = 20;
    int degree = 3;
    double box = 2.0;
    double max_admissibility = 1e-10;
    double max_jacobi = 1e-8;
    bool symbolic = true;
};

struct MorseScenario {
    MorseSetup setup;
    std::vector<double> q_values;
    std::optional<MorseExpect> expect;
    std::optional<AdiabaticSetup> adiabatic;
};

struct SweepScenario {
    std::vector<QValue> q_list;
    std::optional<FlowSetup> flow;
    std::optional<MorseSetup> morse;
    std::optional<AdiabaticSetup> adiabatic;
    std::vector<std::string> observables;
    std::vector<Check> checks;
};

using Body = std::variant<SimulateScenario, VerifyFlowScenario, ClassifyScenario, BracketScenario, MorseScenario,
                          SweepScenario>;

struct Outputs {
    std::string report = "report.json";
    std::string trajectory = "trajectory.csv";
    std::string data = "";  // kind-specific: classification.json, bracket.json, morse.json, sweep.csv
};

struct Scenario {
    std::string kind;
    std::string name;
    int n = 1;
    std::uint64_t seed = 0;
    std::optional<std::string> expect_error;
    Outputs outputs;
    Body body;
    json source;  // the document as read, echoed in the report
};

namespace detail {

inline std::string default_data_name(const std::string& kind) {
    if (kind == "classify") return "classification.json";
    if (kind == "bracket") return "bracket.json";
    if (kind == "morse") return "morse.json";
    if (kind == "sweep") return "sweep.csv";
    return "";
}

inline void check_file_name(const Node& node) {
    const std::string s = node.string();
    if (s.empty() || s.find('/') != std::string::npos || s.find('\\') != std::string::npos || s == "." || s == "..")
        node.fail("must be a plain file name (artifacts are placed in the output directory)");
}

}  // namespace detail

inline Scenario parse_scenario(const json& doc) {
    const Node root(doc, "");
    if (!doc.is_object()) root.fail("scenario must be a JSON object");
    Scenario sc;
    sc.source = doc;
    sc.kind = root["kind"].one_of({"simulate", "verify-flow", "classify", "bracket", "morse", "sweep"});
    if (root.has("name")) sc.name = root["name"].string();
    sc.n = root.has("n") ? static_cast<int>(root["n"].integer(1, 16)) : 1;
    if (root.has("seed")) sc.seed = static_cast<std::uint64_t>(root["seed"].integer(0, std::numeric_limits<long>::max()));
    if (root.has("expect_error")) sc.expect_error = root["expect_error"].string();
    sc.outputs.data = detail::default_data_name(sc.kind);
    if (root.has("outputs")) {
        const Node o = root["outputs"];
        o.only({"report", "trajectory", "data"});
        if (o.has("report")) detail::check_file_name(o["report"]), sc.outputs.report = o["report"].string();
        if (o.has("trajectory")) detail::check_file_name(o["trajectory"]), sc.outputs.trajectory = o["trajectory"].string();
        if (o.has("data")) detail::check_file_name(o["data"]), sc.outputs.data = o["data"].string();
    }
    const int n = sc.n;
    const std::initializer_list<const char*> common = {"kind", "name", "n", "seed", "expect_error", "outputs"};
    auto allow = [&](std::initializer_list<const char*> extra) {
        std::set<std::string> keys(common.begin(), common.end());
        keys.insert(extra.begin(), extra.end());
        if (!doc.is_object()) return;
        for (auto it = doc.begin(); it != doc.end(); ++it)
            if (!keys.count(it.key())) root[it.key()].fail("unknown key for kind '" + sc.kind + "'");
    };

    if (sc.kind == "simulate" || sc.kind == "verify-flow") {
        allow({"hamiltonian", "q", "space", "z0", "integrator", "t_final", "sample_stride", "checks"});
        const QValue q = read_q(root["q"]);
        if (q.value < 0) root["q"].fail("flows are defined for q > 0");
        FlowSetup flow = read_flow(root, n);
        if (sc.kind == "simulate") {
            sc.body = SimulateScenario{q, flow, read_checks(root, {"energy_drift", "regime"}, n)};
        } else {
            sc.body = VerifyFlowScenario{q, flow,
                                         read_checks(root,
                                                     {"energy_drift", "regime", "symplectic", "conformal",
                                                      "dissipation", "linear_jacobian", "energy_identity"},
                                                     n)};
        }
    } else if (sc.kind == "classify") {
        allow({"hamiltonians", "checks"});
        ClassifyScenario c;
        if (root.has("hamiltonians"))
            for (const auto& h : root["hamiltonians"].items()) {
                ClassifyScenario::Item item;
                if (h.raw().is_string()) {
                    item.text = h.string();
                    item.expression = read_expression(h, n);
                    item.poly = read_poly(h, item.expression);
                } else {
                    h.only({"text", "expect"});
                    item.text = h["text"].string();
                    item.expression = read_expression(h["text"], n);
                    item.poly = read_poly(h["text"], item.expression);
                    if (h.has("expect")) {
                        const Node e = h["expect"];
                        e.only({"simple", "exceptionally_simple", "conformal_ratio"});
                        if (e.has("simple")) item.simple = e["simple"].boolean();
                        if (e.has("exceptionally_simple")) item.exceptionally_simple = e["exceptionally_simple"].boolean();
                        if (e.has("conformal_ratio")) {
                            item.expect_ratio = true;
                            if (!e["conformal_ratio"].raw().is_null()) item.conformal_ratio = e["conformal_ratio"].rational();
                        }
                    }
                }
                c.hamiltonians.push_back(std::move(item));
            }
        c.checks = read_checks(root, {"nilpotency", "symbolic_admissibility", "symbolic_jacobi"}, n);
        if (c.hamiltonians.empty() && c.checks.empty()) root.fail("nothing to do: give hamiltonians or checks");
        sc.body = std::move(c);
    } else if (sc.kind == "bracket") {
        allow({"q_values", "pairs", "points", "triples", "degree", "box", "max_admissibility", "max_jacobi",
               "symbolic"});
        BracketScenario b;
        b.q_values = read_q_list(root["q_values"]);
        for (std::size_t i = 0; i < b.q_values.size(); ++i)
            if (b.q_values[i].exact == -1) root["q_values"][i].fail("q = -1 is excluded (the identity is trivial)");
        if (root.has("pairs")) b.pairs = static_cast<int>(root["pairs"].integer(1, 1000000));
        if (root.has("points")) b.points = static_cast<int>(root["points"].integer(1, 1000000));
        if (root.has("triples")) b.triples = static_cast<int>(root["triples"].integer(0, 1000000));
        if (root.has("degree")) b.degree = static_cast<int>(root["degree"].integer(1, 8));
        if (root.has("box")) b.box = root["box"].positive();
        if (root.has("max_admissibility")) b.max_admissibility = root["max_admissibility"].non_negative();
        if (root.has("max_jacobi")) b.max_jacobi = root["max_jacobi"].non_negative();
        if (root.has("symbolic")) b.symbolic = root["symbolic"].boolean();
        sc.body = std::move(b);
    } else if (sc.kind == "morse") {
        allow({"f", "w", "g", "space", "q_values", "search", "shooting", "expect", "adiabatic"});
        MorseScenario m;
        m.setup = read_morse_setup(root, n);
        const Node qv = root["q_values"];
        if (qv.size() == 0) qv.fail("q list must not be empty");
        for (const auto& q : qv.items()) {
            const double v = q.finite();
            if (v == 0.0) q.fail("q must be nonzero");
            if (!(v > 0.0 && v <= 1.0)) q.fail("Morse runs need q in (0, 1]");
            m.q_values.push_back(v);
        }
        if (root.has("expect")) m.expect = read_morse_expect(root["expect"], n);
        if (root.has("adiabatic")) m.adiabatic = read_adiabatic(root["adiabatic"], n, true);
        sc.body = std::move(m);
    } else {  // sweep
        allow({"hamiltonian", "space", "z0", "integrator", "t_final", "sample_stride", "q_list", "observables",
               "morse", "checks"});
        SweepScenario s;
        s.q_list = read_q_list(root["q_list"]);
        const Node obs = root["observables"];
        if (obs.size() == 0) obs.fail("observables must not be empty");
        bool needs_flow = false, needs_morse = false;
        for (const auto& o : obs.items()) {
            const std::string name = o.one_of(
                {"final_H", "delta_H", "delta_H_sign", "pullback_defect", "fibre_volume_ratio", "adiabatic_deviation"});
            for (const auto& seen : s.observables)
                if (seen == name) o.fail("duplicate observable");
            s.observables.push_back(name);
            needs_flow = needs_flow || name == "final_H" || name == "delta_H" || name == "delta_H_sign" ||
                         name == "pullback_defect";
            needs_morse = needs_morse || name == "adiabatic_deviation";
        }
        s.checks = read_checks(root, {"regime_sign", "regime", "energy_drift", "fibre_volume", "signature"}, n);
        for (std::size_t i = 0; i < s.checks.size(); ++i)
            if (std::holds_alternative<RegimeCheck>(s.checks[i]) ||
                std::holds_alternative<EnergyDriftCheck>(s.checks[i]) ||
                std::holds_alternative<RegimeSignCheck>(s.checks[i]))
                needs_flow = true;
        if (needs_flow) {
            s.flow = read_flow(root, n);
        } else {
            for (const char* k : {"hamiltonian", "z0", "integrator", "t_final", "sample_stride"})
                if (root.has(k)) root[k].fail("only used by flow observables or checks");
        }
        for (std::size_t i = 0; i < s.checks.size(); ++i) {
            if (auto* d = std::get_if<EnergyDriftCheck>(&s.checks[i])) {
                if (!d->q) root["checks"][i].fail("energy_drift in a sweep needs \"q\"");
                bool found = false;
                for (const auto& q : s.q_list) found = found || q.exact == d->q->exact;
                if (!found) root["checks"][i]["q"].fail("q is not in q_list");
            }
            if (std::holds_alternative<RegimeSignCheck>(s.checks[i])) {
                bool has = false;
                for (const auto& o : s.observables) has = has || o == "delta_H_sign";
                if (!has) root["checks"][i].fail("regime_sign needs the delta_H_sign observable");
            }
            if (std::holds_alternative<FibreVolumeCheck>(s.checks[i])) {
                bool has = false;
                for (const auto& o : s.observables) has = has || o == "fibre_volume_ratio";
                if (!has) root["checks"][i].fail("fibre_volume needs the fibre_volume_ratio observable");
            }
        }
        if (needs_morse) {
            const Node mb = root["morse"];
            mb.only({"f", "w", "g", "space", "search", "shooting", "adiabatic"});
            s.morse = read_morse_setup(mb, n);
            s.adiabatic = read_adiabatic(mb["adiabatic"], n, false);
        } else if (root.has("morse")) {
            root["morse"].fail("only used by the adiabatic_deviation observable");
        }
        sc.body = std::move(s);
    }
    return sc;
}

}  // namespace defham::cli
