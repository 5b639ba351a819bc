#pragma once

// Scalar expressions in base variables x1..xn and fibre variables y1..yn:
// parsing, exact symbolic differentiation and fast floating point evaluation.
//
// Variables are laid out as the phase-space vector z = (x1..xn, y1..yn).

#include "defham/rational.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace defham::expr {

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " at offset " + std::to_string(offset)), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class EvalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class VarKind { base, fibre };

struct Variable {
    VarKind kind = VarKind::base;
    int index = 1;  // 1-based

    /// Position inside z = (x, y) for dimension n.
    int slot(int n) const { return kind == VarKind::base ? index - 1 : n + index - 1; }
    static Variable from_slot(int slot, int n) {
        return slot < n ? Variable{VarKind::base, slot + 1} : Variable{VarKind::fibre, slot - n + 1};
    }
    std::string name() const { return (kind == VarKind::base ? "x" : "y") + std::to_string(index); }
    friend bool operator==(const Variable&, const Variable&) = default;
};

enum class Op { constant, variable, add, sub, mul, div, neg, pow, sin, cos, exp };

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct Node {
    Op op = Op::constant;
    Rational value;      // constant
    Variable var;        // variable
    int exponent = 0;    // pow
    NodePtr lhs, rhs;    // operands (unary ops use lhs)
};

namespace detail {

inline NodePtr make(Node n) { return std::make_shared<const Node>(std::move(n)); }

inline bool is_const(const NodePtr& p) { return p->op == Op::constant; }
inline bool is_const(const NodePtr& p, int v) { return p->op == Op::constant && p->value == v; }

}  // namespace detail

// Smart constructors. They fold constants and apply the 0/1 identities and
// nothing else, so a printed tree reparses to the same tree.

inline NodePtr constant(const Rational& v) {
    Node n;
    n.op = Op::constant;
    n.value = v;
    return detail::make(std::move(n));
}

inline NodePtr variable(Variable v) {
    Node n;
    n.op = Op::variable;
    n.var = v;
    return detail::make(std::move(n));
}

inline NodePtr binary(Op op, NodePtr a, NodePtr b) {
    Node n;
    n.op = op;
    n.lhs = std::move(a);
    n.rhs = std::move(b);
    return detail::make(std::move(n));
}

inline NodePtr unary(Op op, NodePtr a) {
    Node n;
    n.op = op;
    n.lhs = std::move(a);
    return detail::make(std::move(n));
}

inline NodePtr add(NodePtr a, NodePtr b) {
    using detail::is_const;
    if (is_const(a) && is_const(b)) return constant(a->value + b->value);
    if (is_const(a, 0)) return b;
    if (is_const(b, 0)) return a;
    return binary(Op::add, std::move(a), std::move(b));
}

inline NodePtr neg(NodePtr a) {
    if (detail::is_const(a)) return constant(-a->value);
    return unary(Op::neg, std::move(a));
}

inline NodePtr sub(NodePtr a, NodePtr b) {
    using detail::is_const;
    if (is_const(a) && is_const(b)) return constant(a->value - b->value);
    if (is_const(b, 0)) return a;
    if (is_const(a, 0)) return neg(std::move(b));
    return binary(Op::sub, std::move(a), std::move(b));
}

inline NodePtr mul(NodePtr a, NodePtr b) {
    using detail::is_const;
    if (is_const(a) && is_const(b)) return constant(a->value * b->value);
    if (is_const(a, 0) || is_const(b, 0)) return constant(0);
    if (is_const(a, 1)) return b;
    if (is_const(b, 1)) return a;
    return binary(Op::mul, std::move(a), std::move(b));
}

inline NodePtr div(NodePtr a, NodePtr b) {
    using detail::is_const;
    if (is_const(a) && is_const(b) && b->value != 0) return constant(a->value / b->value);
    if (is_const(a, 0) && !is_const(b, 0)) return constant(0);
    if (is_const(b, 1)) return a;
    return binary(Op::div, std::move(a), std::move(b));
}

inline NodePtr pow(NodePtr base, int k) {
    using detail::is_const;
    if (k == 0) return constant(1);
    if (k == 1) return base;
    if (is_const(base) && !(base->value == 0 && k < 0)) {
        Rational r = 1;
        for (int i = 0; i < (k < 0 ? -k : k); ++i) r *= base->value;
        return constant(k < 0 ? Rational(1 / r) : r);
    }
    Node n;
    n.op = Op::pow;
    n.lhs = std::move(base);
    n.exponent = k;
    return detail::make(std::move(n));
}

inline NodePtr apply(Op fn, NodePtr a) {
    if (detail::is_const(a, 0)) {
        if (fn == Op::sin) return constant(0);
        if (fn == Op::cos || fn == Op::exp) return constant(1);
    }
    return unary(fn, std::move(a));
}

inline bool structurally_equal(const NodePtr& a, const NodePtr& b) {
    if (a == b) return true;
    if (!a || !b || a->op != b->op) return false;
    switch (a->op) {
        case Op::constant: return a->value == b->value;
        case Op::variable: return a->var == b->var;
        case Op::pow: return a->exponent == b->exponent && structurally_equal(a->lhs, b->lhs);
        case Op::neg:
        case Op::sin:
        case Op::cos:
        case Op::exp: return structurally_equal(a->lhs, b->lhs);
        default: return structurally_equal(a->lhs, b->lhs) && structurally_equal(a->rhs, b->rhs);
    }
}

inline std::string print(const NodePtr& p) {
    switch (p->op) {
        case Op::constant: {
            if (is_integer(p->value) && p->value >= 0) return to_string(p->value);
            return "(" + to_string(p->value) + ")";
        }
        case Op::variable: return p->var.name();
        case Op::add: return "(" + print(p->lhs) + " + " + print(p->rhs) + ")";
        case Op::sub: return "(" + print(p->lhs) + " - " + print(p->rhs) + ")";
        case Op::mul: return "(" + print(p->lhs) + "*" + print(p->rhs) + ")";
        case Op::div: return "(" + print(p->lhs) + "/" + print(p->rhs) + ")";
        case Op::neg: return "(-" + print(p->lhs) + ")";
        case Op::pow: {
            std::string base = print(p->lhs);
            if (p->lhs->op == Op::pow) base = "(" + base + ")";
            return base + "^" + std::to_string(p->exponent);
        }
        case Op::sin: return "sin(" + print(p->lhs) + ")";
        case Op::cos: return "cos(" + print(p->lhs) + ")";
        case Op::exp: return "exp(" + print(p->lhs) + ")";
    }
    return {};
}

/// Immutable expression over a declared dimension n.
class Expression {
public:
    Expression() : n_(1), root_(expr::constant(0)) {}
    Expression(int n, NodePtr root) : n_(n), root_(std::move(root)) {
        if (n_ < 1) throw std::invalid_argument("dimension must be >= 1");
    }

    static Expression constant(int n, const Rational& v) { return {n, expr::constant(v)}; }
    static Expression variable(int n, Variable v) { return {n, expr::variable(v)}; }

    int dimension() const { return n_; }
    const NodePtr& root() const { return root_; }
    std::string to_string() const { return print(root_); }

    bool is_constant() const { return root_->op == Op::constant; }
    bool is_zero() const { return root_->op == Op::constant && root_->value == 0; }

    /// True when some variable of the given kind occurs in the tree.
    bool depends_on(VarKind kind) const { return depends(root_, kind); }

    friend bool operator==(const Expression& a, const Expression& b) {
        return a.n_ == b.n_ && structurally_equal(a.root_, b.root_);
    }

private:
    static bool depends(const NodePtr& p, VarKind kind) {
        if (!p) return false;
        if (p->op == Op::variable) return p->var.kind == kind;
        return depends(p->lhs, kind) || depends(p->rhs, kind);
    }

    int n_;
    NodePtr root_;
};

// ---------------------------------------------------------------------------
// Parser
//
//   expr   := term (('+'|'-') term)*
//   term   := factor (('*'|'/') factor)*
//   factor := atom ['^' integer] | '-' factor
//   atom   := number | ident | func '(' expr ')' | '(' expr ')'
//   ident  := ('x'|'y') digits
//   func   := 'sin' | 'cos' | 'exp'
//
// The exponent integer may carry a leading '-'.

namespace detail {

class Parser {
public:
    Parser(std::string_view text, int n) : text_(text), n_(n) {}

    NodePtr run() {
        NodePtr e = expression();
        skip_ws();
        if (pos_ != text_.size()) fail("unexpected '" + std::string(1, text_[pos_]) + "'");
        return e;
    }

private:
    [[noreturn]] void fail(const std::string& what) const { throw ParseError("syntax error: " + what, pos_); }

    void skip_ws() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    }

    bool accept(char c) {
        skip_ws();
        if (pos_ < text_.size() && text_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }

    NodePtr expression() {
        NodePtr lhs = term();
        for (;;) {
            if (accept('+'))
                lhs = add(lhs, term());
            else if (accept('-'))
                lhs = sub(lhs, term());
            else
                return lhs;
        }
    }

    NodePtr term() {
        NodePtr lhs = factor();
        for (;;) {
            if (accept('*'))
                lhs = mul(lhs, factor());
            else if (accept('/'))
                lhs = div(lhs, factor());
            else
                return lhs;
        }
    }

    NodePtr factor() {
        if (accept('-')) return neg(factor());
        NodePtr base = atom();
        if (accept('^')) {
            skip_ws();
            bool negative = false;
            if (pos_ < text_.size() && text_[pos_] == '-') {
                negative = true;
                ++pos_;
            }
            std::size_t start = pos_;
            long k = 0;
            while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
                k = k * 10 + (text_[pos_++] - '0');
                if (k > 1000000) fail("exponent too large");
            }
            if (pos_ == start) fail("expected integer exponent");
            return pow(base, static_cast<int>(negative ? -k : k));
        }
        return base;
    }

    NodePtr atom() {
        skip_ws();
        if (pos_ >= text_.size()) fail("unexpected end of input");
        char c = text_[pos_];
        if (std::isdigit(static_cast<unsigned char>(c))) {
            Rational v;
            std::size_t used = parse_decimal(text_.substr(pos_), v);
            pos_ += used;
            return constant(v);
        }
        if (c == '(') {
            ++pos_;
            NodePtr e = expression();
            if (!accept(')')) fail("expected ')'");
            return e;
        }
        if (c == 'x' || c == 'y') {
            std::size_t start = pos_++;
            std::size_t digits = pos_;
            long idx = 0;
            while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
                idx = idx * 10 + (text_[pos_++] - '0');
                if (idx > 1000000) break;
            }
            if (pos_ == digits) {
                pos_ = start;
                fail("expected variable index");
            }
            if (idx < 1 || idx > n_) {
                throw ParseError("variable " + std::string(text_.substr(start, pos_ - start)) +
                                     " out of range 1.." + std::to_string(n_),
                                 start);
            }
            return variable(Variable{c == 'x' ? VarKind::base : VarKind::fibre, static_cast<int>(idx)});
        }
        for (auto [name, op] : {std::pair{"sin", Op::sin}, std::pair{"cos", Op::cos}, std::pair{"exp", Op::exp}}) {
            std::string_view s(name);
            if (text_.substr(pos_, s.size()) == s) {
                pos_ += s.size();
                if (!accept('(')) fail("expected '(' after " + std::string(s));
                NodePtr arg = expression();
                if (!accept(')')) fail("expected ')'");
                return apply(op, arg);
            }
        }
        fail("unexpected '" + std::string(1, c) + "'");
    }

    std::string_view text_;
    int n_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline Expression parse(std::string_view text, int n) {
    if (n < 1) throw std::invalid_argument("dimension must be >= 1");
    return {n, detail::Parser(text, n).run()};
}

// ---------------------------------------------------------------------------
// Differentiation

inline NodePtr derivative(const NodePtr& p, const Variable& v) {
    switch (p->op) {
        case Op::constant: return constant(0);
        case Op::variable: return constant(p->var == v ? 1 : 0);
        case Op::add: return add(derivative(p->lhs, v), derivative(p->rhs, v));
        case Op::sub: return sub(derivative(p->lhs, v), derivative(p->rhs, v));
        case Op::neg: return neg(derivative(p->lhs, v));
        case Op::mul:
            return add(mul(derivative(p->lhs, v), p->rhs), mul(p->lhs, derivative(p->rhs, v)));
        case Op::div: {
            NodePtr da = derivative(p->lhs, v);
            if (p->rhs->op == Op::constant) return div(da, p->rhs);
            NodePtr db = derivative(p->rhs, v);
            return div(sub(mul(da, p->rhs), mul(p->lhs, db)), pow(p->rhs, 2));
        }
        case Op::pow:
            return mul(mul(constant(p->exponent), pow(p->lhs, p->exponent - 1)), derivative(p->lhs, v));
        case Op::sin: return mul(apply(Op::cos, p->lhs), derivative(p->lhs, v));
        case Op::cos: return mul(neg(apply(Op::sin, p->lhs)), derivative(p->lhs, v));
        case Op::exp: return mul(p, derivative(p->lhs, v));
    }
    return constant(0);
}

inline Expression differentiate(const Expression& e, const Variable& v) {
    if (v.index < 1 || v.index > e.dimension())
        throw std::invalid_argument("variable " + v.name() + " not declared in dimension " +
                                    std::to_string(e.dimension()));
    return {e.dimension(), derivative(e.root(), v)};
}

/// Derivative with respect to the variable at position `slot` of z.
inline Expression differentiate(const Expression& e, int slot) {
    return differentiate(e, Variable::from_slot(slot, e.dimension()));
}

// ---------------------------------------------------------------------------
// Evaluation

/// Postfix program compiled from an expression tree.
class CompiledExpr {
public:
    CompiledExpr() = default;
    explicit CompiledExpr(const Expression& e) : n_(e.dimension()), root_(e.root()) {
        int depth = 0;
        emit(e.root(), depth);
    }

    int dimension() const { return n_; }

    double operator()(const double* z) const {
        thread_local std::vector<double> stack;
        if (stack.size() < static_cast<std::size_t>(max_depth_)) stack.resize(max_depth_);
        double* s = stack.data();
        int top = 0;
        for (const Instr& in : code_) {
            switch (in.op) {
                case Op::constant: s[top++] = in.value; break;
                case Op::variable: s[top++] = z[in.slot]; break;
                case Op::add: --top; s[top - 1] += s[top]; break;
                case Op::sub: --top; s[top - 1] -= s[top]; break;
                case Op::mul: --top; s[top - 1] *= s[top]; break;
                case Op::div:
                    --top;
                    if (s[top] == 0.0) throw EvalError("division by zero in '" + print(in.node->rhs) + "'");
                    s[top - 1] /= s[top];
                    break;
                case Op::neg: s[top - 1] = -s[top - 1]; break;
                case Op::pow:
                    if (in.slot < 0 && s[top - 1] == 0.0)
                        throw EvalError("division by zero in '" + print(in.node) + "'");
                    s[top - 1] = ipow(s[top - 1], in.slot);
                    break;
                case Op::sin: s[top - 1] = std::sin(s[top - 1]); break;
                case Op::cos: s[top - 1] = std::cos(s[top - 1]); break;
                case Op::exp: s[top - 1] = std::exp(s[top - 1]); break;
            }
        }
        return s[0];
    }

    double operator()(const Eigen::VectorXd& z) const {
        if (z.size() != 2 * n_) throw std::invalid_argument("point dimension mismatch");
        return (*this)(z.data());
    }

private:
    struct Instr {
        Op op = Op::constant;
        double value = 0.0;
        int slot = 0;  // variable slot, or exponent for pow
        NodePtr node;  // for error messages
    };

    static double ipow(double b, int k) {
        bool inv = k < 0;
        unsigned e = static_cast<unsigned>(inv ? -k : k);
        double r = 1.0;
        while (e) {
            if (e & 1u) r *= b;
            b *= b;
            e >>= 1u;
        }
        return inv ? 1.0 / r : r;
    }

    void emit(const NodePtr& p, int& depth) {
        Instr in;
        in.op = p->op;
        in.node = p;
        switch (p->op) {
            case Op::constant:
                in.value = to_double(p->value);
                push(depth);
                break;
            case Op::variable:
                in.slot = p->var.slot(n_);
                push(depth);
                break;
            case Op::pow:
                emit(p->lhs, depth);
                in.slot = p->exponent;
                break;
            case Op::neg:
            case Op::sin:
            case Op::cos:
            case Op::exp: emit(p->lhs, depth); break;
            default:
                emit(p->lhs, depth);
                emit(p->rhs, depth);
                --depth;
                break;
        }
        code_.push_back(in);
    }

    void push(int& depth) {
        ++depth;
        if (depth > max_depth_) max_depth_ = depth;
    }

    int n_ = 1;
    int max_depth_ = 1;
    NodePtr root_;
    std::vector<Instr> code_;
};

inline double evaluate(const Expression& e, const Eigen::VectorXd& z) { return CompiledExpr(e)(z); }

struct Jet {
    double value = 0.0;
    Eigen::VectorXd gradient;  // (d/dx1..d/dxn, d/dy1..d/dyn)
    Eigen::MatrixXd hessian;
};

/// Caches the symbolic gradient and Hessian of an expression, compiled for
/// repeated evaluation. Read-only use is thread safe.
class JetEvaluator {
public:
    JetEvaluator() = default;
    explicit JetEvaluator(Expression e) : expr_(std::move(e)) {
        const int m = 2 * expr_.dimension();
        value_ = CompiledExpr(expr_);
        grad_exprs_.reserve(m);
        for (int i = 0; i < m; ++i) grad_exprs_.push_back(differentiate(expr_, i));
        for (int i = 0; i < m; ++i) grad_.emplace_back(grad_exprs_[i]);
        for (int i = 0; i < m; ++i)
            for (int j = i; j < m; ++j) hess_.emplace_back(differentiate(grad_exprs_[i], j));
    }

    const Expression& expression() const { return expr_; }
    int dimension() const { return expr_.dimension(); }
    const Expression& gradient_expression(int slot) const { return grad_exprs_.at(slot); }

    double value(const Eigen::VectorXd& z) const { return value_(z); }

    Eigen::VectorXd gradient(const Eigen::VectorXd& z) const {
        check(z);
        Eigen::VectorXd g(grad_.size());
        for (std::size_t i = 0; i < grad_.size(); ++i) g[i] = grad_[i](z.data());
        return g;
    }

    /// Symmetric by construction: entry (j,i) is a copy of (i,j).
    Eigen::MatrixXd hessian(const Eigen::VectorXd& z) const {
        check(z);
        const int m = static_cast<int>(grad_.size());
        Eigen::MatrixXd h(m, m);
        std::size_t k = 0;
        for (int i = 0; i < m; ++i)
            for (int j = i; j < m; ++j) h(i, j) = h(j, i) = hess_[k++](z.data());
        return h;
    }

    Jet jet(const Eigen::VectorXd& z) const { return {value(z), gradient(z), hessian(z)}; }

private:
    void check(const Eigen::VectorXd& z) const {
        if (z.size() != 2 * expr_.dimension()) throw std::invalid_argument("point dimension mismatch");
    }

    Expression expr_;
    CompiledExpr value_;
    std::vector<Expression> grad_exprs_;
    std::vector<CompiledExpr> grad_;
    std::vector<CompiledExpr> hess_;
};

inline Jet evaluate_jet(const Expression& e, const Eigen::VectorXd& z) { return JetEvaluator(e).jet(z); }

}  // namespace defham::expr
