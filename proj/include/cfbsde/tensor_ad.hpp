/*
   Copyright 2026 The cfbsde Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#pragma once

// Dense reverse-mode automatic differentiation.
//
// A Tape records every operation as it is executed (define-by-run). Values are
// column-major Eigen matrices; batched quantities put one batch member per row.
// Nodes that do not depend on any trainable leaf carry no backward closure, so
// a tape without trainable leaves is a plain forward evaluator.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cfbsde::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {
inline std::string shape_str(const Matrix& m) {
    std::ostringstream os;
    os << m.rows() << "x" << m.cols();
    return os.str();
}
}  // namespace detail

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid until the tape is reset.
class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    [[nodiscard]] const Matrix& value() const;
    [[nodiscard]] Index rows() const { return value().rows(); }
    [[nodiscard]] Index cols() const { return value().cols(); }
    [[nodiscard]] double scalar() const { return value()(0, 0); }
    [[nodiscard]] int id() const { return id_; }
    [[nodiscard]] Tape* tape() const { return tape_; }
    [[nodiscard]] bool valid() const { return tape_ != nullptr && id_ >= 0; }
    [[nodiscard]] bool requires_grad() const;

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Adjoint callback: receives the node's accumulated upstream gradient and
/// pushes contributions to its inputs through Tape::accumulate.
using BackwardFn = std::function<void(const Matrix& grad_out, Tape& tape)>;

class Gradients {
public:
    void set(int id, Matrix g) { grads_[id] = std::move(g); }
    [[nodiscard]] bool contains(const Var& v) const { return grads_.count(v.id()) != 0; }
    [[nodiscard]] const Matrix& operator[](const Var& v) const {
        auto it = grads_.find(v.id());
        if (it == grads_.end()) throw std::out_of_range("no gradient recorded for node");
        return it->second;
    }
    [[nodiscard]] const std::unordered_map<int, Matrix>& all() const { return grads_; }

private:
    std::unordered_map<int, Matrix> grads_;
};

class Tape {
public:
    struct Node {
        std::string kind;
        Matrix value;
        Matrix grad;
        BackwardFn backward;
        bool requires_grad = false;
        bool trainable = false;
    };

    Tape() { nodes_.reserve(1024); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf node. Trainable leaves receive gradients from backward().
    Var leaf(Matrix value, bool trainable = false) {
        Node n;
        n.kind = trainable ? "param" : "const";
        n.value = std::move(value);
        n.requires_grad = trainable;
        n.trainable = trainable;
        nodes_.push_back(std::move(n));
        return Var(this, static_cast<int>(nodes_.size()) - 1);
    }
    Var constant(Matrix value) { return leaf(std::move(value), false); }
    Var param(Matrix value) { return leaf(std::move(value), true); }
    Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

    /// Appends an operation node. The backward closure is dropped when no
    /// input requires a gradient.
    Var record(std::string kind, std::span<const Var> inputs, Matrix value, BackwardFn backward) {
        bool needs = false;
        for (const Var& v : inputs) {
            check_owned(v, kind);
            needs = needs || nodes_[v.id()].requires_grad;
        }
        Node n;
        n.kind = std::move(kind);
        n.value = std::move(value);
        n.requires_grad = needs;
        if (needs) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var(this, static_cast<int>(nodes_.size()) - 1);
    }
    Var record(std::string kind, std::initializer_list<Var> inputs, Matrix value, BackwardFn backward) {
        return record(std::move(kind), std::span<const Var>(inputs.begin(), inputs.size()), std::move(value),
                      std::move(backward));
    }

    template <typename Derived>
    void accumulate(int id, const Eigen::MatrixBase<Derived>& contribution) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0)
            n.grad = contribution;
        else
            n.grad += contribution;
    }

    /// Reverse sweep from a scalar root. Returns d(root)/d(leaf) for every
    /// trainable leaf; leaves the root does not depend on get zeros.
    Gradients backward(const Var& root) {
        check_owned(root, "backward");
        const Node& r = nodes_[root.id()];
        if (r.value.rows() != 1 || r.value.cols() != 1)
            throw ShapeError("backward: root must be 1x1, got " + detail::shape_str(r.value));
        for (Node& n : nodes_) n.grad.resize(0, 0);
        if (r.requires_grad) nodes_[root.id()].grad = Matrix::Ones(1, 1);
        for (int i = root.id(); i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.backward || n.grad.size() == 0) continue;
            n.backward(n.grad, *this);
        }
        Gradients out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            if (!n.trainable) continue;
            if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
            out.set(static_cast<int>(i), n.grad);
        }
        return out;
    }

    void reset() { nodes_.clear(); }
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }
    [[nodiscard]] const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    [[nodiscard]] const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

private:
    void check_owned(const Var& v, const std::string& kind) const {
        if (v.tape() != this || v.id() < 0 || static_cast<std::size_t>(v.id()) >= nodes_.size())
            throw std::invalid_argument(kind + ": operand does not belong to this tape");
    }

    std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace detail {
inline Tape& same_tape(const Var& a, const Var& b, const char* kind) {
    if (a.tape() == nullptr || a.tape() != b.tape())
        throw std::invalid_argument(std::string(kind) + ": operands live on different tapes");
    return *a.tape();
}

[[noreturn]] inline void shape_fail(const char* kind, const Matrix& a, const Matrix& b) {
    throw ShapeError(std::string(kind) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

enum class Broadcast { none, row, col, scalar };

// How b broadcasts onto a: identical shapes, a 1xC row, an Rx1 column or 1x1.
inline Broadcast broadcast_kind(const char* kind, const Matrix& a, const Matrix& b) {
    if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::none;
    if (b.rows() == 1 && b.cols() == 1) return Broadcast::scalar;
    if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
    if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::col;
    shape_fail(kind, a, b);
}

// Reduces a full-shape gradient onto the broadcast operand's shape.
inline Matrix reduce_to(const Matrix& g, Broadcast bc) {
    switch (bc) {
    case Broadcast::none: return g;
    case Broadcast::row: return g.colwise().sum();
    case Broadcast::col: return g.rowwise().sum();
    case Broadcast::scalar: return Matrix::Constant(1, 1, g.sum());
    }
    return g;
}

inline Matrix expand(const Matrix& b, Broadcast bc, Index rows, Index cols) {
    switch (bc) {
    case Broadcast::none: return b;
    case Broadcast::row: return b.replicate(rows, 1);
    case Broadcast::col: return b.replicate(1, cols);
    case Broadcast::scalar: return Matrix::Constant(rows, cols, b(0, 0));
    }
    return b;
}
}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b, "matmul");
    if (a.cols() != b.rows()) detail::shape_fail("matmul", a.value(), b.value());
    Matrix out = a.value() * b.value();
    const int ia = a.id(), ib = b.id();
    return t.record("matmul", {a, b}, std::move(out), [ia, ib](const Matrix& g, Tape& tp) {
        tp.accumulate(ia, g * tp.value(ib).transpose());
        tp.accumulate(ib, tp.value(ia).transpose() * g);
    });
}

/// a + b, with b identical in shape or broadcast as a row, column or scalar.
inline Var add(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b, "add");
    const auto bc = detail::broadcast_kind("add", a.value(), b.value());
    Matrix out = a.value() + detail::expand(b.value(), bc, a.rows(), a.cols());
    const int ia = a.id(), ib = b.id();
    return t.record("add", {a, b}, std::move(out), [ia, ib, bc](const Matrix& g, Tape& tp) {
        tp.accumulate(ia, g);
        tp.accumulate(ib, detail::reduce_to(g, bc));
    });
}

inline Var sub(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b, "sub");
    const auto bc = detail::broadcast_kind("sub", a.value(), b.value());
    Matrix out = a.value() - detail::expand(b.value(), bc, a.rows(), a.cols());
    const int ia = a.id(), ib = b.id();
    return t.record("sub", {a, b}, std::move(out), [ia, ib, bc](const Matrix& g, Tape& tp) {
        tp.accumulate(ia, g);
        tp.accumulate(ib, -detail::reduce_to(g, bc));
    });
}

/// Elementwise product with the same broadcasting rules as add.
inline Var mul(const Var& a, const Var& b) {
    Tape& t = detail::same_tape(a, b, "mul");
    const auto bc = detail::broadcast_kind("mul", a.value(), b.value());
    Matrix bfull = detail::expand(b.value(), bc, a.rows(), a.cols());
    Matrix out = a.value().cwiseProduct(bfull);
    const int ia = a.id(), ib = b.id();
    return t.record("mul", {a, b}, std::move(out),
                    [ia, ib, bc, bfull = std::move(bfull)](const Matrix& g, Tape& tp) {
                        tp.accumulate(ia, g.cwiseProduct(bfull));
                        if (tp.node(ib).requires_grad)
                            tp.accumulate(ib, detail::reduce_to(g.cwiseProduct(tp.value(ia)), bc));
                    });
}

inline Var scale(const Var& a, double s) {
    Tape& t = *a.tape();
    const int ia = a.id();
    return t.record("scale", {a}, a.value() * s, [ia, s](const Matrix& g, Tape& tp) { tp.accumulate(ia, g * s); });
}

inline Var tanh(const Var& a) {
    Tape& t = *a.tape();
    Matrix out = a.value().array().tanh().matrix();
    const int ia = a.id(), self = static_cast<int>(t.size());
    return t.record("tanh", {a}, std::move(out), [ia, self](const Matrix& g, Tape& tp) {
        const Matrix& y = tp.value(self);
        tp.accumulate(ia, (g.array() * (1.0 - y.array().square())).matrix());
    });
}

inline Var sigmoid(const Var& a) {
    Tape& t = *a.tape();
    Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
    const int ia = a.id(), self = static_cast<int>(t.size());
    return t.record("sigmoid", {a}, std::move(out), [ia, self](const Matrix& g, Tape& tp) {
        const Matrix& y = tp.value(self);
        tp.accumulate(ia, (g.array() * y.array() * (1.0 - y.array())).matrix());
    });
}

inline Var square(const Var& a) {
    Tape& t = *a.tape();
    const int ia = a.id();
    return t.record("square", {a}, a.value().array().square().matrix(), [ia](const Matrix& g, Tape& tp) {
        tp.accumulate(ia, (2.0 * g.array() * tp.value(ia).array()).matrix());
    });
}

/// Sum of all entries, 1x1.
inline Var sum(const Var& a) {
    Tape& t = *a.tape();
    const int ia = a.id();
    const Index r = a.rows(), c = a.cols();
    return t.record("sum", {a}, Matrix::Constant(1, 1, a.value().sum()), [ia, r, c](const Matrix& g, Tape& tp) {
        tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
    });
}

/// Per-row sum, Rx1.
inline Var row_sum(const Var& a) {
    Tape& t = *a.tape();
    const int ia = a.id();
    const Index c = a.cols();
    return t.record("row_sum", {a}, a.value().rowwise().sum(), [ia, c](const Matrix& g, Tape& tp) {
        tp.accumulate(ia, g.replicate(1, c));
    });
}

inline Var mean(const Var& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

/// Column-wise concatenation; all parts must share the row count.
inline Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no operands");
    Tape& t = *parts[0].tape();
    const Index rows = parts[0].rows();
    Index cols = 0;
    for (const Var& p : parts) {
        if (p.tape() != &t) throw std::invalid_argument("concat: operands live on different tapes");
        if (p.rows() != rows) detail::shape_fail("concat", parts[0].value(), p.value());
        cols += p.cols();
    }
    Matrix out(rows, cols);
    std::vector<std::pair<int, Index>> spans;
    Index at = 0;
    for (const Var& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        spans.emplace_back(p.id(), at);
        at += p.cols();
    }
    return t.record("concat", parts, std::move(out), [spans = std::move(spans)](const Matrix& g, Tape& tp) {
        for (const auto& [id, start] : spans) tp.accumulate(id, g.middleCols(start, tp.value(id).cols()));
    });
}

inline Var concat(std::initializer_list<Var> parts) {
    return concat(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var slice_cols(const Var& a, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > a.cols())
        throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + detail::shape_str(a.value()));
    Tape& t = *a.tape();
    const int ia = a.id();
    const Index r = a.rows(), c = a.cols();
    return t.record("slice_cols", {a}, a.value().middleCols(start, count),
                    [ia, r, c, start, count](const Matrix& g, Tape& tp) {
                        Matrix full = Matrix::Zero(r, c);
                        full.middleCols(start, count) = g;
                        tp.accumulate(ia, full);
                    });
}

/// Repeats a 1xC row `rows` times.
inline Var tile_rows(const Var& a, Index rows) {
    if (a.rows() != 1) throw ShapeError("tile_rows: operand must be a row, got " + detail::shape_str(a.value()));
    Tape& t = *a.tape();
    const int ia = a.id();
    return t.record("tile_rows", {a}, a.value().replicate(rows, 1),
                    [ia](const Matrix& g, Tape& tp) { tp.accumulate(ia, g.colwise().sum()); });
}

enum class OpKind { matmul, add, mul, tanh, sigmoid, scale, sum, square, concat };

inline const char* to_string(OpKind k) {
    switch (k) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::tanh: return "tanh";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::scale: return "scale";
    case OpKind::sum: return "sum";
    case OpKind::square: return "square";
    case OpKind::concat: return "concat";
    }
    return "?";
}

/// Generic dispatcher over the primitive set. `factor` is used by scale only.
inline Var record_op(OpKind kind, std::span<const Var> inputs, double factor = 1.0) {
    auto need = [&](std::size_t n) {
        if (inputs.size() != n)
            throw std::invalid_argument(std::string(to_string(kind)) + ": expected " + std::to_string(n) +
                                        " operands, got " + std::to_string(inputs.size()));
    };
    switch (kind) {
    case OpKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::add: need(2); return add(inputs[0], inputs[1]);
    case OpKind::mul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::tanh: need(1); return tanh(inputs[0]);
    case OpKind::sigmoid: need(1); return sigmoid(inputs[0]);
    case OpKind::scale: need(1); return scale(inputs[0], factor);
    case OpKind::sum: need(1); return sum(inputs[0]);
    case OpKind::square: need(1); return square(inputs[0]);
    case OpKind::concat: return concat(inputs);
    }
    throw std::invalid_argument("record_op: unknown op kind");
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function.
template <typename F>
Vector central_difference(F&& f, const Vector& point, double step = 1e-5) {
    Vector g(point.size());
    Vector p = point;
    for (Index i = 0; i < point.size(); ++i) {
        const double orig = p(i);
        p(i) = orig + step;
        const double fp = f(p);
        p(i) = orig - step;
        const double fm = f(p);
        p(i) = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::domain_error("grad_check: non-finite function value at coordinate " + std::to_string(i));
        g(i) = (fp - fm) / (2.0 * step);
    }
    return g;
}

/// max_i |a_i - b_i| / max(1, |a_i|)
inline double max_relative_error(const Vector& analytic, const Vector& numeric) {
    double worst = 0.0;
    for (Index i = 0; i < analytic.size(); ++i)
        worst = std::max(worst, std::abs(analytic(i) - numeric(i)) / std::max(1.0, std::abs(analytic(i))));
    return worst;
}

/// Compares a hand-supplied gradient against central differences.
template <typename F, typename G>
double grad_check(F&& f, G&& gradient, const Vector& point, double step = 1e-5) {
    const double f0 = f(point);
    if (!std::isfinite(f0)) throw std::domain_error("grad_check: non-finite function value at the base point");
    const Vector analytic = gradient(point);
    return max_relative_error(analytic, central_difference(f, point, step));
}

/// Compares tape gradients against central differences. `build` maps a
/// trainable column-vector leaf to a scalar node on the same tape.
inline double grad_check_tape(const std::function<Var(Tape&, const Var&)>& build, const Vector& point,
                              double step = 1e-5) {
    auto value_at = [&](const Vector& p) {
        Tape t;
        Var x = t.constant(Matrix(p));
        return build(t, x).scalar();
    };
    Tape t;
    Var x = t.param(Matrix(point));
    Var root = build(t, x);
    if (!std::isfinite(root.scalar()))
        throw std::domain_error("grad_check: non-finite function value at the base point");
    const Matrix g = t.backward(root)[x];
    return max_relative_error(Eigen::Map<const Vector>(g.data(), g.size()), central_difference(value_at, point, step));
}

}  // namespace cfbsde::ad
