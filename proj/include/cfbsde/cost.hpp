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

// Running cost, soft state-constraint penalty, control saturation and the
// penalised Hamiltonian.

#include "cfbsde/dynamics.hpp"
#include "cfbsde/tensor_ad.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfbsde {

// ---------------------------------------------------------------------------
// Constraint maps c_s : R^n -> R^r
// ---------------------------------------------------------------------------

class ConstraintMap {
public:
    virtual ~ConstraintMap() = default;
    [[nodiscard]] virtual Index dim() const = 0;
    [[nodiscard]] virtual Vector value(const Vector& x) const = 0;
    /// r x n Jacobian.
    [[nodiscard]] virtual Matrix jacobian(const Vector& x) const = 0;
    [[nodiscard]] virtual std::string name() const = 0;
};

/// Selects state components: c_s(x) = (x[i0], x[i1], ...).
class StateBoxMap final : public ConstraintMap {
public:
    StateBoxMap(std::vector<Index> indices, Index state_dim) : idx_(std::move(indices)), n_(state_dim) {
        if (idx_.empty()) throw std::invalid_argument("state box constraint needs at least one index");
        for (Index i : idx_)
            if (i < 0 || i >= n_) throw std::invalid_argument("state box index out of range: " + std::to_string(i));
    }
    [[nodiscard]] Index dim() const override { return static_cast<Index>(idx_.size()); }
    [[nodiscard]] Vector value(const Vector& x) const override {
        Vector c(dim());
        for (Index j = 0; j < dim(); ++j) c(j) = x(idx_[static_cast<std::size_t>(j)]);
        return c;
    }
    [[nodiscard]] Matrix jacobian(const Vector&) const override {
        Matrix j = Matrix::Zero(dim(), n_);
        for (Index r = 0; r < dim(); ++r) j(r, idx_[static_cast<std::size_t>(r)]) = 1.0;
        return j;
    }
    [[nodiscard]] std::string name() const override { return "box"; }
    [[nodiscard]] const std::vector<Index>& indices() const { return idx_; }

private:
    std::vector<Index> idx_;
    Index n_;
};

/// Scalar total energy of the cart-pole.
class CartPoleEnergyMap final : public ConstraintMap {
public:
    explicit CartPoleEnergyMap(CartPoleParams p) : model_(p) {}
    [[nodiscard]] Index dim() const override { return 1; }
    [[nodiscard]] Vector value(const Vector& x) const override { return Vector::Constant(1, model_.energy(x)); }
    [[nodiscard]] Matrix jacobian(const Vector& x) const override { return model_.energy_gradient(x).transpose(); }
    [[nodiscard]] std::string name() const override { return "energy"; }

private:
    CartPole model_;
};

// ---------------------------------------------------------------------------
// Penalty
// ---------------------------------------------------------------------------

namespace detail {
inline constexpr double kExpClamp = 500.0;

inline double logistic(double z) {
    z = std::clamp(z, -kExpClamp, kExpClamp);
    return 1.0 / (1.0 + std::exp(-z));
}

// logistic'(z), written in |z| so that z and -z give bit-identical results.
inline double logistic_slope(double z) {
    const double e = std::exp(-std::min(std::abs(z), kExpClamp));
    return e / ((1.0 + e) * (1.0 + e));
}
}  // namespace detail

struct PenaltySpec {
    double ceiling = 0.0;   // L; 0 disables the penalty
    double steepness = 1.0; // k
    Vector lower;           // c_min
    Vector upper;           // c_max
    std::shared_ptr<const ConstraintMap> map;

    [[nodiscard]] Vector midpoint() const { return 0.5 * (upper + lower); }
    [[nodiscard]] Index dim() const { return lower.size(); }

    void validate() const {
        if (!map) throw std::invalid_argument("penalty: constraint map missing");
        if (lower.size() != map->dim() || upper.size() != map->dim())
            throw std::invalid_argument("penalty: bounds must have " + std::to_string(map->dim()) + " entries");
        if (!((upper - lower).array() > 0.0).all())
            throw std::invalid_argument("penalty: lower bounds must be strictly below upper bounds");
        if (!(ceiling >= 0.0)) throw std::invalid_argument("penalty: ceiling must be non-negative");
        if (!(steepness > 0.0)) throw std::invalid_argument("penalty: steepness must be positive");
    }

    [[nodiscard]] bool active() const { return ceiling > 0.0; }
};

/// Per-constraint paired-logistic wall evaluated at constraint values c:
///   L s(k(c - c_max)) - L s(k(c - c_min)) + L - 2 L s(k(mu - c_max)),  s = logistic.
/// Evaluated through s(a) - s(b) = (tanh(a/2) - tanh(b/2)) / 2 and
/// 1 - 2 s(-a) = tanh(a/2), which makes the midpoint value exactly zero and
/// the wall exactly symmetric. Far outside it levels off at L tanh(k (c_max - c_min) / 4).
inline Vector penalty_terms(const PenaltySpec& s, const Vector& c) {
    const double l = s.ceiling, k = s.steepness;
    Vector out(c.size());
    for (Index j = 0; j < c.size(); ++j) {
        const double half_width = 0.5 * (s.upper(j) - s.lower(j));
        const double offset = std::tanh(0.5 * k * half_width);
        const double wall = 0.5 * (std::tanh(0.5 * k * (c(j) - s.upper(j))) - std::tanh(0.5 * k * (c(j) - s.lower(j))));
        out(j) = l * (wall + offset);
    }
    return out;
}

/// d(penalty_terms)/dc, elementwise.
inline Vector penalty_slopes(const PenaltySpec& s, const Vector& c) {
    Vector out(c.size());
    for (Index j = 0; j < c.size(); ++j)
        out(j) = s.ceiling * s.steepness *
                 (detail::logistic_slope(s.steepness * (c(j) - s.upper(j))) -
                  detail::logistic_slope(s.steepness * (c(j) - s.lower(j))));
    return out;
}

/// Penalty summed over constraints, tiny negative round-off clamped to 0.
inline double penalty(const PenaltySpec& s, const Vector& x) {
    if (!s.active()) return 0.0;
    return std::max(0.0, penalty_terms(s, s.map->value(x)).sum());
}

inline Vector penalty_gradient(const PenaltySpec& s, const Vector& x) {
    if (!s.active()) return Vector::Zero(x.size());
    return s.map->jacobian(x).transpose() * penalty_slopes(s, s.map->value(x));
}

/// True when every constraint component lies in [lower, upper] (inclusive),
/// optionally widened by `margin` times the bound magnitude.
inline bool within_bounds(const PenaltySpec& s, const Vector& x, double margin = 0.0) {
    const Vector c = s.map->value(x);
    for (Index j = 0; j < c.size(); ++j) {
        const double lo = s.lower(j) - margin * std::abs(s.lower(j));
        const double hi = s.upper(j) + margin * std::abs(s.upper(j));
        if (!(c(j) >= lo && c(j) <= hi)) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Quadratic costs
// ---------------------------------------------------------------------------

struct CostSpec {
    Matrix state_weight;    // Q, n x n, symmetric PSD
    Matrix control_weight;  // R, m x m, symmetric PD
    Vector target;          // x_target
    Matrix terminal_weight; // g(x) = 0.5 (x - target)' Qf (x - target)

    void validate() const {
        const Index n = target.size();
        auto square = [](const Matrix& m, Index d) { return m.rows() == d && m.cols() == d; };
        if (!square(state_weight, n) || !square(terminal_weight, n))
            throw std::invalid_argument("cost: state and terminal weights must be " + std::to_string(n) + "x" +
                                        std::to_string(n));
        if (control_weight.rows() == 0 || control_weight.rows() != control_weight.cols())
            throw std::invalid_argument("cost: control weight must be square");
        auto symmetric = [](const Matrix& m) { return (m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-12; };
        if (!symmetric(state_weight) || !symmetric(terminal_weight) || !symmetric(control_weight))
            throw std::invalid_argument("cost: weight matrices must be symmetric");
        auto min_eig = [](const Matrix& m) {
            return Eigen::SelfAdjointEigenSolver<Matrix>(m, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
        };
        if (min_eig(state_weight) < -1e-12 || min_eig(terminal_weight) < -1e-12)
            throw std::invalid_argument("cost: state and terminal weights must be positive semi-definite");
        if (!(min_eig(control_weight) > 0.0)) throw std::invalid_argument("cost: control weight must be positive definite");
    }
};

inline double quadratic_state_cost(const CostSpec& c, const Vector& x) {
    const Vector d = x - c.target;
    return 0.5 * d.dot(c.state_weight * d);
}

/// c(x) = q(x) + p(x)
inline double state_cost(const CostSpec& c, const PenaltySpec& p, const Vector& x) {
    return quadratic_state_cost(c, x) + penalty(p, x);
}

inline double terminal_cost(const CostSpec& c, const Vector& x) {
    const Vector d = x - c.target;
    return 0.5 * d.dot(c.terminal_weight * d);
}

inline Vector terminal_cost_gradient(const CostSpec& c, const Vector& x) {
    return c.terminal_weight * (x - c.target);
}

// ---------------------------------------------------------------------------
// Control saturation
// ---------------------------------------------------------------------------

class SaturationError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

struct SaturationSpec {
    Vector limit;   // U_max
    Vector weight;  // c_i

    void validate() const {
        if (limit.size() == 0 || limit.size() != weight.size())
            throw std::invalid_argument("saturation: limit and weight must be non-empty and of equal length");
        if (!(limit.array() > 0.0).all() || !(weight.array() > 0.0).all())
            throw std::invalid_argument("saturation: limits and weights must be positive");
    }
};

/// Largest double below 1. Keeps saturated controls strictly inside their limits
/// where the sigmoid would otherwise round to exactly +-1.
inline constexpr double kSigBound = 1.0 - 0x1.0p-53;

/// 2 / (1 + exp(-v)) - 1, an odd sigmoid onto (-1, 1).
inline double sig(double v) {
    const double s = 2.0 / (1.0 + std::exp(-std::clamp(v, -detail::kExpClamp, detail::kExpClamp))) - 1.0;
    return std::clamp(s, -kSigBound, kSigBound);
}

inline Vector sig(const Vector& v) { return v.unaryExpr([](double e) { return sig(e); }); }

/// Inverse of sig on (-1, 1).
inline double sig_inverse(double z) { return std::log1p(z) - std::log1p(-z); }

/// u* = U_max .* sig(-R^{-1} G' V_x)
inline Vector saturated_control(const Vector& value_gradient, const Matrix& control_matrix, const Matrix& r,
                                const Vector& limit) {
    const Vector arg = -r.llt().solve(control_matrix.transpose() * value_gradient);
    return limit.cwiseProduct(sig(arg));
}

/// sum_i c_i * integral_0^{u_i} sig^{-1}(v / U_i) dv, in closed form
///   c_i U_i [(1+z) ln(1+z) + (1-z) ln(1-z)],  z = u_i / U_i.
inline double saturation_cost(const SaturationSpec& s, const Vector& u) {
    double total = 0.0;
    for (Index i = 0; i < u.size(); ++i) {
        const double z = u(i) / s.limit(i);
        if (!(std::abs(z) < 1.0))
            throw SaturationError("saturation_cost: |u_" + std::to_string(i) + "| = " + std::to_string(std::abs(u(i))) +
                                  " is not below its limit " + std::to_string(s.limit(i)));
        total += s.weight(i) * s.limit(i) * ((1.0 + z) * std::log1p(z) + (1.0 - z) * std::log1p(-z));
    }
    return total;
}

inline Vector saturation_cost_gradient(const SaturationSpec& s, const Vector& u) {
    Vector g(u.size());
    for (Index i = 0; i < u.size(); ++i) {
        const double z = u(i) / s.limit(i);
        if (!(std::abs(z) < 1.0)) throw SaturationError("saturation_cost_gradient: control at or beyond its limit");
        g(i) = s.weight(i) * sig_inverse(z);
    }
    return g;
}

/// h = c(x) + V_x' G u* + sum_i S_i(u*_i)
inline double hamiltonian(const CostSpec& cost, const PenaltySpec& pen, const SaturationSpec& sat, const Vector& x,
                          const Vector& value_gradient, const Matrix& control_matrix, const Vector& u) {
    return state_cost(cost, pen, x) + value_gradient.dot(control_matrix * u) + saturation_cost(sat, u);
}

// ---------------------------------------------------------------------------
// Batched tape versions (one batch member per row)
// ---------------------------------------------------------------------------

/// Row-wise 0.5 (x - target)' W (x - target), M x 1. W must be symmetric.
inline ad::Var quadratic_form_on_tape(const ad::Var& states, const Vector& target, const Matrix& weight) {
    ad::Tape& t = *states.tape();
    ad::Var d = ad::sub(states, t.constant(target.transpose()));
    ad::Var dw = ad::matmul(d, t.constant(weight));
    return ad::scale(ad::row_sum(ad::mul(d, dw)), 0.5);
}

/// Row-wise penalty, M x 1.
inline ad::Var penalty_on_tape(const PenaltySpec& spec, const ad::Var& states) {
    const ad::Matrix& x = states.value();
    const Index rows = x.rows(), n = x.cols();
    ad::Matrix value = ad::Matrix::Zero(rows, 1);
    ad::Matrix grad = ad::Matrix::Zero(rows, n);
    if (spec.active()) {
        for (Index i = 0; i < rows; ++i) {
            const Vector xi = x.row(i).transpose();
            const Vector c = spec.map->value(xi);
            value(i, 0) = std::max(0.0, penalty_terms(spec, c).sum());
            if (states.requires_grad())
                grad.row(i) = (spec.map->jacobian(xi).transpose() * penalty_slopes(spec, c)).transpose();
        }
    }
    const int in = states.id();
    return states.tape()->record("penalty", {states}, std::move(value),
                                 [in, grad = std::move(grad)](const ad::Matrix& g, ad::Tape& tp) {
                                     tp.accumulate(in, (grad.array().colwise() * g.col(0).array()).matrix());
                                 });
}

/// u* = U_max .* sig(pre), row-wise, with sig evaluated as tanh(pre / 2).
inline ad::Var saturated_control_on_tape(const ad::Var& pre, const Vector& limit) {
    if (pre.cols() != limit.size()) throw ad::ShapeError("saturated_control: limit size does not match controls");
    ad::Matrix z = (0.5 * pre.value().array()).tanh().matrix();
    ad::Matrix slope = (0.5 * (1.0 - z.array().square())).matrix();
    z = z.cwiseMax(-kSigBound).cwiseMin(kSigBound);
    ad::Matrix u = z.array().rowwise() * limit.transpose().array();
    const int in = pre.id();
    slope.array().rowwise() *= limit.transpose().array();
    return pre.tape()->record("saturated_control", {pre}, std::move(u),
                              [in, slope = std::move(slope)](const ad::Matrix& g, ad::Tape& tp) {
                                  tp.accumulate(in, g.cwiseProduct(slope));
                              });
}

/// Row-wise sum_i S_i(u_i), M x 1. Throws SaturationError if any control
/// reaches its limit.
inline ad::Var saturation_cost_on_tape(const SaturationSpec& spec, const ad::Var& controls) {
    const ad::Matrix& u = controls.value();
    ad::Matrix value(u.rows(), 1);
    ad::Matrix grad(u.rows(), u.cols());
    for (Index i = 0; i < u.rows(); ++i) {
        const Vector ui = u.row(i).transpose();
        value(i, 0) = saturation_cost(spec, ui);
        grad.row(i) = saturation_cost_gradient(spec, ui).transpose();
    }
    const int in = controls.id();
    return controls.tape()->record("saturation_cost", {controls}, std::move(value),
                                   [in, grad = std::move(grad)](const ad::Matrix& g, ad::Tape& tp) {
                                       tp.accumulate(in, (grad.array().colwise() * g.col(0).array()).matrix());
                                   });
}

}  // namespace cfbsde
