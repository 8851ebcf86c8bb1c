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

// Controlled SDEs  dx = f(x,t) dt + G(x,t) u dt + Sigma(x,t) dw
// and their explicit Euler-Maruyama discretisation.

#include "cfbsde/random.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <concepts>
#include <sstream>
#include <stdexcept>
#include <string>

namespace cfbsde {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// A model usable by the rollout. Besides f, G and Sigma it must expose
/// vector-Jacobian products so the rollout can differentiate through them:
///   drift_vjp(x,t,a)                  = grad_x  a' f(x,t)
///   control_bilinear_grad(x,t,a,b)    = grad_x  a' G(x,t) b
///   diffusion_bilinear_grad(x,t,a,b)  = grad_x  a' Sigma(x,t) b
template <typename M>
concept ControlledSde = requires(const M& m, const Vector& x, double t, const Vector& a, const Vector& b) {
    { m.state_dim() } -> std::convertible_to<Index>;
    { m.control_dim() } -> std::convertible_to<Index>;
    { m.noise_dim() } -> std::convertible_to<Index>;
    { m.drift(x, t) } -> std::convertible_to<Vector>;
    { m.control_matrix(x, t) } -> std::convertible_to<Matrix>;
    { m.diffusion(x, t) } -> std::convertible_to<Matrix>;
    { m.drift_vjp(x, t, a) } -> std::convertible_to<Vector>;
    { m.control_bilinear_grad(x, t, a, b) } -> std::convertible_to<Vector>;
    { m.diffusion_bilinear_grad(x, t, a, b) } -> std::convertible_to<Vector>;
};

class NonFiniteStateError : public std::runtime_error {
public:
    explicit NonFiniteStateError(Vector state)
        : std::runtime_error(describe(state)), state_(std::move(state)) {}
    [[nodiscard]] const Vector& state() const { return state_; }

private:
    static std::string describe(const Vector& s) {
        std::ostringstream os;
        os << "euler_step produced a non-finite state [" << s.transpose() << "]";
        return os.str();
    }
    Vector state_;
};

// ---------------------------------------------------------------------------
// Cart-pole
// ---------------------------------------------------------------------------

struct CartPoleParams {
    double cart_mass = 1.0;   // kg
    double pole_mass = 0.01;  // kg, point mass at the tip
    double pole_length = 0.5; // m
    double gravity = 9.81;    // m/s^2
    double noise_scale = 1.0;

    void validate() const {
        if (!(cart_mass > 0.0) || !(pole_mass > 0.0) || !(pole_length > 0.0))
            throw std::invalid_argument("cart-pole masses and pole length must be positive");
        if (!(noise_scale >= 0.0)) throw std::invalid_argument("cart-pole noise_scale must be non-negative");
        if (!std::isfinite(gravity)) throw std::invalid_argument("cart-pole gravity must be finite");
    }
};

/// State [x, theta, x_dot, theta_dot], theta measured from the downward
/// position and never wrapped. One force input, noise on both velocities.
class CartPole {
public:
    /// Attenuation applied to the Brownian increments on the velocity channels.
    static constexpr double kVelocityNoiseFactor = 0.25;

    explicit CartPole(CartPoleParams p = {}) : p_(p) { p_.validate(); }

    [[nodiscard]] const CartPoleParams& params() const { return p_; }
    [[nodiscard]] Index state_dim() const { return 4; }
    [[nodiscard]] Index control_dim() const { return 1; }
    [[nodiscard]] Index noise_dim() const { return 2; }

    /// Unforced accelerations solved from the coupled equations of motion
    ///   (M+m) xdd + m L sin(th) thd^2 - m L cos(th) thdd = u
    ///   m L^2 thdd - m L cos(th) xdd - m g L sin(th)     = 0
    [[nodiscard]] Vector drift(const Vector& s, double /*t*/ = 0.0) const {
        const double th = s(1), thd = s(3);
        const double sn = std::sin(th), cs = std::cos(th);
        const double den = mass_term(sn);
        const double xdd = p_.pole_mass * sn * (p_.gravity * cs - p_.pole_length * thd * thd) / den;
        const double thdd = (p_.gravity * sn + cs * xdd) / p_.pole_length;
        Vector f(4);
        f << s(2), thd, xdd, thdd;
        return f;
    }

    [[nodiscard]] Matrix control_matrix(const Vector& s, double /*t*/ = 0.0) const {
        const double sn = std::sin(s(1)), cs = std::cos(s(1));
        const double den = mass_term(sn);
        Matrix g(4, 1);
        g << 0.0, 0.0, 1.0 / den, cs / (p_.pole_length * den);
        return g;
    }

    [[nodiscard]] Matrix diffusion(const Vector& /*s*/ = {}, double /*t*/ = 0.0) const {
        Matrix sig = Matrix::Zero(4, 2);
        sig(2, 0) = sig(3, 1) = p_.noise_scale * kVelocityNoiseFactor;
        return sig;
    }

    [[nodiscard]] Vector drift_vjp(const Vector& s, double /*t*/, const Vector& a) const {
        const double th = s(1), w = s(3);
        const double sn = std::sin(th), cs = std::cos(th);
        const double m = p_.pole_mass, l = p_.pole_length, g = p_.gravity;
        const double den = mass_term(sn);
        const double num = m * sn * (g * cs - l * w * w);
        const double xdd = num / den;
        const double dnum_dth = m * (g * (cs * cs - sn * sn) - l * w * w * cs);
        const double dden_dth = 2.0 * m * sn * cs;
        const double dxdd_dth = (dnum_dth * den - num * dden_dth) / (den * den);
        const double dxdd_dw = -2.0 * m * sn * l * w / den;
        const double dthdd_dth = (g * cs - sn * xdd + cs * dxdd_dth) / l;
        const double dthdd_dw = cs * dxdd_dw / l;
        Vector out(4);
        out << 0.0, a(2) * dxdd_dth + a(3) * dthdd_dth, a(0), a(1) + a(2) * dxdd_dw + a(3) * dthdd_dw;
        return out;
    }

    [[nodiscard]] Vector control_bilinear_grad(const Vector& s, double /*t*/, const Vector& a, const Vector& b) const {
        const double sn = std::sin(s(1)), cs = std::cos(s(1));
        const double m = p_.pole_mass, l = p_.pole_length;
        const double den = mass_term(sn);
        const double dden = 2.0 * m * sn * cs;
        const double dg2 = -dden / (den * den);
        const double dg3 = (-sn * den - cs * dden) / (l * den * den);
        Vector out = Vector::Zero(4);
        out(1) = b(0) * (a(2) * dg2 + a(3) * dg3);
        return out;
    }

    [[nodiscard]] Vector diffusion_bilinear_grad(const Vector& /*s*/, double /*t*/, const Vector& /*a*/,
                                                 const Vector& /*b*/) const {
        return Vector::Zero(4);
    }

    /// Total energy: cart kinetic + pole potential (zero hanging down) + pole kinetic.
    [[nodiscard]] double energy(const Vector& s) const {
        const double m = p_.pole_mass, l = p_.pole_length;
        return 0.5 * p_.cart_mass * s(2) * s(2) + m * p_.gravity * l * (1.0 - std::cos(s(1))) +
               0.5 * m * l * l * s(3) * s(3);
    }

    [[nodiscard]] Vector energy_gradient(const Vector& s) const {
        const double m = p_.pole_mass, l = p_.pole_length;
        Vector g(4);
        g << 0.0, m * p_.gravity * l * std::sin(s(1)), p_.cart_mass * s(2), m * l * l * s(3);
        return g;
    }

private:
    [[nodiscard]] double mass_term(double sn) const { return p_.cart_mass + p_.pole_mass * sn * sn; }

    CartPoleParams p_;
};

// ---------------------------------------------------------------------------
// Linear time-invariant model, mostly for tests: f = A x, G = B, Sigma = S.
// ---------------------------------------------------------------------------

class LinearSde {
public:
    LinearSde(Matrix a, Matrix b, Matrix s) : a_(std::move(a)), b_(std::move(b)), s_(std::move(s)) {
        if (a_.rows() != a_.cols() || b_.rows() != a_.rows() || s_.rows() != a_.rows())
            throw std::invalid_argument("LinearSde: inconsistent matrix shapes");
    }

    [[nodiscard]] Index state_dim() const { return a_.rows(); }
    [[nodiscard]] Index control_dim() const { return b_.cols(); }
    [[nodiscard]] Index noise_dim() const { return s_.cols(); }
    [[nodiscard]] Vector drift(const Vector& x, double = 0.0) const { return a_ * x; }
    [[nodiscard]] Matrix control_matrix(const Vector&, double = 0.0) const { return b_; }
    [[nodiscard]] Matrix diffusion(const Vector& = {}, double = 0.0) const { return s_; }
    [[nodiscard]] Vector drift_vjp(const Vector&, double, const Vector& a) const { return a_.transpose() * a; }
    [[nodiscard]] Vector control_bilinear_grad(const Vector&, double, const Vector&, const Vector&) const {
        return Vector::Zero(state_dim());
    }
    [[nodiscard]] Vector diffusion_bilinear_grad(const Vector&, double, const Vector&, const Vector&) const {
        return Vector::Zero(state_dim());
    }

private:
    Matrix a_, b_, s_;
};

// ---------------------------------------------------------------------------
// Stepping
// ---------------------------------------------------------------------------

/// x + f dt + G u dt + Sigma dw.
template <ControlledSde Model>
Vector euler_step(const Model& model, const Vector& x, const Vector& u, const Vector& dw, double dt, double t = 0.0) {
    if (!(dt > 0.0)) throw std::invalid_argument("euler_step: dt must be positive");
    Vector next = x + model.drift(x, t) * dt + model.control_matrix(x, t) * u * dt + model.diffusion(x, t) * dw;
    if (!next.allFinite()) throw NonFiniteStateError(next);
    return next;
}

/// Brownian increment with covariance dt * I.
inline Vector sample_noise(RandomStream& stream, Index dim, double dt) {
    if (!(dt > 0.0)) throw std::invalid_argument("sample_noise: dt must be positive");
    const double sd = std::sqrt(dt);
    Vector dw(dim);
    for (Index i = 0; i < dim; ++i) dw(i) = sd * stream.normal();
    return dw;
}

/// Gamma with G = Sigma * Gamma, by least squares. For the cart-pole the
/// velocity block of Sigma is diagonal, so the solve is exact division.
template <ControlledSde Model>
Matrix control_noise_factor(const Model& model, const Vector& x, double t = 0.0) {
    return model.diffusion(x, t).colPivHouseholderQr().solve(model.control_matrix(x, t));
}

}  // namespace cfbsde
