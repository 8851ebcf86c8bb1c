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

#include "cfbsde/cost.hpp"
#include "cfbsde/dynamics.hpp"
#include "test_helpers.hpp"

#include <boost/math/quadrature/tanh_sinh.hpp>
#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <numbers>

using namespace cfbsde;

namespace {

// Identity map on a scalar, as in a one-dimensional penalty plot.
PenaltySpec scalar_wall(double ceiling, double k, double lo, double hi) {
    PenaltySpec s;
    s.ceiling = ceiling;
    s.steepness = k;
    s.lower = Vector::Constant(1, lo);
    s.upper = Vector::Constant(1, hi);
    s.map = std::make_shared<StateBoxMap>(std::vector<Index>{0}, 1);
    s.validate();
    return s;
}

PenaltySpec cart_box(double ceiling, double k) {
    PenaltySpec s;
    s.ceiling = ceiling;
    s.steepness = k;
    s.lower = (Vector(2) << -1.5, -2.5).finished();
    s.upper = (Vector(2) << 1.5, 2.5).finished();
    s.map = std::make_shared<StateBoxMap>(std::vector<Index>{0, 2}, 4);
    s.validate();
    return s;
}

Vector v1(double a) { return Vector::Constant(1, a); }

CostSpec cart_cost(const Vector& q) {
    CostSpec c;
    c.state_weight = q.asDiagonal();
    c.control_weight = Matrix::Identity(1, 1);
    c.target = (Vector(4) << 0.0, std::numbers::pi, 0.0, 0.0).finished();
    c.terminal_weight = Matrix::Identity(4, 4);
    c.validate();
    return c;
}

SaturationSpec cart_saturation(double weight = 1.0) {
    SaturationSpec s{Vector::Constant(1, 10.0), Vector::Constant(1, weight)};
    s.validate();
    return s;
}

// c * integral_0^u log((1 + v/U) / (1 - v/U)) dv by tanh-sinh quadrature.
double saturation_quadrature(double u, double limit, double weight) {
    if (u == 0.0) return 0.0;
    boost::math::quadrature::tanh_sinh<double> integrator;
    const double lo = std::min(0.0, u), hi = std::max(0.0, u);
    const double area = integrator.integrate(
        [&](double v) { return std::log((1.0 + v / limit) / (1.0 - v / limit)); }, lo, hi);
    return weight * (u >= 0 ? area : -area);
}

}  // namespace

TEST(Penalty, ZeroAtMidpoint) {
    const PenaltySpec box = cart_box(50.0, 6.0);
    EXPECT_EQ(penalty(box, Vector::Zero(4)), 0.0);
    const PenaltySpec s = scalar_wall(100.0, 8.0, -1.0, 3.0);
    EXPECT_EQ(penalty_terms(s, v1(1.0))(0), 0.0);
    const PenaltySpec odd = scalar_wall(7.3, 2.7, -0.4, 5.9);
    EXPECT_EQ(penalty_terms(odd, odd.midpoint())(0), 0.0);
}

TEST(Penalty, MatchesLiteralLogisticForm) {
    auto logistic = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
    RandomStream rs(30, 0);
    for (int i = 0; i < 1000; ++i) {
        const double lo = -5 + 4 * rs.uniform(), hi = lo + 0.1 + 6 * rs.uniform();
        const double l = 1 + 99 * rs.uniform(), k = 0.5 + 10 * rs.uniform();
        const PenaltySpec s = scalar_wall(l, k, lo, hi);
        const double c = -10 + 20 * rs.uniform(), mu = 0.5 * (lo + hi);
        const double literal = l * logistic(k * (c - hi)) - l * logistic(k * (c - lo)) + l - 2 * l * logistic(k * (mu - hi));
        EXPECT_NEAR(penalty_terms(s, v1(c))(0), literal, 1e-12 * l);
    }
}

TEST(Penalty, SymmetricAboutMidpoint) {
    RandomStream rs(31, 0);
    for (int i = 0; i < 1000; ++i) {
        const double lo = -5 + 4 * rs.uniform(), hi = lo + 0.1 + 6 * rs.uniform();
        const PenaltySpec s = scalar_wall(1 + 99 * rs.uniform(), 0.5 + 10 * rs.uniform(), lo, hi);
        const double mu = s.midpoint()(0), a = 10 * rs.uniform();
        EXPECT_LT(std::abs(penalty(s, v1(mu + a)) - penalty(s, v1(mu - a))), 1e-12);
    }
}

TEST(Penalty, WallShape) {
    const PenaltySpec s = scalar_wall(100.0, 8.0, -1.0, 3.0);
    EXPECT_NEAR(penalty(s, v1(-10.0)), 100.0, 1e-3);
    EXPECT_NEAR(penalty(s, v1(20.0)), 100.0, 1e-3);
    for (double x = 0.0; x <= 2.0; x += 0.05) EXPECT_LT(penalty(s, v1(x)), 0.05) << x;
}

TEST(Penalty, SteeperWallPenalisesOvershootMore) {
    double prev = -1.0;
    for (double k : {1.0, 2.0, 4.0, 8.0}) {
        const double p = penalty(scalar_wall(100.0, k, -1.0, 3.0), v1(3.5));
        EXPECT_GT(p, prev) << k;
        prev = p;
    }
}

TEST(Penalty, RangeAndMonotonicity) {
    RandomStream rs(32, 0);
    const PenaltySpec box = cart_box(10.0, 4.0);
    for (int i = 0; i < 1000; ++i) {
        const Vector x = test::uniform_vector(rs, 4, -20, 20);
        const double p = penalty(box, x);
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 2 * 10.0 + 1e-9);
    }
    const PenaltySpec s = scalar_wall(5.0, 3.0, -2.0, 1.0);
    const double mu = s.midpoint()(0);
    double prev_hi = 0.0, prev_lo = 0.0;
    for (double a = 0.0; a < 30.0; a += 0.01) {
        const double ph = penalty(s, v1(mu + a)), pl = penalty(s, v1(mu - a));
        EXPECT_GE(ph, prev_hi);
        EXPECT_GE(pl, prev_lo);
        prev_hi = ph;
        prev_lo = pl;
    }
    EXPECT_NEAR(prev_hi, 5.0 * std::tanh(3.0 * 1.5 / 2), 1e-12);
}

TEST(Penalty, DisabledCeilingIsZero) {
    PenaltySpec s = cart_box(0.0, 4.0);
    EXPECT_FALSE(s.active());
    EXPECT_EQ(penalty(s, Vector::Constant(4, 100.0)), 0.0);
    EXPECT_EQ(penalty_gradient(s, Vector::Constant(4, 100.0)), Vector::Zero(4));
}

TEST(Penalty, ValidationRejectsBadSpecs) {
    PenaltySpec s = cart_box(1.0, 1.0);
    s.lower(0) = 2.0;
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = cart_box(1.0, 1.0);
    s.steepness = 0.0;
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = cart_box(1.0, 1.0);
    s.upper = Vector::Ones(3);
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = cart_box(1.0, 1.0);
    s.map.reset();
    EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(PenaltyGradient, MatchesFiniteDifferences) {
    RandomStream rs(33, 0);
    const PenaltySpec box = cart_box(10.0, 3.0);
    auto energy = std::make_shared<CartPoleEnergyMap>(CartPoleParams{});
    PenaltySpec e;
    e.ceiling = 10.0;
    e.steepness = 2.0;
    e.lower = v1(-5.0);
    e.upper = v1(5.0);
    e.map = energy;
    e.validate();
    for (int i = 0; i < 200; ++i) {
        const Vector x = test::uniform_vector(rs, 4, -4, 4);
        for (const PenaltySpec* s : std::array<const PenaltySpec*, 2>{&box, &e}) {
            EXPECT_LT(ad::grad_check([&](const Vector& q) { return penalty(*s, q); },
                                     [&](const Vector& q) { return penalty_gradient(*s, q); }, x),
                      1e-4)
                << s->map->name();
        }
    }
}

TEST(PenaltyGradient, FlatAtMidpointAndFiniteWhenSteep) {
    EXPECT_EQ(penalty_gradient(cart_box(10.0, 3.0), Vector::Zero(4)), Vector::Zero(4));
    const PenaltySpec steep = cart_box(100.0, 50.0);
    for (double x : {-1e6, -40.0, -1.6, -0.3, 0.0, 0.2, 1.4, 7.0, 1e6}) {
        const Vector s = (Vector(4) << x, 0.0, 0.5 * x, 0.0).finished();
        const Vector g = penalty_gradient(steep, s);
        EXPECT_TRUE(g.allFinite()) << x;
        EXPECT_TRUE(std::isfinite(penalty(steep, s))) << x;
    }
    const Vector deep = (Vector(4) << 0.1, 0.0, -0.2, 0.0).finished();
    EXPECT_LT(penalty_gradient(steep, deep).cwiseAbs().maxCoeff(), 1e-25);
}

TEST(StateCost, Composition) {
    const PenaltySpec box = cart_box(10.0, 3.0);
    const CostSpec c = cart_cost((Vector(4) << 1.0, 20.0, 1.0, 2.0).finished());
    EXPECT_EQ(state_cost(c, box, c.target), 0.0);
    const CostSpec zero_q = cart_cost(Vector::Zero(4));
    RandomStream rs(34, 0);
    for (int i = 0; i < 100; ++i) {
        const Vector x = test::uniform_vector(rs, 4, -3, 3);
        EXPECT_EQ(state_cost(zero_q, box, x), penalty(box, x));
        const Vector d = x - c.target;
        const double q = 0.5 * (d(0) * d(0) + 20 * d(1) * d(1) + d(2) * d(2) + 2 * d(3) * d(3));
        EXPECT_NEAR(state_cost(c, box, x), q + penalty(box, x), 1e-12);
    }
}

TEST(CostSpec, ValidationRejectsBadWeights) {
    CostSpec c = cart_cost(Vector::Ones(4));
    c.control_weight(0, 0) = 0.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = cart_cost(Vector::Ones(4));
    c.state_weight(0, 1) = 0.5;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = cart_cost(Vector::Ones(4));
    c.terminal_weight(2, 2) = -1.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = cart_cost(Vector::Ones(4));
    c.target = Vector::Zero(3);
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(TerminalCost, GradientMatchesFiniteDifferences) {
    CostSpec c = cart_cost(Vector::Ones(4));
    c.terminal_weight = (Vector(4) << 0.0, 100.0, 0.0, 10.0).finished().asDiagonal();
    RandomStream rs(35, 0);
    for (int i = 0; i < 50; ++i) {
        const Vector x = test::uniform_vector(rs, 4, -3, 3);
        EXPECT_LT(ad::grad_check([&](const Vector& q) { return terminal_cost(c, q); },
                                 [&](const Vector& q) { return terminal_cost_gradient(c, q); }, x),
                  1e-4);
    }
}

TEST(Sig, BasicValues) {
    EXPECT_EQ(sig(0.0), 0.0);
    EXPECT_GT(sig(50.0), 1.0 - 1e-9);
    EXPECT_LT(sig(-50.0), -1.0 + 1e-9);
    RandomStream rs(36, 0);
    for (int i = 0; i < 1000; ++i) {
        const double v = -30 + 60 * rs.uniform();
        EXPECT_NEAR(sig(v), std::tanh(v / 2), 1e-12);
        if (std::abs(v) < 20) { EXPECT_NEAR(sig_inverse(sig(v)), v, 1e-6 * (1 + std::abs(v))); }
    }
}

TEST(Sig, StrictlyInsideForAllFiniteInputs) {
    for (double v : {30.0, 40.0, 800.0, 1e300, std::numeric_limits<double>::max()}) {
        EXPECT_LT(sig(v), 1.0);
        EXPECT_GT(sig(-v), -1.0);
    }
}

TEST(SaturatedControl, Properties) {
    const Matrix r = Matrix::Identity(1, 1);
    const Vector limit = Vector::Constant(1, 10.0);
    const Matrix g = (Matrix(4, 1) << 0.0, 0.0, 1.0, 2.0).finished();
    EXPECT_EQ(saturated_control(Vector::Zero(4), g, r, limit)(0), 0.0);
    const Vector huge = (Vector(4) << 0.0, 0.0, -1e300, -1e300).finished();
    const double u_max = saturated_control(huge, g, r, limit)(0);
    EXPECT_LT(u_max, 10.0);
    EXPECT_NEAR(u_max, 10.0, 1e-9);
    RandomStream rs(37, 0);
    for (int i = 0; i < 500; ++i) {
        const Vector vx = test::uniform_vector(rs, 4, -1e3, 1e3);
        const Vector u1 = saturated_control(vx, g, r, limit);
        const Vector u2 = saturated_control(vx, g, 2.0 * r, limit);
        EXPECT_LT(std::abs(u1(0)), 10.0);
        EXPECT_EQ(u1(0) > 0, u2(0) > 0);
        EXPECT_LE(std::abs(u2(0)), std::abs(u1(0)));
        // Halving the pre-saturation argument: sig^{-1}(u2/U) = sig^{-1}(u1/U) / 2.
        if (std::abs(u1(0)) < 9.99) {
            EXPECT_NEAR(sig_inverse(u2(0) / 10.0), 0.5 * sig_inverse(u1(0) / 10.0), 1e-8);
        }
    }
}

TEST(SaturationCost, MatchesQuadrature) {
    const SaturationSpec sat = cart_saturation();
    EXPECT_NEAR(saturation_cost(sat, v1(9.0)), saturation_quadrature(9.0, 10.0, 1.0), 1e-6);
    for (double z = -0.999; z <= 0.999; z += 0.001) {
        const double u = 10.0 * z;
        EXPECT_NEAR(saturation_cost(sat, v1(u)), saturation_quadrature(u, 10.0, 1.0), 1e-6) << z;
    }
    const SaturationSpec heavy = cart_saturation(2.5);
    EXPECT_NEAR(saturation_cost(heavy, v1(-7.0)), saturation_quadrature(-7.0, 10.0, 2.5), 1e-6);
}

TEST(SaturationCost, EvenZeroAtOriginAndGuarded) {
    const SaturationSpec sat = cart_saturation();
    EXPECT_EQ(saturation_cost(sat, v1(0.0)), 0.0);
    RandomStream rs(38, 0);
    for (int i = 0; i < 200; ++i) {
        const double u = -9.99 + 19.98 * rs.uniform();
        EXPECT_EQ(saturation_cost(sat, v1(u)), saturation_cost(sat, v1(-u)));
        EXPECT_GE(saturation_cost(sat, v1(u)), 0.0);
        EXPECT_LT(ad::grad_check([&](const Vector& q) { return saturation_cost(sat, q); },
                                 [&](const Vector& q) { return saturation_cost_gradient(sat, q); }, v1(u), 1e-6),
                  1e-4);
    }
    EXPECT_THROW((void)saturation_cost(sat, v1(10.0)), SaturationError);
    EXPECT_THROW((void)saturation_cost(sat, v1(-12.0)), SaturationError);
    EXPECT_THROW((void)saturation_cost_gradient(sat, v1(10.0)), SaturationError);
}

TEST(Hamiltonian, Decomposition) {
    const CartPole cp;
    const PenaltySpec box = cart_box(10.0, 3.0);
    const CostSpec c = cart_cost((Vector(4) << 0.0, 20.0, 0.0, 1.0).finished());
    const SaturationSpec sat = cart_saturation();
    RandomStream rs(39, 0);
    for (int i = 0; i < 100; ++i) {
        const Vector x = test::uniform_vector(rs, 4, -3, 3);
        const Matrix g = cp.control_matrix(x);
        EXPECT_EQ(hamiltonian(c, box, sat, x, Vector::Zero(4), g, saturated_control(Vector::Zero(4), g, c.control_weight, sat.limit)),
                  state_cost(c, box, x));
        const Vector vx = test::uniform_vector(rs, 4, -5, 5);
        const Vector u = saturated_control(vx, g, c.control_weight, sat.limit);
        const double h = hamiltonian(c, box, sat, x, vx, g, u);
        EXPECT_NEAR(h - vx.dot(g * u) - saturation_cost(sat, u), state_cost(c, box, x), 1e-12);
        const PenaltySpec off = cart_box(0.0, 3.0);
        EXPECT_EQ(hamiltonian(c, off, sat, x, vx, g, u),
                  quadratic_state_cost(c, x) + vx.dot(g * u) + saturation_cost(sat, u));
    }
}

// With u* substituted, h is minimised over u, so the envelope theorem gives
// dh/dV_x = G u*. Checked against finite differences in V_x.
TEST(Hamiltonian, GradientInValueGradient) {
    const CartPole cp;
    const PenaltySpec box = cart_box(10.0, 3.0);
    const CostSpec c = cart_cost(Vector::Ones(4));
    const SaturationSpec sat = cart_saturation();
    RandomStream rs(40, 0);
    for (int i = 0; i < 100; ++i) {
        const Vector x = test::uniform_vector(rs, 4, -3, 3);
        const Matrix g = cp.control_matrix(x);
        const Vector vx = test::uniform_vector(rs, 4, -5, 5);
        auto h_of = [&](const Vector& v) {
            return hamiltonian(c, box, sat, x, v, g, saturated_control(v, g, c.control_weight, sat.limit));
        };
        EXPECT_LT(ad::grad_check(h_of, [&](const Vector& v) { return Vector(g * saturated_control(v, g, c.control_weight, sat.limit)); }, vx),
                  1e-4);
        // and in x, with V_x held fixed
        auto h_x = [&](const Vector& s) {
            const Matrix gs = cp.control_matrix(s);
            return hamiltonian(c, box, sat, s, vx, gs, saturated_control(vx, gs, c.control_weight, sat.limit));
        };
        auto dh_x = [&](const Vector& s) {
            const Matrix gs = cp.control_matrix(s);
            const Vector u = saturated_control(vx, gs, c.control_weight, sat.limit);
            return Vector(c.state_weight * (s - c.target) + penalty_gradient(box, s) + cp.control_bilinear_grad(s, 0.0, vx, u));
        };
        EXPECT_LT(ad::grad_check(h_x, dh_x, x), 1e-4);
    }
}

TEST(ConstraintMaps, EnergyMapAndBoxJacobian) {
    const CartPoleParams p;
    const CartPoleEnergyMap e(p);
    const Vector x = (Vector(4) << 0.3, 1.0, -0.7, 2.0).finished();
    EXPECT_DOUBLE_EQ(e.value(x)(0), CartPole(p).energy(x));
    EXPECT_EQ(e.jacobian(x).rows(), 1);
    const StateBoxMap box({0, 2}, 4);
    EXPECT_EQ(box.value(x), (Vector(2) << 0.3, -0.7).finished());
    EXPECT_EQ(box.jacobian(x).row(1), (Matrix(1, 4) << 0, 0, 1, 0).finished());
    EXPECT_THROW(StateBoxMap({4}, 4), std::invalid_argument);
}

TEST(WithinBounds, MarginIsRelativeToBound) {
    const PenaltySpec box = cart_box(1.0, 1.0);
    const Vector edge = (Vector(4) << 1.52, 0.0, 0.0, 0.0).finished();
    EXPECT_FALSE(within_bounds(box, edge));
    EXPECT_TRUE(within_bounds(box, edge, 0.02));
    EXPECT_FALSE(within_bounds(box, (Vector(4) << 0.0, 0.0, -2.6, 0.0).finished(), 0.02));
}

TEST(TapeCosts, MatchScalarVersionsAndGradients) {
    const PenaltySpec box = cart_box(10.0, 3.0);
    const SaturationSpec sat = cart_saturation();
    const Matrix w = (Vector(4) << 1.0, 20.0, 1.0, 2.0).finished().asDiagonal();
    const Vector target = (Vector(4) << 0.0, std::numbers::pi, 0.0, 0.0).finished();
    RandomStream rs(41, 0);
    const Matrix states = test::uniform_matrix(rs, 6, 4, -3, 3);
    const Matrix pre = test::uniform_matrix(rs, 6, 1, -8, 8);
    ad::Tape t;
    const Matrix pv = penalty_on_tape(box, t.constant(states)).value();
    const Matrix qv = quadratic_form_on_tape(t.constant(states), target, w).value();
    const Matrix uv = saturated_control_on_tape(t.constant(pre), sat.limit).value();
    const Matrix sv = saturation_cost_on_tape(sat, t.constant(uv)).value();
    for (Index i = 0; i < 6; ++i) {
        const Vector xi = states.row(i).transpose();
        EXPECT_NEAR(pv(i, 0), penalty(box, xi), 1e-14);
        EXPECT_NEAR(qv(i, 0), 0.5 * (xi - target).dot(w * (xi - target)), 1e-12);
        EXPECT_NEAR(uv(i, 0), 10.0 * sig(pre(i, 0)), 1e-12);
        EXPECT_NEAR(sv(i, 0), saturation_cost(sat, v1(uv(i, 0))), 1e-14);
    }
    const Vector flat_states = Eigen::Map<const Vector>(states.data(), states.size());
    auto unflatten = [](ad::Tape& tp, const ad::Var& p, Index rows, Index cols) {
        std::vector<ad::Var> c;
        for (Index j = 0; j < cols; ++j)
            c.push_back(ad::matmul(tp.constant(Matrix::Identity(rows * cols, rows * cols).middleRows(j * rows, rows)), p));
        return ad::concat(std::span<const ad::Var>(c));
    };
    EXPECT_LT(ad::grad_check_tape([&](ad::Tape& tp, const ad::Var& p) { return ad::sum(penalty_on_tape(box, unflatten(tp, p, 6, 4))); },
                                  flat_states),
              1e-4);
    EXPECT_LT(ad::grad_check_tape([&](ad::Tape& tp, const ad::Var& p) {
                  return ad::sum(quadratic_form_on_tape(unflatten(tp, p, 6, 4), target, w));
              }, flat_states),
              1e-4);
    const Vector flat_pre = Eigen::Map<const Vector>(pre.data(), pre.size());
    EXPECT_LT(ad::grad_check_tape([&](ad::Tape&, const ad::Var& p) {
                  return ad::sum(saturation_cost_on_tape(sat, saturated_control_on_tape(p, sat.limit)));
              }, flat_pre),
              1e-4);
}

TEST(TapeCosts, SaturatedControlStaysInsideAtExtremeArguments) {
    ad::Tape t;
    const Matrix pre = (Matrix(3, 1) << 1e6, -1e6, 80.0).finished();
    const Matrix u = saturated_control_on_tape(t.constant(pre), Vector::Constant(1, 10.0)).value();
    EXPECT_TRUE((u.array().abs() < 10.0).all());
    EXPECT_NO_THROW((void)saturation_cost_on_tape(cart_saturation(), t.constant(u)));
}
