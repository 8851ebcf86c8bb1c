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

#include "cfbsde/rollout.hpp"
#include "param_check.hpp"
#include "test_helpers.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace cfbsde;

namespace {

Problem box_problem(double ceiling = 5.0, double k = 3.0) {
    Problem p;
    p.cost.state_weight = (Vector(4) << 0.0, 20.0, 0.0, 1.0).finished().asDiagonal();
    p.cost.control_weight = Matrix::Identity(1, 1);
    p.cost.target = (Vector(4) << 0.0, std::numbers::pi, 0.0, 0.0).finished();
    p.cost.terminal_weight = (Vector(4) << 0.0, 100.0, 0.0, 10.0).finished().asDiagonal();
    p.penalty.ceiling = ceiling;
    p.penalty.steepness = k;
    p.penalty.lower = (Vector(2) << -1.5, -2.5).finished();
    p.penalty.upper = (Vector(2) << 1.5, 2.5).finished();
    p.penalty.map = std::make_shared<StateBoxMap>(std::vector<Index>{0, 2}, 4);
    p.saturation = {Vector::Constant(1, 10.0), Vector::Constant(1, 1.0)};
    p.validate();
    return p;
}

RolloutConfig short_config(Index steps, Index batch) {
    RolloutConfig c;
    c.steps = steps;
    c.batch = batch;
    c.initial_state = Vector::Zero(4);
    return c;
}

NetConfig net_config(Index hidden = 6) {
    NetConfig c;
    c.hidden = hidden;
    c.value_scale = 10.0;
    return c;
}

// Network with non-trivial outputs: random weights scaled up so controls
// are far from zero.
NetParams busy_params(const NetConfig& cfg, std::uint64_t seed, double head_gain = 3.0) {
    RandomStream rs(seed, 0);
    NetParams p = init_net(cfg, rs);
    p.head.weight *= head_gain;
    p.initial.value(0, 0) = 1.5;
    p.initial.value_gradient = test::uniform_matrix(rs, 1, 4, -2, 2);
    p.lstm.bias = test::uniform_matrix(rs, 1, 4 * cfg.hidden, -0.5, 0.5);
    return p;
}

struct Outcome {
    RolloutResult result;
    double loss = 0.0;
    NetParams grads;
};

Outcome run_once(const CartPole& model, const Problem& prob, const NetParams& params, const NetConfig& ncfg,
             const RolloutConfig& rcfg, const std::vector<Matrix>& noise, double decay = 0.0, bool record = false,
             bool with_grads = false) {
    ad::Tape t;
    const NetVars v = attach(t, params, with_grads);
    Outcome r;
    r.result = rollout(model, prob, v, ncfg, rcfg, noise, {0, record});
    ad::Var l = loss(r.result, prob.cost, v, decay);
    r.loss = l.scalar();
    if (with_grads) r.grads = test::gradients_of(t.backward(l), v);
    return r;
}

}  // namespace

TEST(MakeNoise, ShapeVarianceAndPerMemberStreams) {
    const auto dw = make_noise(3, 1, 64, 200, 2, 0.01);
    ASSERT_EQ(dw.size(), 200u);
    EXPECT_EQ(dw[0].rows(), 64);
    EXPECT_EQ(dw[0].cols(), 2);
    double sq = 0.0;
    for (const Matrix& m : dw) sq += m.squaredNorm();
    EXPECT_NEAR(sq / (200 * 64 * 2) / 0.01, 1.0, 0.02);
    // Member 5 of a batch is the same stream as member 0 of a batch offset by 5.
    const auto shifted = make_noise(3, 1, 4, 200, 2, 0.01, 5);
    for (std::size_t n = 0; n < 200; ++n) EXPECT_EQ(shifted[n].row(0), dw[n].row(5));
    const auto other = make_noise(3, 2, 64, 200, 2, 0.01);
    EXPECT_NE(other[0], dw[0]);
}

TEST(Rollout, ZeroNetworkNoNoiseReducesToRunningCost) {
    const CartPole model;
    const Problem prob = box_problem();
    const NetConfig ncfg = net_config();
    RandomStream rs(1, 0);
    NetParams params = init_net(ncfg, rs);
    params.for_each_block([](const char*, Matrix& m, bool) { m.setZero(); });
    params.initial.value(0, 0) = 0.3;
    RolloutConfig rcfg = short_config(60, 3);
    rcfg.initial_state = (Vector(4) << 1.4, 0.5, 2.0, -0.3).finished();
    const std::vector<Matrix> noise(60, Matrix::Zero(3, 2));
    const Outcome r = run_once(model, prob, params, ncfg, rcfg, noise);

    Vector x = rcfg.initial_state;
    double y = 0.3 * ncfg.value_scale;
    for (int n = 0; n < 60; ++n) {
        y -= state_cost(prob.cost, prob.penalty, x) * rcfg.dt;
        x = euler_step(model, x, Vector::Zero(1), Vector::Zero(2), rcfg.dt);
    }
    for (Index m = 0; m < 3; ++m) {
        EXPECT_EQ(r.result.values(m, 0), 3.0);
        EXPECT_NEAR(r.result.values(m, 60), y, 1e-12);
        EXPECT_LT((r.result.states.back().row(m).transpose() - x).cwiseAbs().maxCoeff(), 1e-12);
    }
    for (const Matrix& u : r.result.controls) EXPECT_EQ(u, Matrix::Zero(3, 1));
}

TEST(Rollout, SeededRunsAreBitIdentical) {
    const CartPole model;
    const Problem prob = box_problem();
    const NetConfig ncfg = net_config();
    const NetParams params = busy_params(ncfg, 2);
    const RolloutConfig rcfg = short_config(40, 8);
    auto go = [&]() { return run_once(model, prob, params, ncfg, rcfg, make_noise(9, 1, 8, 40, 2, rcfg.dt), 1e-3, false, true); };
    const Outcome a = go(), b = go();
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(a.result.values, b.result.values);
    for (std::size_t n = 0; n < a.result.states.size(); ++n) EXPECT_EQ(a.result.states[n], b.result.states[n]);
    std::vector<Matrix> gb;
    b.grads.for_each_block([&](const char*, const Matrix& m, bool) { gb.push_back(m); });
    std::size_t i = 0;
    a.grads.for_each_block([&](const char* name, const Matrix& m, bool) { EXPECT_EQ(m, gb[i++]) << name; });
}

TEST(Rollout, ValueUpdateDualFormIdentity) {
    const CartPole model;
    const Problem prob = box_problem(10.0, 4.0);
    const NetConfig ncfg = net_config();
    const NetParams params = busy_params(ncfg, 3);
    const RolloutConfig rcfg = short_config(275, 16);
    const Outcome r = run_once(model, prob, params, ncfg, rcfg, make_noise(4, 1, 16, 275, 2, rcfg.dt), 0.0, true);
    ASSERT_EQ(r.result.terms.size(), 275u);
    double worst = 0.0, busiest = 0.0;
    for (const StepTerms& s : r.result.terms) {
        const Matrix reduced = s.value_before - (s.state_cost + s.saturation_cost) * rcfg.dt + s.martingale;
        worst = std::max(worst, (reduced - s.value_after).cwiseAbs().maxCoeff());
        const Matrix hform = -s.hamiltonian + s.cross;
        worst = std::max(worst, (hform + s.state_cost + s.saturation_cost).cwiseAbs().maxCoeff());
        busiest = std::max(busiest, s.cross.cwiseAbs().maxCoeff());
    }
    EXPECT_LT(worst, 1e-12);
    EXPECT_GT(busiest, 1.0);  // the cross term is genuinely active
}

TEST(Rollout, ControlsStayStrictlyInsideLimits) {
    const CartPole model;
    const Problem prob = box_problem();
    const NetConfig ncfg = net_config();
    for (double gain : {1.0, 50.0, 1e4}) {
        NetParams params = busy_params(ncfg, 5, gain);
        params.initial.value_gradient *= gain;
        const RolloutConfig rcfg = short_config(100, 8);
        const Outcome r = run_once(model, prob, params, ncfg, rcfg, make_noise(6, 1, 8, 100, 2, rcfg.dt));
        double worst = 0.0;
        for (const Matrix& u : r.result.controls) worst = std::max(worst, u.cwiseAbs().maxCoeff());
        EXPECT_LT(worst, 10.0) << gain;
        if (gain > 100) { EXPECT_GT(worst, 9.999) << gain; }
    }
}

TEST(Rollout, BatchMembersAreIndependent) {
    const CartPole model;
    const Problem prob = box_problem();
    const NetConfig ncfg = net_config();
    const NetParams params = busy_params(ncfg, 7);
    const RolloutConfig rcfg = short_config(50, 5);
    const auto noise = make_noise(8, 1, 5, 50, 2, rcfg.dt);
    const std::array<Index, 5> perm{3, 0, 4, 1, 2};
    std::vector<Matrix> permuted = noise;
    for (std::size_t n = 0; n < noise.size(); ++n)
        for (Index m = 0; m < 5; ++m) permuted[n].row(m) = noise[n].row(perm[static_cast<std::size_t>(m)]);
    const Outcome a = run_once(model, prob, params, ncfg, rcfg, noise);
    const Outcome b = run_once(model, prob, params, ncfg, rcfg, permuted);
    for (Index m = 0; m < 5; ++m) {
        EXPECT_EQ(b.result.values.row(m), a.result.values.row(perm[static_cast<std::size_t>(m)]));
        EXPECT_EQ(b.result.states.back().row(m), a.result.states.back().row(perm[static_cast<std::size_t>(m)]));
    }
}

TEST(Rollout, LossGradientsMatchFiniteDifferences) {
    const CartPole model;
    const Problem prob = box_problem(5.0, 3.0);
    const NetConfig ncfg = net_config(4);
    const NetParams params = busy_params(ncfg, 11, 1.0);
    RolloutConfig rcfg = short_config(10, 4);
    rcfg.initial_state = (Vector(4) << 1.2, 0.3, 2.2, -0.5).finished();  // starts near the walls
    const auto noise = make_noise(12, 1, 4, 10, 2, rcfg.dt);
    const Outcome r = run_once(model, prob, params, ncfg, rcfg, noise, 1e-2, false, true);
    // Every 7th entry gives a spread subset (well over ten parameters).
    const auto worst = test::worst_param_error(
        params, r.grads, [&](const NetParams& q) { return run_once(model, prob, q, ncfg, rcfg, noise, 1e-2).loss; },
        1e-6, 7);
    EXPECT_LT(worst.error, 1e-3) << worst.block << "[" << worst.index << "]";
}

TEST(Rollout, InitialValueGradientIsMeanMismatch) {
    const CartPole model;
    const Problem prob = box_problem();
    const NetConfig ncfg = net_config();
    const NetParams params = busy_params(ncfg, 13);
    const RolloutConfig rcfg = short_config(30, 6);
    const auto noise = make_noise(14, 1, 6, 30, 2, rcfg.dt);
    const Outcome r = run_once(model, prob, params, ncfg, rcfg, noise, 0.0, false, true);
    double mismatch = 0.0;
    const Matrix& xN = r.result.states.back();
    for (Index m = 0; m < 6; ++m)
        mismatch += r.result.values(m, 30) - terminal_cost(prob.cost, xN.row(m).transpose());
    const double expected = 2.0 * mismatch / 6.0 * ncfg.value_scale;
    EXPECT_NEAR(r.grads.initial.value(0, 0), expected, 1e-9 * std::max(1.0, std::abs(expected)));
    NetParams up = params, down = params;
    up.initial.value(0, 0) += 1e-6;
    down.initial.value(0, 0) -= 1e-6;
    const double fd = (run_once(model, prob, up, ncfg, rcfg, noise).loss - run_once(model, prob, down, ncfg, rcfg, noise).loss) / 2e-6;
    EXPECT_NEAR(fd, expected, 1e-5 * std::max(1.0, std::abs(expected)));
}

TEST(Loss, PerfectMatchAndWeightDecay) {
    const Problem prob = box_problem();
    const NetConfig ncfg = net_config();
    const NetParams params = busy_params(ncfg, 15);
    ad::Tape t;
    const NetVars v = attach(t, params, true);
    RandomStream rs(16, 0);
    const Matrix xN = test::uniform_matrix(rs, 5, 4, -2, 2);
    Matrix g(5, 1);
    for (Index m = 0; m < 5; ++m) g(m, 0) = terminal_cost(prob.cost, xN.row(m).transpose());
    RolloutResult res;
    res.terminal_state = t.constant(xN);
    res.terminal_value = t.constant(g);
    EXPECT_NEAR(loss(res, prob.cost, v, 0.0).scalar(), 0.0, 1e-20);
    EXPECT_NEAR(loss(res, prob.cost, v, 0.3).scalar(), 0.3 * params.theta_squared_norm(), 1e-12);
    res.terminal_value = t.constant(g.array() + 2.0);
    EXPECT_NEAR(loss(res, prob.cost, v, 0.0).scalar(), 4.0, 1e-12);
}

TEST(Rollout, NonFiniteValueRaisesDivergence) {
    const CartPole model;
    const Problem prob = box_problem();
    const NetConfig ncfg = net_config();
    NetParams params = busy_params(ncfg, 17);
    params.initial.value_gradient(0, 2) = std::numeric_limits<double>::infinity();
    const RolloutConfig rcfg = short_config(5, 3);
    try {
        (void)run_once(model, prob, params, ncfg, rcfg, make_noise(18, 1, 3, 5, 2, rcfg.dt));
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.step(), 0);
        EXPECT_EQ(e.member(), 0);
    }
}

TEST(Rollout, RejectsMismatchedInputs) {
    const CartPole model;
    const Problem prob = box_problem();
    const NetConfig ncfg = net_config();
    const NetParams params = busy_params(ncfg, 19);
    const RolloutConfig rcfg = short_config(5, 3);
    EXPECT_THROW((void)run_once(model, prob, params, ncfg, rcfg, make_noise(1, 1, 3, 4, 2, rcfg.dt)), std::invalid_argument);
    EXPECT_THROW((void)run_once(model, prob, params, ncfg, rcfg, make_noise(1, 1, 2, 5, 2, rcfg.dt)), std::invalid_argument);
}

TEST(Evaluate, DeterministicSingleTrialEnvelopeCollapses) {
    CartPoleParams cp;
    const CartPole model(cp);
    const Problem prob = box_problem();
    const NetConfig ncfg = net_config();
    const NetParams params = busy_params(ncfg, 20);
    const RolloutConfig rcfg = short_config(80, 1);
    const EvaluationReport rep = evaluate(model, prob, params, ncfg, rcfg, 1, 21);
    EXPECT_EQ(rep.state_envelope.min, rep.state_envelope.max);
    EXPECT_EQ(rep.state_envelope.mean, rep.state_envelope.max);
    EXPECT_EQ(rep.states.size(), 81u);
    EXPECT_EQ(rep.constraint_kind, "box");
}

TEST(Evaluate, ViolationFractionMatchesRecount) {
    const CartPole model;
    const Problem prob = box_problem();
    const NetConfig ncfg = net_config();
    const NetParams params = busy_params(ncfg, 22, 6.0);
    const RolloutConfig rcfg = short_config(275, 1);
    const EvaluationReport rep = evaluate(model, prob, params, ncfg, rcfg, 64, 23);
    std::size_t bad = 0, total = 0;
    for (const Matrix& s : rep.states)
        for (Index m = 0; m < s.rows(); ++m, ++total)
            if (std::abs(s(m, 0)) > 1.5 || std::abs(s(m, 2)) > 2.5) ++bad;
    EXPECT_DOUBLE_EQ(rep.violation_fraction, static_cast<double>(bad) / static_cast<double>(total));
    EXPECT_EQ(rep.terminal_states, rep.states.back());
    EXPECT_LT(rep.max_abs_control, 10.0);
}

TEST(ViolationFraction, MidpointTrajectoryIsInside) {
    const Problem prob = box_problem();
    const std::vector<Matrix> states(10, Matrix::Zero(4, 4));
    EXPECT_EQ(violation_fraction(prob.penalty, states), 0.0);
    std::vector<Matrix> some = states;
    some[3](1, 0) = 1.51;
    EXPECT_DOUBLE_EQ(violation_fraction(prob.penalty, some), 1.0 / 40.0);
    EXPECT_EQ(violation_fraction(prob.penalty, some, 0.02), 0.0);
}
