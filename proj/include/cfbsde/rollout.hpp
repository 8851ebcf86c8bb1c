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

// Forward unrolling of the coupled state / value system over a mini-batch.
//
// Per step n, for every batch member:
//   u   = -R^{-1} G(x_n)' V_x            u* = U_max .* sig(u)
//   h   = c(x_n) + V_x' G u* + sum_i S_i(u*_i)
//   y'  = y - h dt + V_x' (G u* dt + Sigma dw)
//   x'  = x + f dt + G u* dt + Sigma dw
//   V_x, H, C <- LSTM(x')
// Everything is recorded on the tape so the terminal loss can be
// differentiated through both the value chain and the state chain.

#include "cfbsde/cost.hpp"
#include "cfbsde/dynamics.hpp"
#include "cfbsde/random.hpp"
#include "cfbsde/tensor_ad.hpp"
#include "cfbsde/valuenet.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfbsde {

struct Problem {
    CostSpec cost;
    PenaltySpec penalty;
    SaturationSpec saturation;

    void validate() const {
        cost.validate();
        penalty.validate();
        saturation.validate();
        if (saturation.limit.size() != cost.control_weight.rows())
            throw std::invalid_argument("problem: saturation and control weight dimensions differ");
    }
};

struct RolloutConfig {
    Index steps = 275;
    double dt = 1.0 / 110.0;
    Index batch = 128;
    Vector initial_state;

    [[nodiscard]] double horizon() const { return static_cast<double>(steps) * dt; }

    void validate() const {
        if (steps < 1) throw std::invalid_argument("rollout: steps must be >= 1");
        if (!(dt > 0.0)) throw std::invalid_argument("rollout: dt must be positive");
        if (batch < 1) throw std::invalid_argument("rollout: batch must be >= 1");
        if (initial_state.size() == 0 || !initial_state.allFinite())
            throw std::invalid_argument("rollout: initial_state must be a finite non-empty vector");
    }
};

/// Raised when a state, value or control leaves the finite / admissible range.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(std::int64_t iteration, Index step, Index member, const std::string& reason)
        : std::runtime_error(describe(iteration, step, member, reason)),
          iteration_(iteration), step_(step), member_(member), reason_(reason) {}

    [[nodiscard]] std::int64_t iteration() const { return iteration_; }
    [[nodiscard]] Index step() const { return step_; }
    [[nodiscard]] Index member() const { return member_; }
    [[nodiscard]] const std::string& reason() const { return reason_; }

private:
    static std::string describe(std::int64_t it, Index step, Index member, const std::string& reason) {
        std::ostringstream os;
        os << "rollout diverged at iteration " << it << ", step " << step << ", batch member " << member << ": "
           << reason;
        return os.str();
    }
    std::int64_t iteration_;
    Index step_;
    Index member_;
    std::string reason_;
};

/// Brownian increments for a batch: `steps` matrices of size batch x noise_dim.
/// Member m draws from its own stream (seed, first_stream + m, substream).
inline std::vector<Matrix> make_noise(std::uint64_t seed, std::uint32_t substream, Index batch, Index steps,
                                      Index noise_dim, double dt, std::uint32_t first_stream = 0) {
    std::vector<Matrix> dw(static_cast<std::size_t>(steps), Matrix(batch, noise_dim));
    for (Index m = 0; m < batch; ++m) {
        RandomStream rs(seed, first_stream + static_cast<std::uint32_t>(m), substream);
        for (Index n = 0; n < steps; ++n) dw[static_cast<std::size_t>(n)].row(m) = sample_noise(rs, noise_dim, dt).transpose();
    }
    return dw;
}

// ---------------------------------------------------------------------------
// Model terms as tape operations (row-wise)
// ---------------------------------------------------------------------------

/// Rows f(x_i, t).
template <ControlledSde Model>
ad::Var drift_on_tape(const Model& model, const ad::Var& states, double t) {
    const Matrix& x = states.value();
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) out.row(i) = model.drift(x.row(i).transpose(), t).transpose();
    const int ix = states.id();
    return states.tape()->record("drift", {states}, std::move(out), [&model, ix, t](const Matrix& g, ad::Tape& tp) {
        const Matrix& xv = tp.value(ix);
        Matrix dx(xv.rows(), xv.cols());
        for (Index i = 0; i < xv.rows(); ++i)
            dx.row(i) = model.drift_vjp(xv.row(i).transpose(), t, g.row(i).transpose()).transpose();
        tp.accumulate(ix, dx);
    });
}

/// Rows G(x_i) u_i.
template <ControlledSde Model>
ad::Var control_term_on_tape(const Model& model, const ad::Var& states, const ad::Var& controls, double t) {
    const Matrix& x = states.value();
    const Matrix& u = controls.value();
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i)
        out.row(i) = (model.control_matrix(x.row(i).transpose(), t) * u.row(i).transpose()).transpose();
    const int ix = states.id(), iu = controls.id();
    return states.tape()->record(
        "control_term", {states, controls}, std::move(out), [&model, ix, iu, t](const Matrix& g, ad::Tape& tp) {
            const Matrix& xv = tp.value(ix);
            const Matrix& uv = tp.value(iu);
            Matrix dx(xv.rows(), xv.cols()), du(uv.rows(), uv.cols());
            for (Index i = 0; i < xv.rows(); ++i) {
                const Vector xi = xv.row(i).transpose(), gi = g.row(i).transpose(), ui = uv.row(i).transpose();
                dx.row(i) = model.control_bilinear_grad(xi, t, gi, ui).transpose();
                du.row(i) = (model.control_matrix(xi, t).transpose() * gi).transpose();
            }
            tp.accumulate(ix, dx);
            tp.accumulate(iu, du);
        });
}

/// Rows G(x_i)' v_i.
template <ControlledSde Model>
ad::Var control_adjoint_on_tape(const Model& model, const ad::Var& states, const ad::Var& covectors, double t) {
    const Matrix& x = states.value();
    const Matrix& v = covectors.value();
    Matrix out(x.rows(), model.control_dim());
    for (Index i = 0; i < x.rows(); ++i)
        out.row(i) = (model.control_matrix(x.row(i).transpose(), t).transpose() * v.row(i).transpose()).transpose();
    const int ix = states.id(), iv = covectors.id();
    return states.tape()->record(
        "control_adjoint", {states, covectors}, std::move(out), [&model, ix, iv, t](const Matrix& g, ad::Tape& tp) {
            const Matrix& xv = tp.value(ix);
            const Matrix& vv = tp.value(iv);
            Matrix dx(xv.rows(), xv.cols()), dv(vv.rows(), vv.cols());
            for (Index i = 0; i < xv.rows(); ++i) {
                const Vector xi = xv.row(i).transpose(), gi = g.row(i).transpose(), vi = vv.row(i).transpose();
                dx.row(i) = model.control_bilinear_grad(xi, t, vi, gi).transpose();
                dv.row(i) = (model.control_matrix(xi, t) * gi).transpose();
            }
            tp.accumulate(ix, dx);
            tp.accumulate(iv, dv);
        });
}

/// Rows Sigma(x_i) dw_i; the increments are constants.
template <ControlledSde Model>
ad::Var diffusion_term_on_tape(const Model& model, const ad::Var& states, const Matrix& dw, double t) {
    const Matrix& x = states.value();
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i)
        out.row(i) = (model.diffusion(x.row(i).transpose(), t) * dw.row(i).transpose()).transpose();
    const int ix = states.id();
    return states.tape()->record("diffusion_term", {states}, std::move(out),
                                 [&model, ix, dw, t](const Matrix& g, ad::Tape& tp) {
                                     const Matrix& xv = tp.value(ix);
                                     Matrix dx(xv.rows(), xv.cols());
                                     for (Index i = 0; i < xv.rows(); ++i)
                                         dx.row(i) = model.diffusion_bilinear_grad(xv.row(i).transpose(), t,
                                                                                    g.row(i).transpose(),
                                                                                    dw.row(i).transpose())
                                                         .transpose();
                                     tp.accumulate(ix, dx);
                                 });
}

// ---------------------------------------------------------------------------
// Rollout
// ---------------------------------------------------------------------------

/// Per-step scalar terms of the value update, kept when requested so the two
/// algebraic forms of the update can be compared.
struct StepTerms {
    Matrix state_cost;      // M x 1, c(x_n)
    Matrix cross;           // M x 1, V_x' G u*
    Matrix saturation_cost; // M x 1, sum_i S_i(u*_i)
    Matrix hamiltonian;     // M x 1
    Matrix value_before;    // M x 1, y_n
    Matrix value_after;     // M x 1, y_{n+1}
    Matrix martingale;      // M x 1, V_x' Sigma dw
};

struct RolloutResult {
    std::vector<Matrix> states;   // steps + 1 entries, each M x n
    Matrix values;                // M x (steps + 1)
    std::vector<Matrix> controls; // steps entries, each M x m
    double mean_state_cost = 0.0; // (1 / (M N)) sum c(x_n), n < N
    double violation_fraction = 0.0;
    std::vector<StepTerms> terms; // only when requested

    ad::Var terminal_state; // M x n
    ad::Var terminal_value; // M x 1

    [[nodiscard]] Index batch() const { return values.rows(); }
    [[nodiscard]] Index steps() const { return static_cast<Index>(controls.size()); }
};

struct RolloutOptions {
    std::int64_t iteration = 0; // reported in divergence errors
    bool record_terms = false;
};

/// Fraction of (member, step) pairs, over all stored states, outside the
/// constraint bounds.
inline double violation_fraction(const PenaltySpec& spec, const std::vector<Matrix>& states, double margin = 0.0) {
    std::size_t bad = 0, total = 0;
    for (const Matrix& s : states)
        for (Index i = 0; i < s.rows(); ++i) {
            ++total;
            if (!within_bounds(spec, s.row(i).transpose(), margin)) ++bad;
        }
    return total == 0 ? 0.0 : static_cast<double>(bad) / static_cast<double>(total);
}

namespace detail {
inline void check_finite(const Matrix& m, const char* what, std::int64_t it, Index step) {
    if (m.allFinite()) return;
    for (Index i = 0; i < m.rows(); ++i)
        if (!m.row(i).allFinite()) throw DivergenceError(it, step, i, std::string("non-finite ") + what);
}
}  // namespace detail

template <ControlledSde Model>
RolloutResult rollout(const Model& model, const Problem& problem, const NetVars& net, const NetConfig& net_cfg,
                      const RolloutConfig& cfg, const std::vector<Matrix>& noise, const RolloutOptions& opts = {}) {
    ad::Tape& tape = *net.value.tape();
    const Index n = model.state_dim(), batch = cfg.batch, steps = cfg.steps;
    if (cfg.initial_state.size() != n) throw std::invalid_argument("rollout: initial_state has the wrong dimension");
    if (static_cast<Index>(noise.size()) != steps) throw std::invalid_argument("rollout: need one noise matrix per step");
    const double dt = cfg.dt;

    const Matrix r_inv = problem.cost.control_weight.llt().solve(
        Matrix::Identity(problem.cost.control_weight.rows(), problem.cost.control_weight.cols()));
    ad::Var neg_r_inv_t = tape.constant(-r_inv.transpose());

    ad::Var x = tape.constant(cfg.initial_state.transpose().replicate(batch, 1));
    ad::Var y = ad::tile_rows(ad::scale(net.value, net_cfg.value_scale), batch);
    ad::Var vx = ad::tile_rows(net.value_gradient, batch);
    ad::Var hid = ad::tile_rows(net.hidden, batch);
    ad::Var cell = ad::tile_rows(net.cell, batch);

    RolloutResult res;
    res.states.reserve(static_cast<std::size_t>(steps + 1));
    res.controls.reserve(static_cast<std::size_t>(steps));
    res.values.resize(batch, steps + 1);
    res.states.push_back(x.value());
    res.values.col(0) = y.value().col(0);
    double cost_sum = 0.0;

    for (Index step = 0; step < steps; ++step) {
        const double t = static_cast<double>(step) * dt;
        const Matrix& dw = noise[static_cast<std::size_t>(step)];
        if (dw.rows() != batch || dw.cols() != model.noise_dim())
            throw std::invalid_argument("rollout: noise matrix has the wrong shape");

        ad::Var pre = ad::matmul(control_adjoint_on_tape(model, x, vx, t), neg_r_inv_t);
        ad::Var u = saturated_control_on_tape(pre, problem.saturation.limit);
        detail::check_finite(u.value(), "control", opts.iteration, step);

        ad::Var running = ad::add(quadratic_form_on_tape(x, problem.cost.target, problem.cost.state_weight),
                                  penalty_on_tape(problem.penalty, x));
        ad::Var gu = control_term_on_tape(model, x, u, t);
        ad::Var cross = ad::row_sum(ad::mul(vx, gu));
        ad::Var sat;
        try {
            sat = saturation_cost_on_tape(problem.saturation, u);
        } catch (const SaturationError& e) {
            Index member = 0;
            for (Index i = 0; i < batch; ++i)
                if (((u.value().row(i).transpose().cwiseAbs()).array() >= problem.saturation.limit.array()).any()) {
                    member = i;
                    break;
                }
            throw DivergenceError(opts.iteration, step, member, std::string("control saturated: ") + e.what());
        }
        ad::Var ham = ad::add(ad::add(running, cross), sat);
        ad::Var sdw = diffusion_term_on_tape(model, x, dw, t);
        ad::Var mart = ad::row_sum(ad::mul(vx, sdw));

        ad::Var y_next = ad::add(ad::add(ad::sub(y, ad::scale(ham, dt)), ad::scale(cross, dt)), mart);
        ad::Var x_next =
            ad::add(ad::add(ad::add(x, ad::scale(drift_on_tape(model, x, t), dt)), ad::scale(gu, dt)), sdw);

        detail::check_finite(y_next.value(), "value", opts.iteration, step);
        detail::check_finite(x_next.value(), "state", opts.iteration, step);

        cost_sum += running.value().sum();
        if (opts.record_terms)
            res.terms.push_back(StepTerms{running.value(), cross.value(), sat.value(), ham.value(), y.value(),
                                          y_next.value(), mart.value()});
        res.controls.push_back(u.value());
        res.states.push_back(x_next.value());
        res.values.col(step + 1) = y_next.value().col(0);

        x = x_next;
        y = y_next;
        if (step + 1 < steps) {
            LstmStep next = lstm_step(net, x, hid, cell, net_cfg.input_scale);
            detail::check_finite(next.value_gradient.value(), "value gradient", opts.iteration, step + 1);
            vx = next.value_gradient;
            hid = next.hidden;
            cell = next.cell;
        }
    }

    res.terminal_state = x;
    res.terminal_value = y;
    res.mean_state_cost = cost_sum / static_cast<double>(batch * steps);
    res.violation_fraction = violation_fraction(problem.penalty, res.states);
    return res;
}

/// (1/M) sum_m (g(x_N^m) - y_N^m)^2 + lambda ||theta||^2, theta = network
/// weights only (the learned initial quantities are not regularised).
inline ad::Var loss(const RolloutResult& res, const CostSpec& cost, const NetVars& net, double weight_decay) {
    ad::Var target = quadratic_form_on_tape(res.terminal_state, cost.target, cost.terminal_weight);
    ad::Var l = ad::mean(ad::square(ad::sub(target, res.terminal_value)));
    if (weight_decay != 0.0) {
        const std::array<ad::Var, 5> theta{net.w_input, net.w_recurrent, net.bias, net.head_weight, net.head_bias};
        ad::Var reg = ad::sum(ad::square(theta[0]));
        for (std::size_t i = 1; i < theta.size(); ++i) reg = ad::add(reg, ad::sum(ad::square(theta[i])));
        l = ad::add(l, ad::scale(reg, weight_decay));
    }
    return l;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct Envelope {
    Matrix min;  // (steps + 1) x dims
    Matrix max;
    Matrix mean;
};

inline Envelope envelope_of(const std::vector<Matrix>& per_step) {
    const Index t = static_cast<Index>(per_step.size()), d = per_step.empty() ? 0 : per_step[0].cols();
    Envelope e{Matrix(t, d), Matrix(t, d), Matrix(t, d)};
    for (Index k = 0; k < t; ++k) {
        const Matrix& s = per_step[static_cast<std::size_t>(k)];
        e.min.row(k) = s.colwise().minCoeff();
        e.max.row(k) = s.colwise().maxCoeff();
        e.mean.row(k) = s.colwise().mean();
    }
    return e;
}

struct EvaluationReport {
    Index trials = 0;
    Index steps = 0;
    double dt = 0.0;
    std::vector<Matrix> states;     // steps + 1 entries, trials x n
    Envelope state_envelope;
    Envelope constraint_envelope;   // of c_s(x)
    double violation_fraction = 0.0;
    Matrix terminal_states;         // trials x n
    Vector terminal_mean;
    Vector terminal_std;
    double max_abs_control = 0.0;
    double mean_state_cost = 0.0;
    std::string constraint_kind;
};

/// Runs `trials` independent rollouts without gradient recording.
template <ControlledSde Model>
EvaluationReport evaluate(const Model& model, const Problem& problem, const NetParams& params,
                          const NetConfig& net_cfg, RolloutConfig cfg, Index trials, std::uint64_t seed) {
    if (trials < 1) throw std::invalid_argument("evaluate: trials must be >= 1");
    cfg.batch = trials;
    ad::Tape tape;
    NetVars net = attach(tape, params, false);
    const auto noise = make_noise(seed, 0, trials, cfg.steps, model.noise_dim(), cfg.dt);
    RolloutResult r = rollout(model, problem, net, net_cfg, cfg, noise);

    EvaluationReport rep;
    rep.trials = trials;
    rep.steps = cfg.steps;
    rep.dt = cfg.dt;
    rep.state_envelope = envelope_of(r.states);
    std::vector<Matrix> cvals;
    cvals.reserve(r.states.size());
    for (const Matrix& s : r.states) {
        Matrix c(s.rows(), problem.penalty.dim());
        for (Index i = 0; i < s.rows(); ++i) c.row(i) = problem.penalty.map->value(s.row(i).transpose()).transpose();
        cvals.push_back(std::move(c));
    }
    rep.constraint_envelope = envelope_of(cvals);
    rep.violation_fraction = r.violation_fraction;
    rep.terminal_states = r.states.back();
    rep.terminal_mean = rep.terminal_states.colwise().mean().transpose();
    rep.terminal_std = ((rep.terminal_states.rowwise() - rep.terminal_mean.transpose()).array().square().colwise().sum() /
                        static_cast<double>(trials))
                           .sqrt()
                           .transpose();
    for (const Matrix& u : r.controls) rep.max_abs_control = std::max(rep.max_abs_control, u.cwiseAbs().maxCoeff());
    rep.mean_state_cost = r.mean_state_cost;
    rep.constraint_kind = problem.penalty.map->name();
    rep.states = std::move(r.states);
    return rep;
}

}  // namespace cfbsde
