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

// Outer training loop: Adam with a piecewise-constant rate, global-norm
// gradient clipping, divergence recovery and the steepness schedule.

#include "cfbsde/rollout.hpp"
#include "cfbsde/scheduler.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cfbsde {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    /// (first iteration, rate) pairs in increasing iteration order. The
    /// first entry must start at iteration 1.
    std::vector<std::pair<std::int64_t, double>> schedule{{1, 1e-2}};

    void validate() const {
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw std::invalid_argument("adam: beta1 and beta2 must be in [0, 1)");
        if (!(epsilon > 0.0)) throw std::invalid_argument("adam: epsilon must be positive");
        if (schedule.empty() || schedule.front().first != 1)
            throw std::invalid_argument("adam: rate schedule must start at iteration 1");
        for (std::size_t i = 0; i < schedule.size(); ++i) {
            if (!(schedule[i].second > 0.0)) throw std::invalid_argument("adam: rates must be positive");
            if (i > 0 && schedule[i].first <= schedule[i - 1].first)
                throw std::invalid_argument("adam: schedule iterations must increase");
        }
    }
};

inline double learning_rate(const AdamConfig& c, std::int64_t iteration) {
    double rate = c.schedule.front().second;
    for (const auto& [start, r] : c.schedule)
        if (iteration >= start) rate = r;
    return rate;
}

struct AdamState {
    NetParams first;   // moment estimates, same shapes as the parameters
    NetParams second;
    std::int64_t step = 0;
};

inline NetParams zeros_like(const NetParams& p) {
    NetParams z = p;
    z.for_each_block([](const char*, Matrix& m, bool) { m.setZero(); });
    return z;
}

inline AdamState adam_init(const NetParams& params) { return {zeros_like(params), zeros_like(params), 0}; }

inline void adam_step(const AdamConfig& c, AdamState& s, NetParams& params, const NetParams& grads, double rate) {
    ++s.step;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
    std::vector<Matrix*> p, m, v;
    std::vector<const Matrix*> g;
    params.for_each_block([&](const char*, Matrix& b, bool) { p.push_back(&b); });
    s.first.for_each_block([&](const char*, Matrix& b, bool) { m.push_back(&b); });
    s.second.for_each_block([&](const char*, Matrix& b, bool) { v.push_back(&b); });
    grads.for_each_block([&](const char*, const Matrix& b, bool) { g.push_back(&b); });
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (g[i]->rows() != p[i]->rows() || g[i]->cols() != p[i]->cols())
            throw std::invalid_argument("adam_step: gradient block shape mismatch");
        *m[i] = c.beta1 * *m[i] + (1.0 - c.beta1) * *g[i];
        *v[i] = c.beta2 * *v[i] + (1.0 - c.beta2) * g[i]->cwiseProduct(*g[i]);
        p[i]->array() -= rate * (m[i]->array() / bc1) / ((v[i]->array() / bc2).sqrt() + c.epsilon);
    }
}

inline double global_norm(const NetParams& g) {
    double s = 0.0;
    g.for_each_block([&](const char*, const Matrix& m, bool) { s += m.squaredNorm(); });
    return std::sqrt(s);
}

/// Rescales all blocks jointly so the global norm is at most `threshold`
/// (disabled when threshold <= 0). Returns the norm before clipping.
inline double clip_gradients(NetParams& g, double threshold) {
    const double norm = global_norm(g);
    if (threshold > 0.0 && norm > threshold) {
        const double f = threshold / norm;
        g.for_each_block([&](const char*, Matrix& m, bool) { m *= f; });
    }
    return norm;
}

struct TrainerConfig {
    std::int64_t iterations = 1000;
    double weight_decay = 0.0;   // lambda on theta
    double clip_norm = 10.0;
    AdamConfig adam;
    std::uint64_t seed = 0;
    std::int64_t max_consecutive_divergences = 10;
    std::int64_t checkpoint_every = 100;  // 0: only at the end

    void validate() const {
        if (iterations < 0) throw std::invalid_argument("trainer: iterations must be non-negative");
        if (!(weight_decay >= 0.0)) throw std::invalid_argument("trainer: weight_decay must be non-negative");
        if (!(clip_norm >= 0.0)) throw std::invalid_argument("trainer: clip_norm must be non-negative");
        if (max_consecutive_divergences < 1)
            throw std::invalid_argument("trainer: max_consecutive_divergences must be >= 1");
        if (checkpoint_every < 0) throw std::invalid_argument("trainer: checkpoint_every must be non-negative");
        adam.validate();
    }
};

struct TrainingState {
    NetParams params;
    AdamState adam;
    SchedulerState scheduler;
    std::int64_t iteration = 0;  // last completed iteration
    std::int64_t divergences = 0;
    std::int64_t consecutive_divergences = 0;
};

inline TrainingState initial_training_state(const NetConfig& net_cfg, const SchedulerState& scheduler, std::uint64_t seed) {
    net_cfg.validate();
    scheduler.validate();
    RandomStream rs(seed, 0xFFFFFFFFu);  // stream reserved for initialisation
    TrainingState s;
    s.params = init_net(net_cfg, rs);
    s.adam = adam_init(s.params);
    s.scheduler = scheduler;
    return s;
}

struct IterationRecord {
    std::int64_t iteration = 0;
    double loss = 0.0;
    double mean_state_cost = 0.0;
    double violation_fraction = 0.0;
    double k = 0.0;           // steepness used in this iteration
    double grad_norm = 0.0;   // before clipping
    double learning_rate = 0.0;
    bool diverged = false;
    std::string divergence_reason;
    Index divergence_step = -1;
    Index divergence_member = -1;
    std::optional<SchedulerUpdate> update;
    bool scheduler_finished = false;
};

class TrainingAborted : public std::runtime_error {
public:
    TrainingAborted(IterationRecord last, std::int64_t consecutive)
        : std::runtime_error("training aborted at iteration " + std::to_string(last.iteration) + " after " +
                             std::to_string(consecutive) + " consecutive divergences"),
          last_(std::move(last)) {}
    [[nodiscard]] std::int64_t iteration() const { return last_.iteration; }
    /// The divergent iteration that triggered the abort.
    [[nodiscard]] const IterationRecord& last() const { return last_; }

private:
    IterationRecord last_;
};

/// One iteration. Parameters and optimizer state are only written after the
/// loss and every gradient are known to be finite, so a divergent iteration
/// leaves them exactly as they were.
template <ControlledSde Model>
IterationRecord train_iteration(const Model& model, Problem problem, const NetConfig& net_cfg,
                                const RolloutConfig& roll_cfg, const TrainerConfig& cfg, TrainingState& state) {
    const std::int64_t it = state.iteration + 1;
    problem.penalty.steepness = state.scheduler.k;

    IterationRecord rec;
    rec.iteration = it;
    rec.k = state.scheduler.k;
    rec.learning_rate = learning_rate(cfg.adam, it);

    const auto noise = make_noise(cfg.seed, static_cast<std::uint32_t>(it), roll_cfg.batch, roll_cfg.steps,
                                  model.noise_dim(), roll_cfg.dt);
    NetParams grads;
    try {
        ad::Tape tape;
        const NetVars vars = attach(tape, state.params, true);
        RolloutResult r = rollout(model, problem, vars, net_cfg, roll_cfg, noise, {it, false});
        const ad::Var l = loss(r, problem.cost, vars, cfg.weight_decay);
        rec.loss = l.scalar();
        rec.mean_state_cost = r.mean_state_cost;
        rec.violation_fraction = r.violation_fraction;
        if (!std::isfinite(rec.loss)) throw DivergenceError(it, roll_cfg.steps, -1, "non-finite loss");
        const ad::Gradients g = tape.backward(l);
        grads = gradients_of(g, vars);
        rec.grad_norm = global_norm(grads);
        if (!std::isfinite(rec.grad_norm)) throw DivergenceError(it, roll_cfg.steps, -1, "non-finite gradient");
    } catch (const DivergenceError& e) {
        rec.diverged = true;
        rec.divergence_reason = e.reason();
        rec.divergence_step = e.step();
        rec.divergence_member = e.member();
        state.iteration = it;
        ++state.divergences;
        ++state.consecutive_divergences;
        if (state.consecutive_divergences >= cfg.max_consecutive_divergences)
            throw TrainingAborted(rec, state.consecutive_divergences);
        return rec;
    }
    state.consecutive_divergences = 0;
    clip_gradients(grads, cfg.clip_norm);
    adam_step(cfg.adam, state.adam, state.params, grads, rec.learning_rate);

    const bool inside = rec.violation_fraction == 0.0;
    const ObserveResult obs = observe(state.scheduler, it, rec.mean_state_cost, inside);
    rec.update = obs.update;
    rec.scheduler_finished = obs.finished;
    state.iteration = it;
    return rec;
}

struct TrainingHooks {
    std::function<void(const IterationRecord&)> on_iteration;
    std::function<void(const TrainingState&)> on_checkpoint;
};

/// Runs from the state's last completed iteration up to cfg.iterations.
template <ControlledSde Model>
void train(const Model& model, const Problem& problem, const NetConfig& net_cfg, const RolloutConfig& roll_cfg,
           const TrainerConfig& cfg, TrainingState& state, const TrainingHooks& hooks = {}) {
    cfg.validate();
    problem.validate();
    roll_cfg.validate();
    while (state.iteration < cfg.iterations) {
        IterationRecord rec;
        try {
            rec = train_iteration(model, problem, net_cfg, roll_cfg, cfg, state);
        } catch (const TrainingAborted& e) {
            if (hooks.on_iteration) hooks.on_iteration(e.last());
            throw;
        }
        if (hooks.on_iteration) hooks.on_iteration(rec);
        const bool last = state.iteration == cfg.iterations;
        if (hooks.on_checkpoint && (last || (cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0)))
            hooks.on_checkpoint(state);
    }
}

}  // namespace cfbsde
