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

// Command implementations shared by the command-line tool and the
// acceptance harness.

#include "cfbsde/checkpoint.hpp"
#include "cfbsde/config.hpp"
#include "cfbsde/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace cfbsde::app {

enum ExitCode : int {
    kOk = 0,
    kInternal = 1,
    kUsage = 2,
    kDiverged = 3,
    kCheckpoint = 4,
    kIo = 5,
};

/// Offset between the training seed and the evaluation seed.
inline constexpr std::uint64_t kEvalSeedOffset = 0x9E3779B97F4A7C15ull;

inline const char* kCheckpointFile = "checkpoint.json";
inline const char* kLogFile = "train_log.ndjson";
inline const char* kConfigFile = "config.json";

/// A preset name or a path to a JSON file.
inline ExperimentConfig load_config(const std::string& spec) {
    if (auto p = preset(spec)) return *p;
    if (!std::filesystem::exists(spec))
        throw ConfigError(spec + ": no such file (presets: cartpole_task1, cartpole_task2)");
    return parse_config(read_file(spec), spec);
}

struct TrainOptions {
    std::filesystem::path out;
    std::optional<std::uint64_t> seed;
    std::optional<std::int64_t> iterations;
    std::optional<double> fixed_k;
    std::optional<std::filesystem::path> resume;
    int verbosity = 1;
};

struct TrainSummary {
    std::int64_t iterations = 0;
    std::int64_t divergences = 0;
    double final_k = 0.0;
    double final_loss = 0.0;
    bool all_losses_finite = true;
    bool scheduler_done = false;
    std::optional<std::int64_t> first_divergence;
};

inline void apply_overrides(ExperimentConfig& cfg, const TrainOptions& o) {
    if (o.seed) cfg.trainer.seed = *o.seed;
    if (o.iterations) cfg.trainer.iterations = *o.iterations;
    if (o.fixed_k) {
        cfg.constraint.initial_k = *o.fixed_k;
        cfg.scheduler.enabled = false;
    }
    validate(cfg);
}

/// Trains and writes config.json, train_log.ndjson and checkpoint.json to
/// `o.out`. Throws TrainingAborted when divergences pile up.
inline TrainSummary train(ExperimentConfig cfg, const TrainOptions& o, std::ostream& progress = std::cerr) {
    std::filesystem::create_directories(o.out);
    TrainingState state;
    bool appending = false;
    if (o.resume) {
        Checkpoint ck = load_checkpoint(*o.resume);
        check_compatible(ck.state.params, cfg);
        state = std::move(ck.state);
        appending = true;
    }
    apply_overrides(cfg, o);
    const CartPole model = make_model(cfg);
    const Problem problem = make_problem(cfg);
    const NetConfig net = make_net_config(cfg);
    const RolloutConfig roll = make_rollout_config(cfg);
    const TrainerConfig tcfg = make_trainer_config(cfg);
    if (!o.resume) state = initial_training_state(net, make_scheduler(cfg), tcfg.seed);
    if (o.fixed_k) {
        state.scheduler.k = *o.fixed_k;
        state.scheduler.enabled = false;
    }
    write_file_atomic(o.out / kConfigFile, to_json(cfg).dump(2) + "\n");

    std::ofstream log(o.out / kLogFile, appending ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot open " + (o.out / kLogFile).string());
    TrainSummary sum;
    auto emit = [&](const nlohmann::json& j) { log << j.dump() << '\n' << std::flush; };

    TrainingHooks hooks;
    hooks.on_iteration = [&](const IterationRecord& r) {
        emit(iteration_json(r));
        if (r.diverged) {
            emit(divergence_json(r));
            ++sum.divergences;
            if (!sum.first_divergence) sum.first_divergence = r.iteration;
        }
        if (r.update) emit(update_json(*r.update));
        if (r.scheduler_finished) emit({{"event", "scheduler_done"}, {"iteration", r.iteration}, {"k", r.k}});
        if (!r.diverged) sum.final_loss = r.loss;
        if (r.diverged || !std::isfinite(r.loss)) sum.all_losses_finite = false;
        const bool report = o.verbosity >= 2 || (o.verbosity == 1 && (r.iteration % 50 == 0 || r.iteration == 1 ||
                                                                        r.diverged || r.update));
        if (report) {
            progress << "iter " << r.iteration << " loss " << r.loss << " cost " << r.mean_state_cost << " viol "
                     << r.violation_fraction << " k " << r.k;
            if (r.diverged) progress << " DIVERGED(" << r.divergence_reason << ")";
            if (r.update) progress << " -> k " << r.update->new_k;
            progress << '\n';
        }
    };
    hooks.on_checkpoint = [&](const TrainingState& s) { save_checkpoint(o.out / kCheckpointFile, s, cfg); };
    try {
        cfbsde::train(model, problem, net, roll, tcfg, state, hooks);
    } catch (const TrainingAborted& e) {
        emit({{"event", "aborted"}, {"iteration", e.iteration()}, {"reason", e.what()}});
        save_checkpoint(o.out / kCheckpointFile, state, cfg);
        throw;
    }
    if (tcfg.iterations == state.iteration && !std::filesystem::exists(o.out / kCheckpointFile))
        save_checkpoint(o.out / kCheckpointFile, state, cfg);
    sum.iterations = state.iteration;
    sum.final_k = state.scheduler.k;
    sum.scheduler_done = state.scheduler.done;
    return sum;
}

struct EvalOptions {
    std::filesystem::path checkpoint;
    std::optional<std::string> config;  // default: the config stored in the checkpoint
    std::optional<Index> trials;
    std::optional<std::uint64_t> seed;
    std::filesystem::path out;
    bool trajectories = true;
    double margin = 0.02;
};

struct EvalSummary {
    Index trials = 0;
    Index steps = 0;
    double violation_fraction = 0.0;
    double violation_fraction_with_margin = 0.0;
    double max_energy = 0.0;
    double mean_terminal_theta = 0.0;
    double mean_abs_terminal_theta_dot = 0.0;
    double max_abs_control = 0.0;
    nlohmann::json json;
};

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline EvalSummary evaluate(const EvalOptions& o) {
    Checkpoint ck = load_checkpoint(o.checkpoint);
    ExperimentConfig cfg = o.config ? load_config(*o.config) : ck.config;
    check_compatible(ck.state.params, cfg);
    const Index trials = o.trials.value_or(cfg.rollout.eval_trials);
    if (trials < 1) throw ConfigError("--trials: must be >= 1");
    const std::uint64_t seed = o.seed.value_or(cfg.trainer.seed + kEvalSeedOffset);
    const CartPole model = make_model(cfg);
    Problem problem = make_problem(cfg);
    problem.penalty.steepness = ck.state.scheduler.k;
    const NetConfig net = make_net_config(cfg);
    const RolloutConfig roll = make_rollout_config(cfg);
    const EvaluationReport rep = cfbsde::evaluate(model, problem, ck.state.params, net, roll, trials, seed);

    EvalSummary s;
    s.trials = trials;
    s.steps = rep.steps;
    s.violation_fraction = rep.violation_fraction;
    s.violation_fraction_with_margin = violation_fraction(problem.penalty, rep.states, o.margin);
    for (const Matrix& st : rep.states)
        for (Index m = 0; m < st.rows(); ++m) s.max_energy = std::max(s.max_energy, model.energy(st.row(m).transpose()));
    s.mean_terminal_theta = rep.terminal_mean(1);
    s.mean_abs_terminal_theta_dot = rep.terminal_states.col(3).cwiseAbs().mean();
    s.max_abs_control = rep.max_abs_control;

    std::vector<double> tmean(rep.terminal_mean.data(), rep.terminal_mean.data() + rep.terminal_mean.size());
    std::vector<double> tstd(rep.terminal_std.data(), rep.terminal_std.data() + rep.terminal_std.size());
    s.json = {{"trials", trials},
              {"steps", rep.steps},
              {"dt", rep.dt},
              {"seed", seed},
              {"iteration", ck.state.iteration},
              {"k", ck.state.scheduler.k},
              {"constraint", rep.constraint_kind},
              {"lower", cfg.constraint.lower},
              {"upper", cfg.constraint.upper},
              {"violation_fraction", s.violation_fraction},
              {"margin", o.margin},
              {"violation_fraction_with_margin", s.violation_fraction_with_margin},
              {"max_energy", s.max_energy},
              {"terminal_mean", tmean},
              {"terminal_std", tstd},
              {"mean_abs_terminal_theta_dot", s.mean_abs_terminal_theta_dot},
              {"max_abs_control", s.max_abs_control},
              {"mean_state_cost", rep.mean_state_cost}};

    std::filesystem::create_directories(o.out);
    write_file_atomic(o.out / "summary.json", s.json.dump(2) + "\n");

    const Index n = rep.state_envelope.min.cols();
    std::ostringstream env;
    env << "t,dim,min,max,mean\n";
    for (Index k = 0; k < rep.state_envelope.min.rows(); ++k)
        for (Index d = 0; d < n; ++d)
            env << fmt(static_cast<double>(k) * rep.dt) << ',' << d << ',' << fmt(rep.state_envelope.min(k, d)) << ','
                << fmt(rep.state_envelope.max(k, d)) << ',' << fmt(rep.state_envelope.mean(k, d)) << '\n';
    write_file_atomic(o.out / "envelope.csv", env.str());

    std::ostringstream cenv;
    cenv << "t,dim,min,max,mean\n";
    for (Index k = 0; k < rep.constraint_envelope.min.rows(); ++k)
        for (Index d = 0; d < rep.constraint_envelope.min.cols(); ++d)
            cenv << fmt(static_cast<double>(k) * rep.dt) << ',' << d << ',' << fmt(rep.constraint_envelope.min(k, d))
                 << ',' << fmt(rep.constraint_envelope.max(k, d)) << ',' << fmt(rep.constraint_envelope.mean(k, d))
                 << '\n';
    write_file_atomic(o.out / "constraint_envelope.csv", cenv.str());

    std::ostringstream term;
    term << "trial,x,theta,x_dot,theta_dot\n";
    for (Index m = 0; m < trials; ++m) {
        term << m;
        for (Index d = 0; d < n; ++d) term << ',' << fmt(rep.terminal_states(m, d));
        term << '\n';
    }
    write_file_atomic(o.out / "terminal_states.csv", term.str());

    if (o.trajectories) {
        std::ostringstream tr;
        tr << "trial,step,t,x,theta,x_dot,theta_dot\n";
        for (Index m = 0; m < trials; ++m)
            for (std::size_t k = 0; k < rep.states.size(); ++k) {
                tr << m << ',' << k << ',' << fmt(static_cast<double>(k) * rep.dt);
                for (Index d = 0; d < n; ++d) tr << ',' << fmt(rep.states[k](m, d));
                tr << '\n';
            }
        write_file_atomic(o.out / "trajectories.csv", tr.str());
    }
    return s;
}

struct PenaltyCurveOptions {
    std::vector<double> ks{1.0, 2.0, 4.0, 8.0};
    double lower = -1.0;
    double upper = 3.0;
    double ceiling = 100.0;
    double x_min = -5.0;
    double x_max = 7.0;
    Index points = 241;
};

/// CSV rows "k,x,p" for a single box constraint on a scalar.
inline std::string penalty_curve(const PenaltyCurveOptions& o) {
    if (o.ks.empty()) throw ConfigError("--k: at least one steepness is required");
    if (o.points < 1) throw ConfigError("--points: grid must be non-empty");
    if (!(o.x_max >= o.x_min)) throw ConfigError("--x-max: must not be below --x-min");
    PenaltySpec spec;
    spec.ceiling = o.ceiling;
    spec.lower = Vector::Constant(1, o.lower);
    spec.upper = Vector::Constant(1, o.upper);
    spec.map = std::make_shared<StateBoxMap>(std::vector<Index>{0}, 1);
    std::ostringstream out;
    out << "k,x,p\n";
    for (double k : o.ks) {
        spec.steepness = k;
        try {
            spec.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        for (Index i = 0; i < o.points; ++i) {
            const double x = o.points == 1 ? o.x_min
                                           : o.x_min + (o.x_max - o.x_min) * static_cast<double>(i) /
                                                           static_cast<double>(o.points - 1);
            out << fmt(k) << ',' << fmt(x) << ',' << fmt(penalty(spec, Vector::Constant(1, x))) << '\n';
        }
    }
    return out.str();
}

inline nlohmann::json inspect(const std::filesystem::path& path) {
    const Checkpoint ck = load_checkpoint(path);
    nlohmann::json blocks = nlohmann::json::array();
    ck.state.params.for_each_block([&](const char* name, const Matrix& m, bool theta) {
        blocks.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"trainable_theta", theta},
                          {"norm", m.norm()}});
    });
    return {{"format", kCheckpointFormat},
            {"config", ck.config.name},
            {"iteration", ck.state.iteration},
            {"divergences", ck.state.divergences},
            {"parameter_count", ck.state.params.parameter_count()},
            {"blocks", blocks},
            {"adam_step", ck.state.adam.step},
            {"scheduler", scheduler_json(ck.state.scheduler)}};
}

}  // namespace cfbsde::app
