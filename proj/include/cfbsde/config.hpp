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

// Experiment configuration: a JSON document with one section per component.
// Every field is checked on load and errors name the offending field path.

#include "cfbsde/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfbsde {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DynamicsSection {
    double cart_mass = 1.0;
    double pole_mass = 0.01;
    double pole_length = 0.5;
    double gravity = 9.81;
    double noise_scale = 1.0;
};

struct CostSection {
    std::vector<double> state_weight{0.0, 0.0, 0.0, 0.0};     // diagonal of Q
    double control_weight = 1.0;                              // R (single input)
    std::vector<double> target{0.0, std::numbers::pi, 0.0, 0.0};
    std::vector<double> terminal_weight{1.0, 1.0, 1.0, 1.0};  // diagonal of Qf
};

struct ConstraintSection {
    std::string type = "box";               // "box" | "energy"
    std::vector<std::int64_t> indices{0, 2};  // box only
    std::vector<double> lower{-1.5, -2.5};
    std::vector<double> upper{1.5, 2.5};
    double ceiling = 0.0;                   // L
    double initial_k = 1.5;
};

struct SaturationSection {
    std::vector<double> limit{10.0};
    std::vector<double> weight{1.0};
};

struct RolloutSection {
    double horizon = 2.5;
    double dt = 1.0 / 110.0;
    std::vector<double> initial_state{0.0, 0.0, 0.0, 0.0};
    std::int64_t batch = 128;
    std::int64_t eval_trials = 256;
};

struct NetworkSection {
    std::int64_t hidden = 16;
    double forget_bias = 0.0;
    double value_scale = 1.0;
    std::vector<double> input_scale;  // empty: identity
};

struct TrainerSection {
    std::int64_t iterations = 1000;
    std::vector<std::pair<std::int64_t, double>> rate_schedule{{1, 1e-2}};
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 10.0;
    std::uint64_t seed = 0;
    std::int64_t max_consecutive_divergences = 10;
    std::int64_t checkpoint_every = 100;
};

struct SchedulerSection {
    bool enabled = true;
    double delta = 0.75;
    std::optional<double> beta;  // null: from the first window
    double gamma = 0.9;
    double gamma_step = 0.01;
    double delta_step = 0.05;
    std::int64_t check_interval = 10;
    std::int64_t max_interval = 500;
};

struct ExperimentConfig {
    std::string name = "custom";
    DynamicsSection dynamics;
    CostSection cost;
    ConstraintSection constraint;
    SaturationSection saturation;
    RolloutSection rollout;
    NetworkSection network;
    TrainerSection trainer;
    SchedulerSection scheduler;

    [[nodiscard]] Index steps() const { return static_cast<Index>(std::llround(rollout.horizon / rollout.dt)); }
};

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

namespace detail {

class Reader {
public:
    Reader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) fail(path_.empty() ? "document" : path_, "expected an object");
    }

    [[nodiscard]] std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    [[noreturn]] static void fail(const std::string& where, const std::string& what) {
        throw ConfigError(where + ": " + what);
    }

    const nlohmann::json& at(const std::string& key) const {
        auto it = j_.find(key);
        if (it == j_.end()) fail(field(key), "missing required field");
        return *it;
    }

    Reader section(const std::string& key) const { return Reader(at(key), field(key)); }

    double number(const std::string& key) const {
        const auto& v = at(key);
        if (!v.is_number()) fail(field(key), "expected a number");
        const double d = v.get<double>();
        if (!std::isfinite(d)) fail(field(key), "must be finite");
        return d;
    }

    std::int64_t integer(const std::string& key) const {
        const auto& v = at(key);
        if (!v.is_number_integer()) fail(field(key), "expected an integer");
        return v.get<std::int64_t>();
    }

    bool boolean(const std::string& key) const {
        const auto& v = at(key);
        if (!v.is_boolean()) fail(field(key), "expected true or false");
        return v.get<bool>();
    }

    std::string string(const std::string& key) const {
        const auto& v = at(key);
        if (!v.is_string()) fail(field(key), "expected a string");
        return v.get<std::string>();
    }

    std::optional<double> nullable_number(const std::string& key) const {
        if (at(key).is_null()) return std::nullopt;
        return number(key);
    }

    std::vector<double> numbers(const std::string& key, std::optional<std::size_t> size = std::nullopt) const {
        const auto& v = at(key);
        if (!v.is_array()) fail(field(key), "expected an array of numbers");
        std::vector<double> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_number()) fail(field(key) + "[" + std::to_string(i) + "]", "expected a number");
            out.push_back(v[i].get<double>());
            if (!std::isfinite(out.back())) fail(field(key) + "[" + std::to_string(i) + "]", "must be finite");
        }
        if (size && out.size() != *size)
            fail(field(key), "expected " + std::to_string(*size) + " entries, got " + std::to_string(out.size()));
        return out;
    }

    std::vector<std::int64_t> integers(const std::string& key) const {
        const auto& v = at(key);
        if (!v.is_array()) fail(field(key), "expected an array of integers");
        std::vector<std::int64_t> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_number_integer()) fail(field(key) + "[" + std::to_string(i) + "]", "expected an integer");
            out.push_back(v[i].get<std::int64_t>());
        }
        return out;
    }

    void reject_unknown(std::initializer_list<const char*> known) const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            bool ok = false;
            for (const char* k : known) ok = ok || it.key() == k;
            if (!ok) fail(field(it.key()), "unknown field");
        }
    }

private:
    const nlohmann::json& j_;
    std::string path_;
};

inline void require(bool ok, const std::string& where, const std::string& what) {
    if (!ok) Reader::fail(where, what);
}

}  // namespace detail

/// Semantic checks beyond types; errors name the field.
inline void validate(const ExperimentConfig& c) {
    using detail::require;
    const auto& d = c.dynamics;
    require(d.cart_mass > 0, "dynamics.cart_mass", "must be positive");
    require(d.pole_mass > 0, "dynamics.pole_mass", "must be positive");
    require(d.pole_length > 0, "dynamics.pole_length", "must be positive");
    require(d.noise_scale >= 0, "dynamics.noise_scale", "must be non-negative");

    require(c.cost.state_weight.size() == 4, "cost.state_weight", "expected 4 entries");
    require(c.cost.terminal_weight.size() == 4, "cost.terminal_weight", "expected 4 entries");
    require(c.cost.target.size() == 4, "cost.target", "expected 4 entries");
    for (std::size_t i = 0; i < 4; ++i) {
        require(c.cost.state_weight[i] >= 0, "cost.state_weight[" + std::to_string(i) + "]", "must be non-negative");
        require(c.cost.terminal_weight[i] >= 0, "cost.terminal_weight[" + std::to_string(i) + "]", "must be non-negative");
    }
    require(c.cost.control_weight > 0, "cost.control_weight", "must be positive");

    const auto& k = c.constraint;
    require(k.type == "box" || k.type == "energy", "constraint.type", "must be \"box\" or \"energy\"");
    const std::size_t dim = k.type == "box" ? k.indices.size() : 1;
    if (k.type == "box") {
        require(!k.indices.empty(), "constraint.indices", "must not be empty");
        for (std::size_t i = 0; i < k.indices.size(); ++i)
            require(k.indices[i] >= 0 && k.indices[i] < 4, "constraint.indices[" + std::to_string(i) + "]",
                    "must be a state index in [0, 3]");
    }
    require(k.lower.size() == dim, "constraint.lower", "expected " + std::to_string(dim) + " entries");
    require(k.upper.size() == dim, "constraint.upper", "expected " + std::to_string(dim) + " entries");
    for (std::size_t i = 0; i < dim; ++i)
        require(k.lower[i] < k.upper[i], "constraint.upper[" + std::to_string(i) + "]", "must exceed the lower bound");
    require(k.ceiling >= 0, "constraint.ceiling", "must be non-negative");
    require(k.initial_k > 0, "constraint.initial_k", "must be positive");

    require(c.saturation.limit.size() == 1, "saturation.limit", "expected 1 entry");
    require(c.saturation.weight.size() == 1, "saturation.weight", "expected 1 entry");
    require(c.saturation.limit[0] > 0, "saturation.limit[0]", "must be positive");
    require(c.saturation.weight[0] > 0, "saturation.weight[0]", "must be positive");

    const auto& r = c.rollout;
    require(r.dt > 0, "rollout.dt", "must be positive");
    require(r.horizon > 0, "rollout.horizon", "must be positive");
    require(c.steps() >= 1 && std::abs(static_cast<double>(c.steps()) * r.dt - r.horizon) <= 1e-9 * r.horizon,
            "rollout.horizon", "must be a whole number of steps of length dt");
    require(r.initial_state.size() == 4, "rollout.initial_state", "expected 4 entries");
    require(r.batch >= 1, "rollout.batch", "must be >= 1");
    require(r.eval_trials >= 1, "rollout.eval_trials", "must be >= 1");

    const auto& n = c.network;
    require(n.hidden >= 1, "network.hidden", "must be >= 1");
    require(n.value_scale > 0, "network.value_scale", "must be positive");
    require(n.input_scale.empty() || n.input_scale.size() == 4, "network.input_scale", "expected 0 or 4 entries");

    const auto& t = c.trainer;
    require(t.iterations >= 0, "trainer.iterations", "must be non-negative");
    require(!t.rate_schedule.empty() && t.rate_schedule.front().first == 1, "trainer.rate_schedule",
            "must start at iteration 1");
    for (std::size_t i = 0; i < t.rate_schedule.size(); ++i) {
        const std::string where = "trainer.rate_schedule[" + std::to_string(i) + "]";
        require(t.rate_schedule[i].second > 0, where, "rate must be positive");
        if (i > 0) require(t.rate_schedule[i].first > t.rate_schedule[i - 1].first, where, "iterations must increase");
    }
    require(t.beta1 >= 0 && t.beta1 < 1, "trainer.beta1", "must be in [0, 1)");
    require(t.beta2 >= 0 && t.beta2 < 1, "trainer.beta2", "must be in [0, 1)");
    require(t.epsilon > 0, "trainer.epsilon", "must be positive");
    require(t.weight_decay >= 0, "trainer.weight_decay", "must be non-negative");
    require(t.clip_norm >= 0, "trainer.clip_norm", "must be non-negative");
    require(t.max_consecutive_divergences >= 1, "trainer.max_consecutive_divergences", "must be >= 1");
    require(t.checkpoint_every >= 0, "trainer.checkpoint_every", "must be non-negative");

    const auto& s = c.scheduler;
    require(s.delta >= 0, "scheduler.delta", "must be non-negative");
    require(!s.beta || *s.beta >= 0, "scheduler.beta", "must be non-negative or null");
    require(s.gamma > 0 && s.gamma <= 1, "scheduler.gamma", "must be in (0, 1]");
    require(s.check_interval >= 1, "scheduler.check_interval", "must be >= 1");
    require(s.max_interval >= 1, "scheduler.max_interval", "must be >= 1");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    using detail::Reader;
    const Reader root(j, "");
    root.reject_unknown({"name", "dynamics", "cost", "constraint", "saturation", "rollout", "network", "trainer",
                         "scheduler"});
    ExperimentConfig c;
    c.name = root.string("name");

    const Reader d = root.section("dynamics");
    d.reject_unknown({"cart_mass", "pole_mass", "pole_length", "gravity", "noise_scale"});
    c.dynamics = {d.number("cart_mass"), d.number("pole_mass"), d.number("pole_length"), d.number("gravity"),
                  d.number("noise_scale")};

    const Reader co = root.section("cost");
    co.reject_unknown({"state_weight", "control_weight", "target", "terminal_weight"});
    c.cost = {co.numbers("state_weight", 4), co.number("control_weight"), co.numbers("target", 4),
              co.numbers("terminal_weight", 4)};

    const Reader k = root.section("constraint");
    k.reject_unknown({"type", "indices", "lower", "upper", "ceiling", "initial_k"});
    c.constraint.type = k.string("type");
    c.constraint.indices = c.constraint.type == "box" ? k.integers("indices") : std::vector<std::int64_t>{};
    c.constraint.lower = k.numbers("lower");
    c.constraint.upper = k.numbers("upper");
    c.constraint.ceiling = k.number("ceiling");
    c.constraint.initial_k = k.number("initial_k");

    const Reader s = root.section("saturation");
    s.reject_unknown({"limit", "weight"});
    c.saturation = {s.numbers("limit"), s.numbers("weight")};

    const Reader r = root.section("rollout");
    r.reject_unknown({"horizon", "dt", "initial_state", "batch", "eval_trials"});
    c.rollout = {r.number("horizon"), r.number("dt"), r.numbers("initial_state", 4), r.integer("batch"),
                 r.integer("eval_trials")};

    const Reader n = root.section("network");
    n.reject_unknown({"hidden", "forget_bias", "value_scale", "input_scale"});
    c.network = {n.integer("hidden"), n.number("forget_bias"), n.number("value_scale"), n.numbers("input_scale")};

    const Reader t = root.section("trainer");
    t.reject_unknown({"iterations", "rate_schedule", "beta1", "beta2", "epsilon", "weight_decay", "clip_norm", "seed",
                      "max_consecutive_divergences", "checkpoint_every"});
    c.trainer.iterations = t.integer("iterations");
    const auto& sched = t.at("rate_schedule");
    if (!sched.is_array()) Reader::fail("trainer.rate_schedule", "expected an array of [iteration, rate] pairs");
    c.trainer.rate_schedule.clear();
    for (std::size_t i = 0; i < sched.size(); ++i) {
        const auto& e = sched[i];
        const std::string where = "trainer.rate_schedule[" + std::to_string(i) + "]";
        if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number())
            Reader::fail(where, "expected [iteration, rate]");
        c.trainer.rate_schedule.emplace_back(e[0].get<std::int64_t>(), e[1].get<double>());
    }
    c.trainer.beta1 = t.number("beta1");
    c.trainer.beta2 = t.number("beta2");
    c.trainer.epsilon = t.number("epsilon");
    c.trainer.weight_decay = t.number("weight_decay");
    c.trainer.clip_norm = t.number("clip_norm");
    const std::int64_t seed = t.integer("seed");
    if (seed < 0) Reader::fail("trainer.seed", "must be non-negative");
    c.trainer.seed = static_cast<std::uint64_t>(seed);
    c.trainer.max_consecutive_divergences = t.integer("max_consecutive_divergences");
    c.trainer.checkpoint_every = t.integer("checkpoint_every");

    const Reader sc = root.section("scheduler");
    sc.reject_unknown({"enabled", "delta", "beta", "gamma", "gamma_step", "delta_step", "check_interval",
                       "max_interval"});
    c.scheduler = {sc.boolean("enabled"),      sc.number("delta"),          sc.nullable_number("beta"),
                   sc.number("gamma"),         sc.number("gamma_step"),     sc.number("delta_step"),
                   sc.integer("check_interval"), sc.integer("max_interval")};
    validate(c);
    return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["name"] = c.name;
    j["dynamics"] = {{"cart_mass", c.dynamics.cart_mass},
                     {"pole_mass", c.dynamics.pole_mass},
                     {"pole_length", c.dynamics.pole_length},
                     {"gravity", c.dynamics.gravity},
                     {"noise_scale", c.dynamics.noise_scale}};
    j["cost"] = {{"state_weight", c.cost.state_weight},
                 {"control_weight", c.cost.control_weight},
                 {"target", c.cost.target},
                 {"terminal_weight", c.cost.terminal_weight}};
    j["constraint"] = {{"type", c.constraint.type},     {"lower", c.constraint.lower},
                       {"upper", c.constraint.upper},   {"ceiling", c.constraint.ceiling},
                       {"initial_k", c.constraint.initial_k}};
    if (c.constraint.type == "box") j["constraint"]["indices"] = c.constraint.indices;
    j["saturation"] = {{"limit", c.saturation.limit}, {"weight", c.saturation.weight}};
    j["rollout"] = {{"horizon", c.rollout.horizon},
                    {"dt", c.rollout.dt},
                    {"initial_state", c.rollout.initial_state},
                    {"batch", c.rollout.batch},
                    {"eval_trials", c.rollout.eval_trials}};
    j["network"] = {{"hidden", c.network.hidden},
                    {"forget_bias", c.network.forget_bias},
                    {"value_scale", c.network.value_scale},
                    {"input_scale", c.network.input_scale}};
    nlohmann::json sched = nlohmann::json::array();
    for (const auto& [it, rate] : c.trainer.rate_schedule) sched.push_back({it, rate});
    j["trainer"] = {{"iterations", c.trainer.iterations},
                    {"rate_schedule", sched},
                    {"beta1", c.trainer.beta1},
                    {"beta2", c.trainer.beta2},
                    {"epsilon", c.trainer.epsilon},
                    {"weight_decay", c.trainer.weight_decay},
                    {"clip_norm", c.trainer.clip_norm},
                    {"seed", c.trainer.seed},
                    {"max_consecutive_divergences", c.trainer.max_consecutive_divergences},
                    {"checkpoint_every", c.trainer.checkpoint_every}};
    j["scheduler"] = {{"enabled", c.scheduler.enabled},
                      {"delta", c.scheduler.delta},
                      {"beta", c.scheduler.beta ? nlohmann::json(*c.scheduler.beta) : nlohmann::json(nullptr)},
                      {"gamma", c.scheduler.gamma},
                      {"gamma_step", c.scheduler.gamma_step},
                      {"delta_step", c.scheduler.delta_step},
                      {"check_interval", c.scheduler.check_interval},
                      {"max_interval", c.scheduler.max_interval}};
    return j;
}

/// Parses JSON text; syntax errors report line and column.
inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "config") {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": invalid JSON");
    }
    try {
        return config_from_json(j);
    } catch (const ConfigError& e) {
        throw ConfigError(origin + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Swing-up with the cart position and velocity boxed.
inline ExperimentConfig cartpole_task1() {
    ExperimentConfig c;
    c.name = "cartpole_task1";
    c.dynamics.noise_scale = 1.0;
    c.cost.state_weight = {0.0, 100.0, 0.0, 1.0};
    c.cost.terminal_weight = {10.0, 100.0, 0.0, 10.0};
    c.cost.control_weight = 0.1;
    c.saturation.weight = {0.1};
    c.constraint = {"box", {0, 2}, {-1.5, -2.5}, {1.5, 2.5}, 30.0, 1.5};
    c.network.value_scale = 100.0;
    c.trainer.iterations = 1000;
    c.trainer.rate_schedule = {{1, 1e-2}, {600, 3e-3}, {850, 9e-4}};
    return c;
}

/// Swing-up with the total energy bounded.
inline ExperimentConfig cartpole_task2() {
    ExperimentConfig c = cartpole_task1();
    c.name = "cartpole_task2";
    c.constraint = {"energy", {}, {-5.0}, {5.0}, 30.0, 1.5};
    return c;
}

inline std::optional<ExperimentConfig> preset(const std::string& name) {
    if (name == "cartpole_task1") return cartpole_task1();
    if (name == "cartpole_task2") return cartpole_task2();
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

inline Vector to_vector(const std::vector<double>& v) {
    return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

inline CartPoleParams make_cartpole_params(const ExperimentConfig& c) {
    return {c.dynamics.cart_mass, c.dynamics.pole_mass, c.dynamics.pole_length, c.dynamics.gravity,
            c.dynamics.noise_scale};
}

inline CartPole make_model(const ExperimentConfig& c) { return CartPole(make_cartpole_params(c)); }

inline Problem make_problem(const ExperimentConfig& c) {
    Problem p;
    p.cost.state_weight = to_vector(c.cost.state_weight).asDiagonal();
    p.cost.control_weight = Matrix::Constant(1, 1, c.cost.control_weight);
    p.cost.target = to_vector(c.cost.target);
    p.cost.terminal_weight = to_vector(c.cost.terminal_weight).asDiagonal();
    p.penalty.ceiling = c.constraint.ceiling;
    p.penalty.steepness = c.constraint.initial_k;
    p.penalty.lower = to_vector(c.constraint.lower);
    p.penalty.upper = to_vector(c.constraint.upper);
    if (c.constraint.type == "box") {
        std::vector<Index> idx(c.constraint.indices.begin(), c.constraint.indices.end());
        p.penalty.map = std::make_shared<StateBoxMap>(std::move(idx), 4);
    } else {
        p.penalty.map = std::make_shared<CartPoleEnergyMap>(make_cartpole_params(c));
    }
    p.saturation = {to_vector(c.saturation.limit), to_vector(c.saturation.weight)};
    p.validate();
    return p;
}

inline NetConfig make_net_config(const ExperimentConfig& c) {
    NetConfig n;
    n.state_dim = 4;
    n.hidden = c.network.hidden;
    n.forget_bias = c.network.forget_bias;
    n.value_scale = c.network.value_scale;
    if (!c.network.input_scale.empty()) n.input_scale = to_vector(c.network.input_scale);
    n.validate();
    return n;
}

inline RolloutConfig make_rollout_config(const ExperimentConfig& c) {
    RolloutConfig r;
    r.steps = c.steps();
    r.dt = c.rollout.dt;
    r.batch = c.rollout.batch;
    r.initial_state = to_vector(c.rollout.initial_state);
    r.validate();
    return r;
}

inline TrainerConfig make_trainer_config(const ExperimentConfig& c) {
    TrainerConfig t;
    t.iterations = c.trainer.iterations;
    t.weight_decay = c.trainer.weight_decay;
    t.clip_norm = c.trainer.clip_norm;
    t.adam = {c.trainer.beta1, c.trainer.beta2, c.trainer.epsilon, c.trainer.rate_schedule};
    t.seed = c.trainer.seed;
    t.max_consecutive_divergences = c.trainer.max_consecutive_divergences;
    t.checkpoint_every = c.trainer.checkpoint_every;
    t.validate();
    return t;
}

inline SchedulerState make_scheduler(const ExperimentConfig& c) {
    SchedulerState s;
    s.k = c.constraint.initial_k;
    s.delta = c.scheduler.delta;
    s.beta = c.scheduler.beta;
    s.gamma = c.scheduler.gamma;
    s.gamma_step = c.scheduler.gamma_step;
    s.delta_step = c.scheduler.delta_step;
    s.check_interval = c.scheduler.check_interval;
    s.max_interval = c.scheduler.max_interval;
    s.enabled = c.scheduler.enabled;
    s.validate();
    return s;
}

}  // namespace cfbsde
