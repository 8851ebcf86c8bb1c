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

// Versioned JSON checkpoints (parameters, optimizer and scheduler state),
// training-log records, and atomic file output. Doubles are written in
// shortest round-trip form, so a reload is bit-exact.

#include "cfbsde/config.hpp"
#include "cfbsde/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace cfbsde {

inline constexpr const char* kCheckpointFormat = "cfbsde-checkpoint/1";

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Writes via a sibling temporary file and a rename, so the target is either
/// complete or untouched.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out << contents;
        out.flush();
        if (!out) {
            out.close();
            std::filesystem::remove(tmp);
            throw std::runtime_error("failed writing " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace detail {

inline nlohmann::json matrix_json(const Matrix& m) {
    std::vector<double> data(static_cast<std::size_t>(m.size()));
    for (Index r = 0, i = 0; r < m.rows(); ++r)
        for (Index c = 0; c < m.cols(); ++c, ++i) data[static_cast<std::size_t>(i)] = m(r, c);
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Matrix matrix_from_json(const nlohmann::json& j, const std::string& where) {
    try {
        const Index rows = j.at("rows").get<Index>(), cols = j.at("cols").get<Index>();
        const auto data = j.at("data").get<std::vector<double>>();
        if (rows < 0 || cols < 0 || static_cast<Index>(data.size()) != rows * cols)
            throw CheckpointError(where + ": data length does not match shape");
        Matrix m(rows, cols);
        for (Index r = 0, i = 0; r < rows; ++r)
            for (Index c = 0; c < cols; ++c, ++i) m(r, c) = data[static_cast<std::size_t>(i)];
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(where + ": " + e.what());
    }
}

}  // namespace detail

inline nlohmann::json params_json(const NetParams& p) {
    nlohmann::json j = nlohmann::json::object();
    p.for_each_block([&](const char* name, const Matrix& m, bool) { j[name] = detail::matrix_json(m); });
    return j;
}

inline NetParams params_from_json(const nlohmann::json& j, const std::string& where) {
    NetParams p;
    p.for_each_block([&](const char* name, Matrix& m, bool) {
        if (!j.contains(name)) throw CheckpointError(where + ": missing block " + name);
        m = detail::matrix_from_json(j.at(name), where + "." + name);
    });
    // Shapes must be mutually consistent.
    const Index n = p.lstm.w_input.rows(), h = p.lstm.w_recurrent.rows();
    const bool ok = p.lstm.w_input.cols() == 4 * h && p.lstm.w_recurrent.cols() == 4 * h &&
                    p.lstm.bias.rows() == 1 && p.lstm.bias.cols() == 4 * h && p.head.weight.rows() == h &&
                    p.head.weight.cols() == n && p.head.bias.rows() == 1 && p.head.bias.cols() == n &&
                    p.initial.value.size() == 1 && p.initial.value_gradient.cols() == n &&
                    p.initial.hidden.cols() == h && p.initial.cell.cols() == h;
    if (!ok) throw CheckpointError(where + ": inconsistent block shapes");
    return p;
}

inline nlohmann::json scheduler_json(const SchedulerState& s) {
    return {{"k", s.k},
            {"delta", s.delta},
            {"beta", s.beta ? nlohmann::json(*s.beta) : nlohmann::json(nullptr)},
            {"gamma", s.gamma},
            {"gamma_step", s.gamma_step},
            {"delta_step", s.delta_step},
            {"check_interval", s.check_interval},
            {"max_interval", s.max_interval},
            {"enabled", s.enabled},
            {"done", s.done},
            {"history", std::vector<double>(s.history.begin(), s.history.end())}};
}

inline SchedulerState scheduler_from_json(const nlohmann::json& j) {
    try {
        SchedulerState s;
        s.k = j.at("k").get<double>();
        s.delta = j.at("delta").get<double>();
        if (!j.at("beta").is_null()) s.beta = j.at("beta").get<double>();
        s.gamma = j.at("gamma").get<double>();
        s.gamma_step = j.at("gamma_step").get<double>();
        s.delta_step = j.at("delta_step").get<double>();
        s.check_interval = j.at("check_interval").get<std::int64_t>();
        s.max_interval = j.at("max_interval").get<std::int64_t>();
        s.enabled = j.at("enabled").get<bool>();
        s.done = j.at("done").get<bool>();
        const auto h = j.at("history").get<std::vector<double>>();
        s.history.assign(h.begin(), h.end());
        s.validate();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("scheduler: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(e.what());
    }
}

inline nlohmann::json checkpoint_json(const TrainingState& s, const ExperimentConfig& cfg) {
    return {{"format", kCheckpointFormat},
            {"iteration", s.iteration},
            {"divergences", s.divergences},
            {"consecutive_divergences", s.consecutive_divergences},
            {"params", params_json(s.params)},
            {"adam", {{"step", s.adam.step}, {"first", params_json(s.adam.first)}, {"second", params_json(s.adam.second)}}},
            {"scheduler", scheduler_json(s.scheduler)},
            {"config", to_json(cfg)}};
}

struct Checkpoint {
    TrainingState state;
    ExperimentConfig config;
};

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("format") || j.at("format") != kCheckpointFormat)
        throw CheckpointError(std::string("not a checkpoint (expected format tag ") + kCheckpointFormat + ")");
    try {
        Checkpoint c;
        c.state.iteration = j.at("iteration").get<std::int64_t>();
        c.state.divergences = j.at("divergences").get<std::int64_t>();
        c.state.consecutive_divergences = j.at("consecutive_divergences").get<std::int64_t>();
        c.state.params = params_from_json(j.at("params"), "params");
        c.state.adam.step = j.at("adam").at("step").get<std::int64_t>();
        c.state.adam.first = params_from_json(j.at("adam").at("first"), "adam.first");
        c.state.adam.second = params_from_json(j.at("adam").at("second"), "adam.second");
        c.state.scheduler = scheduler_from_json(j.at("scheduler"));
        c.config = config_from_json(j.at("config"));
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint config: ") + e.what());
    }
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainingState& s, const ExperimentConfig& cfg) {
    write_file_atomic(path, checkpoint_json(s, cfg).dump() + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw CheckpointError(path.string() + ": invalid JSON");
    }
    return checkpoint_from_json(j);
}

/// Throws unless the parameter shapes match the network section of `cfg`.
inline void check_compatible(const NetParams& p, const ExperimentConfig& cfg) {
    if (p.state_dim() != 4 || p.hidden() != cfg.network.hidden)
        throw CheckpointError("checkpoint has state_dim " + std::to_string(p.state_dim()) + " and hidden " +
                              std::to_string(p.hidden()) + ", config expects 4 and " +
                              std::to_string(cfg.network.hidden));
}

// ---------------------------------------------------------------------------
// Training log
// ---------------------------------------------------------------------------

/// Non-finite numbers become null in the log.
inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline nlohmann::json iteration_json(const IterationRecord& r) {
    nlohmann::json j = {{"event", "iteration"},
                        {"iteration", r.iteration},
                        {"loss", finite_or_null(r.loss)},
                        {"mean_state_cost", finite_or_null(r.mean_state_cost)},
                        {"violation_fraction", finite_or_null(r.violation_fraction)},
                        {"k", r.k},
                        {"grad_norm", finite_or_null(r.grad_norm)},
                        {"learning_rate", r.learning_rate},
                        {"diverged", r.diverged}};
    return j;
}

inline nlohmann::json divergence_json(const IterationRecord& r) {
    return {{"event", "divergence"},
            {"iteration", r.iteration},
            {"step", r.divergence_step},
            {"member", r.divergence_member},
            {"reason", r.divergence_reason},
            {"k", r.k}};
}

inline nlohmann::json update_json(const SchedulerUpdate& u) {
    return {{"event", "k_update"}, {"iteration", u.iteration}, {"sigma", u.sigma}, {"beta", u.beta},
            {"old_k", u.old_k},    {"new_k", u.new_k},         {"forced", u.forced}};
}

}  // namespace cfbsde
