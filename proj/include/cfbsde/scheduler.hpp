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

// Adaptive steepening of the constraint penalty.
//
// Every `check_interval` iterations the population standard deviation of the
// buffered per-iteration mean state costs is compared with a threshold. When
// it falls below (training has settled for the current wall) or when
// `max_interval` divides the iteration, the wall is steepened:
//   k, delta, beta, gamma <- k + delta, delta - delta_step, gamma * beta, gamma + gamma_step
// followed by delta >= 0 and gamma <= 1. Once a whole training batch stays
// inside the constraint bounds the schedule freezes for good.

#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace cfbsde {

struct SchedulerState {
    double k = 1.5;
    double delta = 0.5;
    std::optional<double> beta; // unset: taken from the first full window
    double gamma = 0.9;
    double gamma_step = 0.01;   // added to gamma on each update
    double delta_step = 0.05;   // subtracted from delta on each update
    std::int64_t check_interval = 50;
    std::int64_t max_interval = 500;
    bool enabled = true;        // false pins k (fixed-k baseline)
    bool done = false;
    std::deque<double> history;

    void validate() const {
        if (!(k > 0.0)) throw std::invalid_argument("scheduler: k must be positive");
        if (!(delta >= 0.0)) throw std::invalid_argument("scheduler: delta must be non-negative");
        if (beta && !(*beta >= 0.0)) throw std::invalid_argument("scheduler: beta must be non-negative");
        if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("scheduler: gamma must be in (0, 1]");
        if (check_interval < 1 || max_interval < 1)
            throw std::invalid_argument("scheduler: intervals must be >= 1");
    }
};

struct SchedulerUpdate {
    std::int64_t iteration = 0;
    double sigma = 0.0;
    double beta = 0.0;      // threshold the check was made against
    double old_k = 0.0;
    double new_k = 0.0;
    bool forced = false;    // triggered by max_interval rather than sigma < beta
};

struct ObserveResult {
    bool k_changed = false;
    bool checked = false;
    bool finished = false;  // the inside-bounds signal fired on this call
    std::optional<SchedulerUpdate> update;
};

/// Population mean and standard deviation (one pass).
inline std::pair<double, double> cost_variance(std::span<const double> history) {
    if (history.empty()) throw std::invalid_argument("cost_variance: empty history");
    double mean = 0.0, m2 = 0.0;
    std::size_t count = 0;
    for (double c : history) {
        ++count;
        const double d = c - mean;
        mean += d / static_cast<double>(count);
        m2 += d * (c - mean);
    }
    return {mean, std::sqrt(m2 / static_cast<double>(count))};
}

inline std::pair<double, double> cost_variance(const std::deque<double>& history) {
    std::vector<double> v(history.begin(), history.end());
    return cost_variance(std::span<const double>(v));
}

/// Feeds one training iteration (l >= 1) into the schedule.
inline ObserveResult observe(SchedulerState& s, std::int64_t iteration, double mean_state_cost, bool inside) {
    ObserveResult out;
    if (!s.enabled || s.done) return out;
    if (inside) {
        s.done = true;
        out.finished = true;
        return out;
    }
    s.history.push_back(mean_state_cost);
    while (static_cast<std::int64_t>(s.history.size()) > s.check_interval) s.history.pop_front();

    if (iteration % s.check_interval == 0) {
        out.checked = true;
        const double sigma = cost_variance(s.history).second;
        if (!s.beta) s.beta = sigma;
        const bool forced = iteration % s.max_interval == 0;
        if (sigma < *s.beta || forced) {
            SchedulerUpdate u{iteration, sigma, *s.beta, s.k, s.k + s.delta, forced && !(sigma < *s.beta)};
            const double k = s.k + s.delta, delta = s.delta - s.delta_step, beta = s.gamma * *s.beta,
                         gamma = s.gamma + s.gamma_step;
            s.k = k;
            s.delta = delta;
            s.beta = beta;
            s.gamma = gamma;
            s.history.clear();
            out.k_changed = u.new_k != u.old_k;
            out.update = u;
        }
    }
    if (s.delta < 0.0) s.delta = 0.0;
    if (s.gamma > 1.0) s.gamma = 1.0;
    return out;
}

}  // namespace cfbsde
