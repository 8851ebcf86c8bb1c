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

// Recurrent value-gradient network: a single LSTM layer shared across all
// time steps, a dense head producing V_x, and the learned initial quantities
// (y0, V_x at t0, initial hidden and cell state).

#include "cfbsde/random.hpp"
#include "cfbsde/tensor_ad.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>

namespace cfbsde {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

struct NetConfig {
    Index state_dim = 4;
    Index hidden = 16;
    double forget_bias = 0.0;
    /// Per-dimension multipliers applied to the state before the cell; empty = identity.
    Vector input_scale;
    /// Multiplier on the learned initial value y0.
    double value_scale = 1.0;

    void validate() const {
        if (state_dim < 1 || hidden < 1) throw std::invalid_argument("network: state_dim and hidden must be >= 1");
        if (input_scale.size() != 0 && input_scale.size() != state_dim)
            throw std::invalid_argument("network: input_scale must have state_dim entries");
        if (!(value_scale > 0.0)) throw std::invalid_argument("network: value_scale must be positive");
    }
};

/// Gate blocks are stored side by side in the order input, forget, output,
/// candidate; each block is `hidden` columns wide.
struct LstmParams {
    Matrix w_input;     // n x 4h
    Matrix w_recurrent; // h x 4h
    Matrix bias;        // 1 x 4h
};

struct HeadParams {
    Matrix weight; // h x n
    Matrix bias;   // 1 x n
};

struct InitialParams {
    Matrix value;          // 1 x 1
    Matrix value_gradient; // 1 x n
    Matrix hidden;         // 1 x h
    Matrix cell;           // 1 x h
};

struct NetParams {
    LstmParams lstm;
    HeadParams head;
    InitialParams initial;

    /// Visits every block as (name, matrix, belongs_to_theta). The order is
    /// fixed and doubles as the serialisation order.
    template <typename F>
    void for_each_block(F&& f) {
        f("lstm.w_input", lstm.w_input, true);
        f("lstm.w_recurrent", lstm.w_recurrent, true);
        f("lstm.bias", lstm.bias, true);
        f("head.weight", head.weight, true);
        f("head.bias", head.bias, true);
        f("initial.value", initial.value, false);
        f("initial.value_gradient", initial.value_gradient, false);
        f("initial.hidden", initial.hidden, false);
        f("initial.cell", initial.cell, false);
    }
    template <typename F>
    void for_each_block(F&& f) const {
        const_cast<NetParams*>(this)->for_each_block(
            [&](const char* name, Matrix& m, bool theta) { f(name, static_cast<const Matrix&>(m), theta); });
    }

    [[nodiscard]] Index hidden() const { return lstm.w_recurrent.rows(); }
    [[nodiscard]] Index state_dim() const { return lstm.w_input.rows(); }

    [[nodiscard]] Index parameter_count() const {
        Index total = 0;
        for_each_block([&](const char*, const Matrix& m, bool) { total += m.size(); });
        return total;
    }

    [[nodiscard]] double theta_squared_norm() const {
        double s = 0.0;
        for_each_block([&](const char*, const Matrix& m, bool theta) {
            if (theta) s += m.squaredNorm();
        });
        return s;
    }
};

/// Entries ~ N(0, 2 / (rows + cols)).
inline Matrix xavier_init(Index rows, Index cols, RandomStream& rng) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("xavier_init: fan-in and fan-out must be >= 1");
    const double sd = std::sqrt(2.0 / static_cast<double>(rows + cols));
    Matrix w(rows, cols);
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) w(i, j) = sd * rng.normal();
    return w;
}

inline NetParams init_net(const NetConfig& cfg, RandomStream& rng) {
    cfg.validate();
    const Index n = cfg.state_dim, h = cfg.hidden;
    NetParams p;
    p.lstm.w_input = xavier_init(n, 4 * h, rng);
    p.lstm.w_recurrent = xavier_init(h, 4 * h, rng);
    p.lstm.bias = Matrix::Zero(1, 4 * h);
    p.lstm.bias.middleCols(h, h).setConstant(cfg.forget_bias);
    p.head.weight = xavier_init(h, n, rng);
    p.head.bias = Matrix::Zero(1, n);
    p.initial.value = Matrix::Zero(1, 1);
    p.initial.value_gradient = Matrix::Zero(1, n);
    p.initial.hidden = Matrix::Zero(1, h);
    p.initial.cell = Matrix::Zero(1, h);
    return p;
}

/// Network parameters placed on a tape.
struct NetVars {
    ad::Var w_input, w_recurrent, bias;
    ad::Var head_weight, head_bias;
    ad::Var value, value_gradient, hidden, cell;
};

inline NetVars attach(ad::Tape& tape, const NetParams& p, bool trainable) {
    auto put = [&](const Matrix& m) { return tape.leaf(m, trainable); };
    return NetVars{put(p.lstm.w_input),   put(p.lstm.w_recurrent),     put(p.lstm.bias),
                   put(p.head.weight),    put(p.head.bias),            put(p.initial.value),
                   put(p.initial.value_gradient), put(p.initial.hidden), put(p.initial.cell)};
}

/// Gradients read back from a tape into the parameter layout.
inline NetParams gradients_of(const ad::Gradients& g, const NetVars& v) {
    NetParams out;
    out.lstm = {g[v.w_input], g[v.w_recurrent], g[v.bias]};
    out.head = {g[v.head_weight], g[v.head_bias]};
    out.initial = {g[v.value], g[v.value_gradient], g[v.hidden], g[v.cell]};
    return out;
}

/// Fused LSTM cell:
///   z = x Wx + H Wh + b;  i, f, o = logistic;  g = tanh
///   C' = f.C + i.g;  H' = o.tanh(C')
/// Returns (H', C').
inline std::pair<ad::Var, ad::Var> lstm_cell(const ad::Var& x, const ad::Var& h, const ad::Var& c, const NetVars& w) {
    ad::Tape& t = *x.tape();
    const Index hid = h.cols();
    if (w.w_input.rows() != x.cols() || w.w_recurrent.rows() != hid || w.w_input.cols() != 4 * hid ||
        c.cols() != hid || h.rows() != x.rows() || c.rows() != x.rows())
        throw ad::ShapeError("lstm_cell: inconsistent shapes");

    Matrix z = x.value() * w.w_input.value() + h.value() * w.w_recurrent.value();
    z.rowwise() += w.bias.value().row(0);
    auto logistic = [](const auto& m) -> Matrix { return (1.0 / (1.0 + (-m.array()).exp())).matrix(); };
    Matrix gi = logistic(z.middleCols(0, hid));
    Matrix gf = logistic(z.middleCols(hid, hid));
    Matrix go = logistic(z.middleCols(2 * hid, hid));
    Matrix gc = z.middleCols(3 * hid, hid).array().tanh().matrix();
    Matrix c_next = gf.cwiseProduct(c.value()) + gi.cwiseProduct(gc);
    Matrix tc = c_next.array().tanh().matrix();
    Matrix out(x.rows(), 2 * hid);
    out.leftCols(hid) = go.cwiseProduct(tc);
    out.rightCols(hid) = c_next;

    const int ix = x.id(), ih = h.id(), ic = c.id();
    const int iwx = w.w_input.id(), iwh = w.w_recurrent.id(), ib = w.bias.id();
    const std::array<ad::Var, 6> inputs{x, h, c, w.w_input, w.w_recurrent, w.bias};
    ad::Var joint = t.record(
        "lstm_cell", std::span<const ad::Var>(inputs), std::move(out),
        [=, gi = std::move(gi), gf = std::move(gf), go = std::move(go), gc = std::move(gc),
         tc = std::move(tc)](const Matrix& g, ad::Tape& tp) {
            const Matrix dh = g.leftCols(hid);
            const Matrix dc_total = g.rightCols(hid) + (dh.array() * go.array() * (1.0 - tc.array().square())).matrix();
            Matrix dz(g.rows(), 4 * hid);
            dz.middleCols(0, hid) = (dc_total.array() * gc.array() * gi.array() * (1.0 - gi.array())).matrix();
            dz.middleCols(hid, hid) =
                (dc_total.array() * tp.value(ic).array() * gf.array() * (1.0 - gf.array())).matrix();
            dz.middleCols(2 * hid, hid) = (dh.array() * tc.array() * go.array() * (1.0 - go.array())).matrix();
            dz.middleCols(3 * hid, hid) = (dc_total.array() * gi.array() * (1.0 - gc.array().square())).matrix();
            tp.accumulate(ic, dc_total.cwiseProduct(gf));
            if (tp.node(ix).requires_grad) tp.accumulate(ix, dz * tp.value(iwx).transpose());
            if (tp.node(ih).requires_grad) tp.accumulate(ih, dz * tp.value(iwh).transpose());
            if (tp.node(iwx).requires_grad) tp.accumulate(iwx, tp.value(ix).transpose() * dz);
            if (tp.node(iwh).requires_grad) tp.accumulate(iwh, tp.value(ih).transpose() * dz);
            tp.accumulate(ib, dz.colwise().sum());
        });
    return {ad::slice_cols(joint, 0, hid), ad::slice_cols(joint, hid, hid)};
}

/// The same cell built from primitive tape operations. Slower; used to
/// cross-check the fused version.
inline std::pair<ad::Var, ad::Var> lstm_cell_reference(const ad::Var& x, const ad::Var& h, const ad::Var& c,
                                                       const NetVars& w) {
    const Index hid = h.cols();
    ad::Var z = ad::add(ad::add(ad::matmul(x, w.w_input), ad::matmul(h, w.w_recurrent)), w.bias);
    ad::Var gi = ad::sigmoid(ad::slice_cols(z, 0, hid));
    ad::Var gf = ad::sigmoid(ad::slice_cols(z, hid, hid));
    ad::Var go = ad::sigmoid(ad::slice_cols(z, 2 * hid, hid));
    ad::Var gc = ad::tanh(ad::slice_cols(z, 3 * hid, hid));
    ad::Var c_next = ad::add(ad::mul(gf, c), ad::mul(gi, gc));
    ad::Var h_next = ad::mul(go, ad::tanh(c_next));
    return {h_next, c_next};
}

struct LstmStep {
    ad::Var value_gradient; // M x n
    ad::Var hidden;         // M x h
    ad::Var cell;           // M x h
};

/// One recurrent step: V_x prediction for the (already advanced) state.
inline LstmStep lstm_step(const NetVars& w, const ad::Var& state, const ad::Var& hidden, const ad::Var& cell,
                          const Vector& input_scale = {}) {
    ad::Var in = state;
    if (input_scale.size() != 0) in = ad::mul(state, state.tape()->constant(input_scale.transpose()));
    auto [h_next, c_next] = lstm_cell(in, hidden, cell, w);
    ad::Var vx = ad::add(ad::matmul(h_next, w.head_weight), w.head_bias);
    return {vx, h_next, c_next};
}

}  // namespace cfbsde
