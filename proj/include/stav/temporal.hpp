#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "stav/nn.hpp"
#include "stav/tensor.hpp"

// Temporal attention: per-step frame energies from the recurrent hidden
// state and the attended frames, softmax importance weights, weighted
// feature aggregation, and the ConvLSTM recurrence with its learned
// state initialization.

namespace stav {

struct ConvLSTMState {
  Tensor h, c;
};

// Energy e[t,i] = phi_h(H_{t-1})[i] + phi_x(X~_i). Each branch is a K3 conv,
// ReLU, global spatial mean, then an affine map (to n scalars for the hidden
// branch, to one scalar per frame for the feature branch).
struct EnergyNetworks {
  Conv2d conv_h, conv_x;
  Linear fc_h, fc_x;

  EnergyNetworks() = default;
  EnergyNetworks(int hidden_channels, int feature_channels, int energy_channels, int n_frames, Rng& rng)
      : conv_h(hidden_channels, energy_channels, 3, 1, 1, rng),
        conv_x(feature_channels, energy_channels, 3, 1, 1, rng),
        fc_h(energy_channels, n_frames, rng),
        fc_x(energy_channels, 1, rng) {}

  void register_params(const std::string& prefix, ParamList& params) {
    conv_h.register_params(prefix + ".conv_h", params);
    fc_h.register_params(prefix + ".fc_h", params);
    conv_x.register_params(prefix + ".conv_x", params);
    fc_x.register_params(prefix + ".fc_x", params);
  }

  Tensor hidden_branch(Tape& tape, const Tensor& h_prev) const {
    Tensor t = relu(tape, conv_h.forward(tape, h_prev));
    return fc_h.forward(tape, reduce(tape, Reduce::mean, t, {1, 2}));
  }

  Tensor frame_branch(Tape& tape, const Tensor& frame) const {
    Tensor t = relu(tape, conv_x.forward(tape, frame));
    return fc_x.forward(tape, reduce(tape, Reduce::mean, t, {1, 2}));  // [1]
  }
};

inline Tensor energies(Tape& tape, const EnergyNetworks& nets, const Tensor& h_prev, const std::vector<Tensor>& frames) {
  if (frames.empty()) throw dim_error("energies: empty frame list");
  Tensor from_hidden = nets.hidden_branch(tape, h_prev);
  if (from_hidden.dim(0) != static_cast<int>(frames.size()))
    throw dim_error("energies: network emits " + std::to_string(from_hidden.dim(0)) + " energies but got " +
                    std::to_string(frames.size()) + " frames");
  std::vector<Tensor> per_frame;
  per_frame.reserve(frames.size());
  for (const auto& f : frames) per_frame.push_back(nets.frame_branch(tape, f));
  return add(tape, from_hidden, concat1d(tape, per_frame));
}

inline Tensor attention_weights(Tape& tape, const Tensor& e) { return softmax(tape, e); }

// Y_t = prefactor * sum_i w[i] * frames[i]; with_prefactor selects the
// printed 1/n factor (on by default).
inline Tensor aggregate(Tape& tape, const Tensor& w, const std::vector<Tensor>& frames, bool with_prefactor = true) {
  const double pre = with_prefactor ? 1.0 / static_cast<double>(frames.size()) : 1.0;
  return weighted_sum(tape, w, frames, pre);
}

// Standard ConvLSTM cell, no peepholes: all four gates convolve the
// channel-concatenation [Y_t, H_{t-1}] with K3 S1 P1 kernels.
struct ConvLSTMCell {
  Conv2d gate_i, gate_f, gate_o, gate_g;

  ConvLSTMCell() = default;
  ConvLSTMCell(int input_channels, int hidden_channels, Rng& rng)
      : gate_i(input_channels + hidden_channels, hidden_channels, 3, 1, 1, rng),
        gate_f(input_channels + hidden_channels, hidden_channels, 3, 1, 1, rng),
        gate_o(input_channels + hidden_channels, hidden_channels, 3, 1, 1, rng),
        gate_g(input_channels + hidden_channels, hidden_channels, 3, 1, 1, rng) {
    // Damped gate kernels plus a positive forget bias: the fresh recurrence
    // starts as a mild integrator of the learned initial state instead of
    // injecting conv noise, which otherwise pressures the masks to shrink.
    for (Conv2d* g : {&gate_i, &gate_f, &gate_o, &gate_g})
      for (double& w : g->weight.values()) w *= 0.2;
    for (double& b : gate_f.bias.values()) b = 1.0;
  }

  void register_params(const std::string& prefix, ParamList& params) {
    gate_i.register_params(prefix + ".gate_i", params);
    gate_f.register_params(prefix + ".gate_f", params);
    gate_o.register_params(prefix + ".gate_o", params);
    gate_g.register_params(prefix + ".gate_g", params);
  }
};

// i,f,o = sigmoid(conv), g = tanh(conv); C' = f.C + i.g; H' = o.tanh(C').
inline ConvLSTMState convlstm_step(Tape& tape, const ConvLSTMCell& cell, const Tensor& input, const ConvLSTMState& state) {
  Tensor joint = concat_channels(tape, input, state.h);
  Tensor gi = sigmoid(tape, cell.gate_i.forward(tape, joint));
  Tensor gf = sigmoid(tape, cell.gate_f.forward(tape, joint));
  Tensor go = sigmoid(tape, cell.gate_o.forward(tape, joint));
  Tensor gg = tanh_op(tape, cell.gate_g.forward(tape, joint));
  Tensor c_next = add(tape, mul(tape, gf, state.c), mul(tape, gi, gg));
  Tensor h_next = mul(tape, go, tanh_op(tape, c_next));
  return {h_next, c_next};
}

// Two conv layers with batch norm, mapping mean attended features to the
// initial hidden/cell tensors.
struct InitNet {
  Conv2d l1, l2;
  BatchNorm2d bn1, bn2;

  InitNet() = default;
  InitNet(int feature_channels, int hidden_channels, Rng& rng)
      : l1(feature_channels, hidden_channels, 3, 1, 1, rng),
        l2(hidden_channels, hidden_channels, 3, 1, 1, rng),
        bn1(hidden_channels),
        bn2(hidden_channels) {}

  void register_params(const std::string& prefix, ParamList& params) {
    l1.register_params(prefix + ".l1", params);
    bn1.register_params(prefix + ".bn1", params);
    l2.register_params(prefix + ".l2", params);
    bn2.register_params(prefix + ".bn2", params);
  }
  void register_state(const std::string& prefix, StateList& state) {
    bn1.register_state(prefix + ".bn1", state);
    bn2.register_state(prefix + ".bn2", state);
  }

  Tensor forward(Tape& tape, const Tensor& x, bool training, bool update_running = true) {
    Tensor t = relu(tape, bn1.forward(tape, l1.forward(tape, x), training, update_running));
    return bn2.forward(tape, l2.forward(tape, t), training, update_running);
  }
};

// C_0 = g_c(mean X~), H_0 = g_h(mean X~).
inline ConvLSTMState init_states(Tape& tape, InitNet& g_c, InitNet& g_h, const std::vector<Tensor>& frames, bool training,
                                 bool update_running = true) {
  if (frames.empty()) throw dim_error("init_states: empty frame list");
  Tensor mean_features = average(tape, frames);
  ConvLSTMState s;
  s.c = g_c.forward(tape, mean_features, training, update_running);
  s.h = g_h.forward(tape, mean_features, training, update_running);
  return s;
}

// CSV export of the attention matrix: header t,i,w, both indices 1-based,
// 17 significant digits.
inline void write_attention_csv(const std::string& path, const Tensor& w) {
  if (w.rank() != 2) throw usage_error("write_attention_csv: expected [T,n] matrix");
  std::ofstream f(path);
  if (!f) throw usage_error("write_attention_csv: cannot open " + path);
  f << "t,i,w\n";
  char buf[64];
  for (int t = 0; t < w.dim(0); ++t)
    for (int i = 0; i < w.dim(1); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", w.at({t, i}));
      f << (t + 1) << "," << (i + 1) << "," << buf << "\n";
    }
}

}  // namespace stav
