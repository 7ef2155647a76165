#pragma once

#include <string>
#include <utility>
#include <vector>

#include "stav/tensor.hpp"

// Thin layer wrappers over the tensor ops: they own parameters, expose a
// forward(), and register themselves in a named parameter list used by the
// optimizer, the checkpoint format and the gradient checker. Registration
// order is fixed so serialized artifacts are reproducible.

namespace stav {

struct ParamList {
  std::vector<std::pair<std::string, Tensor*>> items;
  void add(const std::string& name, Tensor& t) {
    t.enable_grad();
    items.push_back({name, &t});
  }
  void zero_grad() {
    for (auto& [name, t] : items) t->zero_grad();
  }
  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : items) n += t->size();
    return n;
  }
};

// Mutable non-parameter state (batch-norm running statistics).
struct StateList {
  std::vector<std::pair<std::string, std::vector<double>*>> items;
  void add(const std::string& name, std::vector<double>& v) { items.push_back({name, &v}); }
};

struct Conv2d {
  Tensor weight;  // [C_out,C_in,k,k]
  Tensor bias;    // [C_out]
  int stride = 1;
  int padding = 1;

  Conv2d() = default;
  // He-normal weight init scaled by fan-in; zero bias.
  Conv2d(int c_in, int c_out, int k, int stride_, int padding_, Rng& rng)
      : stride(stride_), padding(padding_) {
    const double std_dev = std::sqrt(2.0 / (static_cast<double>(c_in) * k * k));
    weight = Tensor::random_gaussian({c_out, c_in, k, k}, rng, 0.0, std_dev);
    bias = Tensor::zeros({c_out});
  }

  Tensor forward(Tape& tape, const Tensor& x) const {
    return add_channel_bias(tape, conv2d(tape, x, weight, stride, padding), bias);
  }

  void register_params(const std::string& prefix, ParamList& params) {
    params.add(prefix + ".weight", weight);
    params.add(prefix + ".bias", bias);
  }
};

struct BatchNorm2d {
  Tensor gamma, beta;
  BnStats stats;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels) : gamma(Tensor::ones({channels})), beta(Tensor::zeros({channels})), stats(channels) {}

  Tensor forward(Tape& tape, const Tensor& x, bool training, bool update_running = true) {
    return batchnorm2d(tape, x, gamma, beta, stats, training, update_running);
  }

  void register_params(const std::string& prefix, ParamList& params) {
    params.add(prefix + ".gamma", gamma);
    params.add(prefix + ".beta", beta);
  }
  void register_state(const std::string& prefix, StateList& state) {
    state.add(prefix + ".running_mean", stats.mean);
    state.add(prefix + ".running_var", stats.var);
  }
};

struct Linear {
  Tensor weight;  // [out,in]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(int in_n, int out_n, Rng& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(in_n));
    weight = Tensor::random_uniform({out_n, in_n}, rng, -bound, bound);
    bias = Tensor::zeros({out_n});
  }

  Tensor forward(Tape& tape, const Tensor& x) const { return linear(tape, weight, x, bias); }

  void register_params(const std::string& prefix, ParamList& params) {
    params.add(prefix + ".weight", weight);
    params.add(prefix + ".bias", bias);
  }
};

}  // namespace stav
