#pragma once

#include <string>
#include <vector>

#include "stav/nn.hpp"
#include "stav/spatial.hpp"
#include "stav/temporal.hpp"

// Full video classifier: per-frame CNN features, spatial importance masks,
// temporal soft attention over attended frames, ConvLSTM recurrence, and a
// pooled-affine class readout. One forward pass also returns the
// interpretability artifacts (masks and the attention matrix).

namespace stav {

struct ModelConfig {
  int in_channels = 1;       // grayscale frames
  int frame_size = 56;
  int feature_channels = 8;  // extractor output width
  int mask_c1 = 64;          // mask network widths
  int mask_c2 = 32;
  int hidden_channels = 16;  // ConvLSTM state width
  int energy_channels = 8;
  int n_frames = 8;
  int classes = 4;
  bool eq4_prefactor = true;
};

// Three stride-2 convs with ReLU; 56x56 frames land on a 7x7 grid. No batch
// norm here: per-frame statistics would rescale pure-noise frames to unit
// variance and drown the sprite/background contrast the features must keep.
struct FeatureExtractor {
  Conv2d c1, c2, c3;

  FeatureExtractor() = default;
  FeatureExtractor(int in_channels, int out_channels, Rng& rng)
      : c1(in_channels, out_channels, 3, 2, 1, rng),
        c2(out_channels, out_channels, 3, 2, 1, rng),
        c3(out_channels, out_channels, 3, 2, 1, rng) {
    // Extra gain on top of He init: the 1/n aggregation prefactor downstream
    // shrinks the ConvLSTM inputs, and the ReLU chain is scale-homogeneous,
    // so this is the one place a gain keeps every gate out of its dead zone.
    for (Conv2d* c : {&c1, &c2, &c3})
      for (double& w : c->weight.values()) w *= 2.0;
  }

  Tensor forward(Tape& tape, const Tensor& frame, bool, bool) {
    Tensor t = relu(tape, c1.forward(tape, frame));
    t = relu(tape, c2.forward(tape, t));
    return relu(tape, c3.forward(tape, t));
  }

  void register_params(const std::string& prefix, ParamList& params) {
    c1.register_params(prefix + ".c1", params);
    c2.register_params(prefix + ".c2", params);
    c3.register_params(prefix + ".c3", params);
  }
  void register_state(const std::string&, StateList&) {}
};

struct ForwardResult {
  Tensor logits;               // [K]
  Tensor attention;            // [n,n], row t = weights at step t
  std::vector<Tensor> masks;   // n masks [1,h,w]
  std::vector<Tensor> attended;  // n attended feature maps
};

// Attention stack operating on precomputed per-frame features.
struct AttentionModel {
  ModelConfig cfg;
  MaskNetwork mask_net;
  EnergyNetworks energy;
  ConvLSTMCell cell;
  InitNet g_c, g_h;
  Linear classifier;

  AttentionModel() = default;
  AttentionModel(const ModelConfig& config, Rng& rng)
      : cfg(config),
        mask_net(config.feature_channels, config.mask_c1, config.mask_c2, rng),
        energy(config.hidden_channels, config.feature_channels, config.energy_channels, config.n_frames, rng),
        cell(config.feature_channels, config.hidden_channels, rng),
        g_c(config.feature_channels, config.hidden_channels, rng),
        g_h(config.feature_channels, config.hidden_channels, rng),
        classifier(config.hidden_channels, config.classes, rng) {}

  void register_params(const std::string& prefix, ParamList& params) {
    mask_net.register_params(prefix + ".mask", params);
    energy.register_params(prefix + ".energy", params);
    cell.register_params(prefix + ".cell", params);
    g_c.register_params(prefix + ".g_c", params);
    g_h.register_params(prefix + ".g_h", params);
    classifier.register_params(prefix + ".classifier", params);
  }
  void register_state(const std::string& prefix, StateList& state) {
    mask_net.register_state(prefix + ".mask", state);
    g_c.register_state(prefix + ".g_c", state);
    g_h.register_state(prefix + ".g_h", state);
  }

  // Masks every frame, initializes the ConvLSTM from the mean attended
  // features, then for t = 1..n computes energies, softmax weights (row t),
  // the aggregated input Y_t and one recurrence step. The classifier reads
  // the spatially pooled average of all hidden states.
  ForwardResult forward(Tape& tape, const std::vector<Tensor>& features, bool training, bool update_running = true) {
    const int n = static_cast<int>(features.size());
    if (n != cfg.n_frames)
      throw dim_error("forward: model configured for " + std::to_string(cfg.n_frames) + " frames, got " + std::to_string(n));
    ForwardResult r;
    r.masks.reserve(features.size());
    r.attended.reserve(features.size());
    for (const auto& x : features) {
      Tensor m = mask_forward(tape, mask_net, x, training, update_running);
      r.masks.push_back(m);
      r.attended.push_back(apply_mask(tape, x, m));
    }
    ConvLSTMState state = init_states(tape, g_c, g_h, r.attended, training, update_running);

    // The frame branch of the energy network does not depend on t.
    std::vector<Tensor> frame_scores;
    frame_scores.reserve(r.attended.size());
    for (const auto& f : r.attended) frame_scores.push_back(energy.frame_branch(tape, f));
    Tensor frame_energy = concat1d(tape, frame_scores);

    std::vector<Tensor> weight_rows;
    std::vector<Tensor> hidden_states;
    weight_rows.reserve(features.size());
    hidden_states.reserve(features.size());
    for (int t = 0; t < n; ++t) {
      Tensor e = add(tape, energy.hidden_branch(tape, state.h), frame_energy);
      Tensor w = attention_weights(tape, e);
      weight_rows.push_back(w);
      Tensor y = aggregate(tape, w, r.attended, cfg.eq4_prefactor);
      state = convlstm_step(tape, cell, y, state);
      hidden_states.push_back(state.h);
    }
    Tensor mean_hidden = average(tape, hidden_states);
    Tensor pooled = reduce(tape, Reduce::mean, mean_hidden, {1, 2});
    r.logits = classifier.forward(tape, pooled);
    r.attention = stack_rows(tape, weight_rows);
    return r;
  }
};

// Extractor + attention stack on raw grayscale frames.
struct VideoModel {
  FeatureExtractor extractor;
  AttentionModel attn;

  VideoModel() = default;
  VideoModel(const ModelConfig& config, Rng& rng) : extractor(config.in_channels, config.feature_channels, rng), attn(config, rng) {}

  const ModelConfig& config() const { return attn.cfg; }

  void register_params(ParamList& params) {
    extractor.register_params("extractor", params);
    attn.register_params("attn", params);
  }
  void register_state(StateList& state) {
    extractor.register_state("extractor", state);
    attn.register_state("attn", state);
  }

  std::vector<Tensor> frame_features(Tape& tape, const std::vector<Tensor>& frames, bool training, bool update_running = true) {
    std::vector<Tensor> features;
    features.reserve(frames.size());
    for (const auto& f : frames) features.push_back(extractor.forward(tape, f, training, update_running));
    return features;
  }

  ForwardResult forward(Tape& tape, const std::vector<Tensor>& frames, bool training, bool update_running = true) {
    return attn.forward(tape, frame_features(tape, frames, training, update_running), training, update_running);
  }
};

// Deterministic argmax (lowest index wins ties).
inline int predict_class(const Tensor& logits) {
  int best = 0;
  for (int i = 1; i < logits.dim(0); ++i)
    if (logits.data()[i] > logits.data()[best]) best = i;
  return best;
}

}  // namespace stav
