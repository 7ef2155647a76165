#pragma once

#include <string>
#include <vector>

#include "stav/nn.hpp"
#include "stav/pgm.hpp"
#include "stav/tensor.hpp"

// Spatial attention: a three-layer conv net produces a per-frame importance
// mask in (0,1), which multiplies the frame features elementwise (the mask
// is replicated across feature channels).

namespace stav {

struct MaskNetwork {
  Conv2d l1, l2, l3;
  BatchNorm2d bn1, bn2;

  MaskNetwork() = default;
  MaskNetwork(int in_channels, int c1, int c2, Rng& rng)
      : l1(in_channels, c1, 3, 1, 1, rng),
        l2(c1, c2, 3, 1, 1, rng),
        l3(c2, 1, 3, 1, 1, rng),
        bn1(c1),
        bn2(c2) {
    // Positive final-layer weights with a negative bias make the initial
    // mask a feature-energy salience map: cells with above-average activity
    // start over the 0.5 binarization threshold and quiet cells under it.
    // The contrast regularizer amplifies whatever side of the threshold a
    // cell starts on, so the initial sign pattern decides which regions it
    // polishes up or suppresses; an unsigned random start makes that a coin
    // flip per region, while the salience start points it at the sprite.
    for (double& w : l3.weight.values()) w = rng.uniform(0.01, 0.04);
    l3.bias.data()[0] = -4.0;
  }

  void register_params(const std::string& prefix, ParamList& params) {
    l1.register_params(prefix + ".l1", params);
    bn1.register_params(prefix + ".bn1", params);
    l2.register_params(prefix + ".l2", params);
    bn2.register_params(prefix + ".bn2", params);
    l3.register_params(prefix + ".l3", params);
  }
  void register_state(const std::string& prefix, StateList& state) {
    bn1.register_state(prefix + ".bn1", state);
    bn2.register_state(prefix + ".bn2", state);
  }
};

// K3 S1 P1 stack keeps H and W, so the mask aligns with its frame.
inline Tensor mask_forward(Tape& tape, MaskNetwork& net, const Tensor& x, bool training, bool update_running = true) {
  if (x.rank() != 3) throw dim_error("mask_forward: frame features must be [C,H,W]");
  if (x.dim(0) != net.l1.weight.dim(1))
    throw dim_error("mask_forward: frame has " + std::to_string(x.dim(0)) + " channels, network expects " +
                    std::to_string(net.l1.weight.dim(1)));
  Tensor h = relu(tape, net.bn1.forward(tape, net.l1.forward(tape, x), training, update_running));
  h = relu(tape, net.bn2.forward(tape, net.l2.forward(tape, h), training, update_running));
  return sigmoid(tape, net.l3.forward(tape, h));
}

// attended = X (*) M with the single-channel mask broadcast over channels.
inline Tensor apply_mask(Tape& tape, const Tensor& x, const Tensor& mask) {
  return mul_channel_broadcast(tape, x, mask);
}

// One 8-bit PGM per frame, pixel = round(255 * M).
inline std::string mask_pgm_path(const std::string& dir, const std::string& video_id, int frame_1based) {
  return dir + "/" + video_id + "_" + std::to_string(frame_1based) + "_mask.pgm";
}

inline void write_mask_pgm(const std::string& dir, const std::string& video_id, int frame_1based, const Tensor& mask) {
  if (mask.rank() != 3 || mask.dim(0) != 1) throw usage_error("write_mask_pgm: mask must be [1,H,W]");
  write_pgm(mask_pgm_path(dir, video_id, frame_1based), mask.dim(2), mask.dim(1), mask.values());
}

}  // namespace stav
