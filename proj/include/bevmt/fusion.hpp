#pragma once

#include "bevmt/autodiff.hpp"
#include "bevmt/nn.hpp"

namespace bevmt {

// Modality-adaptive fusion: concat -> 3x3 conv -> per-modality sigmoid gates.
struct MafiParams {
    Affine fuse_conv;   // [9*2C -> C], taps ordered (dh, dw) row-major
    Affine gate_lidar;  // C -> C, per-position
    Affine gate_cam;    // C -> C
    bool use_gates = true;  // ablation switch; off reduces fusion to the conv

    static MafiParams create(ParamStore& ps, const std::string& prefix, int64_t c, Rng& rng, bool use_gates = true);
};

// Channel-concatenate the modalities and fuse with a same-padding 3x3
// convolution down to C channels.
Var init_fuse(const Var& f_lidar, const Var& f_cam, const MafiParams& p, int64_t h, int64_t w);

// Per-position gate map in (0,1): sigmoid(linear(feature)).
Var gate_weights(const Var& f_mod, const Affine& gate);

// F_bev = G_lidar (.) F_init + G_cam (.) F_init, evaluated in the factored
// form (G_lidar + G_cam) (.) F_init so the algebraic identity holds exactly.
Var mafi_fuse(const Var& f_lidar, const Var& f_cam, const MafiParams& p, int64_t h, int64_t w);

}  // namespace bevmt
