#include "bevmt/fusion.hpp"

namespace bevmt {

MafiParams MafiParams::create(ParamStore& ps, const std::string& prefix, int64_t c, Rng& rng, bool use_gates) {
    MafiParams p;
    p.fuse_conv = Affine::create(ps, prefix + ".fuse_conv", 9 * 2 * c, c, rng);
    p.gate_lidar = Affine::create(ps, prefix + ".gate_lidar", c, c, rng);
    p.gate_cam = Affine::create(ps, prefix + ".gate_cam", c, c, rng);
    p.use_gates = use_gates;
    return p;
}

Var init_fuse(const Var& f_lidar, const Var& f_cam, const MafiParams& p, int64_t h, int64_t w) {
    require_same_shape(f_lidar.val(), f_cam.val(), "init_fuse modalities");
    if (f_lidar.rows() != h * w) throw ContractViolation("init_fuse: rows must equal h*w");
    return p.fuse_conv.forward(im2col3x3(concat_cols(f_lidar, f_cam), h, w));
}

Var gate_weights(const Var& f_mod, const Affine& gate) { return sigmoid(gate.forward(f_mod)); }

Var mafi_fuse(const Var& f_lidar, const Var& f_cam, const MafiParams& p, int64_t h, int64_t w) {
    if (!f_lidar.val().all_finite())
        throw NumericError("mafi_fuse: non-finite lidar feature at flat index " +
                           std::to_string(f_lidar.val().first_nonfinite()));
    if (!f_cam.val().all_finite())
        throw NumericError("mafi_fuse: non-finite camera feature at flat index " +
                           std::to_string(f_cam.val().first_nonfinite()));
    Var f_init = init_fuse(f_lidar, f_cam, p, h, w);
    if (!p.use_gates) return f_init;
    Var g = add(gate_weights(f_lidar, p.gate_lidar), gate_weights(f_cam, p.gate_cam));
    return mul(g, f_init);
}

}  // namespace bevmt
