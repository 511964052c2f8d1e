#pragma once

#include <array>
#include <string>
#include <vector>

#include "bevmt/nn.hpp"
#include "bevmt/query_init.hpp"

namespace bevmt {

constexpr int kNumTasks = 3;  // detection, segmentation, occupancy (in that order)

// Single-scale multi-head deformable attention: a linear head predicts
// per-query sampling offsets and attention logits; values are bilinear
// samples of the projected grid.
struct DeformAttnParams {
    int64_t heads = 4, points = 4;
    Affine offset_lin;  // C -> heads*points*2, ordered (head, point, {dy,dx})
    Affine attn_lin;    // C -> heads*points, softmaxed per head over points
    Affine value_proj;  // C -> C
    Affine out_proj;    // C -> C

    static DeformAttnParams create(ParamStore& ps, const std::string& prefix, int64_t c, int64_t heads,
                                   int64_t points, Rng& rng);
};

// Task-oriented channel scaling: per task, embed the shared feature, derive
// a per-position scaling map, and gate the shared feature with it. The
// scaling branch starts at exactly one, so every task initially sees the
// shared feature unchanged.
struct TCSParams {
    std::array<Affine, kNumTasks> embed;  // C -> C
    std::array<Affine, kNumTasks> w_lin;  // C -> C; init weights 0, bias 1

    static TCSParams create(ParamStore& ps, const std::string& prefix, int64_t c, Rng& rng);
};

// Four-directional selective-scan state-space mixer. Each direction owns its
// input projection (state inputs B, C and a per-token step size), state
// matrix, and skip weights; directional outputs are summed left, right, top,
// bottom, merged by a linear layer, and added back residually.
struct SSMParams {
    int64_t n_state = 8;
    struct Direction {
        Affine in_proj;  // C -> 2N+1: columns [B | C | raw step]
        Var a_log;       // [C, N]; state matrix A = -exp(a_log)
        Var dt_bias;     // [1, C]; step = softplus(raw + dt_bias)
        Var d_skip;      // [1, C]
    };
    std::array<Direction, 4> dir;  // left, right, top, bottom
    Affine merge;                  // C -> C

    static Direction make_direction(ParamStore& ps, const std::string& prefix, int64_t c, int64_t n_state, Rng& rng);
    static SSMParams create(ParamStore& ps, const std::string& prefix, int64_t c, int64_t n_state, Rng& rng);
};

// Deformable cross-attention from queries into a task grid plus a
// feed-forward sublayer, both residual.
struct CrossAttnParams {
    DeformAttnParams attn;
    Mlp2 ffn;  // C -> 2C -> C

    static CrossAttnParams create(ParamStore& ps, const std::string& prefix, int64_t c, int64_t heads,
                                  int64_t points, Rng& rng);
};

struct TransformerLayerParams {
    DeformAttnParams self_attn;
    Mlp2 ffn;  // C -> 2C -> C, residual
    TCSParams tcs;
    std::array<CrossAttnParams, kNumTasks> cross;
};

struct MambaLayerParams {
    SSMParams ssm;
    TCSParams tcs;
};

struct DecoderParams {
    std::string variant;  // "transformer" | "mamba"
    int64_t layers = 0;
    std::vector<TransformerLayerParams> transformer;
    std::vector<MambaLayerParams> mamba;

    static DecoderParams create(ParamStore& ps, const std::string& prefix, const std::string& variant,
                                int64_t layers, int64_t c, int64_t heads, int64_t points, int64_t n_state, Rng& rng);
};

struct DecoderOut {
    TaskQueries det, seg, occ;
    Var f_bev;                          // grid after the last layer
    std::array<Var, kNumTasks> f_task;  // last layer's per-task grids (f_bev itself when L = 0)
};

// Every cell attends to heads*points bilinear samples at its own position
// plus predicted offsets; residual added. Offsets must be finite.
Var deformable_self_attention(const Var& f_bev, const DeformAttnParams& p, int64_t h, int64_t w);

// The shared scan mixer; see SSMParams.
Var vss2d_scan(const Var& f_bev, const SSMParams& p, int64_t h, int64_t w);

// Per task i: W^i = w_lin_i(silu(embed_i(f_bev))), output F^i = W^i (.) f_bev.
std::array<Var, kNumTasks> tcs(const Var& f_bev, const TCSParams& p);

// Deformable cross-attention at the queries' grid positions, then the FFN
// sublayer. Positions are unchanged; out-of-grid positions are rejected.
TaskQueries cross_attend_queries(const TaskQueries& q, const Var& f_task, const CrossAttnParams& p, int64_t h,
                                 int64_t w);

// q <- q + f_task[(h, w)] per query (occupancy queries index by their BEV
// column). Positions unchanged.
TaskQueries index_update_queries(const TaskQueries& q, const Var& f_task, int64_t h, int64_t w);

// Stack of L layers. Transformer layer: deformable self-attention, FFN, TCS,
// per-task cross-attention. Mamba layer: VSS2D scan, TCS on the scan output,
// per-task index updates. Empty query sets pass through untouched. With
// use_tcs off (ablation) every task reads the shared grid directly.
DecoderOut decoder_forward(const TaskQueries& det_q, const TaskQueries& seg_q, const TaskQueries& occ_q,
                           const Var& f_bev, const DecoderParams& p, int64_t h, int64_t w, bool use_tcs = true);

// Directional visitation orders for the four scans (exposed for tests).
// Returns (order, starts) pairs; starts delimit independent subsequences.
std::pair<std::vector<int>, std::vector<int>> scan_order_rows(int64_t h, int64_t w, bool reversed);
std::pair<std::vector<int>, std::vector<int>> scan_order_cols(int64_t h, int64_t w, bool reversed);

}  // namespace bevmt
