#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bevmt/autodiff.hpp"
#include "bevmt/common.hpp"

namespace bevmt {

// Named registry of trainable leaves. Registration order is the canonical
// order for optimizer state and checkpoint serialization, so modules must
// register parameters deterministically.
class ParamStore {
public:
    Var add(const std::string& name, Tensor init);
    const Var& get(const std::string& name) const;
    bool has(const std::string& name) const;

    const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
    int64_t total_params() const;
    int64_t params_with_prefix(const std::string& prefix) const;
    void zero_grads();

private:
    std::vector<std::pair<std::string, Var>> items_;
};

// Glorot-uniform fan-in/fan-out init for affine weights.
Tensor xavier_uniform(int64_t fan_in, int64_t fan_out, Rng& rng);

struct Affine {
    Var w, b;
    static Affine create(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out, Rng& rng);
    // Weights and bias both zero: the layer outputs zero regardless of input.
    static Affine create_zero(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out);
    Var forward(const Var& x) const { return affine(x, w, b); }
};

// affine -> SiLU -> affine
struct Mlp2 {
    Affine fc1, fc2;
    static Mlp2 create(ParamStore& ps, const std::string& prefix, int64_t in, int64_t hidden, int64_t out, Rng& rng);
    Var forward(const Var& x) const { return fc2.forward(silu(fc1.forward(x))); }
};

// AdamW with decoupled weight decay. Moment buffers are keyed by position in
// the ParamStore, so the store must not grow after the first step.
class AdamW {
public:
    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.01)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void step(ParamStore& ps, double lr);
    int64_t steps_taken() const { return t_; }

private:
    double beta1_, beta2_, eps_, weight_decay_;
    int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

// One-cycle triangular schedule: linear ramp 0 -> peak over the warmup
// fraction, then linear decay, hitting 0 one step past total_steps (every
// in-schedule step keeps a positive rate).
double one_cycle_lr(int64_t step, int64_t total_steps, double peak, double warmup_frac);

}  // namespace bevmt
