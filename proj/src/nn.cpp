#include "bevmt/nn.hpp"

#include <cmath>

namespace bevmt {

Var ParamStore::add(const std::string& name, Tensor init) {
    if (has(name)) throw ContractViolation("duplicate parameter name: " + name);
    items_.emplace_back(name, make_param(std::move(init)));
    return items_.back().second;
}

const Var& ParamStore::get(const std::string& name) const {
    for (const auto& [n, v] : items_)
        if (n == name) return v;
    throw ContractViolation("unknown parameter name: " + name);
}

bool ParamStore::has(const std::string& name) const {
    for (const auto& [n, v] : items_)
        if (n == name) return true;
    return false;
}

int64_t ParamStore::total_params() const {
    int64_t n = 0;
    for (const auto& [name, v] : items_) n += v.val().numel();
    return n;
}

int64_t ParamStore::params_with_prefix(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& [name, v] : items_)
        if (name.rfind(prefix, 0) == 0) n += v.val().numel();
    return n;
}

void ParamStore::zero_grads() {
    for (auto& [name, v] : items_) {
        v.node()->grad = Tensor();
        v.node()->grad_set = false;
    }
}

Tensor xavier_uniform(int64_t fan_in, int64_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t(fan_in, fan_out);
    for (auto& x : t.d) x = rng.uniform(-limit, limit);
    return t;
}

Affine Affine::create(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out, Rng& rng) {
    Affine a;
    a.w = ps.add(prefix + ".w", xavier_uniform(in, out, rng));
    a.b = ps.add(prefix + ".b", Tensor::zeros(1, out));
    return a;
}

Affine Affine::create_zero(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out) {
    Affine a;
    a.w = ps.add(prefix + ".w", Tensor::zeros(in, out));
    a.b = ps.add(prefix + ".b", Tensor::zeros(1, out));
    return a;
}

Mlp2 Mlp2::create(ParamStore& ps, const std::string& prefix, int64_t in, int64_t hidden, int64_t out, Rng& rng) {
    Mlp2 m;
    m.fc1 = Affine::create(ps, prefix + ".fc1", in, hidden, rng);
    m.fc2 = Affine::create(ps, prefix + ".fc2", hidden, out, rng);
    return m;
}

void AdamW::step(ParamStore& ps, double lr) {
    const auto& items = ps.items();
    if (m_.empty()) {
        for (const auto& [name, v] : items) {
            m_.push_back(Tensor::zeros(v.rows(), v.cols()));
            v_.push_back(Tensor::zeros(v.rows(), v.cols()));
        }
    }
    if (m_.size() != items.size())
        throw ContractViolation("AdamW: parameter store changed size after first step");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < items.size(); ++i) {
        Var v = items[i].second;
        Tensor& w = v.value_mut();
        const Tensor* g = v.has_grad() ? &v.node()->grad : nullptr;
        for (int64_t j = 0; j < w.numel(); ++j) {
            const double gj = g ? g->d[static_cast<size_t>(j)] : 0.0;
            double& mj = m_[i].d[static_cast<size_t>(j)];
            double& vj = v_[i].d[static_cast<size_t>(j)];
            mj = beta1_ * mj + (1.0 - beta1_) * gj;
            vj = beta2_ * vj + (1.0 - beta2_) * gj * gj;
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            double& wj = w.d[static_cast<size_t>(j)];
            wj -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * wj);
        }
    }
}

double one_cycle_lr(int64_t step, int64_t total_steps, double peak, double warmup_frac) {
    if (total_steps <= 0) throw ConfigError("lr schedule needs total_steps > 0");
    const double warm = std::max<double>(1.0, warmup_frac * static_cast<double>(total_steps));
    const double s = static_cast<double>(step) + 1.0;
    if (s <= warm) return peak * s / warm;
    // reaches zero one step past the schedule, so every training step keeps
    // a strictly positive rate
    const double rest = std::max(1.0, static_cast<double>(total_steps) - warm) + 1.0;
    return peak * std::max(0.0, 1.0 - (s - warm) / rest);
}

}  // namespace bevmt
