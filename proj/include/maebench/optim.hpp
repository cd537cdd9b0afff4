#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "maebench/tensor.hpp"

namespace maebench {

// Decoupled-weight-decay adaptive-moment optimizer state. Moment buffers
// are allocated on the first step and stay shape-locked to the parameter
// list from then on.
template <class S>
struct optim_state {
    S lr = S(1e-3);
    S beta1 = S(0.9);
    S beta2 = S(0.95);
    S eps = S(1e-8);
    S weight_decay = S(0);
    std::size_t step = 0;

    std::vector<std::vector<S>> m;
    std::vector<std::vector<S>> v;
};

// One update over the parameter list, reading each parameter's
// accumulated gradient (missing grads count as zero). Decay is decoupled:
// p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
template <class S>
void optimizer_step(std::vector<tensor<S>>& params, optim_state<S>& st) {
    if (st.lr < S(0)) throw config_error("optimizer_step: negative learning rate");
    if (st.m.empty()) {
        st.m.resize(params.size());
        st.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            st.m[i].assign(params[i].numel(), S(0));
            st.v[i].assign(params[i].numel(), S(0));
        }
    }
    if (st.m.size() != params.size())
        throw dim_error("optimizer_step: state tracks " + std::to_string(st.m.size()) +
                        " parameters, got " + std::to_string(params.size()));

    st.step += 1;
    const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(st.beta1), static_cast<double>(st.step)));
    const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(st.beta2), static_cast<double>(st.step)));

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto node = params[i].node();
        const std::size_t n = node->numel();
        if (st.m[i].size() != n)
            throw dim_error("optimizer_step: parameter " + std::to_string(i) + " changed shape");
        S* p = node->value.data();
        const S* g = node->grad.empty() ? nullptr : node->grad.data();
        S* m = st.m[i].data();
        S* v = st.v[i].data();
        for (std::size_t j = 0; j < n; ++j) {
            const S gj = g ? g[j] : S(0);
            m[j] = st.beta1 * m[j] + (S(1) - st.beta1) * gj;
            v[j] = st.beta2 * v[j] + (S(1) - st.beta2) * gj * gj;
            const S mhat = m[j] / bc1;
            const S vhat = v[j] / bc2;
            p[j] -= st.lr * (mhat / (std::sqrt(vhat) + st.eps) + st.weight_decay * p[j]);
        }
    }
}

template <class S>
void zero_grads(std::vector<tensor<S>>& params) {
    for (tensor<S>& p : params) p.zero_grad();
}

// Linear ramp 0 -> peak over [0, warmup_steps], then half-cosine decay
// peak -> min_lr over (warmup_steps, total_steps]. Continuous at the
// junction; clamps to min_lr past the end.
inline double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
                          double peak_lr, double min_lr) {
    if (warmup_steps > total_steps) throw config_error("lr_schedule: warmup exceeds total steps");
    if (step < warmup_steps)
        return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (step == warmup_steps) return peak_lr;
    if (step >= total_steps) return min_lr;
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace maebench
