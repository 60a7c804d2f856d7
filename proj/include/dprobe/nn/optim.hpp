// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>

#include "dprobe/nn/params.hpp"

namespace dprobe::nn {

/// shadow <- decay * shadow + (1 - decay) * param. The first call copies the parameters.
template <class T>
void ema_update(ParamStore<T>& store, double decay) {
    const bool init = !store.has_ema();
    for (auto& e : store.entries()) {
        if (init) {
            e.ema = e.value;
            continue;
        }
        const T d = static_cast<T>(decay), od = static_cast<T>(1.0 - decay);
        for (std::size_t i = 0; i < e.value.size(); ++i) e.ema[i] = d * e.ema[i] + od * e.value[i];
    }
}

template <class T>
double global_grad_norm(const ParamStore<T>& store) {
    double s = 0.0;
    for (const auto& e : store.entries())
        for (T g : e.grad.values()) s += static_cast<double>(g) * g;
    return std::sqrt(s);
}

struct AdamWOptions {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    double grad_clip = 1.0;  ///< global L2 norm bound; <= 0 disables clipping
};

/// Global-norm gradient clipping followed by one AdamW update (decoupled weight decay,
/// bias-corrected moments). Returns the pre-clip gradient norm.
template <class T>
double adamw_step(ParamStore<T>& store, const AdamWOptions& opt) {
    const double norm = global_grad_norm(store);
    double scale = 1.0;
    if (opt.grad_clip > 0.0 && norm > opt.grad_clip) scale = opt.grad_clip / (norm + 1e-12);
    const long long step = ++store.adam_step;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
    for (auto& e : store.entries()) {
        if (e.m.size() != e.value.size()) {
            e.m = Tensor<T>(e.value.shape());
            e.v = Tensor<T>(e.value.shape());
        }
        for (std::size_t i = 0; i < e.value.size(); ++i) {
            const double g = static_cast<double>(e.grad[i]) * scale;
            const double m = opt.beta1 * e.m[i] + (1.0 - opt.beta1) * g;
            const double v = opt.beta2 * e.v[i] + (1.0 - opt.beta2) * g * g;
            e.m[i] = static_cast<T>(m);
            e.v[i] = static_cast<T>(v);
            double p = e.value[i];
            p -= opt.lr * opt.weight_decay * p;
            p -= opt.lr * (m / bc1) / (std::sqrt(v / bc2) + opt.eps);
            e.value[i] = static_cast<T>(p);
        }
    }
    return norm;
}

/// Linear warmup from 0 to base_lr over warmup_frac * total_steps, then half-cosine decay to 0.
inline double cosine_lr(long long step, long long total_steps, double base_lr, double warmup_frac) {
    if (total_steps <= 0) return base_lr;
    const double warm = warmup_frac * static_cast<double>(total_steps);
    const double s = static_cast<double>(step);
    if (warm > 0.0 && s < warm) return base_lr * s / warm;
    const double span = static_cast<double>(total_steps) - warm;
    if (span <= 0.0) return base_lr;
    const double progress = std::min(1.0, (s - warm) / span);
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace dprobe::nn
