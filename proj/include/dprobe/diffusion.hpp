// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dprobe/error.hpp"
#include "dprobe/rng.hpp"
#include "dprobe/schedule.hpp"
#include "dprobe/tensor.hpp"

namespace dprobe {

/// Noise predictor signature shared by the U-Net and analytic oracles: (x_t, t per item) -> eps_hat.
template <class T>
using NoisePredictor = std::function<Tensor<T>(const Tensor<T>&, std::span<const int>)>;

/// [0, 1] image intensities -> symmetric model domain [-1, 1].
template <class T>
Tensor<T> to_model_domain(const Tensor<T>& images) {
    Tensor<T> out(images.shape());
    for (std::size_t i = 0; i < images.size(); ++i) out[i] = images[i] * T{2} - T{1};
    return out;
}

template <class T>
Tensor<T> to_image_domain(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp((x[i] + T{1}) / T{2}, T{0}, T{1});
    return out;
}

template <class T>
Tensor<T> standard_normal(const Shape& shape, Rng& rng) {
    Tensor<T> t(shape);
    for (auto& v : t.values()) v = static_cast<T>(rng.normal());
    return t;
}

template <class T>
struct NoisedBatch {
    Tensor<T> x0;  ///< model domain
    std::vector<int> t;
    Tensor<T> eps;
    Tensor<T> xt;
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per item.
template <class T>
NoisedBatch<T> corrupt(const NoiseSchedule& schedule, const Tensor<T>& x0, std::vector<int> ts, Tensor<T> eps) {
    if (eps.shape() != x0.shape())
        throw ShapeError("corrupt: noise " + shape_string(eps.shape()) + " vs images " + shape_string(x0.shape()));
    const std::size_t N = x0.rank() ? x0.dim(0) : 0;
    if (ts.size() != N) throw ShapeError("corrupt: one timestep per item required");
    const std::size_t per = N ? x0.size() / N : 0;
    Tensor<T> xt(x0.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const T a = static_cast<T>(std::sqrt(schedule.alpha_bar(ts[n])));
        const T b = static_cast<T>(std::sqrt(1.0 - schedule.alpha_bar(ts[n])));
        for (std::size_t i = n * per; i < (n + 1) * per; ++i) xt[i] = a * x0[i] + b * eps[i];
    }
    return {x0, std::move(ts), std::move(eps), std::move(xt)};
}

template <class T>
NoisedBatch<T> corrupt(const NoiseSchedule& schedule, const Tensor<T>& x0, std::vector<int> ts, Rng& rng) {
    return corrupt(schedule, x0, std::move(ts), standard_normal<T>(x0.shape(), rng));
}

/// x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t), optionally clamped to [-1, 1].
template <class T>
Tensor<T> x0_estimate(const NoiseSchedule& schedule, const Tensor<T>& xt, std::span<const int> ts,
                      const Tensor<T>& eps_hat, bool clamp = false) {
    if (eps_hat.shape() != xt.shape()) throw ShapeError("x0_estimate: eps_hat shape mismatch");
    const std::size_t N = xt.rank() ? xt.dim(0) : 0;
    if (ts.size() != N) throw ShapeError("x0_estimate: one timestep per item required");
    const std::size_t per = N ? xt.size() / N : 0;
    Tensor<T> out(xt.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const double ab = schedule.alpha_bar(ts[n]);
        const T s1 = static_cast<T>(std::sqrt(1.0 - ab)), inv = static_cast<T>(1.0 / std::sqrt(ab));
        for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
            T v = (xt[i] - s1 * eps_hat[i]) * inv;
            out[i] = clamp ? std::clamp(v, T{-1}, T{1}) : v;
        }
    }
    return out;
}

/// Coefficients of the reverse posterior mean mu = c_xt * x_t + c_x0 * x0 at step t >= 2.
struct PosteriorCoefficients {
    double c_xt = 0.0;
    double c_x0 = 0.0;
    double variance = 0.0;
};

inline PosteriorCoefficients posterior_coefficients(const NoiseSchedule& s, int t) {
    if (t < 2) throw ContractError("posterior is defined for t >= 2; use the sampler's terminal rule at t = 1");
    const double ab = s.alpha_bar(t), abp = s.alpha_bar_prev(t), beta = s.beta(t);
    return {std::sqrt(s.alpha(t)) * (1.0 - abp) / (1.0 - ab), std::sqrt(abp) * beta / (1.0 - ab),
            beta * (1.0 - abp) / (1.0 - ab)};
}

template <class T>
struct Posterior {
    Tensor<T> mean;
    double variance = 0.0;
};

/// q(x_{t-1} | x_t, x0) for a batch sharing one step t.
template <class T>
Posterior<T> posterior(const NoiseSchedule& s, const Tensor<T>& xt, const Tensor<T>& x0, int t) {
    if (x0.shape() != xt.shape()) throw ShapeError("posterior: x0 / x_t shape mismatch");
    const auto c = posterior_coefficients(s, t);
    Tensor<T> mean(xt.shape());
    for (std::size_t i = 0; i < xt.size(); ++i)
        mean[i] = static_cast<T>(c.c_xt * static_cast<double>(xt[i]) + c.c_x0 * static_cast<double>(x0[i]));
    return {std::move(mean), c.variance};
}

template <class T>
struct SamplerStep {
    Tensor<T> mean;
    double sigma = 0.0;  ///< standard deviation of the added noise
};

/// One ancestral step x_t -> x_{t-1}: mean mu(x_t, x0_hat) and sigma = sqrt(posterior variance).
/// At t = 1 the mean is x0_hat and no noise is added.
template <class T>
SamplerStep<T> ddpm_step(const NoiseSchedule& s, const Tensor<T>& xt, const Tensor<T>& eps_hat, int t, bool clamp) {
    const std::vector<int> ts(xt.dim(0), t);
    Tensor<T> x0 = x0_estimate(s, xt, ts, eps_hat, clamp);
    if (t == 1) return {std::move(x0), 0.0};
    auto post = posterior(s, xt, x0, t);
    return {std::move(post.mean), std::sqrt(post.variance)};
}

/// One generalized (DDIM) step from t to t_prev < t (t_prev = 0 means the clean endpoint).
template <class T>
SamplerStep<T> ddim_step(const NoiseSchedule& s, const Tensor<T>& xt, const Tensor<T>& eps_hat, int t, int t_prev,
                         double eta, bool clamp) {
    if (t_prev < 0 || t_prev >= t) throw ContractError("ddim_step requires 0 <= t_prev < t");
    const std::vector<int> ts(xt.dim(0), t);
    const Tensor<T> x0 = x0_estimate(s, xt, ts, eps_hat, clamp);
    const double ab = s.alpha_bar(t), abp = t_prev == 0 ? 1.0 : s.alpha_bar(t_prev);
    const double sigma = eta * std::sqrt((1.0 - abp) / (1.0 - ab)) * std::sqrt(std::max(0.0, 1.0 - ab / abp));
    const double dir = std::sqrt(std::max(0.0, 1.0 - abp - sigma * sigma));
    const double sab = std::sqrt(abp);
    Tensor<T> mean(xt.shape());
    for (std::size_t i = 0; i < xt.size(); ++i)
        mean[i] = static_cast<T>(sab * static_cast<double>(x0[i]) + dir * static_cast<double>(eps_hat[i]));
    return {std::move(mean), sigma};
}

namespace detail {

template <class T>
void add_noise(Tensor<T>& x, double sigma, Rng& rng) {
    if (sigma <= 0.0) return;
    for (auto& v : x.values()) v += static_cast<T>(sigma * rng.normal());
}

template <class T>
void check_sample(const Tensor<T>& x, const std::string& sampler, int t) {
    if (!x.all_finite())
        throw NumericError(sampler + " sampler produced a non-finite sample at step " + std::to_string(t));
}

}  // namespace detail

/// Ancestral sampling from x_T ~ N(0, I) over all T steps. Returns images in [0, 1].
template <class T>
Tensor<T> ddpm_sample(const NoisePredictor<T>& model, const NoiseSchedule& s, std::size_t n, const Shape& item_shape,
                      Rng& rng) {
    Shape shape{n};
    shape.insert(shape.end(), item_shape.begin(), item_shape.end());
    if (n == 0) return Tensor<T>(shape);
    Tensor<T> x = standard_normal<T>(shape, rng);
    for (int t = s.T(); t >= 1; --t) {
        const std::vector<int> ts(n, t);
        const Tensor<T> eps = model(x, ts);
        auto step = ddpm_step(s, x, eps, t, /*clamp=*/true);
        x = std::move(step.mean);
        if (t > 1) detail::add_noise(x, step.sigma, rng);
        detail::check_sample(x, "ddpm", t);
    }
    return to_image_domain(x);
}

/// Evenly strided sub-schedule ending at t_start: floor((i + 1) t_start / steps), i = 0..steps-1.
inline std::vector<int> strided_timesteps(int t_start, int steps) {
    if (steps < 1 || steps > t_start)
        throw ConfigError("DDIM needs 1 <= steps <= " + std::to_string(t_start) + ", got " + std::to_string(steps));
    std::vector<int> out(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i)
        out[static_cast<std::size_t>(i)] =
            static_cast<int>((static_cast<long long>(i) + 1) * t_start / steps);
    return out;
}

/// DDIM trajectory from a given x_t at step t_start down to the clean endpoint (model domain).
template <class T>
Tensor<T> ddim_from(const NoisePredictor<T>& model, const NoiseSchedule& s, Tensor<T> x, int t_start, int steps,
                    double eta, Rng& rng, bool clamp = true) {
    if (eta < 0.0) throw ConfigError("DDIM eta must be >= 0");
    if (x.rank() == 0 || x.dim(0) == 0) return x;
    const auto taus = strided_timesteps(t_start, steps);
    for (std::size_t i = taus.size(); i-- > 0;) {
        const int t = taus[i], t_prev = i == 0 ? 0 : taus[i - 1];
        const std::vector<int> ts(x.dim(0), t);
        const Tensor<T> eps = model(x, ts);
        auto step = ddim_step(s, x, eps, t, t_prev, eta, clamp);
        x = std::move(step.mean);
        detail::add_noise(x, step.sigma, rng);
        detail::check_sample(x, "ddim", t);
    }
    return x;
}

/// DDIM sampling from x_T ~ N(0, I). Returns images in [0, 1].
template <class T>
Tensor<T> ddim_sample(const NoisePredictor<T>& model, const NoiseSchedule& s, std::size_t n, const Shape& item_shape,
                      int steps, double eta, Rng& rng) {
    if (steps > s.T()) throw ConfigError("DDIM steps " + std::to_string(steps) + " exceed T = " + std::to_string(s.T()));
    Shape shape{n};
    shape.insert(shape.end(), item_shape.begin(), item_shape.end());
    if (n == 0) return Tensor<T>(shape);
    Tensor<T> x = standard_normal<T>(shape, rng);
    return to_image_domain(ddim_from(model, s, std::move(x), s.T(), steps, eta, rng));
}

/// Weighted noise-prediction loss: mean over items of w(t_n) * mean over pixels (eps - eps_hat)^2,
/// with its gradient w.r.t. eps_hat.
template <class T>
struct NoiseLoss {
    double loss = 0.0;
    std::vector<double> per_item_mse;
    Tensor<T> grad;
};

template <class T>
NoiseLoss<T> weighted_noise_loss(const Tensor<T>& eps, const Tensor<T>& eps_hat, std::span<const double> weights) {
    if (eps.shape() != eps_hat.shape()) throw ShapeError("noise loss: prediction shape mismatch");
    const std::size_t N = eps.dim(0);
    if (weights.size() != N) throw ShapeError("noise loss: one weight per item required");
    NoiseLoss<T> out;
    out.grad = Tensor<T>(eps.shape());
    out.per_item_mse.resize(N);
    if (N == 0) return out;
    const std::size_t P = eps.size() / N;
    for (std::size_t n = 0; n < N; ++n) {
        double acc = 0.0;
        const double gscale = -2.0 * weights[n] / (static_cast<double>(N) * static_cast<double>(P));
        for (std::size_t i = n * P; i < (n + 1) * P; ++i) {
            const double d = static_cast<double>(eps[i]) - static_cast<double>(eps_hat[i]);
            acc += d * d;
            out.grad[i] = static_cast<T>(gscale * d);
        }
        out.per_item_mse[n] = acc / static_cast<double>(P);
        out.loss += weights[n] * out.per_item_mse[n];
    }
    out.loss /= static_cast<double>(N);
    return out;
}

}  // namespace dprobe
