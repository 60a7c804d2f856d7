// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "dprobe/error.hpp"
#include "dprobe/rng.hpp"

namespace dprobe {

enum class ScheduleKind { linear, cosine };

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    throw ConfigError("unknown schedule kind '" + s + "' (expected linear|cosine)");
}

/// Forward-process tables for steps t = 1..T, precomputed once in double precision.
/// Accessors take the 1-based diffusion step; alpha_bar_prev(1) is the t = 0 boundary value 1.
class NoiseSchedule {
public:
    static constexpr double beta_clip = 0.999;
    static constexpr double linear_beta_start = 1e-4;
    static constexpr double linear_beta_end = 2e-2;

    static NoiseSchedule build(ScheduleKind kind, int T, double offset_s = 0.008) {
        if (T < 2) throw ConfigError("schedule needs T >= 2, got " + std::to_string(T));
        if (!(offset_s >= 0.0)) throw ConfigError("schedule offset s must be >= 0");
        NoiseSchedule s;
        s.kind_ = kind;
        s.T_ = T;
        s.offset_ = offset_s;
        s.beta_.resize(T);
        if (kind == ScheduleKind::linear) {
            for (int t = 1; t <= T; ++t)
                s.beta_[t - 1] = linear_beta_start +
                                 (linear_beta_end - linear_beta_start) * static_cast<double>(t - 1) / (T - 1);
        } else {
            const double f0 = cosine_f(0, T, offset_s);
            double prev = 1.0;
            for (int t = 1; t <= T; ++t) {
                const double ab = cosine_f(t, T, offset_s) / f0;
                s.beta_[t - 1] = std::min(1.0 - ab / prev, beta_clip);
                prev = ab;
            }
        }
        s.alpha_.resize(T);
        s.alpha_bar_.resize(T);
        s.snr_.resize(T);
        double prod = 1.0;
        for (int i = 0; i < T; ++i) {
            s.alpha_[i] = 1.0 - s.beta_[i];
            prod *= s.alpha_[i];
            s.alpha_bar_[i] = prod;
            s.snr_[i] = prod / (1.0 - prod);
        }
        return s;
    }

    /// cos^2(((t/T + s)/(1 + s)) * pi/2), the unnormalized cosine signal level.
    static double cosine_f(double t, int T, double s) {
        const double c = std::cos((t / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
        return c * c;
    }

    int T() const { return T_; }
    ScheduleKind kind() const { return kind_; }
    double offset() const { return offset_; }

    double beta(int t) const { return beta_[check(t)]; }
    double alpha(int t) const { return alpha_[check(t)]; }
    double alpha_bar(int t) const { return alpha_bar_[check(t)]; }
    double alpha_bar_prev(int t) const { return t == 1 ? 1.0 : alpha_bar_[check(t) - 1]; }
    double snr(int t) const { return snr_[check(t)]; }
    double log_snr(int t) const { return std::log(snr(t)); }

    /// Exact reverse-posterior variance beta_t (1 - abar_{t-1}) / (1 - abar_t); zero at t = 1.
    double posterior_variance(int t) const {
        return beta(t) * (1.0 - alpha_bar_prev(t)) / (1.0 - alpha_bar(t));
    }

    const std::vector<double>& betas() const { return beta_; }
    const std::vector<double>& alphas() const { return alpha_; }
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }
    const std::vector<double>& snrs() const { return snr_; }

private:
    std::size_t check(int t) const {
        if (t < 1 || t > T_)
            throw IndexError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T_) + "]");
        return static_cast<std::size_t>(t - 1);
    }

    ScheduleKind kind_ = ScheduleKind::cosine;
    int T_ = 0;
    double offset_ = 0.0;
    std::vector<double> beta_, alpha_, alpha_bar_, snr_;
};

enum class WeightingKind { mse, minsnr };

struct WeightingPolicy {
    WeightingKind kind = WeightingKind::minsnr;
    double gamma = 5.0;

    static WeightingPolicy mse() { return {WeightingKind::mse, 5.0}; }
    static WeightingPolicy minsnr(double gamma) {
        if (!(gamma > 0.0)) throw ConfigError("min-SNR gamma must be positive");
        return {WeightingKind::minsnr, gamma};
    }
};

inline std::string to_string(WeightingKind k) { return k == WeightingKind::mse ? "mse" : "minsnr"; }

inline WeightingKind weighting_kind_from_string(const std::string& s) {
    if (s == "mse") return WeightingKind::mse;
    if (s == "minsnr") return WeightingKind::minsnr;
    throw ConfigError("unknown weighting '" + s + "' (expected mse|minsnr)");
}

/// Per-step loss weight: 1 for plain MSE, min(SNR, gamma) / SNR for min-SNR.
inline double weight(const WeightingPolicy& policy, const NoiseSchedule& schedule, int t) {
    const double snr = schedule.snr(t);
    if (policy.kind == WeightingKind::mse) return 1.0;
    return std::min(snr, policy.gamma) / snr;
}

enum class SamplerKind {
    uniform,
    squared_cosine,  ///< pmf ~ sin^2(pi (t - 1/2) / T): mid-trajectory emphasis, symmetric, strictly positive
    schedule_cos2,   ///< pmf ~ cos^2 of the cosine-schedule argument: emphasizes small t
};

inline std::string to_string(SamplerKind k) {
    switch (k) {
        case SamplerKind::uniform: return "uniform";
        case SamplerKind::squared_cosine: return "squared_cosine";
        case SamplerKind::schedule_cos2: return "schedule_cos2";
    }
    return "?";
}

inline SamplerKind sampler_kind_from_string(const std::string& s) {
    if (s == "uniform") return SamplerKind::uniform;
    if (s == "squared_cosine") return SamplerKind::squared_cosine;
    if (s == "schedule_cos2") return SamplerKind::schedule_cos2;
    throw ConfigError("unknown timestep sampler '" + s + "' (expected uniform|squared_cosine|schedule_cos2)");
}

/// Discrete distribution p(t) over {1..T}, drawn by inverse CDF.
class TimestepSampler {
public:
    TimestepSampler(SamplerKind kind, int T, double offset_s = 0.008) : kind_(kind), pmf_(T), cdf_(T) {
        if (T < 1) throw ConfigError("timestep sampler needs T >= 1");
        for (int t = 1; t <= T; ++t) {
            double v = 1.0;
            if (kind == SamplerKind::squared_cosine) {
                const double s = std::sin(std::numbers::pi * (t - 0.5) / T);
                v = s * s;
            } else if (kind == SamplerKind::schedule_cos2) {
                v = NoiseSchedule::cosine_f(t - 0.5, T, offset_s);
            }
            pmf_[t - 1] = v;
        }
        double total = 0.0;
        for (double v : pmf_) total += v;
        double acc = 0.0;
        for (int i = 0; i < T; ++i) {
            pmf_[i] /= total;
            acc += pmf_[i];
            cdf_[i] = acc;
        }
        cdf_.back() = 1.0;
    }

    SamplerKind kind() const { return kind_; }
    int T() const { return static_cast<int>(pmf_.size()); }
    double pmf(int t) const {
        if (t < 1 || t > T()) throw IndexError("timestep " + std::to_string(t) + " outside sampler range");
        return pmf_[t - 1];
    }
    const std::vector<double>& pmf() const { return pmf_; }

    int sample(Rng& rng) const {
        const double u = rng.uniform();
        auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        if (it == cdf_.end()) --it;
        return static_cast<int>(it - cdf_.begin()) + 1;
    }

private:
    SamplerKind kind_;
    std::vector<double> pmf_;
    std::vector<double> cdf_;
};

inline int sample_timestep(const TimestepSampler& sampler, Rng& rng) { return sampler.sample(rng); }

/// Table dump: t,beta,alpha,alpha_bar,snr,w_mse,w_minsnr,pmf.
inline std::string schedule_csv(const NoiseSchedule& s, double gamma, const TimestepSampler& sampler) {
    std::string out = "t,beta,alpha,alpha_bar,snr,w_mse,w_minsnr,pmf\n";
    char line[512];
    const auto minsnr = WeightingPolicy::minsnr(gamma);
    for (int t = 1; t <= s.T(); ++t) {
        std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", t, s.beta(t), s.alpha(t),
                      s.alpha_bar(t), s.snr(t), 1.0, weight(minsnr, s, t), sampler.pmf(t));
        out += line;
    }
    return out;
}

}  // namespace dprobe
