// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>

#include "dprobe/nn/params.hpp"
#include "dprobe/rng.hpp"
#include "dprobe/tensor.hpp"

// Analytic gradients are computed in f64. The finite-difference oracle runs the same layer
// instantiated in long double with identical parameter values, so cancellation noise in the
// central difference stays well below the tolerances under test.
namespace gradcheck {

using dprobe::Tensor;
using Hi = long double;

inline Tensor<double> random_tensor(const dprobe::Shape& shape, dprobe::Rng& rng, double scale = 1.0) {
    Tensor<double> t(shape);
    for (auto& v : t.values()) v = rng.normal() * scale;
    return t;
}

template <class T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
    T s{0};
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

struct Result {
    double max_rel = 0.0;
    std::string where;
};

// |a - n| / max(|a|, |n|, floor): relative error, with a floor so entries that are
// numerically zero are compared absolutely.
inline void compare(std::span<Hi> values, std::span<const double> analytic, const std::function<Hi()>& loss,
                    const std::string& label, Result& r, Hi h = 1e-5L, double floor = 1e-4) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        const Hi keep = values[i];
        values[i] = keep + h;
        const Hi up = loss();
        values[i] = keep - h;
        const Hi down = loss();
        values[i] = keep;
        const double numeric = static_cast<double>((up - down) / (2 * h));
        const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
        const double rel = std::abs(numeric - analytic[i]) / denom;
        if (rel > r.max_rel) {
            r.max_rel = rel;
            r.where = label + "[" + std::to_string(i) + "]";
        }
    }
}

/// Compares every gradient in `lo` against differences of `loss` taken through `hi`.
inline void compare_params(dprobe::nn::ParamStore<Hi>& hi, const dprobe::nn::ParamStore<double>& lo,
                           const std::function<Hi()>& loss, Result& r) {
    for (std::size_t k = 0; k < lo.entries().size(); ++k) {
        auto& e = hi.entries()[k];
        compare(e.value.values(), lo.entries()[k].grad.values(), loss, e.name, r);
    }
}

/// Like compare_params but probes `per_tensor` random entries of each tensor.
inline void compare_params_sampled(dprobe::nn::ParamStore<Hi>& hi, const dprobe::nn::ParamStore<double>& lo,
                                   const std::function<Hi()>& loss, Result& r, std::size_t per_tensor,
                                   dprobe::Rng& rng) {
    for (std::size_t k = 0; k < lo.entries().size(); ++k) {
        auto& e = hi.entries()[k];
        const auto& g = lo.entries()[k].grad;
        for (std::size_t j = 0; j < std::min(per_tensor, g.size()); ++j) {
            const std::size_t i = rng.index(g.size());
            compare(e.value.values().subspan(i, 1), g.values().subspan(i, 1), loss,
                    e.name + "@" + std::to_string(i), r);
        }
    }
}

/// Copies parameter values by position; both stores must come from identical constructions.
inline void copy_values(const dprobe::nn::ParamStore<double>& src, dprobe::nn::ParamStore<Hi>& dst) {
    for (std::size_t k = 0; k < src.entries().size(); ++k) dst.entries()[k].value = src.entries()[k].value.cast<Hi>();
}

/// Gives every parameter a random value so zero-initialized biases are exercised too.
inline void randomize(dprobe::nn::ParamStore<double>& ps, dprobe::Rng& rng, double scale = 0.5) {
    for (auto& e : ps.entries())
        for (auto& v : e.value.values()) v = rng.normal() * scale;
}

}  // namespace gradcheck
