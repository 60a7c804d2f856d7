// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <type_traits>
#include <vector>

#include "dprobe/error.hpp"
#include "dprobe/rng.hpp"
#include "dprobe/tensor.hpp"
#include "dprobe/nn/params.hpp"

namespace dprobe::nn {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// When set, every layer forward checks its output for NaN/Inf.
inline std::atomic<bool>& finite_checks() {
    static std::atomic<bool> flag{false};
    return flag;
}

namespace detail {

inline std::uint64_t next_layer_uid() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
}

template <class T>
void check_output(const std::string& layer, const Tensor<T>& y) {
    if (finite_checks().load(std::memory_order_relaxed) && !y.all_finite())
        throw NumericError("layer '" + layer + "' produced a non-finite output " + shape_string(y.shape()));
}

inline void check_context(const std::string& layer, std::uint64_t uid, std::uint64_t ctx_uid) {
    if (ctx_uid == 0) throw ContractError("layer '" + layer + "': backward called with an empty context");
    if (uid != ctx_uid) throw ContractError("layer '" + layer + "': backward called with a context from another layer");
}

template <class T>
Tensor<T> normal_init(const Shape& shape, double stddev, Rng& rng) {
    Tensor<T> t(shape);
    for (auto& v : t.values()) v = static_cast<T>(rng.normal() * stddev);
    return t;
}

}  // namespace detail

struct ContextBase {
    std::uint64_t layer_uid = 0;
};

/// Base for parameterized and stateless layers: a name for diagnostics and a unique id
/// that ties saved contexts to the layer that produced them.
class Layer {
public:
    explicit Layer(std::string name) : name_(std::move(name)), uid_(detail::next_layer_uid()) {}
    const std::string& name() const { return name_; }
    std::uint64_t uid() const { return uid_; }

protected:
    [[noreturn]] void shape_fail(const std::string& expected, const Shape& got) const {
        throw ShapeError("layer '" + name_ + "': expected input " + expected + ", got " + shape_string(got));
    }

    std::string name_;
    std::uint64_t uid_;
};

// ---------------------------------------------------------------------------
// Convolution (3x3 / 1x1, stride 1 or 2, zero padding k/2) via im2col + GEMM.

template <class T>
struct Conv2dContext : ContextBase {
    Tensor<T> input;
};

template <class T>
class Conv2d : public Layer {
public:
    Conv2d() : Layer("") {}
    Conv2d(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
           std::size_t stride, Rng& rng, bool zero_init = false)
        : Layer(name), in_(in), out_(out), k_(kernel), stride_(stride) {
        if (kernel != 1 && kernel != 3) throw ConfigError("conv '" + name + "': kernel must be 1 or 3");
        if (stride != 1 && stride != 2) throw ConfigError("conv '" + name + "': stride must be 1 or 2");
        const double fan_in = static_cast<double>(in * kernel * kernel);
        Tensor<T> w = zero_init ? Tensor<T>({out, in, kernel, kernel})
                                : detail::normal_init<T>({out, in, kernel, kernel}, std::sqrt(1.0 / fan_in), rng);
        w_ = ps.add(name + ".weight", std::move(w));
        b_ = ps.add(name + ".bias", Tensor<T>({out}));
    }

    std::size_t in_channels() const { return in_; }
    std::size_t out_channels() const { return out_; }
    ParamRef weight() const { return w_; }
    ParamRef bias() const { return b_; }

    std::size_t out_size(std::size_t n) const { return (n + 2 * pad() - k_) / stride_ + 1; }

    Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, Conv2dContext<T>* ctx = nullptr) const {
        if (x.rank() != 4 || x.dim(1) != in_) shape_fail("[N," + std::to_string(in_) + ",H,W]", x.shape());
        const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
        const std::size_t Ho = out_size(H), Wo = out_size(W), L = Ho * Wo, K = in_ * k_ * k_;
        Tensor<T> y({N, out_, Ho, Wo});
        const ConstMatMap<T> w(ps.value(w_).data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(K));
        const T* b = ps.value(b_).data();
        // One product per item so an item's output does not depend on its position in the batch.
        RowMat<T> col(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(L));
        for (std::size_t n = 0; n < N; ++n) {
            im2col(x.data() + n * in_ * H * W, H, W, Ho, Wo, col, 0);
            MatMap<T> yn(y.data() + n * out_ * L, static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(L));
            yn.noalias() = w * col;
            for (std::size_t o = 0; o < out_; ++o) yn.row(static_cast<Eigen::Index>(o)).array() += b[o];
        }
        if (ctx) {
            ctx->layer_uid = uid_;
            ctx->input = x;
        }
        detail::check_output(name_, y);
        return y;
    }

    Tensor<T> backward(const Conv2dContext<T>& ctx, const Tensor<T>& dy, ParamStore<T>& ps) const {
        detail::check_context(name_, uid_, ctx.layer_uid);
        const Tensor<T>& x = ctx.input;
        const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
        const std::size_t Ho = out_size(H), Wo = out_size(W), L = Ho * Wo, K = in_ * k_ * k_;
        if (dy.shape() != Shape{N, out_, Ho, Wo}) shape_fail("upstream " + shape_string({N, out_, Ho, Wo}), dy.shape());
        Tensor<T> dx(x.shape());
        const ConstMatMap<T> w(ps.value(w_).data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(K));
        MatMap<T> dw(ps.grad(w_).data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(K));
        T* db = ps.grad(b_).data();
        const std::size_t chunk = chunk_items(K, L);
        RowMat<T> col, dcol, g;
        for (std::size_t n0 = 0; n0 < N; n0 += chunk) {
            const std::size_t nc = std::min(chunk, N - n0);
            col.resize(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(nc * L));
            g.resize(static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(nc * L));
            for (std::size_t i = 0; i < nc; ++i) {
                im2col(x.data() + (n0 + i) * in_ * H * W, H, W, Ho, Wo, col, i * L);
                for (std::size_t o = 0; o < out_; ++o) {
                    const T* src = dy.data() + ((n0 + i) * out_ + o) * L;
                    T* dst = g.data() + o * nc * L + i * L;
                    std::copy(src, src + L, dst);
                }
            }
            dw.noalias() += g * col.transpose();
            for (std::size_t o = 0; o < out_; ++o) db[o] += g.row(static_cast<Eigen::Index>(o)).sum();
            dcol.noalias() = w.transpose() * g;
            for (std::size_t i = 0; i < nc; ++i) col2im(dcol, i * L, H, W, Ho, Wo, dx.data() + (n0 + i) * in_ * H * W);
        }
        return dx;
    }

private:
    std::size_t pad() const { return k_ / 2; }

    static std::size_t chunk_items(std::size_t K, std::size_t L) {
        constexpr std::size_t budget = std::size_t{1} << 22;
        return std::max<std::size_t>(1, budget / std::max<std::size_t>(1, K * L));
    }

    /// Valid output column range [lo, hi) for kernel offset kx: 0 <= ox * stride + kx - pad < W.
    void valid_range(std::size_t kx, std::size_t W, std::size_t Wo, std::size_t& lo, std::size_t& hi) const {
        const long p = static_cast<long>(pad()), s = static_cast<long>(stride_), k = static_cast<long>(kx);
        long l = p - k > 0 ? (p - k + s - 1) / s : 0;
        long h = (static_cast<long>(W) - 1 + p - k) / s + 1;
        l = std::min<long>(l, static_cast<long>(Wo));
        h = std::clamp<long>(h, l, static_cast<long>(Wo));
        lo = static_cast<std::size_t>(l);
        hi = static_cast<std::size_t>(h);
    }

    void im2col(const T* x, std::size_t H, std::size_t W, std::size_t Ho, std::size_t Wo, RowMat<T>& col,
                std::size_t col_off) const {
        const std::size_t ld = static_cast<std::size_t>(col.cols());
        const long p = static_cast<long>(pad());
        for (std::size_t c = 0; c < in_; ++c)
            for (std::size_t ky = 0; ky < k_; ++ky)
                for (std::size_t kx = 0; kx < k_; ++kx) {
                    T* row = col.data() + ((c * k_ + ky) * k_ + kx) * ld + col_off;
                    std::size_t lo, hi;
                    valid_range(kx, W, Wo, lo, hi);
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const long iy = static_cast<long>(oy * stride_ + ky) - p;
                        T* dst = row + oy * Wo;
                        if (iy < 0 || iy >= static_cast<long>(H)) {
                            std::fill(dst, dst + Wo, T{0});
                            continue;
                        }
                        const T* src = x + (c * H + static_cast<std::size_t>(iy)) * W;
                        std::fill(dst, dst + lo, T{0});
                        if (stride_ == 1) {
                            if (hi > lo) std::copy(src + (lo + kx - pad()), src + (hi + kx - pad()), dst + lo);
                        } else {
                            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride_ + kx - pad()];
                        }
                        std::fill(dst + hi, dst + Wo, T{0});
                    }
                }
    }

    void col2im(const RowMat<T>& dcol, std::size_t col_off, std::size_t H, std::size_t W, std::size_t Ho,
                std::size_t Wo, T* dx) const {
        const std::size_t ld = static_cast<std::size_t>(dcol.cols());
        const long p = static_cast<long>(pad());
        for (std::size_t c = 0; c < in_; ++c)
            for (std::size_t ky = 0; ky < k_; ++ky)
                for (std::size_t kx = 0; kx < k_; ++kx) {
                    const T* row = dcol.data() + ((c * k_ + ky) * k_ + kx) * ld + col_off;
                    std::size_t lo, hi;
                    valid_range(kx, W, Wo, lo, hi);
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const long iy = static_cast<long>(oy * stride_ + ky) - p;
                        if (iy < 0 || iy >= static_cast<long>(H)) continue;
                        T* dst = dx + (c * H + static_cast<std::size_t>(iy)) * W;
                        const T* src = row + oy * Wo;
                        for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * stride_ + kx - pad()] += src[ox];
                    }
                }
    }

    std::size_t in_ = 0, out_ = 0, k_ = 3, stride_ = 1;
    ParamRef w_, b_;
};

// ---------------------------------------------------------------------------
// Dense layer on [N, in] rows.

template <class T>
struct LinearContext : ContextBase {
    Tensor<T> input;
};

template <class T>
class Linear : public Layer {
public:
    Linear() : Layer("") {}
    Linear(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng)
        : Layer(name), in_(in), out_(out) {
        w_ = ps.add(name + ".weight", detail::normal_init<T>({out, in}, std::sqrt(1.0 / in), rng));
        b_ = ps.add(name + ".bias", Tensor<T>({out}));
    }

    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }
    ParamRef weight() const { return w_; }
    ParamRef bias() const { return b_; }

    Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, LinearContext<T>* ctx = nullptr) const {
        if (x.rank() != 2 || x.dim(1) != in_) shape_fail("[N," + std::to_string(in_) + "]", x.shape());
        const auto N = static_cast<Eigen::Index>(x.dim(0));
        Tensor<T> y({x.dim(0), out_});
        const ConstMatMap<T> xm(x.data(), N, static_cast<Eigen::Index>(in_));
        const ConstMatMap<T> w(ps.value(w_).data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_));
        MatMap<T> ym(y.data(), N, static_cast<Eigen::Index>(out_));
        ym.noalias() = xm * w.transpose();
        const T* b = ps.value(b_).data();
        for (Eigen::Index i = 0; i < N; ++i)
            for (std::size_t o = 0; o < out_; ++o) ym(i, static_cast<Eigen::Index>(o)) += b[o];
        if (ctx) {
            ctx->layer_uid = uid_;
            ctx->input = x;
        }
        detail::check_output(name_, y);
        return y;
    }

    Tensor<T> backward(const LinearContext<T>& ctx, const Tensor<T>& dy, ParamStore<T>& ps) const {
        detail::check_context(name_, uid_, ctx.layer_uid);
        const Tensor<T>& x = ctx.input;
        const auto N = static_cast<Eigen::Index>(x.dim(0));
        if (dy.shape() != Shape{x.dim(0), out_}) shape_fail("upstream [N," + std::to_string(out_) + "]", dy.shape());
        const ConstMatMap<T> xm(x.data(), N, static_cast<Eigen::Index>(in_));
        const ConstMatMap<T> g(dy.data(), N, static_cast<Eigen::Index>(out_));
        const ConstMatMap<T> w(ps.value(w_).data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_));
        MatMap<T> dw(ps.grad(w_).data(), static_cast<Eigen::Index>(out_), static_cast<Eigen::Index>(in_));
        dw.noalias() += g.transpose() * xm;
        T* db = ps.grad(b_).data();
        for (std::size_t o = 0; o < out_; ++o) db[o] += g.col(static_cast<Eigen::Index>(o)).sum();
        Tensor<T> dx(x.shape());
        MatMap<T> dxm(dx.data(), N, static_cast<Eigen::Index>(in_));
        dxm.noalias() = g * w;
        return dx;
    }

private:
    std::size_t in_ = 0, out_ = 0;
    ParamRef w_, b_;
};

// ---------------------------------------------------------------------------
// GroupNorm over [N, C, ...]; statistics per (sample, group).

template <class T>
struct GroupNormContext : ContextBase {
    Tensor<T> xhat;
    std::vector<T> inv_std;
};

template <class T>
class GroupNorm : public Layer {
public:
    static constexpr double eps = 1e-5;

    GroupNorm() : Layer("") {}
    GroupNorm(ParamStore<T>& ps, const std::string& name, std::size_t channels, std::size_t groups)
        : Layer(name), channels_(channels), groups_(groups) {
        if (groups == 0 || channels % groups != 0)
            throw ConfigError("group norm '" + name + "': " + std::to_string(groups) + " groups do not divide " +
                              std::to_string(channels) + " channels");
        gamma_ = ps.add(name + ".weight", Tensor<T>({channels}, T{1}));
        beta_ = ps.add(name + ".bias", Tensor<T>({channels}));
    }

    std::size_t channels() const { return channels_; }
    std::size_t groups() const { return groups_; }
    ParamRef gamma() const { return gamma_; }
    ParamRef beta() const { return beta_; }

    Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, GroupNormContext<T>* ctx = nullptr) const {
        if (x.rank() < 2 || x.dim(1) != channels_) shape_fail("[N," + std::to_string(channels_) + ",...]", x.shape());
        const std::size_t N = x.dim(0), S = x.size() / std::max<std::size_t>(1, N * channels_);
        const std::size_t cpg = channels_ / groups_, M = cpg * S;
        Tensor<T> y(x.shape());
        Tensor<T> xhat;
        std::vector<T> inv;
        if (ctx) {
            xhat = Tensor<T>(x.shape());
            inv.resize(N * groups_);
        }
        const T* g = ps.value(gamma_).data();
        const T* b = ps.value(beta_).data();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t gi = 0; gi < groups_; ++gi) {
                const std::size_t off = (n * channels_ + gi * cpg) * S;
                const T* src = x.data() + off;
                using Acc = std::common_type_t<T, double>;
                Acc mean = 0.0;
                for (std::size_t i = 0; i < M; ++i) mean += src[i];
                mean /= static_cast<Acc>(M);
                Acc var = 0.0;
                for (std::size_t i = 0; i < M; ++i) var += (src[i] - mean) * (src[i] - mean);
                var /= static_cast<Acc>(M);
                const T is = static_cast<T>(Acc{1} / std::sqrt(var + static_cast<Acc>(eps)));
                const T m = static_cast<T>(mean);
                for (std::size_t c = 0; c < cpg; ++c) {
                    const std::size_t ch = gi * cpg + c;
                    for (std::size_t s = 0; s < S; ++s) {
                        const std::size_t i = c * S + s;
                        const T xh = (src[i] - m) * is;
                        y[off + i] = g[ch] * xh + b[ch];
                        if (ctx) xhat[off + i] = xh;
                    }
                }
                if (ctx) inv[n * groups_ + gi] = is;
            }
        if (ctx) {
            ctx->layer_uid = uid_;
            ctx->xhat = std::move(xhat);
            ctx->inv_std = std::move(inv);
        }
        detail::check_output(name_, y);
        return y;
    }

    Tensor<T> backward(const GroupNormContext<T>& ctx, const Tensor<T>& dy, ParamStore<T>& ps) const {
        detail::check_context(name_, uid_, ctx.layer_uid);
        if (dy.shape() != ctx.xhat.shape()) shape_fail("upstream " + shape_string(ctx.xhat.shape()), dy.shape());
        const std::size_t N = dy.dim(0), S = dy.size() / std::max<std::size_t>(1, N * channels_);
        const std::size_t cpg = channels_ / groups_, M = cpg * S;
        const T* g = ps.value(gamma_).data();
        T* dg = ps.grad(gamma_).data();
        T* db = ps.grad(beta_).data();
        Tensor<T> dx(dy.shape());
        std::vector<T> dxh(M);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t gi = 0; gi < groups_; ++gi) {
                const std::size_t off = (n * channels_ + gi * cpg) * S;
                T sum_d{0}, sum_dx{0};
                for (std::size_t c = 0; c < cpg; ++c) {
                    const std::size_t ch = gi * cpg + c;
                    for (std::size_t s = 0; s < S; ++s) {
                        const std::size_t i = c * S + s;
                        const T d = dy[off + i], xh = ctx.xhat[off + i];
                        dg[ch] += d * xh;
                        db[ch] += d;
                        dxh[i] = d * g[ch];
                        sum_d += dxh[i];
                        sum_dx += dxh[i] * xh;
                    }
                }
                const T is = ctx.inv_std[n * groups_ + gi];
                const T invM = T{1} / static_cast<T>(M);
                for (std::size_t i = 0; i < M; ++i)
                    dx[off + i] = is * (dxh[i] - invM * sum_d - ctx.xhat[off + i] * invM * sum_dx);
            }
        return dx;
    }

private:
    std::size_t channels_ = 0, groups_ = 1;
    ParamRef gamma_, beta_;
};

// ---------------------------------------------------------------------------
// Stateless layers.

template <class T>
struct SiluContext : ContextBase {
    Tensor<T> input;
};

template <class T>
class Silu : public Layer {
public:
    explicit Silu(std::string name = "silu") : Layer(std::move(name)) {}

    Tensor<T> forward(const Tensor<T>& x, SiluContext<T>* ctx = nullptr) const {
        Tensor<T> y(x.shape());
        const auto n = static_cast<Eigen::Index>(x.size());
        const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> xa(x.data(), n);
        Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(y.data(), n) = xa / (T{1} + (-xa).exp());
        if (ctx) {
            ctx->layer_uid = uid_;
            ctx->input = x;
        }
        detail::check_output(name_, y);
        return y;
    }

    Tensor<T> backward(const SiluContext<T>& ctx, const Tensor<T>& dy) const {
        detail::check_context(name_, uid_, ctx.layer_uid);
        if (dy.shape() != ctx.input.shape()) shape_fail("upstream " + shape_string(ctx.input.shape()), dy.shape());
        Tensor<T> dx(dy.shape());
        const auto n = static_cast<Eigen::Index>(dy.size());
        using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
        const Eigen::Map<const Arr> xa(ctx.input.data(), n), ga(dy.data(), n);
        const Arr s = T{1} / (T{1} + (-xa).exp());
        Eigen::Map<Arr>(dx.data(), n) = ga * s * (T{1} + xa * (T{1} - s));
        return dx;
    }
};

struct UpsampleContext : ContextBase {
    Shape input_shape;
};

/// Nearest-neighbour x2 upsampling on NCHW.
template <class T>
class UpNearest2 : public Layer {
public:
    explicit UpNearest2(std::string name = "up") : Layer(std::move(name)) {}

    Tensor<T> forward(const Tensor<T>& x, UpsampleContext* ctx = nullptr) const {
        if (x.rank() != 4) shape_fail("[N,C,H,W]", x.shape());
        const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
        Tensor<T> y({x.dim(0), x.dim(1), 2 * H, 2 * W});
        for (std::size_t p = 0; p < NC; ++p)
            for (std::size_t i = 0; i < 2 * H; ++i)
                for (std::size_t j = 0; j < 2 * W; ++j) y[(p * 2 * H + i) * 2 * W + j] = x[(p * H + i / 2) * W + j / 2];
        if (ctx) {
            ctx->layer_uid = uid_;
            ctx->input_shape = x.shape();
        }
        return y;
    }

    Tensor<T> backward(const UpsampleContext& ctx, const Tensor<T>& dy) const {
        detail::check_context(name_, uid_, ctx.layer_uid);
        const Shape& s = ctx.input_shape;
        if (dy.shape() != Shape{s[0], s[1], 2 * s[2], 2 * s[3]}) shape_fail("upstream 2x input", dy.shape());
        Tensor<T> dx(s);
        const std::size_t NC = s[0] * s[1], H = s[2], W = s[3];
        for (std::size_t p = 0; p < NC; ++p)
            for (std::size_t i = 0; i < 2 * H; ++i)
                for (std::size_t j = 0; j < 2 * W; ++j) dx[(p * H + i / 2) * W + j / 2] += dy[(p * 2 * H + i) * 2 * W + j];
        return dx;
    }
};

// ---------------------------------------------------------------------------
// Self-attention over spatial tokens: y = x + Wo * Attn(GN(x)).

template <class T>
struct AttentionContext : ContextBase {
    GroupNormContext<T> norm;
    Conv2dContext<T> q_ctx, k_ctx, v_ctx, o_ctx;
    Tensor<T> q, k, v;
    std::vector<T> probs;  // [N, heads, L, L]
};

template <class T>
class SelfAttention : public Layer {
public:
    SelfAttention() : Layer("") {}
    SelfAttention(ParamStore<T>& ps, const std::string& name, std::size_t channels, std::size_t groups,
                  std::size_t heads, Rng& rng)
        : Layer(name),
          channels_(channels),
          heads_(heads),
          norm_(ps, name + ".norm", channels, groups),
          q_(ps, name + ".q", channels, channels, 1, 1, rng),
          k_(ps, name + ".k", channels, channels, 1, 1, rng),
          v_(ps, name + ".v", channels, channels, 1, 1, rng),
          o_(ps, name + ".proj", channels, channels, 1, 1, rng) {
        if (heads == 0 || channels % heads != 0)
            throw ConfigError("attention '" + name + "': heads must divide channel count");
    }

    std::size_t channels() const { return channels_; }
    std::size_t heads() const { return heads_; }

    Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, AttentionContext<T>* ctx = nullptr) const {
        if (x.rank() != 4 || x.dim(1) != channels_) shape_fail("[N," + std::to_string(channels_) + ",H,W]", x.shape());
        const std::size_t N = x.dim(0), L = x.dim(2) * x.dim(3), d = channels_ / heads_;
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
        Tensor<T> xn = norm_.forward(ps, x, ctx ? &ctx->norm : nullptr);
        Tensor<T> q = q_.forward(ps, xn, ctx ? &ctx->q_ctx : nullptr);
        Tensor<T> k = k_.forward(ps, xn, ctx ? &ctx->k_ctx : nullptr);
        Tensor<T> v = v_.forward(ps, xn, ctx ? &ctx->v_ctx : nullptr);
        Tensor<T> attn(x.shape());
        std::vector<T> probs(ctx ? N * heads_ * L * L : 0);
        RowMat<T> s;
        const auto dl = static_cast<Eigen::Index>(d), ll = static_cast<Eigen::Index>(L);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t h = 0; h < heads_; ++h) {
                const std::size_t off = (n * channels_ + h * d) * L;
                const ConstMatMap<T> qh(q.data() + off, dl, ll), kh(k.data() + off, dl, ll), vh(v.data() + off, dl, ll);
                s.noalias() = (qh.transpose() * kh) * scale;
                for (Eigen::Index i = 0; i < ll; ++i) {
                    const T mx = s.row(i).maxCoeff();
                    s.row(i) = (s.row(i).array() - mx).exp();
                    s.row(i) /= s.row(i).sum();
                }
                MatMap<T> oh(attn.data() + off, dl, ll);
                oh.noalias() = vh * s.transpose();
                if (ctx) std::copy(s.data(), s.data() + L * L, probs.begin() + static_cast<std::ptrdiff_t>((n * heads_ + h) * L * L));
            }
        Tensor<T> out = o_.forward(ps, attn, ctx ? &ctx->o_ctx : nullptr);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
        if (ctx) {
            ctx->layer_uid = uid_;
            ctx->q = std::move(q);
            ctx->k = std::move(k);
            ctx->v = std::move(v);
            ctx->probs = std::move(probs);
        }
        detail::check_output(name_, out);
        return out;
    }

    Tensor<T> backward(const AttentionContext<T>& ctx, const Tensor<T>& dy, ParamStore<T>& ps) const {
        detail::check_context(name_, uid_, ctx.layer_uid);
        if (dy.shape() != ctx.q.shape()) shape_fail("upstream " + shape_string(ctx.q.shape()), dy.shape());
        const std::size_t N = dy.dim(0), L = dy.dim(2) * dy.dim(3), d = channels_ / heads_;
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
        Tensor<T> dattn = o_.backward(ctx.o_ctx, dy, ps);
        Tensor<T> dq(dy.shape()), dk(dy.shape()), dv(dy.shape());
        RowMat<T> dp, ds;
        const auto dl = static_cast<Eigen::Index>(d), ll = static_cast<Eigen::Index>(L);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t h = 0; h < heads_; ++h) {
                const std::size_t off = (n * channels_ + h * d) * L;
                const ConstMatMap<T> p(ctx.probs.data() + (n * heads_ + h) * L * L, ll, ll);
                const ConstMatMap<T> qh(ctx.q.data() + off, dl, ll), kh(ctx.k.data() + off, dl, ll),
                    vh(ctx.v.data() + off, dl, ll), doh(dattn.data() + off, dl, ll);
                MatMap<T> dqh(dq.data() + off, dl, ll), dkh(dk.data() + off, dl, ll), dvh(dv.data() + off, dl, ll);
                dvh.noalias() = doh * p;
                dp.noalias() = doh.transpose() * vh;
                ds = p.cwiseProduct(dp);
                for (Eigen::Index i = 0; i < ll; ++i) {
                    const T r = ds.row(i).sum();
                    ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - r).matrix());
                }
                dqh.noalias() = (kh * ds.transpose()) * scale;
                dkh.noalias() = (qh * ds) * scale;
            }
        Tensor<T> dxn = q_.backward(ctx.q_ctx, dq, ps);
        const Tensor<T> dxk = k_.backward(ctx.k_ctx, dk, ps);
        const Tensor<T> dxv = v_.backward(ctx.v_ctx, dv, ps);
        for (std::size_t i = 0; i < dxn.size(); ++i) dxn[i] += dxk[i] + dxv[i];
        Tensor<T> dx = norm_.backward(ctx.norm, dxn, ps);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
        return dx;
    }

private:
    std::size_t channels_ = 0, heads_ = 1;
    GroupNorm<T> norm_;
    Conv2d<T> q_, k_, v_, o_;
};

// ---------------------------------------------------------------------------
// Timestep embedding: sinusoidal features of t followed by Linear-SiLU-Linear.

/// Sinusoidal embedding [sin(t w_i), cos(t w_i)], w_i = 10000^(-i / (dim/2)).
template <class T>
Tensor<T> sinusoidal_embedding(std::span<const int> ts, std::size_t dim) {
    if (dim % 2 != 0 || dim == 0) throw ConfigError("sinusoidal embedding dimension must be even");
    const std::size_t half = dim / 2;
    Tensor<T> e({ts.size(), dim});
    for (std::size_t n = 0; n < ts.size(); ++n)
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double a = ts[n] * freq;
            e[n * dim + i] = static_cast<T>(std::sin(a));
            e[n * dim + half + i] = static_cast<T>(std::cos(a));
        }
    return e;
}

template <class T>
struct TimeEmbeddingContext : ContextBase {
    LinearContext<T> l1, l2;
    SiluContext<T> act;
};

template <class T>
class TimeEmbedding : public Layer {
public:
    TimeEmbedding() : Layer("") {}
    TimeEmbedding(ParamStore<T>& ps, const std::string& name, std::size_t base_dim, std::size_t embed_dim, Rng& rng)
        : Layer(name),
          base_dim_(base_dim),
          l1_(ps, name + ".linear_1", base_dim, embed_dim, rng),
          act_(name + ".act"),
          l2_(ps, name + ".linear_2", embed_dim, embed_dim, rng) {}

    std::size_t embed_dim() const { return l2_.out_features(); }

    Tensor<T> forward(const ParamStore<T>& ps, std::span<const int> ts, TimeEmbeddingContext<T>* ctx = nullptr) const {
        Tensor<T> e = sinusoidal_embedding<T>(ts, base_dim_);
        e = l1_.forward(ps, e, ctx ? &ctx->l1 : nullptr);
        e = act_.forward(e, ctx ? &ctx->act : nullptr);
        e = l2_.forward(ps, e, ctx ? &ctx->l2 : nullptr);
        if (ctx) ctx->layer_uid = uid_;
        return e;
    }

    void backward(const TimeEmbeddingContext<T>& ctx, const Tensor<T>& dy, ParamStore<T>& ps) const {
        detail::check_context(name_, uid_, ctx.layer_uid);
        Tensor<T> g = l2_.backward(ctx.l2, dy, ps);
        g = act_.backward(ctx.act, g);
        l1_.backward(ctx.l1, g, ps);
    }

private:
    std::size_t base_dim_ = 0;
    Linear<T> l1_;
    Silu<T> act_;
    Linear<T> l2_;
};

}  // namespace dprobe::nn
