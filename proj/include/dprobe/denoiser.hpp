// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <atomic>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dprobe/error.hpp"
#include "dprobe/nn/layers.hpp"
#include "dprobe/nn/params.hpp"
#include "dprobe/rng.hpp"
#include "dprobe/tensor.hpp"

namespace dprobe {

/// U-Net hyperparameters. Stage 0 is the full-resolution stage.
struct DenoiserConfig {
    std::size_t image_size = 32;
    std::size_t in_channels = 1;
    std::vector<std::size_t> stage_channels{32, 64, 96, 128};
    std::size_t encoder_blocks_per_stage = 2;
    std::size_t bottleneck_blocks = 2;
    std::size_t decoder_blocks_per_stage = 3;
    std::set<std::size_t> attention_resolutions{4};
    std::size_t groups = 16;
    std::size_t time_embed_dim = 128;
    std::size_t attention_heads = 1;
    int timesteps = 1000;
    std::uint64_t init_seed = 0;

    /// Layout used at full scale: 128 px, widths 64-128-256-512, attention at 16 px.
    static DenoiserConfig paper_scale() {
        DenoiserConfig c;
        c.image_size = 128;
        c.stage_channels = {64, 128, 256, 512};
        c.attention_resolutions = {16};
        c.time_embed_dim = 256;
        return c;
    }

    std::size_t stages() const { return stage_channels.size(); }
    std::size_t resolution(std::size_t stage) const { return image_size >> stage; }

    void validate() const {
        if (stage_channels.empty()) throw ConfigError("denoiser needs at least one stage");
        if (in_channels == 0) throw ConfigError("denoiser in_channels must be positive");
        const std::size_t div = std::size_t{1} << (stages() - 1);
        if (image_size == 0 || image_size % div != 0)
            throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by " + std::to_string(div));
        for (auto c : stage_channels)
            if (c == 0 || c % groups != 0)
                throw ConfigError("stage width " + std::to_string(c) + " not divisible by " + std::to_string(groups) +
                                  " groups");
        for (auto r : attention_resolutions) {
            bool found = false;
            for (std::size_t s = 0; s < stages(); ++s) found |= resolution(s) == r;
            if (!found) throw ConfigError("attention resolution " + std::to_string(r) + " is not a realized stage");
        }
        if (encoder_blocks_per_stage == 0 || decoder_blocks_per_stage == 0)
            throw ConfigError("block counts must be positive");
        if (decoder_blocks_per_stage != encoder_blocks_per_stage + 1)
            throw ConfigError("decoder blocks must equal encoder blocks + 1 (one skip per block)");
        if (time_embed_dim == 0 || stage_channels[0] % 2 != 0) throw ConfigError("invalid time embedding size");
        if (timesteps < 2) throw ConfigError("denoiser timesteps must be >= 2");
    }
};

inline void to_json(nlohmann::json& j, const DenoiserConfig& c) {
    j = nlohmann::json{{"image_size", c.image_size},
                       {"in_channels", c.in_channels},
                       {"stage_channels", c.stage_channels},
                       {"encoder_blocks_per_stage", c.encoder_blocks_per_stage},
                       {"bottleneck_blocks", c.bottleneck_blocks},
                       {"decoder_blocks_per_stage", c.decoder_blocks_per_stage},
                       {"attention_resolutions", c.attention_resolutions},
                       {"groups", c.groups},
                       {"time_embed_dim", c.time_embed_dim},
                       {"attention_heads", c.attention_heads},
                       {"timesteps", c.timesteps},
                       {"init_seed", c.init_seed}};
}

inline void from_json(const nlohmann::json& j, DenoiserConfig& c) {
    DenoiserConfig d;
    c.image_size = j.value("image_size", d.image_size);
    c.in_channels = j.value("in_channels", d.in_channels);
    c.stage_channels = j.value("stage_channels", d.stage_channels);
    c.encoder_blocks_per_stage = j.value("encoder_blocks_per_stage", d.encoder_blocks_per_stage);
    c.bottleneck_blocks = j.value("bottleneck_blocks", d.bottleneck_blocks);
    c.decoder_blocks_per_stage = j.value("decoder_blocks_per_stage", d.decoder_blocks_per_stage);
    c.attention_resolutions = j.value("attention_resolutions", d.attention_resolutions);
    c.groups = j.value("groups", d.groups);
    c.time_embed_dim = j.value("time_embed_dim", d.time_embed_dim);
    c.attention_heads = j.value("attention_heads", d.attention_heads);
    c.timesteps = j.value("timesteps", d.timesteps);
    c.init_seed = j.value("init_seed", d.init_seed);
}

/// Decoder readout location: stage r (1 = lowest resolution) and residual block b.
/// Flat index ell = blocks * (r - 1) + b, i.e. ell = 3(r - 1) + b with three blocks per stage.
struct ReadoutId {
    int r = 1;
    int b = 1;

    int ell(int blocks_per_stage = 3) const { return blocks_per_stage * (r - 1) + b; }
    static ReadoutId from_ell(int ell, int blocks_per_stage = 3) {
        if (ell < 1) throw IndexError("readout index must be >= 1, got " + std::to_string(ell));
        return {(ell - 1) / blocks_per_stage + 1, (ell - 1) % blocks_per_stage + 1};
    }
    friend auto operator<=>(const ReadoutId&, const ReadoutId&) = default;
};

struct ReadoutInfo {
    ReadoutId id;
    int ell = 0;
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
};

/// Decoder readout table derived from the config (lowest resolution first).
inline std::vector<ReadoutInfo> readout_table(const DenoiserConfig& c) {
    std::vector<ReadoutInfo> out;
    const int S = static_cast<int>(c.stages()), D = static_cast<int>(c.decoder_blocks_per_stage);
    for (int r = 1; r <= S; ++r) {
        const std::size_t s = static_cast<std::size_t>(S - r);
        for (int b = 1; b <= D; ++b)
            out.push_back({{r, b}, D * (r - 1) + b, c.stage_channels[s], c.resolution(s), c.resolution(s)});
    }
    return out;
}

/// Activation tapped at a readout location: [N, C_l, H_l, W_l].
template <class T>
struct FeatureTensor {
    ReadoutId readout;
    Tensor<T> values;
};

template <class T>
using ReadoutMap = std::map<int, FeatureTensor<T>>;

namespace detail {

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("cannot concatenate " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    const std::size_t N = a.dim(0), ca = a.dim(1), cb = b.dim(1), S = a.dim(2) * a.dim(3);
    Tensor<T> out({N, ca + cb, a.dim(2), a.dim(3)});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy(a.data() + n * ca * S, a.data() + (n + 1) * ca * S, out.data() + n * (ca + cb) * S);
        std::copy(b.data() + n * cb * S, b.data() + (n + 1) * cb * S, out.data() + (n * (ca + cb) + ca) * S);
    }
    return out;
}

template <class T>
void split_channels(const Tensor<T>& g, std::size_t ca, Tensor<T>& ga, Tensor<T>& gb) {
    const std::size_t N = g.dim(0), c = g.dim(1), cb = c - ca, S = g.dim(2) * g.dim(3);
    ga = Tensor<T>({N, ca, g.dim(2), g.dim(3)});
    gb = Tensor<T>({N, cb, g.dim(2), g.dim(3)});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy(g.data() + n * c * S, g.data() + (n * c + ca) * S, ga.data() + n * ca * S);
        std::copy(g.data() + (n * c + ca) * S, g.data() + (n + 1) * c * S, gb.data() + n * cb * S);
    }
}

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
    if (dst.empty()) {
        dst = src;
        return;
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

template <class T>
struct ResBlockContext {
    nn::GroupNormContext<T> gn1, gn2;
    nn::SiluContext<T> act1, act2;
    nn::Conv2dContext<T> conv1, conv2, skip;
    nn::LinearContext<T> temb;
};

/// Pre-activation residual block with a per-channel timestep bias:
/// h = conv1(silu(gn1(x))) + proj(silu(temb)); y = conv2(silu(gn2(h))) + skip(x).
template <class T>
class ResBlock {
public:
    ResBlock() = default;
    ResBlock(nn::ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t embed,
             std::size_t groups, Rng& rng)
        : in_(in),
          out_(out),
          gn1_(ps, name + ".norm1", in, groups),
          act1_(name + ".act1"),
          conv1_(ps, name + ".conv1", in, out, 3, 1, rng),
          temb_(ps, name + ".time_emb_proj", embed, out, rng),
          gn2_(ps, name + ".norm2", out, groups),
          act2_(name + ".act2"),
          conv2_(ps, name + ".conv2", out, out, 3, 1, rng) {
        if (in != out) skip_ = nn::Conv2d<T>(ps, name + ".conv_shortcut", in, out, 1, 1, rng);
    }

    std::size_t out_channels() const { return out_; }

    /// `silu_temb` is silu(time embedding), shape [N, embed].
    Tensor<T> forward(const nn::ParamStore<T>& ps, const Tensor<T>& x, const Tensor<T>& silu_temb,
                      ResBlockContext<T>* ctx) const {
        Tensor<T> h = gn1_.forward(ps, x, ctx ? &ctx->gn1 : nullptr);
        h = act1_.forward(h, ctx ? &ctx->act1 : nullptr);
        h = conv1_.forward(ps, h, ctx ? &ctx->conv1 : nullptr);
        const Tensor<T> bias = temb_.forward(ps, silu_temb, ctx ? &ctx->temb : nullptr);
        const std::size_t N = h.dim(0), S = h.dim(2) * h.dim(3);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < out_; ++c) {
                T* p = h.data() + (n * out_ + c) * S;
                const T bv = bias[n * out_ + c];
                for (std::size_t s = 0; s < S; ++s) p[s] += bv;
            }
        h = gn2_.forward(ps, h, ctx ? &ctx->gn2 : nullptr);
        h = act2_.forward(h, ctx ? &ctx->act2 : nullptr);
        h = conv2_.forward(ps, h, ctx ? &ctx->conv2 : nullptr);
        if (in_ != out_) {
            const Tensor<T> s = skip_->forward(ps, x, ctx ? &ctx->skip : nullptr);
            for (std::size_t i = 0; i < h.size(); ++i) h[i] += s[i];
        } else {
            for (std::size_t i = 0; i < h.size(); ++i) h[i] += x[i];
        }
        return h;
    }

    Tensor<T> backward(const ResBlockContext<T>& ctx, const Tensor<T>& dy, nn::ParamStore<T>& ps,
                       Tensor<T>& d_silu_temb) const {
        Tensor<T> g = conv2_.backward(ctx.conv2, dy, ps);
        g = act2_.backward(ctx.act2, g);
        g = gn2_.backward(ctx.gn2, g, ps);
        const std::size_t N = g.dim(0), S = g.dim(2) * g.dim(3);
        Tensor<T> dbias({N, out_});
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < out_; ++c) {
                const T* p = g.data() + (n * out_ + c) * S;
                T acc{0};
                for (std::size_t s = 0; s < S; ++s) acc += p[s];
                dbias[n * out_ + c] = acc;
            }
        detail::add_into(d_silu_temb, temb_.backward(ctx.temb, dbias, ps));
        g = conv1_.backward(ctx.conv1, g, ps);
        g = act1_.backward(ctx.act1, g);
        Tensor<T> dx = gn1_.backward(ctx.gn1, g, ps);
        if (in_ != out_) {
            const Tensor<T> ds = skip_->backward(ctx.skip, dy, ps);
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += ds[i];
        } else {
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
        }
        return dx;
    }

private:
    std::size_t in_ = 0, out_ = 0;
    nn::GroupNorm<T> gn1_;
    nn::Silu<T> act1_;
    nn::Conv2d<T> conv1_;
    nn::Linear<T> temb_;
    nn::GroupNorm<T> gn2_;
    nn::Silu<T> act2_;
    nn::Conv2d<T> conv2_;
    std::optional<nn::Conv2d<T>> skip_;
};

/// Everything the U-Net backward pass needs from one forward pass.
template <class T>
struct UNetTape {
    std::size_t batch = 0;
    nn::TimeEmbeddingContext<T> temb;
    nn::SiluContext<T> temb_act;
    nn::Conv2dContext<T> conv_in;
    std::vector<ResBlockContext<T>> enc, mid, dec;
    std::vector<nn::AttentionContext<T>> enc_attn, dec_attn;
    std::vector<nn::Conv2dContext<T>> down, up_conv;
    std::vector<nn::UpsampleContext> up;
    nn::GroupNormContext<T> out_norm;
    nn::SiluContext<T> out_act;
    nn::Conv2dContext<T> conv_out;
    bool filled = false;
};

/// Noise-prediction U-Net E(x_t, t): encoder / bottleneck / decoder with concatenated skips,
/// self-attention after the last block of configured stages, and tappable decoder readouts.
template <class T>
class UNet {
public:
    explicit UNet(DenoiserConfig config) : config_(std::move(config)) {
        config_.validate();
        build();
    }

    const DenoiserConfig& config() const { return config_; }
    nn::ParamStore<T>& params() { return params_; }
    const nn::ParamStore<T>& params() const { return params_; }

    bool frozen() const { return frozen_; }
    void set_frozen(bool f) { frozen_ = f; }

    /// Number of per-image forward passes run so far (instrumentation).
    std::size_t forward_items() const { return forward_items_.load(); }
    void reset_forward_items() { forward_items_ = 0; }

    std::vector<ReadoutInfo> readouts() const { return readout_table(config_); }

    Tensor<T> predict_noise(const nn::ParamStore<T>& ps, const Tensor<T>& x, std::span<const int> ts) const {
        return forward(ps, x, ts, {}, nullptr, nullptr);
    }
    Tensor<T> predict_noise(const Tensor<T>& x, std::span<const int> ts) const { return predict_noise(params_, x, ts); }

    /// Full forward pass. Activations for each requested flat readout index are copied into
    /// `readouts`; when `tape` is non-null the pass is recorded for backward().
    Tensor<T> forward(const nn::ParamStore<T>& ps, const Tensor<T>& x, std::span<const int> ts,
                      const std::set<int>& wanted, ReadoutMap<T>* readouts, UNetTape<T>* tape) const {
        check_inputs(x, ts);
        const int D = static_cast<int>(config_.decoder_blocks_per_stage);
        const int n_readouts = D * static_cast<int>(config_.stages());
        for (int ell : wanted)
            if (ell < 1 || ell > n_readouts)
                throw IndexError("readout " + std::to_string(ell) + " outside [1, " + std::to_string(n_readouts) + "]");
        if (tape && frozen_) throw ContractError("denoiser is frozen; recording a training pass is not allowed");
        if (tape) *tape = UNetTape<T>{};

        const std::size_t S = config_.stages();
        Tensor<T> temb = time_embed_.forward(ps, ts, tape ? &tape->temb : nullptr);
        const Tensor<T> st = temb_act_.forward(temb, tape ? &tape->temb_act : nullptr);

        Tensor<T> h = conv_in_.forward(ps, x, tape ? &tape->conv_in : nullptr);
        std::vector<Tensor<T>> skips{h};
        std::size_t bi = 0, ai = 0;
        for (std::size_t s = 0; s < S; ++s) {
            for (std::size_t b = 0; b < config_.encoder_blocks_per_stage; ++b, ++bi) {
                h = enc_[bi].forward(ps, h, st, tape ? &tape->enc.emplace_back() : nullptr);
                if (b + 1 == config_.encoder_blocks_per_stage && has_attention(s))
                    h = enc_attn_[ai++].forward(ps, h, tape ? &tape->enc_attn.emplace_back() : nullptr);
                skips.push_back(h);
            }
            if (s + 1 < S) {
                h = down_[s].forward(ps, h, tape ? &tape->down.emplace_back() : nullptr);
                skips.push_back(h);
            }
        }
        for (const auto& blk : mid_) h = blk.forward(ps, h, st, tape ? &tape->mid.emplace_back() : nullptr);

        bi = 0;
        ai = 0;
        for (std::size_t r = 1; r <= S; ++r) {
            const std::size_t s = S - r;
            for (int b = 1; b <= D; ++b, ++bi) {
                Tensor<T> cat = detail::concat_channels(h, skips.back());
                skips.pop_back();
                h = dec_[bi].forward(ps, cat, st, tape ? &tape->dec.emplace_back() : nullptr);
                if (b == D && has_attention(s))
                    h = dec_attn_[ai++].forward(ps, h, tape ? &tape->dec_attn.emplace_back() : nullptr);
                const int ell = D * static_cast<int>(r - 1) + b;
                if (readouts && wanted.count(ell))
                    (*readouts)[ell] = FeatureTensor<T>{{static_cast<int>(r), b}, h};
            }
            if (r < S) {
                h = up_.forward(h, tape ? &tape->up.emplace_back() : nullptr);
                h = up_conv_[r - 1].forward(ps, h, tape ? &tape->up_conv.emplace_back() : nullptr);
            }
        }
        h = out_norm_.forward(ps, h, tape ? &tape->out_norm : nullptr);
        h = out_act_.forward(h, tape ? &tape->out_act : nullptr);
        Tensor<T> eps = conv_out_.forward(ps, h, tape ? &tape->conv_out : nullptr);
        if (tape) {
            tape->batch = x.dim(0);
            tape->filled = true;
        }
        forward_items_ += x.dim(0);
        return eps;
    }

    /// Accumulates parameter gradients of <d_eps, eps_hat> into `ps`. The tape is consumed.
    void backward(UNetTape<T>& tape, const Tensor<T>& d_eps, nn::ParamStore<T>& ps) const {
        if (frozen_) throw ContractError("denoiser is frozen; backward is not allowed");
        if (!tape.filled) throw ContractError("backward called without a recorded forward pass");
        tape.filled = false;
        const std::size_t S = config_.stages();
        const int D = static_cast<int>(config_.decoder_blocks_per_stage);
        const std::size_t E = config_.encoder_blocks_per_stage;

        Tensor<T> d_st;
        Tensor<T> g = conv_out_.backward(tape.conv_out, d_eps, ps);
        g = out_act_.backward(tape.out_act, g);
        g = out_norm_.backward(tape.out_norm, g, ps);

        // Skip index k was pushed k-th in the encoder; decoder block j (0-based) consumed skip n_skips-1-j.
        const std::size_t n_skips = 1 + S * E + (S - 1);
        std::vector<Tensor<T>> d_skip(n_skips);
        std::size_t bi = dec_.size(), ai = dec_attn_.size(), ui = up_conv_.size();
        for (std::size_t r = S; r >= 1; --r) {
            const std::size_t s = S - r;
            if (r < S) {
                --ui;
                g = up_conv_[ui].backward(tape.up_conv[ui], g, ps);
                g = up_.backward(tape.up[ui], g);
            }
            for (int b = D; b >= 1; --b) {
                --bi;
                if (b == D && has_attention(s)) {
                    --ai;
                    g = dec_attn_[ai].backward(tape.dec_attn[ai], g, ps);
                }
                const Tensor<T> dcat = dec_[bi].backward(tape.dec[bi], g, ps, d_st);
                Tensor<T> dh, ds;
                detail::split_channels(dcat, dec_in_hidden_[bi], dh, ds);
                detail::add_into(d_skip[n_skips - 1 - bi], ds);
                g = std::move(dh);
            }
        }
        for (std::size_t m = mid_.size(); m-- > 0;) g = mid_[m].backward(tape.mid[m], g, ps, d_st);

        std::size_t k = n_skips;
        bi = enc_.size();
        ai = enc_attn_.size();
        for (std::size_t s = S; s-- > 0;) {
            if (s + 1 < S) {
                --k;
                detail::add_into(g, d_skip[k]);
                g = down_[s].backward(tape.down[s], g, ps);
            }
            for (std::size_t b = E; b-- > 0;) {
                --k;
                --bi;
                detail::add_into(g, d_skip[k]);
                if (b + 1 == E && has_attention(s)) {
                    --ai;
                    g = enc_attn_[ai].backward(tape.enc_attn[ai], g, ps);
                }
                g = enc_[bi].backward(tape.enc[bi], g, ps, d_st);
            }
        }
        --k;
        detail::add_into(g, d_skip[k]);
        conv_in_.backward(tape.conv_in, g, ps);

        const Tensor<T> d_temb = temb_act_.backward(tape.temb_act, d_st);
        time_embed_.backward(tape.temb, d_temb, ps);
    }

private:
    bool has_attention(std::size_t stage) const {
        return config_.attention_resolutions.count(config_.resolution(stage)) != 0;
    }

    void check_inputs(const Tensor<T>& x, std::span<const int> ts) const {
        const std::size_t sz = config_.image_size;
        if (x.rank() != 4 || x.dim(1) != config_.in_channels || x.dim(2) != sz || x.dim(3) != sz)
            throw ShapeError("denoiser input must be [N," + std::to_string(config_.in_channels) + "," +
                             std::to_string(sz) + "," + std::to_string(sz) + "], got " + shape_string(x.shape()));
        if (ts.size() != x.dim(0))
            throw ShapeError("denoiser got " + std::to_string(ts.size()) + " timesteps for a batch of " +
                             std::to_string(x.dim(0)));
        for (int t : ts)
            if (t < 1 || t > config_.timesteps)
                throw IndexError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(config_.timesteps) +
                                 "]");
    }

    void build() {
        Rng rng(config_.init_seed, "denoiser-init");
        const auto& ch = config_.stage_channels;
        const std::size_t S = config_.stages(), E = config_.encoder_blocks_per_stage;
        const std::size_t D = config_.decoder_blocks_per_stage, G = config_.groups, emb = config_.time_embed_dim;
        time_embed_ = nn::TimeEmbedding<T>(params_, "time_embedding", ch[0], emb, rng);
        conv_in_ = nn::Conv2d<T>(params_, "conv_in", config_.in_channels, ch[0], 3, 1, rng);

        std::vector<std::size_t> skip_ch{ch[0]};
        std::size_t c = ch[0];
        for (std::size_t s = 0; s < S; ++s) {
            for (std::size_t b = 0; b < E; ++b) {
                const std::string name = "down." + std::to_string(s) + ".resnets." + std::to_string(b);
                enc_.emplace_back(params_, name, c, ch[s], emb, G, rng);
                c = ch[s];
                if (b + 1 == E && has_attention(s))
                    enc_attn_.emplace_back(params_, "down." + std::to_string(s) + ".attention", c, G,
                                           config_.attention_heads, rng);
                skip_ch.push_back(c);
            }
            if (s + 1 < S) {
                down_.emplace_back(params_, "down." + std::to_string(s) + ".downsample", c, c, 3, 2, rng);
                skip_ch.push_back(c);
            }
        }
        for (std::size_t m = 0; m < config_.bottleneck_blocks; ++m)
            mid_.emplace_back(params_, "mid.resnets." + std::to_string(m), c, c, emb, G, rng);
        for (std::size_t r = 1; r <= S; ++r) {
            const std::size_t s = S - r;
            for (std::size_t b = 1; b <= D; ++b) {
                const std::size_t sk = skip_ch.back();
                skip_ch.pop_back();
                const std::string name = "up." + std::to_string(r) + ".resnets." + std::to_string(b);
                dec_in_hidden_.push_back(c);
                dec_.emplace_back(params_, name, c + sk, ch[s], emb, G, rng);
                c = ch[s];
                if (b == D && has_attention(s))
                    dec_attn_.emplace_back(params_, "up." + std::to_string(r) + ".attention", c, G,
                                           config_.attention_heads, rng);
            }
            if (r < S) up_conv_.emplace_back(params_, "up." + std::to_string(r) + ".upsample", c, c, 3, 1, rng);
        }
        out_norm_ = nn::GroupNorm<T>(params_, "conv_norm_out", c, G);
        conv_out_ = nn::Conv2d<T>(params_, "conv_out", c, config_.in_channels, 3, 1, rng, /*zero_init=*/true);
    }

    DenoiserConfig config_;
    nn::ParamStore<T> params_;
    bool frozen_ = false;
    mutable std::atomic<std::size_t> forward_items_{0};

    nn::TimeEmbedding<T> time_embed_;
    nn::Silu<T> temb_act_{"time_embedding.act"};
    nn::Conv2d<T> conv_in_;
    std::vector<ResBlock<T>> enc_, mid_, dec_;
    std::vector<std::size_t> dec_in_hidden_;
    std::vector<nn::SelfAttention<T>> enc_attn_, dec_attn_;
    std::vector<nn::Conv2d<T>> down_, up_conv_;
    nn::UpNearest2<T> up_{"upsample"};
    nn::GroupNorm<T> out_norm_;
    nn::Silu<T> out_act_{"conv_act"};
    nn::Conv2d<T> conv_out_;
};

/// Closed-form parameter count for a config, traced without instantiating any tensors.
inline std::size_t analytic_param_count(const DenoiserConfig& c) {
    const auto conv = [](std::size_t i, std::size_t o, std::size_t k) { return o * i * k * k + o; };
    const auto norm = [](std::size_t ch) { return 2 * ch; };
    const auto linear = [](std::size_t i, std::size_t o) { return i * o + o; };
    const std::size_t emb = c.time_embed_dim;
    const auto resblock = [&](std::size_t i, std::size_t o) {
        return norm(i) + conv(i, o, 3) + linear(emb, o) + norm(o) + conv(o, o, 3) + (i != o ? conv(i, o, 1) : 0);
    };
    const auto attention = [&](std::size_t ch) { return norm(ch) + 4 * conv(ch, ch, 1); };
    const auto& ch = c.stage_channels;
    const std::size_t S = c.stages();
    const auto attn_at = [&](std::size_t s) { return c.attention_resolutions.count(c.image_size >> s) != 0; };

    std::size_t total = linear(ch[0], emb) + linear(emb, emb) + conv(c.in_channels, ch[0], 3);
    std::vector<std::size_t> skips{ch[0]};
    std::size_t cur = ch[0];
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t b = 0; b < c.encoder_blocks_per_stage; ++b) {
            total += resblock(cur, ch[s]);
            cur = ch[s];
            skips.push_back(cur);
        }
        if (attn_at(s)) total += attention(cur);
        if (s + 1 < S) {
            total += conv(cur, cur, 3);
            skips.push_back(cur);
        }
    }
    total += c.bottleneck_blocks * resblock(cur, cur);
    for (std::size_t r = 1; r <= S; ++r) {
        const std::size_t s = S - r;
        for (std::size_t b = 0; b < c.decoder_blocks_per_stage; ++b) {
            total += resblock(cur + skips.back(), ch[s]);
            skips.pop_back();
            cur = ch[s];
        }
        if (attn_at(s)) total += attention(cur);
        if (r < S) total += conv(cur, cur, 3);
    }
    total += norm(cur) + conv(cur, c.in_channels, 3);
    return total;
}

}  // namespace dprobe
