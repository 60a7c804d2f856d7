// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dprobe/checkpoint.hpp"
#include "dprobe/cluster.hpp"
#include "dprobe/data.hpp"
#include "dprobe/denoiser.hpp"
#include "dprobe/diffusion.hpp"
#include "dprobe/nn/optim.hpp"
#include "dprobe/schedule.hpp"

namespace dprobe {

struct TrainConfig {
    ScheduleKind schedule = ScheduleKind::cosine;
    int timesteps = 1000;
    double cosine_s = 0.008;
    WeightingPolicy weighting = WeightingPolicy::minsnr(5.0);
    SamplerKind t_sampler = SamplerKind::squared_cosine;
    int epochs = 250;
    std::size_t batch = 256;
    nn::AdamWOptions adamw;
    double warmup_frac = 0.05;
    double ema_decay = 0.999;
    std::uint64_t seed = 0;
    int save_interval = 0;             ///< 0: only best and last
    std::size_t frechet_samples = 0;   ///< 0 disables the per-epoch Fréchet diagnostic
    int frechet_steps = 100;
    std::size_t frechet_grid = 4;      ///< images are average-pooled to grid x grid descriptors
    int snr_bins = 20;
    bool verbose = true;

    NoiseSchedule build_schedule() const { return NoiseSchedule::build(schedule, timesteps, cosine_s); }

    void validate() const {
        if (timesteps < 2) throw ConfigError("train: timesteps must be >= 2");
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (batch < 1) throw ConfigError("train: batch must be >= 1");
        if (!(adamw.lr > 0)) throw ConfigError("train: lr must be positive");
        if (ema_decay < 0 || ema_decay >= 1) throw ConfigError("train: ema_decay must be in [0, 1)");
        if (warmup_frac < 0 || warmup_frac >= 1) throw ConfigError("train: warmup must be in [0, 1)");
        if (snr_bins < 1) throw ConfigError("train: snr_bins must be >= 1");
        if (frechet_samples && (frechet_steps < 1 || frechet_steps > timesteps))
            throw ConfigError("train: frechet_steps must be in [1, timesteps]");
        if (weighting.kind == WeightingKind::minsnr && !(weighting.gamma > 0))
            throw ConfigError("train: minsnr gamma must be positive");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"schedule", to_string(c.schedule)},
         {"timesteps", c.timesteps},
         {"cosine_s", c.cosine_s},
         {"weighting", to_string(c.weighting.kind)},
         {"gamma", c.weighting.gamma},
         {"t_sampler", to_string(c.t_sampler)},
         {"epochs", c.epochs},
         {"batch", c.batch},
         {"lr", c.adamw.lr},
         {"beta1", c.adamw.beta1},
         {"beta2", c.adamw.beta2},
         {"adam_eps", c.adamw.eps},
         {"weight_decay", c.adamw.weight_decay},
         {"grad_clip", c.adamw.grad_clip},
         {"warmup_frac", c.warmup_frac},
         {"ema_decay", c.ema_decay},
         {"seed", c.seed},
         {"save_interval", c.save_interval},
         {"frechet_samples", c.frechet_samples},
         {"frechet_steps", c.frechet_steps},
         {"frechet_grid", c.frechet_grid},
         {"snr_bins", c.snr_bins}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    const TrainConfig d;
    c.schedule = schedule_kind_from_string(j.value("schedule", to_string(d.schedule)));
    c.timesteps = j.value("timesteps", d.timesteps);
    c.cosine_s = j.value("cosine_s", d.cosine_s);
    const auto wk = weighting_kind_from_string(j.value("weighting", to_string(d.weighting.kind)));
    const double gamma = j.value("gamma", d.weighting.gamma);
    c.weighting = wk == WeightingKind::mse ? WeightingPolicy::mse() : WeightingPolicy::minsnr(gamma);
    c.t_sampler = sampler_kind_from_string(j.value("t_sampler", to_string(d.t_sampler)));
    c.epochs = j.value("epochs", d.epochs);
    c.batch = j.value("batch", d.batch);
    c.adamw.lr = j.value("lr", d.adamw.lr);
    c.adamw.beta1 = j.value("beta1", d.adamw.beta1);
    c.adamw.beta2 = j.value("beta2", d.adamw.beta2);
    c.adamw.eps = j.value("adam_eps", d.adamw.eps);
    c.adamw.weight_decay = j.value("weight_decay", d.adamw.weight_decay);
    c.adamw.grad_clip = j.value("grad_clip", d.adamw.grad_clip);
    c.warmup_frac = j.value("warmup_frac", d.warmup_frac);
    c.ema_decay = j.value("ema_decay", d.ema_decay);
    c.seed = j.value("seed", d.seed);
    c.save_interval = j.value("save_interval", d.save_interval);
    c.frechet_samples = j.value("frechet_samples", d.frechet_samples);
    c.frechet_steps = j.value("frechet_steps", d.frechet_steps);
    c.frechet_grid = j.value("frechet_grid", d.frechet_grid);
    c.snr_bins = j.value("snr_bins", d.snr_bins);
}

/// Equal-width bins over log SNR spanning the schedule's range.
struct SnrBins {
    std::vector<double> edges;  ///< bins + 1 ascending log-SNR edges

    SnrBins(const NoiseSchedule& s, int bins) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (int t = 1; t <= s.T(); ++t) {
            lo = std::min(lo, s.log_snr(t));
            hi = std::max(hi, s.log_snr(t));
        }
        edges.resize(static_cast<std::size_t>(bins) + 1);
        for (int i = 0; i <= bins; ++i) edges[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / bins;
    }

    std::size_t size() const { return edges.size() - 1; }

    std::size_t bin(double log_snr) const {
        const auto it = std::upper_bound(edges.begin() + 1, edges.end() - 1, log_snr);
        return static_cast<std::size_t>(it - (edges.begin() + 1));
    }

    std::string csv() const {
        std::string out = "bin,log_snr_lo,log_snr_hi,log_snr_center\n";
        char buf[128];
        for (std::size_t i = 0; i < size(); ++i) {
            std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g\n", i, edges[i], edges[i + 1],
                          0.5 * (edges[i] + edges[i + 1]));
            out += buf;
        }
        return out;
    }
};

/// Per-bin mean of unweighted per-item MSE.
struct BinAccumulator {
    std::vector<double> sum;
    std::vector<std::size_t> count;

    explicit BinAccumulator(std::size_t n = 0) : sum(n, 0.0), count(n, 0) {}
    void add(std::size_t bin, double v) {
        sum[bin] += v;
        ++count[bin];
    }
    std::vector<double> means() const {
        std::vector<double> m(sum.size(), std::numeric_limits<double>::quiet_NaN());
        for (std::size_t i = 0; i < sum.size(); ++i)
            if (count[i]) m[i] = sum[i] / static_cast<double>(count[i]);
        return m;
    }
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;       ///< EMA weights
    double val_loss_live = 0.0;  ///< live weights
    double lr = 0.0;
    std::vector<double> train_bins, val_bins, val_live_bins;
    std::optional<double> frechet;
    double seconds = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    double best_val_loss = 0.0;
    std::filesystem::path best_checkpoint, last_checkpoint;
    std::vector<std::filesystem::path> artifacts;
};

/// Average-pooled pixel descriptors: [N, 1, H, W] in [0, 1] -> N x grid^2.
inline features::FeatureMatrix pooled_pixels(const Tensor<float>& images, std::size_t grid) {
    const std::size_t N = images.dim(0), H = images.dim(2), W = images.dim(3);
    const std::size_t bh = std::max<std::size_t>(1, H / grid), bw = std::max<std::size_t>(1, W / grid);
    features::FeatureMatrix out(N, grid * grid);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t gy = 0; gy < grid; ++gy)
            for (std::size_t gx = 0; gx < grid; ++gx) {
                double s = 0.0;
                std::size_t c = 0;
                for (std::size_t y = gy * bh; y < std::min(H, (gy + 1) * bh); ++y)
                    for (std::size_t x = gx * bw; x < std::min(W, (gx + 1) * bw); ++x, ++c) s += images[(n * H + y) * W + x];
                out(n, gy * grid + gx) = static_cast<float>(c ? s / static_cast<double>(c) : 0.0);
            }
    return out;
}

inline std::string format_bins(const std::vector<double>& v) {
    std::string s;
    char buf[48];
    for (double x : v) {
        if (std::isnan(x))
            s += ",nan";
        else {
            std::snprintf(buf, sizeof buf, ",%.8g", x);
            s += buf;
        }
    }
    return s;
}

inline std::string loss_csv(const std::vector<EpochRecord>& h, int bins) {
    std::string out = "epoch,split,loss,lr";
    char buf[96];
    for (int i = 0; i < bins; ++i) {
        std::snprintf(buf, sizeof buf, ",snr_bin_%02d", i);
        out += buf;
    }
    out += "\n";
    for (const auto& r : h) {
        const auto row = [&](const char* split, double loss, const std::vector<double>& b) {
            std::snprintf(buf, sizeof buf, "%d,%s,%.8g,%.8g", r.epoch, split, loss, r.lr);
            out += buf;
            out += format_bins(b) + "\n";
        };
        row("train", r.train_loss, r.train_bins);
        row("val", r.val_loss, r.val_bins);
        row("val_live", r.val_loss_live, r.val_live_bins);
    }
    return out;
}

inline std::string curves_csv(const std::vector<EpochRecord>& h, int best_epoch) {
    std::string out = "epoch,train_loss,val_loss,val_loss_live,frechet,lr,best\n";
    char buf[256], fr[48];
    for (const auto& r : h) {
        if (r.frechet)
            std::snprintf(fr, sizeof fr, "%.8g", *r.frechet);
        else
            std::snprintf(fr, sizeof fr, "nan");
        std::snprintf(buf, sizeof buf, "%d,%.8g,%.8g,%.8g,%s,%.8g,%d\n", r.epoch, r.train_loss, r.val_loss,
                      r.val_loss_live, fr, r.lr, r.epoch == best_epoch ? 1 : 0);
        out += buf;
    }
    return out;
}

namespace detail {

struct ValidationPass {
    double loss = 0.0;
    std::vector<double> bins;
};

/// Fixed (t, eps) per validation item, keyed by item id, so epochs are comparable. t is uniform.
inline ValidationPass validation_loss(const UNet<float>& net, const nn::ParamStore<float>& ps,
                                      const NoiseSchedule& schedule, const TrainConfig& cfg, const SnrBins& bins,
                                      const data::LabeledImageSet& val) {
    ValidationPass out;
    BinAccumulator acc(bins.size());
    const std::size_t B = cfg.batch, per = val.pixels_per_image();
    double total = 0.0;
    for (std::size_t start = 0; start < val.size(); start += B) {
        const std::size_t n = std::min(B, val.size() - start);
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), start);
        const auto x0 = to_model_domain(val.batch<float>(idx));
        std::vector<int> ts(n);
        Tensor<float> eps(x0.shape());
        std::vector<double> w(n);
        for (std::size_t k = 0; k < n; ++k) {
            Rng rng(cfg.seed, "val", static_cast<std::uint64_t>(val.ids[start + k]));
            ts[k] = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(schedule.T())));
            for (std::size_t p = 0; p < per; ++p) eps[k * per + p] = static_cast<float>(rng.normal());
            w[k] = weight(cfg.weighting, schedule, ts[k]);
        }
        const auto nb = corrupt(schedule, x0, ts, eps);
        const auto eps_hat = net.predict_noise(ps, nb.xt, nb.t);
        const auto l = weighted_noise_loss(nb.eps, eps_hat, w);
        total += l.loss * static_cast<double>(n);
        for (std::size_t k = 0; k < n; ++k) acc.add(bins.bin(schedule.log_snr(ts[k])), l.per_item_mse[k]);
    }
    out.loss = val.size() ? total / static_cast<double>(val.size()) : std::numeric_limits<double>::quiet_NaN();
    out.bins = acc.means();
    return out;
}

}  // namespace detail

/// Trains `net` in place on unlabeled `train` images. Writes loss.csv, curves.csv, snr_bins.csv and
/// checkpoints (best.dprb by EMA validation loss, last.dprb, optional epoch_XXXX.dprb) into out_dir.
inline TrainResult train_loop(UNet<float>& net, const TrainConfig& cfg, const data::LabeledImageSet& train,
                              const data::LabeledImageSet& val, const std::filesystem::path& out_dir,
                              const nlohmann::json& config_snapshot = nlohmann::json::object()) {
    cfg.validate();
    if (net.frozen()) throw ContractError("train_loop: denoiser is frozen");
    if (train.size() == 0) throw DataError("train_loop: empty training split");
    if (train.height != net.config().image_size) throw ShapeError("train_loop: image size does not match denoiser");
    const NoiseSchedule schedule = cfg.build_schedule();
    if (schedule.T() != net.config().timesteps) throw ConfigError("train_loop: schedule T differs from denoiser timesteps");
    const TimestepSampler sampler(cfg.t_sampler, cfg.timesteps, cfg.cosine_s);
    const SnrBins bins(schedule, cfg.snr_bins);
    auto& ps = net.params();
    const std::size_t per = train.pixels_per_image();
    const long long steps_per_epoch = static_cast<long long>((train.size() + cfg.batch - 1) / cfg.batch);
    const long long total_steps = steps_per_epoch * cfg.epochs;
    long long step = 0;

    std::optional<features::FeatureMatrix> val_pixels;
    if (cfg.frechet_samples && val.size()) {
        std::vector<std::size_t> all(val.size());
        std::iota(all.begin(), all.end(), 0);
        val_pixels = pooled_pixels(val.batch<float>(all), cfg.frechet_grid);
    }

    TrainResult result;
    result.best_val_loss = std::numeric_limits<double>::infinity();
    std::filesystem::create_directories(out_dir);
    const auto save = [&](const std::filesystem::path& p, const EpochRecord& r) {
        CheckpointMeta meta;
        meta.training = config_snapshot.empty() ? nlohmann::json(cfg) : config_snapshot;
        meta.extra = {{"epoch", r.epoch}, {"step", step}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}};
        save_checkpoint(p, net, meta);
    };

    std::vector<std::size_t> order(train.size());
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), 0);
        {
            Rng rng(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
            std::shuffle(order.begin(), order.end(), rng.engine());
        }
        EpochRecord rec;
        rec.epoch = epoch;
        BinAccumulator train_acc(bins.size());
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t n = std::min(cfg.batch, order.size() - start);
            const std::span<const std::size_t> idx(order.data() + start, n);
            const auto x0 = to_model_domain(train.batch<float>(idx));
            Rng rng(cfg.seed, "step", static_cast<std::uint64_t>(step));
            std::vector<int> ts(n);
            std::vector<double> w(n);
            for (std::size_t k = 0; k < n; ++k) {
                ts[k] = sampler.sample(rng);
                w[k] = weight(cfg.weighting, schedule, ts[k]);
            }
            Tensor<float> eps(x0.shape());
            for (std::size_t i = 0; i < n * per; ++i) eps[i] = static_cast<float>(rng.normal());
            const auto nb = corrupt(schedule, x0, ts, eps);

            UNetTape<float> tape;
            const auto eps_hat = net.forward(ps, nb.xt, nb.t, {}, nullptr, &tape);
            const auto loss = weighted_noise_loss(nb.eps, eps_hat, w);
            if (!std::isfinite(loss.loss)) {
                float max_act = 0.0f;
                for (float v : eps_hat.values()) max_act = std::max(max_act, std::abs(v));
                std::string tl;
                for (int t : ts) tl += (tl.empty() ? "" : ",") + std::to_string(t);
                throw NumericError("non-finite training loss at step " + std::to_string(step) + " (t = " + tl +
                                   "; max |eps_hat| = " + std::to_string(max_act) + ")");
            }
            ps.zero_grad();
            net.backward(tape, loss.grad, ps);
            nn::AdamWOptions opt = cfg.adamw;
            opt.lr = nn::cosine_lr(step, total_steps, cfg.adamw.lr, cfg.warmup_frac);
            rec.lr = opt.lr;
            nn::adamw_step(ps, opt);
            // warm-started decay: short runs are not dominated by the initialization
            const double decay = std::min(cfg.ema_decay, (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step)));
            nn::ema_update(ps, decay);
            ++step;
            loss_sum += loss.loss * static_cast<double>(n);
            for (std::size_t k = 0; k < n; ++k) train_acc.add(bins.bin(schedule.log_snr(ts[k])), loss.per_item_mse[k]);
        }
        rec.train_loss = loss_sum / static_cast<double>(train.size());
        rec.train_bins = train_acc.means();

        if (val.size()) {
            const auto ema = ps.ema_view();
            const auto v_ema = detail::validation_loss(net, ema, schedule, cfg, bins, val);
            const auto v_live = detail::validation_loss(net, ps, schedule, cfg, bins, val);
            rec.val_loss = v_ema.loss;
            rec.val_bins = v_ema.bins;
            rec.val_loss_live = v_live.loss;
            rec.val_live_bins = v_live.bins;
            if (val_pixels) {
                NoisePredictor<float> model = [&](const Tensor<float>& x, std::span<const int> ts) {
                    return net.predict_noise(ema, x, ts);
                };
                Rng rng(cfg.seed, "frechet");
                const auto samples = ddim_sample(model, schedule, cfg.frechet_samples,
                                                 {1, train.height, train.width}, cfg.frechet_steps, 0.0, rng);
                rec.frechet = cluster::frechet_diagnostic(pooled_pixels(samples, cfg.frechet_grid), *val_pixels);
            }
        } else {
            rec.val_loss = rec.val_loss_live = std::numeric_limits<double>::quiet_NaN();
            rec.val_bins.assign(bins.size(), std::numeric_limits<double>::quiet_NaN());
            rec.val_live_bins = rec.val_bins;
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(rec);

        const bool improved = val.size() ? rec.val_loss < result.best_val_loss : epoch == cfg.epochs;
        if (improved) {
            result.best_val_loss = rec.val_loss;
            result.best_epoch = epoch;
            result.best_checkpoint = out_dir / "best.dprb";
            save(result.best_checkpoint, rec);
        }
        if (cfg.save_interval > 0 && epoch % cfg.save_interval == 0) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%04d.dprb", epoch);
            save(out_dir / name, rec);
            result.artifacts.push_back(out_dir / name);
        }
        if (cfg.verbose)
            std::clog << "epoch " << epoch << "/" << cfg.epochs << " train " << rec.train_loss << " val " << rec.val_loss
                      << " val_live " << rec.val_loss_live << (rec.frechet ? " frechet " + std::to_string(*rec.frechet) : "")
                      << " (" << rec.seconds << " s)" << std::endl;
    }
    result.last_checkpoint = out_dir / "last.dprb";
    save(result.last_checkpoint, result.history.back());
    io::write_file(out_dir / "loss.csv", loss_csv(result.history, cfg.snr_bins));
    io::write_file(out_dir / "curves.csv", curves_csv(result.history, result.best_epoch));
    io::write_file(out_dir / "snr_bins.csv", bins.csv());
    for (const char* f : {"best.dprb", "last.dprb", "loss.csv", "curves.csv", "snr_bins.csv"})
        result.artifacts.push_back(out_dir / f);
    return result;
}

}  // namespace dprobe
