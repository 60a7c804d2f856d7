// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "dprobe/error.hpp"
#include "dprobe/features.hpp"
#include "dprobe/rng.hpp"

namespace dprobe::probe {

using features::FeatureMatrix;

/// Rows scaled to unit L2 norm; zero rows stay zero.
inline FeatureMatrix l2_normalize(const FeatureMatrix& x) {
    FeatureMatrix out = x;
    for (std::size_t i = 0; i < x.rows; ++i) {
        auto r = out.row(i);
        double s = 0.0;
        for (float v : r) s += static_cast<double>(v) * v;
        if (s == 0.0) continue;
        const double inv = 1.0 / std::sqrt(s);
        for (auto& v : r) v = static_cast<float>(v * inv);
    }
    return out;
}

/// Adam with decoupled weight decay over a softmax-linear classifier.
struct ProbeHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 5e-4;
    int epochs = 10;
    std::size_t batch = 512;
    bool normalize = true;
    bool precondition = true;  ///< optimize in per-column standardized coordinates, folded back after fitting
    std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const ProbeHyper& h) {
    j = {{"lr", h.lr},         {"beta1", h.beta1},   {"beta2", h.beta2}, {"eps", h.eps},
         {"weight_decay", h.weight_decay}, {"epochs", h.epochs}, {"batch", h.batch}, {"normalize", h.normalize},
         {"precondition", h.precondition}, {"seed", h.seed}};
}

inline void from_json(const nlohmann::json& j, ProbeHyper& h) {
    const ProbeHyper d;
    h.lr = j.value("lr", d.lr);
    h.beta1 = j.value("beta1", d.beta1);
    h.beta2 = j.value("beta2", d.beta2);
    h.eps = j.value("eps", d.eps);
    h.weight_decay = j.value("weight_decay", d.weight_decay);
    h.epochs = j.value("epochs", d.epochs);
    h.batch = j.value("batch", d.batch);
    h.normalize = j.value("normalize", d.normalize);
    h.precondition = j.value("precondition", d.precondition);
    h.seed = j.value("seed", d.seed);
}

struct LinearProbe {
    std::size_t classes = 0;
    std::size_t dim = 0;
    std::vector<double> W;  ///< classes x dim
    std::vector<double> b;
    bool normalize = true;
    int t = 0;
    int ell = 0;

    std::vector<double> logits(std::span<const float> x) const {
        std::vector<double> z(b);
        for (std::size_t k = 0; k < classes; ++k) {
            const double* w = W.data() + k * dim;
            double s = 0.0;
            for (std::size_t j = 0; j < dim; ++j) s += w[j] * x[j];
            z[k] += s;
        }
        return z;
    }

    std::vector<int> predict(const FeatureMatrix& x) const {
        if (x.cols != dim) throw ShapeError("probe expects " + std::to_string(dim) + " features, got " + std::to_string(x.cols));
        const FeatureMatrix xn = normalize ? l2_normalize(x) : x;
        std::vector<int> out(x.rows);
        for (std::size_t i = 0; i < x.rows; ++i) {
            const auto z = logits(xn.row(i));
            out[i] = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
        }
        return out;
    }
};

/// Minimizes mean cross-entropy with seeded minibatch shuffling. Every class in [0, classes)
/// must occur in the training labels.
inline LinearProbe fit_probe(const FeatureMatrix& x, std::span<const int> y, std::size_t classes, const ProbeHyper& h,
                             const std::vector<std::string>& class_names = {}) {
    if (x.rows != y.size()) throw ShapeError("fit_probe: feature rows do not match label count");
    if (x.rows == 0) throw DataError("fit_probe: empty training set");
    std::vector<std::size_t> counts(classes, 0);
    for (int l : y) {
        if (l < 0 || static_cast<std::size_t>(l) >= classes) throw DataError("fit_probe: label " + std::to_string(l) + " out of range");
        ++counts[static_cast<std::size_t>(l)];
    }
    for (std::size_t k = 0; k < classes; ++k)
        if (counts[k] == 0)
            throw DataError("fit_probe: class " + (k < class_names.size() ? "'" + class_names[k] + "'" : std::to_string(k)) +
                            " absent from the training split");

    LinearProbe p;
    p.classes = classes;
    p.dim = x.cols;
    p.normalize = h.normalize;
    p.W.assign(classes * x.cols, 0.0);
    p.b.assign(classes, 0.0);
    FeatureMatrix xn = h.normalize ? l2_normalize(x) : x;
    // The probe is affine, so fitting on standardized columns spans the same classifiers.
    std::vector<double> mu(x.cols, 0.0), sd(x.cols, 1.0);
    if (h.precondition) {
        for (std::size_t j = 0; j < x.cols; ++j) {
            double s = 0.0, q = 0.0;
            for (std::size_t i = 0; i < x.rows; ++i) s += xn(i, j);
            mu[j] = s / static_cast<double>(x.rows);
            for (std::size_t i = 0; i < x.rows; ++i) q += (xn(i, j) - mu[j]) * (xn(i, j) - mu[j]);
            const double v = std::sqrt(q / static_cast<double>(x.rows));
            sd[j] = v > 1e-12 ? v : 1.0;
        }
        for (std::size_t i = 0; i < x.rows; ++i)
            for (std::size_t j = 0; j < x.cols; ++j)
                xn(i, j) = static_cast<float>((xn(i, j) - mu[j]) / sd[j]);
    }
    const std::size_t P = p.W.size() + p.b.size();
    std::vector<double> m(P, 0.0), v(P, 0.0), g(P, 0.0);
    std::vector<std::size_t> order(x.rows);
    std::iota(order.begin(), order.end(), 0);
    const std::size_t B = std::max<std::size_t>(1, h.batch);
    long long step = 0;
    std::vector<double> prob(classes);
    for (int epoch = 0; epoch < h.epochs; ++epoch) {
        Rng rng(h.seed, "probe-shuffle", static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), rng.engine());
        for (std::size_t start = 0; start < order.size(); start += B) {
            const std::size_t n = std::min(B, order.size() - start);
            std::fill(g.begin(), g.end(), 0.0);
            for (std::size_t q = start; q < start + n; ++q) {
                const auto row = xn.row(order[q]);
                const auto z = p.logits(row);
                const double zmax = *std::max_element(z.begin(), z.end());
                double s = 0.0;
                for (std::size_t k = 0; k < classes; ++k) s += (prob[k] = std::exp(z[k] - zmax));
                for (std::size_t k = 0; k < classes; ++k) {
                    const double d = (prob[k] / s - (static_cast<int>(k) == y[order[q]] ? 1.0 : 0.0)) / static_cast<double>(n);
                    double* gw = g.data() + k * p.dim;
                    for (std::size_t j = 0; j < p.dim; ++j) gw[j] += d * row[j];
                    g[p.W.size() + k] += d;
                }
            }
            ++step;
            const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
            for (std::size_t i = 0; i < P; ++i) {
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
                double& w = i < p.W.size() ? p.W[i] : p.b[i - p.W.size()];
                w -= h.lr * h.weight_decay * w;
                w -= h.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + h.eps);
            }
        }
    }
    if (h.precondition)
        for (std::size_t k = 0; k < classes; ++k)
            for (std::size_t j = 0; j < p.dim; ++j) {
                double& w = p.W[k * p.dim + j];
                w /= sd[j];
                p.b[k] -= w * mu[j];
            }
    for (double w : p.W)
        if (!std::isfinite(w)) throw NumericError("fit_probe: non-finite weights");
    return p;
}

struct ClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

struct Metrics {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::vector<ClassScores> per_class;
};

/// Accuracy and macro F1 over classes present in truth or prediction. Zero denominators give 0.
inline Metrics score(std::span<const int> truth, std::span<const int> pred, std::size_t classes) {
    if (truth.empty()) throw DataError("evaluate: empty evaluation set");
    if (truth.size() != pred.size()) throw ShapeError("evaluate: prediction count mismatch");
    std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const auto a = static_cast<std::size_t>(truth[i]), p = static_cast<std::size_t>(pred[i]);
        if (a >= classes || p >= classes) throw DataError("evaluate: label out of range");
        if (a == p) {
            ++tp[a];
            ++correct;
        } else {
            ++fp[p];
            ++fn[a];
        }
    }
    Metrics m;
    m.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
    m.per_class.resize(classes);
    double f1_sum = 0.0;
    std::size_t present = 0;
    for (std::size_t k = 0; k < classes; ++k) {
        auto& c = m.per_class[k];
        c.support = tp[k] + fn[k];
        c.precision = tp[k] + fp[k] ? static_cast<double>(tp[k]) / static_cast<double>(tp[k] + fp[k]) : 0.0;
        c.recall = c.support ? static_cast<double>(tp[k]) / static_cast<double>(c.support) : 0.0;
        c.f1 = c.precision + c.recall > 0 ? 2 * c.precision * c.recall / (c.precision + c.recall) : 0.0;
        if (tp[k] + fp[k] + fn[k] > 0) {
            f1_sum += c.f1;
            ++present;
        }
    }
    m.macro_f1 = present ? f1_sum / static_cast<double>(present) : 0.0;
    return m;
}

inline Metrics evaluate(const LinearProbe& p, const FeatureMatrix& x, std::span<const int> y) {
    if (y.empty()) throw DataError("evaluate: empty evaluation set");
    const auto pred = p.predict(x);
    return score(y, pred, p.classes);
}

// ---------------------------------------------------------------------------
// Sweep over the (t, ell) grid.

struct SplitFeatures {
    const features::FeatureGrid* grid = nullptr;
    std::vector<int> labels;
};

struct CellResult {
    int t = 0;
    int ell = 0;
    ReadoutId readout;
    Metrics val;
    std::optional<Metrics> test;
};

struct SweepResult {
    std::vector<CellResult> cells;  ///< ordered by (t, ell)
    int t_star = 0;
    int ell_star = 0;
    double val_acc = 0.0;
    double test_acc = 0.0;
    double test_macro_f1 = 0.0;
};

struct SweepOptions {
    ProbeHyper hyper;
    std::size_t classes = 0;
    bool test_full_grid = true;  ///< otherwise test metrics only at the selected cell
    std::size_t workers = 1;
    std::vector<std::string> class_names;
};

/// Fits one probe per cell on train, scores validation, selects argmax validation accuracy with
/// ties going to the smallest t, then the smallest ell.
inline SweepResult sweep(const SplitFeatures& train, const SplitFeatures& val, const SplitFeatures& test,
                         const SweepOptions& opt) {
    std::vector<features::CellKey> keys;
    for (int t : train.grid->timesteps)
        for (int ell : train.grid->readouts) keys.emplace_back(t, ell);
    std::sort(keys.begin(), keys.end());
    if (keys.empty()) throw DataError("sweep: empty grid");
    std::vector<CellResult> results(keys.size());
    std::vector<LinearProbe> probes(keys.size());
    const auto fit = [&](std::size_t i) {
        const auto [t, ell] = keys[i];
        ProbeHyper h = opt.hyper;
        h.seed = derive_seed(opt.hyper.seed, "probe", static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(ell));
        probes[i] = fit_probe(train.grid->at(t, ell), train.labels, opt.classes, h, opt.class_names);
        probes[i].t = t;
        probes[i].ell = ell;
        auto& r = results[i];
        r.t = t;
        r.ell = ell;
        r.readout = train.grid->info(ell).id;
        r.val = evaluate(probes[i], val.grid->at(t, ell), val.labels);
        if (opt.test_full_grid) r.test = evaluate(probes[i], test.grid->at(t, ell), test.labels);
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(opt.workers, keys.size()));
    if (workers == 1) {
        for (std::size_t i = 0; i < keys.size(); ++i) fit(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(workers);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i; (i = next++) < keys.size();) fit(i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < results.size(); ++i)
        if (results[i].val.accuracy > results[best].val.accuracy) best = i;  // keys sorted: first max wins
    SweepResult out;
    out.t_star = results[best].t;
    out.ell_star = results[best].ell;
    out.val_acc = results[best].val.accuracy;
    if (!results[best].test)
        results[best].test = evaluate(probes[best], test.grid->at(out.t_star, out.ell_star), test.labels);
    out.test_acc = results[best].test->accuracy;
    out.test_macro_f1 = results[best].test->macro_f1;
    out.cells = std::move(results);
    return out;
}

inline std::string sweep_csv(const SweepResult& s) {
    std::string out = "resolution,block,ell,t,split,accuracy,macro_f1\n";
    char buf[160];
    for (const auto& c : s.cells) {
        std::snprintf(buf, sizeof buf, "%d,%d,%d,%d,val,%.6f,%.6f\n", c.readout.r, c.readout.b, c.ell, c.t,
                      c.val.accuracy, c.val.macro_f1);
        out += buf;
        if (c.test) {
            std::snprintf(buf, sizeof buf, "%d,%d,%d,%d,test,%.6f,%.6f\n", c.readout.r, c.readout.b, c.ell, c.t,
                          c.test->accuracy, c.test->macro_f1);
            out += buf;
        }
    }
    return out;
}

inline nlohmann::json selection_json(const SweepResult& s) {
    return {{"t_star", s.t_star},
            {"ell_star", s.ell_star},
            {"val_acc", s.val_acc},
            {"test_acc", s.test_acc},
            {"test_macro_f1", s.test_macro_f1}};
}

}  // namespace dprobe::probe
