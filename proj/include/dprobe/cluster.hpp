// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "dprobe/error.hpp"
#include "dprobe/features.hpp"
#include "dprobe/rng.hpp"
#include "dprobe/tensor.hpp"

namespace dprobe::cluster {

using features::FeatureMatrix;

struct KMeansOptions {
    std::size_t k = 8;
    std::size_t restarts = 5;
    std::size_t max_iter = 300;
    double tol = 1e-4;
    std::uint64_t seed = 0;
};

struct KMeansRun {
    std::vector<int> assignments;
    std::vector<double> centroids;  ///< k x C
    double inertia = 0.0;
    std::vector<double> inertia_history;  ///< after every assignment step
    std::size_t iterations = 0;
};

struct KMeansResult {
    std::size_t k = 0;
    std::size_t dim = 0;
    KMeansRun best;
    std::vector<double> restart_inertia;
    std::size_t best_restart = 0;
};

namespace detail {

inline double sqdist(const float* x, const double* c, std::size_t d) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double diff = x[j] - c[j];
        s += diff * diff;
    }
    return s;
}

/// Greedy distance-weighted seeding: each new centre is the best of 2 + ln k candidates
/// drawn proportionally to the squared distance to the current centres.
inline std::vector<double> seed_centroids(const FeatureMatrix& X, std::size_t k, Rng& rng) {
    const std::size_t n = X.rows, d = X.cols;
    std::vector<double> c(k * d);
    const auto set_centre = [&](std::size_t slot, std::size_t i) {
        for (std::size_t j = 0; j < d; ++j) c[slot * d + j] = X(i, j);
    };
    set_centre(0, rng.index(n));
    std::vector<double> dist(n);
    for (std::size_t i = 0; i < n; ++i) dist[i] = sqdist(X.row(i).data(), c.data(), d);
    const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
    for (std::size_t s = 1; s < k; ++s) {
        const double total = std::accumulate(dist.begin(), dist.end(), 0.0);
        std::size_t best_i = 0;
        double best_pot = std::numeric_limits<double>::infinity();
        for (std::size_t q = 0; q < trials; ++q) {
            std::size_t cand = 0;
            if (total > 0) {
                double u = rng.uniform() * total, acc = 0.0;
                cand = n - 1;
                for (std::size_t i = 0; i < n; ++i) {
                    acc += dist[i];
                    if (acc > u) {
                        cand = i;
                        break;
                    }
                }
            } else {
                cand = rng.index(n);
            }
            double pot = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double dd = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double diff = static_cast<double>(X(i, j)) - X(cand, j);
                    dd += diff * diff;
                }
                pot += std::min(dist[i], dd);
            }
            if (pot < best_pot) {
                best_pot = pot;
                best_i = cand;
            }
        }
        set_centre(s, best_i);
        for (std::size_t i = 0; i < n; ++i) dist[i] = std::min(dist[i], sqdist(X.row(i).data(), c.data() + s * d, d));
    }
    return c;
}

inline double assign(const FeatureMatrix& X, const std::vector<double>& c, std::size_t k, std::vector<int>& a,
                     std::vector<double>& dist) {
    double inertia = 0.0;
    for (std::size_t i = 0; i < X.rows; ++i) {
        double best = std::numeric_limits<double>::infinity();
        int arg = 0;
        for (std::size_t q = 0; q < k; ++q) {
            const double dd = sqdist(X.row(i).data(), c.data() + q * X.cols, X.cols);
            if (dd < best) {
                best = dd;
                arg = static_cast<int>(q);
            }
        }
        a[i] = arg;
        dist[i] = best;
        inertia += best;
    }
    return inertia;
}

inline KMeansRun lloyd(const FeatureMatrix& X, std::size_t k, const KMeansOptions& opt, Rng& rng) {
    const std::size_t n = X.rows, d = X.cols;
    double mean_var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        double m = 0.0, s = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += X(i, j);
        m /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) s += (X(i, j) - m) * (X(i, j) - m);
        mean_var += s / static_cast<double>(n);
    }
    mean_var /= static_cast<double>(std::max<std::size_t>(d, 1));
    const double tol = opt.tol * mean_var;

    KMeansRun run;
    run.centroids = seed_centroids(X, k, rng);
    run.assignments.assign(n, 0);
    std::vector<double> dist(n);
    run.inertia = assign(X, run.centroids, k, run.assignments, dist);
    run.inertia_history.push_back(run.inertia);
    for (std::size_t it = 0; it < opt.max_iter; ++it) {
        run.iterations = it + 1;
        std::vector<double> next(k * d, 0.0);
        std::vector<std::size_t> count(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto q = static_cast<std::size_t>(run.assignments[i]);
            ++count[q];
            for (std::size_t j = 0; j < d; ++j) next[q * d + j] += X(i, j);
        }
        std::vector<bool> taken(n, false);
        for (std::size_t q = 0; q < k; ++q) {
            if (count[q]) {
                for (std::size_t j = 0; j < d; ++j) next[q * d + j] /= static_cast<double>(count[q]);
                continue;
            }
            // empty cluster: move it onto the point farthest from its centre
            std::size_t far = 0;
            double fd = -1.0;
            for (std::size_t i = 0; i < n; ++i)
                if (!taken[i] && dist[i] > fd) {
                    fd = dist[i];
                    far = i;
                }
            taken[far] = true;
            for (std::size_t j = 0; j < d; ++j) next[q * d + j] = X(far, j);
        }
        double shift = 0.0;
        for (std::size_t i = 0; i < next.size(); ++i) shift += (next[i] - run.centroids[i]) * (next[i] - run.centroids[i]);
        run.centroids = std::move(next);
        run.inertia = assign(X, run.centroids, k, run.assignments, dist);
        run.inertia_history.push_back(run.inertia);
        if (shift <= tol) break;
    }
    return run;
}

}  // namespace detail

/// Lloyd's algorithm with greedy seeding; the restart with the lowest inertia is kept.
inline KMeansResult kmeans(const FeatureMatrix& X, const KMeansOptions& opt) {
    if (opt.k == 0) throw ConfigError("kmeans: k must be positive");
    if (opt.k > X.rows)
        throw ConfigError("kmeans: k=" + std::to_string(opt.k) + " exceeds " + std::to_string(X.rows) + " points");
    KMeansResult out;
    out.k = opt.k;
    out.dim = X.cols;
    for (std::size_t r = 0; r < std::max<std::size_t>(1, opt.restarts); ++r) {
        Rng rng(opt.seed, "kmeans", r);
        auto run = detail::lloyd(X, opt.k, opt, rng);
        out.restart_inertia.push_back(run.inertia);
        if (r == 0 || run.inertia < out.best.inertia) {
            out.best = std::move(run);
            out.best_restart = r;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Partition agreement metrics.

struct Contingency {
    std::vector<int> row_ids;  ///< distinct cluster ids
    std::vector<int> col_ids;  ///< distinct labels
    std::vector<std::vector<double>> counts;
    std::vector<double> row_sums, col_sums;
    double n = 0;
};

inline Contingency contingency(std::span<const int> clusters, std::span<const int> labels) {
    if (clusters.size() != labels.size()) throw ShapeError("contingency: length mismatch");
    Contingency c;
    std::map<int, std::size_t> ri, ci;
    for (int a : clusters) ri.emplace(a, 0);
    for (int l : labels) ci.emplace(l, 0);
    for (auto& [id, idx] : ri) {
        idx = c.row_ids.size();
        c.row_ids.push_back(id);
    }
    for (auto& [id, idx] : ci) {
        idx = c.col_ids.size();
        c.col_ids.push_back(id);
    }
    c.counts.assign(c.row_ids.size(), std::vector<double>(c.col_ids.size(), 0.0));
    for (std::size_t i = 0; i < clusters.size(); ++i) c.counts[ri[clusters[i]]][ci[labels[i]]] += 1.0;
    c.row_sums.assign(c.row_ids.size(), 0.0);
    c.col_sums.assign(c.col_ids.size(), 0.0);
    for (std::size_t r = 0; r < c.row_ids.size(); ++r)
        for (std::size_t q = 0; q < c.col_ids.size(); ++q) {
            c.row_sums[r] += c.counts[r][q];
            c.col_sums[q] += c.counts[r][q];
        }
    c.n = static_cast<double>(clusters.size());
    return c;
}

namespace detail {

inline double entropy(const std::vector<double>& sums, double n) {
    double h = 0.0;
    for (double s : sums)
        if (s > 0) h -= (s / n) * std::log(s / n);
    return h;
}

inline double mutual_information(const Contingency& c) {
    double mi = 0.0;
    for (std::size_t r = 0; r < c.row_ids.size(); ++r)
        for (std::size_t q = 0; q < c.col_ids.size(); ++q) {
            const double v = c.counts[r][q];
            if (v > 0) mi += (v / c.n) * std::log(v * c.n / (c.row_sums[r] * c.col_sums[q]));
        }
    return std::max(0.0, mi);
}

inline double comb2(double x) { return x * (x - 1) / 2; }

}  // namespace detail

/// NMI with arithmetic-mean normalization; two single-block partitions score 1.
inline double nmi(std::span<const int> clusters, std::span<const int> labels) {
    const auto c = contingency(clusters, labels);
    const double hu = detail::entropy(c.row_sums, c.n), hv = detail::entropy(c.col_sums, c.n);
    if (hu == 0.0 && hv == 0.0) return 1.0;
    const double denom = 0.5 * (hu + hv);
    return std::clamp(detail::mutual_information(c) / denom, 0.0, 1.0);
}

inline double ari(std::span<const int> clusters, std::span<const int> labels) {
    const auto c = contingency(clusters, labels);
    double index = 0.0, a = 0.0, b = 0.0;
    for (const auto& row : c.counts)
        for (double v : row) index += detail::comb2(v);
    for (double s : c.row_sums) a += detail::comb2(s);
    for (double s : c.col_sums) b += detail::comb2(s);
    const double total = detail::comb2(c.n);
    if (total == 0.0) return 1.0;
    const double expected = a * b / total, max_index = 0.5 * (a + b);
    if (max_index == expected) return 1.0;
    return (index - expected) / (max_index - expected);
}

inline double purity(std::span<const int> clusters, std::span<const int> labels) {
    const auto c = contingency(clusters, labels);
    if (c.n == 0) throw DataError("purity: empty input");
    double s = 0.0;
    for (const auto& row : c.counts) s += *std::max_element(row.begin(), row.end());
    return s / c.n;
}

struct VMeasure {
    double homogeneity = 0.0;
    double completeness = 0.0;
    double v = 0.0;
};

inline VMeasure v_measure(std::span<const int> clusters, std::span<const int> labels) {
    const auto c = contingency(clusters, labels);
    const double hk = detail::entropy(c.row_sums, c.n), hc = detail::entropy(c.col_sums, c.n);
    const double mi = detail::mutual_information(c);
    VMeasure m;
    m.homogeneity = hc == 0.0 ? 1.0 : mi / hc;
    m.completeness = hk == 0.0 ? 1.0 : mi / hk;
    const double s = m.homogeneity + m.completeness;
    m.v = s == 0.0 ? 0.0 : 2.0 * m.homogeneity * m.completeness / s;
    return m;
}

/// Mean silhouette with Euclidean distance. Points in singleton clusters score 0; a single
/// cluster scores 0 overall. `max_points` > 0 evaluates a seeded subsample of that size.
inline double silhouette(const FeatureMatrix& X, std::span<const int> clusters, std::size_t max_points = 0,
                         std::uint64_t seed = 0) {
    if (X.rows != clusters.size()) throw ShapeError("silhouette: length mismatch");
    std::vector<std::size_t> idx(X.rows);
    std::iota(idx.begin(), idx.end(), 0);
    if (max_points && idx.size() > max_points) {
        Rng rng(seed, "silhouette");
        std::shuffle(idx.begin(), idx.end(), rng.engine());
        idx.resize(max_points);
        std::sort(idx.begin(), idx.end());
    }
    std::map<int, std::size_t> ids;
    for (auto i : idx) ids.emplace(clusters[i], 0);
    if (ids.size() < 2) return 0.0;
    std::size_t next = 0;
    for (auto& [id, slot] : ids) slot = next++;
    std::vector<std::size_t> size(ids.size(), 0);
    for (auto i : idx) ++size[ids[clusters[i]]];
    double total = 0.0;
    std::vector<double> sum(ids.size());
    for (auto i : idx) {
        std::fill(sum.begin(), sum.end(), 0.0);
        for (auto j : idx) {
            if (i == j) continue;
            double d = 0.0;
            for (std::size_t q = 0; q < X.cols; ++q) {
                const double diff = static_cast<double>(X(i, q)) - X(j, q);
                d += diff * diff;
            }
            sum[ids[clusters[j]]] += std::sqrt(d);
        }
        const std::size_t own = ids[clusters[i]];
        if (size[own] <= 1) continue;
        const double a = sum[own] / static_cast<double>(size[own] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t q = 0; q < sum.size(); ++q)
            if (q != own) b = std::min(b, sum[q] / static_cast<double>(size[q]));
        const double m = std::max(a, b);
        total += m > 0 ? (b - a) / m : 0.0;
    }
    return total / static_cast<double>(idx.size());
}

// ---------------------------------------------------------------------------
// Assignment.

struct Assignment {
    std::vector<int> row_to_col;
    double total = 0.0;
};

/// Minimum-cost perfect matching on a square matrix (shortest augmenting paths with potentials).
inline Assignment hungarian(const std::vector<std::vector<double>>& cost) {
    const std::size_t n = cost.size();
    for (const auto& row : cost) {
        if (row.size() != n) throw ShapeError("hungarian: cost matrix must be square");
        for (double v : row)
            if (!std::isfinite(v)) throw NumericError("hungarian: non-finite cost");
    }
    Assignment out;
    if (n == 0) return out;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    std::vector<bool> used(n + 1);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), false);
        do {
            used[j0] = true;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    out.row_to_col.assign(n, -1);
    for (std::size_t j = 1; j <= n; ++j) out.row_to_col[p[j] - 1] = static_cast<int>(j - 1);
    for (std::size_t i = 0; i < n; ++i) out.total += cost[i][static_cast<std::size_t>(out.row_to_col[i])];
    return out;
}

struct LabelMatch {
    std::map<int, int> cluster_to_label;  ///< unmatched clusters are absent
    std::size_t matched = 0;              ///< items whose cluster maps onto their label
};

/// One-to-one cluster/label matching maximizing agreement.
inline LabelMatch match_labels(std::span<const int> clusters, std::span<const int> labels) {
    const auto c = contingency(clusters, labels);
    const std::size_t n = std::max(c.row_ids.size(), c.col_ids.size());
    std::vector<std::vector<double>> cost(n, std::vector<double>(n, 0.0));
    for (std::size_t r = 0; r < c.row_ids.size(); ++r)
        for (std::size_t q = 0; q < c.col_ids.size(); ++q) cost[r][q] = -c.counts[r][q];
    const auto a = hungarian(cost);
    LabelMatch m;
    for (std::size_t r = 0; r < c.row_ids.size(); ++r) {
        const auto q = static_cast<std::size_t>(a.row_to_col[r]);
        if (q < c.col_ids.size()) {
            m.cluster_to_label[c.row_ids[r]] = c.col_ids[q];
            m.matched += static_cast<std::size_t>(c.counts[r][q]);
        }
    }
    return m;
}

struct ClusterMetrics {
    double nmi = 0.0;
    double ari = 0.0;
    double purity = 0.0;
    double v_measure = 0.0;
    double silhouette = 0.0;
    double matched_accuracy = 0.0;
};

inline ClusterMetrics cluster_metrics(std::span<const int> clusters, std::span<const int> labels, const FeatureMatrix& X,
                                      std::size_t silhouette_max_points = 5000, std::uint64_t seed = 0) {
    if (clusters.size() != labels.size()) throw ShapeError("cluster_metrics: length mismatch");
    ClusterMetrics m;
    m.nmi = nmi(clusters, labels);
    m.ari = ari(clusters, labels);
    m.purity = purity(clusters, labels);
    m.v_measure = v_measure(clusters, labels).v;
    m.silhouette = silhouette(X, clusters, silhouette_max_points, seed);
    m.matched_accuracy = static_cast<double>(match_labels(clusters, labels).matched) / static_cast<double>(labels.size());
    return m;
}

inline nlohmann::json metrics_json(const ClusterMetrics& m) {
    return {{"nmi", m.nmi},
            {"ari", m.ari},
            {"purity", m.purity},
            {"v_measure", m.v_measure},
            {"silhouette", m.silhouette},
            {"matched_accuracy", m.matched_accuracy}};
}

// ---------------------------------------------------------------------------
// Fréchet distance between Gaussian fits.

namespace detail {

inline void moments(const FeatureMatrix& X, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    const std::size_t n = X.rows, d = X.cols;
    Eigen::MatrixXd M(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = X(i, j);
    mu = M.colwise().mean().transpose();
    const Eigen::MatrixXd centered = M.rowwise() - mu.transpose();
    cov = centered.transpose() * centered / static_cast<double>(n > 1 ? n - 1 : 1);
}

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& A) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (A + A.transpose()));
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}), covariances regularized by eps I. The cross
/// term is evaluated as tr sqrt(Sa^{1/2} Sb Sa^{1/2}) on the symmetrized product.
inline double frechet_diagnostic(const FeatureMatrix& a, const FeatureMatrix& b, double eps = 1e-6) {
    if (a.rows == 0 || b.rows == 0) throw DataError("frechet_diagnostic: empty feature set");
    if (a.cols != b.cols) throw ShapeError("frechet_diagnostic: feature dimensions differ");
    Eigen::VectorXd ma, mb;
    Eigen::MatrixXd sa, sb;
    detail::moments(a, ma, sa);
    detail::moments(b, mb, sb);
    const auto I = Eigen::MatrixXd::Identity(sa.rows(), sa.cols());
    sa += eps * I;
    sb += eps * I;
    const Eigen::MatrixXd ra = detail::psd_sqrt(sa);
    const Eigen::MatrixXd prod = ra * sb * ra;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (prod + prod.transpose()), Eigen::EigenvaluesOnly);
    const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d = (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * cross;
    if (!std::isfinite(d))
        throw NumericError("frechet_diagnostic: non-finite result; covariances are badly conditioned");
    return std::max(0.0, d);
}

// ---------------------------------------------------------------------------
// PCA overlay of spatial tokens.

struct PcaOverlay {
    std::size_t n = 0, height = 0, width = 0;
    std::vector<float> rgb;               ///< n x H x W x 3 in [0, 1]
    std::vector<std::uint8_t> mask;       ///< n x H x W, 1 = low first component (masked)
    std::vector<double> explained;        ///< variance fraction per component
    Eigen::MatrixXd components;           ///< C x 3, unit columns
    std::vector<std::string> warnings;
};

/// PCA over all spatial tokens of a [N, C, H, W] batch; the first three components become RGB,
/// scaled to [0, 1] per channel over the batch. Pixels whose first component falls below the
/// `mask_quantile` quantile are masked.
template <class T>
PcaOverlay pca_tokens(const Tensor<T>& z, double mask_quantile = 0.5) {
    if (z.rank() != 4) throw ShapeError("pca_tokens: expected [N, C, H, W]");
    const std::size_t N = z.dim(0), C = z.dim(1), H = z.dim(2), W = z.dim(3), S = H * W, tokens = N * S;
    if (tokens < 3) throw DataError("pca_tokens: need at least 3 spatial tokens");
    PcaOverlay out;
    out.n = N;
    out.height = H;
    out.width = W;
    Eigen::MatrixXd X(static_cast<Eigen::Index>(tokens), static_cast<Eigen::Index>(C));
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < S; ++s)
                X(static_cast<Eigen::Index>(n * S + s), static_cast<Eigen::Index>(c)) = z[(n * C + c) * S + s];
    const Eigen::RowVectorXd mu = X.colwise().mean();
    X.rowwise() -= mu;
    const Eigen::MatrixXd cov = X.transpose() * X / static_cast<double>(tokens);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const Eigen::Index keep = std::min<Eigen::Index>(3, static_cast<Eigen::Index>(C));
    out.components = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(C), 3);
    const double total = std::max(0.0, es.eigenvalues().sum());
    out.explained.assign(3, 0.0);
    const double scale_ref = std::max(1e-300, es.eigenvalues().cwiseAbs().maxCoeff());
    for (Eigen::Index q = 0; q < keep; ++q) {
        const Eigen::Index src = static_cast<Eigen::Index>(C) - 1 - q;
        const double lambda = es.eigenvalues()(src);
        if (lambda <= 1e-12 * scale_ref || lambda <= 0.0) continue;
        Eigen::VectorXd v = es.eigenvectors().col(src);
        // sign convention: largest-magnitude loading positive
        Eigen::Index arg;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        out.components.col(q) = v;
        out.explained[static_cast<std::size_t>(q)] = total > 0 ? lambda / total : 0.0;
    }
    const auto rank = std::count_if(out.explained.begin(), out.explained.end(), [](double e) { return e > 0; });
    out.rgb.assign(tokens * 3, 0.0f);
    out.mask.assign(tokens, 0);
    if (rank == 0) {
        out.warnings.push_back("all tokens identical; masking every pixel");
        std::fill(out.mask.begin(), out.mask.end(), 1);
        for (const auto& w : out.warnings) std::clog << "pca_tokens: " << w << "\n";
        return out;
    }
    if (rank < 3) out.warnings.push_back("token rank " + std::to_string(rank) + " < 3; padding with zero channels");
    const Eigen::MatrixXd P = X * out.components;
    for (Eigen::Index q = 0; q < 3; ++q) {
        if (out.explained[static_cast<std::size_t>(q)] <= 0) continue;
        const double lo = P.col(q).minCoeff(), hi = P.col(q).maxCoeff();
        const double span = hi - lo;
        for (std::size_t t = 0; t < tokens; ++t)
            out.rgb[t * 3 + static_cast<std::size_t>(q)] =
                span > 0 ? static_cast<float>((P(static_cast<Eigen::Index>(t), q) - lo) / span) : 0.0f;
    }
    std::vector<double> first(tokens);
    for (std::size_t t = 0; t < tokens; ++t) first[t] = P(static_cast<Eigen::Index>(t), 0);
    std::vector<double> sorted = first;
    const auto qi = static_cast<std::size_t>(std::clamp(mask_quantile, 0.0, 1.0) * static_cast<double>(tokens - 1));
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(qi), sorted.end());
    const double thr = sorted[qi];
    for (std::size_t t = 0; t < tokens; ++t) out.mask[t] = first[t] < thr ? 1 : 0;
    for (const auto& w : out.warnings) std::clog << "pca_tokens: " << w << "\n";
    return out;
}

}  // namespace dprobe::cluster
