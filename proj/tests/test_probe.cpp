// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "dprobe/probe.hpp"

using namespace dprobe;
using features::FeatureGrid;
using features::FeatureMatrix;

namespace {

/// Two Gaussian blobs in 2-d centred at (+-3, 0).
void blobs(std::size_t n, std::uint64_t seed, FeatureMatrix& x, std::vector<int>& y) {
    Rng rng(seed);
    x = FeatureMatrix(n, 2);
    y.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<int>(i % 2);
        x(i, 0) = static_cast<float>((y[i] ? 3.0 : -3.0) + 0.5 * rng.normal());
        x(i, 1) = static_cast<float>(0.5 * rng.normal());
    }
}

FeatureMatrix noise(std::size_t n, std::size_t c, Rng& rng) {
    FeatureMatrix m(n, c);
    for (auto& v : m.values) v = static_cast<float>(rng.normal());
    return m;
}

FeatureGrid grid_of(const std::vector<int>& ts, const std::vector<int>& ells) {
    FeatureGrid g;
    g.timesteps = ts;
    g.readouts = ells;
    for (int ell : ells) g.readout_info.push_back({ReadoutId::from_ell(ell), ell, 4, 1, 1});
    return g;
}

probe::ProbeHyper quick() {
    probe::ProbeHyper h;
    h.epochs = 100;
    h.batch = 32;
    h.lr = 1e-2;
    return h;
}

}  // namespace

TEST(Probe, SeparableBlobs) {
    FeatureMatrix xtr, xva;
    std::vector<int> ytr, yva;
    blobs(200, 1, xtr, ytr);
    blobs(100, 2, xva, yva);
    for (bool pre : {true, false}) {
        auto h = quick();
        h.precondition = pre;
        const auto p = probe::fit_probe(xtr, ytr, 2, h);
        EXPECT_EQ(probe::evaluate(p, xva, yva).accuracy, 1.0);
    }
}

TEST(Probe, ShuffledLabelsGiveChance) {
    const std::size_t k = 4, n = 2000;
    Rng rng(3);
    const auto xtr = noise(n, 16, rng), xva = noise(n, 16, rng);
    std::vector<int> ytr(n), yva(n);
    for (std::size_t i = 0; i < n; ++i) {
        ytr[i] = static_cast<int>(i % k);
        yva[i] = static_cast<int>(rng.index(k));
    }
    std::shuffle(ytr.begin(), ytr.end(), rng.engine());
    const auto p = probe::fit_probe(xtr, ytr, k, quick());
    const double acc = probe::evaluate(p, xva, yva).accuracy;
    const double q = 1.0 / k, sigma = std::sqrt(q * (1 - q) / n);
    EXPECT_NEAR(acc, q, 3 * sigma);
}

TEST(Probe, DuplicatedRowsLeavePredictionsUnchanged) {
    Rng rng(4);
    const std::size_t n = 120;
    const auto x = noise(n, 6, rng);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = x(i, 0) + 0.5f * x(i, 1) > 0 ? 1 : (x(i, 2) > 0.5f ? 2 : 0);
    FeatureMatrix xd(2 * n, x.cols);
    std::vector<int> yd(2 * n);
    for (std::size_t i = 0; i < 2 * n; ++i) {
        std::copy_n(x.row(i % n).data(), x.cols, xd.row(i).data());
        yd[i] = y[i % n];
    }
    auto h = quick();
    h.batch = 4 * n;  // one full batch each
    const auto a = probe::fit_probe(x, y, 3, h);
    const auto b = probe::fit_probe(xd, yd, 3, h);
    const auto probe_x = noise(500, 6, rng);
    EXPECT_EQ(a.predict(probe_x), b.predict(probe_x));
    for (std::size_t i = 0; i < a.W.size(); ++i) EXPECT_NEAR(a.W[i], b.W[i], 1e-8);
}

TEST(Probe, PreconditioningIsAffineInvariant) {
    Rng rng(5);
    const std::size_t n = 300;
    auto x = noise(n, 5, rng);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = x(i, 0) - x(i, 3) > 0 ? 1 : 0;
    auto h = quick();
    h.normalize = false;
    const auto a = probe::fit_probe(x, y, 2, h);
    auto xs = x;
    const float scale[] = {100.0f, 0.01f, 1.0f, 7.0f, 3.0f}, shift[] = {50.0f, -2.0f, 0.0f, 1.0f, 9.0f};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < 5; ++j) xs(i, j) = x(i, j) * scale[j] + shift[j];
    const auto b = probe::fit_probe(xs, y, 2, h);
    std::size_t agree = 0;
    const auto pa = a.predict(x), pb = b.predict(xs);
    for (std::size_t i = 0; i < n; ++i) agree += pa[i] == pb[i];
    EXPECT_GE(agree, n - 1);
}

TEST(Probe, AbsentClassIsNamed) {
    FeatureMatrix x(3, 2);
    const std::vector<int> y{0, 0, 2};
    try {
        probe::fit_probe(x, y, 3, quick(), {"diatom", "ciliate", "dinoflagellate"});
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("ciliate"), std::string::npos);
    }
    EXPECT_THROW(probe::fit_probe(FeatureMatrix(0, 2), {}, 2, quick()), DataError);
    EXPECT_THROW(probe::fit_probe(x, std::vector<int>{0, 1}, 2, quick()), ShapeError);
    EXPECT_THROW(probe::fit_probe(x, std::vector<int>{0, 1, 5}, 2, quick()), DataError);
}

TEST(Probe, NormalizationIdempotent) {
    Rng rng(6);
    auto x = noise(10, 4, rng);
    std::fill(x.row(3).begin(), x.row(3).end(), 0.0f);
    const auto once = probe::l2_normalize(x);
    const auto twice = probe::l2_normalize(once);
    for (std::size_t i = 0; i < x.values.size(); ++i) EXPECT_NEAR(once.values[i], twice.values[i], 1e-7);
    for (float v : once.row(3)) EXPECT_EQ(v, 0.0f);
    double s = 0;
    for (float v : once.row(0)) s += v * v;
    EXPECT_NEAR(s, 1.0, 1e-6);
}

TEST(Metrics, HandComputed) {
    const std::vector<int> truth{0, 0, 1, 1};
    const auto perfect = probe::score(truth, truth, 2);
    EXPECT_EQ(perfect.accuracy, 1.0);
    EXPECT_EQ(perfect.macro_f1, 1.0);
    const auto always_a = probe::score(truth, std::vector<int>{0, 0, 0, 0}, 2);
    EXPECT_EQ(always_a.accuracy, 0.5);
    EXPECT_NEAR(always_a.macro_f1, 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(always_a.per_class[0].precision, 0.5, 1e-15);
    EXPECT_EQ(always_a.per_class[0].recall, 1.0);
    EXPECT_EQ(always_a.per_class[1].f1, 0.0);
    EXPECT_EQ(always_a.per_class[1].support, 2u);
    EXPECT_THROW(probe::score({}, {}, 2), DataError);
    EXPECT_THROW(probe::score(truth, std::vector<int>{0}, 2), ShapeError);
}

TEST(Metrics, OrderInvariant) {
    const std::vector<int> truth{0, 1, 2, 2, 1, 0, 2}, pred{0, 2, 2, 1, 1, 0, 0};
    std::vector<std::size_t> perm{6, 2, 4, 0, 1, 5, 3};
    std::vector<int> t2, p2;
    for (auto i : perm) {
        t2.push_back(truth[i]);
        p2.push_back(pred[i]);
    }
    const auto a = probe::score(truth, pred, 3), b = probe::score(t2, p2, 3);
    EXPECT_EQ(a.accuracy, b.accuracy);
    EXPECT_EQ(a.macro_f1, b.macro_f1);
}

TEST(Sweep, PlantedCellSelected) {
    const std::size_t k = 3, n = 150;
    Rng rng(7);
    const std::vector<int> ts{1, 25, 100}, ells{1, 2, 3};
    auto make = [&](std::vector<int>& y) {
        auto g = grid_of(ts, ells);
        y.resize(n);
        for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % k);
        for (int t : ts)
            for (int ell : ells) {
                auto m = noise(n, 4, rng);
                if (t == 25 && ell == 2)
                    for (std::size_t i = 0; i < n; ++i) m(i, static_cast<std::size_t>(y[i])) += 4.0f;
                g.cells[{t, ell}] = m;
            }
        return g;
    };
    std::vector<int> ytr, yva, yte;
    const auto gtr = make(ytr), gva = make(yva), gte = make(yte);
    probe::SweepOptions opt;
    opt.classes = k;
    opt.hyper = quick();
    const auto r = probe::sweep({&gtr, ytr}, {&gva, yva}, {&gte, yte}, opt);
    EXPECT_EQ(r.t_star, 25);
    EXPECT_EQ(r.ell_star, 2);
    EXPECT_GT(r.val_acc, 0.9);
    EXPECT_EQ(r.cells.size(), 9u);

    opt.workers = 3;
    const auto again = probe::sweep({&gtr, ytr}, {&gva, yva}, {&gte, yte}, opt);
    for (std::size_t i = 0; i < r.cells.size(); ++i) EXPECT_EQ(again.cells[i].val.accuracy, r.cells[i].val.accuracy);

    const auto csv = probe::sweep_csv(r);
    EXPECT_EQ(csv.rfind("resolution,block,ell,t,split,accuracy,macro_f1\n", 0), 0u);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 9);
}

TEST(Sweep, TiesGoToSmallestTThenEll) {
    FeatureMatrix m;
    std::vector<int> y;
    blobs(40, 8, m, y);
    auto g = grid_of({10, 5}, {3, 2});
    for (int t : {10, 5})
        for (int ell : {3, 2}) g.cells[{t, ell}] = m;
    probe::SweepOptions opt;
    opt.classes = 2;
    opt.hyper = quick();
    const auto r = probe::sweep({&g, y}, {&g, y}, {&g, y}, opt);
    for (const auto& c : r.cells) ASSERT_EQ(c.val.accuracy, 1.0);
    EXPECT_EQ(r.t_star, 5);
    EXPECT_EQ(r.ell_star, 2);
}

TEST(Sweep, SingleCellAndMissingCell) {
    Rng rng(9);
    std::vector<int> y{0, 1, 0, 1};
    auto g = grid_of({7}, {4});
    g.cells[{7, 4}] = noise(4, 4, rng);
    probe::SweepOptions opt;
    opt.classes = 2;
    opt.test_full_grid = false;
    const auto r = probe::sweep({&g, y}, {&g, y}, {&g, y}, opt);
    EXPECT_EQ(r.t_star, 7);
    EXPECT_EQ(r.ell_star, 4);
    ASSERT_TRUE(r.cells[0].test.has_value());

    auto missing = grid_of({7}, {4});
    EXPECT_THROW(probe::sweep({&g, y}, {&missing, y}, {&g, y}, opt), DataError);
}
