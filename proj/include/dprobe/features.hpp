// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numeric>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "dprobe/data.hpp"
#include "dprobe/denoiser.hpp"
#include "dprobe/diffusion.hpp"
#include "dprobe/error.hpp"
#include "dprobe/io.hpp"
#include "dprobe/rng.hpp"
#include "dprobe/schedule.hpp"

namespace dprobe::features {

/// Dense row-major n x C matrix of f32 descriptors.
struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> values;

    FeatureMatrix() = default;
    FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0f) {}

    std::span<const float> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
    std::span<float> row(std::size_t i) { return {values.data() + i * cols, cols}; }
    float operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
    float& operator()(std::size_t i, std::size_t j) { return values[i * cols + j]; }
    bool operator==(const FeatureMatrix&) const = default;
};

/// Spatial mean per channel: [N, C, H, W] -> N x C.
template <class T>
FeatureMatrix gap(const Tensor<T>& z) {
    if (z.rank() != 4) throw ShapeError("gap: expected [N, C, H, W], got " + shape_string(z.shape()));
    const std::size_t N = z.dim(0), C = z.dim(1), S = z.dim(2) * z.dim(3);
    FeatureMatrix out(N, C);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T* p = z.data() + (n * C + c) * S;
            double s = 0.0;
            for (std::size_t i = 0; i < S; ++i) s += p[i];
            out(n, c) = static_cast<float>(s / static_cast<double>(S));
        }
    return out;
}

/// Noise policy: "shared" draws one eps per (seed, image id, t) for every readout and consumer;
/// "per-consumer" keys the stream additionally by a consumer name.
struct SeedPolicy {
    std::uint64_t seed = 0;
    bool shared = true;
    std::string consumer;

    std::string stream_name() const { return shared ? "extract" : "extract/" + consumer; }
};

inline void to_json(nlohmann::json& j, const SeedPolicy& p) {
    j = {{"seed", p.seed}, {"mode", p.shared ? "shared" : "per-consumer"}, {"consumer", p.consumer}};
}

inline void from_json(const nlohmann::json& j, SeedPolicy& p) {
    p.seed = j.at("seed").get<std::uint64_t>();
    p.shared = j.value("mode", std::string("shared")) == "shared";
    p.consumer = j.value("consumer", std::string());
}

using CellKey = std::pair<int, int>;  ///< (t, ell)

struct FeatureGrid {
    std::string dataset_id;
    std::string checkpoint_hash;
    SeedPolicy seed_policy;
    std::vector<int> timesteps;
    std::vector<int> readouts;  ///< flat readout indices
    std::vector<ReadoutInfo> readout_info;
    std::map<CellKey, FeatureMatrix> cells;

    const FeatureMatrix& at(int t, int ell) const {
        auto it = cells.find({t, ell});
        if (it == cells.end())
            throw DataError("feature cell (t=" + std::to_string(t) + ", ell=" + std::to_string(ell) + ") missing");
        return it->second;
    }

    const ReadoutInfo& info(int ell) const {
        for (const auto& r : readout_info)
            if (r.ell == ell) return r;
        throw IndexError("readout " + std::to_string(ell) + " not in grid");
    }
};

/// Content id of a split: hash over geometry, pixels, labels and item ids.
inline std::string dataset_id(const data::LabeledImageSet& s) {
    io::Writer w;
    w.put<std::uint64_t>(s.size());
    w.put<std::uint64_t>(s.height);
    w.put<std::uint64_t>(s.width);
    w.put_span(std::span<const float>(s.pixels));
    w.put_span(std::span<const int>(s.labels));
    w.put_span(std::span<const std::int64_t>(s.ids));
    const auto b = w.bytes();
    return io::sha256_hex({b.data(), b.size()});
}

struct ExtractOptions {
    SeedPolicy seed_policy;
    std::size_t batch = 32;
    std::size_t workers = 1;
    std::string checkpoint_hash;
};

/// Runs the frozen denoiser once per (image, t) on x_t = corrupt(x0, t, eps) and records the GAP
/// of every requested readout. Batches are fixed index ranges, so results do not depend on the
/// worker count.
inline FeatureGrid extract_grid(const UNet<float>& net, const nn::ParamStore<float>& weights,
                                const NoiseSchedule& schedule, const data::LabeledImageSet& set,
                                const std::vector<int>& timesteps, const std::vector<int>& readouts,
                                const ExtractOptions& opt) {
    if (!net.frozen()) throw ContractError("extract_grid: denoiser must be frozen");
    if (set.height != net.config().image_size || set.width != net.config().image_size)
        throw ShapeError("extract_grid: images are " + std::to_string(set.height) + "x" + std::to_string(set.width) +
                         ", denoiser expects " + std::to_string(net.config().image_size));
    FeatureGrid grid;
    grid.dataset_id = dataset_id(set);
    grid.checkpoint_hash = opt.checkpoint_hash;
    grid.seed_policy = opt.seed_policy;
    grid.timesteps = timesteps;
    grid.readouts = readouts;
    const auto table = net.readouts();
    const std::set<int> wanted(readouts.begin(), readouts.end());
    for (int ell : readouts) {
        const auto it = std::find_if(table.begin(), table.end(), [&](const ReadoutInfo& r) { return r.ell == ell; });
        if (it == table.end()) throw IndexError("readout " + std::to_string(ell) + " does not exist");
        grid.readout_info.push_back(*it);
    }
    for (int t : timesteps) {
        if (t < 1 || t > schedule.T()) throw IndexError("timestep " + std::to_string(t) + " outside schedule");
        for (const auto& info : grid.readout_info) grid.cells[{t, info.ell}] = FeatureMatrix(set.size(), info.channels);
    }

    const std::size_t B = std::max<std::size_t>(1, opt.batch);
    std::vector<std::pair<int, std::size_t>> jobs;
    for (int t : timesteps)
        for (std::size_t i = 0; i < set.size(); i += B) jobs.emplace_back(t, i);
    const std::size_t per = set.pixels_per_image();
    const auto run = [&](std::size_t j) {
        const auto [t, first] = jobs[j];
        const std::size_t n = std::min(B, set.size() - first);
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), first);
        const Tensor<float> x0 = to_model_domain(set.batch<float>(idx));
        Tensor<float> eps(x0.shape());
        for (std::size_t k = 0; k < n; ++k) {
            Rng rng(opt.seed_policy.seed, opt.seed_policy.stream_name(), static_cast<std::uint64_t>(set.ids[first + k]),
                    static_cast<std::uint64_t>(t));
            for (std::size_t p = 0; p < per; ++p) eps[k * per + p] = static_cast<float>(rng.normal());
        }
        const auto nb = corrupt(schedule, x0, std::vector<int>(n, t), eps);
        ReadoutMap<float> maps;
        net.forward(weights, nb.xt, nb.t, wanted, &maps, nullptr);
        for (const auto& [ell, ft] : maps) {
            const FeatureMatrix g = gap(ft.values);
            auto& cell = grid.cells.at({t, ell});
            std::copy(g.values.begin(), g.values.end(), cell.values.begin() + first * cell.cols);
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(opt.workers, jobs.size()));
    if (workers == 1) {
        for (std::size_t j = 0; j < jobs.size(); ++j) run(j);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(workers);
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t j; (j = next++) < jobs.size();) run(j);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    for (const auto& [key, m] : grid.cells)
        for (float v : m.values)
            if (!std::isfinite(v)) throw NumericError("non-finite feature at t=" + std::to_string(key.first));
    return grid;
}

// ---------------------------------------------------------------------------
// Cache: one "DPFC1" file per (t, ell): magic, u64 header length, JSON header, n*C f32.

struct CellHeader {
    std::string checkpoint_hash;
    std::string dataset_id;
    int t = 0;
    int r = 0;
    int b = 0;
    int ell = 0;
    std::size_t n = 0;
    std::size_t channels = 0;
    SeedPolicy seed_policy;
};

inline std::string cell_filename(int t, int ell) {
    return "t" + std::to_string(t) + "_l" + std::to_string(ell) + ".dpfc";
}

inline std::string encode_cell(const CellHeader& h, const FeatureMatrix& m) {
    if (m.rows != h.n || m.cols != h.channels) throw ShapeError("encode_cell: header does not match matrix");
    const nlohmann::json j{{"checkpoint_hash", h.checkpoint_hash},
                           {"dataset_id", h.dataset_id},
                           {"t", h.t},
                           {"r", h.r},
                           {"b", h.b},
                           {"ell", h.ell},
                           {"n", h.n},
                           {"C", h.channels},
                           {"seed_policy", h.seed_policy}};
    const std::string text = j.dump();
    io::Writer w;
    w.put_bytes("DPFC1");
    w.put<std::uint64_t>(text.size());
    w.put_bytes(text);
    w.put_span(std::span<const float>(m.values));
    return w.bytes();
}

inline std::pair<CellHeader, FeatureMatrix> decode_cell(const std::vector<char>& bytes, const std::string& ctx) {
    io::Reader r(bytes.data(), bytes.size(), ctx);
    if (r.get_bytes(5) != "DPFC1") throw IoError(ctx + ": bad magic");
    const auto len = r.get<std::uint64_t>();
    CellHeader h;
    try {
        const auto j = nlohmann::json::parse(r.get_bytes(len));
        h.checkpoint_hash = j.at("checkpoint_hash");
        h.dataset_id = j.at("dataset_id");
        h.t = j.at("t");
        h.r = j.at("r");
        h.b = j.at("b");
        h.ell = j.at("ell");
        h.n = j.at("n");
        h.channels = j.at("C");
        h.seed_policy = j.at("seed_policy").get<SeedPolicy>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(ctx + ": corrupt header: " + e.what());
    }
    FeatureMatrix m(h.n, h.channels);
    r.get_into(std::span<float>(m.values));
    if (r.remaining() != 0) throw IoError(ctx + ": trailing bytes");
    return {h, std::move(m)};
}

inline CellHeader read_cell_header(const std::filesystem::path& p) {
    return decode_cell(io::read_file(p), p.string()).first;
}

/// Writes every cell of `grid` into `dir`. Existing cells in `dir` must come from the same
/// checkpoint and dataset; anything else is a ContractError.
inline std::vector<std::filesystem::path> write_grid(const std::filesystem::path& dir, const FeatureGrid& grid) {
    namespace fs = std::filesystem;
    if (fs::is_directory(dir))
        for (const auto& e : fs::directory_iterator(dir)) {
            if (e.path().extension() != ".dpfc") continue;
            const auto h = read_cell_header(e.path());
            if (h.checkpoint_hash != grid.checkpoint_hash)
                throw ContractError("feature cache " + dir.string() + " was built from checkpoint " + h.checkpoint_hash +
                                    ", refusing to append cells from " + grid.checkpoint_hash);
            if (h.dataset_id != grid.dataset_id)
                throw ContractError("feature cache " + dir.string() + " belongs to a different dataset");
        }
    std::vector<fs::path> written;
    for (const auto& [key, m] : grid.cells) {
        const auto& info = grid.info(key.second);
        CellHeader h{grid.checkpoint_hash, grid.dataset_id, key.first, info.id.r, info.id.b, info.ell, m.rows, m.cols,
                     grid.seed_policy};
        const auto path = dir / cell_filename(key.first, key.second);
        io::write_file(path, encode_cell(h, m));
        written.push_back(path);
    }
    return written;
}

/// Loads the requested cells. An empty `expected_checkpoint` accepts any checkpoint hash.
inline FeatureGrid read_grid(const std::filesystem::path& dir, const std::vector<int>& timesteps,
                             const std::vector<int>& readouts, const std::string& expected_checkpoint = {}) {
    FeatureGrid grid;
    grid.timesteps = timesteps;
    grid.readouts = readouts;
    bool first = true;
    for (int t : timesteps)
        for (int ell : readouts) {
            const auto path = dir / cell_filename(t, ell);
            if (!std::filesystem::exists(path))
                throw DataError("feature cell " + path.string() + " missing");
            auto [h, m] = decode_cell(io::read_file(path), path.string());
            if (!expected_checkpoint.empty() && h.checkpoint_hash != expected_checkpoint)
                throw ContractError(path.string() + ": checkpoint hash mismatch");
            if (first) {
                grid.checkpoint_hash = h.checkpoint_hash;
                grid.dataset_id = h.dataset_id;
                grid.seed_policy = h.seed_policy;
                first = false;
            } else if (h.checkpoint_hash != grid.checkpoint_hash || h.dataset_id != grid.dataset_id) {
                throw ContractError(path.string() + ": cells in one cache disagree on checkpoint or dataset");
            }
            if (std::none_of(grid.readout_info.begin(), grid.readout_info.end(),
                             [&](const ReadoutInfo& r) { return r.ell == ell; }))
                grid.readout_info.push_back({{h.r, h.b}, h.ell, h.channels, 0, 0});
            grid.cells[{t, ell}] = std::move(m);
        }
    return grid;
}

}  // namespace dprobe::features
