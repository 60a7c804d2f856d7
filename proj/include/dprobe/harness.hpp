// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "dprobe/checkpoint.hpp"
#include "dprobe/cluster.hpp"
#include "dprobe/data.hpp"
#include "dprobe/features.hpp"
#include "dprobe/probe.hpp"
#include "dprobe/train.hpp"

namespace dprobe::harness {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* tool_version = "dprobe 0.1.0";

// ---------------------------------------------------------------------------
// Configuration.

struct DatasetSection {
    std::string source = "synthetic";  ///< synthetic | directory
    std::size_t image_size = 32;
    std::size_t classes = 8;
    std::size_t per_class = 200;
    double delta = 1.0;
    double noise = 0.03;
    std::uint64_t seed = 7;
    std::string path;       ///< directory source: <path>/<class-dir>/<files>
    std::string label_map;  ///< optional "<dir-name>,<class-id>" file
    data::SplitPlan split;
    bool augment = false;
    data::AugmentOptions augmentation;
};

struct SweepSection {
    std::vector<int> timesteps{1, 10, 25, 50, 75, 100, 200, 400, 600};
    std::vector<int> readouts;  ///< empty: every readout
    features::SeedPolicy seed_policy;
    std::size_t batch = 32;
    bool test_full_grid = true;
};

struct ClusterSection {
    bool enabled = true;
    std::size_t k = 0;  ///< 0: number of classes
    std::size_t restarts = 5;
    std::size_t max_iter = 300;
    double tol = 1e-4;
    std::size_t runs = 5;  ///< metrics are averaged over this many seeded k-means runs
    std::uint64_t seed = 0;
    std::size_t silhouette_max_points = 5000;
    std::size_t overlay_images = 4;
    double mask_quantile = 0.5;
};

/// Probe-only transfer: a frozen source checkpoint evaluated at the source-selected cell.
struct OodSection {
    std::string checkpoint;
    int t_star = 0;
    int ell_star = 0;

    bool enabled() const { return !checkpoint.empty(); }
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::string output_dir = "runs/experiment";
    std::size_t workers = 1;
    DatasetSection dataset;
    TrainConfig train;  ///< also carries the schedule, weighting and sampler sections
    DenoiserConfig model;
    probe::ProbeHyper probe;
    SweepSection sweep;
    ClusterSection cluster;
    OodSection ood;

    /// Desk preset: small U-Net, 30 epochs, probe settings that converge on a few thousand rows.
    static ExperimentConfig desk() {
        ExperimentConfig c;
        c.name = "desk";
        c.output_dir = "runs/desk";
        c.model.stage_channels = {16, 32, 48, 64};
        c.model.time_embed_dim = 64;
        c.model.groups = 8;
        c.train.epochs = 30;
        c.train.batch = 32;
        c.train.adamw.lr = 5e-4;
        c.train.ema_decay = 0.995;
        c.dataset.split.seed = 7;
        c.probe.epochs = 200;
        c.probe.batch = 64;
        c.probe.lr = 1e-2;
        return c;
    }

    void validate() const {
        if (name.empty()) throw ConfigError("name must not be empty");
        if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
        if (workers < 1) throw ConfigError("workers must be >= 1");
        const auto& d = dataset;
        if (d.source == "synthetic") {
            if (d.classes < 1 || d.classes > 16) throw ConfigError("dataset.synthetic.classes must be in [1, 16]");
            if (d.per_class < 1) throw ConfigError("dataset.synthetic.per_class must be >= 1");
            if (d.noise < 0) throw ConfigError("dataset.synthetic.noise must be >= 0");
        } else if (d.source == "directory") {
            if (d.path.empty()) throw ConfigError("dataset.directory.path is required");
        } else {
            throw ConfigError("dataset.source must be 'synthetic' or 'directory', got '" + d.source + "'");
        }
        d.split.validate();
        if (model.image_size != d.image_size) throw ConfigError("model image size must equal dataset.image_size");
        if (model.timesteps != train.timesteps) throw ConfigError("model timesteps must equal schedule.T");
        model.validate();
        train.validate();
        if (probe.epochs < 1 || probe.batch < 1 || !(probe.lr > 0))
            throw ConfigError("probe: epochs, batch and lr must be positive");
        if (sweep.timesteps.empty()) throw ConfigError("sweep.timesteps must not be empty");
        if (std::set<int>(sweep.timesteps.begin(), sweep.timesteps.end()).size() != sweep.timesteps.size())
            throw ConfigError("sweep.timesteps contains duplicates");
        for (int t : sweep.timesteps)
            if (t < 1 || t > train.timesteps)
                throw ConfigError("sweep timestep " + std::to_string(t) + " outside [1, " +
                                  std::to_string(train.timesteps) + "]");
        const int n_read = static_cast<int>(readout_table(model).size());
        for (int ell : sweep.readouts)
            if (ell < 1 || ell > n_read) throw ConfigError("sweep readout " + std::to_string(ell) + " does not exist");
        if (sweep.batch < 1) throw ConfigError("sweep.batch must be >= 1");
        if (cluster.enabled && (cluster.restarts < 1 || cluster.runs < 1 || cluster.max_iter < 1))
            throw ConfigError("cluster: restarts, runs and max_iter must be >= 1");
        if (cluster.mask_quantile <= 0 || cluster.mask_quantile >= 1)
            throw ConfigError("cluster.mask_quantile must be in (0, 1)");
        if (ood.enabled()) {
            if (ood.t_star < 1 || ood.t_star > train.timesteps) throw ConfigError("ood.t_star outside the schedule");
            if (ood.ell_star < 1 || ood.ell_star > n_read) throw ConfigError("ood.ell_star does not exist");
        }
    }

    /// Timesteps and readouts actually extracted.
    std::vector<int> grid_timesteps() const { return ood.enabled() ? std::vector<int>{ood.t_star} : sweep.timesteps; }
    std::vector<int> grid_readouts() const {
        if (ood.enabled()) return {ood.ell_star};
        if (!sweep.readouts.empty()) return sweep.readouts;
        std::vector<int> all;
        for (const auto& r : readout_table(model)) all.push_back(r.ell);
        return all;
    }
};

inline std::string to_string(data::AugmentMode m) { return m == data::AugmentMode::balanced ? "balanced" : "long_tail"; }

inline data::AugmentMode augment_mode_from_string(const std::string& s) {
    if (s == "balanced") return data::AugmentMode::balanced;
    if (s == "long_tail") return data::AugmentMode::long_tail;
    throw ConfigError("unknown augmentation mode '" + s + "'");
}

inline void to_json(json& j, const ExperimentConfig& c) {
    const auto& d = c.dataset;
    json train = c.train;
    for (const char* k : {"schedule", "timesteps", "cosine_s", "weighting", "gamma", "t_sampler"}) train.erase(k);
    json model = c.model;
    model.erase("image_size");
    model.erase("timesteps");
    j = json{
        {"name", c.name},
        {"output_dir", c.output_dir},
        {"workers", c.workers},
        {"dataset",
         {{"source", d.source},
          {"image_size", d.image_size},
          {"synthetic", {{"classes", d.classes}, {"per_class", d.per_class}, {"delta", d.delta}, {"noise", d.noise},
                         {"seed", d.seed}}},
          {"directory", {{"path", d.path}, {"label_map", d.label_map}}},
          {"splits", {{"train", d.split.train}, {"val", d.split.val}, {"test", d.split.test}, {"seed", d.split.seed},
                      {"min_class_count", d.split.min_class_count}, {"max_per_class", d.split.max_per_class}}},
          {"augmentation", {{"enabled", d.augment}, {"mode", to_string(d.augmentation.mode)},
                            {"quota_per_class", d.augmentation.quota_per_class},
                            {"multiplier", d.augmentation.multiplier}, {"seed", d.augmentation.seed}}}}},
        {"schedule", {{"kind", to_string(c.train.schedule)}, {"T", c.train.timesteps}, {"s", c.train.cosine_s}}},
        {"weighting", {{"kind", to_string(c.train.weighting.kind)}, {"gamma", c.train.weighting.gamma}}},
        {"sampler", {{"kind", to_string(c.train.t_sampler)}}},
        {"model", model},
        {"train", train},
        {"probe", c.probe},
        {"sweep", {{"timesteps", c.sweep.timesteps}, {"readouts", c.sweep.readouts},
                   {"seed_policy", c.sweep.seed_policy}, {"batch", c.sweep.batch},
                   {"test_full_grid", c.sweep.test_full_grid}}},
        {"cluster", {{"enabled", c.cluster.enabled}, {"k", c.cluster.k}, {"restarts", c.cluster.restarts},
                     {"max_iter", c.cluster.max_iter}, {"tol", c.cluster.tol}, {"runs", c.cluster.runs},
                     {"seed", c.cluster.seed}, {"silhouette_max_points", c.cluster.silhouette_max_points},
                     {"overlay_images", c.cluster.overlay_images}, {"mask_quantile", c.cluster.mask_quantile}}},
        {"ood", {{"checkpoint", c.ood.checkpoint}, {"t_star", c.ood.t_star}, {"ell_star", c.ood.ell_star}}}};
}

namespace detail {

inline std::string kind_of(const json& v) {
    if (v.is_boolean()) return "boolean";
    if (v.is_number()) return "number";
    if (v.is_string()) return "string";
    if (v.is_array()) return "array";
    if (v.is_object()) return "object";
    return "null";
}

/// Every key must exist in the reference tree with a value of the same kind.
inline void check_schema(const json& j, const json& ref, const std::string& path) {
    if (!j.is_object()) throw ConfigError((path.empty() ? "config" : path) + ": expected an object");
    for (const auto& [key, v] : j.items()) {
        const std::string p = path.empty() ? key : path + "." + key;
        if (!ref.contains(key)) throw ConfigError("unknown config key '" + p + "'");
        const auto& r = ref.at(key);
        if (kind_of(v) != kind_of(r))
            throw ConfigError("config key '" + p + "' must be " + kind_of(r) + ", got " + kind_of(v));
        if (r.is_object()) check_schema(v, r, p);
        if (r.is_number_unsigned() && v.is_number_integer() && v.get<long long>() < 0)
            throw ConfigError("config key '" + p + "' must be nonnegative");
    }
}

inline json section(const json& j, const char* key) { return j.contains(key) ? j.at(key) : json::object(); }

}  // namespace detail

inline void from_json(const json& j, ExperimentConfig& c) {
    const ExperimentConfig d;
    c.name = j.value("name", d.name);
    c.output_dir = j.value("output_dir", d.output_dir);
    c.workers = j.value("workers", d.workers);

    const json ds = detail::section(j, "dataset");
    const json syn = detail::section(ds, "synthetic"), dir = detail::section(ds, "directory");
    const json sp = detail::section(ds, "splits"), aug = detail::section(ds, "augmentation");
    auto& o = c.dataset;
    o.source = ds.value("source", d.dataset.source);
    o.image_size = ds.value("image_size", d.dataset.image_size);
    o.classes = syn.value("classes", d.dataset.classes);
    o.per_class = syn.value("per_class", d.dataset.per_class);
    o.delta = syn.value("delta", d.dataset.delta);
    o.noise = syn.value("noise", d.dataset.noise);
    o.seed = syn.value("seed", d.dataset.seed);
    o.path = dir.value("path", d.dataset.path);
    o.label_map = dir.value("label_map", d.dataset.label_map);
    o.split.train = sp.value("train", d.dataset.split.train);
    o.split.val = sp.value("val", d.dataset.split.val);
    o.split.test = sp.value("test", d.dataset.split.test);
    o.split.seed = sp.value("seed", d.dataset.split.seed);
    o.split.min_class_count = sp.value("min_class_count", d.dataset.split.min_class_count);
    o.split.max_per_class = sp.value("max_per_class", d.dataset.split.max_per_class);
    o.augment = aug.value("enabled", d.dataset.augment);
    o.augmentation.mode = augment_mode_from_string(aug.value("mode", to_string(d.dataset.augmentation.mode)));
    o.augmentation.quota_per_class = aug.value("quota_per_class", d.dataset.augmentation.quota_per_class);
    o.augmentation.multiplier = aug.value("multiplier", d.dataset.augmentation.multiplier);
    o.augmentation.seed = aug.value("seed", d.dataset.augmentation.seed);

    json train = detail::section(j, "train");
    const json sch = detail::section(j, "schedule"), w = detail::section(j, "weighting"), smp = detail::section(j, "sampler");
    train["schedule"] = sch.value("kind", to_string(d.train.schedule));
    train["timesteps"] = sch.value("T", d.train.timesteps);
    train["cosine_s"] = sch.value("s", d.train.cosine_s);
    train["weighting"] = w.value("kind", to_string(d.train.weighting.kind));
    train["gamma"] = w.value("gamma", d.train.weighting.gamma);
    train["t_sampler"] = smp.value("kind", to_string(d.train.t_sampler));
    c.train = train.get<TrainConfig>();

    c.model = detail::section(j, "model").get<DenoiserConfig>();
    c.model.image_size = o.image_size;
    c.model.timesteps = c.train.timesteps;
    c.probe = detail::section(j, "probe").get<probe::ProbeHyper>();

    const json sw = detail::section(j, "sweep");
    c.sweep.timesteps = sw.value("timesteps", d.sweep.timesteps);
    c.sweep.readouts = sw.value("readouts", d.sweep.readouts);
    if (sw.contains("seed_policy")) c.sweep.seed_policy = sw.at("seed_policy").get<features::SeedPolicy>();
    c.sweep.batch = sw.value("batch", d.sweep.batch);
    c.sweep.test_full_grid = sw.value("test_full_grid", d.sweep.test_full_grid);

    const json cl = detail::section(j, "cluster");
    c.cluster.enabled = cl.value("enabled", d.cluster.enabled);
    c.cluster.k = cl.value("k", d.cluster.k);
    c.cluster.restarts = cl.value("restarts", d.cluster.restarts);
    c.cluster.max_iter = cl.value("max_iter", d.cluster.max_iter);
    c.cluster.tol = cl.value("tol", d.cluster.tol);
    c.cluster.runs = cl.value("runs", d.cluster.runs);
    c.cluster.seed = cl.value("seed", d.cluster.seed);
    c.cluster.silhouette_max_points = cl.value("silhouette_max_points", d.cluster.silhouette_max_points);
    c.cluster.overlay_images = cl.value("overlay_images", d.cluster.overlay_images);
    c.cluster.mask_quantile = cl.value("mask_quantile", d.cluster.mask_quantile);

    const json od = detail::section(j, "ood");
    c.ood.checkpoint = od.value("checkpoint", d.ood.checkpoint);
    c.ood.t_star = od.value("t_star", d.ood.t_star);
    c.ood.ell_star = od.value("ell_star", d.ood.ell_star);
}

/// Validates the tree against the schema, converts and checks invariants. All failures are ConfigError.
inline ExperimentConfig parse_config(const json& j) {
    detail::check_schema(j, json(ExperimentConfig{}), "");
    ExperimentConfig c;
    try {
        c = j.get<ExperimentConfig>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
    const auto bytes = io::read_file(path);
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_config(j);
}

/// DPROBE_OUTPUT_DIR and DPROBE_WORKERS override the output path and worker count; nothing else.
inline void apply_environment(ExperimentConfig& c) {
    if (const char* out = std::getenv("DPROBE_OUTPUT_DIR"); out && *out) c.output_dir = out;
    if (const char* w = std::getenv("DPROBE_WORKERS"); w && *w) {
        char* end = nullptr;
        const long v = std::strtol(w, &end, 10);
        if (*end != '\0' || v < 1) throw ConfigError("DPROBE_WORKERS must be a positive integer, got '" + std::string(w) + "'");
        c.workers = static_cast<std::size_t>(v);
    }
}

/// The config without fields that cannot change results (output path, worker count).
inline json result_config(const ExperimentConfig& c) {
    json j = c;
    j.erase("output_dir");
    j.erase("workers");
    return j;
}

// ---------------------------------------------------------------------------
// Manifest.

struct StageRecord {
    std::string name;
    std::string key;
    std::string status;  ///< ran | cached | skipped | failed
    std::string note;
    double seconds = 0.0;
    std::vector<std::string> outputs;  ///< run-relative paths
};

struct RunManifest {
    std::string tool = tool_version;
    json config;
    std::string status = "running";
    std::string failed_stage;
    std::string error;
    std::vector<StageRecord> stages;
    std::map<std::string, std::string> artifacts;    ///< run-relative path -> sha256
    std::map<std::string, std::string> checkpoints;  ///< role -> sha256
    std::map<std::string, std::string> datasets;     ///< split -> content id
    json summary = json::object();
    fs::path run_dir;

    const StageRecord* stage(const std::string& name) const {
        for (const auto& s : stages)
            if (s.name == name) return &s;
        return nullptr;
    }

    json to_json() const {
        json st = json::array(), timings = json::object();
        for (const auto& s : stages) {
            st.push_back({{"name", s.name}, {"key", s.key}, {"status", s.status}, {"note", s.note}, {"outputs", s.outputs}});
            timings[s.name] = s.seconds;
        }
        json j{{"tool", tool},           {"status", status},       {"config", config},
               {"stages", st},           {"artifacts", artifacts}, {"checkpoints", checkpoints},
               {"datasets", datasets},   {"summary", summary},     {"timings", timings}};
        if (!failed_stage.empty()) {
            j["failed_stage"] = failed_stage;
            j["error"] = error;
        }
        return j;
    }

    static RunManifest from_json(const json& j, const fs::path& run_dir) {
        RunManifest m;
        m.tool = j.value("tool", std::string());
        m.config = j.at("config");
        m.status = j.value("status", std::string());
        m.failed_stage = j.value("failed_stage", std::string());
        m.error = j.value("error", std::string());
        const json timings = j.value("timings", json::object());
        for (const auto& s : j.at("stages")) {
            StageRecord r;
            r.name = s.at("name");
            r.key = s.value("key", std::string());
            r.status = s.at("status");
            r.note = s.value("note", std::string());
            r.outputs = s.value("outputs", std::vector<std::string>{});
            r.seconds = timings.value(r.name, 0.0);
            m.stages.push_back(std::move(r));
        }
        m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
        m.checkpoints = j.value("checkpoints", std::map<std::string, std::string>{});
        m.datasets = j.value("datasets", std::map<std::string, std::string>{});
        m.summary = j.value("summary", json::object());
        m.run_dir = run_dir;
        return m;
    }

    void write() const {
        io::write_file(run_dir / "manifest.json", to_json().dump(2) + "\n");
        std::ofstream log(run_dir / "history.jsonl", std::ios::app);
        log << to_json().dump() << "\n";
    }
};

inline RunManifest load_manifest(const fs::path& path) {
    const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
    const auto bytes = io::read_file(file);
    try {
        return RunManifest::from_json(json::parse(bytes.begin(), bytes.end()), file.parent_path());
    } catch (const json::exception& e) {
        throw DataError(file.string() + ": malformed manifest: " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Small CSV helpers.

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    const auto bytes = io::read_file(p);
    std::istringstream in(std::string(bytes.begin(), bytes.end()));
    std::vector<std::vector<std::string>> rows;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        rows.push_back(std::move(f));
    }
    return rows;
}

inline std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.8g", v);
    return buf;
}

inline std::string hash_json(const json& j) { return io::sha256_hex(j.dump()); }

inline std::vector<std::string> files_under(const fs::path& dir, const fs::path& root) {
    std::vector<std::string> out;
    if (!fs::exists(dir)) return out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "stage.json")
            out.push_back(fs::relative(e.path(), root).generic_string());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pipeline.

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"data", "train", "extract", "sweep", "cluster"};
    return names;
}

/// Feature readout maps for a few images at one (t, ell), with the extraction noise policy.
inline Tensor<float> readout_maps(const UNet<float>& net, const nn::ParamStore<float>& weights,
                                  const NoiseSchedule& schedule, const data::LabeledImageSet& set,
                                  std::span<const std::size_t> idx, int t, int ell, const features::SeedPolicy& policy) {
    const Tensor<float> x0 = to_model_domain(set.batch<float>(idx));
    Tensor<float> eps(x0.shape());
    const std::size_t per = set.pixels_per_image();
    for (std::size_t k = 0; k < idx.size(); ++k) {
        Rng rng(policy.seed, policy.stream_name(), static_cast<std::uint64_t>(set.ids[idx[k]]), static_cast<std::uint64_t>(t));
        for (std::size_t p = 0; p < per; ++p) eps[k * per + p] = static_cast<float>(rng.normal());
    }
    const auto nb = corrupt(schedule, x0, std::vector<int>(idx.size(), t), eps);
    ReadoutMap<float> maps;
    net.forward(weights, nb.xt, nb.t, {ell}, &maps, nullptr);
    return maps.at(ell).values;
}

class Pipeline {
public:
    explicit Pipeline(ExperimentConfig cfg, bool verbose = false) : cfg_(std::move(cfg)), verbose_(verbose) {
        cfg_.validate();
        root_ = cfg_.output_dir;
        manifest_.config = json(cfg_);
        manifest_.run_dir = root_;
    }

    const ExperimentConfig& config() const { return cfg_; }
    const fs::path& run_dir() const { return root_; }

    /// Runs data -> train -> extract -> sweep -> cluster, stopping after `until`. Stages whose
    /// outputs exist with matching input keys and content hashes are skipped.
    RunManifest run(const std::string& until = "cluster") {
        const auto& names = stage_names();
        const auto last = std::find(names.begin(), names.end(), until);
        if (last == names.end()) throw ConfigError("unknown stage '" + until + "'");
        fs::create_directories(root_);
        io::write_file(root_ / "config.json", json(cfg_).dump(2) + "\n");
        const std::size_t n = static_cast<std::size_t>(last - names.begin()) + 1;
        const std::function<void()> bodies[] = {[this] { stage_data(); }, [this] { stage_train(); },
                                                [this] { stage_extract(); }, [this] { stage_sweep(); },
                                                [this] { stage_cluster(); }};
        for (std::size_t i = 0; i < n; ++i) bodies[i]();
        manifest_.status = n == names.size() ? "complete" : "partial";
        finalize();
        return manifest_;
    }

private:
    ExperimentConfig cfg_;
    bool verbose_;
    fs::path root_;
    RunManifest manifest_;
    std::map<std::string, std::string> keys_;
    std::optional<data::Splits> splits_;
    std::string checkpoint_path_, checkpoint_hash_;
    std::map<std::string, features::FeatureGrid> grids_;
    json selection_;

    void log(const std::string& s) const {
        if (verbose_) std::clog << "[" << cfg_.name << "] " << s << "\n";
    }

    bool cache_hit(const fs::path& dir, const std::string& key) const {
        const auto meta = dir / "stage.json";
        if (!fs::exists(meta)) return false;
        try {
            const auto bytes = io::read_file(meta);
            const json j = json::parse(bytes.begin(), bytes.end());
            if (j.at("key") != key) return false;
            for (const auto& [rel, sha] : j.at("outputs").items()) {
                const auto p = root_ / rel;
                if (!fs::exists(p) || io::file_sha256(p) != sha.get<std::string>()) return false;
            }
            return true;
        } catch (const std::exception&) {
            return false;
        }
    }

    /// Runs `body` unless the stage directory holds outputs for the same key.
    void stage(const std::string& name, const json& inputs, const std::function<void(const fs::path&)>& body) {
        StageRecord rec;
        rec.name = name;
        rec.key = detail::hash_json(inputs);
        keys_[name] = rec.key;
        const fs::path dir = root_ / name;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            if (cache_hit(dir, rec.key)) {
                rec.status = "cached";
                rec.note = "cache hit";
                log(name + ": cached");
            } else {
                fs::remove_all(dir);
                fs::create_directories(dir);
                log(name + ": running");
                body(dir);
                json outs = json::object();
                for (const auto& rel : detail::files_under(dir, root_)) outs[rel] = io::file_sha256(root_ / rel);
                io::write_file(dir / "stage.json", json{{"stage", name}, {"key", rec.key}, {"outputs", outs}}.dump(2) + "\n");
                rec.status = "ran";
            }
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            rec.status = "failed";
            manifest_.stages.push_back(rec);
            manifest_.status = "failed";
            manifest_.failed_stage = name;
            manifest_.error = e.what();
            finalize();
            throw StageError(name, e.what());
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rec.outputs = detail::files_under(dir, root_);
        manifest_.stages.push_back(std::move(rec));
    }

    void skip(const std::string& name, const std::string& note) {
        StageRecord rec;
        rec.name = name;
        rec.status = "skipped";
        rec.note = note;
        manifest_.stages.push_back(rec);
        log(name + ": skipped (" + note + ")");
    }

    void finalize() {
        manifest_.artifacts.clear();
        for (const auto& s : manifest_.stages)
            for (const auto& rel : s.outputs)
                if (fs::exists(root_ / rel)) manifest_.artifacts[rel] = io::file_sha256(root_ / rel);
        fs::create_directories(root_);
        manifest_.write();
    }

    const data::Splits& splits() {
        if (!splits_) {
            const fs::path d = root_ / "data";
            splits_ = data::Splits{data::read_set(d, "train"), data::read_set(d, "val"), data::read_set(d, "test"), {}};
        }
        return *splits_;
    }

    void stage_data() {
        json inputs = json(cfg_).at("dataset");
        stage("data", inputs, [this](const fs::path& dir) {
            const auto& d = cfg_.dataset;
            data::LabeledImageSet set;
            json report = json::object();
            if (d.source == "synthetic") {
                auto spec = data::SyntheticSpec::fine_grained(d.classes, d.image_size, d.delta);
                spec.noise = d.noise;
                set = data::synthesize(spec, d.per_class, d.seed);
            } else {
                std::map<std::string, int> lm;
                if (!d.label_map.empty()) lm = data::read_label_map(d.label_map);
                data::IngestReport ir;
                set = data::ingest(d.path, d.image_size, lm, &ir);
                report["ingest"] = {{"loaded", ir.loaded}, {"skipped_corrupt", ir.skipped_corrupt},
                                    {"skipped_files", ir.skipped_files}};
            }
            auto sp = data::split(set, d.split);
            if (d.augment) {
                data::AugmentReport ar;
                sp.train = data::augment(sp.train, d.augmentation, &ar);
                report["augmentation"] = {{"added_per_class", ar.added_per_class}, {"warnings", ar.warnings}};
            }
            std::set<std::int64_t> train_parents(sp.train.parents.begin(), sp.train.parents.end());
            json hygiene = json::object();
            for (const auto* name : {"val", "test"}) {
                const auto& s = std::string(name) == "val" ? sp.val : sp.test;
                std::size_t aug = 0, shared = 0;
                for (std::size_t i = 0; i < s.size(); ++i) {
                    aug += s.provenance[i] == data::Provenance::augmented;
                    shared += train_parents.count(s.parents[i]);
                }
                if (aug || shared)
                    throw ContractError(std::string(name) + " split contains augmented or train-derived items");
                hygiene[name] = {{"augmented", aug}, {"shared_parents", shared}};
            }
            report["split_log"] = sp.log;
            report["hygiene"] = hygiene;
            report["counts"] = {{"train", sp.train.class_counts()}, {"val", sp.val.class_counts()},
                                {"test", sp.test.class_counts()}};
            report["class_names"] = set.class_names;
            data::write_set(dir, "train", sp.train);
            data::write_set(dir, "val", sp.val);
            data::write_set(dir, "test", sp.test);
            io::write_file(dir / "report.json", report.dump(2) + "\n");
            splits_ = std::move(sp);
        });
        const auto& sp = splits();
        manifest_.datasets = {{"train", features::dataset_id(sp.train)},
                              {"val", features::dataset_id(sp.val)},
                              {"test", features::dataset_id(sp.test)}};
        const auto bytes = io::read_file(root_ / "data" / "report.json");
        manifest_.summary["hygiene"] = json::parse(bytes.begin(), bytes.end()).at("hygiene");
    }

    void stage_train() {
        if (cfg_.ood.enabled()) {
            checkpoint_path_ = cfg_.ood.checkpoint;
            checkpoint_hash_ = io::file_sha256(checkpoint_path_);
            manifest_.checkpoints["source"] = checkpoint_hash_;
            skip("train", "probe-only run on frozen source checkpoint " + fs::path(checkpoint_path_).filename().string());
            return;
        }
        json inputs{{"datasets", manifest_.datasets}, {"model", cfg_.model}, {"train", cfg_.train}};
        stage("train", inputs, [this](const fs::path& dir) {
            const auto& sp = splits();
            UNet<float> net(cfg_.model);
            auto tc = cfg_.train;
            tc.verbose = verbose_;
            const auto r = train_loop(net, tc, sp.train, sp.val, dir, result_config(cfg_));
            const SnrBins bins(tc.build_schedule(), tc.snr_bins);
            const auto& best = *std::find_if(r.history.begin(), r.history.end(),
                                             [&](const EpochRecord& e) { return e.epoch == r.best_epoch; });
            std::string csv = "bin,log_snr_center,train,val,val_live\n";
            for (std::size_t i = 0; i < bins.size(); ++i)
                csv += std::to_string(i) + "," + detail::fmt(0.5 * (bins.edges[i] + bins.edges[i + 1])) + "," +
                       detail::fmt(best.train_bins[i]) + "," + detail::fmt(best.val_bins[i]) + "," +
                       detail::fmt(best.val_live_bins[i]) + "\n";
            io::write_file(dir / "loss_vs_snr.csv", csv);
        });
        checkpoint_path_ = (root_ / "train" / "best.dprb").string();
        checkpoint_hash_ = io::file_sha256(checkpoint_path_);
        manifest_.checkpoints["best"] = checkpoint_hash_;
        manifest_.checkpoints["last"] = io::file_sha256(root_ / "train" / "last.dprb");
        const auto rows = detail::read_csv(root_ / "train" / "curves.csv");
        for (std::size_t i = 1; i < rows.size(); ++i)
            if (rows[i].back() == "1") manifest_.summary["selected_epoch"] = std::stoi(rows[i][0]);
        manifest_.summary["epochs"] = static_cast<int>(rows.size()) - 1;
    }

    LoadedCheckpoint<float> frozen_backbone() const {
        auto ck = load_checkpoint<float>(checkpoint_path_);
        if (ck.sha256 != checkpoint_hash_) throw ContractError("checkpoint changed since it was hashed");
        const auto& c = ck.net->config();
        if (c.image_size != cfg_.dataset.image_size) throw ShapeError("checkpoint image size differs from the dataset");
        if (c.timesteps != cfg_.train.timesteps) throw ConfigError("checkpoint T differs from schedule.T");
        ck.net->set_frozen(true);
        return ck;
    }

    void stage_extract() {
        const auto ts = cfg_.grid_timesteps();
        const auto ells = cfg_.grid_readouts();
        json inputs{{"checkpoint", checkpoint_hash_}, {"datasets", manifest_.datasets},  {"timesteps", ts},
                    {"readouts", ells},               {"seed_policy", cfg_.sweep.seed_policy},
                    {"batch", cfg_.sweep.batch},      {"schedule", json(cfg_).at("schedule")}};
        stage("extract", inputs, [&](const fs::path& dir) {
            const auto ck = frozen_backbone();
            const auto weights = ck.net->params().has_ema() ? ck.net->params().ema_view() : ck.net->params();
            const auto schedule = cfg_.train.build_schedule();
            features::ExtractOptions opt;
            opt.seed_policy = cfg_.sweep.seed_policy;
            opt.batch = cfg_.sweep.batch;
            opt.workers = cfg_.workers;
            opt.checkpoint_hash = checkpoint_hash_;
            const auto& sp = splits();
            for (const auto& [name, set] : {std::pair{"train", &sp.train}, {"val", &sp.val}, {"test", &sp.test}}) {
                auto g = features::extract_grid(*ck.net, weights, schedule, *set, ts, ells, opt);
                features::write_grid(dir / name, g);
                grids_[name] = std::move(g);
            }
            if (io::file_sha256(checkpoint_path_) != checkpoint_hash_)
                throw ContractError("feature extraction modified the checkpoint");
        });
        for (const char* name : {"train", "val", "test"})
            if (!grids_.count(name)) grids_[name] = features::read_grid(root_ / "extract" / name, ts, ells, checkpoint_hash_);
        manifest_.summary["backbone_updates"] = 0;
        manifest_.summary["checkpoint_hash_after"] = io::file_sha256(checkpoint_path_);
        if (manifest_.summary["checkpoint_hash_after"] != checkpoint_hash_)
            throw StageError("extract", "checkpoint hash changed");
    }

    void stage_sweep() {
        json inputs{{"extract", keys_.at("extract")}, {"probe", cfg_.probe}, {"test_full_grid", cfg_.sweep.test_full_grid}};
        stage("sweep", inputs, [this](const fs::path& dir) {
            const auto& sp = splits();
            probe::SweepOptions opt;
            opt.hyper = cfg_.probe;
            opt.classes = sp.train.class_count();
            opt.test_full_grid = cfg_.sweep.test_full_grid;
            opt.workers = cfg_.workers;
            opt.class_names = sp.train.class_names;
            const auto r = probe::sweep({&grids_.at("train"), sp.train.labels}, {&grids_.at("val"), sp.val.labels},
                                        {&grids_.at("test"), sp.test.labels}, opt);
            io::write_file(dir / "sweep.csv", probe::sweep_csv(r));
            io::write_file(dir / "selection.json", probe::selection_json(r).dump(2) + "\n");
            const auto schedule = cfg_.train.build_schedule();
            std::string csv = "t,log_snr,best_ell,val_accuracy,test_accuracy\n";
            for (int t : grids_.at("train").timesteps) {
                const probe::CellResult* best = nullptr;
                for (const auto& c : r.cells)
                    if (c.t == t && (!best || c.val.accuracy > best->val.accuracy)) best = &c;
                csv += std::to_string(t) + "," + detail::fmt(schedule.log_snr(t)) + "," + std::to_string(best->ell) +
                       "," + detail::fmt(best->val.accuracy) + "," +
                       (best->test ? detail::fmt(best->test->accuracy) : std::string("nan")) + "\n";
            }
            io::write_file(dir / "accuracy_vs_snr.csv", csv);
        });
        const auto bytes = io::read_file(root_ / "sweep" / "selection.json");
        selection_ = json::parse(bytes.begin(), bytes.end());
        manifest_.summary["selection"] = selection_;
    }

    void stage_cluster() {
        if (!cfg_.cluster.enabled) {
            skip("cluster", "disabled in config");
            return;
        }
        json cl = json(cfg_).at("cluster");
        json inputs{{"extract", keys_.at("extract")}, {"selection", selection_}, {"cluster", cl}};
        stage("cluster", inputs, [this](const fs::path& dir) {
            const auto& sp = splits();
            const int t = selection_.at("t_star"), ell = selection_.at("ell_star");
            const auto& X = grids_.at("test").at(t, ell);
            const std::size_t k = cfg_.cluster.k ? cfg_.cluster.k : sp.train.class_count();
            json runs = json::array();
            std::map<std::string, double> mean;
            for (std::size_t r = 0; r < cfg_.cluster.runs; ++r) {
                cluster::KMeansOptions opt;
                opt.k = k;
                opt.restarts = cfg_.cluster.restarts;
                opt.max_iter = cfg_.cluster.max_iter;
                opt.tol = cfg_.cluster.tol;
                opt.seed = derive_seed(cfg_.cluster.seed, "cluster-run", r);
                const auto km = cluster::kmeans(X, opt);
                const auto m = cluster::cluster_metrics(km.best.assignments, sp.test.labels, X,
                                                        cfg_.cluster.silhouette_max_points, opt.seed);
                json mj = cluster::metrics_json(m);
                for (const auto& [name, v] : mj.items()) mean[name] += v.get<double>() / static_cast<double>(cfg_.cluster.runs);
                mj["inertia"] = km.best.inertia;
                mj["iterations"] = km.best.iterations;
                runs.push_back(mj);
            }
            json report{{"t", t}, {"ell", ell}, {"k", k}, {"n", X.rows}, {"runs", runs}, {"mean", mean}};

            if (cfg_.cluster.overlay_images) {
                const auto ck = frozen_backbone();
                const auto weights = ck.net->params().has_ema() ? ck.net->params().ema_view() : ck.net->params();
                std::vector<std::size_t> idx(std::min(cfg_.cluster.overlay_images, sp.test.size()));
                std::iota(idx.begin(), idx.end(), 0);
                const auto z = readout_maps(*ck.net, weights, cfg_.train.build_schedule(), sp.test, idx, t, ell,
                                            cfg_.sweep.seed_policy);
                const auto ov = cluster::pca_tokens(z, cfg_.cluster.mask_quantile);
                const std::size_t h = ov.height, w = ov.width, S = h * w;
                fs::create_directories(dir / "overlay");
                for (std::size_t i = 0; i < ov.n; ++i) {
                    char stem[32];
                    std::snprintf(stem, sizeof stem, "%03zu", i);
                    io::write_file(dir / "overlay" / (std::string(stem) + "_input.pgm"),
                                   data::encode_pgm(sp.test.image(idx[i]), sp.test.height, sp.test.width));
                    io::write_file(dir / "overlay" / (std::string(stem) + "_pca.ppm"),
                                   data::encode_ppm({ov.rgb.data() + i * S * 3, S * 3}, h, w));
                    std::vector<float> mask(S);
                    for (std::size_t p = 0; p < S; ++p) mask[p] = ov.mask[i * S + p] ? 0.0f : 1.0f;
                    io::write_file(dir / "overlay" / (std::string(stem) + "_mask.pgm"), data::encode_pgm(mask, h, w));
                }
                report["overlay"] = {{"images", ov.n}, {"height", h}, {"width", w}, {"explained", ov.explained},
                                     {"warnings", ov.warnings}};
            }
            io::write_file(dir / "cluster.json", report.dump(2) + "\n");
        });
        const auto bytes = io::read_file(root_ / "cluster" / "cluster.json");
        manifest_.summary["cluster"] = json::parse(bytes.begin(), bytes.end()).at("mean");
    }
};

inline RunManifest run_pipeline(const ExperimentConfig& cfg, const std::string& until = "cluster", bool verbose = false) {
    return Pipeline(cfg, verbose).run(until);
}

// ---------------------------------------------------------------------------
// Reports.

struct Report {
    fs::path dir;
    std::vector<fs::path> files;
    std::string text;
};

/// Summary markdown plus plot-data CSVs: accuracy grid, accuracy and loss against log SNR, and the
/// per-epoch overfitting panel. Throws DataError naming every missing artifact.
inline Report report(const RunManifest& m, const fs::path& out = {}) {
    if (m.status != "complete" && m.status != "partial")
        throw ContractError("report: run did not complete (status '" + m.status + "')");
    std::vector<std::string> missing;
    for (const auto& [rel, sha] : m.artifacts)
        if (!fs::exists(m.run_dir / rel)) missing.push_back(rel);
    if (!missing.empty()) {
        std::string s = "report: missing artifacts:";
        for (const auto& r : missing) s += " " + r;
        throw DataError(s);
    }
    Report rep;
    rep.dir = out.empty() ? m.run_dir / "report" : out;
    fs::create_directories(rep.dir);
    const auto ran = [&](const std::string& s) {
        const auto* st = m.stage(s);
        return st && (st->status == "ran" || st->status == "cached");
    };
    const auto copy = [&](const std::string& rel, const std::string& name) {
        fs::copy_file(m.run_dir / rel, rep.dir / name, fs::copy_options::overwrite_existing);
        rep.files.push_back(rep.dir / name);
    };
    std::ostringstream md;
    md << "# " << m.config.value("name", std::string("run")) << "\n\n";
    md << "- tool: " << m.tool << "\n";
    md << "- weighting: " << m.config.at("weighting").at("kind").get<std::string>()
       << ", sampler: " << m.config.at("sampler").at("kind").get<std::string>() << "\n";
    for (const auto& [split, id] : m.datasets) md << "- " << split << " split id: " << id.substr(0, 16) << "\n";

    md << "\n## Training\n\n";
    if (ran("train")) {
        copy("train/curves.csv", "overfitting.csv");
        copy("train/loss_vs_snr.csv", "loss_vs_snr.csv");
        md << "Epochs: " << m.summary.value("epochs", 0) << "; minimum validation loss at epoch "
           << m.summary.value("selected_epoch", 0) << " (checkpoint used for probing).\n";
    } else {
        const auto* st = m.stage("train");
        md << "Not trained in this run" << (st && !st->note.empty() ? ": " + st->note : std::string()) << ".\n";
    }

    if (ran("sweep")) {
        copy("sweep/accuracy_vs_snr.csv", "accuracy_vs_snr.csv");
        const auto rows = detail::read_csv(m.run_dir / "sweep" / "sweep.csv");
        std::set<int> ts, ells;
        std::map<std::tuple<std::string, int, int>, std::string> acc;
        std::map<int, std::string> res;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const int ell = std::stoi(rows[i][2]), t = std::stoi(rows[i][3]);
            ts.insert(t);
            ells.insert(ell);
            res[ell] = rows[i][0] + "," + rows[i][1];
            acc[{rows[i][4], ell, t}] = rows[i][5];
        }
        std::string grid = "split,resolution,block,ell";
        for (int t : ts) grid += ",t" + std::to_string(t);
        grid += "\n";
        md << "\n## Probe sweep (validation accuracy)\n\n| ell |";
        for (int t : ts) md << " t=" << t << " |";
        md << "\n|---|";
        for (std::size_t i = 0; i < ts.size(); ++i) md << "---|";
        md << "\n";
        for (const char* split : {"val", "test"})
            for (int ell : ells) {
                if (!acc.count({split, ell, *ts.begin()})) continue;
                grid += std::string(split) + "," + res[ell] + "," + std::to_string(ell);
                if (std::string(split) == "val") md << "| " << ell << " |";
                for (int t : ts) {
                    const auto it = acc.find({split, ell, t});
                    const std::string v = it == acc.end() ? "" : it->second;
                    grid += "," + v;
                    if (std::string(split) == "val") md << " " << v.substr(0, 5) << " |";
                }
                grid += "\n";
                if (std::string(split) == "val") md << "\n";
            }
        io::write_file(rep.dir / "grid.csv", grid);
        rep.files.push_back(rep.dir / "grid.csv");
        const auto& s = m.summary.at("selection");
        md << "\nSelected (t, ell) = (" << s.at("t_star") << ", " << s.at("ell_star") << "); val accuracy "
           << detail::fmt(s.at("val_acc")) << ", test accuracy " << detail::fmt(s.at("test_acc")) << ", test macro F1 "
           << detail::fmt(s.at("test_macro_f1")) << ".\n";
    }

    md << "\n## Clustering\n\n";
    if (ran("cluster")) {
        copy("cluster/cluster.json", "cluster.json");
        for (const auto& [k, v] : m.summary.at("cluster").items()) md << "- " << k << ": " << detail::fmt(v) << "\n";
    } else {
        md << "Clustering stage not run; section omitted.\n";
    }
    rep.text = md.str();
    io::write_file(rep.dir / "summary.md", rep.text);
    rep.files.push_back(rep.dir / "summary.md");
    return rep;
}

/// Joins two runs' loss-vs-SNR and accuracy-vs-SNR curves on log SNR (outer join, numeric order).
inline std::vector<fs::path> ablation(const RunManifest& a, const RunManifest& b, const fs::path& out) {
    const auto label = [](const RunManifest& m) {
        return m.config.at("weighting").at("kind").get<std::string>();
    };
    std::string la = label(a), lb = label(b);
    if (la == lb) {
        la = a.config.value("name", std::string("a"));
        lb = b.config.value("name", std::string("b"));
    }
    fs::create_directories(out);
    std::vector<fs::path> files;
    const auto join = [&](const std::string& rel, std::size_t key_col, std::size_t val_col, const std::string& name,
                          const std::string& what) {
        std::map<double, std::pair<std::string, std::string>> rows;
        for (int side = 0; side < 2; ++side) {
            const auto& m = side ? b : a;
            const auto p = m.run_dir / rel;
            if (!fs::exists(p)) throw DataError("ablation: missing artifact " + p.string());
            const auto csv = detail::read_csv(p);
            for (std::size_t i = 1; i < csv.size(); ++i) {
                auto& slot = rows[std::stod(csv[i][key_col])];
                (side ? slot.second : slot.first) = csv[i][val_col];
            }
        }
        std::string s = "log_snr," + what + "_" + la + "," + what + "_" + lb + "\n";
        for (const auto& [k, v] : rows) s += detail::fmt(k) + "," + v.first + "," + v.second + "\n";
        io::write_file(out / name, s);
        files.push_back(out / name);
    };
    join("train/loss_vs_snr.csv", 1, 3, "ablation_loss_vs_snr.csv", "val_loss");
    join("sweep/accuracy_vs_snr.csv", 1, 3, "ablation_accuracy_vs_snr.csv", "val_accuracy");
    return files;
}

}  // namespace dprobe::harness
