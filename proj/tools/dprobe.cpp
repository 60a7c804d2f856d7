// SPDX-License-Identifier: Apache-2.0
// dprobe: command-line front end for the diffusion-feature pipeline.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

#include "dprobe/harness.hpp"

using namespace dprobe;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int exit_config = 2;
constexpr int exit_stage = 3;

std::vector<int> parse_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    for (std::string tok; std::getline(ss, tok, ',');) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            throw ConfigError("expected a comma-separated integer list, got '" + s + "'");
        }
    }
    return out;
}

struct Common {
    std::string config;
    std::string out;
    std::size_t workers = 0;
    bool verbose = false;
};

harness::ExperimentConfig load(const Common& c) {
    auto cfg = harness::load_config(c.config);
    harness::apply_environment(cfg);
    if (!c.out.empty()) cfg.output_dir = c.out;
    if (c.workers) cfg.workers = c.workers;
    return cfg;
}

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--out", c.out, "Run directory (overrides config and DPROBE_OUTPUT_DIR)");
    sub->add_option("--workers", c.workers, "Worker threads (results do not depend on it)");
    sub->add_flag("-v,--verbose", c.verbose, "Log stage progress");
}

void print_stages(const harness::RunManifest& m) {
    for (const auto& s : m.stages)
        std::printf("%-8s %-7s %8.2fs %s\n", s.name.c_str(), s.status.c_str(), s.seconds, s.note.c_str());
    std::printf("manifest: %s\n", (m.run_dir / "manifest.json").string().c_str());
}

int run_until(const Common& c, const std::string& until) {
    if (c.config.empty()) throw ConfigError("--config is required");
    const auto m = harness::run_pipeline(load(c), until, c.verbose);
    print_stages(m);
    return 0;
}

void write_readout_table(const DenoiserConfig& d) {
    std::printf("ell,r,b,channels,height,width\n");
    for (const auto& r : readout_table(d))
        std::printf("%d,%d,%d,%zu,%zu,%zu\n", r.ell, r.id.r, r.id.b, r.channels, r.height, r.width);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Diffusion feature probing laboratory"};
    app.require_subcommand(1);
    app.set_version_flag("--version", harness::tool_version);

    Common common;
    std::string until = "cluster";
    auto* run = app.add_subcommand("run", "Run the full pipeline (data, train, extract, sweep, cluster)");
    add_common(run, common);
    run->add_option("--until", until, "Last stage to run")
        ->check(CLI::IsMember({"data", "train", "extract", "sweep", "cluster"}));
    auto* data_cmd = app.add_subcommand("data", "Build and split the dataset");
    add_common(data_cmd, common);
    auto* train = app.add_subcommand("train", "Train the denoiser (runs the data stage first)");
    add_common(train, common);
    auto* sweep = app.add_subcommand("sweep", "Extract features and run the (t, ell) probe sweep");
    add_common(sweep, common);

    auto* extract = app.add_subcommand("extract", "Extract pooled features for a timestep/readout grid");
    add_common(extract, common);
    std::string ex_checkpoint, ex_data, ex_split = "test", ex_timesteps = "1,10,25,50,75,100,200,400,600",
                                        ex_readouts = "all";
    std::uint64_t ex_seed = 0;
    std::size_t ex_batch = 32;
    extract->add_option("--checkpoint", ex_checkpoint, "Checkpoint (standalone mode)")->check(CLI::ExistingFile);
    extract->add_option("--data", ex_data, "Directory holding <split>.dpim/.labels (standalone mode)");
    extract->add_option("--split", ex_split, "Split stem");
    extract->add_option("--timesteps", ex_timesteps, "Comma-separated timesteps");
    extract->add_option("--readouts", ex_readouts, "Comma-separated readouts or 'all'");
    extract->add_option("--seed", ex_seed, "Noise seed");
    extract->add_option("--batch", ex_batch, "Images per forward pass");

    auto* ood = app.add_subcommand("probe-ood", "Probe a frozen source checkpoint on a target dataset");
    add_common(ood, common);
    std::string ood_checkpoint, ood_selection;
    ood->add_option("--checkpoint", ood_checkpoint, "Source checkpoint")->required()->check(CLI::ExistingFile);
    ood->add_option("--selection", ood_selection, "Source selection.json with t_star and ell_star")
        ->required()
        ->check(CLI::ExistingFile);

    auto* cluster_cmd = app.add_subcommand("cluster", "k-means diagnostics on cached features");
    add_common(cluster_cmd, common);
    std::string cl_features, cl_labels, cl_report;
    int cl_t = 0, cl_ell = 0;
    std::size_t cl_k = 0, cl_restarts = 5;
    std::uint64_t cl_seed = 0;
    cluster_cmd->add_option("--features", cl_features, "Feature cache directory (standalone mode)");
    cluster_cmd->add_option("--labels", cl_labels, "Label file '<index>,<class>'");
    cluster_cmd->add_option("--t", cl_t, "Timestep of the cell");
    cluster_cmd->add_option("--ell", cl_ell, "Readout of the cell");
    cluster_cmd->add_option("--k", cl_k, "Number of clusters (default: number of labels)");
    cluster_cmd->add_option("--restarts", cl_restarts, "k-means restarts");
    cluster_cmd->add_option("--seed", cl_seed, "k-means seed");
    cluster_cmd->add_option("--report", cl_report, "Output JSON (default: stdout)");

    auto* report = app.add_subcommand("report", "Summarize a run and emit plot data");
    std::string rp_manifest, rp_against, rp_out;
    report->add_option("--manifest", rp_manifest, "Run directory or manifest.json")->required();
    report->add_option("--against", rp_against, "Second run for a joined ablation");
    report->add_option("--out", rp_out, "Report directory (default: <run>/report)");

    auto* describe = app.add_subcommand("describe", "Print the decoder readout table");
    std::string ds_config, ds_checkpoint;
    describe->add_option("--config", ds_config, "Experiment config")->check(CLI::ExistingFile);
    describe->add_option("--checkpoint", ds_checkpoint, "Checkpoint")->check(CLI::ExistingFile);

    auto* dump = app.add_subcommand("schedule-dump", "Write the schedule, weights and p(t) as CSV");
    std::string sd_kind = "cosine", sd_sampler = "squared_cosine", sd_out;
    int sd_T = 1000;
    double sd_s = 0.008, sd_gamma = 5.0;
    dump->add_option("--schedule", sd_kind, "linear|cosine");
    dump->add_option("--T", sd_T, "Number of timesteps");
    dump->add_option("--s", sd_s, "Cosine offset");
    dump->add_option("--gamma", sd_gamma, "MinSNR gamma");
    dump->add_option("--sampler", sd_sampler, "uniform|squared_cosine|schedule_cos2");
    dump->add_option("--out", sd_out, "Output CSV (default: stdout)");

    auto* sample = app.add_subcommand("sample", "Draw images from a checkpoint");
    std::string sm_checkpoint, sm_sampler = "ddim", sm_out;
    int sm_steps = 100;
    double sm_eta = 0.0;
    std::size_t sm_n = 8;
    std::uint64_t sm_seed = 0;
    sample->add_option("--checkpoint", sm_checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
    sample->add_option("--sampler", sm_sampler, "ddpm|ddim")->check(CLI::IsMember({"ddpm", "ddim"}));
    sample->add_option("--steps", sm_steps, "DDIM steps");
    sample->add_option("--eta", sm_eta, "DDIM eta");
    sample->add_option("--n", sm_n, "Number of images");
    sample->add_option("--seed", sm_seed, "Sampling seed");
    sample->add_option("--out", sm_out, "Output directory")->required();

    auto* config_cmd = app.add_subcommand("config", "Print a config preset");
    std::string cf_preset = "desk";
    config_cmd->add_option("--preset", cf_preset, "desk|default")->check(CLI::IsMember({"desk", "default"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : exit_config;
    }

    try {
        if (*run) return run_until(common, until);
        if (*data_cmd) return run_until(common, "data");
        if (*train) return run_until(common, "train");
        if (*sweep) return run_until(common, "sweep");

        if (*extract) {
            if (!common.config.empty()) return run_until(common, "extract");
            if (ex_checkpoint.empty() || ex_data.empty() || common.out.empty())
                throw ConfigError("extract needs --config, or --checkpoint, --data and --out");
            auto ck = load_checkpoint<float>(ex_checkpoint);
            ck.net->set_frozen(true);
            const auto set = data::read_set(ex_data, ex_split);
            std::vector<int> ells;
            if (ex_readouts == "all")
                for (const auto& r : ck.net->readouts()) ells.push_back(r.ell);
            else
                ells = parse_ints(ex_readouts);
            TrainConfig tc;
            if (!ck.meta.training.empty() && ck.meta.training.contains("schedule") && ck.meta.training.at("schedule").is_object())
                tc = harness::parse_config(ck.meta.training).train;
            else if (!ck.meta.training.empty())
                tc = ck.meta.training.get<TrainConfig>();
            features::ExtractOptions opt;
            opt.seed_policy.seed = ex_seed;
            opt.batch = ex_batch;
            opt.workers = common.workers ? common.workers : 1;
            opt.checkpoint_hash = ck.sha256;
            const auto weights = ck.net->params().has_ema() ? ck.net->params().ema_view() : ck.net->params();
            const auto grid = features::extract_grid(*ck.net, weights, tc.build_schedule(), set, parse_ints(ex_timesteps),
                                                     ells, opt);
            fs::create_directories(common.out);
            const auto paths = features::write_grid(common.out, grid);
            std::printf("wrote %zu cells to %s\n", paths.size(), common.out.c_str());
            return 0;
        }

        if (*ood) {
            if (common.config.empty()) throw ConfigError("probe-ood needs --config for the target dataset");
            auto cfg = load(common);
            const auto bytes = io::read_file(ood_selection);
            const auto sel = json::parse(bytes.begin(), bytes.end());
            cfg.ood.checkpoint = ood_checkpoint;
            cfg.ood.t_star = sel.at("t_star");
            cfg.ood.ell_star = sel.at("ell_star");
            cfg.validate();
            const auto m = harness::run_pipeline(cfg, "cluster", common.verbose);
            print_stages(m);
            std::printf("%s\n", m.summary.at("selection").dump().c_str());
            return 0;
        }

        if (*cluster_cmd) {
            if (!common.config.empty()) return run_until(common, "cluster");
            if (cl_features.empty() || cl_labels.empty() || !cl_t || !cl_ell)
                throw ConfigError("cluster needs --config, or --features, --labels, --t and --ell");
            const auto grid = features::read_grid(cl_features, {cl_t}, {cl_ell});
            const auto& X = grid.at(cl_t, cl_ell);
            const auto labels = data::read_labels(cl_labels);
            if (labels.size() != X.rows) throw DataError("label count does not match feature rows");
            cluster::KMeansOptions opt;
            opt.k = cl_k ? cl_k : std::set<int>(labels.begin(), labels.end()).size();
            opt.restarts = cl_restarts;
            opt.seed = cl_seed;
            const auto km = cluster::kmeans(X, opt);
            json out = cluster::metrics_json(cluster::cluster_metrics(km.best.assignments, labels, X, 5000, cl_seed));
            out["k"] = opt.k;
            out["inertia"] = km.best.inertia;
            out["restart_inertia"] = km.restart_inertia;
            if (cl_report.empty())
                std::printf("%s\n", out.dump(2).c_str());
            else
                io::write_file(cl_report, out.dump(2) + "\n");
            return 0;
        }

        if (*report) {
            const auto m = harness::load_manifest(rp_manifest);
            const auto r = harness::report(m, rp_out);
            for (const auto& f : r.files) std::printf("%s\n", f.string().c_str());
            if (!rp_against.empty())
                for (const auto& f : harness::ablation(m, harness::load_manifest(rp_against), r.dir))
                    std::printf("%s\n", f.string().c_str());
            return 0;
        }

        if (*describe) {
            if (!ds_checkpoint.empty())
                write_readout_table(load_checkpoint<float>(ds_checkpoint).net->config());
            else if (!ds_config.empty())
                write_readout_table(harness::load_config(ds_config).model);
            else
                write_readout_table(harness::ExperimentConfig::desk().model);
            return 0;
        }

        if (*dump) {
            const auto s = NoiseSchedule::build(schedule_kind_from_string(sd_kind), sd_T, sd_s);
            const TimestepSampler sampler(sampler_kind_from_string(sd_sampler), sd_T, sd_s);
            const auto csv = schedule_csv(s, sd_gamma, sampler);
            if (sd_out.empty())
                std::fwrite(csv.data(), 1, csv.size(), stdout);
            else
                io::write_file(sd_out, csv);
            return 0;
        }

        if (*sample) {
            auto ck = load_checkpoint<float>(sm_checkpoint);
            ck.net->set_frozen(true);
            const auto& d = ck.net->config();
            const auto weights = ck.net->params().has_ema() ? ck.net->params().ema_view() : ck.net->params();
            TrainConfig tc;
            if (ck.meta.training.contains("schedule") && ck.meta.training.at("schedule").is_object())
                tc = harness::parse_config(ck.meta.training).train;
            else if (!ck.meta.training.empty())
                tc = ck.meta.training.get<TrainConfig>();
            const auto s = tc.build_schedule();
            NoisePredictor<float> model = [&](const Tensor<float>& x, std::span<const int> ts) {
                return ck.net->predict_noise(weights, x, ts);
            };
            Rng rng(sm_seed, "sample");
            const Shape item{d.in_channels, d.image_size, d.image_size};
            const auto imgs = sm_sampler == "ddpm" ? ddpm_sample(model, s, sm_n, item, rng)
                                                   : ddim_sample(model, s, sm_n, item, sm_steps, sm_eta, rng);
            fs::create_directories(sm_out);
            const std::size_t per = d.image_size * d.image_size;
            io::write_file(fs::path(sm_out) / "samples.dpim",
                           data::encode_dpim(sm_n, d.image_size, d.image_size, imgs.values()));
            for (std::size_t i = 0; i < sm_n; ++i) {
                char name[32];
                std::snprintf(name, sizeof name, "sample_%03zu.pgm", i);
                io::write_file(fs::path(sm_out) / name,
                               data::encode_pgm({imgs.data() + i * per, per}, d.image_size, d.image_size));
            }
            std::printf("wrote %zu samples to %s\n", sm_n, sm_out.c_str());
            return 0;
        }

        if (*config_cmd) {
            const auto c = cf_preset == "desk" ? harness::ExperimentConfig::desk() : harness::ExperimentConfig{};
            std::printf("%s\n", json(c).dump(2).c_str());
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return exit_config;
    } catch (const StageError& e) {
        std::cerr << e.what() << "\n";
        return exit_stage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_stage;
    }
    return 0;
}
