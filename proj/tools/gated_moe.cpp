#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include <gmoe/ablation.hpp>
#include <gmoe/analysis.hpp>

namespace fs = std::filesystem;
using namespace gmoe;

namespace {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kDiverged = 3, kPartialAblation = 4 };

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "run";
    bool paper_scale_test = false;
    bool verbose = false;
};

ExperimentConfig resolve_config(const Globals& g) {
    if (g.config.empty()) throw ConfigError("--config", "a config file is required");
    ExperimentConfig cfg = load_config(g.config);
    if (g.seed) cfg.train.seed = *g.seed;
    if (g.paper_scale_test) cfg.test = TestConfig::paper_scale();
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void print_accuracy(const json& report) {
    const json& a = report["accuracy"];
    std::cout << "gated " << a["gated"].get<double>() << "  fixed " << a["fixed"].get<double>() << "  even "
              << a["even_average"].get<double>() << "  sci " << a["sci"].get<double>() << "  spatial "
              << a["spatial"].get<double>() << "  temporal " << a["temporal"].get<double>() << '\n';
}

struct Stores {
    CropStore test, val;
};

Stores crop_stores(const Experts& e, const Dataset& data, const ExperimentConfig& cfg) {
    return {build_crop_store(e, data.test, cfg.model.tap_layer, cfg.test, cfg.dataset.flow_frames),
            build_crop_store(e, data.val, cfg.model.tap_layer, cfg.test, cfg.dataset.flow_frames)};
}

TrainedModel model_from_checkpoint(const fs::path& path, const ExperimentConfig& cfg) {
    LoadedCheckpoint ck = load_stage_checkpoint(path, cfg);
    if (!ck.gate) throw ShapeMismatchError(path.string() + ": stage-1 checkpoint has no gate");
    TrainedModel m;
    m.experts = std::move(ck.experts);
    m.gate = std::move(*ck.gate);
    m.expert_hash_before_gate = m.expert_hash_after_gate = expert_hash(m.experts);
    m.resumed_from = ck.stage;
    return m;
}

int cmd_train(const Globals& g, const std::string& resume) {
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentConfig cfg = resolve_config(g);
    const Dataset data = generate_dataset(cfg.dataset);
    TrainOptions opts;
    opts.out_dir = g.out;
    if (!resume.empty()) opts.resume = resume;
    if (g.verbose) opts.log_stream = &std::cerr;
    TrainedModel m = train_pipeline(cfg, data, opts);
    const Stores s = crop_stores(m.experts, data, cfg);
    const json report = make_report(cfg, m, evaluate_model(m, cfg, s.test, s.val), detail::seconds_since(t0));
    write_text(fs::path(g.out) / "report.json", report.dump(2) + "\n");
    print_accuracy(report);
    return kOk;
}

int cmd_eval(const Globals& g, const std::string& checkpoint, const std::vector<double>& forced) {
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentConfig cfg = resolve_config(g);
    const Dataset data = generate_dataset(cfg.dataset);
    TrainedModel m = model_from_checkpoint(checkpoint, cfg);
    const Stores s = crop_stores(m.experts, data, cfg);
    std::optional<std::pair<double, double>> weights;
    if (!forced.empty()) weights = std::pair{forced[0], forced[1]};
    const json report = make_report(cfg, m, evaluate_model(m, cfg, s.test, s.val, weights), detail::seconds_since(t0));
    write_text(fs::path(g.out) / "report.json", report.dump(2) + "\n");
    print_accuracy(report);
    return kOk;
}

int cmd_ablate(const Globals& g, const std::string& grid_path, std::size_t threads) {
    const ExperimentConfig base = resolve_config(g);
    std::ifstream in(grid_path);
    if (!in) throw ConfigError("--grid", "cannot open " + grid_path);
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("--grid", e.what());
    }
    AblationGrid grid = parse_grid(doc);
    if (g.seed) grid.seeds = {*g.seed};
    const AblationResult r = run_ablation(base, grid, g.out, threads ? threads : ablation_threads());
    write_text(fs::path(g.out) / "cells.csv", cells_csv(r));
    const std::string table = table_csv(grid, r);
    write_text(fs::path(g.out) / "table.csv", table);
    std::cout << table;
    for (const CellResult& c : r.cells) {
        if (!c.report) std::cerr << "cell " << c.spec.name() << " failed: " << c.error << '\n';
    }
    return r.failures() ? kPartialAblation : kOk;
}

int cmd_export_weights(const Globals& g, const std::string& report_path, std::size_t bins) {
    std::ifstream in(report_path);
    if (!in) throw std::runtime_error("cannot open " + report_path);
    const WeightExport e = export_weights(json::parse(in), bins);
    write_text(fs::path(g.out) / "weights_scatter.csv", e.scatter_csv);
    write_text(fs::path(g.out) / "weights_histogram.csv", e.histogram_csv);
    std::cout << e.rows << " rows, spatial share std " << e.share_std << '\n';
    return kOk;
}

int cmd_project_features(const Globals& g, const std::string& checkpoint, const std::string& split) {
    const ExperimentConfig cfg = resolve_config(g);
    const Dataset data = generate_dataset(cfg.dataset);
    TrainedModel m = model_from_checkpoint(checkpoint, cfg);
    const auto& videos = split == "train" ? data.train : split == "val" ? data.val : data.test;
    const CropStore store = build_crop_store(m.experts, videos, cfg.model.tap_layer, cfg.test, cfg.dataset.flow_frames);
    Projection p;
    write_text(fs::path(g.out) / "projection.csv", projection_csv(gate_features(m.gate, cfg.model.activation, store), p));
    std::cout << "explained variance " << p.explained[0] << ' ' << p.explained[1] << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gated two-stream fusion: training, evaluation and ablation"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "experiment config (JSON)");
    app.add_option("--seed", g.seed, "override train.seed (ablate: run this seed only)");
    app.add_option("--out", g.out, "output directory")->capture_default_str();
    app.add_flag("--paper-scale-test", g.paper_scale_test, "25 samples x 10 crops test protocol");
    app.add_flag("-v,--verbose", g.verbose, "stream the training log to stderr");

    std::string resume;
    auto* train = app.add_subcommand("train", "run the three training stages, then evaluate");
    train->add_option("--resume", resume, "continue from a stage checkpoint")->check(CLI::ExistingFile);

    std::string checkpoint;
    std::vector<double> forced;
    auto* eval = app.add_subcommand("eval", "evaluate a gate checkpoint against every fusion baseline");
    eval->add_option("--checkpoint", checkpoint, "stage 2 or 3 checkpoint")->required()->check(CLI::ExistingFile);
    eval->add_option("--force-weights", forced, "fixed gate output (w_spatial w_temporal)")->expected(2);

    std::string grid_path;
    std::size_t threads = 0;
    auto* ablate = app.add_subcommand("ablate", "run an ablation grid");
    ablate->add_option("--grid", grid_path, "grid spec (JSON)")->required();
    ablate->add_option("--threads", threads, "concurrent cells (default GATED_MOE_THREADS or all cores)");

    std::string report_path;
    std::size_t bins = 10;
    auto* exportw = app.add_subcommand("export-weights", "write fusion-weight scatter and histogram CSVs");
    exportw->add_option("--report", report_path, "report.json")->required()->check(CLI::ExistingFile);
    exportw->add_option("--bins", bins, "histogram bins")->capture_default_str()->check(CLI::PositiveNumber);

    std::string project_ckpt, split = "test";
    auto* project = app.add_subcommand("project-features", "2-D PCA of gate trunk features");
    project->add_option("--checkpoint", project_ckpt, "stage 2 or 3 checkpoint")->required()->check(CLI::ExistingFile);
    project->add_option("--split", split, "train, val or test")->capture_default_str()->check(CLI::IsMember({"train", "val", "test"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kConfigError;
    }

    std::cout.precision(4);
    try {
        if (*train) return cmd_train(g, resume);
        if (*eval) return cmd_eval(g, checkpoint, forced);
        if (*ablate) return cmd_ablate(g, grid_path, threads);
        if (*exportw) return cmd_export_weights(g, report_path, bins);
        if (*project) return cmd_project_features(g, project_ckpt, split);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const ShapeMismatchError& e) {
        std::cerr << "checkpoint does not match config: " << e.what() << '\n';
        return kConfigError;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << '\n';
        return kDiverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
    return kFailure;
}
