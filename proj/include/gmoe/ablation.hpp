#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "evaluate.hpp"
#include "trainer.hpp"

namespace gmoe {

/// Axes of the ablation grid. Every cell shares the dataset seed; only model
/// and training seeds vary.
struct AblationGrid {
    std::vector<GateActivation> activations{GateActivation::ReLU, GateActivation::Softmax};
    std::vector<FusionStyle> fusions{FusionStyle::Concat, FusionStyle::Conv};
    std::vector<std::size_t> tap_layers{1, 2, 3};
    std::vector<bool> multitask{true, false};
    std::vector<std::uint64_t> seeds{1, 2, 3};

    std::size_t cells() const {
        return activations.size() * fusions.size() * tap_layers.size() * multitask.size() * seeds.size();
    }
};

/// Reads a grid from JSON; absent axes keep their defaults.
inline AblationGrid parse_grid(const json& doc) {
    AblationGrid g;
    detail::Reader r(doc, "grid");
    auto list = [&](const char* key, auto&& convert, auto& out) {
        if (!r.has(key)) return;
        const json& v = r.raw(key);
        const std::string field = std::string("grid.") + key;
        if (!v.is_array() || v.empty()) throw ConfigError(field, "expected a non-empty array");
        out.clear();
        for (const json& item : v) {
            try {
                out.push_back(convert(item));
            } catch (const ConfigError&) {
                throw;
            } catch (const std::exception& e) {
                throw ConfigError(field, e.what());
            }
        }
    };
    list("activations", [](const json& j) { return parse_gate_activation(j.get<std::string>()); }, g.activations);
    list("fusions", [](const json& j) { return parse_fusion_style(j.get<std::string>()); }, g.fusions);
    list("tap_layers", [](const json& j) {
        const auto t = j.get<std::size_t>();
        if (t < 1 || t > 3) throw ConfigError("grid.tap_layers", "tap layers must be 1, 2 or 3");
        return t;
    }, g.tap_layers);
    list("multitask", [](const json& j) { return j.get<bool>(); }, g.multitask);
    list("seeds", [](const json& j) { return j.get<std::uint64_t>(); }, g.seeds);
    r.finish();
    return g;
}

struct CellSpec {
    GateActivation activation = GateActivation::ReLU;
    FusionStyle fusion = FusionStyle::Conv;
    std::size_t tap_layer = 2;
    bool multitask = true;
    std::uint64_t seed = 1;

    std::string name() const {
        return std::string(to_string(activation)) + "_" + to_string(fusion) + "_tap" + std::to_string(tap_layer) +
               (multitask ? "_mt" : "_nomt") + "_s" + std::to_string(seed);
    }
};

inline std::vector<CellSpec> expand(const AblationGrid& g) {
    std::vector<CellSpec> out;
    for (std::uint64_t seed : g.seeds)
        for (GateActivation a : g.activations)
            for (FusionStyle f : g.fusions)
                for (std::size_t t : g.tap_layers)
                    for (bool mt : g.multitask) out.push_back({a, f, t, mt, seed});
    return out;
}

/// The base config with one cell's axes applied.
inline ExperimentConfig cell_config(const ExperimentConfig& base, const CellSpec& c) {
    ExperimentConfig cfg = base;
    cfg.model.activation = c.activation;
    cfg.model.fusion = c.fusion;
    cfg.model.tap_layer = c.tap_layer;
    cfg.train.multitask = c.multitask;
    cfg.train.seed = c.seed;
    return cfg;
}

/// Concurrency cap from GATED_MOE_THREADS, else the hardware thread count.
inline std::size_t ablation_threads() {
    if (const char* env = std::getenv("GATED_MOE_THREADS")) {
        try {
            const long n = std::stol(env);
            if (n >= 1) return static_cast<std::size_t>(n);
        } catch (const std::exception&) {
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs job(i) for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) job(i);
        });
    }
    for (std::thread& t : pool) t.join();
}

struct CellResult {
    CellSpec spec;
    std::optional<json> report;
    std::string error;
};

struct AblationResult {
    std::vector<CellResult> cells;
    std::size_t failures() const {
        return static_cast<std::size_t>(std::ranges::count_if(cells, [](const CellResult& c) { return !c.report; }));
    }
};

namespace detail {

struct SeedExperts {
    Experts experts;
    TrainLog log;
};

struct TapFeatures {
    std::vector<VideoBank> train, val;
    CropStore test_store, val_store;
};

/// Mean and sample standard deviation (0 for fewer than two values).
inline std::pair<double, double> mean_sd(const std::vector<double>& xs) {
    double mean = 0.0, sd = 0.0;
    if (xs.empty()) return {mean, sd};
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        for (double x : xs) sd += (x - mean) * (x - mean);
        sd = std::sqrt(sd / static_cast<double>(xs.size() - 1));
    }
    return {mean, sd};
}

}  // namespace detail

/// Runs every cell of the grid. Experts are trained once per seed and their
/// features computed once per (seed, tap layer); each cell then trains its
/// own gate in its own run directory. A failing cell is recorded and the
/// grid continues.
inline AblationResult run_ablation(const ExperimentConfig& base, const AblationGrid& grid, const std::filesystem::path& out_dir,
                                   std::size_t threads) {
    const Dataset data = generate_dataset(base.dataset);
    const std::vector<CellSpec> cells = expand(grid);

    std::vector<std::optional<detail::SeedExperts>> experts(grid.seeds.size());
    std::vector<std::string> expert_errors(grid.seeds.size());
    parallel_for(grid.seeds.size(), threads, [&](std::size_t i) {
        try {
            ExperimentConfig cfg = base;
            cfg.train.seed = grid.seeds[i];
            detail::SeedExperts se;
            se.experts = train_experts(cfg, data, se.log);
            experts[i] = std::move(se);
        } catch (const std::exception& e) {
            expert_errors[i] = std::string("stage 1: ") + e.what();
        }
    });

    const std::size_t taps = grid.tap_layers.size();
    std::vector<std::optional<detail::TapFeatures>> features(grid.seeds.size() * taps);
    parallel_for(features.size(), threads, [&](std::size_t i) {
        const std::size_t s = i / taps, t = grid.tap_layers[i % taps];
        if (!experts[s]) return;
        const Experts& e = experts[s]->experts;
        const std::size_t l = base.dataset.flow_frames;
        features[i] = detail::TapFeatures{build_feature_bank(e, data.train, t, l), build_feature_bank(e, data.val, t, l),
                                          build_crop_store(e, data.test, t, base.test, l),
                                          build_crop_store(e, data.val, t, base.test, l)};
    });

    AblationResult result;
    result.cells.resize(cells.size());
    parallel_for(cells.size(), threads, [&](std::size_t i) {
        const CellSpec& c = cells[i];
        CellResult& r = result.cells[i];
        r.spec = c;
        const std::size_t s = static_cast<std::size_t>(std::ranges::find(grid.seeds, c.seed) - grid.seeds.begin());
        const std::size_t t = static_cast<std::size_t>(std::ranges::find(grid.tap_layers, c.tap_layer) - grid.tap_layers.begin());
        if (!experts[s]) {
            r.error = expert_errors[s];
            return;
        }
        try {
            const auto t0 = std::chrono::steady_clock::now();
            const ExperimentConfig cfg = cell_config(base, c);
            const detail::TapFeatures& f = *features[s * taps + t];
            const auto dir = out_dir / "cells" / c.name();
            std::filesystem::create_directories(dir);
            TrainOptions opts;
            opts.out_dir = dir;
            opts.pretrained = &experts[s]->experts;
            opts.pretrained_log = &experts[s]->log;
            opts.train_bank = &f.train;
            opts.val_bank = &f.val;
            TrainedModel m = train_pipeline(cfg, data, opts);
            const EvaluationResult ev = evaluate_model(m, cfg, f.test_store, f.val_store);
            json report = make_report(cfg, m, ev, detail::seconds_since(t0));
            std::ofstream(dir / "report.json") << report.dump(2) << '\n';
            r.report = std::move(report);
        } catch (const std::exception& e) {
            r.error = e.what();
        }
    });
    return result;
}

/// One row per cell with every method's accuracy, or the error message.
inline std::string cells_csv(const AblationResult& r) {
    std::ostringstream out;
    out << "activation,fusion,tap_layer,multitask,seed,status,gated,gated_stage2,fixed,even_average,sci,spatial,temporal,"
           "dead_gate_rate,spatial_share_std,error\n";
    for (const CellResult& c : r.cells) {
        out << to_string(c.spec.activation) << ',' << to_string(c.spec.fusion) << ',' << c.spec.tap_layer << ','
            << (c.spec.multitask ? "on" : "off") << ',' << c.spec.seed << ',';
        if (!c.report) {
            std::string msg = c.error;
            std::ranges::replace(msg, '"', '\'');
            out << "failed,,,,,,,,,,\"" << msg << "\"\n";
            continue;
        }
        const json& a = (*c.report)["accuracy"];
        out << "ok," << a["gated"].get<double>() << ',' << (a.contains("gated_stage2") ? std::to_string(a["gated_stage2"].get<double>()) : "")
            << ',' << a["fixed"].get<double>() << ',' << a["even_average"].get<double>() << ',' << a["sci"].get<double>() << ','
            << a["spatial"].get<double>() << ',' << a["temporal"].get<double>() << ','
            << (*c.report)["dead_gate_rate"].get<double>() << ',' << (*c.report)["spatial_share_std"]["final"].get<double>() << ",\n";
    }
    return out.str();
}

/// Gated accuracy in the layout of the input-layer table: one row per
/// (activation, multitask, tap layer), mean and sample sd over seeds for each
/// fusion style.
inline std::string table_csv(const AblationGrid& grid, const AblationResult& r) {
    std::ostringstream out;
    out << "activation,multitask,tap_layer";
    for (FusionStyle f : grid.fusions) out << ',' << to_string(f) << "_mean," << to_string(f) << "_sd," << to_string(f) << "_n";
    out << '\n';
    for (GateActivation a : grid.activations)
        for (bool mt : grid.multitask)
            for (std::size_t t : grid.tap_layers) {
                out << to_string(a) << ',' << (mt ? "on" : "off") << ',' << t;
                for (FusionStyle f : grid.fusions) {
                    std::vector<double> xs;
                    for (const CellResult& c : r.cells) {
                        if (c.report && c.spec.activation == a && c.spec.multitask == mt && c.spec.tap_layer == t &&
                            c.spec.fusion == f) {
                            xs.push_back((*c.report)["accuracy"]["gated"].get<double>());
                        }
                    }
                    const auto [mean, sd] = detail::mean_sd(xs);
                    if (xs.empty()) {
                        out << ",,,0";
                    } else {
                        out << ',' << mean << ',' << sd << ',' << xs.size();
                    }
                }
                out << '\n';
            }
    return out.str();
}

}  // namespace gmoe
