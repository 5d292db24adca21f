#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "data_synth.hpp"
#include "fusion.hpp"

namespace gmoe {

using json = nlohmann::json;

/// Invalid experiment configuration; `field` is a dotted path such as "model.tap_layer".
class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string field, const std::string& message)
        : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

struct ModelConfig {
    FusionStyle fusion = FusionStyle::Conv;
    GateActivation activation = GateActivation::ReLU;
    std::size_t tap_layer = 2;
    std::array<std::size_t, 3> expert_widths{8, 16, 32};
};

struct TrainConfig {
    std::size_t num_segments = 3;
    std::size_t batch_size_experts = 16;
    std::size_t batch_size_gate = 32;
    std::size_t batch_size_multitask = 8;
    double momentum = 0.9;
    double grad_clip = 40.0;
    double lr_initial = 0.01;
    double lr_reduced = 0.001;
    double expert_lr_initial = 0.01;
    double expert_lr_reduced = 0.001;
    double dropout_ratio = 0.8;
    double lambda_gate = 0.0;
    double lambda_multitask = 1.0;
    bool multitask = true;
    std::size_t patience = 5;
    std::size_t max_epochs_experts = 40;
    std::size_t max_epochs_gate = 40;
    std::uint64_t seed = 1;
};

enum class CropMode { Desk, Paper };

struct TestConfig {
    std::size_t num_samples = 5;
    CropMode crops = CropMode::Desk;
    std::size_t crop_size = 12;

    /// The 25-sample, ten-crop protocol.
    static TestConfig paper_scale() { return {25, CropMode::Paper, 12}; }
};

struct ExperimentConfig {
    DatasetSpec dataset;
    ModelConfig model;
    TrainConfig train;
    TestConfig test;
};

namespace detail {

class Reader {
public:
    Reader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "must be a JSON object");
    }

    ~Reader() = default;

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    bool has(const std::string& key) {
        seen_.insert(key);
        return obj_.contains(key);
    }

    const json& raw(const std::string& key) {
        seen_.insert(key);
        return obj_.at(key);
    }

    void require(const std::string& key) {
        if (!has(key)) throw ConfigError(field(key), "required field is missing");
    }

    template <class T>
    void number(const std::string& key, T& out) {
        if (!has(key)) return;
        const json& v = obj_.at(key);
        if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<long long>() < 0)) {
                throw ConfigError(field(key), "expected a non-negative integer");
            }
        } else if (!v.is_number()) {
            throw ConfigError(field(key), "expected a number");
        }
        out = v.get<T>();
    }

    void boolean(const std::string& key, bool& out) {
        if (!has(key)) return;
        if (!obj_.at(key).is_boolean()) throw ConfigError(field(key), "expected true or false");
        out = obj_.at(key).get<bool>();
    }

    std::string string(const std::string& key) {
        const json& v = raw(key);
        if (!v.is_string()) throw ConfigError(field(key), "expected a string");
        return v.get<std::string>();
    }

    /// Rejects keys that were never looked up.
    void finish() const {
        for (auto it = obj_.begin(); it != obj_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown field");
        }
    }

private:
    const json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void check(bool ok, const std::string& field, const std::string& message) {
    if (!ok) throw ConfigError(field, message);
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& doc) {
    ExperimentConfig cfg;
    detail::Reader root(doc, "");

    if (root.has("dataset")) {
        detail::Reader r(root.raw("dataset"), "dataset");
        DatasetSpec& d = cfg.dataset;
        r.number("spatial_classes", d.spatial_classes);
        r.number("temporal_classes", d.temporal_classes);
        r.number("both_classes", d.both_classes);
        r.number("videos_per_class", d.videos_per_class);
        r.number("frames", d.frames);
        r.number("height", d.height);
        r.number("width", d.width);
        r.number("flow_frames", d.flow_frames);
        r.number("train_fraction", d.train_fraction);
        r.number("val_fraction", d.val_fraction);
        r.number("test_fraction", d.test_fraction);
        r.number("noise", d.noise);
        r.number("degraded_fraction", d.degraded_fraction);
        r.number("shaky_fraction", d.shaky_fraction);
        r.number("seed", d.seed);
        r.finish();
    }

    root.require("model");
    {
        detail::Reader r(root.raw("model"), "model");
        r.require("fusion");
        try {
            cfg.model.fusion = parse_fusion_style(r.string("fusion"));
        } catch (const std::invalid_argument& e) {
            if (dynamic_cast<const ConfigError*>(&e)) throw;
            throw ConfigError("model.fusion", e.what());
        }
        r.require("activation");
        try {
            cfg.model.activation = parse_gate_activation(r.string("activation"));
        } catch (const std::invalid_argument& e) {
            if (dynamic_cast<const ConfigError*>(&e)) throw;
            throw ConfigError("model.activation", e.what());
        }
        r.require("tap_layer");
        r.number("tap_layer", cfg.model.tap_layer);
        detail::check(cfg.model.tap_layer >= 1 && cfg.model.tap_layer <= 3, "model.tap_layer", "must be 1, 2 or 3");
        if (r.has("expert_widths")) {
            const json& w = r.raw("expert_widths");
            detail::check(w.is_array() && w.size() == 3, "model.expert_widths", "expected three positive integers");
            for (std::size_t i = 0; i < 3; ++i) {
                detail::check(w[i].is_number_integer() && w[i].get<long long>() > 0, "model.expert_widths",
                              "expected three positive integers");
                cfg.model.expert_widths[i] = w[i].get<std::size_t>();
            }
        }
        r.finish();
    }

    if (root.has("train")) {
        detail::Reader r(root.raw("train"), "train");
        TrainConfig& t = cfg.train;
        r.number("num_segments", t.num_segments);
        r.number("batch_size_experts", t.batch_size_experts);
        r.number("batch_size_gate", t.batch_size_gate);
        r.number("batch_size_multitask", t.batch_size_multitask);
        r.number("momentum", t.momentum);
        r.number("grad_clip", t.grad_clip);
        r.number("lr_initial", t.lr_initial);
        r.number("lr_reduced", t.lr_reduced);
        r.number("expert_lr_initial", t.expert_lr_initial);
        r.number("expert_lr_reduced", t.expert_lr_reduced);
        r.number("dropout_ratio", t.dropout_ratio);
        r.number("lambda_gate", t.lambda_gate);
        r.number("lambda_multitask", t.lambda_multitask);
        r.boolean("multitask", t.multitask);
        r.number("patience", t.patience);
        r.number("max_epochs_experts", t.max_epochs_experts);
        r.number("max_epochs_gate", t.max_epochs_gate);
        r.number("seed", t.seed);
        r.finish();
    }

    if (root.has("test")) {
        detail::Reader r(root.raw("test"), "test");
        r.number("num_samples", cfg.test.num_samples);
        if (r.has("crops")) {
            const std::string c = r.string("crops");
            detail::check(c == "desk" || c == "paper", "test.crops", "expected \"desk\" or \"paper\"");
            cfg.test.crops = c == "desk" ? CropMode::Desk : CropMode::Paper;
        }
        r.number("crop_size", cfg.test.crop_size);
        r.finish();
    }
    root.finish();

    const TrainConfig& t = cfg.train;
    detail::check(t.num_segments >= 1, "train.num_segments", "must be at least 1");
    for (auto [v, name] : {std::pair{t.batch_size_experts, "train.batch_size_experts"},
                           std::pair{t.batch_size_gate, "train.batch_size_gate"},
                           std::pair{t.batch_size_multitask, "train.batch_size_multitask"},
                           std::pair{t.patience, "train.patience"}}) {
        detail::check(v >= 1, name, "must be positive");
    }
    for (auto [v, name] : {std::pair{t.momentum, "train.momentum"}, std::pair{t.grad_clip, "train.grad_clip"},
                           std::pair{t.lr_initial, "train.lr_initial"}, std::pair{t.lr_reduced, "train.lr_reduced"},
                           std::pair{t.expert_lr_initial, "train.expert_lr_initial"},
                           std::pair{t.expert_lr_reduced, "train.expert_lr_reduced"}}) {
        detail::check(v > 0.0, name, "must be positive");
    }
    detail::check(t.momentum < 1.0, "train.momentum", "must be below 1");
    detail::check(t.dropout_ratio >= 0.0 && t.dropout_ratio < 1.0, "train.dropout_ratio", "must lie in [0, 1)");
    detail::check(t.lambda_gate >= 0.0, "train.lambda_gate", "must be non-negative");
    detail::check(t.lambda_multitask >= 0.0, "train.lambda_multitask", "must be non-negative");
    detail::check(cfg.test.num_samples >= 1, "test.num_samples", "must be positive");
    if (cfg.test.crops == CropMode::Paper) {
        detail::check(cfg.test.crop_size > 0 && cfg.test.crop_size % 4 == 0 && cfg.test.crop_size <= cfg.dataset.height &&
                          cfg.test.crop_size <= cfg.dataset.width,
                      "test.crop_size", "must be a positive multiple of 4 no larger than the frame");
    }

    cfg.dataset.num_segments = t.num_segments;
    try {
        cfg.dataset.validate();
    } catch (const InfeasibleSpecError& e) {
        throw ConfigError("dataset", e.what());
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("--config", "cannot open " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("--config", std::string("not valid JSON: ") + e.what());
    }
    return parse_config(doc);
}

inline json to_json(const ExperimentConfig& c) {
    const DatasetSpec& d = c.dataset;
    const TrainConfig& t = c.train;
    return {
        {"dataset",
         {{"spatial_classes", d.spatial_classes}, {"temporal_classes", d.temporal_classes}, {"both_classes", d.both_classes},
          {"videos_per_class", d.videos_per_class}, {"frames", d.frames}, {"height", d.height}, {"width", d.width},
          {"flow_frames", d.flow_frames}, {"train_fraction", d.train_fraction}, {"val_fraction", d.val_fraction},
          {"test_fraction", d.test_fraction}, {"noise", d.noise}, {"degraded_fraction", d.degraded_fraction},
          {"shaky_fraction", d.shaky_fraction}, {"seed", d.seed}}},
        {"model",
         {{"fusion", to_string(c.model.fusion)}, {"activation", to_string(c.model.activation)},
          {"tap_layer", c.model.tap_layer}, {"expert_widths", c.model.expert_widths}}},
        {"train",
         {{"num_segments", t.num_segments}, {"batch_size_experts", t.batch_size_experts},
          {"batch_size_gate", t.batch_size_gate}, {"batch_size_multitask", t.batch_size_multitask},
          {"momentum", t.momentum}, {"grad_clip", t.grad_clip}, {"lr_initial", t.lr_initial}, {"lr_reduced", t.lr_reduced},
          {"expert_lr_initial", t.expert_lr_initial}, {"expert_lr_reduced", t.expert_lr_reduced},
          {"dropout_ratio", t.dropout_ratio}, {"lambda_gate", t.lambda_gate}, {"lambda_multitask", t.lambda_multitask},
          {"multitask", t.multitask}, {"patience", t.patience}, {"max_epochs_experts", t.max_epochs_experts},
          {"max_epochs_gate", t.max_epochs_gate}, {"seed", t.seed}}},
        {"test",
         {{"num_samples", c.test.num_samples}, {"crops", c.test.crops == CropMode::Desk ? "desk" : "paper"},
          {"crop_size", c.test.crop_size}}},
    };
}

}  // namespace gmoe
