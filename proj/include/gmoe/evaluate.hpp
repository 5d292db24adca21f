#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "baselines.hpp"
#include "config.hpp"
#include "data_synth.hpp"
#include "fusion.hpp"
#include "trainer.hpp"

namespace gmoe {

inline constexpr const char* kReportSchema = "gmoe-report";
inline constexpr int kReportSchemaVersion = 1;

/// Expert outputs for one crop of one temporal sample.
struct CropScores {
    FeaturePair taps;
    Tensor rgb;
    Tensor flow;
};

struct VideoCrops {
    std::string id;
    std::size_t label = 0;
    CueType cue = CueType::Both;
    std::vector<CropScores> crops;
    std::size_t spatial_evaluations = 0;
    std::size_t temporal_evaluations = 0;
};

/// Per-crop expert outputs shared by every fusion method in a report.
struct CropStore {
    std::vector<VideoCrops> videos;

    std::uint64_t hash() const {
        TensorHasher h;
        for (const VideoCrops& v : videos) {
            for (const CropScores& c : v.crops) {
                h.add(c.rgb);
                h.add(c.flow);
            }
        }
        return h.value();
    }
};

inline std::vector<Crop> protocol_crops(const TestConfig& test, std::size_t height, std::size_t width) {
    return test.crops == CropMode::Desk ? desk_crops() : ten_crops(height, width, test.crop_size);
}

inline CropStore build_crop_store(const Experts& e, const std::vector<SynthVideo>& videos, std::size_t tap_layer,
                                  const TestConfig& test, std::size_t flow_frames) {
    CropStore store;
    for (const SynthVideo& v : videos) {
        const auto crops = protocol_crops(test, v.frames.at(0).dim(0), v.frames.at(0).dim(1));
        VideoCrops vc{v.id, v.label, v.cue, {}, 0, 0};
        for (const TestSample& s : test_protocol(v, test.num_samples, crops, flow_frames)) {
            ExpertNet::Inference a = e.rgb.infer(s.snippet.spatial, tap_layer);
            ++vc.spatial_evaluations;
            ExpertNet::Inference b = e.flow.infer(s.snippet.temporal, tap_layer);
            ++vc.temporal_evaluations;
            vc.crops.push_back({{std::move(a.feature), std::move(b.feature)}, std::move(a.scores), std::move(b.scores)});
        }
        store.videos.push_back(std::move(vc));
    }
    return store;
}

/// Crop-averaged scores of each stream.
inline ExpertScores mean_scores(const VideoCrops& v) {
    std::vector<Tensor> a, b;
    for (const CropScores& c : v.crops) {
        a.push_back(c.rgb);
        b.push_back(c.flow);
    }
    return {segmental_consensus(a), segmental_consensus(b)};
}

inline std::vector<LabeledScores> labeled_mean_scores(const CropStore& store) {
    std::vector<LabeledScores> out;
    for (const VideoCrops& v : store.videos) out.push_back({mean_scores(v), v.label});
    return out;
}

struct WeightSample {
    std::string id;
    std::size_t label = 0;
    CueType cue = CueType::Both;
    double w_spatial = 0.0;   // mean over crops
    double w_temporal = 0.0;
    double dead_fraction = 0.0;
    std::size_t predicted = 0;
    bool correct = false;
};

struct GatedResult {
    double accuracy = 0.0;
    double dead_gate_rate = 0.0;
    std::vector<WeightSample> samples;
};

/// Gated fusion per crop (the gate sees a single snippet), averaged over the
/// video's crops. `forced` replaces the gate output with constant weights.
inline GatedResult evaluate_gated(GateNet& gate, GateActivation activation, const CropStore& store,
                                  std::optional<std::pair<double, double>> forced = {}) {
    GatedResult r;
    if (store.videos.empty()) return r;
    Rng unused(0);
    std::size_t dead = 0, crops = 0;
    for (const VideoCrops& v : store.videos) {
        WeightSample ws{v.id, v.label, v.cue};
        Tensor fused(v.crops.at(0).rgb.shape());
        for (const CropScores& c : v.crops) {
            double w1 = 0.0, w2 = 0.0;
            if (forced) {
                std::tie(w1, w2) = *forced;
            } else {
                const GateOutput out = gate_forward(gate, std::span<const FeaturePair>(&c.taps, 1), activation, false, unused);
                w1 = out.w1;
                w2 = out.w2;
                if (out.dead) {
                    ++dead;
                    ws.dead_fraction += 1.0;
                }
            }
            ++crops;
            ws.w_spatial += w1;
            ws.w_temporal += w2;
            fused += gated_fuse({c.rgb, c.flow}, w1, w2);
        }
        const double n = static_cast<double>(v.crops.size());
        ws.w_spatial /= n;
        ws.w_temporal /= n;
        ws.dead_fraction /= n;
        ws.predicted = fused.argmax();
        ws.correct = ws.predicted == v.label;
        r.accuracy += ws.correct ? 1.0 : 0.0;
        r.samples.push_back(ws);
    }
    r.accuracy /= static_cast<double>(store.videos.size());
    r.dead_gate_rate = static_cast<double>(dead) / static_cast<double>(crops);
    return r;
}

inline double stream_accuracy(const CropStore& store, Stream stream) {
    double correct = 0.0;
    for (const VideoCrops& v : store.videos) {
        const ExpertScores s = mean_scores(v);
        correct += (stream == Stream::Spatial ? s.g_rgb : s.g_flow).argmax() == v.label ? 1.0 : 0.0;
    }
    return correct / static_cast<double>(store.videos.size());
}

inline double fixed_accuracy(const CropStore& store, const FixedWeight& w) {
    return fixed_weight_accuracy(labeled_mean_scores(store), w);
}

/// SCI fusion per crop on probabilities, then averaged over crops.
inline double sci_accuracy(const CropStore& store) {
    double correct = 0.0;
    for (const VideoCrops& v : store.videos) {
        Tensor p(v.crops.at(0).rgb.shape());
        for (const CropScores& c : v.crops) p += sci_fuse({c.rgb, c.flow});
        correct += p.argmax() == v.label ? 1.0 : 0.0;
    }
    return correct / static_cast<double>(store.videos.size());
}

inline double spatial_share(const WeightSample& s) {
    const double total = s.w_spatial + s.w_temporal;
    return total > 0.0 ? s.w_spatial / total : 0.5;
}

inline double spatial_share_std(const std::vector<WeightSample>& samples) {
    if (samples.empty()) return 0.0;
    double mean = 0.0;
    for (const WeightSample& s : samples) mean += spatial_share(s);
    mean /= static_cast<double>(samples.size());
    double var = 0.0;
    for (const WeightSample& s : samples) var += (spatial_share(s) - mean) * (spatial_share(s) - mean);
    return std::sqrt(var / static_cast<double>(samples.size()));
}

inline json to_json(const WeightSample& s) {
    return {{"id", s.id},
            {"label", s.label},
            {"cue_type", to_string(s.cue)},
            {"w_spatial", s.w_spatial},
            {"w_temporal", s.w_temporal},
            {"dead_fraction", s.dead_fraction},
            {"predicted", s.predicted},
            {"correct", s.correct}};
}

struct Accuracies {
    double gated = 0.0;
    double fixed = 0.0;
    double even_average = 0.0;
    double sci = 0.0;
    double spatial = 0.0;
    double temporal = 0.0;
};

struct EvaluationResult {
    Accuracies accuracy;
    FixedWeight fixed_weight;
    GatedResult gated;
    std::optional<GatedResult> stage2;
    std::uint64_t score_hash = 0;
    std::size_t crop_evaluations_per_stream = 0;  // per video
};

/// Evaluates every fusion method on one shared set of crop-level expert outputs.
/// The fixed-weight ratio is grid-searched on the validation store.
inline EvaluationResult evaluate_model(TrainedModel& model, const ExperimentConfig& cfg, const CropStore& test,
                                       const CropStore& val, std::optional<std::pair<double, double>> forced = {}) {
    EvaluationResult r;
    r.score_hash = test.hash();
    r.fixed_weight = grid_search_weight(labeled_mean_scores(val));
    r.accuracy.spatial = stream_accuracy(test, Stream::Spatial);
    r.accuracy.temporal = stream_accuracy(test, Stream::Temporal);
    r.accuracy.even_average = fixed_accuracy(test, {1.0, 1.0});
    r.accuracy.fixed = fixed_accuracy(test, r.fixed_weight);
    r.accuracy.sci = sci_accuracy(test);
    r.gated = evaluate_gated(model.gate, cfg.model.activation, test, forced);
    r.accuracy.gated = r.gated.accuracy;
    if (model.stage2_gate && cfg.train.multitask && !forced) {
        r.stage2 = evaluate_gated(*model.stage2_gate, cfg.model.activation, test);
    }
    if (test.hash() != r.score_hash) throw std::logic_error("expert scores changed during evaluation");
    r.crop_evaluations_per_stream = test.videos.empty() ? 0 : test.videos.front().spatial_evaluations;
    return r;
}

inline json make_report(const ExperimentConfig& cfg, const TrainedModel& model, const EvaluationResult& r, double wall_time_s) {
    json epochs = json::object();
    for (const StageSummary& s : model.log.stages) epochs[s.stage] = s.best_epoch;
    json stages = json::array();
    for (const StageSummary& s : model.log.stages) stages.push_back(to_json(s));
    json weights = json::array();
    for (const WeightSample& s : r.gated.samples) weights.push_back(to_json(s));

    json report = {
        {"schema", kReportSchema},
        {"schema_version", kReportSchemaVersion},
        {"config", to_json(cfg)},
        {"protocol",
         {{"num_samples", cfg.test.num_samples},
          {"crops", cfg.test.crops == CropMode::Desk ? "desk" : "paper"},
          {"crop_evaluations_per_stream", r.crop_evaluations_per_stream}}},
        {"score_hash", hex64(r.score_hash)},
        {"accuracy",
         {{"gated", r.accuracy.gated},
          {"fixed", r.accuracy.fixed},
          {"even_average", r.accuracy.even_average},
          {"sci", r.accuracy.sci},
          {"spatial", r.accuracy.spatial},
          {"temporal", r.accuracy.temporal}}},
        {"fixed_weight", {{"w_spatial", r.fixed_weight.w_spatial}, {"w_temporal", r.fixed_weight.w_temporal}}},
        {"dead_gate_rate", r.gated.dead_gate_rate},
        {"weights", weights},
        {"spatial_share_std", {{"final", spatial_share_std(r.gated.samples)}}},
        {"epochs_to_best", epochs},
        {"stages", stages},
        {"wall_time_s", wall_time_s},
    };
    if (r.stage2) {
        report["spatial_share_std"]["stage2"] = spatial_share_std(r.stage2->samples);
        report["accuracy"]["gated_stage2"] = r.stage2->accuracy;
    }
    return report;
}

}  // namespace gmoe
