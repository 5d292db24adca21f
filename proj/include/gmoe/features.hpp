#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fusion.hpp"
#include "tensor_io.hpp"

namespace gmoe {

/// Per-video expert outputs needed by the gate: tap features of both streams
/// for each snippet and the video-level pre-softmax scores.
struct VideoFeatures {
    std::string id;
    std::size_t label = 0;
    std::optional<std::string> cue_type;
    std::vector<FeaturePair> snippets;
    ExpertScores scores;
};

inline TensorFile to_feature_file(const VideoFeatures& v) {
    TensorFile f;
    f.meta = {{"id", v.id}, {"label", v.label}, {"num_snippets", v.snippets.size()}};
    if (v.cue_type) f.meta["cue_type"] = *v.cue_type;
    for (std::size_t k = 0; k < v.snippets.size(); ++k) {
        f.tensors.push_back({"spatial." + std::to_string(k), v.snippets[k].spatial});
        f.tensors.push_back({"temporal." + std::to_string(k), v.snippets[k].temporal});
    }
    f.tensors.push_back({"g_rgb", v.scores.g_rgb});
    f.tensors.push_back({"g_flow", v.scores.g_flow});
    return f;
}

inline VideoFeatures from_feature_file(const TensorFile& f) {
    VideoFeatures v;
    if (!f.meta.is_object() || !f.meta.contains("num_snippets") || !f.meta["num_snippets"].is_number_unsigned()) {
        throw MalformedHeaderError("feature file: meta needs 'num_snippets'");
    }
    v.id = f.meta.value("id", std::string());
    v.label = f.meta.value("label", std::size_t{0});
    if (f.meta.contains("cue_type")) v.cue_type = f.meta["cue_type"].get<std::string>();
    const auto k = f.meta["num_snippets"].get<std::size_t>();
    for (std::size_t i = 0; i < k; ++i) {
        FeaturePair p{f.get("spatial." + std::to_string(i)), f.get("temporal." + std::to_string(i))};
        if (p.spatial.shape() != p.temporal.shape()) {
            throw ShapeMismatchError("feature file " + v.id + ": snippet " + std::to_string(i) +
                                     " has mismatched stream shapes " + to_string(p.spatial.shape()) + " and " +
                                     to_string(p.temporal.shape()));
        }
        v.snippets.push_back(std::move(p));
    }
    v.scores = {f.get("g_rgb"), f.get("g_flow")};
    if (v.scores.g_rgb.shape() != v.scores.g_flow.shape() || v.scores.g_rgb.rank() != 1) {
        throw ShapeMismatchError("feature file " + v.id + ": score vectors disagree");
    }
    if (v.label >= v.scores.g_rgb.size()) {
        throw ShapeMismatchError("feature file " + v.id + ": label " + std::to_string(v.label) + " outside " +
                                 std::to_string(v.scores.g_rgb.size()) + " classes");
    }
    return v;
}

/// Reads one feature file. With `num_classes` set, the score vectors must
/// have exactly that many entries.
inline VideoFeatures ingest_features(const std::filesystem::path& path, std::optional<std::size_t> num_classes = {}) {
    VideoFeatures v = from_feature_file(read_tensor_file(path));
    if (num_classes && v.scores.g_rgb.size() != *num_classes) {
        throw ShapeMismatchError(path.string() + ": scores have " + std::to_string(v.scores.g_rgb.size()) +
                                 " classes, expected " + std::to_string(*num_classes));
    }
    return v;
}

inline constexpr const char* kManifestName = "manifest.json";

/// One file per video plus manifest.json ({id, label, file, cue_type}),
/// written after every feature file.
inline void export_feature_split(const std::filesystem::path& dir, const std::vector<VideoFeatures>& videos) {
    std::filesystem::create_directories(dir);
    json manifest = json::array();
    for (const VideoFeatures& v : videos) {
        const std::string file = v.id + ".gmt";
        write_tensor_file(dir / file, to_feature_file(v));
        json entry = {{"id", v.id}, {"label", v.label}, {"file", file}};
        if (v.cue_type) entry["cue_type"] = *v.cue_type;
        manifest.push_back(std::move(entry));
    }
    std::ofstream out(dir / kManifestName);
    out << manifest.dump(2) << '\n';
    if (!out) throw std::runtime_error("failed writing manifest in " + dir.string());
}

inline std::vector<VideoFeatures> ingest_feature_split(const std::filesystem::path& dir, std::optional<std::size_t> num_classes = {}) {
    std::ifstream in(dir / kManifestName);
    if (!in) throw std::runtime_error("no manifest in " + dir.string());
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        throw MalformedHeaderError(std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!manifest.is_array()) throw MalformedHeaderError("manifest must be a JSON array");
    std::vector<VideoFeatures> out;
    for (const json& entry : manifest) {
        if (!entry.is_object() || !entry.contains("file") || !entry.contains("label")) {
            throw MalformedHeaderError("manifest entries need 'file' and 'label'");
        }
        VideoFeatures v = ingest_features(dir / entry["file"].get<std::string>(), num_classes);
        if (v.label != entry["label"].get<std::size_t>()) {
            throw ShapeMismatchError("manifest label disagrees with feature file " + entry["file"].get<std::string>());
        }
        out.push_back(std::move(v));
    }
    return out;
}

}  // namespace gmoe
