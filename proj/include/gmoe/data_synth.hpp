#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "experts.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace gmoe {

/// Which modality carries the class information of a class.
enum class CueType { SpatialOnly, TemporalOnly, Both };

inline const char* to_string(CueType c) {
    switch (c) {
        case CueType::SpatialOnly: return "spatial";
        case CueType::TemporalOnly: return "temporal";
        case CueType::Both: return "both";
    }
    return "?";
}

inline CueType parse_cue_type(const std::string& s) {
    if (s == "spatial") return CueType::SpatialOnly;
    if (s == "temporal") return CueType::TemporalOnly;
    if (s == "both") return CueType::Both;
    throw std::invalid_argument("unknown cue type '" + s + "'");
}

class InfeasibleSpecError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct DatasetSpec {
    std::size_t spatial_classes = 3;
    std::size_t temporal_classes = 3;
    std::size_t both_classes = 2;
    std::size_t videos_per_class = 200;
    std::size_t frames = 24;        // T
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t flow_frames = 5;    // L, flow fields per temporal input
    std::size_t num_segments = 3;   // K the videos must accommodate
    double train_fraction = 0.5;
    double val_fraction = 0.2;
    double test_fraction = 0.3;
    double noise = 0.3;             // pixel noise std of frames; flow noise is a tenth of it
    double degraded_fraction = 0.25;  // chance a video's appearance is low-contrast and noisy
    double shaky_fraction = 0.25;     // chance a video's camera shakes
    std::uint64_t seed = 7;

    std::size_t num_classes() const noexcept { return spatial_classes + temporal_classes + both_classes; }

    CueType cue_of(std::size_t label) const {
        if (label < spatial_classes) return CueType::SpatialOnly;
        if (label < spatial_classes + temporal_classes) return CueType::TemporalOnly;
        return CueType::Both;
    }

    void validate() const {
        if (num_classes() < 2) throw InfeasibleSpecError("dataset needs at least 2 classes");
        if (videos_per_class == 0) throw InfeasibleSpecError("videos_per_class must be positive");
        if (height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0) {
            throw InfeasibleSpecError("frame height and width must be positive multiples of 4");
        }
        if (flow_frames == 0 || num_segments == 0) throw InfeasibleSpecError("flow_frames and num_segments must be positive");
        if (frames < num_segments * (flow_frames + 1)) {
            throw InfeasibleSpecError("frames (" + std::to_string(frames) + ") must be at least num_segments * (flow_frames + 1) = " +
                                      std::to_string(num_segments * (flow_frames + 1)));
        }
        for (double f : {train_fraction, val_fraction, test_fraction}) {
            if (!(f >= 0.0 && f <= 1.0)) throw InfeasibleSpecError("split fractions must lie in [0, 1]");
        }
        if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
            throw InfeasibleSpecError("split fractions must sum to 1");
        }
        if (noise < 0.0) throw InfeasibleSpecError("noise must be non-negative");
        for (double f : {degraded_fraction, shaky_fraction}) {
            if (!(f >= 0.0 && f <= 1.0)) throw InfeasibleSpecError("degraded/shaky fractions must lie in [0, 1]");
        }
    }
};

/// One oriented colour grating.
struct Grating {
    double angle = 0.0;
    double frequency = 0.1;  // cycles per pixel
    double phase = 0.0;
    std::array<double, 3> color{1.0, 1.0, 1.0};
};

/// Continuous description of a video: a static texture translated along a
/// camera path. Frame t at pixel p shows texture(p - position[t]); the flow
/// from t to t+1 is the constant field position[t+1] - position[t].
struct SceneModel {
    std::vector<Grating> gratings;
    std::array<double, 3> offset{};  // per-channel mean colour
    double contrast = 1.0;
    std::vector<std::array<double, 2>> position;  // (x, y) per frame

    double texture(double x, double y, std::size_t channel) const {
        double v = offset[channel];
        for (const Grating& g : gratings) {
            const double u = x * std::cos(g.angle) + y * std::sin(g.angle);
            v += g.color[channel] * std::sin(2.0 * std::numbers::pi * g.frequency * u + g.phase);
        }
        return contrast * v;
    }

    /// Noise-free intensity of frame t at continuous coordinates.
    double intensity(std::size_t t, double x, double y, std::size_t channel) const {
        return texture(x - position[t][0], y - position[t][1], channel);
    }
};

struct SynthVideo {
    std::string id;
    std::size_t label = 0;
    CueType cue = CueType::Both;
    std::vector<Tensor> frames;  // T x (H x W x 3)
    std::vector<Tensor> flows;   // T-1 x (H x W x 2), channel 0 = dx, 1 = dy
    double frame_noise = 0.0;
    double flow_noise = 0.0;
    bool degraded = false;
    bool shaky = false;
    bool mirrored = false;
    SceneModel scene;
    // Low-light videos get a failed flow estimate: a spurious constant drift
    // replaces the true displacement.
    std::optional<std::array<double, 2>> spurious_flow;
};

struct Dataset {
    std::vector<SynthVideo> train, val, test;
};

namespace detail {

inline constexpr double kMinFrequency = 0.07;
inline constexpr double kMaxFrequency = 0.2;
inline constexpr double kPrototypeAngleJitter = 0.12;
inline constexpr double kDirectionJitter = 0.12;
inline constexpr double kOffsetRadius = 0.6;
inline constexpr double kShakeStddev = 1.2;
inline constexpr double kDegradedContrast = 0.35;
inline constexpr double kDegradedNoiseGain = 2.5;

inline std::array<double, 3> random_color(Rng& rng) {
    std::array<double, 3> c{};
    for (double& v : c) v = rng.uniform(-1.0, 1.0);
    return c;
}

/// Mean colour of prototype i: evenly spread hues on a circle in colour space.
inline std::array<double, 3> prototype_offset(std::size_t index, std::size_t count) {
    const double theta = 2.0 * std::numbers::pi * static_cast<double>(index) / static_cast<double>(count);
    const double third = 2.0 * std::numbers::pi / 3.0;
    return {kOffsetRadius * std::cos(theta), kOffsetRadius * std::cos(theta - third), kOffsetRadius * std::cos(theta + third)};
}

/// Class prototype textures for appearance-carrying classes. Prototype i uses
/// two gratings whose orientations and colours are spread over the classes.
inline std::vector<Grating> prototype(std::size_t index, std::size_t count, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xC0FFEE + index));
    const double base = std::numbers::pi * static_cast<double>(index) / static_cast<double>(count);
    std::vector<Grating> out(2);
    out[0].angle = base;
    out[0].frequency = kMinFrequency + (kMaxFrequency - kMinFrequency) * (static_cast<double>(index % 3) / 2.0);
    out[0].color = random_color(rng);
    out[1].angle = base + std::numbers::pi / 2.0 + rng.uniform(-0.3, 0.3);
    out[1].frequency = rng.uniform(kMinFrequency, kMaxFrequency);
    out[1].color = random_color(rng);
    return out;
}

}  // namespace detail

/// Renders frames and flows of one video from its scene model and noise levels.
inline void render_video(SynthVideo& v, std::size_t height, std::size_t width, Rng& rng) {
    const std::size_t t_count = v.scene.position.size();
    v.frames.clear();
    v.flows.clear();
    for (std::size_t t = 0; t < t_count; ++t) {
        Tensor f({height, width, 3});
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                for (std::size_t c = 0; c < 3; ++c) {
                    f.at(y, x, c) = v.scene.intensity(t, static_cast<double>(x), static_cast<double>(y), c) +
                                    (v.frame_noise > 0.0 ? rng.normal(0.0, v.frame_noise) : 0.0);
                }
            }
        }
        v.frames.push_back(std::move(f));
    }
    for (std::size_t t = 0; t + 1 < t_count; ++t) {
        const double dx = v.spurious_flow ? (*v.spurious_flow)[0] : v.scene.position[t + 1][0] - v.scene.position[t][0];
        const double dy = v.spurious_flow ? (*v.spurious_flow)[1] : v.scene.position[t + 1][1] - v.scene.position[t][1];
        Tensor fl({height, width, 2});
        for (std::size_t p = 0; p < height * width; ++p) {
            fl[2 * p] = dx + (v.flow_noise > 0.0 ? rng.normal(0.0, v.flow_noise) : 0.0);
            fl[2 * p + 1] = dy + (v.flow_noise > 0.0 ? rng.normal(0.0, v.flow_noise) : 0.0);
        }
        v.flows.push_back(std::move(fl));
    }
}

/// Generates one video of class `label`; deterministic in (spec.seed, label, index).
inline SynthVideo generate_video(const DatasetSpec& spec, std::size_t label, std::size_t index) {
    Rng rng(derive_seed(derive_seed(spec.seed, label), index));
    SynthVideo v;
    v.id = "c" + std::to_string(label) + "_v" + std::to_string(index);
    v.label = label;
    v.cue = spec.cue_of(label);

    const std::size_t appearance_classes = spec.spatial_classes + spec.both_classes;
    const std::size_t motion_classes = spec.temporal_classes + spec.both_classes;

    // Appearance: a class prototype for spatial/both classes, a random texture
    // drawn from one shared distribution for temporal-only classes.
    if (v.cue == CueType::TemporalOnly) {
        v.scene.gratings.resize(2);
        for (Grating& g : v.scene.gratings) {
            g.angle = rng.uniform(0.0, std::numbers::pi);
            g.frequency = rng.uniform(detail::kMinFrequency, detail::kMaxFrequency);
            g.color = detail::random_color(rng);
        }
        const double hue = rng.uniform(0.0, static_cast<double>(appearance_classes));
        const std::array<double, 3> a = detail::prototype_offset(static_cast<std::size_t>(hue), appearance_classes);
        const std::array<double, 3> b = detail::prototype_offset(static_cast<std::size_t>(hue) + 1, appearance_classes);
        const double frac = hue - std::floor(hue);
        for (std::size_t c = 0; c < 3; ++c) v.scene.offset[c] = (1.0 - frac) * a[c] + frac * b[c];
    } else {
        const std::size_t proto = v.cue == CueType::SpatialOnly ? label : spec.spatial_classes + (label - spec.spatial_classes - spec.temporal_classes);
        v.scene.gratings = detail::prototype(proto, appearance_classes, spec.seed);
        v.scene.offset = detail::prototype_offset(proto, appearance_classes);
        for (double& c : v.scene.offset) c += rng.normal(0.0, 0.08);
        for (Grating& g : v.scene.gratings) {
            g.angle += rng.normal(0.0, detail::kPrototypeAngleJitter);
            g.frequency *= std::exp(rng.normal(0.0, 0.1));
            for (double& c : g.color) c += rng.normal(0.0, 0.15);
        }
    }
    for (Grating& g : v.scene.gratings) g.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

    // Motion: a class direction in the right half-plane for temporal/both
    // classes, a uniformly random direction for spatial-only classes.
    double direction = 0.0;
    if (v.cue == CueType::SpatialOnly) {
        direction = rng.uniform(0.0, 2.0 * std::numbers::pi);
    } else {
        const std::size_t slot = v.cue == CueType::TemporalOnly ? label - spec.spatial_classes
                                                                : spec.temporal_classes + (label - spec.spatial_classes - spec.temporal_classes);
        direction = -std::numbers::pi / 2.0 + std::numbers::pi * (static_cast<double>(slot) + 0.5) / static_cast<double>(motion_classes) +
                    rng.normal(0.0, detail::kDirectionJitter);
    }

    // Half of all videos are mirrored left-right, so every class is closed
    // under horizontal flips and flipped test crops stay in-distribution.
    v.mirrored = rng.bernoulli(0.5);
    if (v.mirrored) {
        direction = std::numbers::pi - direction;
        for (Grating& g : v.scene.gratings) g.angle = std::numbers::pi - g.angle;
    }
    const double speed = rng.uniform(0.6, 1.2);

    v.degraded = rng.bernoulli(spec.degraded_fraction);
    v.shaky = rng.bernoulli(spec.shaky_fraction);
    v.scene.contrast = v.degraded ? detail::kDegradedContrast : 1.0;
    v.frame_noise = v.degraded ? detail::kDegradedNoiseGain * spec.noise : spec.noise;
    v.flow_noise = 0.1 * spec.noise;
    if (v.degraded) {
        const double drift = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double drift_speed = rng.uniform(0.6, 1.2);
        v.spurious_flow = std::array<double, 2>{drift_speed * std::cos(drift), drift_speed * std::sin(drift)};
    }

    v.scene.position.assign(spec.frames, {0.0, 0.0});
    std::array<double, 2> pos{rng.uniform(0.0, 16.0), rng.uniform(0.0, 16.0)};
    for (std::size_t t = 0; t < spec.frames; ++t) {
        v.scene.position[t] = pos;
        pos[0] += speed * std::cos(direction);
        pos[1] += speed * std::sin(direction);
        if (v.shaky) {
            pos[0] += rng.normal(0.0, detail::kShakeStddev);
            pos[1] += rng.normal(0.0, detail::kShakeStddev);
        }
    }
    render_video(v, spec.height, spec.width, rng);
    return v;
}

/// Class-balanced train/val/test split of freshly generated videos.
inline Dataset generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    const auto n = spec.videos_per_class;
    const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::llround(spec.val_fraction * static_cast<double>(n)));
    if (n_train + n_val > n) throw InfeasibleSpecError("split sizes exceed videos_per_class");
    Dataset ds;
    for (std::size_t label = 0; label < spec.num_classes(); ++label) {
        for (std::size_t i = 0; i < n; ++i) {
            SynthVideo v = generate_video(spec, label, i);
            if (i < n_train) {
                ds.train.push_back(std::move(v));
            } else if (i < n_train + n_val) {
                ds.val.push_back(std::move(v));
            } else {
                ds.test.push_back(std::move(v));
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Snippet sampling

/// Channelwise stack of `length` consecutive flow fields starting at `start`.
inline Tensor flow_stack(const SynthVideo& v, std::size_t start, std::size_t length) {
    if (start + length > v.flows.size()) throw std::out_of_range("flow stack runs past the end of the video");
    const Tensor& first = v.flows[start];
    const std::size_t pixels = first.dim(0) * first.dim(1);
    Tensor out({first.dim(0), first.dim(1), 2 * length});
    for (std::size_t l = 0; l < length; ++l) {
        const Tensor& f = v.flows[start + l];
        for (std::size_t p = 0; p < pixels; ++p) {
            out[p * 2 * length + 2 * l] = f[2 * p];
            out[p * 2 * length + 2 * l + 1] = f[2 * p + 1];
        }
    }
    return out;
}

inline Snippet snippet_at(const SynthVideo& v, std::size_t start, std::size_t flow_frames) {
    return {v.frames.at(start), flow_stack(v, start, flow_frames)};
}

/// Number of valid snippet start indices.
inline std::size_t valid_starts(const SynthVideo& v, std::size_t flow_frames) {
    return v.frames.size() > flow_frames ? v.frames.size() - flow_frames : 0;
}

/// Range [first, last) of start indices belonging to segment k of K.
inline std::pair<std::size_t, std::size_t> segment_range(std::size_t starts, std::size_t k, std::size_t segments) {
    return {k * starts / segments, (k + 1) * starts / segments};
}

/// One uniformly drawn start index per equal segment of [0, starts).
inline std::vector<std::size_t> sample_starts(std::size_t starts, std::size_t segments, Rng& rng) {
    if (segments == 0 || starts < segments) {
        throw std::invalid_argument(std::to_string(starts) + " valid starts cannot host " + std::to_string(segments) + " segments");
    }
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < segments; ++k) {
        const auto [lo, hi] = segment_range(starts, k, segments);
        out.push_back(lo + static_cast<std::size_t>(rng.below(hi - lo)));
    }
    return out;
}

/// Middle start of each segment; the deterministic choice used for validation.
inline std::vector<std::size_t> center_starts(std::size_t starts, std::size_t segments) {
    if (segments == 0 || starts < segments) {
        throw std::invalid_argument(std::to_string(starts) + " valid starts cannot host " + std::to_string(segments) + " segments");
    }
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < segments; ++k) {
        const auto [lo, hi] = segment_range(starts, k, segments);
        out.push_back((lo + hi - 1) / 2);
    }
    return out;
}

/// TSN-style sampling: one uniformly drawn start per equal segment. The
/// spatial frame and the flow stack of a segment share the start index.
inline SnippetBatch sample_snippets(const SynthVideo& v, std::size_t segments, std::size_t flow_frames, Rng& rng,
                                    std::vector<std::size_t>* starts_out = nullptr) {
    std::vector<std::size_t> starts;
    try {
        starts = sample_starts(valid_starts(v, flow_frames), segments, rng);
    } catch (const std::invalid_argument&) {
        throw std::invalid_argument("video " + v.id + " is too short for " + std::to_string(segments) +
                                    " segments of " + std::to_string(flow_frames) + " flow frames");
    }
    SnippetBatch batch;
    batch.label = v.label;
    for (std::size_t s : starts) batch.segments.push_back(snippet_at(v, s, flow_frames));
    if (starts_out) starts_out->insert(starts_out->end(), starts.begin(), starts.end());
    return batch;
}

inline SnippetBatch center_snippets(const SynthVideo& v, std::size_t segments, std::size_t flow_frames) {
    SnippetBatch batch;
    batch.label = v.label;
    for (std::size_t s : center_starts(valid_starts(v, flow_frames), segments)) batch.segments.push_back(snippet_at(v, s, flow_frames));
    return batch;
}

// ---------------------------------------------------------------------------
// Test-time protocol: equally spaced samples x crops

struct Crop {
    std::size_t y = 0;
    std::size_t x = 0;
    std::size_t height = 0;  // 0 means the full frame
    std::size_t width = 0;
    bool flip = false;
};

/// Full frame and its horizontal mirror.
inline std::vector<Crop> desk_crops() { return {Crop{}, Crop{0, 0, 0, 0, true}}; }

/// Four corners and the centre at crop_size, plus their horizontal mirrors.
inline std::vector<Crop> ten_crops(std::size_t height, std::size_t width, std::size_t crop_size) {
    if (crop_size == 0 || crop_size > height || crop_size > width || crop_size % 4 != 0) {
        throw std::invalid_argument("crop size must be a positive multiple of 4 no larger than the frame");
    }
    const std::size_t dy = height - crop_size, dx = width - crop_size;
    const std::array<std::array<std::size_t, 2>, 5> origins{{{0, 0}, {0, dx}, {dy, 0}, {dy, dx}, {dy / 2, dx / 2}}};
    std::vector<Crop> out;
    for (bool flip : {false, true}) {
        for (const auto& o : origins) out.push_back(Crop{o[0], o[1], crop_size, crop_size, flip});
    }
    return out;
}

/// Crops an H x W x C map; a flip mirrors columns and, when `flow_channels` is
/// set, negates the x-displacement channels (even channel indices).
inline Tensor apply_crop(const Tensor& map, const Crop& crop, bool flow_channels) {
    const std::size_t h = crop.height ? crop.height : map.dim(0);
    const std::size_t w = crop.width ? crop.width : map.dim(1);
    const std::size_t c = map.dim(2);
    if (crop.y + h > map.dim(0) || crop.x + w > map.dim(1)) throw std::out_of_range("crop exceeds the frame");
    Tensor out({h, w, c});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t sx = crop.flip ? crop.x + w - 1 - x : crop.x + x;
            for (std::size_t ch = 0; ch < c; ++ch) {
                double v = map.at(crop.y + y, sx, ch);
                if (crop.flip && flow_channels && ch % 2 == 0) v = -v;
                out.at(y, x, ch) = v;
            }
        }
    }
    return out;
}

struct TestSample {
    std::size_t sample_index = 0;
    std::size_t crop_index = 0;
    std::size_t start = 0;
    Snippet snippet;
};

/// Equally spaced temporal samples; every crop of each sample, both modalities.
inline std::vector<TestSample> test_protocol(const SynthVideo& v, std::size_t num_samples, const std::vector<Crop>& crops,
                                             std::size_t flow_frames) {
    const std::size_t starts = valid_starts(v, flow_frames);
    if (starts == 0) throw std::invalid_argument("video " + v.id + " is too short for the test protocol");
    if (num_samples == 0 || crops.empty()) throw std::invalid_argument("test protocol needs samples and crops");
    std::vector<TestSample> out;
    for (std::size_t i = 0; i < num_samples; ++i) {
        const std::size_t start = num_samples == 1 ? (starts - 1) / 2
                                                   : static_cast<std::size_t>(std::llround(static_cast<double>(i) * static_cast<double>(starts - 1) /
                                                                                           static_cast<double>(num_samples - 1)));
        const Snippet base = snippet_at(v, start, flow_frames);
        for (std::size_t c = 0; c < crops.size(); ++c) {
            out.push_back({i, c, start, {apply_crop(base.spatial, crops[c], false), apply_crop(base.temporal, crops[c], true)}});
        }
    }
    return out;
}

}  // namespace gmoe
