#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace gmoe {

enum class Stream { Spatial, Temporal };

inline const char* to_string(Stream s) { return s == Stream::Spatial ? "spatial" : "temporal"; }

/// One sampled (frame, flow stack) pair. Both start at the same time index.
struct Snippet {
    Tensor spatial;   // H x W x 3
    Tensor temporal;  // H x W x 2L, channel 2l = dx, 2l+1 = dy of the l-th flow field
};

/// K per-segment snippets of one video plus its class label.
struct SnippetBatch {
    std::vector<Snippet> segments;
    std::size_t label = 0;
};

/// Pre-softmax video-level class scores of the two streams.
struct ExpertScores {
    Tensor g_rgb;
    Tensor g_flow;
};

/// He-style fan-in scaled normal initialization.
inline Tensor he_normal(const Shape& shape, std::size_t fan_in, Rng& rng) {
    Tensor t(shape);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data()) v = rng.normal() * stddev;
    return t;
}

/// Small convolutional classifier standing in for one stream of a two-stream network.
///
/// Three blocks of 3x3 conv (padding 1) -> ReLU, with 2x2 mean pooling after
/// blocks 1 and 2, then global average pooling and a fully connected layer to
/// C scores. Any of the three block outputs can be exported as the fusion
/// feature ("tap"). Inputs must have spatial sizes divisible by 4.
class ExpertNet {
public:
    static constexpr std::size_t kNumBlocks = 3;
    static constexpr std::array<std::size_t, kNumBlocks> kDefaultWidths{8, 16, 32};

    struct Output {
        Var feature;
        Var scores;
    };

    ExpertNet() = default;

    ExpertNet(std::string name, std::size_t in_channels, std::size_t num_classes, Rng& rng,
              std::array<std::size_t, kNumBlocks> widths = kDefaultWidths)
        : name_(std::move(name)), in_channels_(in_channels), num_classes_(num_classes), widths_(widths) {
        if (in_channels == 0 || num_classes < 2) throw std::invalid_argument("ExpertNet: bad architecture");
        std::size_t din = in_channels;
        for (std::size_t b = 0; b < kNumBlocks; ++b) {
            const std::size_t dout = widths_[b];
            params_.emplace_back(name_ + ".conv" + std::to_string(b + 1) + ".kernel",
                                 he_normal({3, 3, din, dout}, 9 * din, rng));
            params_.emplace_back(name_ + ".conv" + std::to_string(b + 1) + ".bias", Tensor({dout}));
            din = dout;
        }
        params_.emplace_back(name_ + ".fc.weight", he_normal({din, num_classes}, din, rng));
        params_.emplace_back(name_ + ".fc.bias", Tensor({num_classes}));
    }

    const std::string& name() const noexcept { return name_; }
    std::size_t in_channels() const noexcept { return in_channels_; }
    std::size_t num_classes() const noexcept { return num_classes_; }
    const std::array<std::size_t, kNumBlocks>& widths() const noexcept { return widths_; }

    std::vector<Parameter>& parameters() noexcept { return params_; }
    const std::vector<Parameter>& parameters() const noexcept { return params_; }

    Parameter& fc_weight() { return params_[2 * kNumBlocks]; }
    Parameter& fc_bias() { return params_[2 * kNumBlocks + 1]; }

    void set_frozen(bool frozen) {
        for (Parameter& p : params_) p.frozen = frozen;
    }
    bool frozen() const {
        for (const Parameter& p : params_) {
            if (!p.frozen) return false;
        }
        return true;
    }

    /// Shape of the tap feature for an h x w input.
    Shape tap_shape(std::size_t tap_layer, std::size_t h, std::size_t w) const {
        check_tap(tap_layer);
        const std::size_t pools = std::min<std::size_t>(tap_layer, 2);
        const std::size_t div = std::size_t{1} << pools;
        return {h / div, w / div, widths_[tap_layer - 1]};
    }

    /// One forward pass returning the tap-layer feature (post-ReLU, post-pool)
    /// and the final pre-softmax scores.
    Output forward(Graph& g, Var input, std::size_t tap_layer) { return forward_impl(*this, g, input, tap_layer); }
    Output forward(Graph& g, Var input, std::size_t tap_layer) const { return forward_impl(*this, g, input, tap_layer); }

    /// Runs the layers after `tap_layer` on a tap feature.
    Var forward_from_tap(Graph& g, Var feature, std::size_t tap_layer) const {
        check_tap(tap_layer);
        Var h = feature;
        for (std::size_t b = tap_layer + 1; b <= kNumBlocks; ++b) h = block(*this, g, h, b);
        return head(*this, g, h);
    }

    struct Inference {
        Tensor feature;
        Tensor scores;
    };

    /// Gradient-free forward pass.
    Inference infer(const Tensor& input, std::size_t tap_layer) const {
        Graph g;
        const Output o = forward(g, g.constant(input), tap_layer);
        return {g.value(o.feature), g.value(o.scores)};
    }

private:
    template <class Self>
    static Output forward_impl(Self& self, Graph& g, Var input, std::size_t tap_layer) {
        self.check_tap(tap_layer);
        const Tensor& x = g.value(input);
        if (x.rank() != 3 || x.dim(2) != self.in_channels_) {
            throw ShapeError(self.name_ + ": expected H x W x " + std::to_string(self.in_channels_) + " input, got " +
                             to_string(x.shape()));
        }
        if (x.dim(0) % 4 != 0 || x.dim(1) % 4 != 0) {
            throw ShapeError(self.name_ + ": input spatial size must be divisible by 4, got " + to_string(x.shape()));
        }
        Output out;
        Var h = input;
        for (std::size_t b = 1; b <= kNumBlocks; ++b) {
            h = block(self, g, h, b);
            if (b == tap_layer) out.feature = h;
        }
        out.scores = head(self, g, h);
        return out;
    }

    template <class Self>
    static Var block(Self& self, Graph& g, Var h, std::size_t b) {
        const std::size_t i = 2 * (b - 1);
        h = conv2d(g, h, g.parameter(self.params_[i]), g.parameter(self.params_[i + 1]), 1, 1);
        h = relu(g, h);
        if (b < kNumBlocks) h = mean_pool2d(g, h, 2);
        return h;
    }

    template <class Self>
    static Var head(Self& self, Graph& g, Var h) {
        Var pooled = global_average_pool(g, h);
        return fully_connected(g, pooled, g.parameter(self.params_[2 * kNumBlocks]),
                               g.parameter(self.params_[2 * kNumBlocks + 1]));
    }

    void check_tap(std::size_t tap_layer) const {
        if (tap_layer < 1 || tap_layer > kNumBlocks) {
            throw std::invalid_argument("tap layer must be in 1..3, got " + std::to_string(tap_layer));
        }
    }

    std::string name_;
    std::size_t in_channels_ = 0;
    std::size_t num_classes_ = 0;
    std::array<std::size_t, kNumBlocks> widths_ = kDefaultWidths;
    std::vector<Parameter> params_;
};

/// Average-pooling consensus over per-segment score vectors.
inline Tensor segmental_consensus(std::span<const Tensor> per_segment_scores) {
    if (per_segment_scores.empty()) throw std::invalid_argument("segmental_consensus: no segments");
    Tensor out(per_segment_scores.front().shape());
    for (const Tensor& s : per_segment_scores) out += s;
    out *= 1.0 / static_cast<double>(per_segment_scores.size());
    return out;
}

inline const Tensor& stream_input(const Snippet& s, Stream stream) {
    return stream == Stream::Spatial ? s.spatial : s.temporal;
}

/// Video-level scores of one expert: consensus of its per-segment scores.
inline Tensor video_expert_scores(const ExpertNet& net, const SnippetBatch& batch, Stream stream,
                                  std::size_t tap_layer = ExpertNet::kNumBlocks) {
    if (batch.segments.empty()) throw std::invalid_argument("video_expert_scores: batch has no segments");
    std::vector<Tensor> per_segment;
    per_segment.reserve(batch.segments.size());
    for (const Snippet& s : batch.segments) per_segment.push_back(net.infer(stream_input(s, stream), tap_layer).scores);
    return segmental_consensus(per_segment);
}

/// Graph version used while training an expert: consensus of per-segment scores.
inline Var video_expert_scores(Graph& g, ExpertNet& net, const SnippetBatch& batch, Stream stream) {
    std::vector<Var> per_segment;
    per_segment.reserve(batch.segments.size());
    for (const Snippet& s : batch.segments) {
        per_segment.push_back(net.forward(g, g.constant(stream_input(s, stream)), ExpertNet::kNumBlocks).scores);
    }
    return average_pool_over_set(g, per_segment);
}

}  // namespace gmoe
