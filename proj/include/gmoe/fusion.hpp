#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "experts.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace gmoe {

enum class FusionStyle { Concat, Conv };
enum class GateActivation { ReLU, Softmax };

inline const char* to_string(FusionStyle s) { return s == FusionStyle::Concat ? "concat" : "conv"; }
inline const char* to_string(GateActivation a) { return a == GateActivation::ReLU ? "relu" : "softmax"; }

inline FusionStyle parse_fusion_style(const std::string& s) {
    if (s == "concat") return FusionStyle::Concat;
    if (s == "conv") return FusionStyle::Conv;
    throw std::invalid_argument("unknown fusion style '" + s + "' (expected concat or conv)");
}

inline GateActivation parse_gate_activation(const std::string& s) {
    if (s == "relu") return GateActivation::ReLU;
    if (s == "softmax") return GateActivation::Softmax;
    throw std::invalid_argument("unknown gate activation '" + s + "' (expected relu or softmax)");
}

// ---------------------------------------------------------------------------
// Input fusion of the two streams' feature maps

/// Channel-interleaved stacking. In 0-based channels: out[2d] = xb[d], out[2d+1] = xa[d].
inline Tensor concat_fuse(const Tensor& xa, const Tensor& xb) {
    if (xa.rank() != 3) throw ShapeError("concat_fuse: feature maps must be HxWxD, got " + to_string(xa.shape()));
    xa.require_same_shape(xb, "concat_fuse");
    const std::size_t pixels = xa.dim(0) * xa.dim(1), d = xa.dim(2);
    Tensor out({xa.dim(0), xa.dim(1), 2 * d});
    for (std::size_t p = 0; p < pixels; ++p) {
        for (std::size_t c = 0; c < d; ++c) {
            out[p * 2 * d + 2 * c] = xb[p * d + c];
            out[p * 2 * d + 2 * c + 1] = xa[p * d + c];
        }
    }
    return out;
}

inline Var concat_fuse(Graph& g, Var xa, Var xb) {
    Tensor out = concat_fuse(g.value(xa), g.value(xb));
    const std::size_t d = g.value(xa).dim(2);
    const std::size_t pixels = g.value(xa).dim(0) * g.value(xa).dim(1);
    return g.record(std::move(out), {xa, xb},
        [=](Graph& gr, const Tensor& up) {
            if (gr.requires_grad(xa)) {
                Tensor& ga = gr.grad_buffer(xa);
                for (std::size_t p = 0; p < pixels; ++p) {
                    for (std::size_t c = 0; c < d; ++c) ga[p * d + c] += up[p * 2 * d + 2 * c + 1];
                }
            }
            if (gr.requires_grad(xb)) {
                Tensor& gb = gr.grad_buffer(xb);
                for (std::size_t p = 0; p < pixels; ++p) {
                    for (std::size_t c = 0; c < d; ++c) gb[p * d + c] += up[p * 2 * d + 2 * c];
                }
            }
        },
        "concat_fuse");
}

/// Filter for conv fusion that averages the two streams' matching channels.
inline Tensor averaging_fusion_filter(std::size_t d) {
    Tensor f({1, 1, 2 * d, d});
    for (std::size_t c = 0; c < d; ++c) {
        f[(2 * c) * d + c] = 0.5;
        f[(2 * c + 1) * d + c] = 0.5;
    }
    return f;
}

/// Concatenation followed by a 1x1 convolution halving the channel count.
inline Var conv_fuse(Graph& g, Var xa, Var xb, Var filter, Var bias) {
    const Tensor& f = g.value(filter);
    const std::size_t d = g.value(xa).rank() == 3 ? g.value(xa).dim(2) : 0;
    if (f.shape() != Shape{1, 1, 2 * d, d}) {
        throw ShapeError("conv_fuse: filter must be [1x1x" + std::to_string(2 * d) + "x" + std::to_string(d) + "], got " +
                         to_string(f.shape()));
    }
    return conv2d(g, concat_fuse(g, xa, xb), filter, bias, 1, 0);
}

inline Tensor conv_fuse(const Tensor& xa, const Tensor& xb, const Tensor& filter, const Tensor& bias) {
    Graph g;
    return g.value(conv_fuse(g, g.constant(xa), g.constant(xb), g.constant(filter), g.constant(bias)));
}

// ---------------------------------------------------------------------------
// Gating network

/// Pair of tap features (spatial, temporal) for one snippet.
struct FeaturePair {
    Tensor spatial;
    Tensor temporal;
};

struct GateConfig {
    FusionStyle style = FusionStyle::Conv;
    std::size_t tap_layer = 2;
    std::size_t feature_channels = 16;  // D of the tap feature
    std::size_t num_classes = 8;
    double dropout_ratio = 0.8;
};

/// Node handles produced by one gate forward pass over K snippets.
struct GateTrace {
    std::vector<Var> raw;          // per-snippet head_g outputs (pre-activation)
    Var pooled_raw;                // mean of raw over snippets
    Var weights;                   // activation(pooled_raw), or the fallback constant
    Var class_scores;              // mean of per-snippet head_c outputs
    Var pooled_features;           // mean over snippets of the trunk's pooled features
    bool dead = false;             // ReLU emitted (0, 0) and the fallback was used
};

/// Weights used when a ReLU gate emits (0, 0).
inline constexpr double kDeadGateFallback = 0.5;

/// Gating ConvNet over fused feature snippets.
///
/// Optional conv-fusion layer, then a shared trunk (3x3 conv D' -> D, ReLU,
/// 3x3 conv D -> 2D, ReLU, global average pool, dropout) feeding two fully
/// connected heads: head_g with two fusion-weight outputs and head_c with C
/// class scores. The trunk and both heads are shared by all K snippets.
class GateNet {
public:
    GateNet() = default;

    GateNet(const GateConfig& config, GateActivation activation, Rng& rng) : config_(config) {
        const std::size_t d = config.feature_channels;
        if (d == 0 || config.num_classes < 2) throw std::invalid_argument("GateNet: bad configuration");
        std::size_t trunk_in = 2 * d;
        if (config.style == FusionStyle::Conv) {
            params_.emplace_back("gate.fuse.filter", averaging_fusion_filter(d));
            params_.emplace_back("gate.fuse.bias", Tensor({d}));
            trunk_in = d;
        }
        params_.emplace_back("gate.trunk1.kernel", he_normal({3, 3, trunk_in, d}, 9 * trunk_in, rng));
        params_.emplace_back("gate.trunk1.bias", Tensor({d}));
        params_.emplace_back("gate.trunk2.kernel", he_normal({3, 3, d, 2 * d}, 9 * d, rng));
        params_.emplace_back("gate.trunk2.bias", Tensor({2 * d}));
        params_.emplace_back("gate.head_g.weight", Tensor({2 * d, 2}));
        // A ReLU gate starting at exactly (0, 0) would sit on the kink with zero
        // gradient forever; start it at (0.5, 0.5) instead, the same even average
        // a zero-initialized Softmax gate produces.
        params_.emplace_back("gate.head_g.bias",
                             Tensor({2}, activation == GateActivation::ReLU ? kDeadGateFallback : 0.0));
        params_.emplace_back("gate.head_c.weight", he_normal({2 * d, config.num_classes}, 2 * d, rng));
        params_.emplace_back("gate.head_c.bias", Tensor({config.num_classes}));
    }

    const GateConfig& config() const noexcept { return config_; }
    std::vector<Parameter>& parameters() noexcept { return params_; }
    const std::vector<Parameter>& parameters() const noexcept { return params_; }

    Parameter& param(const std::string& name) {
        for (Parameter& p : params_) {
            if (p.name == name) return p;
        }
        throw std::out_of_range("GateNet has no parameter '" + name + "'");
    }

    /// Fused feature snippet for one (spatial, temporal) tap pair: interleaved
    /// concatenation, followed by the 1x1 conv for conv fusion.
    Var fuse(Graph& g, Var spatial, Var temporal) {
        if (g.value(spatial).rank() != 3 || g.value(spatial).dim(2) != config_.feature_channels) {
            throw ShapeError("gate: expected tap features with " + std::to_string(config_.feature_channels) +
                             " channels, got " + to_string(g.value(spatial).shape()));
        }
        if (config_.style == FusionStyle::Concat) return concat_fuse(g, spatial, temporal);
        return conv_fuse(g, spatial, temporal, g.parameter(params_[0]), g.parameter(params_[1]));
    }

    /// Forward over K already fused snippets. Raw head_g outputs are averaged
    /// over snippets first; the gate activation is applied once to the average.
    GateTrace forward_fused(Graph& g, std::span<const Var> fused, GateActivation activation, bool training, Rng& rng) {
        if (fused.empty()) throw std::invalid_argument("gate: empty snippet list");
        const std::size_t t = trunk_offset();
        const std::size_t expected = config_.style == FusionStyle::Conv ? config_.feature_channels : 2 * config_.feature_channels;
        GateTrace trace;
        std::vector<Var> class_scores, features;
        for (Var f : fused) {
            const Tensor& x = g.value(f);
            if (x.rank() != 3 || x.dim(2) != expected) {
                throw ShapeError("gate: fused snippet must be HxWx" + std::to_string(expected) + ", got " + to_string(x.shape()));
            }
            Var h = relu(g, conv2d(g, f, g.parameter(params_[t]), g.parameter(params_[t + 1]), 1, 1));
            h = relu(g, conv2d(g, h, g.parameter(params_[t + 2]), g.parameter(params_[t + 3]), 1, 1));
            Var pooled = global_average_pool(g, h);
            features.push_back(pooled);
            Var dropped = dropout(g, pooled, config_.dropout_ratio, training, rng);
            trace.raw.push_back(fully_connected(g, dropped, g.parameter(params_[t + 4]), g.parameter(params_[t + 5])));
            class_scores.push_back(fully_connected(g, dropped, g.parameter(params_[t + 6]), g.parameter(params_[t + 7])));
        }
        trace.pooled_raw = average_pool_over_set(g, trace.raw);
        trace.class_scores = average_pool_over_set(g, class_scores);
        trace.pooled_features = average_pool_over_set(g, features);
        if (activation == GateActivation::Softmax) {
            trace.weights = softmax(g, trace.pooled_raw);
        } else {
            trace.weights = relu(g, trace.pooled_raw);
            const Tensor& w = g.value(trace.weights);
            if (w[0] == 0.0 && w[1] == 0.0) {
                trace.dead = true;
                trace.weights = g.constant(Tensor({2}, kDeadGateFallback));
            }
        }
        return trace;
    }

    GateTrace forward(Graph& g, std::span<const FeaturePair> snippets, GateActivation activation, bool training, Rng& rng) {
        std::vector<Var> fused;
        fused.reserve(snippets.size());
        for (const FeaturePair& s : snippets) fused.push_back(fuse(g, g.constant(s.spatial), g.constant(s.temporal)));
        return forward_fused(g, fused, activation, training, rng);
    }

    /// Number of gate parameters preceding the trunk (the conv-fusion filter and bias).
    std::size_t trunk_offset() const noexcept { return config_.style == FusionStyle::Conv ? 2 : 0; }

private:
    GateConfig config_;
    std::vector<Parameter> params_;
};

/// Value-level summary of one gate evaluation.
struct GateOutput {
    double w1 = 0.0;  // spatial weight
    double w2 = 0.0;  // temporal weight
    Tensor g_c;
    std::vector<Tensor> per_segment_raw;
    Tensor pooled_features;
    bool dead = false;
};

inline GateOutput summarize(const Graph& g, const GateTrace& trace) {
    GateOutput out;
    const Tensor& w = g.value(trace.weights);
    out.w1 = w[0];
    out.w2 = w[1];
    out.g_c = g.value(trace.class_scores);
    for (Var r : trace.raw) out.per_segment_raw.push_back(g.value(r));
    out.pooled_features = g.value(trace.pooled_features);
    out.dead = trace.dead;
    return out;
}

/// Gate forward over K already fused snippets.
inline GateOutput gate_forward(GateNet& gate, std::span<const Tensor> fused_snippets, GateActivation activation,
                               bool training, Rng& rng) {
    Graph g;
    std::vector<Var> vars;
    for (const Tensor& t : fused_snippets) vars.push_back(g.constant(t));
    return summarize(g, gate.forward_fused(g, vars, activation, training, rng));
}

/// Gate forward over K raw feature pairs (fusion layer included).
inline GateOutput gate_forward(GateNet& gate, std::span<const FeaturePair> snippets, GateActivation activation,
                               bool training, Rng& rng) {
    Graph g;
    return summarize(g, gate.forward(g, snippets, activation, training, rng));
}

/// Adaptive weighting of pre-softmax scores: w1 * g_rgb + w2 * g_flow.
inline Tensor gated_fuse(const ExpertScores& scores, double w1, double w2) {
    if (w1 < 0.0 || w2 < 0.0) throw std::invalid_argument("gated_fuse: fusion weights must be non-negative");
    scores.g_rgb.require_same_shape(scores.g_flow, "gated_fuse");
    Tensor out(scores.g_rgb.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = w1 * scores.g_rgb[i] + w2 * scores.g_flow[i];
    return out;
}

/// CE(g_adap, label) + lambda * CE(g_c, label). With lambda == 0 the
/// classification term is left out of the graph entirely.
inline Var multitask_loss(Graph& g, std::size_t label, Var g_adap, Var g_c, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("multitask_loss: lambda must be non-negative");
    Var fused_term = cross_entropy(g, g_adap, label);
    if (g.value(g_c).size() <= label) {
        throw std::out_of_range("multitask_loss: label " + std::to_string(label) + " out of range");
    }
    if (lambda == 0.0) return fused_term;
    return add(g, fused_term, scale(g, cross_entropy(g, g_c, label), lambda));
}

inline double multitask_loss(std::size_t label, const Tensor& g_adap, const Tensor& g_c, double lambda) {
    Graph g;
    return g.value(multitask_loss(g, label, g.constant(g_adap), g.constant(g_c), lambda))[0];
}

/// Everything the gate needs for one training video: per-snippet tap features
/// of both (frozen) experts and their video-level scores.
struct GateSample {
    std::vector<FeaturePair> snippets;
    ExpertScores scores;
    std::size_t label = 0;
};

struct GateLoss {
    Var loss;
    GateTrace trace;
};

/// Builds the full gated loss for one sample.
inline GateLoss gated_loss(Graph& g, GateNet& gate, const GateSample& sample, GateActivation activation, double lambda,
                           bool training, Rng& rng) {
    GateLoss out;
    out.trace = gate.forward(g, sample.snippets, activation, training, rng);
    Var g_adap = weighted_pair(g, out.trace.weights, g.constant(sample.scores.g_rgb), g.constant(sample.scores.g_flow));
    out.loss = multitask_loss(g, sample.label, g_adap, out.trace.class_scores, lambda);
    return out;
}

struct GradientCheckResult {
    double max_relative_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    double relu_margin = 0.0;  // smallest |pre-activation| at any ReLU requiring grad
    bool dead_gate = false;
};

/// Relative error floor: differences between gradients smaller than this are
/// compared in absolute terms.
inline constexpr double kGradientCheckFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradientCheckFloor});
}

/// Compares backprop gradients of every gate parameter (fusion filter, trunk,
/// both heads) against central finite differences of the multitask loss.
/// Dropout masks are held fixed by reseeding the same generator for every
/// evaluation.
inline GradientCheckResult gate_backward_check(GateNet& gate, std::span<const GateSample> samples,
                                               GateActivation activation, double lambda, double h = 1e-5,
                                               std::uint64_t dropout_seed = 0) {
    auto total_loss = [&](bool with_backward, double* margin, bool* dead) {
        double loss = 0.0;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            Rng rng(derive_seed(dropout_seed, i));
            Graph g;
            GateLoss l = gated_loss(g, gate, samples[i], activation, lambda, true, rng);
            loss += g.value(l.loss)[0];
            if (margin) *margin = std::min(*margin, g.relu_margin());
            if (dead) *dead = *dead || l.trace.dead;
            if (with_backward) g.backward(l.loss);
        }
        return loss;
    };

    for (Parameter& p : gate.parameters()) p.zero_grad();
    GradientCheckResult result;
    result.relu_margin = std::numeric_limits<double>::infinity();
    total_loss(true, &result.relu_margin, &result.dead_gate);

    for (Parameter& p : gate.parameters()) {
        if (p.frozen) continue;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double original = p.value[i];
            p.value[i] = original + h;
            const double plus = total_loss(false, nullptr, nullptr);
            p.value[i] = original - h;
            const double minus = total_loss(false, nullptr, nullptr);
            p.value[i] = original;
            const double numeric = (plus - minus) / (2.0 * h);
            const double err = relative_error(p.grad[i], numeric);
            ++result.checked;
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_parameter = p.name;
                result.worst_index = i;
            }
        }
    }
    return result;
}

}  // namespace gmoe
