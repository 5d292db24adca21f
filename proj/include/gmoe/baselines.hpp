#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "autodiff.hpp"
#include "experts.hpp"
#include "tensor.hpp"

namespace gmoe {

/// Fixed late-fusion weights applied to pre-softmax scores.
struct FixedWeight {
    double w_spatial = 1.0;
    double w_temporal = 1.0;

    void validate() const {
        if (w_spatial < 0.0 || w_temporal < 0.0 || (w_spatial == 0.0 && w_temporal == 0.0)) {
            throw std::invalid_argument("fixed fusion weights must be non-negative and not both zero");
        }
    }
};

inline Tensor fixed_fuse(const ExpertScores& scores, const FixedWeight& w) {
    w.validate();
    scores.g_rgb.require_same_shape(scores.g_flow, "fixed_fuse");
    Tensor out(scores.g_rgb.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = w.w_spatial * scores.g_rgb[i] + w.w_temporal * scores.g_flow[i];
    return out;
}

/// Temporal-to-spatial ratios searched by default, spatial weight fixed at 1.
inline const std::vector<double>& default_weight_grid() {
    static const std::vector<double> grid{0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0};
    return grid;
}

struct LabeledScores {
    ExpertScores scores;
    std::size_t label = 0;
};

inline double fixed_weight_accuracy(std::span<const LabeledScores> data, const FixedWeight& w) {
    if (data.empty()) throw std::invalid_argument("fixed_weight_accuracy: empty data");
    std::size_t correct = 0;
    for (const LabeledScores& s : data) correct += fixed_fuse(s.scores, w).argmax() == s.label ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Picks the temporal ratio with the best accuracy. Ties go to the ratio
/// closest to 1:1 on a log scale, then to the smaller temporal weight.
inline FixedWeight grid_search_weight(std::span<const LabeledScores> validation,
                                      std::span<const double> temporal_ratios = default_weight_grid()) {
    if (validation.empty()) throw std::invalid_argument("grid_search_weight: empty validation set");
    if (temporal_ratios.empty()) throw std::invalid_argument("grid_search_weight: empty grid");
    double best_acc = -1.0;
    double best_ratio = 0.0;
    for (double r : temporal_ratios) {
        const double acc = fixed_weight_accuracy(validation, {1.0, r});
        const bool better = acc > best_acc ||
                            (acc == best_acc && (std::abs(std::log(r)) < std::abs(std::log(best_ratio)) ||
                                                 (std::abs(std::log(r)) == std::abs(std::log(best_ratio)) && r < best_ratio)));
        if (better) {
            best_acc = acc;
            best_ratio = r;
        }
    }
    return {1.0, best_ratio};
}

/// Sparsity concentration index of a non-negative vector:
/// (C * max p / sum p - 1) / (C - 1), 1 for one-hot and 0 for uniform.
inline double sci(const Tensor& p) {
    if (p.size() < 2) throw std::invalid_argument("sci: need at least two classes");
    double total = 0.0, top = 0.0;
    for (double v : p.data()) {
        if (v < 0.0) throw std::invalid_argument("sci: negative probability");
        total += v;
        top = std::max(top, v);
    }
    if (total == 0.0) throw std::invalid_argument("sci: all-zero vector");
    const double c = static_cast<double>(p.size());
    return std::clamp((c * top / total - 1.0) / (c - 1.0), 0.0, 1.0);
}

/// Softmax each stream, weight by normalized SCI, sum. Both SCIs zero falls
/// back to the even average.
inline Tensor sci_fuse(const ExpertScores& scores) {
    scores.g_rgb.require_same_shape(scores.g_flow, "sci_fuse");
    const Tensor pa = softmax_values(scores.g_rgb);
    const Tensor pb = softmax_values(scores.g_flow);
    const double sa = sci(pa), sb = sci(pb);
    const double wa = sa + sb > 0.0 ? sa / (sa + sb) : 0.5;
    Tensor out(pa.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = wa * pa[i] + (1.0 - wa) * pb[i];
    return out;
}

}  // namespace gmoe
