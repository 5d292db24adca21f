#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "evaluate.hpp"

namespace gmoe {

// ---------------------------------------------------------------------------
// Fusion-weight export

struct WeightExport {
    std::string scatter_csv;
    std::string histogram_csv;
    std::size_t rows = 0;
    std::vector<std::size_t> counts;
    double share_std = 0.0;
};

/// Scatter rows (one per test video) and a histogram of the spatial share
/// w1 / (w1 + w2) over [0, 1] from a report's weight samples.
inline WeightExport export_weights(const json& report, std::size_t bins = 10) {
    if (bins == 0) throw std::invalid_argument("export_weights: need at least one bin");
    if (!report.contains("weights") || !report["weights"].is_array()) {
        throw std::invalid_argument("export_weights: report has no weight samples");
    }
    WeightExport out;
    out.counts.assign(bins, 0);
    std::ostringstream scatter;
    scatter.precision(17);
    scatter << "id,label,cue_type,w_temporal,w_spatial,spatial_share,correct,dead_fraction,dead\n";
    std::vector<WeightSample> samples;
    for (const json& w : report["weights"]) {
        WeightSample s;
        s.id = w.at("id").get<std::string>();
        s.label = w.at("label").get<std::size_t>();
        s.cue = parse_cue_type(w.at("cue_type").get<std::string>());
        s.w_spatial = w.at("w_spatial").get<double>();
        s.w_temporal = w.at("w_temporal").get<double>();
        s.dead_fraction = w.at("dead_fraction").get<double>();
        s.correct = w.at("correct").get<bool>();
        const double share = spatial_share(s);
        scatter << s.id << ',' << s.label << ',' << to_string(s.cue) << ',' << s.w_temporal << ',' << s.w_spatial << ','
                << share << ',' << (s.correct ? 1 : 0) << ',' << s.dead_fraction << ',' << (s.dead_fraction > 0.0 ? 1 : 0) << '\n';
        const auto bin = std::min(bins - 1, static_cast<std::size_t>(share * static_cast<double>(bins)));
        ++out.counts[bin];
        samples.push_back(s);
    }
    std::ostringstream hist;
    hist << "bin_low,bin_high,count\n";
    for (std::size_t b = 0; b < bins; ++b) {
        hist << static_cast<double>(b) / static_cast<double>(bins) << ',' << static_cast<double>(b + 1) / static_cast<double>(bins)
             << ',' << out.counts[b] << '\n';
    }
    out.scatter_csv = scatter.str();
    out.histogram_csv = hist.str();
    out.rows = samples.size();
    out.share_std = spatial_share_std(samples);
    return out;
}

// ---------------------------------------------------------------------------
// Feature projection

struct Projection {
    Eigen::MatrixX2d coords;             // n x 2
    std::array<double, 2> explained{};   // variance ratios of the two components
};

/// Principal-component projection of the rows of `features` onto two axes.
inline Projection pca_2d(const Eigen::MatrixXd& features) {
    if (features.rows() < 2) throw std::invalid_argument("pca_2d: need at least two samples");
    if (features.cols() < 1) throw std::invalid_argument("pca_2d: samples have no features");
    const Eigen::MatrixXd centered = features.rowwise() - features.colwise().mean();
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(features.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) throw std::runtime_error("pca_2d: eigen decomposition failed");
    const Eigen::VectorXd values = solver.eigenvalues().reverse().cwiseMax(0.0);
    const Eigen::MatrixXd vectors = solver.eigenvectors().rowwise().reverse();
    Projection p;
    p.coords = Eigen::MatrixX2d::Zero(features.rows(), 2);
    const double total = values.sum();
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(2, values.size()); ++k) {
        p.coords.col(k) = centered * vectors.col(k);
        p.explained[static_cast<std::size_t>(k)] = total > 0.0 ? values(k) / total : 0.0;
    }
    return p;
}

struct FeatureRow {
    std::string id;
    std::size_t label = 0;
    CueType cue = CueType::Both;
    Tensor features;
};

/// Gate trunk pooled features per video, averaged over the video's crops.
inline std::vector<FeatureRow> gate_features(GateNet& gate, GateActivation activation, const CropStore& store) {
    std::vector<FeatureRow> rows;
    Rng unused(0);
    for (const VideoCrops& v : store.videos) {
        Tensor sum;
        for (const CropScores& c : v.crops) {
            const GateOutput out = gate_forward(gate, std::span<const FeaturePair>(&c.taps, 1), activation, false, unused);
            if (sum.size() == 0) sum = Tensor(out.pooled_features.shape());
            sum += out.pooled_features;
        }
        rows.push_back({v.id, v.label, v.cue, sum * (1.0 / static_cast<double>(v.crops.size()))});
    }
    return rows;
}

inline std::string projection_csv(const std::vector<FeatureRow>& rows, Projection& p) {
    if (rows.empty()) throw std::invalid_argument("projection_csv: no samples");
    Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].features.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].features.size(); ++j)
            x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i].features[j];
    p = pca_2d(x);
    std::ostringstream out;
    out.precision(17);
    out << "id,label,cue_type,pc1,pc2\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        out << rows[i].id << ',' << rows[i].label << ',' << to_string(rows[i].cue) << ',' << p.coords(r, 0) << ','
            << p.coords(r, 1) << '\n';
    }
    return out.str();
}

}  // namespace gmoe
