#include <catch_amalgamated.hpp>

#include <sstream>

#include <gmoe/analysis.hpp>

#include "test_support.hpp"

using namespace gmoe;

namespace {

json weight_row(const std::string& id, double ws, double wt, double dead = 0.0, bool correct = true) {
    return {{"id", id}, {"label", 1}, {"cue_type", "both"}, {"w_spatial", ws}, {"w_temporal", wt},
            {"dead_fraction", dead}, {"predicted", 1}, {"correct", correct}};
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

}  // namespace

TEST_CASE("pca_2d") {
    Rng rng(1);
    SECTION("centered 2-D data is only rotated") {
        Eigen::MatrixXd x(30, 2);
        for (Eigen::Index i = 0; i < 30; ++i) {
            x(i, 0) = rng.normal(0, 2);
            x(i, 1) = rng.normal(0, 0.5);
        }
        x = x.rowwise() - x.colwise().mean();
        const Projection p = pca_2d(x);
        for (Eigen::Index i = 0; i < 30; ++i)
            for (Eigen::Index j = 0; j < 30; ++j) {
                CHECK(std::abs((x.row(i) - x.row(j)).norm() - (p.coords.row(i) - p.coords.row(j)).norm()) < 1e-9);
            }
        CHECK(std::abs(p.explained[0] + p.explained[1] - 1.0) < 1e-12);
    }
    SECTION("duplicates share coordinates; ratios are ordered and sum to at most 1") {
        Eigen::MatrixXd x = Eigen::MatrixXd::Zero(20, 6);
        for (Eigen::Index i = 0; i < 20; ++i)
            for (Eigen::Index j = 0; j < 6; ++j) x(i, j) = rng.uniform(-1, 1);
        x.row(7) = x.row(3);
        const Projection p = pca_2d(x);
        CHECK(p.coords.row(7) == p.coords.row(3));
        CHECK(p.explained[0] >= p.explained[1]);
        CHECK(p.explained[1] >= 0.0);
        CHECK(p.explained[0] + p.explained[1] <= 1.0 + 1e-12);
    }
    SECTION("collinear points load entirely on the first axis") {
        Eigen::MatrixXd x(5, 3);
        for (Eigen::Index i = 0; i < 5; ++i) x.row(i) << 1.0 * i, 2.0 * i, -1.0 * i;
        const Projection p = pca_2d(x);
        CHECK(std::abs(p.explained[0] - 1.0) < 1e-12);
        CHECK(p.coords.col(1).norm() < 1e-9);
    }
    CHECK_THROWS_AS(pca_2d(Eigen::MatrixXd::Zero(1, 4)), std::invalid_argument);
}

TEST_CASE("export_weights") {
    json report;
    report["weights"] = json::array();
    Rng rng(2);
    for (int i = 0; i < 57; ++i) {
        const double w = rng.uniform(0, 1);
        report["weights"].push_back(weight_row("v" + std::to_string(i), w, 1.0 - w));
    }
    report["weights"].push_back(weight_row("edge", 1.0, 0.0));
    report["weights"].push_back(weight_row("dead", 0.5, 0.5, 1.0, false));

    const WeightExport e = export_weights(report, 10);
    CHECK(e.rows == 59);
    std::size_t total = 0;
    for (std::size_t c : e.counts) total += c;
    CHECK(total == 59);

    const auto scatter = parse_csv(e.scatter_csv);
    REQUIRE(scatter.size() == 60);
    CHECK(scatter[0][3] == "w_temporal");
    for (std::size_t r = 1; r < scatter.size(); ++r) {
        CHECK(std::abs(std::stod(scatter[r][3]) + std::stod(scatter[r][4]) - 1.0) < 1e-12);
    }
    CHECK(scatter.back()[8] == "1");
    CHECK(scatter.back()[6] == "0");
    CHECK(scatter[1][8] == "0");

    const auto hist = parse_csv(e.histogram_csv);
    REQUIRE(hist.size() == 11);
    std::size_t from_csv = 0;
    for (std::size_t r = 1; r < hist.size(); ++r) from_csv += std::stoul(hist[r][2]);
    CHECK(from_csv == 59);
    CHECK(e.counts.back() >= 1);

    CHECK_THROWS_AS(export_weights(json::object()), std::invalid_argument);
}

TEST_CASE("gate feature projection") {
    GateConfig gc;
    gc.style = FusionStyle::Concat;
    gc.feature_channels = 4;
    gc.num_classes = 3;
    Rng rng(3);
    GateNet gate(gc, GateActivation::Softmax, rng);
    CropStore store;
    for (int v = 0; v < 6; ++v) {
        VideoCrops vc{"v" + std::to_string(v), static_cast<std::size_t>(v % 3), CueType::Both, {}, 0, 0};
        for (int c = 0; c < 2; ++c) {
            vc.crops.push_back({{testing::random_tensor({4, 4, 4}, rng), testing::random_tensor({4, 4, 4}, rng)},
                                testing::random_tensor({3}, rng), testing::random_tensor({3}, rng)});
        }
        store.videos.push_back(vc);
    }
    const auto rows = gate_features(gate, GateActivation::Softmax, store);
    REQUIRE(rows.size() == 6);
    CHECK(rows[0].features.size() == 8);
    Projection p;
    const auto csv = parse_csv(projection_csv(rows, p));
    CHECK(csv.size() == 7);
    CHECK(csv[0] == std::vector<std::string>{"id", "label", "cue_type", "pc1", "pc2"});
    CHECK(p.explained[0] + p.explained[1] <= 1.0 + 1e-12);
    CHECK_THROWS_AS(projection_csv({rows[0]}, p), std::invalid_argument);
}
