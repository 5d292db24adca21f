#include <catch_amalgamated.hpp>

#include <gmoe/evaluate.hpp>

using namespace gmoe;

namespace {

ExperimentConfig tiny_config() {
    return parse_config(json::parse(R"({
        "dataset": {"videos_per_class": 10, "frames": 18},
        "model": {"fusion": "concat", "activation": "softmax", "tap_layer": 1},
        "train": {"patience": 1, "max_epochs_experts": 2, "max_epochs_gate": 2}
    })"));
}

struct Fixture {
    ExperimentConfig cfg = tiny_config();
    Dataset data = generate_dataset(cfg.dataset);
    TrainedModel model = train_pipeline(cfg, data);
    CropStore test = build_crop_store(model.experts, data.test, cfg.model.tap_layer, cfg.test, cfg.dataset.flow_frames);
    CropStore val = build_crop_store(model.experts, data.val, cfg.model.tap_layer, cfg.test, cfg.dataset.flow_frames);
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

}  // namespace

TEST_CASE("forcing (0.5, 0.5) reproduces even averaging on every video") {
    Fixture& f = fixture();
    const GatedResult forced = evaluate_gated(f.model.gate, f.cfg.model.activation, f.test, std::pair{0.5, 0.5});
    REQUIRE(forced.samples.size() == f.test.videos.size());
    const auto even = labeled_mean_scores(f.test);
    for (std::size_t i = 0; i < even.size(); ++i) {
        CHECK(forced.samples[i].predicted == fixed_fuse(even[i].scores, {1.0, 1.0}).argmax());
    }
    CHECK(forced.accuracy == fixed_accuracy(f.test, {1.0, 1.0}));
    CHECK(forced.dead_gate_rate == 0.0);
}

TEST_CASE("evaluation is repeatable and shares one set of scores") {
    Fixture& f = fixture();
    const CropStore again = build_crop_store(f.model.experts, f.data.test, f.cfg.model.tap_layer, f.cfg.test, f.cfg.dataset.flow_frames);
    CHECK(again.hash() == f.test.hash());
    const EvaluationResult a = evaluate_model(f.model, f.cfg, f.test, f.val);
    const EvaluationResult b = evaluate_model(f.model, f.cfg, again, f.val);
    CHECK(a.accuracy.spatial == b.accuracy.spatial);
    CHECK(a.accuracy.temporal == b.accuracy.temporal);
    CHECK(a.accuracy.gated == b.accuracy.gated);
    CHECK(a.score_hash == b.score_hash);
    CHECK(a.gated.samples.size() == f.data.test.size());

    CropStore perturbed = f.test;
    perturbed.videos[0].crops[0].flow[0] += 1e-12;
    CHECK(perturbed.hash() != f.test.hash());
}

TEST_CASE("softmax gate weights sum to one per crop") {
    Fixture& f = fixture();
    const GatedResult r = evaluate_gated(f.model.gate, f.cfg.model.activation, f.test);
    for (const WeightSample& s : r.samples) {
        CHECK(s.w_spatial >= 0.0);
        CHECK(s.w_temporal >= 0.0);
        CHECK(std::abs(s.w_spatial + s.w_temporal - 1.0) < 1e-12);
    }
}

TEST_CASE("crop evaluations per stream") {
    Fixture& f = fixture();
    CHECK(evaluate_model(f.model, f.cfg, f.test, f.val).crop_evaluations_per_stream == 10);

    const SynthVideo& v = f.data.test.front();
    const CropStore paper = build_crop_store(f.model.experts, {v}, f.cfg.model.tap_layer, TestConfig::paper_scale(),
                                             f.cfg.dataset.flow_frames);
    CHECK(paper.videos[0].spatial_evaluations == 250);
    CHECK(paper.videos[0].temporal_evaluations == 250);
    CHECK(paper.videos[0].crops.size() == 250);
}

TEST_CASE("report carries every method and the weight samples") {
    Fixture& f = fixture();
    const EvaluationResult r = evaluate_model(f.model, f.cfg, f.test, f.val);
    const json rep = make_report(f.cfg, f.model, r, 1.5);
    CHECK(rep["schema"] == kReportSchema);
    CHECK(rep["schema_version"] == kReportSchemaVersion);
    for (const char* k : {"gated", "fixed", "even_average", "sci", "spatial", "temporal", "gated_stage2"}) {
        CHECK(rep["accuracy"].contains(k));
    }
    CHECK(rep["weights"].size() == f.data.test.size());
    CHECK(rep["score_hash"] == hex64(f.test.hash()));
    CHECK(rep["epochs_to_best"].contains("1-spatial"));
    CHECK(rep["epochs_to_best"].contains("3"));
    CHECK(rep["wall_time_s"] == 1.5);
}
