#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "data_synth.hpp"
#include "experts.hpp"
#include "fusion.hpp"
#include "tensor_io.hpp"

namespace gmoe {

/// Loss or gradient became non-finite.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Optimizer

/// Momentum buffers keyed by parameter name; frozen parameters get none.
struct OptimizerState {
    std::map<std::string, Tensor> velocity;
};

struct StepStats {
    double grad_norm = 0.0;     // global L2 norm before clipping
    double clipped_norm = 0.0;  // after clipping
};

/// Global L2 clipping, then v <- momentum * v + g, p <- p - lr * v.
/// Gradients are consumed (zeroed) by the step.
inline StepStats sgd_step(std::span<Parameter> params, OptimizerState& state, double lr, double momentum, double clip) {
    double sq = 0.0;
    for (const Parameter& p : params) {
        if (p.frozen) continue;
        for (double g : p.grad.data()) sq += g * g;
    }
    StepStats stats;
    stats.grad_norm = std::sqrt(sq);
    if (!std::isfinite(stats.grad_norm)) throw DivergenceError("non-finite gradient norm");
    const double scale = stats.grad_norm > clip ? clip / stats.grad_norm : 1.0;
    stats.clipped_norm = stats.grad_norm * scale;
    for (Parameter& p : params) {
        if (p.frozen) continue;
        auto [it, inserted] = state.velocity.try_emplace(p.name, p.value.shape());
        Tensor& v = it->second;
        if (v.shape() != p.value.shape()) throw ShapeError("optimizer state for " + p.name + " has the wrong shape");
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = momentum * v[i] + scale * p.grad[i];
            p.value[i] -= lr * v[i];
            if (!std::isfinite(p.value[i])) throw DivergenceError("parameter " + p.name + " became non-finite");
        }
        p.zero_grad();
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Training log

struct EpochRecord {
    std::string stage;
    std::size_t epoch = 0;
    double lr = 0.0;
    double lambda = 0.0;
    std::optional<double> train_loss;  // none for the evaluation-only epoch 0
    double val_accuracy = 0.0;
    double val_loss = 0.0;
    std::size_t dead_gates = 0;
    std::size_t steps = 0;
    double max_grad_norm = 0.0;
    double max_clipped_norm = 0.0;
    double head_c_grad_norm = 0.0;  // largest classification-head gradient norm seen in the epoch
    double wall_time_s = 0.0;
};

inline json to_json(const EpochRecord& r, bool with_time = true) {
    json j = {{"stage", r.stage},
              {"epoch", r.epoch},
              {"lr", r.lr},
              {"lambda", r.lambda},
              {"train_loss", r.train_loss ? json(*r.train_loss) : json(nullptr)},
              {"val_accuracy", r.val_accuracy},
              {"val_loss", r.val_loss},
              {"dead_gates", r.dead_gates},
              {"steps", r.steps},
              {"max_grad_norm", r.max_grad_norm},
              {"max_clipped_norm", r.max_clipped_norm},
              {"head_c_grad_norm", r.head_c_grad_norm}};
    if (with_time) j["wall_time_s"] = r.wall_time_s;
    return j;
}

struct StageSummary {
    std::string stage;
    double best_val_accuracy = 0.0;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
    std::string checkpoint;
};

inline json to_json(const StageSummary& s) {
    return {{"stage", s.stage}, {"best_val_accuracy", s.best_val_accuracy}, {"best_epoch", s.best_epoch},
            {"epochs_run", s.epochs_run}, {"checkpoint", s.checkpoint}};
}

struct TrainLog {
    std::vector<EpochRecord> epochs;
    std::vector<StageSummary> stages;
    std::ostream* stream = nullptr;  // receives each record as a JSON line when set

    void add(const EpochRecord& r) {
        epochs.push_back(r);
        if (stream) *stream << to_json(r).dump() << '\n' << std::flush;
    }

    /// JSON lines without wall-clock fields, for reproducibility comparisons.
    std::string deterministic_dump() const {
        std::string out;
        for (const EpochRecord& r : epochs) out += to_json(r, false).dump() + '\n';
        return out;
    }
};

// ---------------------------------------------------------------------------
// Stage schedule: early stopping with a single learning-rate drop

class StageSchedule {
public:
    StageSchedule(double lr_initial, double lr_reduced, std::size_t patience, std::size_t max_epochs)
        : lr_(lr_initial), lr_reduced_(lr_reduced), patience_(patience), max_epochs_(max_epochs) {}

    double lr() const noexcept { return lr_; }
    std::size_t best_epoch() const noexcept { return best_epoch_; }
    double best_accuracy() const noexcept { return best_acc_; }

    /// Records the validation result of `epoch`; returns true when it is the
    /// new best (higher accuracy, or equal accuracy with lower loss).
    bool observe(std::size_t epoch, double accuracy, double loss) {
        const bool better = epoch == 0 || accuracy > best_acc_ || (accuracy == best_acc_ && loss < best_loss_);
        if (better) {
            best_acc_ = accuracy;
            best_loss_ = loss;
            best_epoch_ = epoch;
            stale_ = 0;
        } else {
            ++stale_;
        }
        last_epoch_ = epoch;
        return better;
    }

    /// Decides whether another epoch runs; drops the learning rate once after
    /// the first patience window without improvement.
    bool keep_going() {
        if (last_epoch_ >= max_epochs_) return false;
        if (stale_ < patience_) return true;
        if (!dropped_) {
            dropped_ = true;
            lr_ = lr_reduced_;
            stale_ = 0;
            return true;
        }
        return false;
    }

private:
    double lr_;
    double lr_reduced_;
    std::size_t patience_;
    std::size_t max_epochs_;
    double best_acc_ = -1.0;
    double best_loss_ = 0.0;
    std::size_t best_epoch_ = 0;
    std::size_t last_epoch_ = 0;
    std::size_t stale_ = 0;
    bool dropped_ = false;
};

inline std::vector<Tensor> snapshot(const std::vector<Parameter>& params) {
    std::vector<Tensor> out;
    for (const Parameter& p : params) out.push_back(p.value);
    return out;
}

inline void restore(std::vector<Parameter>& params, const std::vector<Tensor>& values) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].value = values[i];
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(std::span<std::size_t>(idx));
    return idx;
}

inline void check_finite(double loss, const std::string& stage) {
    if (!std::isfinite(loss)) throw DivergenceError("stage " + stage + ": loss became non-finite");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: experts

struct ValidationResult {
    double accuracy = 0.0;
    double loss = 0.0;
    std::size_t dead = 0;
};

inline ValidationResult validate_expert(const ExpertNet& net, Stream stream, const std::vector<SynthVideo>& val,
                                        std::size_t segments, std::size_t flow_frames) {
    ValidationResult r;
    if (val.empty()) return r;
    for (const SynthVideo& v : val) {
        const Tensor s = video_expert_scores(net, center_snippets(v, segments, flow_frames), stream);
        r.accuracy += s.argmax() == v.label ? 1.0 : 0.0;
        r.loss += cross_entropy_value(s, v.label);
    }
    r.accuracy /= static_cast<double>(val.size());
    r.loss /= static_cast<double>(val.size());
    return r;
}

/// Trains one expert with cross-entropy on video-level consensus scores and
/// leaves it at its best-validation parameters.
inline StageSummary train_expert(ExpertNet& net, Stream stream, const std::vector<SynthVideo>& train,
                                 const std::vector<SynthVideo>& val, const TrainConfig& cfg, std::size_t flow_frames,
                                 Rng& rng, TrainLog& log) {
    const std::string stage = std::string("1-") + to_string(stream);
    StageSchedule schedule(cfg.expert_lr_initial, cfg.expert_lr_reduced, cfg.patience, cfg.max_epochs_experts);
    OptimizerState opt;
    auto best = snapshot(net.parameters());
    for (Parameter& p : net.parameters()) p.zero_grad();

    for (std::size_t epoch = 0;; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochRecord rec;
        rec.stage = stage;
        rec.epoch = epoch;
        rec.lr = schedule.lr();
        if (epoch > 0) {
            double total = 0.0;
            const auto order = detail::shuffled_indices(train.size(), rng);
            for (std::size_t b = 0; b < order.size(); b += cfg.batch_size_experts) {
                const std::size_t end = std::min(order.size(), b + cfg.batch_size_experts);
                const double inv = 1.0 / static_cast<double>(end - b);
                for (std::size_t i = b; i < end; ++i) {
                    const SynthVideo& v = train[order[i]];
                    Graph g;
                    Var loss = cross_entropy(g, video_expert_scores(g, net, sample_snippets(v, cfg.num_segments, flow_frames, rng), stream), v.label);
                    const double value = g.value(loss)[0];
                    detail::check_finite(value, stage);
                    total += value;
                    g.backward(loss, inv);
                }
                const StepStats st = sgd_step(net.parameters(), opt, schedule.lr(), cfg.momentum, cfg.grad_clip);
                rec.max_grad_norm = std::max(rec.max_grad_norm, st.grad_norm);
                rec.max_clipped_norm = std::max(rec.max_clipped_norm, st.clipped_norm);
                ++rec.steps;
            }
            rec.train_loss = total / static_cast<double>(train.size());
        }
        const ValidationResult vr = validate_expert(net, stream, val, cfg.num_segments, flow_frames);
        rec.val_accuracy = vr.accuracy;
        rec.val_loss = vr.loss;
        if (schedule.observe(epoch, vr.accuracy, vr.loss)) best = snapshot(net.parameters());
        rec.wall_time_s = detail::seconds_since(t0);
        log.add(rec);
        if (!schedule.keep_going()) break;
        if (schedule.lr() != rec.lr) opt.velocity.clear();
    }
    restore(net.parameters(), best);
    return {stage, schedule.best_accuracy(), schedule.best_epoch(), log.epochs.back().epoch, ""};
}

struct Experts {
    ExpertNet rgb;
    ExpertNet flow;
};

inline Experts make_experts(const ExperimentConfig& cfg) {
    const std::size_t c = cfg.dataset.num_classes();
    Rng rgb_init(derive_seed(cfg.train.seed, 11));
    Rng flow_init(derive_seed(cfg.train.seed, 12));
    return {ExpertNet("rgb", 3, c, rgb_init, cfg.model.expert_widths),
            ExpertNet("flow", 2 * cfg.dataset.flow_frames, c, flow_init, cfg.model.expert_widths)};
}

/// Stage 1: trains both experts independently, then freezes them.
inline Experts train_experts(const ExperimentConfig& cfg, const Dataset& data, TrainLog& log) {
    Experts e = make_experts(cfg);
    Rng rgb_rng(derive_seed(cfg.train.seed, 21));
    Rng flow_rng(derive_seed(cfg.train.seed, 22));
    log.stages.push_back(train_expert(e.rgb, Stream::Spatial, data.train, data.val, cfg.train, cfg.dataset.flow_frames, rgb_rng, log));
    log.stages.push_back(train_expert(e.flow, Stream::Temporal, data.train, data.val, cfg.train, cfg.dataset.flow_frames, flow_rng, log));
    e.rgb.set_frozen(true);
    e.flow.set_frozen(true);
    return e;
}

inline std::uint64_t expert_hash(const Experts& e) {
    std::vector<Parameter> all = e.rgb.parameters();
    all.insert(all.end(), e.flow.parameters().begin(), e.flow.parameters().end());
    return parameter_hash(all);
}

// ---------------------------------------------------------------------------
// Frozen-expert feature bank

/// Tap features and scores of both experts at one snippet start.
struct StartFeatures {
    FeaturePair taps;
    Tensor rgb_scores;
    Tensor flow_scores;
};

struct VideoBank {
    std::string id;
    std::size_t label = 0;
    CueType cue = CueType::Both;
    std::vector<StartFeatures> starts;
};

/// Runs the frozen experts once on every valid snippet start of every video.
inline std::vector<VideoBank> build_feature_bank(const Experts& e, const std::vector<SynthVideo>& videos, std::size_t tap_layer,
                                                 std::size_t flow_frames) {
    std::vector<VideoBank> bank;
    bank.reserve(videos.size());
    for (const SynthVideo& v : videos) {
        VideoBank vb{v.id, v.label, v.cue, {}};
        for (std::size_t s = 0; s < valid_starts(v, flow_frames); ++s) {
            const Snippet sn = snippet_at(v, s, flow_frames);
            ExpertNet::Inference a = e.rgb.infer(sn.spatial, tap_layer);
            ExpertNet::Inference b = e.flow.infer(sn.temporal, tap_layer);
            vb.starts.push_back({{std::move(a.feature), std::move(b.feature)}, std::move(a.scores), std::move(b.scores)});
        }
        bank.push_back(std::move(vb));
    }
    return bank;
}

/// Gate input for the given snippet starts: tap features per snippet and the
/// segmental consensus of each expert's scores.
inline GateSample gate_sample(const VideoBank& v, std::span<const std::size_t> starts) {
    GateSample s;
    s.label = v.label;
    std::vector<Tensor> rgb, flow;
    for (std::size_t i : starts) {
        const StartFeatures& f = v.starts.at(i);
        s.snippets.push_back(f.taps);
        rgb.push_back(f.rgb_scores);
        flow.push_back(f.flow_scores);
    }
    s.scores = {segmental_consensus(rgb), segmental_consensus(flow)};
    return s;
}

inline GateSample center_gate_sample(const VideoBank& v, std::size_t segments) {
    const auto starts = center_starts(v.starts.size(), segments);
    return gate_sample(v, starts);
}

// ---------------------------------------------------------------------------
// Stages 2 and 3: gate

inline ValidationResult validate_gate(GateNet& gate, GateActivation activation, const std::vector<VideoBank>& val,
                                      std::size_t segments) {
    ValidationResult r;
    if (val.empty()) return r;
    Rng unused(0);
    for (const VideoBank& v : val) {
        const GateSample s = center_gate_sample(v, segments);
        const GateOutput out = gate_forward(gate, s.snippets, activation, false, unused);
        const Tensor fused = gated_fuse(s.scores, out.w1, out.w2);
        r.accuracy += fused.argmax() == v.label ? 1.0 : 0.0;
        r.loss += cross_entropy_value(fused, v.label);
        r.dead += out.dead ? 1 : 0;
    }
    r.accuracy /= static_cast<double>(val.size());
    r.loss /= static_cast<double>(val.size());
    return r;
}

struct GateStageSpec {
    std::string stage;
    double lambda = 0.0;
    std::size_t batch_size = 32;
};

/// Trains the gate on the multitask loss with the given lambda and leaves it
/// at its best-validation parameters. Epoch 0 evaluates the starting point,
/// so the result is never worse on validation than where the stage began.
inline StageSummary train_gate_stage(GateNet& gate, GateActivation activation, const GateStageSpec& spec,
                                     const std::vector<VideoBank>& train, const std::vector<VideoBank>& val,
                                     const TrainConfig& cfg, Rng& rng, TrainLog& log) {
    StageSchedule schedule(cfg.lr_initial, cfg.lr_reduced, cfg.patience, cfg.max_epochs_gate);
    OptimizerState opt;
    auto best = snapshot(gate.parameters());
    for (Parameter& p : gate.parameters()) p.zero_grad();
    const std::size_t head_c = gate.trunk_offset() + 6;

    for (std::size_t epoch = 0;; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochRecord rec;
        rec.stage = spec.stage;
        rec.epoch = epoch;
        rec.lr = schedule.lr();
        rec.lambda = spec.lambda;
        if (epoch > 0) {
            double total = 0.0;
            const auto order = detail::shuffled_indices(train.size(), rng);
            for (std::size_t b = 0; b < order.size(); b += spec.batch_size) {
                const std::size_t end = std::min(order.size(), b + spec.batch_size);
                const double inv = 1.0 / static_cast<double>(end - b);
                for (std::size_t i = b; i < end; ++i) {
                    const VideoBank& v = train[order[i]];
                    const auto starts = sample_starts(v.starts.size(), cfg.num_segments, rng);
                    const GateSample sample = gate_sample(v, starts);
                    Graph g;
                    const GateLoss l = gated_loss(g, gate, sample, activation, spec.lambda, true, rng);
                    const double value = g.value(l.loss)[0];
                    detail::check_finite(value, spec.stage);
                    total += value;
                    rec.dead_gates += l.trace.dead ? 1 : 0;
                    g.backward(l.loss, inv);
                }
                double hc = 0.0;
                for (std::size_t k = head_c; k < head_c + 2; ++k)
                    for (double x : gate.parameters()[k].grad.data()) hc += x * x;
                rec.head_c_grad_norm = std::max(rec.head_c_grad_norm, std::sqrt(hc));
                const StepStats st = sgd_step(gate.parameters(), opt, schedule.lr(), cfg.momentum, cfg.grad_clip);
                rec.max_grad_norm = std::max(rec.max_grad_norm, st.grad_norm);
                rec.max_clipped_norm = std::max(rec.max_clipped_norm, st.clipped_norm);
                ++rec.steps;
            }
            rec.train_loss = total / static_cast<double>(train.size());
        }
        const ValidationResult vr = validate_gate(gate, activation, val, cfg.num_segments);
        rec.val_accuracy = vr.accuracy;
        rec.val_loss = vr.loss;
        if (epoch == 0) rec.dead_gates = vr.dead;
        if (schedule.observe(epoch, vr.accuracy, vr.loss)) best = snapshot(gate.parameters());
        rec.wall_time_s = detail::seconds_since(t0);
        log.add(rec);
        if (!schedule.keep_going()) break;
        if (schedule.lr() != rec.lr) opt.velocity.clear();
    }
    restore(gate.parameters(), best);
    return {spec.stage, schedule.best_accuracy(), schedule.best_epoch(), log.epochs.back().epoch, ""};
}

inline GateConfig gate_config(const ExperimentConfig& cfg) {
    GateConfig g;
    g.style = cfg.model.fusion;
    g.tap_layer = cfg.model.tap_layer;
    g.feature_channels = cfg.model.expert_widths[cfg.model.tap_layer - 1];
    g.num_classes = cfg.dataset.num_classes();
    g.dropout_ratio = cfg.train.dropout_ratio;
    return g;
}

inline GateNet make_gate(const ExperimentConfig& cfg) {
    Rng init(derive_seed(cfg.train.seed, 31));
    return GateNet(gate_config(cfg), cfg.model.activation, init);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline json checkpoint_meta(const ExperimentConfig& cfg, int stage, double lambda) {
    return {{"stage", stage},
            {"fusion", to_string(cfg.model.fusion)},
            {"activation", to_string(cfg.model.activation)},
            {"tap_layer", cfg.model.tap_layer},
            {"lambda", lambda},
            {"config", to_json(cfg)}};
}

inline std::vector<Parameter> checkpoint_params(const Experts& e, const GateNet* gate) {
    std::vector<Parameter> all = e.rgb.parameters();
    all.insert(all.end(), e.flow.parameters().begin(), e.flow.parameters().end());
    if (gate) all.insert(all.end(), gate->parameters().begin(), gate->parameters().end());
    return all;
}

/// Writes <dir>/stage<k>.gmt plus a JSON sidecar with the fusion settings.
inline std::string write_stage_checkpoint(const std::filesystem::path& dir, int stage, const ExperimentConfig& cfg,
                                          const Experts& e, const GateNet* gate, double lambda) {
    const auto path = dir / ("stage" + std::to_string(stage) + ".gmt");
    const json meta = checkpoint_meta(cfg, stage, lambda);
    save_checkpoint(path, checkpoint_params(e, gate), meta);
    std::ofstream side(dir / ("stage" + std::to_string(stage) + ".json"));
    side << meta.dump(2) << '\n';
    return path.string();
}

struct LoadedCheckpoint {
    int stage = 0;
    Experts experts;
    std::optional<GateNet> gate;
    json meta;
};

/// Loads any stage checkpoint into freshly built networks for `cfg`; shape or
/// name disagreements surface as ShapeMismatchError.
inline LoadedCheckpoint load_stage_checkpoint(const std::filesystem::path& path, const ExperimentConfig& cfg) {
    const TensorFile file = read_tensor_file(path);
    LoadedCheckpoint out;
    out.meta = file.meta;
    out.stage = file.meta.value("stage", 0);
    if (out.stage < 1 || out.stage > 3) throw MalformedHeaderError(path.string() + ": not a stage checkpoint");
    if (out.stage >= 2) {
        if (file.meta.value("fusion", std::string()) != to_string(cfg.model.fusion) ||
            file.meta.value("activation", std::string()) != to_string(cfg.model.activation) ||
            file.meta.value("tap_layer", std::size_t{0}) != cfg.model.tap_layer) {
            throw ShapeMismatchError(path.string() + ": checkpoint gate settings disagree with the config");
        }
    }
    out.experts = make_experts(cfg);
    load_parameters(file, out.experts.rgb.parameters());
    load_parameters(file, out.experts.flow.parameters());
    out.experts.rgb.set_frozen(true);
    out.experts.flow.set_frozen(true);
    if (out.stage >= 2) {
        out.gate = make_gate(cfg);
        load_parameters(file, out.gate->parameters());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Full pipeline

struct TrainOptions {
    std::filesystem::path out_dir;               // empty: no checkpoints written
    std::optional<std::filesystem::path> resume;  // any stage checkpoint
    const Experts* pretrained = nullptr;          // frozen experts to reuse instead of stage 1
    const TrainLog* pretrained_log = nullptr;     // stage-1 records copied into the log with them
    const std::vector<VideoBank>* train_bank = nullptr;  // precomputed features of the frozen experts
    const std::vector<VideoBank>* val_bank = nullptr;
    std::ostream* log_stream = nullptr;           // JSON lines as they are produced
};

struct TrainedModel {
    Experts experts;
    GateNet gate;                     // final model
    std::optional<GateNet> stage2_gate;
    TrainLog log;
    std::uint64_t expert_hash_before_gate = 0;
    std::uint64_t expert_hash_after_gate = 0;
    int resumed_from = 0;
};

/// Runs the three stages: experts, gate with lambda 0, then the multitask
/// stage fine-tuned from the best stage-2 gate.
inline TrainedModel train_pipeline(const ExperimentConfig& cfg, const Dataset& data, const TrainOptions& opts = {}) {
    TrainedModel m;
    m.log.stream = opts.log_stream;
    const bool write = !opts.out_dir.empty();
    if (write) std::filesystem::create_directories(opts.out_dir);

    int start_stage = 1;
    std::optional<LoadedCheckpoint> loaded;
    if (opts.resume) {
        loaded = load_stage_checkpoint(*opts.resume, cfg);
        start_stage = loaded->stage + 1;
        m.resumed_from = loaded->stage;
        m.experts = loaded->experts;
    } else if (opts.pretrained) {
        m.experts = *opts.pretrained;
        m.experts.rgb.set_frozen(true);
        m.experts.flow.set_frozen(true);
        if (opts.pretrained_log) {
            for (const EpochRecord& r : opts.pretrained_log->epochs) m.log.add(r);
            m.log.stages = opts.pretrained_log->stages;
        }
        start_stage = 2;
    }

    if (start_stage <= 1) {
        m.experts = train_experts(cfg, data, m.log);
        if (write) {
            const auto path = write_stage_checkpoint(opts.out_dir, 1, cfg, m.experts, nullptr, 0.0);
            for (StageSummary& s : m.log.stages) s.checkpoint = path;
        }
    }

    m.expert_hash_before_gate = expert_hash(m.experts);
    const bool need_gate_training = start_stage <= 3 && (start_stage <= 2 || cfg.train.multitask);
    std::vector<VideoBank> own_train, own_val;
    if (need_gate_training && !opts.train_bank) {
        own_train = build_feature_bank(m.experts, data.train, cfg.model.tap_layer, cfg.dataset.flow_frames);
    }
    if (need_gate_training && !opts.val_bank) {
        own_val = build_feature_bank(m.experts, data.val, cfg.model.tap_layer, cfg.dataset.flow_frames);
    }
    const std::vector<VideoBank>& train_bank = opts.train_bank ? *opts.train_bank : own_train;
    const std::vector<VideoBank>& val_bank = opts.val_bank ? *opts.val_bank : own_val;

    if (start_stage <= 2) {
        m.gate = make_gate(cfg);
        Rng rng(derive_seed(cfg.train.seed, 32));
        StageSummary s = train_gate_stage(m.gate, cfg.model.activation, {"2", cfg.train.lambda_gate, cfg.train.batch_size_gate},
                                          train_bank, val_bank, cfg.train, rng, m.log);
        if (write) s.checkpoint = write_stage_checkpoint(opts.out_dir, 2, cfg, m.experts, &m.gate, cfg.train.lambda_gate);
        m.log.stages.push_back(s);
        m.stage2_gate = m.gate;
    } else {
        m.gate = *loaded->gate;
        if (loaded->stage == 2) m.stage2_gate = m.gate;
    }

    if (cfg.train.multitask && start_stage <= 3) {
        Rng rng(derive_seed(cfg.train.seed, 33));
        StageSummary s = train_gate_stage(m.gate, cfg.model.activation,
                                          {"3", cfg.train.lambda_multitask, cfg.train.batch_size_multitask}, train_bank,
                                          val_bank, cfg.train, rng, m.log);
        if (write) s.checkpoint = write_stage_checkpoint(opts.out_dir, 3, cfg, m.experts, &m.gate, cfg.train.lambda_multitask);
        m.log.stages.push_back(s);
    }
    m.expert_hash_after_gate = expert_hash(m.experts);
    if (m.expert_hash_after_gate != m.expert_hash_before_gate) {
        throw std::logic_error("expert parameters changed during gate training");
    }
    if (write) {
        std::ofstream out(opts.out_dir / "train_log.jsonl");
        for (const EpochRecord& r : m.log.epochs) out << to_json(r).dump() << '\n';
    }
    return m;
}

}  // namespace gmoe
