#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "autograd.hpp"
#include "data.hpp"
#include "encoders.hpp"
#include "errors.hpp"
#include "heads.hpp"
#include "inference.hpp"
#include "metrics.hpp"
#include "parameters.hpp"
#include "rng.hpp"

namespace hammer {

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    double max_lr = 4e-5;
    double warmup_fraction = 0.10;
    double first_decay = 0.50;   // lr x0.1 after this fraction
    double second_decay = 0.75;  // lr x0.01 after this fraction
    TaskWeights weights;
    double mask_rate = 0.15;
    MlmLevels mlm_levels;
    TlLossKind tl_loss = TlLossKind::boundary;
    double clip_norm = 1.0;
    std::size_t eval_every = 0;  // steps between held-out evaluations; 0 = only after the last step
    std::size_t eval_k = 100;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs == 0) throw ConfigError("epochs must be at least 1");
        if (batch_size < 2) throw ConfigError("batch_size must be at least 2 for in-batch negatives");
        if (!(0.0 < warmup_fraction && warmup_fraction < first_decay && first_decay < second_decay && second_decay < 1.0)) {
            throw ConfigError("need 0 < warmup_fraction < first_decay < second_decay < 1");
        }
        if (!(max_lr >= 0.0) || !std::isfinite(max_lr)) throw ConfigError("max_lr must be finite and >= 0");
        if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) throw ConfigError("mask_rate must be in [0, 1]");
        if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
        if (eval_k == 0) throw ConfigError("eval_k must be at least 1");
        weights.validate();
    }
};

inline double lr_schedule(double progress, double max_lr, double warmup = 0.10, double first_decay = 0.50,
                          double second_decay = 0.75) {
    if (!(progress >= 0.0 && progress <= 1.0)) {
        throw ContractError("lr_schedule: progress " + std::to_string(progress) + " outside [0, 1]");
    }
    if (progress <= warmup) return max_lr * progress / warmup;
    if (progress <= first_decay) return max_lr;
    if (progress <= second_decay) return 0.1 * max_lr;
    return 0.01 * max_lr;
}

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
};

// Bias-corrected Adam over every parameter. Gradients are checked before any
// value changes, so a non-finite gradient leaves the parameters untouched.
inline void adam_step(std::span<Parameter* const> params, AdamState& state, double lr) {
    if (!(lr >= 0.0)) throw ContractError("adam_step: negative learning rate");
    if (state.m.empty()) {
        for (const Parameter* p : params) {
            state.m.emplace_back(p->value.shape(), 0.0);
            state.v.emplace_back(p->value.shape(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].shape() != params[i]->value.shape()) {
            throw ShapeError("adam_step: state shape differs for '" + params[i]->name + "'");
        }
        for (double g : params[i]->grad.data()) {
            if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + params[i]->name + "'");
        }
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto value = params[i]->value.data();
        auto grad = params[i]->grad.data();
        auto m = state.m[i].data();
        auto v = state.v[i].data();
        for (std::size_t j = 0; j < value.size(); ++j) {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * grad[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * grad[j] * grad[j];
            value[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.epsilon);
        }
    }
}

inline double global_grad_norm(std::span<Parameter* const> params) {
    double sq = 0.0;
    for (const Parameter* p : params) {
        for (double g : p->grad.data()) sq += g * g;
    }
    return std::sqrt(sq);
}

// Rescales gradients so their global norm is at most max_norm; returns the
// norm before clipping.
inline double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (norm > max_norm && std::isfinite(norm)) {
        const double f = max_norm / norm;
        for (Parameter* p : params) {
            for (double& g : p->grad.data()) g *= f;
        }
    }
    return norm;
}

// Subsamples videos longer than max_frames and remaps their annotations.
inline Corpus fit_to_length(const Corpus& corpus, std::size_t max_frames) {
    Corpus out = corpus;
    for (auto& v : out.videos) v = subsample_video(v, max_frames);
    for (auto& e : out.examples) {
        e.segment = remap_segment(e.segment, corpus.videos[e.video_index].frame_count(), max_frames);
    }
    return out;
}

struct BatchLoss {
    Var vr, tl, mlm, total;
};

struct LossOptions {
    TaskWeights weights;
    double mask_rate = 0.15;
    MlmLevels mlm_levels;
    TlLossKind tl_loss = TlLossKind::boundary;
};

inline LossOptions loss_options(const TrainConfig& c) { return {c.weights, c.mask_rate, c.mlm_levels, c.tl_loss}; }

// Multi-task loss of one batch. Each query is paired with every video of the
// batch: the diagonal pairs are positives, the rest are retrieval negatives.
// Component losses are means over the batch.
inline BatchLoss batch_loss(const HammerModel& model, Graph& g, const Corpus& corpus, const std::vector<std::size_t>& batch,
                            const LossOptions& opt, const ForwardMode& mode, Rng& mask_rng) {
    if (batch.empty()) throw InputError("empty batch");
    const bool want_vr = opt.weights.vr > 0.0 && batch.size() >= 2;
    const bool want_tl = opt.weights.tl > 0.0;
    const bool want_mlm = opt.weights.mask > 0.0 && opt.mask_rate > 0.0;

    std::vector<MaskedQuery> queries;
    std::vector<QueryEncoding> qenc;
    std::vector<VideoEncoding> venc;
    for (std::size_t idx : batch) {
        const AnnotatedExample& ex = corpus.examples.at(idx);
        if (want_mlm) {
            queries.push_back(apply_mask(ex.query, opt.mask_rate, mask_rng));
        } else {
            queries.push_back({ex.query, ex.query.tokens});
        }
        qenc.push_back(model.encode_query(g, queries.back().query, mode));
        venc.push_back(model.encode_video(g, corpus.videos.at(ex.video_index), mode));
    }

    const std::size_t n = batch.size();
    std::vector<Var> vr_terms, tl_terms, mlm_terms;
    for (std::size_t i = 0; i < n; ++i) {
        const AnnotatedExample& ex = corpus.examples.at(batch[i]);
        const bool full = want_tl || want_mlm;
        const EncoderOutputs pos =
            model.encode_pair(g, venc[i], qenc[i], mode, full ? OutputNeeds::full : OutputNeeds::retrieval);
        if (want_tl) tl_terms.push_back(tl_loss(model, g, pos, ex.segment, opt.tl_loss));
        if (want_mlm && queries[i].masked_count() > 0) {
            mlm_terms.push_back(mlm_loss(model, g, pos, queries[i], opt.mlm_levels));
        }
        if (want_vr) {
            Var positive = vr_score(model, g, pos);
            std::vector<Var> negatives;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                negatives.push_back(vr_score(model, g, model.encode_pair(g, venc[j], qenc[i], mode, OutputNeeds::retrieval)));
            }
            vr_terms.push_back(vr_loss(positive, negatives));
        }
    }
    auto mean_of = [&](const std::vector<Var>& terms) {
        if (terms.empty()) return Var{};
        return scale(add_n(terms), 1.0 / static_cast<double>(terms.size()));
    };
    BatchLoss out{mean_of(vr_terms), mean_of(tl_terms), mean_of(mlm_terms), {}};
    out.total = total_loss(g, out.vr, out.tl, out.mlm, opt.weights);
    return out;
}

// ---- evaluation ----

struct EvaluationResult {
    std::vector<EvalRecord> records;
    std::vector<std::size_t> encoder_passes;  // two-stage passes per query
    std::size_t corpus_size = 0;
    std::size_t k = 0;
    std::size_t extra_tl_passes = 0;  // ground-truth video outside the top k
};

inline EvaluationResult evaluate(const HammerModel& model, const Corpus& corpus, const std::vector<std::size_t>& queries,
                                 std::size_t k, const InferenceOptions& options = {}) {
    if (queries.empty()) throw InputError("no queries to evaluate");
    EvaluationResult res;
    res.corpus_size = corpus.videos.size();
    res.k = k;
    for (std::size_t idx : queries) {
        const AnnotatedExample& ex = corpus.examples.at(idx);
        const std::size_t before = model.encoder_invocations();
        RetrievalResult rr = mlvc_retrieve(model, ex.query, corpus.videos, k, options);
        res.encoder_passes.push_back(model.encoder_invocations() - before);
        EvalRecord rec;
        rec.query_id = ex.query_id;
        rec.true_video_id = ex.video_id;
        rec.true_segment = ex.segment;
        for (const auto& rv : rr.ranking) rec.ranking.push_back(rv.video_id);
        rec.predictions = std::move(rr.candidates);
        for (const auto& c : rec.predictions) {
            if (c.video_id == ex.video_id) rec.true_video_prediction = c.segment;
        }
        if (!rec.true_video_prediction) {
            rec.true_video_prediction = localize(model, ex.query, corpus.videos.at(ex.video_index), options.decode).segment;
            ++res.extra_tl_passes;
        }
        rec.video_duration_frames = corpus.videos.at(ex.video_index).frame_count();
        rec.corpus_size = corpus.videos.size();
        res.records.push_back(std::move(rec));
    }
    return res;
}

inline std::string render_predictions(const std::vector<EvalRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        nlohmann::ordered_json j;
        j["query_id"] = r.query_id;
        nlohmann::ordered_json cands = nlohmann::ordered_json::array();
        for (const auto& c : r.predictions) {
            nlohmann::ordered_json cj;
            cj["video_id"] = c.video_id;
            cj["start"] = c.segment.start;
            cj["end"] = c.segment.end;
            cj["video_score"] = c.video_score;
            cj["pair_score"] = c.pair_score;
            cands.push_back(std::move(cj));
        }
        j["candidates"] = std::move(cands);
        out += j.dump() + "\n";
    }
    return out;
}

// ---- training loop ----

struct HistoryRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss_vr = 0.0;
    double loss_tl = 0.0;
    double loss_mlm = 0.0;
    double loss_total = 0.0;
    std::vector<MetricLine> eval;  // held-out metrics when evaluated at this step
};

inline std::string render_history(const std::vector<HistoryRecord>& history) {
    std::string out;
    for (const auto& h : history) {
        nlohmann::ordered_json j;
        j["step"] = h.step;
        j["epoch"] = h.epoch;
        j["lr"] = h.lr;
        j["loss_vr"] = h.loss_vr;
        j["loss_tl"] = h.loss_tl;
        j["loss_mlm"] = h.loss_mlm;
        j["loss_total"] = h.loss_total;
        for (const auto& m : h.eval) {
            if (m.slice == "all") j["eval_" + m.metric_name] = m.value;
        }
        out += j.dump() + "\n";
    }
    return out;
}

struct TrainResult {
    std::vector<HistoryRecord> history;
    std::size_t steps = 0;
    bool diverged = false;
    std::string divergence;
};

struct TrainHooks {
    std::optional<std::filesystem::path> checkpoint_dir;
    std::function<void(const HistoryRecord&)> on_step;
    InferenceOptions inference;
};

// Random stream layout for training: 0 batch order, 1 masking, 2 dropout.
inline TrainResult train(HammerModel& model, const Corpus& corpus, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
    cfg.validate();
    const auto train_set = corpus.split_indices(Split::train);
    if (train_set.empty()) throw InputError("dataset has no training examples");
    const auto heldout = corpus.split_indices(Split::heldout);

    Rng order_rng(mix_seed(cfg.seed, 0));
    Rng mask_rng(mix_seed(cfg.seed, 1));
    Rng dropout_rng(mix_seed(cfg.seed, 2));
    std::vector<std::vector<std::vector<std::size_t>>> epochs;
    std::size_t total_steps = 0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        epochs.push_back(batch_iterator(corpus.examples, train_set, cfg.batch_size, order_rng));
        total_steps += epochs.back().size();
    }

    auto params = model.parameters().all();
    AdamState adam;
    TrainResult result;
    const LossOptions opt = loss_options(cfg);
    const ForwardMode mode{true, &dropout_rng};
    if (hooks.checkpoint_dir) std::filesystem::create_directories(*hooks.checkpoint_dir);

    std::size_t step = 0;
    for (std::size_t e = 0; e < epochs.size(); ++e) {
        for (const auto& batch : epochs[e]) {
            HistoryRecord rec;
            rec.step = step + 1;
            rec.epoch = e + 1;
            rec.lr = lr_schedule(static_cast<double>(step + 1) / static_cast<double>(total_steps), cfg.max_lr,
                                 cfg.warmup_fraction, cfg.first_decay, cfg.second_decay);
            try {
                model.parameters().zero_grad();
                Graph g;
                BatchLoss loss = batch_loss(model, g, corpus, batch, opt, mode, mask_rng);
                rec.loss_vr = loss.vr.valid() ? loss.vr.item() : 0.0;
                rec.loss_tl = loss.tl.valid() ? loss.tl.item() : 0.0;
                rec.loss_mlm = loss.mlm.valid() ? loss.mlm.item() : 0.0;
                rec.loss_total = loss.total.item();
                if (!std::isfinite(rec.loss_total)) throw NumericError("non-finite total loss");
                g.backward(loss.total);
                clip_grad_norm(params, cfg.clip_norm);
                adam_step(params, adam, rec.lr);
            } catch (const NumericError& err) {
                result.diverged = true;
                result.divergence = "step " + std::to_string(step + 1) + ": " + err.what();
                if (hooks.checkpoint_dir) model.parameters().save(*hooks.checkpoint_dir / "last_good.bin");
                return result;
            }
            ++step;
            const bool last = step == total_steps;
            if ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || last) {
                if (!heldout.empty()) {
                    const auto ev = evaluate(model, corpus, heldout, cfg.eval_k, hooks.inference);
                    rec.eval = compute_report(ev.records).lines;
                }
                if (hooks.checkpoint_dir && !last) {
                    model.parameters().save(*hooks.checkpoint_dir / ("checkpoint-" + std::to_string(step) + ".bin"));
                }
            }
            if (hooks.on_step) hooks.on_step(rec);
            result.history.push_back(std::move(rec));
        }
    }
    result.steps = step;
    if (hooks.checkpoint_dir) model.parameters().save(*hooks.checkpoint_dir / "model.bin");
    return result;
}

} // namespace hammer
