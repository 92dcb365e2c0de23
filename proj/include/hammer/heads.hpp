#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "encoders.hpp"
#include "errors.hpp"
#include "records.hpp"
#include "rng.hpp"

namespace hammer {

enum class BeoLabel : char { begin = 'B', end = 'E', other = 'O' };

inline std::vector<BeoLabel> beo_labels(const Segment& segment, std::size_t frames) {
    segment.require_valid(frames);
    std::vector<BeoLabel> labels(frames, BeoLabel::other);
    labels[segment.start] = BeoLabel::begin;
    labels[segment.end] = BeoLabel::end;
    return labels;
}

inline std::string to_string(const std::vector<BeoLabel>& labels) {
    std::string s;
    for (BeoLabel l : labels) s.push_back(static_cast<char>(l));
    return s;
}

inline Segment segment_from_labels(const std::vector<BeoLabel>& labels) {
    std::optional<std::size_t> b, e;
    for (std::size_t t = 0; t < labels.size(); ++t) {
        if (labels[t] == BeoLabel::begin) {
            if (b) throw AnnotationError("more than one B label");
            b = t;
        } else if (labels[t] == BeoLabel::end) {
            if (e) throw AnnotationError("more than one E label");
            e = t;
        }
    }
    if (!b || !e) throw AnnotationError("labels lack a B or an E");
    Segment s{*b, *e};
    s.require_valid(labels.size());
    return s;
}

struct TaskWeights {
    double vr = 1.0;
    double tl = 5.0;
    double mask = 0.1;

    void validate() const {
        if (vr < 0 || tl < 0 || mask < 0 || !std::isfinite(vr) || !std::isfinite(tl) || !std::isfinite(mask)) {
            throw ConfigError("task weights must be finite and non-negative");
        }
        if (vr == 0 && tl == 0 && mask == 0) throw ConfigError("at least one task weight must be positive");
    }
};

enum class TlLossKind { boundary, framewise3way };

struct MlmLevels {
    bool frame = true;
    bool clip = true;
};

// Max of per-clip projected scores.
inline double vr_score(std::span<const double> projected) {
    if (projected.empty()) throw InputError("vr_score needs at least one clip score");
    double best = projected[0];
    for (double v : projected) best = std::max(best, v);
    return best;
}

namespace detail {

// Repeats a 1 x d row to n x d.
inline Var repeat_row(Var r, std::size_t n) {
    if (n == 1) return r;
    return matmul(r.graph().constant(Tensor(Shape{n, 1}, 1.0)), r);
}

// Video-side features fused with the text summary when the encoder has no
// cross-modal layer; unchanged otherwise.
inline Var condition_on_text(const HammerModel& model, Var x, Var tcls_rows) {
    return model.late_fusion() ? mul(x, tcls_rows) : x;
}

} // namespace detail

// Per-clip (HAMMER) or per-frame (FLAT) projections theta . row, as a column.
inline Var vr_projections(const HammerModel& model, Graph& g, const EncoderOutputs& out) {
    Var theta = g.parameter(*model.heads().theta_vr);
    if (out.architecture == Architecture::flat) {
        if (!out.frame_ctx.valid()) throw ContractError("FLAT retrieval needs frame rows");
        Var x = out.frame_ctx;
        if (model.late_fusion()) x = detail::condition_on_text(model, x, detail::repeat_row(out.frame_tcls, x.rows()));
        return matmul(x, theta);
    }
    Var x = out.clip_ctx;
    if (model.late_fusion()) x = detail::condition_on_text(model, x, detail::repeat_row(out.clip_tcls, x.rows()));
    return matmul(x, theta);
}

inline Var vr_score(const HammerModel& model, Graph& g, const EncoderOutputs& out) {
    return max_element(vr_projections(model, g, out));
}

// -log softmax([positive, negatives...])[0].
inline Var vr_loss(Var positive, const std::vector<Var>& negatives) {
    if (negatives.empty()) throw ContractError("vr_loss needs at least one negative");
    std::vector<Var> scores{positive};
    scores.insert(scores.end(), negatives.begin(), negatives.end());
    return cross_entropy(reshape(concat_rows(scores), 1, scores.size()), 0);
}

inline double vr_loss(double positive, std::span<const double> negatives) {
    if (negatives.empty()) throw ContractError("vr_loss needs at least one negative");
    std::vector<double> scores{positive};
    scores.insert(scores.end(), negatives.begin(), negatives.end());
    return -log_softmax(scores)[0];
}

enum class Boundary { begin, end };

// Frame logits for one boundary as a 1 x N row: clip evidence through u plus
// frame evidence through w.
inline Var tl_boundary_logits(const HammerModel& model, Graph& g, const EncoderOutputs& out, Boundary b) {
    if (out.frames < 2) throw InputError("localization needs at least 2 frames, got " + std::to_string(out.frames));
    if (!out.frame_ctx.valid() || !out.frame_tcls.valid()) throw ContractError("localization needs full encoder outputs");
    const auto& h = model.heads();
    Parameter& w = b == Boundary::begin ? *h.w_begin : *h.w_end;
    Parameter& u = b == Boundary::begin ? *h.u_begin : *h.u_end;

    Var frame_text = gather_rows(out.frame_tcls, out.frame_clip);
    Var frame_feat = model.late_fusion() ? concat_cols({mul(out.frame_ctx, frame_text), out.frame_ctx})
                                         : concat_cols({out.frame_ctx, frame_text});
    Var logits = matmul(frame_feat, g.parameter(w));
    if (out.architecture == Architecture::hammer) {
        Var clip_text = detail::repeat_row(out.clip_tcls, out.clips);
        Var clip_feat = model.late_fusion() ? concat_cols({mul(out.clip_ctx, clip_text), out.clip_ctx})
                                            : concat_cols({out.clip_ctx, clip_text});
        Var clip_scores = matmul(clip_feat, g.parameter(u));
        logits = add(logits, gather_rows(clip_scores, out.frame_clip));
    }
    return reshape(logits, 1, out.frames);
}

// Per-frame logits for the B, E and O classes (N x 3). O has no clip term.
inline Var tl_class_logits(const HammerModel& model, Graph& g, const EncoderOutputs& out) {
    Var b = reshape(tl_boundary_logits(model, g, out, Boundary::begin), out.frames, 1);
    Var e = reshape(tl_boundary_logits(model, g, out, Boundary::end), out.frames, 1);
    Var frame_text = gather_rows(out.frame_tcls, out.frame_clip);
    Var frame_feat = model.late_fusion() ? concat_cols({mul(out.frame_ctx, frame_text), out.frame_ctx})
                                         : concat_cols({out.frame_ctx, frame_text});
    Var o = matmul(frame_feat, g.parameter(*model.heads().w_other));
    return concat_cols({b, e, o});
}

struct BoundaryDistributions {
    std::vector<double> start;
    std::vector<double> end;
};

inline BoundaryDistributions tl_boundary_distributions(std::span<const double> start_logits,
                                                       std::span<const double> end_logits) {
    if (start_logits.size() < 2 || start_logits.size() != end_logits.size()) {
        throw InputError("boundary distributions need two equal-length logit vectors of length >= 2");
    }
    return {softmax(start_logits), softmax(end_logits)};
}

inline BoundaryDistributions tl_boundary_distributions(const HammerModel& model, Graph& g, const EncoderOutputs& out) {
    Var s = tl_boundary_logits(model, g, out, Boundary::begin);
    Var e = tl_boundary_logits(model, g, out, Boundary::end);
    return tl_boundary_distributions(s.value().data(), e.value().data());
}

inline Var tl_loss(Var start_logits, Var end_logits, const Segment& truth) {
    truth.require_valid(start_logits.value().size());
    return add(cross_entropy(start_logits, truth.start), cross_entropy(end_logits, truth.end));
}

inline double tl_loss(const BoundaryDistributions& d, const Segment& truth) {
    truth.require_valid(d.start.size());
    return -std::log(d.start[truth.start]) - std::log(d.end[truth.end]);
}

inline Var tl_loss(const HammerModel& model, Graph& g, const EncoderOutputs& out, const Segment& truth,
                   TlLossKind kind = TlLossKind::boundary) {
    truth.require_valid(out.frames);
    if (kind == TlLossKind::boundary) {
        return tl_loss(tl_boundary_logits(model, g, out, Boundary::begin), tl_boundary_logits(model, g, out, Boundary::end),
                       truth);
    }
    std::vector<std::size_t> targets(out.frames, 2);
    targets[truth.start] = 0;
    targets[truth.end] = 1;
    return scale(cross_entropy_rows(tl_class_logits(model, g, out), targets), static_cast<double>(out.frames));
}

struct MaskedQuery {
    QueryRecord query;                 // masked tokens replaced by the MASK id, mask filled in
    std::vector<TokenId> true_tokens;  // original tokens

    [[nodiscard]] std::size_t masked_count() const {
        std::size_t n = 0;
        for (auto m : query.mask) n += m;
        return n;
    }
};

// Each token is masked independently with probability `rate`. Rate 0 draws
// nothing from the generator.
inline MaskedQuery apply_mask(const QueryRecord& query, double rate, Rng& rng) {
    if (query.tokens.empty()) throw InputError("cannot mask an empty query");
    if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("mask rate must be in [0, 1]");
    MaskedQuery out{query, query.tokens};
    out.query.mask.assign(query.tokens.size(), 0);
    if (rate == 0.0) return out;
    for (std::size_t i = 0; i < query.tokens.size(); ++i) {
        if (rate == 1.0 || rng.bernoulli(rate)) {
            out.query.mask[i] = 1;
            out.query.tokens[i] = special_tokens::mask;
        }
    }
    return out;
}

// Mean cross-entropy over masked positions of one level's text outputs.
inline Var mlm_level_loss(const HammerModel& model, Graph& g, Var text, const MaskedQuery& mq) {
    std::vector<std::size_t> rows, targets;
    for (std::size_t i = 0; i < mq.query.mask.size(); ++i) {
        if (mq.query.mask[i] != 0) {
            rows.push_back(i + 1);  // row 0 is TCLS
            targets.push_back(mq.true_tokens[i]);
        }
    }
    if (rows.empty()) return g.constant(Tensor::scalar(0.0));
    Var logits = model.heads().mlm(g, gather_rows(text, rows));
    return cross_entropy_rows(logits, targets);
}

// FM and CM losses summed when both are enabled. FLAT has no clip level, so
// only the frame term applies there.
inline Var mlm_loss(const HammerModel& model, Graph& g, const EncoderOutputs& out, const MaskedQuery& mq,
                    MlmLevels levels) {
    std::vector<Var> terms;
    if (levels.frame) terms.push_back(mlm_level_loss(model, g, out.frame_text, mq));
    if (levels.clip && out.architecture == Architecture::hammer) terms.push_back(mlm_level_loss(model, g, out.clip_text, mq));
    if (terms.empty()) return g.constant(Tensor::scalar(0.0));
    return terms.size() == 1 ? terms[0] : add(terms[0], terms[1]);
}

inline double total_loss(double vr, double tl, double mask, const TaskWeights& w) {
    const std::pair<const char*, double> parts[] = {{"vr", vr}, {"tl", tl}, {"mask", mask}};
    for (const auto& [name, v] : parts) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + name + " loss");
    }
    return w.vr * vr + w.tl * tl + w.mask * mask;
}

// Weighted sum. Components may be invalid Vars for disabled tasks; a
// zero-weight component is dropped from the graph so its head gets no gradient.
inline Var total_loss(Graph& g, Var vr, Var tl, Var mask, const TaskWeights& w) {
    std::vector<Var> terms;
    const std::tuple<const char*, Var, double> parts[] = {{"vr", vr, w.vr}, {"tl", tl, w.tl}, {"mask", mask, w.mask}};
    for (const auto& [name, v, weight] : parts) {
        if (weight == 0.0 || !v.valid()) continue;
        if (!std::isfinite(v.item())) throw NumericError(std::string("non-finite ") + name + " loss");
        terms.push_back(scale(v, weight));
    }
    if (terms.empty()) return g.constant(Tensor::scalar(0.0));
    return add_n(terms);
}

} // namespace hammer
