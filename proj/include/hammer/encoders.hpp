#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "autograd.hpp"
#include "errors.hpp"
#include "parameters.hpp"
#include "records.hpp"

namespace hammer {

enum class Architecture { hammer, flat };

inline std::string to_string(Architecture a) { return a == Architecture::hammer ? "hammer" : "flat"; }

struct EncoderConfig {
    Architecture architecture = Architecture::hammer;
    std::size_t hidden_width = 32;
    std::size_t attention_heads = 4;
    std::size_t text_layers = 5;
    std::size_t visual_layers = 1;
    std::size_t cross_modal_layers = 1;
    std::size_t ffn_multiplier = 4;
    std::size_t clip_length = 16;
    std::size_t max_video_length = 128;
    std::size_t max_query_length = 16;  // including the TCLS slot
    std::size_t visual_width = 16;
    std::size_t aux_width = 0;
    std::size_t vocabulary_size = 40;
    bool share_frame_clip_weights = false;
    bool clip_position_embeddings = true;
    bool auxiliary_stream = false;
    bool share_u = false;
    double dropout = 0.1;
    double layer_norm_epsilon = 1e-5;
    std::uint64_t seed = 0;

    [[nodiscard]] std::size_t max_clips() const { return (max_video_length + clip_length - 1) / clip_length; }

    void validate() const {
        if (hidden_width == 0 || attention_heads == 0 || hidden_width % attention_heads != 0) {
            throw ConfigError("hidden_width (" + std::to_string(hidden_width) + ") must be a positive multiple of attention_heads (" +
                              std::to_string(attention_heads) + ")");
        }
        if (clip_length == 0 || clip_length > max_video_length) {
            throw ConfigError("clip_length must satisfy 1 <= M <= max_video_length, got M=" + std::to_string(clip_length) +
                              ", N_max=" + std::to_string(max_video_length));
        }
        if (visual_width == 0) throw ConfigError("visual_width must be positive");
        if (auxiliary_stream && aux_width == 0) throw ConfigError("auxiliary_stream requires aux_width > 0");
        if (vocabulary_size <= special_tokens::first_regular) {
            throw ConfigError("vocabulary_size must exceed the reserved special tokens");
        }
        if (max_query_length < 2) throw ConfigError("max_query_length must leave room for TCLS and one token");
        if (ffn_multiplier == 0) throw ConfigError("ffn_multiplier must be positive");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    }
};

// One clip: frames [begin, begin+length) of the video plus `padding` zero rows.
struct ClipRange {
    std::size_t begin = 0;
    std::size_t length = 0;
    std::size_t padding = 0;

    [[nodiscard]] std::size_t last() const { return begin + length - 1; }
    bool operator==(const ClipRange&) const = default;
};

struct ClipPartition {
    std::size_t clip_length = 0;
    std::vector<ClipRange> clips;

    [[nodiscard]] std::vector<std::size_t> pad_counts() const {
        std::vector<std::size_t> out;
        for (const auto& c : clips) out.push_back(c.padding);
        return out;
    }

    [[nodiscard]] std::size_t clip_of(std::size_t frame) const { return frame / clip_length; }
};

inline ClipPartition partition_into_clips(std::size_t frames, std::int64_t clip_length) {
    if (clip_length <= 0) {
        throw ConfigError("clip length must be positive, got " + std::to_string(clip_length));
    }
    if (frames == 0) {
        throw InputError("cannot partition a video with no frames");
    }
    const auto m = static_cast<std::size_t>(clip_length);
    ClipPartition p;
    p.clip_length = m;
    for (std::size_t begin = 0; begin < frames; begin += m) {
        const std::size_t len = std::min(m, frames - begin);
        p.clips.push_back({begin, len, m - len});
    }
    return p;
}

inline ClipPartition partition_into_clips(const VideoRecord& video, std::int64_t clip_length) {
    return partition_into_clips(video.frame_count(), clip_length);
}

struct ForwardMode {
    bool training = false;
    Rng* rng = nullptr;

    [[nodiscard]] bool dropout_active() const { return training && rng != nullptr; }
};

namespace nn {

struct Linear {
    Parameter* weight = nullptr;
    Parameter* bias = nullptr;

    static Linear create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out) {
        Linear l;
        l.weight = &store.add(name + ".weight", {in, out}, Init::xavier_uniform);
        l.bias = &store.add(name + ".bias", {1, out}, Init::zeros);
        return l;
    }

    [[nodiscard]] Var operator()(Graph& g, Var x) const {
        return add_broadcast(matmul(x, g.parameter(*weight)), g.parameter(*bias));
    }
};

struct Norm {
    Parameter* gain = nullptr;
    Parameter* bias = nullptr;
    double epsilon = 1e-5;

    static Norm create(ParameterStore& store, const std::string& name, std::size_t width, double eps) {
        Norm n;
        n.gain = &store.add(name + ".gain", {1, width}, Init::ones);
        n.bias = &store.add(name + ".bias", {1, width}, Init::zeros);
        n.epsilon = eps;
        return n;
    }

    [[nodiscard]] Var operator()(Graph& g, Var x) const {
        return layer_norm(x, g.parameter(*gain), g.parameter(*bias), epsilon);
    }
};

inline Var maybe_dropout(Var x, double rate, const ForwardMode& mode) {
    return mode.dropout_active() ? dropout(x, rate, *mode.rng) : x;
}

// Post-norm transformer layer whose attention reads keys/values from a source
// sequence: self-attention when source == x, cross-attention otherwise.
// Projections are exposed separately so callers can reuse them across pairs.
struct TransformerLayer {
    Linear query, key, value, output, expand, contract;
    Norm attention_norm, output_norm;
    std::size_t heads = 1;
    double dropout = 0.0;

    static TransformerLayer create(ParameterStore& store, const std::string& name, const EncoderConfig& cfg) {
        const std::size_t d = cfg.hidden_width;
        TransformerLayer t;
        t.query = Linear::create(store, name + ".attention.query", d, d);
        t.key = Linear::create(store, name + ".attention.key", d, d);
        t.value = Linear::create(store, name + ".attention.value", d, d);
        t.output = Linear::create(store, name + ".attention.output", d, d);
        t.attention_norm = Norm::create(store, name + ".attention.norm", d, cfg.layer_norm_epsilon);
        t.expand = Linear::create(store, name + ".ffn.expand", d, d * cfg.ffn_multiplier);
        t.contract = Linear::create(store, name + ".ffn.contract", d * cfg.ffn_multiplier, d);
        t.output_norm = Norm::create(store, name + ".ffn.norm", d, cfg.layer_norm_epsilon);
        t.heads = cfg.attention_heads;
        t.dropout = cfg.dropout;
        return t;
    }

    [[nodiscard]] Var project_query(Graph& g, Var x) const { return query(g, x); }
    [[nodiscard]] Var project_key(Graph& g, Var source) const { return key(g, source); }
    [[nodiscard]] Var project_value(Graph& g, Var source) const { return value(g, source); }

    // Rows of x and q correspond; k/v rows are the attended keys.
    [[nodiscard]] Var finish(Graph& g, Var x, Var q, Var k, Var v, const AttentionMask& mask,
                             const ForwardMode& mode) const {
        Var attended = output(g, multi_head_attention(q, k, v, heads, mask));
        Var h = attention_norm(g, add(x, maybe_dropout(attended, dropout, mode)));
        Var ff = contract(g, gelu(expand(g, h)));
        return output_norm(g, add(h, maybe_dropout(ff, dropout, mode)));
    }

    [[nodiscard]] Var operator()(Graph& g, Var x, Var source, const AttentionMask& mask, const ForwardMode& mode) const {
        return finish(g, x, project_query(g, x), project_key(g, source), project_value(g, source), mask, mode);
    }
};

// Bidirectional cross-modal layer: text attends to the video stream and the
// video stream attends to text, both from the pre-layer states.
struct CrossModalLayer {
    TransformerLayer text_to_video;
    TransformerLayer video_to_text;

    static CrossModalLayer create(ParameterStore& store, const std::string& name, const EncoderConfig& cfg) {
        return {TransformerLayer::create(store, name + ".text_to_video", cfg),
                TransformerLayer::create(store, name + ".video_to_text", cfg)};
    }
};

} // namespace nn

// One hierarchical encoder (frame encoder or clip encoder): text branch,
// video branch, optional auxiliary branch, and the cross-modal stack.
struct EncoderBlock {
    std::vector<nn::TransformerLayer> text;
    std::vector<nn::TransformerLayer> visual;
    std::vector<nn::TransformerLayer> aux;
    std::vector<nn::CrossModalLayer> cross;
    std::vector<nn::CrossModalLayer> aux_cross;
    std::vector<nn::Norm> text_fuse_norm;
    nn::Linear aux_fuse;

    static EncoderBlock create(ParameterStore& store, const std::string& name, const EncoderConfig& cfg, bool with_aux) {
        EncoderBlock b;
        for (std::size_t i = 0; i < cfg.text_layers; ++i)
            b.text.push_back(nn::TransformerLayer::create(store, name + ".text." + std::to_string(i), cfg));
        for (std::size_t i = 0; i < cfg.visual_layers; ++i)
            b.visual.push_back(nn::TransformerLayer::create(store, name + ".visual." + std::to_string(i), cfg));
        for (std::size_t i = 0; i < cfg.cross_modal_layers; ++i)
            b.cross.push_back(nn::CrossModalLayer::create(store, name + ".cross." + std::to_string(i), cfg));
        if (with_aux) {
            for (std::size_t i = 0; i < cfg.visual_layers; ++i)
                b.aux.push_back(nn::TransformerLayer::create(store, name + ".aux." + std::to_string(i), cfg));
            for (std::size_t i = 0; i < cfg.cross_modal_layers; ++i) {
                b.aux_cross.push_back(nn::CrossModalLayer::create(store, name + ".aux_cross." + std::to_string(i), cfg));
                b.text_fuse_norm.push_back(
                    nn::Norm::create(store, name + ".text_fuse." + std::to_string(i), cfg.hidden_width, cfg.layer_norm_epsilon));
            }
            b.aux_fuse = nn::Linear::create(store, name + ".aux_fuse", 2 * cfg.hidden_width, cfg.hidden_width);
        }
        return b;
    }
};

// Text side of one encoder level, computed once per query and reused for
// every video it is paired with.
struct TextSide {
    Var hidden;  // (L+1) x d, row 0 is TCLS
    Var q_text_to_video, k_video_to_text, v_video_to_text;
    Var q_text_to_aux, k_aux_to_text, v_aux_to_text;
};

struct QueryEncoding {
    std::size_t length = 0;  // tokens including TCLS
    TextSide frame;
    TextSide clip;
};

// A video-side stream of one clip after its self-attention layers, plus the
// projections the first cross-modal layer needs from it.
struct StreamSide {
    Var hidden;  // (1+M) x d, row 0 is the clip CLS slot
    Var k_text_to_stream, v_text_to_stream, q_stream_to_text;
};

struct ClipEncoding {
    ClipRange range;
    StreamSide visual;
    std::optional<StreamSide> aux;
    std::vector<std::uint8_t> key_allowed;  // CLS + real frames attendable, padding not
};

struct VideoEncoding {
    std::string video_id;
    std::size_t frames = 0;
    ClipPartition partition;
    std::vector<ClipEncoding> clips;
};

// Per-clip frame-encoder result.
struct FrameLevelOutput {
    Var frames;  // M x d (padding rows included) or invalid when not requested
    Var ccls;    // 1 x d
    Var tcls;    // 1 x d, invalid when text was not requested
    Var text;    // (L+1) x d, invalid when text was not requested
};

struct ClipLevelOutput {
    Var ctx;   // K x d
    Var tcls;  // 1 x d, invalid when text was not requested
    Var text;  // (L+1) x d
};

// Contextualized features for one (video, query) pair. For FLAT, clip_emb is
// the single video-level CLS row and clip_ctx is invalid.
struct EncoderOutputs {
    Architecture architecture = Architecture::hammer;
    std::size_t frames = 0;
    std::size_t clips = 0;
    std::vector<std::size_t> frame_clip;  // clip index of every real frame
    Var frame_ctx;                        // N x d
    Var frame_tcls;                       // K x d (one row per clip); FLAT: 1 x d
    Var frame_text;                       // (L+1) x d, mean over clips
    Var clip_emb;                         // K x d
    Var clip_ctx;                         // K x d
    Var clip_tcls;                        // 1 x d
    Var clip_text;                        // (L+1) x d
};

// What a pass must produce. Retrieval needs only the clip path; localization
// and masked-token losses also need frame rows and text outputs.
enum class OutputNeeds { retrieval, full };

struct HeadParams {
    Parameter* theta_vr = nullptr;  // d x 1
    Parameter* u_begin = nullptr;   // 2d x 1
    Parameter* u_end = nullptr;     // 2d x 1 (aliases u_begin when share_u)
    Parameter* w_begin = nullptr;   // 2d x 1
    Parameter* w_end = nullptr;     // 2d x 1
    Parameter* w_other = nullptr;   // 2d x 1, framewise 3-way loss only
    nn::Linear mlm;                 // d -> vocabulary
};

class HammerModel {
public:
    explicit HammerModel(EncoderConfig config) : config_(std::move(config)), params_(config_.seed) {
        config_.validate();
        const std::size_t d = config_.hidden_width;
        const auto& c = config_;
        token_embedding_ = &params_.add("embed.token", {c.vocabulary_size, d}, Init::normal, 0.02);
        text_position_ = &params_.add("embed.text_position", {c.max_query_length, d}, Init::normal, 0.02);
        text_norm_ = nn::Norm::create(params_, "embed.text_norm", d, c.layer_norm_epsilon);

        visual_proj_ = nn::Linear::create(params_, "frame_input.visual_proj", c.visual_width, d);
        frame_position_ = &params_.add("frame_input.position", {c.max_video_length, d}, Init::normal, 0.02);
        ccls_ = &params_.add("frame_input.ccls", {1, d}, Init::normal, 0.02);
        frame_norm_ = nn::Norm::create(params_, "frame_input.norm", d, c.layer_norm_epsilon);
        if (c.auxiliary_stream) {
            aux_proj_ = nn::Linear::create(params_, "frame_input.aux_proj", c.aux_width, d);
            aux_cls_ = &params_.add("frame_input.aux_cls", {1, d}, Init::normal, 0.02);
            aux_norm_ = nn::Norm::create(params_, "frame_input.aux_norm", d, c.layer_norm_epsilon);
        }

        if (c.architecture == Architecture::hammer && c.share_frame_clip_weights) {
            frame_block_ = EncoderBlock::create(params_, "encoder.shared", c, c.auxiliary_stream);
        } else {
            frame_block_ = EncoderBlock::create(params_, "encoder.frame", c, c.auxiliary_stream);
            if (c.architecture == Architecture::hammer) {
                clip_block_ = EncoderBlock::create(params_, "encoder.clip", c, false);
            }
        }
        if (c.architecture == Architecture::hammer) {
            if (c.clip_position_embeddings) {
                clip_position_ = &params_.add("clip_input.position", {c.max_clips(), d}, Init::normal, 0.02);
            }
            clip_norm_ = nn::Norm::create(params_, "clip_input.norm", d, c.layer_norm_epsilon);
        }

        heads_.theta_vr = &params_.add("head.theta_vr", {d, 1}, Init::xavier_uniform);
        if (c.share_u) {
            heads_.u_begin = &params_.add("head.u", {2 * d, 1}, Init::xavier_uniform);
            heads_.u_end = heads_.u_begin;
        } else {
            heads_.u_begin = &params_.add("head.u_begin", {2 * d, 1}, Init::xavier_uniform);
            heads_.u_end = &params_.add("head.u_end", {2 * d, 1}, Init::xavier_uniform);
        }
        heads_.w_begin = &params_.add("head.w_begin", {2 * d, 1}, Init::xavier_uniform);
        heads_.w_end = &params_.add("head.w_end", {2 * d, 1}, Init::xavier_uniform);
        heads_.w_other = &params_.add("head.w_other", {2 * d, 1}, Init::xavier_uniform);
        heads_.mlm = nn::Linear::create(params_, "head.mlm", d, c.vocabulary_size);
    }

    HammerModel(const HammerModel&) = delete;
    HammerModel& operator=(const HammerModel&) = delete;
    HammerModel(HammerModel&&) = default;

    [[nodiscard]] const EncoderConfig& config() const { return config_; }
    [[nodiscard]] ParameterStore& parameters() { return params_; }
    [[nodiscard]] const ParameterStore& parameters() const { return params_; }
    [[nodiscard]] const HeadParams& heads() const { return heads_; }

    // Number of (video, query) encoder passes since the last reset.
    [[nodiscard]] std::size_t encoder_invocations() const { return invocations_->load(); }
    void reset_encoder_invocations() const { invocations_->store(0); }

    void validate_query(const QueryRecord& query) const {
        if (query.tokens.empty()) {
            throw InputError("empty query");
        }
        if (query.tokens.size() + 1 > config_.max_query_length) {
            throw InputError("query of " + std::to_string(query.tokens.size()) + " tokens exceeds max_query_length " +
                             std::to_string(config_.max_query_length) + " (including TCLS)");
        }
        for (TokenId t : query.tokens) {
            if (t >= config_.vocabulary_size) {
                throw InputError("token id " + std::to_string(t) + " outside vocabulary of size " +
                                 std::to_string(config_.vocabulary_size));
            }
        }
        if (!query.mask.empty() && query.mask.size() != query.tokens.size()) {
            throw InputError("query mask length differs from token count");
        }
    }

    void validate_video(const VideoRecord& video) const {
        const std::size_t n = video.frame_count();
        if (n == 0) throw InputError("video '" + video.video_id + "' has no frames");
        if (n > config_.max_video_length) {
            throw InputError("video '" + video.video_id + "' has " + std::to_string(n) + " frames, more than N_max=" +
                             std::to_string(config_.max_video_length));
        }
        if (video.frames.cols() != config_.visual_width) {
            throw InputError("video '" + video.video_id + "' has feature width " + std::to_string(video.frames.cols()) +
                             ", model expects " + std::to_string(config_.visual_width));
        }
        if (config_.auxiliary_stream) {
            if (!video.aux || video.aux->rows() != n || video.aux->cols() != config_.aux_width) {
                throw InputError("video '" + video.video_id + "' lacks a frame-aligned auxiliary stream of width " +
                                 std::to_string(config_.aux_width));
            }
        }
    }

    // Text branches of both levels plus first-cross-layer projections.
    [[nodiscard]] QueryEncoding encode_query(Graph& g, const QueryRecord& query, const ForwardMode& mode) const {
        validate_query(query);
        std::vector<std::size_t> ids{special_tokens::tcls};
        for (TokenId t : query.tokens) ids.push_back(t);
        std::vector<std::size_t> positions(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = i;
        Var x = add(gather_rows(g.parameter(*token_embedding_), ids), gather_rows(g.parameter(*text_position_), positions));
        x = nn::maybe_dropout(text_norm_(g, x), config_.dropout, mode);

        QueryEncoding q;
        q.length = ids.size();
        q.frame = text_side(g, frame_block_, x, mode);
        if (config_.architecture == Architecture::hammer) {
            q.clip = config_.share_frame_clip_weights ? q.frame : text_side(g, clip_block_, x, mode);
        }
        return q;
    }

    // Video-side branches: clip partition (HAMMER) or one whole-video
    // sequence (FLAT), input embedding and self-attention layers.
    [[nodiscard]] VideoEncoding encode_video(Graph& g, const VideoRecord& video, const ForwardMode& mode) const {
        validate_video(video);
        VideoEncoding v;
        v.video_id = video.video_id;
        v.frames = video.frame_count();
        const std::size_t clip_len = config_.architecture == Architecture::hammer ? config_.clip_length : v.frames;
        v.partition = partition_into_clips(v.frames, static_cast<std::int64_t>(clip_len));
        for (const ClipRange& range : v.partition.clips) {
            v.clips.push_back(encode_clip_input(g, video, range, mode));
        }
        return v;
    }

    // Frame encoder over one clip against one query.
    [[nodiscard]] FrameLevelOutput encode_frames(Graph& g, const ClipEncoding& clip, const TextSide& text,
                                                 const ForwardMode& mode, bool need_frame_rows, bool need_text) const {
        const EncoderBlock& block = frame_block_;
        const std::size_t layers = block.cross.size();
        const bool has_aux = clip.aux.has_value();
        Var txt = text.hidden;
        Var vis = clip.visual.hidden;
        Var aux = has_aux ? clip.aux->hidden : Var{};
        const std::size_t rows = vis.rows();
        const auto video_keys = AttentionMask::keys(txt.rows(), clip.key_allowed);
        bool text_current = true;
        for (std::size_t l = 0; l < layers; ++l) {
            const bool last = l + 1 == layers;
            const bool rows_only = last && !need_frame_rows;
            const bool update_text = !last || need_text;
            const auto& cross = block.cross[l];
            Var text_v;
            std::tie(vis, text_v) = cross_step(g, cross, txt, vis, l == 0 ? &text : nullptr, l == 0 ? &clip.visual : nullptr,
                                               video_keys, rows_only, update_text, mode, false);
            if (has_aux) {
                Var text_a;
                std::tie(aux, text_a) = cross_step(g, block.aux_cross[l], txt, aux, l == 0 ? &text : nullptr,
                                                   l == 0 ? &*clip.aux : nullptr, video_keys, rows_only, update_text,
                                                   mode, true);
                if (update_text) {
                    text_v = nn::maybe_dropout(block.text_fuse_norm[l](g, add(text_v, text_a)), config_.dropout, mode);
                }
            }
            if (update_text) {
                txt = text_v;
            } else {
                text_current = false;
            }
        }
        Var fused = has_aux ? block.aux_fuse(g, concat_cols({vis, aux})) : vis;
        FrameLevelOutput out;
        out.ccls = row(fused, 0);
        if (fused.rows() == rows && rows > 1) out.frames = slice_rows(fused, 1, rows - 1);
        if (text_current) {
            out.text = txt;
            out.tcls = row(txt, 0);
        }
        return out;
    }

    // Clip encoder over the clip embeddings of one video against one query.
    [[nodiscard]] ClipLevelOutput encode_clips(Graph& g, Var clip_embs, const TextSide& text, const ForwardMode& mode,
                                               bool need_text) const {
        if (config_.architecture != Architecture::hammer) {
            throw ContractError("encode_clips on a FLAT model");
        }
        const std::size_t k = clip_embs.rows();
        if (k == 0) throw InputError("clip encoder needs at least one clip");
        if (k > config_.max_clips()) {
            throw InputError(std::to_string(k) + " clips exceed the clip position table of " +
                             std::to_string(config_.max_clips()));
        }
        const EncoderBlock& block = clip_level_block();
        Var x = clip_embs;
        if (clip_position_ != nullptr) {
            x = add(x, slice_rows(g.parameter(*clip_position_), 0, k));
        }
        x = nn::maybe_dropout(clip_norm_(g, x), config_.dropout, mode);
        const auto all = AttentionMask::all(k, k);
        for (const auto& layer : block.visual) x = layer(g, x, x, all, mode);

        Var txt = text.hidden;
        bool text_current = true;
        const auto clip_keys = AttentionMask::all(txt.rows(), k);
        const std::size_t layers = block.cross.size();
        for (std::size_t l = 0; l < layers; ++l) {
            const bool last = l + 1 == layers;
            const bool update_text = !last || need_text;
            Var text_v;
            std::tie(x, text_v) =
                cross_step(g, block.cross[l], txt, x, l == 0 ? &text : nullptr, nullptr, clip_keys, false, update_text,
                           mode, false);
            if (update_text) {
                txt = text_v;
            } else {
                text_current = false;
            }
        }
        ClipLevelOutput out;
        out.ctx = x;
        if (text_current) {
            out.text = txt;
            out.tcls = row(txt, 0);
        }
        return out;
    }

    // Full pass for one pre-encoded (video, query) pair.
    [[nodiscard]] EncoderOutputs encode_pair(Graph& g, const VideoEncoding& video, const QueryEncoding& query,
                                             const ForwardMode& mode, OutputNeeds needs = OutputNeeds::full) const {
        invocations_->fetch_add(1);
        const bool full = needs == OutputNeeds::full;
        const bool late = late_fusion();
        EncoderOutputs out;
        out.architecture = config_.architecture;
        out.frames = video.frames;
        out.clips = video.clips.size();
        out.frame_clip.resize(video.frames);
        for (std::size_t t = 0; t < video.frames; ++t) out.frame_clip[t] = video.partition.clip_of(t);

        const bool flat = config_.architecture == Architecture::flat;
        std::vector<Var> ccls, frame_rows, tcls, texts;
        for (const ClipEncoding& clip : video.clips) {
            const bool frames_needed = full || flat;
            const bool text_needed = full || late;
            FrameLevelOutput f = encode_frames(g, clip, query.frame, mode, frames_needed, text_needed);
            ccls.push_back(f.ccls);
            if (f.frames.valid()) frame_rows.push_back(slice_rows(f.frames, 0, clip.range.length));
            if (f.tcls.valid()) {
                tcls.push_back(f.tcls);
                texts.push_back(f.text);
            }
        }
        out.clip_emb = concat_rows(ccls);
        if (!frame_rows.empty()) out.frame_ctx = concat_rows(frame_rows);
        if (!tcls.empty()) {
            out.frame_tcls = concat_rows(tcls);
            out.frame_text = texts.size() == 1 ? texts.front() : scale(add_n(texts), 1.0 / static_cast<double>(texts.size()));
        }
        if (!flat) {
            ClipLevelOutput c = encode_clips(g, out.clip_emb, query.clip, mode, full || late);
            out.clip_ctx = c.ctx;
            out.clip_tcls = c.tcls;
            out.clip_text = c.text;
        }
        return out;
    }

    [[nodiscard]] EncoderOutputs encode_hammer(Graph& g, const VideoRecord& video, const QueryRecord& query,
                                               const ForwardMode& mode, OutputNeeds needs = OutputNeeds::full) const {
        if (config_.architecture != Architecture::hammer) throw ContractError("encode_hammer on a FLAT model");
        return encode_pair(g, encode_video(g, video, mode), encode_query(g, query, mode), mode, needs);
    }

    [[nodiscard]] EncoderOutputs encode_flat(Graph& g, const VideoRecord& video, const QueryRecord& query,
                                             const ForwardMode& mode, OutputNeeds needs = OutputNeeds::full) const {
        if (config_.architecture != Architecture::flat) throw ContractError("encode_flat on a HAMMER model");
        return encode_pair(g, encode_video(g, video, mode), encode_query(g, query, mode), mode, needs);
    }

    [[nodiscard]] EncoderOutputs encode(Graph& g, const VideoRecord& video, const QueryRecord& query,
                                        const ForwardMode& mode, OutputNeeds needs = OutputNeeds::full) const {
        return encode_pair(g, encode_video(g, video, mode), encode_query(g, query, mode), mode, needs);
    }

    // Without a cross-modal stack the heads combine video and text features
    // multiplicatively, since additive terms would be query-independent.
    [[nodiscard]] bool late_fusion() const { return config_.cross_modal_layers == 0; }

private:
    [[nodiscard]] const EncoderBlock& clip_level_block() const {
        return config_.share_frame_clip_weights ? frame_block_ : clip_block_;
    }

    [[nodiscard]] TextSide text_side(Graph& g, const EncoderBlock& block, Var embedded, const ForwardMode& mode) const {
        TextSide side;
        const std::size_t len = embedded.rows();
        Var x = embedded;
        const auto all = AttentionMask::all(len, len);
        for (const auto& layer : block.text) x = layer(g, x, x, all, mode);
        side.hidden = x;
        if (!block.cross.empty()) {
            side.q_text_to_video = block.cross[0].text_to_video.project_query(g, x);
            side.k_video_to_text = block.cross[0].video_to_text.project_key(g, x);
            side.v_video_to_text = block.cross[0].video_to_text.project_value(g, x);
        }
        if (!block.aux_cross.empty()) {
            side.q_text_to_aux = block.aux_cross[0].text_to_video.project_query(g, x);
            side.k_aux_to_text = block.aux_cross[0].video_to_text.project_key(g, x);
            side.v_aux_to_text = block.aux_cross[0].video_to_text.project_value(g, x);
        }
        return side;
    }

    [[nodiscard]] StreamSide stream_side(Graph& g, const std::vector<nn::TransformerLayer>& layers,
                                         const std::vector<nn::CrossModalLayer>& cross, Var x,
                                         const AttentionMask& self_mask, const ForwardMode& mode) const {
        for (const auto& layer : layers) x = layer(g, x, x, self_mask, mode);
        StreamSide s;
        s.hidden = x;
        if (!cross.empty()) {
            s.k_text_to_stream = cross[0].text_to_video.project_key(g, x);
            s.v_text_to_stream = cross[0].text_to_video.project_value(g, x);
            s.q_stream_to_text = cross[0].video_to_text.project_query(g, x);
        }
        return s;
    }

    [[nodiscard]] ClipEncoding encode_clip_input(Graph& g, const VideoRecord& video, const ClipRange& range,
                                                 const ForwardMode& mode) const {
        const std::size_t m = range.length + range.padding;
        ClipEncoding clip;
        clip.range = range;
        clip.key_allowed.assign(1 + m, 0);
        for (std::size_t i = 0; i < 1 + range.length; ++i) clip.key_allowed[i] = 1;
        std::vector<std::size_t> positions(m);
        for (std::size_t i = 0; i < m; ++i) positions[i] = std::min(range.begin + i, config_.max_video_length - 1);
        const auto self_mask = AttentionMask::keys(1 + m, clip.key_allowed);

        auto embed = [&](const Tensor& source, const nn::Linear& proj, Parameter& cls, const nn::Norm& norm) {
            Tensor padded = Tensor::matrix(m, source.cols());
            for (std::size_t i = 0; i < range.length; ++i) {
                auto src = source.row(range.begin + i);
                std::copy(src.begin(), src.end(), padded.row(i).begin());
            }
            Var x = add(proj(g, g.constant(std::move(padded))), gather_rows(g.parameter(*frame_position_), positions));
            x = concat_rows({g.parameter(cls), x});
            return nn::maybe_dropout(norm(g, x), config_.dropout, mode);
        };

        clip.visual = stream_side(g, frame_block_.visual, frame_block_.cross,
                                  embed(video.frames, visual_proj_, *ccls_, frame_norm_), self_mask, mode);
        if (config_.auxiliary_stream) {
            clip.aux = stream_side(g, frame_block_.aux, frame_block_.aux_cross,
                                   embed(*video.aux, aux_proj_, *aux_cls_, aux_norm_), self_mask, mode);
        }
        return clip;
    }

    // One bidirectional cross-modal step. Returns (new video stream, new text
    // or invalid). `cached_*` supply first-layer projections when available.
    std::pair<Var, Var> cross_step(Graph& g, const nn::CrossModalLayer& layer, Var txt, Var stream,
                                   const TextSide* cached_text, const StreamSide* cached_stream,
                                   const AttentionMask& video_keys, bool cls_row_only, bool update_text,
                                   const ForwardMode& mode, bool aux) const {
        // video -> text
        Var q_s = cached_stream ? cached_stream->q_stream_to_text : layer.video_to_text.project_query(g, stream);
        Var k_t = cached_text ? (aux ? cached_text->k_aux_to_text : cached_text->k_video_to_text)
                              : layer.video_to_text.project_key(g, txt);
        Var v_t = cached_text ? (aux ? cached_text->v_aux_to_text : cached_text->v_video_to_text)
                              : layer.video_to_text.project_value(g, txt);
        Var new_stream;
        if (cls_row_only) {
            new_stream = layer.video_to_text.finish(g, row(stream, 0), row(q_s, 0), k_t, v_t,
                                                    AttentionMask::all(1, txt.rows()), mode);
        } else {
            new_stream = layer.video_to_text.finish(g, stream, q_s, k_t, v_t, AttentionMask::all(stream.rows(), txt.rows()),
                                                    mode);
        }
        Var new_text;
        if (update_text) {
            Var q_t = cached_text ? (aux ? cached_text->q_text_to_aux : cached_text->q_text_to_video)
                                  : layer.text_to_video.project_query(g, txt);
            Var k_s = cached_stream ? cached_stream->k_text_to_stream : layer.text_to_video.project_key(g, stream);
            Var v_s = cached_stream ? cached_stream->v_text_to_stream : layer.text_to_video.project_value(g, stream);
            new_text = layer.text_to_video.finish(g, txt, q_t, k_s, v_s, video_keys, mode);
        }
        return {new_stream, new_text};
    }

    EncoderConfig config_;
    ParameterStore params_;
    Parameter* token_embedding_ = nullptr;
    Parameter* text_position_ = nullptr;
    nn::Norm text_norm_;
    nn::Linear visual_proj_;
    Parameter* frame_position_ = nullptr;
    Parameter* ccls_ = nullptr;
    nn::Norm frame_norm_;
    nn::Linear aux_proj_;
    Parameter* aux_cls_ = nullptr;
    nn::Norm aux_norm_;
    EncoderBlock frame_block_;
    EncoderBlock clip_block_;
    Parameter* clip_position_ = nullptr;
    nn::Norm clip_norm_;
    HeadParams heads_;
    std::shared_ptr<std::atomic<std::size_t>> invocations_ = std::make_shared<std::atomic<std::size_t>>(0);
};

// Uniformly subsamples a video longer than max_frames; returns the kept
// source frame indices.
inline std::vector<std::size_t> subsample_indices(std::size_t frames, std::size_t max_frames) {
    std::vector<std::size_t> idx;
    if (frames <= max_frames) {
        for (std::size_t i = 0; i < frames; ++i) idx.push_back(i);
        return idx;
    }
    for (std::size_t j = 0; j < max_frames; ++j) idx.push_back(j * frames / max_frames);
    return idx;
}

inline VideoRecord subsample_video(const VideoRecord& video, std::size_t max_frames) {
    const auto idx = subsample_indices(video.frame_count(), max_frames);
    if (idx.size() == video.frame_count()) return video;
    auto pick_rows = [&](const Tensor& src) {
        Tensor out = Tensor::matrix(idx.size(), src.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto r = src.row(idx[i]);
            std::copy(r.begin(), r.end(), out.row(i).begin());
        }
        return out;
    };
    VideoRecord out{video.video_id, pick_rows(video.frames), std::nullopt};
    if (video.aux) out.aux = pick_rows(*video.aux);
    return out;
}

// Proportional remap of a segment into subsampled-frame space, keeping
// start < end.
inline Segment remap_segment(const Segment& s, std::size_t frames, std::size_t max_frames) {
    if (frames <= max_frames) return s;
    Segment r{s.start * max_frames / frames, s.end * max_frames / frames};
    if (r.end <= r.start) {
        if (r.start + 1 < max_frames) {
            r.end = r.start + 1;
        } else {
            r.start = max_frames - 2;
            r.end = max_frames - 1;
        }
    }
    return r;
}

} // namespace hammer
