#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "data.hpp"
#include "encoders.hpp"
#include "errors.hpp"
#include "heads.hpp"
#include "inference.hpp"
#include "parameters.hpp"
#include "training.hpp"

namespace hammer {

// Everything a command needs, flattened to key=value pairs. Precedence:
// built-in defaults, then --preset, then --config file, then flags.
struct RunConfig {
    EncoderConfig model;
    TrainConfig train;
    CorpusConfig corpus;
    DecodeMode decode = DecodeMode::joint;
    std::vector<std::size_t> eval_ks{1, 10, 100};
    std::vector<double> eval_taus{0.5, 0.7};
    std::size_t duration_buckets = 4;
    std::uint64_t seed = 0;
    unsigned threads = 1;

    RunConfig() { model.max_query_length = corpus.max_query_tokens() + 1; }
};

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "off" || v == "0" || v == "no") return false;
    throw ConfigError("key '" + key + "': expected on/off, got '" + v + "'");
}

template <class T, class F>
std::vector<T> parse_list(const std::string& v, F parse) {
    std::vector<T> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse(item));
    }
    return out;
}

inline std::string real_text(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

} // namespace detail

struct ConfigKey {
    std::string name;
    std::string help;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
    using detail::parse_bool;
    using detail::parse_real;
    using detail::parse_uint;
    using detail::real_text;
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        auto size_key = [&k](std::string name, std::string help, auto member) {
            k.push_back({name, std::move(help),
                         [name, member](RunConfig& c, const std::string& v) { member(c) = parse_uint(name, v); },
                         [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }});
        };
        auto real_key = [&k](std::string name, std::string help, auto member) {
            k.push_back({name, std::move(help),
                         [name, member](RunConfig& c, const std::string& v) { member(c) = parse_real(name, v); },
                         [member](const RunConfig& c) { return real_text(member(const_cast<RunConfig&>(c))); }});
        };
        auto bool_key = [&k](std::string name, std::string help, auto member) {
            k.push_back({name, std::move(help),
                         [name, member](RunConfig& c, const std::string& v) { member(c) = parse_bool(name, v); },
                         [member](const RunConfig& c) {
                             return std::string(member(const_cast<RunConfig&>(c)) ? "on" : "off");
                         }});
        };

        k.push_back({"model", "hammer or flat",
                     [](RunConfig& c, const std::string& v) {
                         if (v == "hammer") c.model.architecture = Architecture::hammer;
                         else if (v == "flat") c.model.architecture = Architecture::flat;
                         else throw ConfigError("key 'model': expected hammer or flat, got '" + v + "'");
                     },
                     [](const RunConfig& c) { return to_string(c.model.architecture); }});
        size_key("hidden_width", "model width d", [](RunConfig& c) -> std::size_t& { return c.model.hidden_width; });
        size_key("attention_heads", "attention heads", [](RunConfig& c) -> std::size_t& { return c.model.attention_heads; });
        size_key("text_layers", "text self-attention layers", [](RunConfig& c) -> std::size_t& { return c.model.text_layers; });
        size_key("visual_layers", "video self-attention layers", [](RunConfig& c) -> std::size_t& { return c.model.visual_layers; });
        size_key("cross_modal_layers", "cross-modal layers (0 disables)",
                 [](RunConfig& c) -> std::size_t& { return c.model.cross_modal_layers; });
        size_key("ffn_multiplier", "feed-forward width / d", [](RunConfig& c) -> std::size_t& { return c.model.ffn_multiplier; });
        size_key("clip_length", "frames per clip M", [](RunConfig& c) -> std::size_t& { return c.model.clip_length; });
        size_key("max_video_length", "N_max; longer videos are subsampled",
                 [](RunConfig& c) -> std::size_t& { return c.model.max_video_length; });
        bool_key("share_frame_clip_weights", "one block for frame and clip encoders",
                 [](RunConfig& c) -> bool& { return c.model.share_frame_clip_weights; });
        bool_key("clip_position_embeddings", "clip index embeddings at the clip encoder input",
                 [](RunConfig& c) -> bool& { return c.model.clip_position_embeddings; });
        bool_key("auxiliary_stream", "fuse the dataset's auxiliary stream", [](RunConfig& c) -> bool& { return c.model.auxiliary_stream; });
        bool_key("share_u", "one clip projection for both boundaries", [](RunConfig& c) -> bool& { return c.model.share_u; });
        real_key("dropout", "dropout rate", [](RunConfig& c) -> double& { return c.model.dropout; });
        size_key("vocabulary_size", "token ids the model accepts (set from the dataset)",
                 [](RunConfig& c) -> std::size_t& { return c.model.vocabulary_size; });
        size_key("max_query_length", "longest query including TCLS (set from the dataset)",
                 [](RunConfig& c) -> std::size_t& { return c.model.max_query_length; });
        size_key("feature_width", "model input feature width (set from the dataset)",
                 [](RunConfig& c) -> std::size_t& { return c.model.visual_width; });
        size_key("aux_feature_width", "model auxiliary input width (set from the dataset)",
                 [](RunConfig& c) -> std::size_t& { return c.model.aux_width; });

        size_key("epochs", "training epochs", [](RunConfig& c) -> std::size_t& { return c.train.epochs; });
        size_key("batch_size", "mini-batch size (>= 2)", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
        real_key("max_lr", "peak learning rate", [](RunConfig& c) -> double& { return c.train.max_lr; });
        real_key("warmup_fraction", "linear warmup share of training", [](RunConfig& c) -> double& { return c.train.warmup_fraction; });
        real_key("first_decay", "progress where lr drops to 0.1x", [](RunConfig& c) -> double& { return c.train.first_decay; });
        real_key("second_decay", "progress where lr drops to 0.01x", [](RunConfig& c) -> double& { return c.train.second_decay; });
        real_key("lambda_vr", "retrieval loss weight", [](RunConfig& c) -> double& { return c.train.weights.vr; });
        real_key("lambda_tl", "localization loss weight", [](RunConfig& c) -> double& { return c.train.weights.tl; });
        real_key("lambda_mlm", "masked-token loss weight", [](RunConfig& c) -> double& { return c.train.weights.mask; });
        real_key("mask_rate", "token masking probability", [](RunConfig& c) -> double& { return c.train.mask_rate; });
        bool_key("mlm_frame", "masked-token loss on frame encoder text (FM)", [](RunConfig& c) -> bool& { return c.train.mlm_levels.frame; });
        bool_key("mlm_clip", "masked-token loss on clip encoder text (CM)", [](RunConfig& c) -> bool& { return c.train.mlm_levels.clip; });
        k.push_back({"tl_loss", "boundary or framewise3way",
                     [](RunConfig& c, const std::string& v) {
                         if (v == "boundary") c.train.tl_loss = TlLossKind::boundary;
                         else if (v == "framewise3way") c.train.tl_loss = TlLossKind::framewise3way;
                         else throw ConfigError("key 'tl_loss': expected boundary or framewise3way, got '" + v + "'");
                     },
                     [](const RunConfig& c) {
                         return std::string(c.train.tl_loss == TlLossKind::boundary ? "boundary" : "framewise3way");
                     }});
        real_key("clip_norm", "global gradient norm limit", [](RunConfig& c) -> double& { return c.train.clip_norm; });
        size_key("eval_every", "steps between held-out evaluations (0 = end only)",
                 [](RunConfig& c) -> std::size_t& { return c.train.eval_every; });
        size_key("eval_k", "videos localized per query during training evaluation",
                 [](RunConfig& c) -> std::size_t& { return c.train.eval_k; });

        size_key("num_videos", "videos in a generated corpus", [](RunConfig& c) -> std::size_t& { return c.corpus.num_videos; });
        size_key("min_frames", "shortest generated video", [](RunConfig& c) -> std::size_t& { return c.corpus.min_frames; });
        size_key("max_frames", "longest generated video", [](RunConfig& c) -> std::size_t& { return c.corpus.max_frames; });
        size_key("segments_per_video", "concept spans per video", [](RunConfig& c) -> std::size_t& { return c.corpus.segments_per_video; });
        size_key("queries_per_video", "annotated spans per video", [](RunConfig& c) -> std::size_t& { return c.corpus.queries_per_video; });
        size_key("concepts", "concept bank size", [](RunConfig& c) -> std::size_t& { return c.corpus.concepts; });
        size_key("visual_width", "frame feature width", [](RunConfig& c) -> std::size_t& { return c.corpus.visual_width; });
        size_key("aux_width", "auxiliary feature width (0 = none)", [](RunConfig& c) -> std::size_t& { return c.corpus.aux_width; });
        real_key("noise_sigma", "feature noise", [](RunConfig& c) -> double& { return c.corpus.noise_sigma; });
        size_key("min_segment_length", "shortest span", [](RunConfig& c) -> std::size_t& { return c.corpus.min_segment_length; });
        size_key("content_tokens", "content vocabulary range", [](RunConfig& c) -> std::size_t& { return c.corpus.content_tokens; });
        size_key("filler_tokens", "filler vocabulary range", [](RunConfig& c) -> std::size_t& { return c.corpus.filler_tokens; });
        real_key("heldout_fraction", "share of queries held out", [](RunConfig& c) -> double& { return c.corpus.heldout_fraction; });

        k.push_back({"decode", "joint or greedy-repair",
                     [](RunConfig& c, const std::string& v) {
                         if (v == "joint") c.decode = DecodeMode::joint;
                         else if (v == "greedy-repair") c.decode = DecodeMode::greedy_repair;
                         else throw ConfigError("key 'decode': expected joint or greedy-repair, got '" + v + "'");
                     },
                     [](const RunConfig& c) { return std::string(c.decode == DecodeMode::joint ? "joint" : "greedy-repair"); }});
        k.push_back({"eval_ks", "comma-separated recall cutoffs",
                     [](RunConfig& c, const std::string& v) {
                         c.eval_ks = detail::parse_list<std::size_t>(v, [](const std::string& s) {
                             const auto n = parse_uint("eval_ks", s);
                             if (n == 0) throw ConfigError("key 'eval_ks': cutoffs must be >= 1");
                             return static_cast<std::size_t>(n);
                         });
                         if (c.eval_ks.empty()) throw ConfigError("key 'eval_ks': empty list");
                     },
                     [](const RunConfig& c) {
                         std::string s;
                         for (auto x : c.eval_ks) s += (s.empty() ? "" : ",") + std::to_string(x);
                         return s;
                     }});
        k.push_back({"eval_taus", "comma-separated IoU thresholds for corpus recall",
                     [](RunConfig& c, const std::string& v) {
                         c.eval_taus = detail::parse_list<double>(v, [](const std::string& s) { return parse_real("eval_taus", s); });
                         if (c.eval_taus.empty()) throw ConfigError("key 'eval_taus': empty list");
                     },
                     [](const RunConfig& c) {
                         std::string s;
                         for (auto x : c.eval_taus) s += (s.empty() ? "" : ",") + real_text(x);
                         return s;
                     }});
        size_key("duration_buckets", "equal-width duration buckets in reports",
                 [](RunConfig& c) -> std::size_t& { return c.duration_buckets; });
        k.push_back({"seed", "master seed",
                     [](RunConfig& c, const std::string& v) { c.seed = parse_uint("seed", v); },
                     [](const RunConfig& c) { return std::to_string(c.seed); }});
        k.push_back({"threads", "worker threads for evaluation",
                     [](RunConfig& c, const std::string& v) {
                         c.threads = static_cast<unsigned>(std::max<std::uint64_t>(1, parse_uint("threads", v)));
                     },
                     [](const RunConfig& c) { return std::to_string(c.threads); }});
        return k;
    }();
    return keys;
}

inline const ConfigKey* find_config_key(const std::string& name) {
    for (const auto& k : config_keys()) {
        if (k.name == name) return &k;
    }
    return nullptr;
}

inline void set_config(RunConfig& c, const std::string& key, const std::string& value) {
    const ConfigKey* k = find_config_key(key);
    if (k == nullptr) throw ConfigError("unknown config key '" + key + "'");
    k->set(c, detail::trim(value));
}

inline std::string get_config(const RunConfig& c, const std::string& key) {
    const ConfigKey* k = find_config_key(key);
    if (k == nullptr) throw ConfigError("unknown config key '" + key + "'");
    return k->get(c);
}

// "key=value" assignment.
inline void apply_assignment(RunConfig& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
    set_config(c, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& source) {
    std::istringstream in(text);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        try {
            apply_assignment(c, line);
        } catch (const ConfigError& e) {
            throw ConfigError(source + ":" + std::to_string(n) + ": " + e.what());
        }
    }
}

inline void apply_config_file(RunConfig& c, const std::filesystem::path& path) {
    std::string text;
    try {
        text = detail::read_file(path);
    } catch (const LoadError&) {
        throw ConfigError("cannot read config file " + path.string());
    }
    apply_config_text(c, text, path.string());
}

inline std::string config_text(const RunConfig& c) {
    std::string out;
    for (const auto& k : config_keys()) out += k.name + " = " + k.get(c) + "\n";
    return out;
}

// Model shape fields a dataset dictates.
inline void adapt_model_to_corpus(EncoderConfig& m, const Corpus& corpus) {
    m.vocabulary_size = corpus.vocab.size();
    m.visual_width = corpus.videos.empty() ? corpus.config.visual_width : corpus.videos.front().frames.cols();
    m.aux_width = corpus.config.aux_width;
    std::size_t longest = 0;
    for (const auto& e : corpus.examples) longest = std::max(longest, e.query.tokens.size());
    m.max_query_length = std::max(m.max_query_length, longest + 1);
}

} // namespace hammer
