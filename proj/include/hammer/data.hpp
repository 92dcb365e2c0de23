#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "hash.hpp"
#include "parameters.hpp"
#include "records.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace hammer {

struct CorpusConfig {
    std::size_t num_videos = 64;
    std::size_t min_frames = 64;  // frame counts are drawn uniformly from [min_frames, max_frames]
    std::size_t max_frames = 64;
    std::size_t segments_per_video = 4;
    std::size_t queries_per_video = 4;
    std::size_t concepts = 32;
    std::size_t visual_width = 16;
    std::size_t aux_width = 0;  // 0 disables the auxiliary stream
    double noise_sigma = 0.3;
    std::size_t min_segment_length = 2;
    std::size_t content_tokens = 64;
    std::size_t filler_tokens = 8;
    std::size_t min_template_tokens = 2;
    std::size_t max_template_tokens = 4;
    std::size_t min_filler = 1;
    std::size_t max_filler = 3;
    double heldout_fraction = 0.2;
    std::uint64_t seed = 0;

    bool operator==(const CorpusConfig&) const = default;

    [[nodiscard]] std::size_t vocabulary_size() const {
        return special_tokens::first_regular + content_tokens + filler_tokens;
    }

    // Longest query including fillers, excluding TCLS.
    [[nodiscard]] std::size_t max_query_tokens() const { return max_template_tokens + max_filler; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError(m); };
        if (min_frames == 0 || min_frames > max_frames) fail("need 1 <= min_frames <= max_frames");
        if (segments_per_video == 0) fail("segments_per_video must be positive");
        if (min_segment_length < 2) fail("min_segment_length must be at least 2");
        if (segments_per_video * min_segment_length > min_frames) {
            fail("segments_per_video * min_segment_length (" + std::to_string(segments_per_video * min_segment_length) +
                 ") exceeds frames per video (" + std::to_string(min_frames) + ")");
        }
        if (queries_per_video > segments_per_video) fail("queries_per_video exceeds segments_per_video");
        if (concepts < segments_per_video) fail("concepts must be at least segments_per_video");
        if (visual_width == 0) fail("visual_width must be at least 1");
        if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) fail("noise_sigma must be finite and >= 0");
        if (min_template_tokens == 0 || min_template_tokens > max_template_tokens) {
            fail("need 1 <= min_template_tokens <= max_template_tokens");
        }
        if (min_filler > max_filler) fail("need min_filler <= max_filler");
        if (max_filler > 0 && filler_tokens == 0) fail("filler tokens requested but filler range is empty");
        if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) fail("heldout_fraction must be in [0, 1)");
        // Distinct templates need enough distinct token sequences.
        double capacity = 0.0;
        for (std::size_t len = min_template_tokens; len <= max_template_tokens; ++len) {
            capacity += std::pow(static_cast<double>(content_tokens), static_cast<double>(len));
        }
        if (content_tokens == 0 || capacity < static_cast<double>(concepts) * 2.0) {
            fail("content token range too small for " + std::to_string(concepts) + " distinct templates");
        }
    }
};

inline CorpusConfig preset_corpus(const std::string& name) {
    CorpusConfig c;
    if (name == "tiny") return c;
    if (name == "stress") {
        c.num_videos = 32;
        c.min_frames = 32;
        c.max_frames = 128;
        c.segments_per_video = 8;
        c.queries_per_video = 8;
        c.concepts = 32;
        return c;
    }
    if (name == "micro") {
        c.num_videos = 8;
        c.min_frames = c.max_frames = 12;
        c.segments_per_video = 2;
        c.queries_per_video = 2;
        c.concepts = 8;
        c.visual_width = 8;
        c.content_tokens = 16;
        c.filler_tokens = 4;
        return c;
    }
    throw ConfigError("unknown preset '" + name + "' (known: tiny, stress, micro)");
}

// Token id layout: specials, then the content range, then the filler range.
struct Vocabulary {
    std::size_t content_count = 0;
    std::size_t filler_count = 0;

    bool operator==(const Vocabulary&) const = default;

    [[nodiscard]] TokenId content_begin() const { return special_tokens::first_regular; }
    [[nodiscard]] TokenId filler_begin() const { return content_begin() + static_cast<TokenId>(content_count); }
    [[nodiscard]] std::size_t size() const { return special_tokens::first_regular + content_count + filler_count; }

    [[nodiscard]] std::string role(TokenId id) const {
        if (id == special_tokens::pad) return "pad";
        if (id == special_tokens::tcls) return "tcls";
        if (id == special_tokens::mask) return "mask";
        if (id < filler_begin()) return "content";
        if (id < size()) return "filler";
        throw InputError("token id " + std::to_string(id) + " outside vocabulary [0, " + std::to_string(size()) + ")");
    }

    [[nodiscard]] std::string name(TokenId id) const {
        const std::string r = role(id);
        if (r == "content") return "c" + std::to_string(id - content_begin());
        if (r == "filler") return "f" + std::to_string(id - filler_begin());
        return "[" + r + "]";
    }

    [[nodiscard]] TokenId lookup(const std::string& token) const {
        for (TokenId id = 0; id < size(); ++id) {
            if (name(id) == token) return id;
        }
        throw InputError("unknown token '" + token + "'; vocabulary is c0..c" + std::to_string(content_count - 1) +
                         ", f0..f" + std::to_string(filler_count == 0 ? 0 : filler_count - 1) + " (ids " +
                         std::to_string(content_begin()) + ".." + std::to_string(size() - 1) + ")");
    }
};

struct Concept {
    std::vector<double> prototype;      // unit norm, width D_v
    std::vector<double> aux_prototype;  // empty unless an aux stream is generated
    std::vector<TokenId> tokens;

    bool operator==(const Concept&) const = default;
};

enum class Split { train, heldout };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "heldout"; }

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "heldout") return Split::heldout;
    throw InputError("unknown split '" + s + "' (expected train or heldout)");
}

struct AnnotatedExample {
    std::string query_id;
    QueryRecord query;
    std::string video_id;
    std::size_t video_index = 0;
    Segment segment;
    std::size_t concept_id = 0;
    Split split = Split::train;

    bool operator==(const AnnotatedExample&) const = default;
};

struct Corpus {
    CorpusConfig config;
    Vocabulary vocab;
    std::vector<Concept> concepts;
    std::vector<VideoRecord> videos;
    std::vector<AnnotatedExample> examples;

    bool operator==(const Corpus&) const = default;

    [[nodiscard]] std::vector<std::size_t> split_indices(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < examples.size(); ++i) {
            if (examples[i].split == s) out.push_back(i);
        }
        return out;
    }

    [[nodiscard]] const AnnotatedExample* find_query(const std::string& id) const {
        for (const auto& e : examples) {
            if (e.query_id == id) return &e;
        }
        return nullptr;
    }
};

inline std::string video_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "v%04zu", i);
    return buf;
}

// Random stream layout: stream 0 builds the concept bank, stream 1 assigns
// splits, stream 2+i generates video i. Each stream seeds an independent
// generator via mix_seed(seed, stream).
namespace corpus_streams {
inline constexpr std::uint64_t concepts = 0;
inline constexpr std::uint64_t split = 1;
inline constexpr std::uint64_t first_video = 2;
} // namespace corpus_streams

namespace detail {

inline double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

inline std::vector<double> unit_vector(Rng& rng, std::size_t width) {
    std::vector<double> v(width);
    double norm = 0.0;
    do {
        norm = 0.0;
        for (double& x : v) {
            x = rng.normal();
            norm += x * x;
        }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (double& x : v) x = round_to_float(x / norm);
    return v;
}

// Split `total` into `parts` lengths, each >= min_len, uniformly over compositions.
inline std::vector<std::size_t> random_composition(Rng& rng, std::size_t total, std::size_t parts, std::size_t min_len) {
    const std::size_t free = total - parts * min_len;
    std::vector<std::size_t> cuts;
    for (std::size_t i = 0; i + 1 < parts; ++i) cuts.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(free))));
    std::sort(cuts.begin(), cuts.end());
    std::vector<std::size_t> out;
    std::size_t prev = 0;
    for (std::size_t c : cuts) {
        out.push_back(min_len + c - prev);
        prev = c;
    }
    out.push_back(min_len + free - prev);
    return out;
}

} // namespace detail

inline Corpus gen_corpus(const CorpusConfig& config) {
    config.validate();
    Corpus corpus;
    corpus.config = config;
    corpus.vocab = {config.content_tokens, config.filler_tokens};

    Rng bank(mix_seed(config.seed, corpus_streams::concepts));
    std::set<std::vector<TokenId>> seen_templates;
    for (std::size_t c = 0; c < config.concepts; ++c) {
        Concept con;
        con.prototype = detail::unit_vector(bank, config.visual_width);
        if (config.aux_width > 0) con.aux_prototype = detail::unit_vector(bank, config.aux_width);
        do {
            const auto len = static_cast<std::size_t>(bank.uniform_int(static_cast<std::int64_t>(config.min_template_tokens),
                                                                       static_cast<std::int64_t>(config.max_template_tokens)));
            con.tokens.clear();
            for (std::size_t i = 0; i < len; ++i) {
                con.tokens.push_back(corpus.vocab.content_begin() +
                                     static_cast<TokenId>(bank.uniform_int(0, static_cast<std::int64_t>(config.content_tokens) - 1)));
            }
        } while (!seen_templates.insert(con.tokens).second);
        corpus.concepts.push_back(std::move(con));
    }

    for (std::size_t v = 0; v < config.num_videos; ++v) {
        Rng rng(mix_seed(config.seed, corpus_streams::first_video + v));
        const auto frames = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(config.min_frames), static_cast<std::int64_t>(config.max_frames)));
        const auto lengths = detail::random_composition(rng, frames, config.segments_per_video, config.min_segment_length);
        // Distinct concepts within a video so each query has one answer inside it.
        std::vector<std::size_t> pool(config.concepts);
        for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
        std::vector<std::size_t> chosen;
        for (std::size_t s = 0; s < config.segments_per_video; ++s) {
            const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(s), static_cast<std::int64_t>(pool.size()) - 1));
            std::swap(pool[s], pool[j]);
            chosen.push_back(pool[s]);
        }

        VideoRecord video{video_name(v), Tensor::matrix(frames, config.visual_width), std::nullopt};
        if (config.aux_width > 0) video.aux = Tensor::matrix(frames, config.aux_width);
        std::vector<Segment> spans;
        std::size_t t = 0;
        for (std::size_t s = 0; s < config.segments_per_video; ++s) {
            const Concept& con = corpus.concepts[chosen[s]];
            spans.push_back({t, t + lengths[s] - 1});
            for (std::size_t f = 0; f < lengths[s]; ++f, ++t) {
                for (std::size_t d = 0; d < config.visual_width; ++d) {
                    video.frames(t, d) = detail::round_to_float(con.prototype[d] + config.noise_sigma * rng.normal());
                }
                if (video.aux) {
                    for (std::size_t d = 0; d < config.aux_width; ++d) {
                        (*video.aux)(t, d) = detail::round_to_float(con.aux_prototype[d] + config.noise_sigma * rng.normal());
                    }
                }
            }
        }

        std::vector<std::size_t> queried(config.segments_per_video);
        for (std::size_t i = 0; i < queried.size(); ++i) queried[i] = i;
        if (config.queries_per_video < config.segments_per_video) {
            for (std::size_t i = 0; i < config.queries_per_video; ++i) {
                const auto j = static_cast<std::size_t>(
                    rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(queried.size()) - 1));
                std::swap(queried[i], queried[j]);
            }
            queried.resize(config.queries_per_video);
            std::sort(queried.begin(), queried.end());
        }
        for (std::size_t q = 0; q < queried.size(); ++q) {
            const std::size_t s = queried[q];
            const Concept& con = corpus.concepts[chosen[s]];
            const auto fillers = static_cast<std::size_t>(
                rng.uniform_int(static_cast<std::int64_t>(config.min_filler), static_cast<std::int64_t>(config.max_filler)));
            const auto before = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(fillers)));
            auto filler = [&] {
                return corpus.vocab.filler_begin() +
                       static_cast<TokenId>(rng.uniform_int(0, static_cast<std::int64_t>(config.filler_tokens) - 1));
            };
            QueryRecord query;
            for (std::size_t i = 0; i < before; ++i) query.tokens.push_back(filler());
            query.tokens.insert(query.tokens.end(), con.tokens.begin(), con.tokens.end());
            for (std::size_t i = before; i < fillers; ++i) query.tokens.push_back(filler());
            AnnotatedExample ex;
            ex.query_id = video.video_id + "_q" + std::to_string(s);
            ex.query = std::move(query);
            ex.video_id = video.video_id;
            ex.video_index = v;
            ex.segment = spans[s];
            ex.concept_id = chosen[s];
            corpus.examples.push_back(std::move(ex));
        }
        corpus.videos.push_back(std::move(video));
    }

    Rng split(mix_seed(config.seed, corpus_streams::split));
    std::vector<std::size_t> order(corpus.examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(split.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(order[i - 1], order[j]);
    }
    const auto heldout = static_cast<std::size_t>(std::llround(config.heldout_fraction * static_cast<double>(order.size())));
    for (std::size_t i = 0; i < heldout; ++i) corpus.examples[order[i]].split = Split::heldout;
    return corpus;
}

// ---- dataset files ----

inline constexpr std::string_view dataset_magic = "HMRDATA1";
inline constexpr int dataset_version = 1;
inline constexpr const char* dataset_files[] = {"manifest", "features.bin", "vocab"};

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::uint64_t file_digest(const std::string& bytes) { return fnv1a(std::string_view(bytes)); }

namespace detail {

inline nlohmann::ordered_json config_json(const CorpusConfig& c) {
    nlohmann::ordered_json j;
    j["num_videos"] = c.num_videos;
    j["min_frames"] = c.min_frames;
    j["max_frames"] = c.max_frames;
    j["segments_per_video"] = c.segments_per_video;
    j["queries_per_video"] = c.queries_per_video;
    j["concepts"] = c.concepts;
    j["visual_width"] = c.visual_width;
    j["aux_width"] = c.aux_width;
    j["noise_sigma"] = c.noise_sigma;
    j["min_segment_length"] = c.min_segment_length;
    j["content_tokens"] = c.content_tokens;
    j["filler_tokens"] = c.filler_tokens;
    j["min_template_tokens"] = c.min_template_tokens;
    j["max_template_tokens"] = c.max_template_tokens;
    j["min_filler"] = c.min_filler;
    j["max_filler"] = c.max_filler;
    j["heldout_fraction"] = c.heldout_fraction;
    j["seed"] = c.seed;
    return j;
}

template <class T>
T field(const nlohmann::json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) throw LoadError(where + ": missing field '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw LoadError(where + ": field '" + key + "' has the wrong type");
    }
}

inline CorpusConfig config_from_json(const nlohmann::json& j, const std::string& where) {
    CorpusConfig c;
    c.num_videos = field<std::size_t>(j, "num_videos", where);
    c.min_frames = field<std::size_t>(j, "min_frames", where);
    c.max_frames = field<std::size_t>(j, "max_frames", where);
    c.segments_per_video = field<std::size_t>(j, "segments_per_video", where);
    c.queries_per_video = field<std::size_t>(j, "queries_per_video", where);
    c.concepts = field<std::size_t>(j, "concepts", where);
    c.visual_width = field<std::size_t>(j, "visual_width", where);
    c.aux_width = field<std::size_t>(j, "aux_width", where);
    c.noise_sigma = field<double>(j, "noise_sigma", where);
    c.min_segment_length = field<std::size_t>(j, "min_segment_length", where);
    c.content_tokens = field<std::size_t>(j, "content_tokens", where);
    c.filler_tokens = field<std::size_t>(j, "filler_tokens", where);
    c.min_template_tokens = field<std::size_t>(j, "min_template_tokens", where);
    c.max_template_tokens = field<std::size_t>(j, "max_template_tokens", where);
    c.min_filler = field<std::size_t>(j, "min_filler", where);
    c.max_filler = field<std::size_t>(j, "max_filler", where);
    c.heldout_fraction = field<double>(j, "heldout_fraction", where);
    c.seed = field<std::uint64_t>(j, "seed", where);
    return c;
}

inline void put_f32_rows(std::string& out, const Tensor& t) {
    for (double v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

} // namespace detail

inline void write_dataset(const Corpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string features(dataset_magic);
    std::string manifest;
    {
        nlohmann::ordered_json header;
        header["format"] = "hammer-dataset";
        header["version"] = dataset_version;
        header["config"] = detail::config_json(corpus.config);
        header["vocabulary"] = {{"content", corpus.vocab.content_count}, {"filler", corpus.vocab.filler_count}};
        nlohmann::ordered_json concepts = nlohmann::ordered_json::array();
        for (const auto& c : corpus.concepts) {
            concepts.push_back({{"tokens", c.tokens}, {"prototype", c.prototype}, {"aux_prototype", c.aux_prototype}});
        }
        header["concepts"] = concepts;
        header["num_videos"] = corpus.videos.size();
        manifest += header.dump() + "\n";
    }
    std::map<std::size_t, std::vector<const AnnotatedExample*>> by_video;
    for (const auto& e : corpus.examples) by_video[e.video_index].push_back(&e);
    for (std::size_t v = 0; v < corpus.videos.size(); ++v) {
        const VideoRecord& video = corpus.videos[v];
        nlohmann::ordered_json rec;
        rec["video_id"] = video.video_id;
        rec["N"] = video.frame_count();
        rec["visual_width"] = video.frames.cols();
        rec["offset"] = features.size();
        detail::put_f32_rows(features, video.frames);
        if (video.aux) {
            rec["aux_width"] = video.aux->cols();
            rec["aux_offset"] = features.size();
            detail::put_f32_rows(features, *video.aux);
        }
        nlohmann::ordered_json anns = nlohmann::ordered_json::array();
        for (const AnnotatedExample* e : by_video[v]) {
            anns.push_back({{"query_id", e->query_id},
                            {"tokens", e->query.tokens},
                            {"start", e->segment.start},
                            {"end", e->segment.end},
                            {"concept", e->concept_id},
                            {"split", to_string(e->split)}});
        }
        rec["annotations"] = anns;
        manifest += rec.dump() + "\n";
    }
    std::string vocab;
    for (TokenId id = 0; id < corpus.vocab.size(); ++id) {
        vocab += std::to_string(id) + "\t" + corpus.vocab.name(id) + "\t" + corpus.vocab.role(id) + "\n";
    }
    const std::map<std::string, const std::string*> files{{"manifest", &manifest}, {"features.bin", &features}, {"vocab", &vocab}};
    std::string checksum;
    for (const char* name : dataset_files) {
        detail::write_file(dir / name, *files.at(name));
        checksum += std::string(name) + " " + hex64(file_digest(*files.at(name))) + "\n";
    }
    detail::write_file(dir / "checksum", checksum);
}

inline void verify_checksums(const std::filesystem::path& dir) {
    const std::string listing = detail::read_file(dir / "checksum");
    std::istringstream in(listing);
    std::string name, digest;
    std::set<std::string> listed;
    while (in >> name >> digest) {
        const std::string bytes = detail::read_file(dir / name);
        if (hex64(file_digest(bytes)) != digest) {
            throw LoadError((dir / name).string() + ": checksum mismatch (expected " + digest + ", got " +
                            hex64(file_digest(bytes)) + ")");
        }
        listed.insert(name);
    }
    for (const char* f : dataset_files) {
        if (!listed.contains(f)) throw LoadError((dir / "checksum").string() + ": no digest for " + f);
    }
}

inline Corpus read_dataset(const std::filesystem::path& dir) {
    verify_checksums(dir);
    const std::string manifest_path = (dir / "manifest").string();
    const std::string features_path = (dir / "features.bin").string();
    const std::string features = detail::read_file(dir / "features.bin");
    if (features.size() < dataset_magic.size() || std::string_view(features).substr(0, dataset_magic.size()) != dataset_magic) {
        throw LoadError(features_path + ": bad magic, expected HMRDATA1");
    }
    std::istringstream lines(detail::read_file(dir / "manifest"));
    std::string line;
    if (!std::getline(lines, line)) throw LoadError(manifest_path + ": empty manifest");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
        throw LoadError(manifest_path + ": header is not valid JSON");
    }
    if (detail::field<std::string>(header, "format", manifest_path) != "hammer-dataset") {
        throw LoadError(manifest_path + ": field 'format' is not hammer-dataset");
    }
    const int version = detail::field<int>(header, "version", manifest_path);
    if (version != dataset_version) {
        throw LoadError(manifest_path + ": field 'version' is " + std::to_string(version) + ", expected " +
                        std::to_string(dataset_version));
    }
    Corpus corpus;
    corpus.config = detail::config_from_json(detail::field<nlohmann::json>(header, "config", manifest_path), manifest_path);
    const auto vocab = detail::field<nlohmann::json>(header, "vocabulary", manifest_path);
    corpus.vocab = {detail::field<std::size_t>(vocab, "content", manifest_path),
                    detail::field<std::size_t>(vocab, "filler", manifest_path)};
    for (const auto& c : detail::field<nlohmann::json>(header, "concepts", manifest_path)) {
        corpus.concepts.push_back({detail::field<std::vector<double>>(c, "prototype", manifest_path),
                                   detail::field<std::vector<double>>(c, "aux_prototype", manifest_path),
                                   detail::field<std::vector<TokenId>>(c, "tokens", manifest_path)});
    }
    const auto num_videos = detail::field<std::size_t>(header, "num_videos", manifest_path);

    auto read_block = [&](std::size_t offset, std::size_t rows, std::size_t cols, const std::string& what) {
        if (offset < dataset_magic.size() || offset > features.size()) {
            throw LoadError(features_path + ": offset of " + what + " outside the file");
        }
        detail::ByteReader r(std::string_view(features).substr(offset), features_path);
        Tensor t = Tensor::matrix(rows, cols);
        for (double& v : t.data()) v = static_cast<double>(r.f32(what));
        return t;
    };
    std::size_t line_no = 1;
    while (std::getline(lines, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = manifest_path + ":" + std::to_string(line_no);
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            throw LoadError(where + ": not valid JSON");
        }
        VideoRecord video;
        video.video_id = detail::field<std::string>(rec, "video_id", where);
        const auto n = detail::field<std::size_t>(rec, "N", where);
        const auto width = detail::field<std::size_t>(rec, "visual_width", where);
        video.frames = read_block(detail::field<std::size_t>(rec, "offset", where), n, width, "frames of " + video.video_id);
        if (rec.contains("aux_offset")) {
            video.aux = read_block(detail::field<std::size_t>(rec, "aux_offset", where), n,
                                   detail::field<std::size_t>(rec, "aux_width", where), "aux of " + video.video_id);
        }
        const std::size_t index = corpus.videos.size();
        for (const auto& a : detail::field<nlohmann::json>(rec, "annotations", where)) {
            AnnotatedExample e;
            e.query_id = detail::field<std::string>(a, "query_id", where);
            e.query.tokens = detail::field<std::vector<TokenId>>(a, "tokens", where);
            e.video_id = video.video_id;
            e.video_index = index;
            e.segment = {detail::field<std::size_t>(a, "start", where), detail::field<std::size_t>(a, "end", where)};
            e.concept_id = detail::field<std::size_t>(a, "concept", where);
            e.split = parse_split(detail::field<std::string>(a, "split", where));
            if (!e.segment.valid_for(n)) {
                throw LoadError(where + ": field 'annotations' has segment (" + std::to_string(e.segment.start) + "," +
                                std::to_string(e.segment.end) + ") outside " + std::to_string(n) + " frames");
            }
            corpus.examples.push_back(std::move(e));
        }
        corpus.videos.push_back(std::move(video));
    }
    if (corpus.videos.size() != num_videos) {
        throw LoadError(manifest_path + ": field 'num_videos' says " + std::to_string(num_videos) + " but " +
                        std::to_string(corpus.videos.size()) + " records follow");
    }
    return corpus;
}

// One epoch of mini-batches over `subset` (indices into `examples`). The
// order is a seeded permutation; an example whose video is already in the
// current batch is deferred to a later batch so no batch holds a false
// negative. The last batch may be short.
inline std::vector<std::vector<std::size_t>> batch_iterator(const std::vector<AnnotatedExample>& examples,
                                                            std::vector<std::size_t> subset, std::size_t batch_size,
                                                            Rng& rng) {
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 for in-batch negatives, got " + std::to_string(batch_size));
    for (std::size_t i = subset.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(subset[i - 1], subset[j]);
    }
    std::vector<std::vector<std::size_t>> batches;
    std::vector<std::size_t> pending = std::move(subset);
    while (!pending.empty()) {
        std::vector<std::size_t> batch, rest;
        std::set<std::string> videos;
        for (std::size_t idx : pending) {
            if (batch.size() < batch_size && videos.insert(examples.at(idx).video_id).second) {
                batch.push_back(idx);
            } else {
                rest.push_back(idx);
            }
        }
        batches.push_back(std::move(batch));
        pending = std::move(rest);
    }
    return batches;
}

} // namespace hammer
