#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "encoders.hpp"
#include "errors.hpp"
#include "heads.hpp"
#include "records.hpp"

namespace hammer {

// Runs task(i) for i in [0, n) on up to `threads` workers. Results must be
// written to per-index slots so the outcome does not depend on scheduling.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& task) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) task(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
            try {
                task(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    const unsigned count = static_cast<unsigned>(std::min<std::size_t>(threads, n));
    for (unsigned t = 0; t < count; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

enum class DecodeMode { joint, greedy_repair };

struct Localization {
    Segment segment;
    double pair_probability = 0.0;
    double pair_score = 0.0;  // log p_start + log p_end
};

inline double log_or_minus_inf(double p) {
    return p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
}

// Best (s, e) with e > s under p_start[s] * p_end[e]; ties go to the smallest
// s, then the smallest e. One pass over s with a suffix argmax of p_end.
inline Localization localize(std::span<const double> p_start, std::span<const double> p_end,
                             DecodeMode mode = DecodeMode::joint) {
    const std::size_t n = p_start.size();
    if (n < 2) throw InputError("localize needs at least 2 frames, got " + std::to_string(n));
    if (p_end.size() != n) throw ShapeError("start and end distributions differ in length");

    // suffix[i] = smallest index of the maximum of p_end over [i, n).
    std::vector<std::size_t> suffix(n);
    suffix[n - 1] = n - 1;
    for (std::size_t i = n - 1; i-- > 0;) {
        suffix[i] = p_end[i] >= p_end[suffix[i + 1]] ? i : suffix[i + 1];
    }
    auto best_end = [&](std::size_t s) {
        const std::size_t e = suffix[s + 1];
        // A zero product ties with every end, so the smallest one wins.
        return p_start[s] * p_end[e] == 0.0 ? s + 1 : e;
    };

    Segment best{0, 1};
    double best_p = -1.0;
    if (mode == DecodeMode::greedy_repair) {
        std::size_t s = 0;
        for (std::size_t i = 1; i + 1 < n; ++i) {
            if (p_start[i] > p_start[s]) s = i;
        }
        best = {s, best_end(s)};
        best_p = p_start[best.start] * p_end[best.end];
    } else {
        for (std::size_t s = 0; s + 1 < n; ++s) {
            const std::size_t e = best_end(s);
            const double p = p_start[s] * p_end[e];
            if (p > best_p) {
                best_p = p;
                best = {s, e};
            }
        }
    }
    return {best, best_p, log_or_minus_inf(p_start[best.start]) + log_or_minus_inf(p_end[best.end])};
}

struct ScoredCandidate {
    std::string video_id;
    Segment segment;
    double video_score = 0.0;
    double pair_score = 0.0;
};

struct RankedVideo {
    std::size_t index = 0;  // position in the corpus
    std::string video_id;
    double score = 0.0;
};

struct InferenceOptions {
    DecodeMode decode = DecodeMode::joint;
    unsigned threads = 1;
};

// Descending score; ties by ascending video id.
inline void sort_ranking(std::vector<RankedVideo>& ranking) {
    std::stable_sort(ranking.begin(), ranking.end(), [](const RankedVideo& a, const RankedVideo& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.video_id < b.video_id;
    });
}

// One retrieval-mode encoder pass per video.
inline std::vector<RankedVideo> rank_corpus(const HammerModel& model, const QueryRecord& query,
                                            const std::vector<VideoRecord>& corpus, const InferenceOptions& options = {}) {
    if (corpus.empty()) throw InputError("cannot rank an empty corpus");
    model.validate_query(query);
    std::vector<RankedVideo> ranking(corpus.size());
    const unsigned workers = std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(corpus.size())));
    // Each worker encodes the query once and strides over the corpus.
    parallel_for(workers, workers, [&](std::size_t w) {
        Graph g(false);
        const ForwardMode eval;
        const QueryEncoding q = model.encode_query(g, query, eval);
        const std::size_t mark = g.size();
        for (std::size_t i = w; i < corpus.size(); i += workers) {
            const VideoEncoding v = model.encode_video(g, corpus[i], eval);
            const EncoderOutputs out = model.encode_pair(g, v, q, eval, OutputNeeds::retrieval);
            ranking[i] = {i, corpus[i].video_id, vr_score(model, g, out).item()};
            g.truncate(mark);
        }
    });
    sort_ranking(ranking);
    return ranking;
}

// Full encoder pass and boundary decode for one (video, query) pair.
inline Localization localize(const HammerModel& model, const QueryRecord& query, const VideoRecord& video,
                             DecodeMode mode = DecodeMode::joint, double* video_score = nullptr) {
    Graph g(false);
    const ForwardMode eval;
    const EncoderOutputs out = model.encode(g, video, query, eval, OutputNeeds::full);
    if (video_score != nullptr) *video_score = vr_score(model, g, out).item();
    const BoundaryDistributions d = tl_boundary_distributions(model, g, out);
    return localize(d.start, d.end, mode);
}

struct RetrievalResult {
    std::vector<RankedVideo> ranking;
    std::vector<ScoredCandidate> candidates;  // in video-rank order
};

// Two-stage inference: rank every video, then localize in the top k.
inline RetrievalResult mlvc_retrieve(const HammerModel& model, const QueryRecord& query,
                                     const std::vector<VideoRecord>& corpus, std::size_t k,
                                     const InferenceOptions& options = {}) {
    if (k == 0) throw ContractError("k must be at least 1");
    RetrievalResult r;
    r.ranking = rank_corpus(model, query, corpus, options);
    const std::size_t top = std::min(k, r.ranking.size());
    r.candidates.resize(top);
    parallel_for(top, options.threads, [&](std::size_t i) {
        const RankedVideo& rv = r.ranking[i];
        const Localization loc = localize(model, query, corpus[rv.index], options.decode);
        r.candidates[i] = {rv.video_id, loc.segment, rv.score, loc.pair_score};
    });
    return r;
}

} // namespace hammer
