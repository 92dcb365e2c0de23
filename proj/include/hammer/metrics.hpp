#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "inference.hpp"
#include "records.hpp"

namespace hammer {

inline double temporal_iou(const Segment& a, const Segment& b) {
    for (const Segment* s : {&a, &b}) {
        if (s->end < s->start) {
            throw InputError("invalid segment (" + std::to_string(s->start) + "," + std::to_string(s->end) + ")");
        }
    }
    const std::size_t lo = std::max(a.start, b.start);
    const std::size_t hi = std::min(a.end, b.end);
    const std::size_t inter = hi >= lo ? hi - lo + 1 : 0;
    const std::size_t uni = a.length() + b.length() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

struct EvalRecord {
    std::string query_id;
    std::string true_video_id;
    Segment true_segment;
    std::vector<std::string> ranking;           // every corpus video, best first
    std::vector<ScoredCandidate> predictions;   // localized top-k, best first
    std::optional<Segment> true_video_prediction;  // decode inside the ground-truth video
    std::size_t video_duration_frames = 0;
    std::size_t corpus_size = 0;
};

// 1-based rank of the true video; corpus_size + 1 when absent.
inline std::size_t true_rank(const EvalRecord& r) {
    auto it = std::find(r.ranking.begin(), r.ranking.end(), r.true_video_id);
    if (it == r.ranking.end()) return std::max(r.corpus_size, r.ranking.size()) + 1;
    return static_cast<std::size_t>(it - r.ranking.begin()) + 1;
}

inline bool true_video_missing(const EvalRecord& r) {
    return std::find(r.ranking.begin(), r.ranking.end(), r.true_video_id) == r.ranking.end();
}

namespace detail {
inline void require_records(const std::vector<EvalRecord>& records, const char* metric) {
    if (records.empty()) throw InputError(std::string(metric) + ": no records");
}

inline const Segment& tl_prediction(const EvalRecord& r) {
    if (!r.true_video_prediction) {
        throw InputError("record '" + r.query_id + "' has no prediction inside its true video");
    }
    return *r.true_video_prediction;
}
} // namespace detail

inline double recall_at_k(const std::vector<EvalRecord>& records, std::size_t k) {
    detail::require_records(records, "recall_at_k");
    if (k == 0) throw ContractError("recall_at_k: k must be at least 1");
    std::size_t hits = 0;
    for (const auto& r : records) hits += true_rank(r) <= k;
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw InputError("median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

inline double median_rank(const std::vector<EvalRecord>& records) {
    detail::require_records(records, "median_rank");
    std::vector<double> ranks;
    for (const auto& r : records) ranks.push_back(static_cast<double>(true_rank(r)));
    return median(std::move(ranks));
}

inline double mean_iou(const std::vector<EvalRecord>& records) {
    detail::require_records(records, "mean_iou");
    double total = 0.0;
    for (const auto& r : records) total += temporal_iou(detail::tl_prediction(r), r.true_segment);
    return total / static_cast<double>(records.size());
}

inline double precision_at_iou(const std::vector<EvalRecord>& records, double tau) {
    detail::require_records(records, "precision_at_iou");
    std::size_t hits = 0;
    for (const auto& r : records) hits += temporal_iou(detail::tl_prediction(r), r.true_segment) >= tau;
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

inline double mlvc_recall(const std::vector<EvalRecord>& records, std::size_t k, double tau) {
    detail::require_records(records, "mlvc_recall");
    if (k == 0) throw ContractError("mlvc_recall: k must be at least 1");
    std::size_t hits = 0;
    for (const auto& r : records) {
        const std::size_t top = std::min(k, r.predictions.size());
        for (std::size_t i = 0; i < top; ++i) {
            const auto& c = r.predictions[i];
            if (c.video_id == r.true_video_id && temporal_iou(c.segment, r.true_segment) >= tau) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

struct DurationBucket {
    std::size_t lo = 0;
    std::size_t hi = 0;
    bool inclusive_hi = false;
    std::size_t count = 0;
    std::optional<double> median_rank;  // absent for an empty bucket
    std::optional<double> mean_iou;

    [[nodiscard]] std::string label() const {
        return "[" + std::to_string(lo) + "," + std::to_string(hi) + (inclusive_hi ? "]" : ")");
    }
};

// Buckets [e_i, e_{i+1}), the last one closed on the right.
inline std::vector<DurationBucket> duration_buckets(const std::vector<EvalRecord>& records,
                                                    const std::vector<std::size_t>& edges) {
    if (edges.size() < 2) throw InputError("duration buckets need at least two edges");
    for (std::size_t i = 1; i < edges.size(); ++i) {
        if (edges[i] <= edges[i - 1]) throw InputError("bucket edges must be strictly increasing");
    }
    std::vector<DurationBucket> out;
    for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
        DurationBucket b{edges[i], edges[i + 1], i + 2 == edges.size(), 0, {}, {}};
        std::vector<EvalRecord> subset;
        for (const auto& r : records) {
            const std::size_t d = r.video_duration_frames;
            if (d >= b.lo && (d < b.hi || (b.inclusive_hi && d == b.hi))) subset.push_back(r);
        }
        b.count = subset.size();
        if (!subset.empty()) {
            b.median_rank = median_rank(subset);
            bool have_tl = std::all_of(subset.begin(), subset.end(),
                                       [](const EvalRecord& r) { return r.true_video_prediction.has_value(); });
            if (have_tl) b.mean_iou = mean_iou(subset);
        }
        out.push_back(b);
    }
    return out;
}

// `count` equal-width buckets spanning the observed durations.
inline std::vector<std::size_t> equal_width_edges(const std::vector<EvalRecord>& records, std::size_t count) {
    if (records.empty() || count == 0) throw InputError("equal-width buckets need records and a positive count");
    std::size_t lo = records.front().video_duration_frames, hi = lo;
    for (const auto& r : records) {
        lo = std::min(lo, r.video_duration_frames);
        hi = std::max(hi, r.video_duration_frames);
    }
    if (hi - lo < count) hi = lo + count;
    std::vector<std::size_t> edges;
    for (std::size_t i = 0; i <= count; ++i) edges.push_back(lo + (hi - lo) * i / count);
    return edges;
}

struct MetricLine {
    std::string metric_name;
    std::string slice;
    double value = 0.0;
};

struct ReportOptions {
    std::vector<std::size_t> ks{1, 10, 100};
    std::vector<double> mlvc_taus{0.5, 0.7};
    std::vector<double> tl_taus{0.3, 0.5, 0.7};
    std::size_t duration_bucket_count = 4;
    std::vector<std::size_t> bucket_edges;  // overrides the equal-width default when set
};

struct MetricReport {
    std::vector<MetricLine> lines;
    std::vector<DurationBucket> buckets;
    std::size_t queries = 0;
    ReportOptions options;

    [[nodiscard]] std::optional<double> get(const std::string& name, const std::string& slice = "all") const {
        for (const auto& l : lines) {
            if (l.metric_name == name && l.slice == slice) return l.value;
        }
        return std::nullopt;
    }
};

inline std::string format_number(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string tau_label(double tau) { return format_number(tau, 1); }

inline MetricReport compute_report(const std::vector<EvalRecord>& records, const ReportOptions& options = {}) {
    if (records.empty()) throw InputError("no queries to evaluate");
    MetricReport rep;
    rep.queries = records.size();
    rep.options = options;
    auto add = [&](std::string name, double v, std::string slice = "all") {
        rep.lines.push_back({std::move(name), std::move(slice), v});
    };
    for (std::size_t k : options.ks) add("vr_recall@" + std::to_string(k), recall_at_k(records, k));
    add("vr_median_rank", median_rank(records));
    for (double t : options.tl_taus) add("tl_precision@" + tau_label(t), precision_at_iou(records, t));
    add("tl_mean_iou", mean_iou(records));
    for (std::size_t k : options.ks) {
        for (double t : options.mlvc_taus) {
            add("mlvc_recall@" + std::to_string(k) + "@" + tau_label(t), mlvc_recall(records, k, t));
        }
    }
    const auto edges =
        options.bucket_edges.empty() ? equal_width_edges(records, options.duration_bucket_count) : options.bucket_edges;
    rep.buckets = duration_buckets(records, edges);
    for (const auto& b : rep.buckets) {
        const std::string slice = "duration" + b.label();
        add("queries", static_cast<double>(b.count), slice);
        if (b.median_rank) add("vr_median_rank", *b.median_rank, slice);
        if (b.mean_iou) add("tl_mean_iou", *b.mean_iou, slice);
    }
    return rep;
}

inline std::string render_report(const MetricReport& rep) {
    std::ostringstream os;
    const auto v = [&](const std::string& name) { return format_number(*rep.get(name)); };
    os << "queries " << rep.queries << "\n\n";
    os << "VR\n";
    for (std::size_t k : rep.options.ks) os << "  R@" << k << "\t" << v("vr_recall@" + std::to_string(k)) << "\n";
    os << "  MedRank\t" << format_number(*rep.get("vr_median_rank"), 1) << "\n\n";
    os << "TL\n";
    for (double t : rep.options.tl_taus) os << "  IoU=" << tau_label(t) << "\t" << v("tl_precision@" + tau_label(t)) << "\n";
    os << "  mIoU\t" << v("tl_mean_iou") << "\n\n";
    os << "MLVC\n       ";
    for (double t : rep.options.mlvc_taus) os << "\tIoU=" << tau_label(t);
    os << "\n";
    for (std::size_t k : rep.options.ks) {
        os << "  R@" << k;
        for (double t : rep.options.mlvc_taus) os << "\t" << v("mlvc_recall@" + std::to_string(k) + "@" + tau_label(t));
        os << "\n";
    }
    os << "\nDuration buckets (frames)\n  bucket\tqueries\tMedRank\tmIoU\n";
    for (const auto& b : rep.buckets) {
        os << "  " << b.label() << "\t" << b.count << "\t"
           << (b.median_rank ? format_number(*b.median_rank, 1) : std::string("-")) << "\t"
           << (b.mean_iou ? format_number(*b.mean_iou) : std::string("-")) << "\n";
    }
    return os.str();
}

inline std::string render_metric_lines(const MetricReport& rep) {
    std::string out;
    for (const auto& l : rep.lines) {
        nlohmann::ordered_json j;
        j["metric_name"] = l.metric_name;
        j["slice"] = l.slice;
        j["value"] = l.value;
        out += j.dump() + "\n";
    }
    return out;
}

} // namespace hammer
