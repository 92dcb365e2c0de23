#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "hammer/metrics.hpp"
#include "hammer/rng.hpp"

using namespace hammer;

namespace {

// Record whose true video sits at `rank` (1-based) among `corpus` videos.
EvalRecord ranked_record(std::size_t rank, std::size_t corpus = 20) {
    EvalRecord r;
    r.query_id = "q" + std::to_string(rank);
    r.true_video_id = "truth";
    r.true_segment = {2, 6};
    r.corpus_size = corpus;
    for (std::size_t i = 1; i <= corpus; ++i) r.ranking.push_back(i == rank ? "truth" : "v" + std::to_string(i));
    r.video_duration_frames = 32;
    return r;
}

EvalRecord tl_record(Segment truth, Segment predicted) {
    EvalRecord r = ranked_record(1, 3);
    r.true_segment = truth;
    r.true_video_prediction = predicted;
    r.predictions.push_back({"truth", predicted, 1.0, 0.0});
    return r;
}

double set_iou(Segment a, Segment b) {
    std::set<std::size_t> fa, fb, uni;
    for (std::size_t t = a.start; t <= a.end; ++t) fa.insert(t);
    for (std::size_t t = b.start; t <= b.end; ++t) fb.insert(t);
    std::size_t inter = 0;
    for (auto t : fa) inter += fb.count(t);
    uni = fa;
    uni.insert(fb.begin(), fb.end());
    return static_cast<double>(inter) / static_cast<double>(uni.size());
}

Segment random_segment(Rng& rng, std::size_t n) {
    auto s = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 2));
    auto e = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(s) + 1, static_cast<std::int64_t>(n) - 1));
    return {s, e};
}

} // namespace

TEST(TemporalIou, HandExamples) {
    EXPECT_EQ(temporal_iou({0, 4}, {0, 4}), 1.0);
    EXPECT_EQ(temporal_iou({0, 1}, {5, 6}), 0.0);
    EXPECT_EQ(temporal_iou({2, 6}, {4, 8}), 3.0 / 7.0);
}

TEST(TemporalIou, InvalidSegmentRejected) { EXPECT_THROW(temporal_iou({5, 3}, {0, 1}), InputError); }

TEST(TemporalIou, MatchesFrameSetOracleAndIsSymmetric) {
    Rng rng(11);
    for (int i = 0; i < 300; ++i) {
        const Segment a = random_segment(rng, 40), b = random_segment(rng, 40);
        const double iou = temporal_iou(a, b);
        EXPECT_DOUBLE_EQ(iou, set_iou(a, b));
        EXPECT_EQ(iou, temporal_iou(b, a));
        EXPECT_EQ(iou == 1.0, a == b);
    }
}

TEST(RecallAtK, HandExamples) {
    std::vector<EvalRecord> recs{ranked_record(1), ranked_record(4), ranked_record(12)};
    EXPECT_DOUBLE_EQ(recall_at_k(recs, 10), 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(recall_at_k(recs, 1), 1.0 / 3.0);
    EXPECT_EQ(recall_at_k(recs, 20), 1.0);
    EXPECT_THROW(recall_at_k({}, 1), InputError);
}

TEST(MedianRank, HandExamples) {
    EXPECT_EQ(median_rank({ranked_record(1), ranked_record(3), ranked_record(5)}), 3.0);
    EXPECT_EQ(median_rank({ranked_record(1), ranked_record(2), ranked_record(3), ranked_record(10)}), 2.5);
    EXPECT_EQ(median_rank({ranked_record(1), ranked_record(1)}), 1.0);
}

TEST(MedianRank, MissingTrueVideoCountsAsWorstRank) {
    EvalRecord r = ranked_record(1, 5);
    r.ranking.erase(r.ranking.begin());
    EXPECT_TRUE(true_video_missing(r));
    EXPECT_EQ(true_rank(r), 6u);
    EXPECT_EQ(median_rank({r}), 6.0);
}

TEST(MeanIou, HandExamples) {
    EXPECT_EQ(mean_iou({tl_record({0, 4}, {0, 4}), tl_record({3, 5}, {3, 5})}), 1.0);
    EXPECT_EQ(mean_iou({tl_record({0, 1}, {5, 6})}), 0.0);
    const std::vector<EvalRecord> mixed{tl_record({0, 4}, {0, 4}), tl_record({2, 6}, {4, 8}), tl_record({0, 1}, {5, 6})};
    EXPECT_NEAR(mean_iou(mixed), (1.0 + 3.0 / 7.0) / 3.0, 1e-15);
    EXPECT_NEAR(mean_iou(mixed), 0.4762, 5e-5);
}

TEST(PrecisionAtIou, HandExamples) {
    const std::vector<EvalRecord> mixed{tl_record({0, 4}, {0, 4}), tl_record({2, 6}, {4, 8}), tl_record({0, 1}, {5, 6})};
    EXPECT_DOUBLE_EQ(precision_at_iou(mixed, 0.3), 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(precision_at_iou(mixed, 0.7), 1.0 / 3.0);
    const std::vector<EvalRecord> perfect{tl_record({0, 4}, {0, 4}), tl_record({1, 2}, {1, 2})};
    for (double tau : {0.3, 0.5, 0.7}) EXPECT_EQ(precision_at_iou(perfect, tau), 1.0);
}

TEST(MlvcRecall, HandExamples) {
    EvalRecord top = tl_record({0, 4}, {0, 4});
    EXPECT_EQ(mlvc_recall({top}, 1, 0.7), 1.0);

    EvalRecord second = ranked_record(2, 3);
    second.true_segment = {0, 4};
    second.predictions = {{"v1", {0, 4}, 2.0, 0.0}, {"truth", {0, 4}, 1.0, 0.0}};
    EXPECT_EQ(mlvc_recall({second}, 1, 0.5), 0.0);
    EXPECT_EQ(mlvc_recall({second}, 2, 0.5), 1.0);

    EvalRecord partial = tl_record({2, 6}, {4, 8});
    EXPECT_EQ(mlvc_recall({partial}, 1, 0.5), 0.0);
    EXPECT_EQ(mlvc_recall({partial}, 1, 0.3), 1.0);
}

TEST(MetricProperties, RandomizedPredictionSets) {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t corpus = static_cast<std::size_t>(rng.uniform_int(1, 30));
        const std::size_t k_loc = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(corpus)));
        std::vector<EvalRecord> recs;
        const int n = static_cast<int>(rng.uniform_int(1, 25));
        for (int q = 0; q < n; ++q) {
            EvalRecord r = ranked_record(static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(corpus))), corpus);
            r.true_segment = random_segment(rng, 24);
            r.true_video_prediction = random_segment(rng, 24);
            for (std::size_t i = 0; i < k_loc; ++i) {
                const Segment s = r.ranking[i] == r.true_video_id ? *r.true_video_prediction : random_segment(rng, 24);
                r.predictions.push_back({r.ranking[i], s, 0.0, 0.0});
            }
            recs.push_back(r);
        }
        double prev_vr = 0.0;
        for (std::size_t k = 1; k <= corpus; ++k) {
            const double vr = recall_at_k(recs, k);
            EXPECT_GE(vr, prev_vr);
            prev_vr = vr;
            double prev_tau = 1.0;
            for (double tau : {0.1, 0.3, 0.5, 0.7, 0.9}) {
                const double m = mlvc_recall(recs, k, tau);
                EXPECT_LE(m, vr);
                EXPECT_LE(m, prev_tau);
                prev_tau = m;
                if (k > 1) {
                    EXPECT_GE(m, mlvc_recall(recs, k - 1, tau));
                }
            }
        }
        EXPECT_EQ(recall_at_k(recs, corpus), 1.0);
        // Pure functions: recomputation is bit-identical.
        EXPECT_EQ(render_metric_lines(compute_report(recs)), render_metric_lines(compute_report(recs)));
    }
}

TEST(DurationBuckets, SingleBucketEqualsGlobal) {
    std::vector<EvalRecord> recs{tl_record({0, 4}, {0, 4}), tl_record({2, 6}, {4, 8})};
    recs[1].ranking = ranked_record(3, 3).ranking;
    const auto b = duration_buckets(recs, {0, 100});
    ASSERT_EQ(b.size(), 1u);
    EXPECT_EQ(*b[0].median_rank, median_rank(recs));
    EXPECT_EQ(*b[0].mean_iou, mean_iou(recs));
}

TEST(DurationBuckets, SplitsAndReportsEmptyAsAbsent) {
    EvalRecord a = tl_record({0, 4}, {0, 4});
    a.video_duration_frames = 10;
    EvalRecord b = tl_record({2, 6}, {4, 8});
    b.video_duration_frames = 50;
    b.ranking = ranked_record(3, 3).ranking;
    const auto buckets = duration_buckets({a, b}, {0, 20, 40, 60});
    ASSERT_EQ(buckets.size(), 3u);
    EXPECT_EQ(*buckets[0].median_rank, 1.0);
    EXPECT_EQ(*buckets[0].mean_iou, 1.0);
    EXPECT_EQ(buckets[1].count, 0u);
    EXPECT_FALSE(buckets[1].median_rank.has_value());
    EXPECT_EQ(*buckets[2].median_rank, 3.0);
    EXPECT_DOUBLE_EQ(*buckets[2].mean_iou, 3.0 / 7.0);
    EXPECT_EQ(buckets[2].label(), "[40,60]");
    EXPECT_THROW(duration_buckets({a}, {5, 5}), InputError);
}

TEST(Report, FourEqualWidthBucketsAndTableOneGrid) {
    Rng rng(5);
    std::vector<EvalRecord> recs;
    for (int i = 0; i < 40; ++i) {
        EvalRecord r = tl_record({1, 3}, {1, 4});
        r.video_duration_frames = static_cast<std::size_t>(rng.uniform_int(32, 128));
        recs.push_back(r);
    }
    const MetricReport rep = compute_report(recs);
    EXPECT_EQ(rep.buckets.size(), 4u);
    std::size_t covered = 0;
    for (const auto& b : rep.buckets) covered += b.count;
    EXPECT_EQ(covered, recs.size());
    for (std::size_t k : {1, 10, 100}) {
        for (const char* t : {"0.5", "0.7"}) {
            EXPECT_TRUE(rep.get("mlvc_recall@" + std::to_string(k) + "@" + t).has_value());
        }
    }
    const std::string text = render_report(rep);
    EXPECT_NE(text.find("MedRank"), std::string::npos);
    EXPECT_NE(text.find("Duration buckets"), std::string::npos);
}

TEST(Report, PerfectPredictionsGiveOnes) {
    std::vector<EvalRecord> recs{tl_record({0, 4}, {0, 4}), tl_record({3, 9}, {3, 9})};
    const MetricReport rep = compute_report(recs);
    for (const auto& l : rep.lines) {
        if (l.slice != "all") continue;
        if (l.metric_name == "vr_median_rank") {
            EXPECT_EQ(l.value, 1.0);
        } else {
            EXPECT_EQ(l.value, 1.0) << l.metric_name;
        }
    }
    EXPECT_THROW(compute_report({}), InputError);
}
