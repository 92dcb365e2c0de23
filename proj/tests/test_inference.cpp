#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "hammer/inference.hpp"
#include "hammer/rng.hpp"

using namespace hammer;

namespace {

EncoderConfig micro_config(std::uint64_t seed = 1) {
    EncoderConfig c;
    c.hidden_width = 8;
    c.attention_heads = 2;
    c.text_layers = 1;
    c.visual_layers = 1;
    c.cross_modal_layers = 1;
    c.clip_length = 3;
    c.max_video_length = 16;
    c.max_query_length = 6;
    c.visual_width = 4;
    c.vocabulary_size = 12;
    c.dropout = 0.0;
    c.seed = seed;
    return c;
}

VideoRecord random_video(Rng& rng, const std::string& id, std::size_t frames, std::size_t width) {
    VideoRecord v{id, Tensor::matrix(frames, width), std::nullopt};
    for (double& x : v.frames.data()) x = rng.normal();
    return v;
}

std::vector<VideoRecord> random_corpus(Rng& rng, std::size_t n, std::size_t width) {
    std::vector<VideoRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        char id[16];
        std::snprintf(id, sizeof id, "v%03zu", i);
        out.push_back(random_video(rng, id, static_cast<std::size_t>(rng.uniform_int(2, 16)), width));
    }
    return out;
}

// Exhaustive O(N^2) search in (s, e) lexicographic order; strict improvement
// keeps the smallest s, then the smallest e.
Segment brute_force_decode(const std::vector<double>& ps, const std::vector<double>& pe) {
    Segment best{0, 1};
    double best_p = -1.0;
    for (std::size_t s = 0; s < ps.size(); ++s) {
        for (std::size_t e = s + 1; e < pe.size(); ++e) {
            if (ps[s] * pe[e] > best_p) {
                best_p = ps[s] * pe[e];
                best = {s, e};
            }
        }
    }
    return best;
}

std::vector<double> random_distribution(Rng& rng, std::size_t n, bool ties) {
    std::vector<double> p(n);
    double total = 0.0;
    for (double& x : p) {
        x = ties ? static_cast<double>(rng.uniform_int(0, 3)) : rng.uniform();
        total += x;
    }
    if (total == 0.0) {
        p.assign(n, 1.0 / static_cast<double>(n));
        return p;
    }
    for (double& x : p) x /= total;
    return p;
}

} // namespace

TEST(Localize, HandExample) {
    const Localization l = localize(std::vector<double>{0.1, 0.6, 0.3}, std::vector<double>{0.7, 0.2, 0.1});
    EXPECT_EQ(l.segment, (Segment{1, 2}));
    EXPECT_NEAR(l.pair_probability, 0.06, 1e-15);
    EXPECT_NEAR(l.pair_score, std::log(0.6) + std::log(0.1), 1e-12);
}

TEST(Localize, PointMassesAndUniformTieBreak) {
    std::vector<double> ps(10, 0.0), pe(10, 0.0);
    ps[2] = 1.0;
    pe[7] = 1.0;
    EXPECT_EQ(localize(ps, pe).segment, (Segment{2, 7}));
    const std::vector<double> u(4, 0.25);
    EXPECT_EQ(localize(u, u).segment, (Segment{0, 1}));
}

TEST(Localize, RejectsTooShortOrMismatched) {
    EXPECT_THROW(localize(std::vector<double>{1.0}, std::vector<double>{1.0}), InputError);
    EXPECT_THROW(localize(std::vector<double>{0.5, 0.5}, std::vector<double>{1.0, 0.0, 0.0}), ShapeError);
}

TEST(Localize, MatchesBruteForceIncludingTies) {
    Rng rng(99);
    for (int i = 0; i < 400; ++i) {
        const auto n = static_cast<std::size_t>(rng.uniform_int(2, 64));
        const bool ties = i % 2 == 0;
        const auto ps = random_distribution(rng, n, ties), pe = random_distribution(rng, n, ties);
        const Localization l = localize(ps, pe);
        EXPECT_EQ(l.segment, brute_force_decode(ps, pe)) << "case " << i;
        EXPECT_GT(l.segment.end, l.segment.start);
    }
}

TEST(Localize, GreedyRepairTakesArgmaxStartThenBestLaterEnd) {
    const std::vector<double> ps{0.1, 0.2, 0.6, 0.1}, pe{0.5, 0.3, 0.1, 0.1};
    const Localization g = localize(ps, pe, DecodeMode::greedy_repair);
    EXPECT_EQ(g.segment, (Segment{2, 3}));
    const Localization j = localize(ps, pe);
    EXPECT_GE(j.pair_probability, g.pair_probability);
}

TEST(Ranking, SortsByScoreThenId) {
    std::vector<RankedVideo> r{{0, "a", 0.3}, {1, "b", 0.9}, {2, "c", 0.1}};
    sort_ranking(r);
    EXPECT_EQ(r[0].video_id, "b");
    EXPECT_EQ(r[1].video_id, "a");
    EXPECT_EQ(r[2].video_id, "c");
    std::vector<RankedVideo> tied{{0, "z", 1.0}, {1, "m", 1.0}, {2, "a", 1.0}};
    sort_ranking(tied);
    EXPECT_EQ(tied[0].video_id, "a");
    EXPECT_EQ(tied[2].video_id, "z");
}

TEST(Ranking, MatchesBruteForceScoresAndCountsOnePassPerVideo) {
    const HammerModel model(micro_config(3));
    Rng rng(4);
    const auto corpus = random_corpus(rng, 50, 4);
    const QueryRecord q{{3, 5, 7}, {}};
    model.reset_encoder_invocations();
    const auto ranking = rank_corpus(model, q, corpus);
    EXPECT_EQ(model.encoder_invocations(), corpus.size());

    std::vector<std::pair<double, std::string>> oracle;
    for (const auto& v : corpus) {
        Graph g(false);
        oracle.push_back({vr_score(model, g, model.encode(g, v, q, {})).item(), v.video_id});
    }
    std::sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    ASSERT_EQ(ranking.size(), oracle.size());
    for (std::size_t i = 0; i < oracle.size(); ++i) {
        EXPECT_EQ(ranking[i].video_id, oracle[i].second);
        EXPECT_EQ(ranking[i].score, oracle[i].first);
    }
    EXPECT_THROW(rank_corpus(model, q, {}), InputError);
}

TEST(Ranking, ThreadedEqualsSequential) {
    const HammerModel model(micro_config(8));
    Rng rng(8);
    const auto corpus = random_corpus(rng, 17, 4);
    const QueryRecord q{{4, 4, 9, 10}, {}};
    const auto seq = mlvc_retrieve(model, q, corpus, 5, {DecodeMode::joint, 1});
    const auto par = mlvc_retrieve(model, q, corpus, 5, {DecodeMode::joint, 4});
    ASSERT_EQ(seq.ranking.size(), par.ranking.size());
    for (std::size_t i = 0; i < seq.ranking.size(); ++i) {
        EXPECT_EQ(seq.ranking[i].video_id, par.ranking[i].video_id);
        EXPECT_EQ(seq.ranking[i].score, par.ranking[i].score);
    }
    for (std::size_t i = 0; i < seq.candidates.size(); ++i) {
        EXPECT_EQ(seq.candidates[i].segment, par.candidates[i].segment);
        EXPECT_EQ(seq.candidates[i].pair_score, par.candidates[i].pair_score);
    }
}

TEST(MlvcRetrieve, SingleVideoAndFullCoverage) {
    const HammerModel model(micro_config(5));
    Rng rng(6);
    const QueryRecord q{{3, 4}, {}};
    const std::vector<VideoRecord> one{random_video(rng, "only", 7, 4)};
    const auto r1 = mlvc_retrieve(model, q, one, 1);
    ASSERT_EQ(r1.candidates.size(), 1u);
    EXPECT_EQ(r1.candidates[0].video_id, "only");
    EXPECT_GT(r1.candidates[0].segment.end, r1.candidates[0].segment.start);

    const auto corpus = random_corpus(rng, 6, 4);
    model.reset_encoder_invocations();
    const auto all = mlvc_retrieve(model, q, corpus, 100);
    EXPECT_EQ(all.candidates.size(), corpus.size());
    EXPECT_EQ(model.encoder_invocations(), corpus.size() + corpus.size());
    EXPECT_THROW(mlvc_retrieve(model, q, corpus, 0), ContractError);
}

TEST(MlvcRetrieve, AgreesWithExhaustiveLocalization) {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        const HammerModel model(micro_config(seed));
        Rng rng(seed);
        const auto corpus = random_corpus(rng, 20, 4);
        const QueryRecord q{{3, static_cast<TokenId>(3 + seed % 8), 11}, {}};
        model.reset_encoder_invocations();
        const auto two_stage = mlvc_retrieve(model, q, corpus, 5);
        EXPECT_EQ(model.encoder_invocations(), corpus.size() + 5);

        std::vector<ScoredCandidate> exhaustive;
        for (const auto& v : corpus) {
            double score = 0.0;
            const Localization l = localize(model, q, v, DecodeMode::joint, &score);
            exhaustive.push_back({v.video_id, l.segment, score, l.pair_score});
        }
        std::sort(exhaustive.begin(), exhaustive.end(), [](const auto& a, const auto& b) {
            return a.video_score != b.video_score ? a.video_score > b.video_score : a.video_id < b.video_id;
        });
        ASSERT_EQ(two_stage.candidates.size(), 5u);
        for (std::size_t i = 0; i < 5; ++i) {
            EXPECT_EQ(two_stage.candidates[i].video_id, exhaustive[i].video_id);
            EXPECT_EQ(two_stage.candidates[i].segment, exhaustive[i].segment);
            EXPECT_EQ(two_stage.candidates[i].video_score, exhaustive[i].video_score);
        }
    }
}

TEST(MlvcRetrieve, FlatModelRanksAndLocalizes) {
    EncoderConfig c = micro_config(21);
    c.architecture = Architecture::flat;
    const HammerModel model(c);
    Rng rng(21);
    const auto corpus = random_corpus(rng, 8, 4);
    model.reset_encoder_invocations();
    const auto r = mlvc_retrieve(model, {{5, 6}, {}}, corpus, 3);
    EXPECT_EQ(r.candidates.size(), 3u);
    EXPECT_EQ(model.encoder_invocations(), corpus.size() + 3);
}
