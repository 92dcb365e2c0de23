#pragma once

// Small fixed configurations shared by the unit tests and the acceptance run.

#include "hammer/data.hpp"
#include "hammer/encoders.hpp"
#include "hammer/training.hpp"

namespace hammer::fixture {

// d=8, 2 heads, 6 frames in clips of 3, 12-token vocabulary.
inline CorpusConfig micro_corpus(std::uint64_t seed) {
    CorpusConfig c;
    c.num_videos = 4;
    c.min_frames = c.max_frames = 6;
    c.segments_per_video = 2;
    c.queries_per_video = 1;
    c.concepts = 4;
    c.visual_width = 4;
    c.content_tokens = 6;
    c.filler_tokens = 3;
    c.min_template_tokens = c.max_template_tokens = 2;
    c.min_filler = c.max_filler = 1;
    c.heldout_fraction = 0.0;
    c.seed = seed;
    return c;
}

inline EncoderConfig micro_encoder(const Corpus& corpus, std::uint64_t seed) {
    EncoderConfig c;
    c.hidden_width = 8;
    c.attention_heads = 2;
    c.text_layers = 1;
    c.clip_length = 3;
    c.max_video_length = 6;
    c.visual_width = corpus.config.visual_width;
    c.vocabulary_size = corpus.vocab.size();
    c.max_query_length = corpus.config.max_query_tokens() + 1;
    c.dropout = 0.0;
    c.seed = seed;
    return c;
}

// Full multi-task loss on the first two examples, with a fixed mask draw so
// repeated evaluations see the same masked positions.
inline std::function<Var(Graph&)> micro_loss(const HammerModel& model, const Corpus& corpus, std::uint64_t mask_seed,
                                             double mask_rate = 0.5) {
    return [&model, &corpus, mask_seed, mask_rate](Graph& g) {
        Rng mask_rng(mask_seed);
        LossOptions opt;
        opt.mask_rate = mask_rate;
        return batch_loss(model, g, corpus, {0, 1}, opt, ForwardMode{}, mask_rng).total;
    };
}

} // namespace hammer::fixture
