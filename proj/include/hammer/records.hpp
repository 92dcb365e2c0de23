#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace hammer {

using TokenId = std::uint32_t;

// Reserved vocabulary slots. Content and filler ranges follow.
namespace special_tokens {
inline constexpr TokenId pad = 0;
inline constexpr TokenId tcls = 1;
inline constexpr TokenId mask = 2;
inline constexpr TokenId first_regular = 3;
} // namespace special_tokens

// Inclusive [start, end] frame range of a moment.
struct Segment {
    std::size_t start = 0;
    std::size_t end = 0;

    bool operator==(const Segment&) const = default;

    [[nodiscard]] std::size_t length() const { return end - start + 1; }

    // Strict start < end inside a video of `frames` frames.
    [[nodiscard]] bool valid_for(std::size_t frames) const { return start < end && end < frames; }

    void require_valid(std::size_t frames) const {
        if (!valid_for(frames)) {
            throw AnnotationError("segment (" + std::to_string(start) + "," + std::to_string(end) +
                                  ") is not a strict start<end range inside " + std::to_string(frames) + " frames");
        }
    }
};

struct VideoRecord {
    std::string video_id;
    Tensor frames;              // N x D_v
    std::optional<Tensor> aux;  // N x D_a, frame-aligned

    [[nodiscard]] std::size_t frame_count() const { return frames.empty() ? 0 : frames.rows(); }

    bool operator==(const VideoRecord&) const = default;
};

struct QueryRecord {
    std::vector<TokenId> tokens;
    std::vector<std::uint8_t> mask;  // empty, or one flag per token (1 = masked)

    bool operator==(const QueryRecord&) const = default;
};

} // namespace hammer
