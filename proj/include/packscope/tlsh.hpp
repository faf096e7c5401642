#pragma once

#include "packscope/common.hpp"

#include <array>
#include <optional>

namespace packscope::fuzzy {

// Locality-sensitive hash over a 5-byte sliding window feeding 128 effective
// buckets (1-byte checksum variant). Computable only for inputs of at least
// 50 bytes with enough byte diversity.
struct TlshDigest {
    uint8_t checksum = 0;
    uint8_t log_length = 0;
    uint8_t q1_ratio = 0;  // 4 bits
    uint8_t q2_ratio = 0;  // 4 bits
    std::array<uint8_t, 32> body{};

    // 70 hex chars: checksum, log_length, quartile-ratio byte, body
    std::string hex() const;
    // canonical rendering with the "T1" version prefix (72 chars)
    std::string to_string() const;
    static std::optional<TlshDigest> parse(std::string_view text);
};

TlshDigest tlsh_hash(ByteView data);  // throws InputTooShort, InsufficientVariance

// Distance including the length component; 0 for identical digests.
int tlsh_distance(const TlshDigest& a, const TlshDigest& b);

}  // namespace packscope::fuzzy
