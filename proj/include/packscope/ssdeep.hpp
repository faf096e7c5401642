#pragma once

#include "packscope/common.hpp"

#include <optional>

namespace packscope::fuzzy {

// Context-triggered piecewise hash. Rendered form is "block_size:sig1:sig2"
// where sig1 has up to 64 chars at block_size and sig2 up to 32 chars at
// twice the block size, both over the base64 alphabet.
struct FuzzyDigest {
    uint32_t block_size = 0;
    std::string sig1;
    std::string sig2;

    std::string to_string() const;
    static std::optional<FuzzyDigest> parse(std::string_view text);
};

struct SsdeepResult {
    FuzzyDigest digest;
    // set when the input is below the recommended minimum (4096 bytes); the
    // digest is still usable but matches are low-confidence
    bool low_confidence = false;
};

SsdeepResult ssdeep_hash(ByteView data);  // throws EmptyInput

// Similarity score 0..100; 0 when the block sizes are not within one
// doubling of each other.
int ssdeep_compare(const FuzzyDigest& a, const FuzzyDigest& b);
int ssdeep_compare(std::string_view a, std::string_view b);

}  // namespace packscope::fuzzy
