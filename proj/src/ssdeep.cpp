#include "packscope/ssdeep.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cstring>

namespace packscope::fuzzy {

namespace {

constexpr uint32_t kRollingWindow = 7;
constexpr uint32_t kMinBlockSize = 3;
constexpr uint32_t kSpamSumLength = 64;
constexpr uint32_t kNumBlockhashes = 31;
constexpr uint32_t kHashPrime = 0x01000193;
constexpr uint32_t kHashInit = 0x28021967;

constexpr char kBase64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

struct RollState {
    std::array<uint8_t, kRollingWindow> window{};
    uint32_t h1 = 0, h2 = 0, h3 = 0;
    uint32_t n = 0;

    void step(uint8_t c) {
        h2 -= h1;
        h2 += kRollingWindow * c;
        h1 += c;
        h1 -= window[n % kRollingWindow];
        window[n % kRollingWindow] = c;
        n++;
        h3 <<= 5;
        h3 ^= c;
    }
    uint32_t sum() const { return h1 + h2 + h3; }
};

struct BlockHash {
    uint32_t h = 0;
    uint32_t half_h = 0;
    std::array<char, kSpamSumLength> digest{};
    char half_digest = 0;
    uint32_t d_len = 0;

    void feed(uint8_t c) {
        h = h * kHashPrime ^ c;
        half_h = half_h * kHashPrime ^ c;
    }
    void reset(bool init) {
        if (!init) d_len++;
        digest[d_len] = 0;
        h = kHashInit;
        if (d_len < kSpamSumLength / 2) {
            half_h = kHashInit;
            half_digest = 0;
        }
    }
};

struct Engine {
    std::array<BlockHash, kNumBlockhashes> bh{};
    uint32_t bh_start = 0;
    uint32_t bh_end = 1;
    uint64_t total_size = 0;
    RollState roll;

    Engine() { bh[0].reset(true); }

    void try_fork() {
        if (bh_end < kNumBlockhashes) {
            bh[bh_end].h = bh[bh_end - 1].h;
            bh[bh_end].half_h = bh[bh_end - 1].half_h;
            bh[bh_end].digest[0] = 0;
            bh[bh_end].half_digest = 0;
            bh[bh_end].d_len = 0;
            bh_end++;
        }
    }

    void try_reduce() {
        if (bh_end - bh_start < 2) return;
        if (static_cast<uint64_t>(kMinBlockSize << bh_start) * kSpamSumLength >= total_size)
            return;
        if (bh[bh_start + 1].d_len < kSpamSumLength / 2) return;
        bh_start++;
    }

    void step(uint8_t c) {
        roll.step(c);
        const uint32_t h = roll.sum();
        for (uint32_t i = bh_start; i < bh_end; ++i) bh[i].feed(c);

        for (uint32_t j = bh_start; j < bh_end; ++j) {
            if (h % (kMinBlockSize << j) != (kMinBlockSize << j) - 1) break;
            if (bh[j].d_len == 0) try_fork();
            bh[j].digest[bh[j].d_len] = kBase64[bh[j].h % 64];
            bh[j].half_digest = kBase64[bh[j].half_h % 64];
            if (bh[j].d_len < kSpamSumLength - 1) {
                bh[j].reset(false);
            } else {
                try_reduce();
            }
        }
    }

    void update(ByteView data) {
        total_size += data.size();
        for (uint8_t c : data) step(c);
    }

    FuzzyDigest digest() const {
        FuzzyDigest out;
        uint32_t bi = bh_start;
        const uint32_t h = roll.sum();

        while (static_cast<uint64_t>(kMinBlockSize << bi) * kSpamSumLength < total_size) {
            bi++;
            if (bi >= kNumBlockhashes)
                throw UnparseableInput("input too large for spamsum block sizes");
        }
        while (bi >= bh_end) bi--;
        while (bi > bh_start && bh[bi].d_len < kSpamSumLength / 2) bi--;

        out.block_size = kMinBlockSize << bi;
        out.sig1.assign(bh[bi].digest.data(), bh[bi].d_len);
        if (h != 0) {
            out.sig1.push_back(kBase64[bh[bi].h % 64]);
        } else if (bh[bi].digest[bh[bi].d_len] != 0) {
            out.sig1.push_back(bh[bi].digest[bh[bi].d_len]);
        }

        if (bi < bh_end - 1) {
            uint32_t i = bh[bi + 1].d_len;
            if (i > kSpamSumLength / 2 - 1) i = kSpamSumLength / 2 - 1;
            out.sig2.assign(bh[bi + 1].digest.data(), i);
            if (h != 0) {
                out.sig2.push_back(kBase64[bh[bi + 1].half_h % 64]);
            } else if (bh[bi + 1].half_digest != 0) {
                out.sig2.push_back(bh[bi + 1].half_digest);
            }
        } else if (h != 0) {
            out.sig2.push_back(kBase64[bh[bi].h % 64]);
        }
        return out;
    }
};

// Levenshtein with substitution cost 2, the spamsum scoring distance.
uint32_t edit_distance(std::string_view a, std::string_view b) {
    std::array<uint32_t, kSpamSumLength + 1> row_prev{}, row_cur{};
    for (size_t j = 0; j <= b.size(); ++j) row_prev[j] = static_cast<uint32_t>(j);
    for (size_t i = 0; i < a.size(); ++i) {
        row_cur[0] = static_cast<uint32_t>(i) + 1;
        for (size_t j = 0; j < b.size(); ++j) {
            const uint32_t ins = row_prev[j + 1] + 1;
            const uint32_t del = row_cur[j] + 1;
            const uint32_t rep = row_prev[j] + (a[i] == b[j] ? 0 : 2);
            row_cur[j + 1] = std::min({ins, del, rep});
        }
        std::swap(row_prev, row_cur);
    }
    return row_prev[b.size()];
}

bool has_common_substring(std::string_view a, std::string_view b) {
    if (a.size() < kRollingWindow || b.size() < kRollingWindow) return false;
    for (size_t i = 0; i + kRollingWindow <= a.size(); ++i) {
        for (size_t j = 0; j + kRollingWindow <= b.size(); ++j) {
            if (std::memcmp(a.data() + i, b.data() + j, kRollingWindow) == 0) return true;
        }
    }
    return false;
}

// Collapse runs of more than three identical characters; long runs carry
// almost no information and inflate match scores.
std::string eliminate_sequences(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (size_t i = 0; i < s.size(); ++i) {
        if (i >= 3 && s[i] == s[i - 1] && s[i] == s[i - 2] && s[i] == s[i - 3]) continue;
        out.push_back(s[i]);
    }
    return out;
}

uint32_t score_strings(std::string_view s1, std::string_view s2, uint32_t block_size) {
    if (s1.size() > kSpamSumLength || s2.size() > kSpamSumLength) return 0;
    if (!has_common_substring(s1, s2)) return 0;

    uint32_t score = edit_distance(s1, s2);
    score = (score * kSpamSumLength) / static_cast<uint32_t>(s1.size() + s2.size());
    score = (100 * score) / kSpamSumLength;
    if (score >= 100) return 0;
    score = 100 - score;

    if (block_size >= (99 + kRollingWindow) / kRollingWindow * kMinBlockSize) return score;
    const uint32_t cap =
        block_size / kMinBlockSize * static_cast<uint32_t>(std::min(s1.size(), s2.size()));
    return std::min(score, cap);
}

}  // namespace

std::string FuzzyDigest::to_string() const {
    return std::to_string(block_size) + ":" + sig1 + ":" + sig2;
}

std::optional<FuzzyDigest> FuzzyDigest::parse(std::string_view text) {
    const size_t c1 = text.find(':');
    if (c1 == std::string_view::npos) return std::nullopt;
    const size_t c2 = text.find(':', c1 + 1);
    if (c2 == std::string_view::npos) return std::nullopt;
    FuzzyDigest d;
    const auto bs = text.substr(0, c1);
    auto [ptr, ec] = std::from_chars(bs.data(), bs.data() + bs.size(), d.block_size);
    if (ec != std::errc() || ptr != bs.data() + bs.size()) return std::nullopt;
    d.sig1 = std::string(text.substr(c1 + 1, c2 - c1 - 1));
    std::string_view rest = text.substr(c2 + 1);
    // a trailing ",filename" annotation is allowed, as emitted by common tools
    const size_t comma = rest.find(',');
    d.sig2 = std::string(rest.substr(0, comma));
    return d;
}

SsdeepResult ssdeep_hash(ByteView data) {
    if (data.empty()) throw EmptyInput("ssdeep of empty input");
    Engine e;
    e.update(data);
    SsdeepResult r;
    r.digest = e.digest();
    r.low_confidence = data.size() < 4096;
    return r;
}

int ssdeep_compare(const FuzzyDigest& a, const FuzzyDigest& b) {
    const uint32_t bs1 = a.block_size;
    const uint32_t bs2 = b.block_size;
    if (bs1 != bs2 && (bs1 > UINT32_MAX / 2 || bs1 * 2 != bs2) &&
        (bs1 % 2 == 1 || bs1 / 2 != bs2))
        return 0;

    const std::string a1 = eliminate_sequences(a.sig1);
    const std::string a2 = eliminate_sequences(a.sig2);
    const std::string b1 = eliminate_sequences(b.sig1);
    const std::string b2 = eliminate_sequences(b.sig2);

    // identical first signatures match perfectly regardless of length
    if (bs1 == bs2 && a1 == b1) return 100;

    if (bs1 == bs2) {
        const uint32_t s1 = score_strings(a1, b1, bs1);
        const uint32_t s2 = score_strings(a2, b2, bs1 * 2);
        return static_cast<int>(std::max(s1, s2));
    }
    if (bs1 == bs2 * 2) return static_cast<int>(score_strings(a1, b2, bs1));
    return static_cast<int>(score_strings(a2, b1, bs2));
}

int ssdeep_compare(std::string_view a, std::string_view b) {
    auto da = FuzzyDigest::parse(a);
    auto db = FuzzyDigest::parse(b);
    if (!da || !db) throw UnparseableInput("malformed fuzzy digest");
    return ssdeep_compare(*da, *db);
}

}  // namespace packscope::fuzzy
