#include "packscope/tlsh.hpp"

#include <algorithm>
#include <cctype>

namespace packscope::fuzzy {

namespace {

constexpr size_t kBuckets = 256;
constexpr size_t kEffBuckets = 128;
constexpr size_t kCodeSize = 32;
constexpr size_t kMinLength = 50;

// Pearson's sample random table
constexpr uint8_t kVTable[256] = {
    1,   87,  49,  12,  176, 178, 102, 166, 121, 193, 6,   84,  249, 230, 44,  163,
    14,  197, 213, 181, 161, 85,  218, 80,  64,  239, 24,  226, 236, 142, 38,  200,
    110, 177, 104, 103, 141, 253, 255, 50,  77,  101, 81,  18,  45,  96,  31,  222,
    25,  107, 190, 70,  86,  237, 240, 34,  72,  242, 20,  214, 244, 227, 149, 235,
    97,  234, 57,  22,  60,  250, 82,  175, 208, 5,   127, 199, 111, 62,  135, 248,
    174, 169, 211, 58,  66,  154, 106, 195, 245, 171, 17,  187, 182, 179, 0,   243,
    132, 56,  148, 75,  128, 133, 158, 100, 130, 126, 91,  13,  153, 246, 216, 219,
    119, 68,  223, 78,  83,  88,  201, 99,  122, 11,  92,  32,  136, 114, 52,  10,
    138, 30,  48,  183, 156, 35,  61,  26,  143, 74,  251, 94,  129, 162, 63,  152,
    170, 7,   115, 167, 241, 206, 3,   150, 55,  59,  151, 220, 90,  53,  23,  131,
    125, 173, 15,  238, 79,  95,  89,  16,  105, 137, 225, 224, 217, 160, 37,  123,
    118, 73,  2,   157, 46,  116, 9,   145, 134, 228, 207, 212, 202, 215, 69,  229,
    27,  188, 67,  124, 168, 252, 42,  4,   29,  108, 21,  247, 19,  205, 39,  203,
    233, 40,  186, 147, 198, 192, 155, 33,  164, 191, 98,  204, 165, 180, 117, 76,
    140, 36,  210, 172, 41,  54,  159, 8,   185, 232, 113, 196, 231, 47,  146, 120,
    51,  65,  28,  144, 254, 221, 93,  189, 194, 139, 112, 43,  71,  109, 184, 209,
};

// salt values below are already passed through the table once
inline uint8_t b_mapping(uint8_t mapped_salt, uint8_t i, uint8_t j, uint8_t k) {
    return kVTable[kVTable[kVTable[mapped_salt ^ i] ^ j] ^ k];
}

// log-length capture thresholds (geometric bands)
constexpr uint32_t kTopval[170] = {
    1,          2,          3,          5,          7,          11,         17,
    25,         38,         57,         86,         129,        194,        291,
    437,        656,        854,        1110,       1443,       1876,       2439,
    3171,       3475,       3823,       4205,       4626,       5088,       5597,
    6157,       6772,       7450,       8195,       9014,       9916,       10907,
    11998,      13198,      14518,      15970,      17567,      19323,      21256,
    23382,      25720,      28292,      31121,      34233,      37656,      41422,
    45564,      50121,      55133,      60646,      66711,      73382,      80721,
    88793,      97672,      107439,     118183,     130002,     143002,     157302,
    173032,     190335,     209369,     230306,     253337,     278670,     306538,
    337191,     370911,     408002,     448802,     493682,     543050,     597356,
    657091,     722800,     795081,     874589,     962048,     1058252,    1164078,
    1280486,    1408534,    1549388,    1704327,    1874759,    2062236,    2268459,
    2495305,    2744836,    3019320,    3321252,    3653374,    4018711,    4420582,
    4862641,    5348905,    5883796,    6472176,    7119394,    7831333,    8614467,
    9475909,    10423501,   11465851,   12612437,   13873681,   15261050,   16787154,
    18465870,   20312458,   22343706,   24578077,   27035886,   29739474,   32713425,
    35984770,   39583245,   43541573,   47895730,   52685306,   57953837,   63749221,
    70124148,   77136564,   84850228,   93335252,   102668779,  112935659,  124229227,
    136652151,  150317384,  165349128,  181884040,  200072456,  220079703,  242087671,
    266296456,  292926096,  322218735,  354440623,  389884688,  428873168,  471760495,
    518936559,  570830240,  627913311,  690704607,  759775136,  835752671,  919327967,
    1011260767, 1112386880, 1223623232, 1345985727, 1480584256, 1628642751, 1791507135,
    1970657856, 2167723648, 2384496256, 2622945920, 2885240448, 3173764736, 3491141248,
    3840255616, 4224281216,
};

uint8_t l_capturing(uint32_t len) {
    int bottom = 0, top = 170;
    int idx = 85;
    for (;;) {
        if (idx == 0) return static_cast<uint8_t>(idx);
        if (len <= kTopval[idx] && len > kTopval[idx - 1]) return static_cast<uint8_t>(idx);
        if (len < kTopval[idx])
            top = idx - 1;
        else
            bottom = idx + 1;
        idx = (bottom + top) / 2;
    }
}

inline uint8_t swap_nibbles(uint8_t c) {
    return static_cast<uint8_t>(((c & 0xF0) >> 4) | ((c & 0x0F) << 4));
}

int mod_diff(uint8_t x, uint8_t y, uint32_t range) {
    uint32_t dl, dr;
    if (y > x) {
        dl = static_cast<uint32_t>(y - x);
        dr = x + range - y;
    } else {
        dl = static_cast<uint32_t>(x - y);
        dr = y + range - x;
    }
    return static_cast<int>(std::min(dl, dr));
}

// per-byte distance over four 2-bit fields; a full swing of 3 costs 6
struct BitPairsTable {
    uint8_t v[256][256];
    BitPairsTable() {
        constexpr int d[4][4] = {{0, 1, 2, 6}, {1, 0, 1, 2}, {2, 1, 0, 1}, {6, 2, 1, 0}};
        for (int i = 0; i < 256; ++i)
            for (int j = 0; j < 256; ++j)
                v[i][j] = static_cast<uint8_t>(d[i & 3][j & 3] + d[(i >> 2) & 3][(j >> 2) & 3] +
                                               d[(i >> 4) & 3][(j >> 4) & 3] + d[i >> 6][j >> 6]);
    }
};
const BitPairsTable kBitPairs;

void find_quartiles(const std::array<uint32_t, kBuckets>& buckets, uint32_t& q1, uint32_t& q2,
                    uint32_t& q3) {
    std::array<uint32_t, kEffBuckets> copy{};
    std::copy_n(buckets.begin(), kEffBuckets, copy.begin());
    std::sort(copy.begin(), copy.end());
    q1 = copy[kEffBuckets / 4 - 1];
    q2 = copy[kEffBuckets / 2 - 1];
    q3 = copy[kEffBuckets - kEffBuckets / 4 - 1];
}

constexpr char kHexUpper[] = "0123456789ABCDEF";

void push_hex(std::string& out, uint8_t b) {
    out.push_back(kHexUpper[b >> 4]);
    out.push_back(kHexUpper[b & 0xF]);
}

int hex_nibble(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return -1;
}

}  // namespace

std::string TlshDigest::hex() const {
    std::string out;
    out.reserve(70);
    push_hex(out, swap_nibbles(checksum));
    push_hex(out, swap_nibbles(log_length));
    push_hex(out, static_cast<uint8_t>((q1_ratio << 4) | q2_ratio));
    for (size_t i = 0; i < kCodeSize; ++i) push_hex(out, body[kCodeSize - 1 - i]);
    return out;
}

std::string TlshDigest::to_string() const { return "T1" + hex(); }

std::optional<TlshDigest> TlshDigest::parse(std::string_view text) {
    if (text.size() == 72) {
        if (text[0] != 'T' || text[1] != '1') return std::nullopt;
        text.remove_prefix(2);
    }
    if (text.size() != 70) return std::nullopt;
    std::array<uint8_t, 35> raw{};
    for (size_t i = 0; i < 35; ++i) {
        const int hi = hex_nibble(text[2 * i]);
        const int lo = hex_nibble(text[2 * i + 1]);
        if (hi < 0 || lo < 0) return std::nullopt;
        raw[i] = static_cast<uint8_t>((hi << 4) | lo);
    }
    TlshDigest d;
    d.checksum = swap_nibbles(raw[0]);
    d.log_length = swap_nibbles(raw[1]);
    d.q1_ratio = raw[2] >> 4;
    d.q2_ratio = raw[2] & 0xF;
    for (size_t i = 0; i < kCodeSize; ++i) d.body[kCodeSize - 1 - i] = raw[3 + i];
    return d;
}

TlshDigest tlsh_hash(ByteView data) {
    if (data.size() < kMinLength)
        throw InputTooShort("tlsh requires at least " + std::to_string(kMinLength) + " bytes");

    std::array<uint32_t, kBuckets> buckets{};
    uint8_t checksum = 0;
    // window holds the previous four bytes, most recent first
    uint8_t w1 = 0, w2 = 0, w3 = 0, w4 = 0;

    for (size_t i = 0; i < data.size(); ++i) {
        const uint8_t b0 = data[i];
        if (i >= 4) {
            checksum = b_mapping(1, b0, w1, checksum);
            buckets[b_mapping(49, b0, w1, w2)]++;
            buckets[b_mapping(12, b0, w1, w3)]++;
            buckets[b_mapping(84, b0, w1, w4)]++;
            buckets[b_mapping(178, b0, w2, w3)]++;
            buckets[b_mapping(166, b0, w2, w4)]++;
            buckets[b_mapping(230, b0, w3, w4)]++;
        }
        w4 = w3;
        w3 = w2;
        w2 = w1;
        w1 = b0;
    }

    uint32_t q1, q2, q3;
    find_quartiles(buckets, q1, q2, q3);
    if (q3 == 0) throw InsufficientVariance("tlsh: empty upper quartile");

    size_t nonzero = 0;
    for (size_t i = 0; i < kEffBuckets; ++i)
        if (buckets[i] > 0) nonzero++;
    if (nonzero <= kEffBuckets / 2)
        throw InsufficientVariance("tlsh: more than half of the buckets are empty");

    TlshDigest out;
    for (size_t i = 0; i < kCodeSize; ++i) {
        uint8_t h = 0;
        for (size_t j = 0; j < 4; ++j) {
            const uint32_t k = buckets[4 * i + j];
            if (q3 < k)
                h += static_cast<uint8_t>(3 << (j * 2));
            else if (q2 < k)
                h += static_cast<uint8_t>(2 << (j * 2));
            else if (q1 < k)
                h += static_cast<uint8_t>(1 << (j * 2));
        }
        out.body[i] = h;
    }
    out.checksum = checksum;
    out.log_length = l_capturing(static_cast<uint32_t>(data.size()));
    out.q1_ratio = static_cast<uint8_t>(
        static_cast<uint32_t>(static_cast<float>(q1 * 100) / static_cast<float>(q3)) % 16);
    out.q2_ratio = static_cast<uint8_t>(
        static_cast<uint32_t>(static_cast<float>(q2 * 100) / static_cast<float>(q3)) % 16);
    return out;
}

int tlsh_distance(const TlshDigest& a, const TlshDigest& b) {
    constexpr int kLengthMult = 12;
    constexpr int kQRatioMult = 12;

    int diff = 0;
    const int ldiff = mod_diff(a.log_length, b.log_length, 256);
    if (ldiff > 1) diff = ldiff * kLengthMult;
    else diff = ldiff;

    const int q1d = mod_diff(a.q1_ratio, b.q1_ratio, 16);
    diff += (q1d <= 1) ? q1d : (q1d - 1) * kQRatioMult;
    const int q2d = mod_diff(a.q2_ratio, b.q2_ratio, 16);
    diff += (q2d <= 1) ? q2d : (q2d - 1) * kQRatioMult;

    if (a.checksum != b.checksum) diff += 1;

    for (size_t i = 0; i < kCodeSize; ++i) diff += kBitPairs.v[a.body[i]][b.body[i]];
    return diff;
}

}  // namespace packscope::fuzzy
