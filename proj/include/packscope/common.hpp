#pragma once

#include <cstdint>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace packscope {

using Bytes = std::vector<uint8_t>;
using ByteView = std::span<const uint8_t>;

inline ByteView view(const Bytes& b) { return ByteView(b.data(), b.size()); }
inline ByteView view(std::string_view s) {
    return ByteView(reinterpret_cast<const uint8_t*>(s.data()), s.size());
}

// Domain errors carry a stable machine-readable code alongside the message.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& what)
        : std::runtime_error(what), code_(std::move(code)) {}
    const std::string& code() const { return code_; }

private:
    std::string code_;
};

#define PACKSCOPE_ERROR(name)                              \
    class name : public Error {                            \
    public:                                                \
        explicit name(const std::string& what = #name)     \
            : Error(#name, what) {}                        \
    }

PACKSCOPE_ERROR(EmptyInput);
PACKSCOPE_ERROR(MalformedHeader);
PACKSCOPE_ERROR(InputTooShort);
PACKSCOPE_ERROR(InsufficientVariance);
PACKSCOPE_ERROR(UnparseableInput);
PACKSCOPE_ERROR(RulesParseError);
PACKSCOPE_ERROR(NoFiles);
PACKSCOPE_ERROR(MissingLabels);
PACKSCOPE_ERROR(DegenerateLabels);
PACKSCOPE_ERROR(SplitLeakage);
PACKSCOPE_ERROR(SpecInvalid);
PACKSCOPE_ERROR(PlanInfeasible);

#undef PACKSCOPE_ERROR

// Deterministic 64-bit generator (splitmix64). All randomness in the tool
// flows from one root seed through fork(), so runs are reproducible and
// parallel work can draw from independent streams.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // value in [0, n)
    uint64_t below(uint64_t n) { return n ? next() % n : 0; }

    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // counter-based split: child stream independent of parent position
    Rng fork(uint64_t idx) const {
        Rng r(state_ ^ (0xA5A5A5A5DEADBEEFull + idx * 0x9E3779B97F4A7C15ull));
        r.next();
        return r;
    }
    Rng fork(std::string_view tag) const { return fork(fnv1a64(tag)); }

    Bytes bytes(size_t len) {
        Bytes out;
        out.reserve(len);
        while (out.size() < len) {
            uint64_t v = next();
            for (int i = 0; i < 8 && out.size() < len; ++i)
                out.push_back(static_cast<uint8_t>(v >> (8 * i)));
        }
        return out;
    }

    static uint64_t fnv1a64(std::string_view s) {
        uint64_t h = 0xCBF29CE484222325ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001B3ull;
        }
        return h;
    }

private:
    uint64_t state_;
};

// Shannon entropy in bits per byte, in [0, 8].
double shannon_entropy(ByteView data);

std::string to_hex(ByteView data);
Bytes from_hex(std::string_view hex);  // throws UnparseableInput

// Runs fn(i) for i in [0, n) on up to jobs threads. Results must be written
// to preallocated slots; iteration order inside a worker is ascending.
void parallel_for(size_t n, unsigned jobs, const std::function<void(size_t)>& fn);

unsigned default_jobs();

}  // namespace packscope
