#pragma once

// shared helpers for the test suites: deterministic input generators matching
// the fixture descriptions, and fixture loading

#include "packscope/common.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <string>

namespace testsupport {

using packscope::Bytes;
using packscope::Rng;

inline Bytes gen_splitmix(uint64_t seed, size_t len) { return Rng(seed).bytes(len); }

inline Bytes gen_text(uint64_t seed, size_t len) {
    static const std::string charset = "etaoin shrdlucmfwypvbgkjqxz.,\n";
    Rng rng(seed);
    Bytes out;
    out.reserve(len);
    for (size_t i = 0; i < len; ++i)
        out.push_back(static_cast<uint8_t>(charset[rng.next() % charset.size()]));
    return out;
}

inline Bytes gen_ramp(size_t len) {
    Bytes out(len);
    for (size_t i = 0; i < len; ++i) out[i] = static_cast<uint8_t>(i & 0xFF);
    return out;
}

inline nlohmann::json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    nlohmann::json j;
    in >> j;
    return j;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(item);
    return out;
}

// Reconstructs a fixture input from its generator expression, e.g.
// "splitmix:17:102400", "text:31:4096", "ramp:1024", "repeat:0:4096",
// "flipmid:<id>", "append:<id>:splitmix:59:10485", "patch:<id>:40000:text:61:1000"
inline Bytes gen_from_expr(const std::string& expr,
                           const std::function<Bytes(const std::string&)>& lookup) {
    auto parts = split(expr, ':');
    const std::string& kind = parts[0];
    if (kind == "splitmix") return gen_splitmix(std::stoull(parts[1]), std::stoull(parts[2]));
    if (kind == "text") return gen_text(std::stoull(parts[1]), std::stoull(parts[2]));
    if (kind == "ramp") return gen_ramp(std::stoull(parts[1]));
    if (kind == "repeat")
        return Bytes(std::stoull(parts[2]), static_cast<uint8_t>(std::stoul(parts[1])));
    if (kind == "flipmid") {
        Bytes d = lookup(parts[1]);
        d[d.size() / 2] ^= 0xFF;
        return d;
    }
    if (kind == "append") {
        Bytes d = lookup(parts[1]);
        Bytes tail = gen_splitmix(std::stoull(parts[3]), std::stoull(parts[4]));
        d.insert(d.end(), tail.begin(), tail.end());
        return d;
    }
    if (kind == "patch") {
        Bytes d = lookup(parts[1]);
        size_t off = std::stoull(parts[2]);
        Bytes patch = gen_text(std::stoull(parts[4]), std::stoull(parts[5]));
        std::copy(patch.begin(), patch.end(), d.begin() + static_cast<ptrdiff_t>(off));
        return d;
    }
    throw std::runtime_error("unknown generator expression: " + expr);
}

}  // namespace testsupport
