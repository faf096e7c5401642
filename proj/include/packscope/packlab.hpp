#pragma once

#include "packscope/common.hpp"

#include <optional>

namespace packscope::packlab {

enum class TransformKind {
    Compress,
    Encrypt,
    ReflectiveWrap,
    StringMangleCertClone,
    ProtectorWrap,
};

// A deterministic structural transformation standing in for one packer
// family. Same (input, profile, seed, variant) always produces identical
// bytes, and every output parses leniently as PE32.
struct PackerProfile {
    std::string name;
    TransformKind transform_kind = TransformKind::Compress;
    std::vector<std::string> section_names;
    Bytes stub;        // planted at the entry point
    uint64_t seed = 0;
    uint32_t variant = 0;  // version-like sub-seed; tweaks the stub tail
};

constexpr uint64_t kDefaultProfileSeed = 0x5EED0BADF00D;

const std::vector<std::string>& profile_names();  // the eight sim-* profiles
PackerProfile profile(std::string_view name, uint64_t seed = kDefaultProfileSeed,
                      uint32_t variant = 0);

Bytes pack(ByteView pe_bytes, const PackerProfile& p);  // throws UnparseableInput

// recovers the original bytes for compress / encrypt / reflective-wrap /
// protector-wrap outputs; nullopt when the blob is absent or damaged
std::optional<Bytes> unpack(ByteView packed, const PackerProfile& p);

// the two sim-mangle treatments, separately steerable for ablations
struct MangleOptions {
    bool strings = true;
    bool cert = true;
};
Bytes pack_mangle(ByteView pe_bytes, const PackerProfile& p, MangleOptions opt);

// stand-in for a legitimate code-signing blob cloned onto outputs
const Bytes& donor_certificate();

// ---- signature-based identification ----

struct PackerRule {
    std::string name;
    std::vector<std::string> section_name_patterns;  // trailing '*' wildcard allowed
    std::string entry_stub_pattern;                  // hex with ?? wildcards, e.g. "4D 5A ?? 90"
    double entropy_lo = 0.0;  // over the dominant (largest) section
    double entropy_hi = 8.0;
};

struct RuleMatch {
    std::string name;
    int specificity = 0;  // stub(4) > names(2) > entropy(1)
};

std::vector<PackerRule> default_rules();
std::vector<PackerRule> parse_rules(const std::string& json_text);  // throws RulesParseError
std::string rules_to_json(const std::vector<PackerRule>& rules);

// all matching rules, strongest first; empty = unknown
std::vector<RuleMatch> identify_packer(ByteView pe_bytes, const std::vector<PackerRule>& rules);

}  // namespace packscope::packlab
