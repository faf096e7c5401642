#pragma once

#include "packscope/common.hpp"
#include "packscope/pe.hpp"

namespace packscope::feat {

// Fixed 669-dimensional static feature vector. Layout (see schema_names()):
//   [0,256)    byte histogram, normalized to sum 1
//   [256,512)  byte-entropy histogram, 16 entropy levels x 16 mean-value
//              levels over 2048-byte windows at stride 1024, normalized
//   [512,519)  general: file_size, num_sections, num_imports, num_exports,
//              has_certificate, has_overlay, truncated
//   [519,526)  header: timestamp, machine, characteristics, subsystem,
//              sizeof_code, sizeof_headers, entry_point_rva
//   [526,532)  sections: mean/max/min entropy, total raw size,
//              zero-size count, high-entropy (>7.2) count
//   [532,541)  strings: count, mean length, url count, ip count,
//              registry count, 4-bin length histogram (normalized)
//   [541,669)  imports hashed into 128 buckets, normalized
constexpr size_t kFeatureDim = 669;

constexpr const char* kSchemaVersion = "packscope-features-v1";

using FeatureVector = std::vector<double>;

struct StringHit {
    std::string text;
    size_t offset;
};

// maximal runs of printable ASCII (0x20..0x7E) of at least min_len bytes
std::vector<StringHit> string_scan(ByteView raw, size_t min_len = 5);

bool looks_like_url(std::string_view s);
bool looks_like_ip(std::string_view s);
bool looks_like_registry_path(std::string_view s);

FeatureVector extract_features(const pe::PortableExecutable& pe, ByteView raw);

const std::vector<std::string>& schema_names();

// header + one row per (name, vector); a schema comment line leads the file
std::string to_csv(const std::vector<std::pair<std::string, FeatureVector>>& rows);

}  // namespace packscope::feat
