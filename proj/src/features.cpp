#include "packscope/features.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <sstream>

namespace packscope::feat {

namespace {

constexpr size_t kWindow = 2048;
constexpr size_t kStride = 1024;

bool printable(uint8_t c) { return c >= 0x20 && c <= 0x7E; }

size_t find_ci(std::string_view hay, std::string_view needle) {
    auto it = std::search(hay.begin(), hay.end(), needle.begin(), needle.end(),
                          [](char a, char b) {
                              return std::tolower(static_cast<unsigned char>(a)) ==
                                     std::tolower(static_cast<unsigned char>(b));
                          });
    return it == hay.end() ? std::string_view::npos : static_cast<size_t>(it - hay.begin());
}

void entropy_histogram(ByteView raw, double* out /* 256 doubles */) {
    std::fill(out, out + 256, 0.0);
    if (raw.empty()) return;
    size_t windows = 0;
    for (size_t start = 0;; start += kStride) {
        if (start >= raw.size()) break;
        const size_t len = std::min(kWindow, raw.size() - start);
        ByteView w(raw.data() + start, len);
        const double h = shannon_entropy(w);
        uint64_t sum = 0;
        for (uint8_t b : w) sum += b;
        const auto mean = static_cast<uint32_t>(sum / len);
        const int hlevel = std::min(15, static_cast<int>(h * 2.0));
        const int mlevel = std::min(15, static_cast<int>(mean >> 4));
        out[hlevel * 16 + mlevel] += 1.0;
        windows++;
        if (start + kWindow >= raw.size()) break;
    }
    for (int i = 0; i < 256; ++i) out[i] /= static_cast<double>(windows);
}

}  // namespace

std::vector<StringHit> string_scan(ByteView raw, size_t min_len) {
    std::vector<StringHit> out;
    size_t run_start = 0;
    size_t run_len = 0;
    for (size_t i = 0; i <= raw.size(); ++i) {
        if (i < raw.size() && printable(raw[i])) {
            if (run_len == 0) run_start = i;
            run_len++;
            continue;
        }
        if (run_len >= min_len)
            out.push_back({std::string(reinterpret_cast<const char*>(raw.data() + run_start),
                                       run_len),
                           run_start});
        run_len = 0;
    }
    return out;
}

bool looks_like_url(std::string_view s) {
    return find_ci(s, "http://") != std::string_view::npos ||
           find_ci(s, "https://") != std::string_view::npos ||
           find_ci(s, "ftp://") != std::string_view::npos;
}

bool looks_like_ip(std::string_view s) {
    // dotted quad with 1-3 digit groups
    for (size_t i = 0; i < s.size(); ++i) {
        if (!std::isdigit(static_cast<unsigned char>(s[i]))) continue;
        if (i > 0 && (std::isdigit(static_cast<unsigned char>(s[i - 1])) || s[i - 1] == '.'))
            continue;
        size_t p = i;
        int groups = 0;
        while (groups < 4) {
            size_t d = 0;
            int value = 0;
            while (p + d < s.size() && std::isdigit(static_cast<unsigned char>(s[p + d])) && d < 3) {
                value = value * 10 + (s[p + d] - '0');
                d++;
            }
            if (d == 0 || value > 255) break;
            groups++;
            p += d;
            if (groups == 4) {
                if (p < s.size() && (std::isdigit(static_cast<unsigned char>(s[p])) || s[p] == '.'))
                    break;
                return true;
            }
            if (p >= s.size() || s[p] != '.') break;
            p++;
        }
    }
    return false;
}

bool looks_like_registry_path(std::string_view s) {
    return find_ci(s, "hkey_") != std::string_view::npos ||
           find_ci(s, "\\registry\\") != std::string_view::npos;
}

FeatureVector extract_features(const pe::PortableExecutable& pe, ByteView raw) {
    FeatureVector v(kFeatureDim, 0.0);
    size_t at = 0;

    // byte histogram
    if (!raw.empty()) {
        std::array<uint64_t, 256> counts{};
        for (uint8_t b : raw) counts[b]++;
        for (int i = 0; i < 256; ++i)
            v[at + i] = static_cast<double>(counts[i]) / static_cast<double>(raw.size());
    }
    at += 256;

    entropy_histogram(raw, v.data() + at);
    at += 256;

    // general
    size_t num_imports = 0;
    for (const auto& e : pe.imports) num_imports += e.functions.size();
    v[at + 0] = static_cast<double>(raw.size());
    v[at + 1] = static_cast<double>(pe.sections.size());
    v[at + 2] = static_cast<double>(num_imports);
    v[at + 3] = static_cast<double>(pe.num_exported_functions);
    v[at + 4] = pe.has_certificate() ? 1.0 : 0.0;
    v[at + 5] = pe.overlay.empty() ? 0.0 : 1.0;
    v[at + 6] = pe.truncated ? 1.0 : 0.0;
    at += 7;

    // header
    v[at + 0] = static_cast<double>(pe.coff.timestamp);
    v[at + 1] = static_cast<double>(pe.coff.machine);
    v[at + 2] = static_cast<double>(pe.coff.characteristics);
    v[at + 3] = static_cast<double>(pe.optional_header.subsystem);
    v[at + 4] = static_cast<double>(pe.optional_header.sizeof_code);
    v[at + 5] = static_cast<double>(pe.optional_header.sizeof_headers);
    v[at + 6] = static_cast<double>(pe.optional_header.entry_point_rva);
    at += 7;

    // section aggregates
    if (!pe.sections.empty()) {
        double mean = 0, mx = 0, mn = 8, total = 0, zero = 0, high = 0;
        for (const auto& s : pe.sections) {
            mean += s.entropy;
            mx = std::max(mx, s.entropy);
            mn = std::min(mn, s.entropy);
            total += static_cast<double>(s.raw_data.size());
            if (s.raw_data.empty()) zero += 1;
            if (s.entropy > 7.2) high += 1;
        }
        v[at + 0] = mean / static_cast<double>(pe.sections.size());
        v[at + 1] = mx;
        v[at + 2] = mn;
        v[at + 3] = total;
        v[at + 4] = zero;
        v[at + 5] = high;
    }
    at += 6;

    // strings
    {
        auto hits = string_scan(raw);
        double url = 0, ip = 0, reg = 0, total_len = 0;
        std::array<double, 4> bins{};  // [5,8) [8,16) [16,32) [32,inf)
        for (const auto& h : hits) {
            total_len += static_cast<double>(h.text.size());
            if (looks_like_url(h.text)) url += 1;
            if (looks_like_ip(h.text)) ip += 1;
            if (looks_like_registry_path(h.text)) reg += 1;
            const size_t n = h.text.size();
            bins[n < 8 ? 0 : n < 16 ? 1 : n < 32 ? 2 : 3] += 1;
        }
        v[at + 0] = static_cast<double>(hits.size());
        v[at + 1] = hits.empty() ? 0.0 : total_len / static_cast<double>(hits.size());
        v[at + 2] = url;
        v[at + 3] = ip;
        v[at + 4] = reg;
        if (!hits.empty())
            for (int i = 0; i < 4; ++i) v[at + 5 + i] = bins[i] / static_cast<double>(hits.size());
    }
    at += 9;

    // hashed imports
    {
        double total = 0;
        for (const auto& e : pe.imports) {
            for (const auto& fn : e.functions) {
                const uint64_t h = Rng::fnv1a64(e.dll + "." + fn);
                v[at + h % 128] += 1.0;
                total += 1.0;
            }
        }
        if (total > 0)
            for (int i = 0; i < 128; ++i) v[at + i] /= total;
    }
    at += 128;

    return v;
}

const std::vector<std::string>& schema_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> n;
        n.reserve(kFeatureDim);
        for (int i = 0; i < 256; ++i) n.push_back("byte_hist_" + std::to_string(i));
        for (int e = 0; e < 16; ++e)
            for (int m = 0; m < 16; ++m)
                n.push_back("entropy_hist_e" + std::to_string(e) + "_m" + std::to_string(m));
        for (const char* g : {"file_size", "num_sections", "num_imports", "num_exports",
                              "has_certificate", "has_overlay", "truncated"})
            n.push_back(std::string("general_") + g);
        for (const char* h : {"timestamp", "machine", "characteristics", "subsystem",
                              "sizeof_code", "sizeof_headers", "entry_point_rva"})
            n.push_back(std::string("header_") + h);
        for (const char* s : {"entropy_mean", "entropy_max", "entropy_min", "total_raw_size",
                              "zero_size_count", "high_entropy_count"})
            n.push_back(std::string("sections_") + s);
        for (const char* s : {"count", "mean_length", "url_count", "ip_count", "registry_count",
                              "len_bin_5_8", "len_bin_8_16", "len_bin_16_32", "len_bin_32_up"})
            n.push_back(std::string("strings_") + s);
        for (int i = 0; i < 128; ++i) n.push_back("import_bucket_" + std::to_string(i));
        return n;
    }();
    return names;
}

std::string to_csv(const std::vector<std::pair<std::string, FeatureVector>>& rows) {
    std::ostringstream out;
    out << "# schema_version=" << kSchemaVersion << "\n";
    out << "path";
    for (const auto& n : schema_names()) out << "," << n;
    out << "\n";
    out.precision(12);
    for (const auto& [path, vec] : rows) {
        out << path;
        for (double x : vec) out << "," << x;
        out << "\n";
    }
    return out.str();
}

}  // namespace packscope::feat
