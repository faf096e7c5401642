#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "packscope/features.hpp"
#include "packscope/packlab.hpp"
#include "packscope/pe.hpp"
#include "support.hpp"

using namespace packscope;
using namespace packscope::packlab;
using testsupport::gen_splitmix;
using testsupport::gen_text;

namespace {

Bytes sample_pe(uint64_t seed, size_t payload = 20000, bool with_strings = false) {
    pe::PeBuildSpec spec;
    Bytes text = gen_splitmix(seed, payload);
    if (with_strings) {
        const std::string ioc = "http://c2.example/a";
        std::copy(ioc.begin(), ioc.end(), text.begin() + 64);
        text[63] = 0;
        text[64 + ioc.size()] = 0;
        const std::string reg = "HKEY_LOCAL_MACHINE\\Software\\Run";
        std::copy(reg.begin(), reg.end(), text.begin() + 256);
        text[255] = 0;
        text[256 + reg.size()] = 0;
    }
    spec.sections = {pe::SectionSpec{".text", text, 0x60000020u, 0},
                     pe::SectionSpec{".data", gen_text(seed + 1, payload / 3), 0xC0000040u, 0}};
    spec.imports = {{"kernel32", {"createfilea", "writefile"}}, {"user32", {"messageboxa"}}};
    return pe::build_pe(spec);
}

}  // namespace

TEST_CASE("every profile emits parseable deterministic output") {
    auto input = sample_pe(1, 20000, true);
    for (const auto& name : profile_names()) {
        CAPTURE(name);
        auto p = profile(name, 42);
        auto out1 = pack(view(input), p);
        auto out2 = pack(view(input), p);
        REQUIRE(out1 == out2);
        auto parsed = pe::parse_pe(view(out1), pe::Tolerance::Lenient);
        CHECK_FALSE(parsed.sections.empty());

        auto other_seed = pack(view(input), profile(name, 43));
        CHECK(out1 != other_seed);
    }
}

TEST_CASE("compress and encrypt and wrap profiles round-trip through unpack") {
    auto input = sample_pe(2);
    for (const auto& name : {"sim-upx", "sim-mpress", "sim-hyperion", "sim-nimcrypt",
                             "sim-amber", "sim-themida", "sim-enigma"}) {
        CAPTURE(name);
        auto p = profile(name, 7);
        auto packed = pack(view(input), p);
        auto back = unpack(view(packed), p);
        REQUIRE(back.has_value());
        CHECK(*back == input);
    }
}

TEST_CASE("encrypted dominant section has entropy of at least 7.9 on 64 KiB inputs") {
    auto input = sample_pe(3, 1 << 16);
    for (const auto& name : {"sim-hyperion", "sim-nimcrypt"}) {
        auto packed = pack(view(input), profile(name, 9));
        auto parsed = pe::parse_pe(view(packed), pe::Tolerance::Strict);
        size_t biggest = 0;
        double entropy = 0;
        for (const auto& s : parsed.sections)
            if (s.raw_data.size() > biggest) {
                biggest = s.raw_data.size();
                entropy = s.entropy;
            }
        CAPTURE(name);
        CHECK(entropy >= 7.9);
        // no original imports survive
        for (const auto& e : parsed.imports) CHECK(e.dll != "user32");
    }
}

TEST_CASE("compressed payload entropy sits in the contract band") {
    auto input = sample_pe(4, 40000);
    for (const auto& name : {"sim-upx", "sim-mpress"}) {
        auto packed = pack(view(input), profile(name, 5));
        auto parsed = pe::parse_pe(view(packed), pe::Tolerance::Strict);
        size_t biggest = 0;
        double entropy = 0;
        for (const auto& s : parsed.sections)
            if (s.raw_data.size() > biggest) {
                biggest = s.raw_data.size();
                entropy = s.entropy;
            }
        CAPTURE(name);
        CHECK(entropy >= 6.5);
        CHECK(entropy <= 7.8);
    }
}

TEST_CASE("size contracts: zero payload shrinks hard, random payload grows by at most the wrapper") {
    pe::PeBuildSpec zspec;
    zspec.sections = {pe::SectionSpec{".data", Bytes(1 << 17, 0), 0xC0000040u, 0}};
    auto zeros = pe::build_pe(zspec);
    pe::PeBuildSpec rspec;
    rspec.sections = {pe::SectionSpec{".data", gen_splitmix(6, 1 << 17), 0xC0000040u, 0}};
    auto random = pe::build_pe(rspec);

    for (const auto& name : {"sim-upx", "sim-mpress"}) {
        CAPTURE(name);
        auto p = profile(name, 11);
        CHECK(pack(view(zeros), p).size() <= zeros.size() / 10);
        // incompressible: stored-marker overhead plus stub and headers
        CHECK(pack(view(random), p).size() <= random.size() + random.size() / 5 + 8192);
        CHECK(pack(view(random), p).size() + 1024 >= random.size());
    }
}

TEST_CASE("mangle replaces ioc strings in place and clones the donor certificate") {
    auto input = sample_pe(7, 20000, true);
    auto parsed_in = pe::parse_pe(view(input), pe::Tolerance::Strict);
    CHECK_FALSE(parsed_in.has_certificate());

    auto p = profile("sim-mangle", 13);
    SUBCASE("strings arm alone preserves size and offsets") {
        auto out = pack_mangle(view(input), p, MangleOptions{true, false});
        REQUIRE(out.size() == input.size());
        size_t diff_lo = out.size(), diff_hi = 0;
        for (size_t i = 0; i < out.size(); ++i) {
            if (out[i] != input[i]) {
                diff_lo = std::min(diff_lo, i);
                diff_hi = std::max(diff_hi, i);
            }
        }
        // the url begins at .text+64; every replacement byte stays printable
        REQUIRE(diff_lo < diff_hi);
        for (size_t i = diff_lo; i <= diff_hi; ++i)
            if (out[i] != input[i]) REQUIRE((out[i] >= 0x21 && out[i] <= 0x7E));
        auto hits = feat::string_scan(view(out));
        for (const auto& h : hits) {
            CHECK_FALSE(feat::looks_like_url(h.text));
            CHECK_FALSE(feat::looks_like_registry_path(h.text));
        }
    }
    SUBCASE("cert arm attaches the donor blob") {
        auto out = pack_mangle(view(input), p, MangleOptions{false, true});
        CHECK(out.size() == input.size() + donor_certificate().size());
        auto parsed = pe::parse_pe(view(out), pe::Tolerance::Strict);
        REQUIRE(parsed.has_certificate());
        CHECK(*parsed.certificate == donor_certificate());
        // everything except the 8-byte security-directory slot is untouched
        const size_t dir_off = 0x40 + 4 + 20 + 96 + 4 * 8;
        for (size_t i = 0; i < input.size(); ++i)
            if (i < dir_off || i >= dir_off + 8) REQUIRE(out[i] == input[i]);
    }
    SUBCASE("full profile applies both") {
        auto out = pack(view(input), p);
        auto parsed = pe::parse_pe(view(out), pe::Tolerance::Strict);
        CHECK(parsed.has_certificate());
        CHECK(out.size() == input.size() + donor_certificate().size());
    }
}

TEST_CASE("identify_packer sees every profile's own output and nothing in clean files") {
    auto input = sample_pe(8);
    auto rules = default_rules();
    for (const auto& name : profile_names()) {
        CAPTURE(name);
        auto packed = pack(view(input), profile(name));
        auto matches = identify_packer(view(packed), rules);
        REQUIRE_FALSE(matches.empty());
        CHECK(matches.front().name == name);
    }
    CHECK(identify_packer(view(input), rules).empty());
}

TEST_CASE("identification is robust across variants") {
    auto input = sample_pe(9);
    auto rules = default_rules();
    for (const auto& name : profile_names()) {
        for (uint32_t variant : {1u, 2u, 3u}) {
            auto packed = pack(view(input), profile(name, kDefaultProfileSeed, variant));
            auto matches = identify_packer(view(packed), rules);
            CAPTURE(name);
            CAPTURE(variant);
            REQUIRE_FALSE(matches.empty());
            CHECK(matches.front().name == name);
        }
    }
}

TEST_CASE("a missing rule means an empty result") {
    auto input = sample_pe(10);
    auto packed = pack(view(input), profile("sim-hyperion"));
    std::vector<PackerRule> rules;
    for (const auto& r : default_rules())
        if (r.name != "sim-hyperion") rules.push_back(r);
    CHECK(identify_packer(view(packed), rules).empty());
}

TEST_CASE("rules serialize to json and back") {
    auto rules = default_rules();
    auto text = rules_to_json(rules);
    auto parsed = parse_rules(text);
    REQUIRE(parsed.size() == rules.size());
    for (size_t i = 0; i < rules.size(); ++i) {
        CHECK(parsed[i].name == rules[i].name);
        CHECK(parsed[i].entry_stub_pattern == rules[i].entry_stub_pattern);
        CHECK(parsed[i].section_name_patterns == rules[i].section_name_patterns);
    }
    CHECK_THROWS_AS(parse_rules("not json"), const RulesParseError&);
    CHECK_THROWS_AS(parse_rules("[{\"name\":\"x\",\"entry_stub_pattern\":\"ZZ\"}]"),
                    const RulesParseError&);
}

TEST_CASE("wildcard stub patterns match") {
    auto input = sample_pe(11);
    auto packed = pack(view(input), profile("sim-upx"));
    auto rules = default_rules();
    for (auto& r : rules) {
        if (r.name != "sim-upx") continue;
        // blank out two bytes with wildcards
        auto& pat = r.entry_stub_pattern;
        pat[3] = '?';
        pat[4] = '?';
        pat[6] = '?';
        pat[7] = '?';
    }
    auto matches = identify_packer(view(packed), rules);
    REQUIRE_FALSE(matches.empty());
    CHECK(matches.front().name == "sim-upx");
}

TEST_CASE("unparseable input is rejected") {
    auto junk = gen_splitmix(12, 400);
    CHECK_THROWS_AS(pack(view(junk), profile("sim-upx")), const UnparseableInput&);
}

TEST_CASE("amber keeps payload bytes visible") {
    auto input = sample_pe(13);
    auto packed = pack(view(input), profile("sim-amber"));
    // the original input is embedded verbatim
    auto it = std::search(packed.begin(), packed.end(), input.begin(), input.end());
    CHECK(it != packed.end());
}
