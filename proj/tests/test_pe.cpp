#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "packscope/pe.hpp"
#include "support.hpp"

using namespace packscope;
using namespace packscope::pe;
using testsupport::gen_splitmix;

namespace {

PeBuildSpec two_section_spec() {
    PeBuildSpec spec;
    spec.timestamp = 0x5F000000;
    SectionSpec text{".text", gen_splitmix(1, 3000), 0x60000020u, 0};
    SectionSpec data{".data", gen_splitmix(2, 1500), 0xC0000040u, 0};
    spec.sections = {text, data};
    return spec;
}

}  // namespace

TEST_CASE("minimal two-section build parses and round-trips") {
    auto bytes = build_pe(two_section_spec());
    auto pe = parse_pe(view(bytes), Tolerance::Strict);
    CHECK(pe.sections.size() == 2);
    CHECK(pe.sections[0].name == ".text");
    CHECK(pe.sections[1].name == ".data");
    CHECK_FALSE(pe.truncated);
    CHECK(serialize(pe) == bytes);
}

TEST_CASE("round-trip is byte-identical across varied builds") {
    Rng rng(404);
    for (int t = 0; t < 20; ++t) {
        Rng r = rng.fork(t);
        PeBuildSpec spec;
        spec.timestamp = static_cast<uint32_t>(r.next());
        const int nsec = 1 + static_cast<int>(r.below(4));
        for (int s = 0; s < nsec; ++s) {
            SectionSpec sec;
            sec.name = ".s" + std::to_string(s);
            sec.data = r.fork(100 + s).bytes(1 + r.below(5000));
            sec.characteristics = (s == 0) ? 0x60000020u : 0xC0000040u;
            spec.sections.push_back(sec);
        }
        if (r.below(2)) spec.imports = {{"kernel32", {"exitprocess", "createfilea"}}};
        if (r.below(2)) spec.certificate = r.fork(7).bytes(64 + r.below(512));
        if (r.below(2)) spec.overlay = r.fork(8).bytes(r.below(700));
        auto bytes = build_pe(spec);
        auto pe = parse_pe(view(bytes), Tolerance::Strict);
        REQUIRE_FALSE(pe.truncated);
        CHECK(serialize(pe) == bytes);
        CHECK(pe.has_certificate() == !spec.certificate.empty());
    }
}

TEST_CASE("truncated tail is clamped in lenient mode and flagged") {
    auto bytes = build_pe(two_section_spec());
    auto full = parse_pe(view(bytes), Tolerance::Strict);
    const size_t last_full = full.sections.back().raw_data.size();

    Bytes cut(bytes.begin(), bytes.end() - 10);
    auto pe = parse_pe(view(cut), Tolerance::Lenient);
    CHECK(pe.truncated);
    CHECK(pe.sections.back().raw_data.size() == last_full - 10);
    CHECK_THROWS_AS(parse_pe(view(cut), Tolerance::Strict), const MalformedHeader&);
}

TEST_CASE("empty and junk input") {
    CHECK_THROWS_AS(parse_pe(ByteView{}, Tolerance::Lenient), const EmptyInput&);
    auto junk = gen_splitmix(3, 600);
    junk[0] = 'X';
    CHECK_THROWS_AS(parse_pe(view(junk), Tolerance::Lenient), const MalformedHeader&);
}

TEST_CASE("PE32+ magic is rejected with its own error") {
    auto bytes = build_pe(two_section_spec());
    auto pe = parse_pe(view(bytes), Tolerance::Strict);
    // patch the optional-header magic in place
    const size_t opt_off = 0x40 + 4 + 20;
    bytes[opt_off] = 0x0B;
    bytes[opt_off + 1] = 0x02;
    CHECK_THROWS_AS(parse_pe(view(bytes), Tolerance::Lenient), const Pe32PlusUnsupported&);
    (void)pe;
}

TEST_CASE("fuzzed mutations never crash the lenient parser") {
    auto base = build_pe(two_section_spec());
    Rng rng(777);
    int parsed = 0, rejected = 0;
    for (int t = 0; t < 1000; ++t) {
        Bytes mutant = base;
        Rng r = rng.fork(t);
        const int flips = 1 + static_cast<int>(r.below(16));
        for (int f = 0; f < flips; ++f)
            mutant[r.below(mutant.size())] ^= static_cast<uint8_t>(1 + r.below(255));
        if (r.below(4) == 0) mutant.resize(1 + r.below(mutant.size()));
        try {
            (void)parse_pe(view(mutant), Tolerance::Lenient);
            parsed++;
        } catch (const Error&) {
            rejected++;
        }
    }
    CHECK(parsed + rejected == 1000);
    CHECK(parsed > 0);  // single-byte flips usually keep the shell parseable
}

TEST_CASE("imphash follows the standard convention") {
    PeBuildSpec spec = two_section_spec();
    SUBCASE("empty import table is the md5 of the empty string") {
        auto pe = parse_pe(view(build_pe(spec)), Tolerance::Strict);
        CHECK(imphash_hex(pe) == "d41d8cd98f00b204e9800998ecf8427e");
    }
    SUBCASE("joined dll.function list, lowercased") {
        spec.imports = {{"kernel32", {"createfilea", "exitprocess"}}};
        auto pe = parse_pe(view(build_pe(spec)), Tolerance::Strict);
        CHECK(imphash_hex(pe) == md5_hex(view(std::string_view(
                                      "kernel32.createfilea,kernel32.exitprocess"))));
    }
    SUBCASE("ordinals render as ord<N>") {
        spec.imports = {{"ws2_32", {"ord1", "ord115"}}};
        auto pe = parse_pe(view(build_pe(spec)), Tolerance::Strict);
        CHECK(pe.imports.size() == 1);
        REQUIRE(pe.imports[0].functions.size() == 2);
        CHECK(pe.imports[0].functions[0] == "ord1");
        CHECK(imphash_hex(pe) == md5_hex(view(std::string_view("ws2_32.ord1,ws2_32.ord115"))));
    }
    SUBCASE("same imports, different code, same imphash") {
        spec.imports = {{"user32", {"messageboxa"}}};
        auto a = spec;
        auto b = spec;
        b.sections[0].data = gen_splitmix(42, 3000);
        auto pa = parse_pe(view(build_pe(a)), Tolerance::Strict);
        auto pb = parse_pe(view(build_pe(b)), Tolerance::Strict);
        CHECK(imphash_hex(pa) == imphash_hex(pb));
        CHECK(serialize(pa) != serialize(pb));
    }
}

TEST_CASE("imphash invariant under overlay and non-import byte changes") {
    PeBuildSpec spec = two_section_spec();
    spec.imports = {{"kernel32", {"exitprocess"}}};
    auto base = spec;
    auto with_overlay = spec;
    with_overlay.overlay = gen_splitmix(9, 300);
    auto mutated = spec;
    mutated.sections[1].data[7] ^= 0x55;
    auto h0 = imphash_hex(parse_pe(view(build_pe(base)), Tolerance::Strict));
    CHECK(h0 == imphash_hex(parse_pe(view(build_pe(with_overlay)), Tolerance::Strict)));
    CHECK(h0 == imphash_hex(parse_pe(view(build_pe(mutated)), Tolerance::Strict)));
}

TEST_CASE("section fingerprints expose md5 and entropy") {
    PeBuildSpec spec;
    spec.sections = {SectionSpec{".zero", Bytes(4096, 0), 0xC0000040u, 0},
                     SectionSpec{".rand", gen_splitmix(6, 65536), 0xC0000040u, 0}};
    auto pe = parse_pe(view(build_pe(spec)), Tolerance::Strict);
    auto fp = section_fingerprints(pe);
    REQUIRE(fp.size() == 2);
    CHECK(fp[0].name == ".zero");
    CHECK(fp[0].entropy == doctest::Approx(0.0));
    CHECK(fp[0].md5 == md5_hex(view(Bytes(4096, 0))));
    CHECK(fp[1].entropy >= 7.9);
    CHECK(fp[1].entropy <= 8.0);

    // identical section bytes in a different file fingerprint identically
    PeBuildSpec other;
    other.sections = {SectionSpec{".zero", Bytes(4096, 0), 0xC0000040u, 0}};
    other.overlay = gen_splitmix(10, 99);
    auto fp2 = section_fingerprints(parse_pe(view(build_pe(other)), Tolerance::Strict));
    CHECK(fp2[0].md5 == fp[0].md5);
}

TEST_CASE("fingerprint json shape") {
    auto pe = parse_pe(view(build_pe(two_section_spec())), Tolerance::Strict);
    auto line = fingerprint_json("a/b.exe", pe);
    auto j = nlohmann::json::parse(line);
    CHECK(j["path"] == "a/b.exe");
    CHECK(j["sections"].size() == 2);
    CHECK(j["truncated"] == false);
    CHECK(j["imphash"].get<std::string>().size() == 32);
}
