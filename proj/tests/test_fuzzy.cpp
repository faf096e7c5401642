#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "packscope/ssdeep.hpp"
#include "packscope/tlsh.hpp"
#include "support.hpp"

#include <map>

using namespace packscope;
using namespace packscope::fuzzy;
using namespace testsupport;

namespace {

struct Fixture {
    std::map<std::string, Bytes> inputs;
    nlohmann::json j;

    Fixture() {
        j = load_json(std::string(FIXTURE_DIR) + "/fuzzy_vectors.json");
        for (const auto& e : j["inputs"]) {
            const std::string id = e["id"];
            const std::string gen = e["gen"];
            inputs[id] = gen_from_expr(gen, [&](const std::string& ref) { return inputs.at(ref); });
            REQUIRE(inputs[id].size() == e["len"].get<size_t>());
        }
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

}  // namespace

TEST_CASE("ssdeep matches reference digests") {
    auto& f = fixture();
    for (const auto& e : f.j["ssdeep"]) {
        const std::string id = e["id"];
        const std::string expected = e["digest"];
        auto r = ssdeep_hash(view(f.inputs.at(id)));
        CHECK_MESSAGE(r.digest.to_string() == expected, "input ", id);
    }
}

TEST_CASE("ssdeep matches reference comparison scores") {
    auto& f = fixture();
    for (const auto& e : f.j["ssdeep_compare"]) {
        const std::string a = e["a"], b = e["b"];
        const int expected = e["score"];
        auto da = ssdeep_hash(view(f.inputs.at(a))).digest;
        auto db = ssdeep_hash(view(f.inputs.at(b))).digest;
        CHECK_MESSAGE(ssdeep_compare(da, db) == expected, a, " vs ", b);
        CHECK_MESSAGE(ssdeep_compare(db, da) == expected, b, " vs ", a, " (symmetry)");
    }
}

TEST_CASE("tlsh matches reference digests") {
    auto& f = fixture();
    for (const auto& e : f.j["tlsh"]) {
        const std::string id = e["id"];
        if (e["digest"].is_null()) {
            CHECK_THROWS_AS(tlsh_hash(view(f.inputs.at(id))), const Error&);
            continue;
        }
        const std::string expected = e["digest"];
        auto d = tlsh_hash(view(f.inputs.at(id)));
        CHECK_MESSAGE(d.to_string() == expected, "input ", id);
        // parse round-trip
        auto p = TlshDigest::parse(d.to_string());
        REQUIRE(p.has_value());
        CHECK(p->to_string() == d.to_string());
    }
}

TEST_CASE("tlsh matches reference distances") {
    auto& f = fixture();
    for (const auto& e : f.j["tlsh_distance"]) {
        const std::string a = e["a"], b = e["b"];
        const int expected = e["dist"];
        auto da = tlsh_hash(view(f.inputs.at(a)));
        auto db = tlsh_hash(view(f.inputs.at(b)));
        CHECK_MESSAGE(tlsh_distance(da, db) == expected, a, " vs ", b);
        CHECK_MESSAGE(tlsh_distance(db, da) == expected, b, " vs ", a, " (symmetry)");
    }
}

TEST_CASE("ssdeep self-compare is 100 and digests are deterministic") {
    Rng rng(99);
    for (int trial = 0; trial < 5; ++trial) {
        auto data = rng.fork(trial).bytes(20000 + trial * 7777);
        auto d1 = ssdeep_hash(view(data)).digest;
        auto d2 = ssdeep_hash(view(data)).digest;
        CHECK(d1.to_string() == d2.to_string());
        CHECK(ssdeep_compare(d1, d2) == 100);
    }
}

TEST_CASE("ssdeep incomparable block sizes score 0") {
    FuzzyDigest a{3, "abcdefgh", "abcd"};
    FuzzyDigest b{96, "abcdefgh", "abcd"};
    CHECK(ssdeep_compare(a, b) == 0);
}

TEST_CASE("ssdeep empty input throws, short input flagged") {
    CHECK_THROWS_AS(ssdeep_hash(ByteView{}), const EmptyInput&);
    auto small = gen_splitmix(5, 512);
    auto r = ssdeep_hash(view(small));
    CHECK(r.low_confidence);
    auto big = gen_splitmix(5, 8192);
    CHECK_FALSE(ssdeep_hash(view(big)).low_confidence);
}

TEST_CASE("tlsh input contracts") {
    CHECK_THROWS_AS(tlsh_hash(view(gen_splitmix(1, 49))), const InputTooShort&);
    Bytes flat(4096, 0x41);
    CHECK_THROWS_AS(tlsh_hash(view(flat)), const InsufficientVariance&);
    auto ok = gen_splitmix(2, 50);
    CHECK_NOTHROW(tlsh_hash(view(ok)));
}

TEST_CASE("tlsh distance is zero on self") {
    auto d = tlsh_hash(view(gen_splitmix(3, 10000)));
    CHECK(tlsh_distance(d, d) == 0);
}

TEST_CASE("locality: small append keeps similarity within clustering thresholds") {
    auto base = gen_text(123, 1 << 20);
    Bytes longer = base;
    auto tail = gen_text(321, (1 << 20) / 100);
    longer.insert(longer.end(), tail.begin(), tail.end());

    auto sa = ssdeep_hash(view(base)).digest;
    auto sb = ssdeep_hash(view(longer)).digest;
    CHECK(ssdeep_compare(sa, sb) >= 70);

    auto ta = tlsh_hash(view(base));
    auto tb = tlsh_hash(view(longer));
    CHECK(tlsh_distance(ta, tb) < 100);
}

TEST_CASE("tlsh 70-char hex body and T1 rendering") {
    auto d = tlsh_hash(view(gen_splitmix(77, 5000)));
    CHECK(d.hex().size() == 70);
    CHECK(d.to_string().size() == 72);
    CHECK(d.to_string().substr(0, 2) == "T1");
    CHECK(TlshDigest::parse(d.hex()).has_value());
}
