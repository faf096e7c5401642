#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "packscope/structcluster.hpp"
#include "support.hpp"

#include <set>

using namespace packscope;
using namespace packscope::structcluster;
using testsupport::gen_splitmix;
using testsupport::gen_text;

namespace {

Bytes family_file(uint64_t seed, const Bytes& shared_payload, size_t mutate_budget = 0) {
    pe::PeBuildSpec spec;
    Rng rng(seed);
    Bytes text = gen_text(seed, 60000);
    if (mutate_budget > 0) {
        // localized edit: one contiguous region well under the budget
        const size_t len = std::min(mutate_budget, text.size() / 200);
        const size_t at = rng.below(text.size() - len);
        auto patch = rng.bytes(len);
        std::copy(patch.begin(), patch.end(), text.begin() + static_cast<ptrdiff_t>(at));
    }
    spec.sections = {pe::SectionSpec{".text", text, 0x60000020u, 0},
                     pe::SectionSpec{".shared", shared_payload, 0xC0000040u, 0}};
    spec.imports = {{"kernel32", {"createfilea"}}};
    return pe::build_pe(spec);
}

}  // namespace

TEST_CASE("index: copies share digests, failures are isolated") {
    auto shared = gen_splitmix(50, 4096);
    auto file = family_file(1, shared);
    std::vector<MemorySample> samples = {{"a", file, std::nullopt},
                                         {"b", file, std::nullopt},
                                         {"c", file, std::nullopt},
                                         {"junk", gen_splitmix(9, 500), std::nullopt}};
    auto index = build_index_from_memory(samples);
    REQUIRE(index.entries.size() == 4);
    CHECK(index.entries[0].ssdeep->to_string() == index.entries[1].ssdeep->to_string());
    CHECK(index.entries[0].tlsh->to_string() == index.entries[2].tlsh->to_string());
    CHECK(index.entries[0].imphash == index.entries[1].imphash);
    CHECK(index.entries[3].error.has_value());
    CHECK_FALSE(index.entries[0].error.has_value());
    CHECK_THROWS_AS(build_index_from_memory({}), const NoFiles&);
}

TEST_CASE("index json round-trip") {
    auto shared = gen_splitmix(51, 2048);
    std::vector<MemorySample> samples = {{"x", family_file(2, shared), "famX"}};
    auto index = build_index_from_memory(samples);
    auto text = index_to_json(index);
    auto back = index_from_json(text);
    REQUIRE(back.entries.size() == 1);
    CHECK(back.entries[0].id == "x");
    CHECK(back.entries[0].family == std::optional<std::string>("famX"));
    CHECK(back.entries[0].ssdeep->to_string() == index.entries[0].ssdeep->to_string());
    CHECK(back.entries[0].tlsh->to_string() == index.entries[0].tlsh->to_string());
    CHECK(back.entries[0].sections.size() == index.entries[0].sections.size());
}

TEST_CASE("two identical files make one maximal edge") {
    auto shared = gen_splitmix(52, 2048);
    auto f = family_file(3, shared);
    std::vector<MemorySample> samples = {{"a", f, std::nullopt}, {"b", f, std::nullopt}};
    auto g = cluster(build_index_from_memory(samples), ClusterParams{70, 100, Combinator::Or, 2});
    REQUIRE(g.edges.size() == 1);
    CHECK(g.edges[0].ssdeep_score == 100);
    CHECK(g.edges[0].tlsh_distance == 0);
    REQUIRE(g.components.size() == 1);
    CHECK(g.displayed.size() == 1);
}

TEST_CASE("unrelated random files produce no edge") {
    std::vector<MemorySample> samples;
    for (int i = 0; i < 5; ++i) {
        pe::PeBuildSpec spec;
        spec.sections = {pe::SectionSpec{".text", gen_splitmix(100 + i, 1 << 20), 0x60000020u, 0}};
        samples.push_back({"r" + std::to_string(i), pe::build_pe(spec), std::nullopt});
    }
    auto g = cluster(build_index_from_memory(samples));
    CHECK(g.edges.empty());
    CHECK(g.components.size() == 5);
    CHECK(g.displayed.empty());
}

TEST_CASE("12 near-duplicates and 5 singletons: one displayed component of 12") {
    std::vector<MemorySample> samples;
    auto shared = gen_splitmix(53, 4096);
    for (int i = 0; i < 12; ++i) {
        // each file is the seed file with a localized mutation under 1%
        auto f = family_file(1000, shared, i == 0 ? 0 : 600);
        // vary the mutation location per member
        if (i > 0) {
            Rng rng(2000 + i);
            const size_t at = 2048 + rng.below(40000);
            auto patch = rng.bytes(300);
            std::copy(patch.begin(), patch.end(), f.begin() + static_cast<ptrdiff_t>(at));
        }
        samples.push_back({"dup" + std::to_string(i), f, std::nullopt});
    }
    for (int i = 0; i < 5; ++i) {
        pe::PeBuildSpec spec;
        spec.sections = {pe::SectionSpec{".text", gen_splitmix(300 + i, 50000), 0x60000020u, 0}};
        samples.push_back({"single" + std::to_string(i), pe::build_pe(spec), std::nullopt});
    }
    auto index = build_index_from_memory(samples);
    auto g = cluster(index);  // defaults: >70, <100, OR, min_size 10
    REQUIRE(g.displayed.size() == 1);
    const auto& comp = g.components[g.displayed[0]];
    CHECK(comp.size() == 12);
    std::set<std::string> members;
    for (uint32_t m : comp) members.insert(index.entries[m].id);
    for (int i = 0; i < 12; ++i) CHECK(members.count("dup" + std::to_string(i)));
}

TEST_CASE("clustering is invariant under input permutation") {
    std::vector<MemorySample> samples;
    auto shared = gen_splitmix(54, 2048);
    for (int i = 0; i < 8; ++i) samples.push_back({"n" + std::to_string(i),
                                                   family_file(500, shared, i ? 500 : 0),
                                                   std::nullopt});
    for (int i = 0; i < 4; ++i) {
        pe::PeBuildSpec spec;
        spec.sections = {pe::SectionSpec{".text", gen_splitmix(700 + i, 30000), 0x60000020u, 0}};
        samples.push_back({"s" + std::to_string(i), pe::build_pe(spec), std::nullopt});
    }

    auto comp_sets = [](const CorpusIndex& idx, const ClusterGraph& g) {
        std::set<std::set<std::string>> out;
        for (const auto& c : g.components) {
            std::set<std::string> ids;
            for (uint32_t m : c) ids.insert(idx.entries[m].id);
            out.insert(std::move(ids));
        }
        return out;
    };

    auto i1 = build_index_from_memory(samples);
    auto g1 = cluster(i1, ClusterParams{70, 100, Combinator::Or, 2});

    std::reverse(samples.begin(), samples.end());
    std::swap(samples[2], samples[7]);
    auto i2 = build_index_from_memory(samples);
    auto g2 = cluster(i2, ClusterParams{70, 100, Combinator::Or, 2});

    CHECK(comp_sets(i1, g1) == comp_sets(i2, g2));
}

TEST_CASE("threshold monotonicity: tightening never adds edges") {
    std::vector<MemorySample> samples;
    auto shared = gen_splitmix(55, 2048);
    for (int i = 0; i < 10; ++i)
        samples.push_back({"m" + std::to_string(i), family_file(900, shared, i ? 800 : 0),
                           std::nullopt});
    auto index = build_index_from_memory(samples);
    size_t prev = SIZE_MAX;
    for (int ssdeep_min : {10, 40, 70, 90}) {
        auto g = cluster(index, ClusterParams{ssdeep_min, 100, Combinator::And, 2});
        CHECK(g.edges.size() <= prev);
        prev = g.edges.size();
    }
    prev = SIZE_MAX;
    for (int tlsh_max : {300, 150, 100, 20}) {
        auto g = cluster(index, ClusterParams{70, tlsh_max, Combinator::And, 2});
        CHECK(g.edges.size() <= prev);
        prev = g.edges.size();
    }
}

TEST_CASE("and-combinator is at most as permissive as or") {
    std::vector<MemorySample> samples;
    auto shared = gen_splitmix(56, 2048);
    for (int i = 0; i < 8; ++i)
        samples.push_back({"c" + std::to_string(i), family_file(901, shared, i ? 700 : 0),
                           std::nullopt});
    auto index = build_index_from_memory(samples);
    auto g_or = cluster(index, ClusterParams{70, 100, Combinator::Or, 2});
    auto g_and = cluster(index, ClusterParams{70, 100, Combinator::And, 2});
    CHECK(g_and.edges.size() <= g_or.edges.size());
}

TEST_CASE("discriminator mining flags planted structures") {
    std::vector<MemorySample> samples;
    auto unique_section = gen_splitmix(60, 3000);   // only family A
    auto shared_section = gen_splitmix(61, 3000);   // families B and C
    auto filler = [](uint64_t s) { return gen_text(s, 9000); };

    for (int i = 0; i < 10; ++i) {
        pe::PeBuildSpec spec;
        spec.sections = {pe::SectionSpec{".text", filler(1000 + i), 0x60000020u, 0},
                         pe::SectionSpec{".afam", unique_section, 0xC0000040u, 0}};
        spec.imports = {{"kernel32", {"createfilea"}}};
        samples.push_back({"A" + std::to_string(i), pe::build_pe(spec), "famA"});
    }
    for (int i = 0; i < 10; ++i) {
        pe::PeBuildSpec spec;
        spec.sections = {pe::SectionSpec{".text", filler(2000 + i), 0x60000020u, 0},
                         pe::SectionSpec{".grp", shared_section, 0xC0000040u, 0}};
        spec.imports = {{"user32", {"messageboxa"}}};
        samples.push_back({"B" + std::to_string(i), pe::build_pe(spec), "famB"});
    }
    for (int i = 0; i < 10; ++i) {
        pe::PeBuildSpec spec;
        spec.sections = {pe::SectionSpec{".text", filler(3000 + i), 0x60000020u, 0},
                         pe::SectionSpec{".grp", shared_section, 0xC0000040u, 0}};
        spec.imports = {{"user32", {"messageboxa"}}, {"gdi32", {"bitblt"}}};
        samples.push_back({"C" + std::to_string(i), pe::build_pe(spec), "famC"});
    }
    // family D: 90% packed with sim-upx
    for (int i = 0; i < 10; ++i) {
        pe::PeBuildSpec spec;
        spec.sections = {pe::SectionSpec{".text", filler(4000 + i), 0x60000020u, 0}};
        auto raw = pe::build_pe(spec);
        if (i < 9) raw = packlab::pack(view(raw), packlab::profile("sim-upx"));
        samples.push_back({"D" + std::to_string(i), raw, "famD"});
    }

    auto index = build_index_from_memory(samples);
    auto rows = mine_discriminators(index);

    // sections are padded to the 512-byte file alignment on disk
    auto padded_md5 = [](Bytes b) {
        b.resize((b.size() + 511) / 512 * 512, 0);
        return md5_hex(view(b));
    };
    const std::string unique_md5 = padded_md5(unique_section);
    const std::string shared_md5 = padded_md5(shared_section);

    bool found_unique = false, found_group_b = false, found_group_c = false, found_packer = false;
    for (const auto& d : rows) {
        if (d.kind == "section-md5" && d.value == unique_md5) {
            CHECK(d.family == "famA");
            CHECK(d.flag == "unique");
            CHECK(d.exclusivity == doctest::Approx(1.0));
            CHECK(d.support == 10);
            found_unique = true;
        }
        if (d.kind == "section-md5" && d.value == shared_md5 && d.family == "famB") {
            CHECK(d.flag == "group");
            REQUIRE(d.group.size() == 1);
            CHECK(d.group[0] == "famC");
            found_group_b = true;
        }
        if (d.kind == "section-md5" && d.value == shared_md5 && d.family == "famC")
            found_group_c = true;
        if (d.kind == "packer-id" && d.family == "famD" && d.value == "sim-upx") {
            CHECK(d.flag == "packer-majority");
            CHECK(d.support == 9);
            found_packer = true;
        }
    }
    CHECK(found_unique);
    CHECK(found_group_b);
    CHECK(found_group_c);
    CHECK(found_packer);

    // verify every flag against ground truth (precision 1.0)
    for (const auto& d : rows) {
        if (d.flag == "unique") {
            CHECK(d.exclusivity == doctest::Approx(1.0));
            CHECK(static_cast<double>(d.support) / d.family_total >= 0.9);
        }
    }

    // labels are required
    std::vector<MemorySample> unlabeled = {{"u", pe::build_pe(pe::PeBuildSpec{
                                                     0, 3, 0x014C, 0,
                                                     {pe::SectionSpec{".text", filler(1), 0x60000020u, 0}},
                                                     {}, ".idata", {}, {}, {}}),
                                            std::nullopt}};
    CHECK_THROWS_AS(mine_discriminators(build_index_from_memory(unlabeled)), const MissingLabels&);
}

TEST_CASE("report outputs render") {
    auto shared = gen_splitmix(62, 2048);
    std::vector<MemorySample> samples = {{"a", family_file(5, shared), "f1"},
                                         {"b", family_file(5, shared), "f1"}};
    auto index = build_index_from_memory(samples);
    auto g = cluster(index, ClusterParams{70, 100, Combinator::Or, 2});
    auto cj = clusters_json(index, g);
    CHECK(nlohmann::json::parse(cj)["components"].size() >= 1);
    CHECK(edges_csv(index, g).find("source,target") == 0);
    CHECK(nodes_csv(index, g).find("id,family") == 0);
    auto rows = mine_discriminators(index);
    CHECK(discriminators_csv(rows).find("family,kind") == 0);
}
