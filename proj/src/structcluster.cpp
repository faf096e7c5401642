#include "packscope/structcluster.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace packscope::structcluster {

namespace {

IndexEntry analyze_one(std::string id, std::string path, std::optional<std::string> family,
                       ByteView bytes, const std::vector<packlab::PackerRule>& rules) {
    IndexEntry e;
    e.id = std::move(id);
    e.path = std::move(path);
    e.family = std::move(family);
    try {
        auto pe = pe::parse_pe(bytes, pe::Tolerance::Lenient);
        e.sections = pe::section_fingerprints(pe);
        e.imphash = pe::imphash_hex(pe);
        e.truncated = pe.truncated;
        for (const auto& m : packlab::identify_packer(bytes, rules))
            e.packer_matches.push_back(m.name);
        // fuzzy digests stay uncomputable on truncated files
        if (!pe.truncated) {
            try {
                e.ssdeep = fuzzy::ssdeep_hash(bytes).digest;
            } catch (const Error&) {
            }
            try {
                e.tlsh = fuzzy::tlsh_hash(bytes);
            } catch (const Error&) {
            }
        }
    } catch (const Error& err) {
        e.error = std::string(err.code()) + ": " + err.what();
    }
    return e;
}

Bytes read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("IoError", "cannot read " + path);
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

struct UnionFind {
    std::vector<uint32_t> parent;
    explicit UnionFind(size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0u); }
    uint32_t find(uint32_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }
    void unite(uint32_t a, uint32_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
};

}  // namespace

CorpusIndex build_index_from_memory(const std::vector<MemorySample>& samples,
                                    const std::vector<packlab::PackerRule>& rules, unsigned jobs) {
    if (samples.empty()) throw NoFiles("empty corpus");
    CorpusIndex index;
    index.entries.resize(samples.size());
    parallel_for(samples.size(), jobs, [&](size_t i) {
        index.entries[i] = analyze_one(samples[i].id, samples[i].id, samples[i].family,
                                       view(samples[i].bytes), rules);
    });
    return index;
}

CorpusIndex build_index(const std::vector<std::string>& paths,
                        const std::map<std::string, std::string>& labels,
                        const std::vector<packlab::PackerRule>& rules, unsigned jobs) {
    if (paths.empty()) throw NoFiles("no input files");
    CorpusIndex index;
    index.entries.resize(paths.size());
    parallel_for(paths.size(), jobs, [&](size_t i) {
        std::optional<std::string> family;
        if (auto it = labels.find(paths[i]); it != labels.end()) family = it->second;
        try {
            Bytes bytes = read_file(paths[i]);
            index.entries[i] = analyze_one(paths[i], paths[i], family, view(bytes), rules);
        } catch (const Error& err) {
            IndexEntry e;
            e.id = paths[i];
            e.path = paths[i];
            e.family = family;
            e.error = std::string(err.code()) + ": " + err.what();
            index.entries[i] = std::move(e);
        }
    });
    return index;
}

std::string index_to_json(const CorpusIndex& index) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : index.entries) {
        nlohmann::json o;
        o["id"] = e.id;
        o["path"] = e.path;
        if (e.family) o["family"] = *e.family;
        if (e.ssdeep) o["ssdeep"] = e.ssdeep->to_string();
        if (e.tlsh) o["tlsh"] = e.tlsh->to_string();
        o["imphash"] = e.imphash;
        o["truncated"] = e.truncated;
        o["sections"] = nlohmann::json::array();
        for (const auto& s : e.sections)
            o["sections"].push_back({{"name", s.name}, {"md5", s.md5}, {"entropy", s.entropy}});
        o["packer_matches"] = e.packer_matches;
        if (e.error) o["error"] = *e.error;
        j.push_back(std::move(o));
    }
    return j.dump(2);
}

CorpusIndex index_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw UnparseableInput(std::string("index json: ") + e.what());
    }
    CorpusIndex index;
    for (const auto& o : j) {
        IndexEntry e;
        e.id = o.at("id").get<std::string>();
        e.path = o.value("path", e.id);
        if (o.contains("family")) e.family = o["family"].get<std::string>();
        if (o.contains("ssdeep")) e.ssdeep = fuzzy::FuzzyDigest::parse(o["ssdeep"].get<std::string>());
        if (o.contains("tlsh")) e.tlsh = fuzzy::TlshDigest::parse(o["tlsh"].get<std::string>());
        e.imphash = o.value("imphash", "");
        e.truncated = o.value("truncated", false);
        if (o.contains("sections"))
            for (const auto& s : o["sections"])
                e.sections.push_back({s.at("name").get<std::string>(),
                                      s.at("md5").get<std::string>(),
                                      s.value("entropy", 0.0)});
        if (o.contains("packer_matches"))
            e.packer_matches = o["packer_matches"].get<std::vector<std::string>>();
        if (o.contains("error")) e.error = o["error"].get<std::string>();
        index.entries.push_back(std::move(e));
    }
    return index;
}

ClusterGraph cluster(const CorpusIndex& index, const ClusterParams& params, unsigned jobs) {
    ClusterGraph g;
    for (const auto& e : index.entries) g.node_ids.push_back(e.id);
    const size_t n = index.entries.size();

    // all-pairs, parallel over the first index; per-row results are merged in
    // order so the edge list is independent of scheduling
    std::vector<std::vector<SimilarityEdge>> rows(n);
    parallel_for(n, jobs, [&](size_t i) {
        const auto& a = index.entries[i];
        for (size_t k = i + 1; k < n; ++k) {
            const auto& b = index.entries[k];
            SimilarityEdge edge;
            edge.a = static_cast<uint32_t>(i);
            edge.b = static_cast<uint32_t>(k);
            bool ss_ok = false, tl_ok = false;
            bool ss_avail = a.ssdeep && b.ssdeep;
            bool tl_avail = a.tlsh && b.tlsh;
            if (ss_avail) {
                edge.ssdeep_score = fuzzy::ssdeep_compare(*a.ssdeep, *b.ssdeep);
                ss_ok = edge.ssdeep_score > params.ssdeep_min;
            }
            if (tl_avail) {
                edge.tlsh_distance = fuzzy::tlsh_distance(*a.tlsh, *b.tlsh);
                tl_ok = edge.tlsh_distance < params.tlsh_max;
            }
            const bool keep = params.combinator == Combinator::Or
                                  ? (ss_ok || tl_ok)
                                  : (ss_ok && tl_ok);
            if (keep) rows[i].push_back(edge);
        }
    });
    for (auto& row : rows) g.edges.insert(g.edges.end(), row.begin(), row.end());

    UnionFind uf(n);
    for (const auto& e : g.edges) uf.unite(e.a, e.b);
    std::map<uint32_t, std::vector<uint32_t>> comps;
    for (uint32_t i = 0; i < n; ++i) comps[uf.find(i)].push_back(i);
    for (auto& [root, members] : comps) {
        std::sort(members.begin(), members.end());
        g.components.push_back(members);
    }
    std::sort(g.components.begin(), g.components.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    for (size_t c = 0; c < g.components.size(); ++c)
        if (g.components[c].size() >= params.min_size) g.displayed.push_back(c);
    return g;
}

std::string clusters_json(const CorpusIndex& index, const ClusterGraph& graph) {
    nlohmann::json j;
    j["nodes"] = graph.node_ids;
    j["components"] = nlohmann::json::array();
    for (size_t c = 0; c < graph.components.size(); ++c) {
        nlohmann::json comp;
        comp["size"] = graph.components[c].size();
        comp["displayed"] = std::find(graph.displayed.begin(), graph.displayed.end(), c) !=
                            graph.displayed.end();
        comp["members"] = nlohmann::json::array();
        for (uint32_t m : graph.components[c]) comp["members"].push_back(index.entries[m].id);
        j["components"].push_back(std::move(comp));
    }
    j["edges"] = nlohmann::json::array();
    for (const auto& e : graph.edges) {
        j["edges"].push_back({{"a", index.entries[e.a].id},
                              {"b", index.entries[e.b].id},
                              {"ssdeep", e.ssdeep_score},
                              {"tlsh", e.tlsh_distance}});
    }
    return j.dump(2);
}

std::string nodes_csv(const CorpusIndex& index, const ClusterGraph& graph) {
    std::ostringstream out;
    out << "id,family,component\n";
    std::vector<size_t> comp_of(index.entries.size(), 0);
    for (size_t c = 0; c < graph.components.size(); ++c)
        for (uint32_t m : graph.components[c]) comp_of[m] = c;
    for (size_t i = 0; i < index.entries.size(); ++i)
        out << index.entries[i].id << "," << index.entries[i].family.value_or("") << ","
            << comp_of[i] << "\n";
    return out.str();
}

std::string edges_csv(const CorpusIndex& index, const ClusterGraph& graph) {
    std::ostringstream out;
    out << "source,target,ssdeep_score,tlsh_distance\n";
    for (const auto& e : graph.edges)
        out << index.entries[e.a].id << "," << index.entries[e.b].id << "," << e.ssdeep_score
            << "," << e.tlsh_distance << "\n";
    return out.str();
}

std::vector<Discriminator> mine_discriminators(const CorpusIndex& index,
                                               const DiscriminatorParams& params) {
    struct Key {
        std::string kind, value;
        bool operator<(const Key& o) const {
            return std::tie(kind, value) < std::tie(o.kind, o.value);
        }
    };

    std::map<std::string, size_t> family_totals;
    for (const auto& e : index.entries)
        if (e.family) family_totals[*e.family]++;
    if (family_totals.empty()) throw MissingLabels("discriminator mining needs family labels");

    // per (kind,value): matches per family
    std::map<Key, std::map<std::string, size_t>> hits;
    std::set<std::string> all_section_names;
    for (const auto& e : index.entries)
        for (const auto& s : e.sections) all_section_names.insert(s.name);

    for (const auto& e : index.entries) {
        if (!e.family || e.error) continue;
        const auto& fam = *e.family;
        std::set<std::string> md5s, names;
        for (const auto& s : e.sections) {
            md5s.insert(s.md5);
            names.insert(s.name);
        }
        for (const auto& v : md5s) hits[{"section-md5", v}][fam]++;
        for (const auto& v : names) hits[{"section-name", v}][fam]++;
        for (const auto& n : all_section_names)
            if (!names.count(n)) hits[{"section-absence", n}][fam]++;
        if (!e.imphash.empty()) hits[{"imphash", e.imphash}][fam]++;
        hits[{"packer-id", e.packer_matches.empty() ? "none" : e.packer_matches.front()}][fam]++;
    }

    std::vector<Discriminator> out;
    for (const auto& [key, per_family] : hits) {
        size_t total_matches = 0;
        for (const auto& [fam, c] : per_family) total_matches += c;

        for (const auto& [fam, support] : per_family) {
            const size_t fam_total = family_totals.at(fam);
            const double coverage = static_cast<double>(support) / static_cast<double>(fam_total);
            const double exclusivity =
                static_cast<double>(support) / static_cast<double>(total_matches);
            Discriminator d;
            d.family = fam;
            d.kind = key.kind;
            d.value = key.value;
            d.support = support;
            d.family_total = fam_total;
            d.exclusivity = exclusivity;

            // packer rows are their own category no matter how exclusive
            if (key.kind == "packer-id") {
                if (key.value != "none" && coverage >= params.packer_majority) {
                    d.flag = "packer-majority";
                    out.push_back(std::move(d));
                }
                continue;
            }
            if (exclusivity >= 1.0 && coverage >= params.min_coverage) {
                d.flag = "unique";
                out.push_back(std::move(d));
                continue;
            }
            // group flag: the value lives entirely inside a small family set
            // and covers this family well
            if (per_family.size() >= 2 && per_family.size() <= params.max_group &&
                coverage >= params.min_coverage) {
                d.flag = "group";
                for (const auto& [f2, c2] : per_family)
                    if (f2 != fam) d.group.push_back(f2);
                out.push_back(std::move(d));
            }
        }
    }
    return out;
}

std::string discriminators_csv(const std::vector<Discriminator>& rows) {
    std::ostringstream out;
    out << "family,kind,value,support,family_total,exclusivity,flag,group\n";
    for (const auto& d : rows) {
        out << d.family << "," << d.kind << "," << d.value << "," << d.support << ","
            << d.family_total << "," << d.exclusivity << "," << d.flag << ",";
        for (size_t i = 0; i < d.group.size(); ++i) {
            if (i) out << ";";
            out << d.group[i];
        }
        out << "\n";
    }
    return out.str();
}

}  // namespace packscope::structcluster
