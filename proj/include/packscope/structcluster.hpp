#pragma once

#include "packscope/common.hpp"
#include "packscope/packlab.hpp"
#include "packscope/pe.hpp"
#include "packscope/ssdeep.hpp"
#include "packscope/tlsh.hpp"

#include <map>
#include <optional>

namespace packscope::structcluster {

struct IndexEntry {
    std::string id;
    std::string path;
    std::optional<std::string> family;
    std::optional<fuzzy::FuzzyDigest> ssdeep;  // absent when uncomputable
    std::optional<fuzzy::TlshDigest> tlsh;
    std::vector<pe::SectionFingerprint> sections;
    std::string imphash;
    std::vector<std::string> packer_matches;  // strongest first
    bool truncated = false;
    std::optional<std::string> error;  // analyzer failure, isolated per file
};

struct CorpusIndex {
    std::vector<IndexEntry> entries;
};

// Every analyzer runs per file; failures are recorded on the entry and never
// abort the corpus. Labels map path -> family.
CorpusIndex build_index(const std::vector<std::string>& paths,
                        const std::map<std::string, std::string>& labels = {},
                        const std::vector<packlab::PackerRule>& rules = packlab::default_rules(),
                        unsigned jobs = 0);

// in-memory variant: (id, bytes, optional family)
struct MemorySample {
    std::string id;
    Bytes bytes;
    std::optional<std::string> family;
};
CorpusIndex build_index_from_memory(const std::vector<MemorySample>& samples,
                                    const std::vector<packlab::PackerRule>& rules =
                                        packlab::default_rules(),
                                    unsigned jobs = 0);

std::string index_to_json(const CorpusIndex& index);
CorpusIndex index_from_json(const std::string& text);

struct SimilarityEdge {
    uint32_t a = 0, b = 0;  // entry indexes, a < b
    int ssdeep_score = 0;
    int tlsh_distance = -1;  // -1 when either digest is missing
};

enum class Combinator { Or, And };

struct ClusterParams {
    int ssdeep_min = 70;     // edge requires score strictly above this
    int tlsh_max = 100;      // edge requires distance strictly below this
    Combinator combinator = Combinator::Or;
    size_t min_size = 10;    // components below this are kept but not displayed
};

struct ClusterGraph {
    std::vector<std::string> node_ids;
    std::vector<SimilarityEdge> edges;
    std::vector<std::vector<uint32_t>> components;  // sorted members, all sizes
    std::vector<size_t> displayed;                  // indexes into components
};

ClusterGraph cluster(const CorpusIndex& index, const ClusterParams& params = {}, unsigned jobs = 0);

std::string clusters_json(const CorpusIndex& index, const ClusterGraph& graph);
// plain node/edge lists for external graph tooling
std::string nodes_csv(const CorpusIndex& index, const ClusterGraph& graph);
std::string edges_csv(const CorpusIndex& index, const ClusterGraph& graph);

struct Discriminator {
    std::string family;
    std::string kind;   // section-md5 | section-name | section-absence | imphash | packer-id
    std::string value;
    size_t support = 0;
    size_t family_total = 0;
    double exclusivity = 0.0;
    std::string flag;  // unique | group | packer-majority
    std::vector<std::string> group;  // other families sharing a group value
};

struct DiscriminatorParams {
    double min_coverage = 0.9;   // support / family_total
    size_t max_group = 3;        // largest family set for a group flag
    double packer_majority = 0.9;
};

// throws MissingLabels when no entry carries a family
std::vector<Discriminator> mine_discriminators(const CorpusIndex& index,
                                               const DiscriminatorParams& params = {});

std::string discriminators_csv(const std::vector<Discriminator>& rows);

}  // namespace packscope::structcluster
