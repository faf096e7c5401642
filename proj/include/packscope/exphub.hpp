#pragma once

#include "packscope/common.hpp"
#include "packscope/detectors.hpp"
#include "packscope/packlab.hpp"
#include "packscope/structcluster.hpp"

#include <map>
#include <memory>
#include <optional>

namespace packscope::exphub {

// ---- synthetic corpus ----

struct FamilySpec {
    std::string name;
    std::string label;  // "benign" | "malicious"
    size_t count = 0;
    uint64_t template_seed = 0;  // drives layout, textures, shared sections
    std::vector<pe::ImportEntry> imports;
    std::vector<std::string> string_pool;      // planted printable strings
    std::vector<std::string> ioc_strings;      // url/ip/registry shaped
    std::string shared_section_name = ".fdata";
    uint64_t shared_section_seed = 0;          // same seed => same bytes across families
    double certificate_fraction = 0.0;
    double high_entropy_resource_fraction = 0.0;
    bool installer_style = false;  // .data carries a compressed-looking blob
    size_t resource_size = 2048;
    size_t base_size_lo = 33000, base_size_hi = 38000;
};

struct PackingPolicyEntry {
    std::string profile;
    double fraction = 0.0;
};

struct SyntheticCorpusSpec {
    std::vector<FamilySpec> families;
    size_t benign_count = 0;  // spread over built-in benign templates
    double benign_certificate_fraction = 0.65;
    // key: family name, or "benign"/"malicious" for whole classes
    std::map<std::string, std::vector<PackingPolicyEntry>> packing_policy;
    uint64_t seed = 0;

    std::string to_json() const;
    static SyntheticCorpusSpec from_json(const std::string& text);
};

struct CorpusSample {
    std::string id;
    std::shared_ptr<const Bytes> bytes;
    std::string label;   // benign | malicious
    std::string family;
    std::optional<std::string> packer;  // profile applied at generation time
    uint32_t variant = 0;
};

struct GeneratedCorpus {
    std::vector<CorpusSample> samples;
    uint64_t seed = 0;

    std::string manifest_json() const;
};

// the spec used by the shipped demo corpus and the acceptance runs
SyntheticCorpusSpec demo_spec(uint64_t seed);

// ablation variant: every benign file signed, no malicious file signed
SyntheticCorpusSpec ablation_spec(uint64_t seed);

// deterministic in spec.seed; throws SpecInvalid
GeneratedCorpus generate_corpus(const SyntheticCorpusSpec& spec, unsigned jobs = 0);

void write_corpus(const GeneratedCorpus& corpus, const std::string& dir);
GeneratedCorpus load_corpus(const std::string& dir);

structcluster::CorpusIndex index_corpus(const GeneratedCorpus& corpus, unsigned jobs = 0);

// ---- experiment protocols ----

struct ExperimentPlan {
    std::string id;      // I-A, I-B, II, III, IV, V-A, V-B, VI-A, VI-B, VII-A, VII-B,
                         // ablation-mangle
    int scale = 100;     // divisor applied to the base counts
    std::vector<detect::ModelKind> detectors;
    uint64_t seed = 0;
    detect::TrainConfig train;  // desk-scale defaults, see default_plan()
};

ExperimentPlan default_plan(const std::string& id, int scale = 100, uint64_t seed = 7);
const std::vector<std::string>& plan_ids();

struct FindingOutcome {
    std::string id;
    bool pass = false;
    double margin = 0.0;  // distance to the threshold, positive = passed by
    std::string detail;
};

struct ExperimentResult {
    std::string plan_id;
    uint64_t seed = 0;
    int scale = 0;
    // cells keyed by detector kind then arm name (deterministic order)
    std::map<std::string, std::map<std::string, detect::EvalReport>> cells;
    // curves keyed by detector, then curve name -> (x, value) points
    std::map<std::string, std::map<std::string, std::vector<std::pair<int, double>>>> curves;
    std::vector<FindingOutcome> findings;

    std::string to_json() const;
    // rows = detector/metric, columns = unpacked + packer subsets
    std::string table_csv() const;
    std::string curves_csv() const;
};

// throws PlanInfeasible when scaled counts drop below viability
ExperimentResult run_experiment(const ExperimentPlan& plan, const GeneratedCorpus& corpus,
                                unsigned jobs = 0);

// evaluates the directional properties registered for the result's plan
std::vector<FindingOutcome> check_findings(const ExperimentResult& result);
// cross-plan properties (same-packer training vs withheld-packer training)
std::vector<FindingOutcome> check_findings(const std::vector<ExperimentResult>& results);

// Spearman rank correlation with average ranks on ties
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace packscope::exphub
