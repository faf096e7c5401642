#include "packscope/exphub.hpp"

#include "packscope/features.hpp"
#include "packscope/md5.hpp"
#include "packscope/pe.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace packscope::exphub {

namespace fs = std::filesystem;
using detect::LabeledSample;
using detect::ModelKind;
using detect::Split;

namespace {

// ---- corpus texture builders ----

Bytes opcode_texture(Rng rng, size_t len, uint64_t family_tint) {
    static constexpr uint8_t base_ops[] = {0x55, 0x8B, 0x89, 0x83, 0xE8, 0xFF, 0x53, 0x56,
                                           0x57, 0x0F, 0x74, 0x75, 0xC3, 0x8D, 0x33, 0x3B};
    // rotate the common set per family so byte histograms differ
    uint8_t ops[16];
    for (int i = 0; i < 16; ++i)
        ops[i] = static_cast<uint8_t>(base_ops[(i + family_tint) % 16] + (family_tint % 5));
    Bytes out(len);
    for (size_t i = 0; i < len; ++i) {
        if (rng.below(5) == 0)
            out[i] = static_cast<uint8_t>(rng.below(256));
        else
            out[i] = ops[rng.below(16)];
    }
    return out;
}

// self-extracting-installer payload: a compressed-looking blob with marker
// stuffing, the everyday benign reason for high-ish entropy regions
Bytes installer_blob(Rng rng, size_t len) {
    Bytes out;
    out.reserve(len);
    size_t i = 0;
    while (out.size() < len) {
        const uint64_t v = rng.next();
        for (int b = 0; b < 8 && out.size() < len; ++b) {
            out.push_back(static_cast<uint8_t>(v >> (8 * b)));
            if (++i % 3 == 0 && out.size() < len) out.push_back(0x00);
        }
    }
    out.resize(len);
    return out;
}

Bytes data_texture(Rng rng, size_t len, uint64_t family_tint) {
    // repeated family block with sparse noise and zero runs; compresses well
    Bytes block = Rng(family_tint * 0x9E37 + 5).bytes(64);
    Bytes out(len);
    size_t i = 0;
    while (i < len) {
        if (rng.below(4) == 0) {
            const size_t run = std::min<size_t>(48 + rng.below(160), len - i);
            std::fill_n(out.begin() + static_cast<ptrdiff_t>(i), run, uint8_t{0});
            i += run;
        } else {
            const size_t run = std::min<size_t>(64, len - i);
            for (size_t k = 0; k < run; ++k)
                out[i + k] = rng.below(16) == 0 ? static_cast<uint8_t>(rng.below(256)) : block[k];
            i += run;
        }
    }
    return out;
}

void append_string(Bytes& out, const std::string& s) {
    out.push_back(0);
    out.insert(out.end(), s.begin(), s.end());
    out.push_back(0);
}

Bytes strings_section(Rng rng, const FamilySpec& fam, size_t target_len) {
    Bytes out;
    for (const auto& s : fam.string_pool) append_string(out, s);
    for (const auto& s : fam.ioc_strings) append_string(out, s);
    // per-file unique identifiers keep files distinct
    int salt = 0;
    while (out.size() + 24 < target_len) {
        std::string s = "sym_" + std::to_string(rng.next() % 100000) + "_" +
                        std::to_string(salt++);
        while (s.size() < 10 + rng.below(14))
            s.push_back(static_cast<char>('a' + rng.below(26)));
        append_string(out, s);
    }
    out.resize(target_len, 0);
    return out;
}

Bytes icon_resource(Rng rng, size_t len, uint64_t family_tint) {
    Bytes out(len);
    const uint8_t base = static_cast<uint8_t>(0x90 + (family_tint % 7) * 12);
    for (size_t i = 0; i < len; ++i) {
        const size_t band = (i / 96) % 3;
        out[i] = band == 2 ? static_cast<uint8_t>(rng.below(256))
                           : static_cast<uint8_t>(base + band * 16 + rng.below(6));
    }
    return out;
}

Bytes fake_certificate(Rng rng, size_t len) {
    static const char b64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    Bytes out;
    out.reserve(len);
    out.push_back(0x30);
    out.push_back(0x82);
    out.push_back(static_cast<uint8_t>(len >> 8));
    out.push_back(static_cast<uint8_t>(len & 0xFF));
    while (out.size() < len) {
        if (rng.below(6) == 0)
            for (int i = 0; i < 12 && out.size() < len; ++i) out.push_back(0);
        else
            out.push_back(static_cast<uint8_t>(b64[rng.below(64)]));
    }
    return out;
}

Bytes build_family_file(const FamilySpec& fam, uint64_t corpus_seed, size_t index) {
    Rng rng = Rng(corpus_seed).fork(fam.name).fork(index);
    const uint64_t tint = Rng::fnv1a64(fam.name) ^ fam.template_seed;

    const size_t base =
        fam.base_size_lo + rng.below(std::max<size_t>(1, fam.base_size_hi - fam.base_size_lo));
    // class- and family-informative sections live up front where byte-window
    // detectors can see them under truncation; the bulk filler sits at the tail
    const size_t text_len = 4608 + rng.below(1024);
    const size_t rdata_len = 2560 + rng.below(1024);
    const size_t shared_len = 1024;
    const size_t rsrc_len = fam.resource_size;
    const size_t head = text_len + rdata_len + shared_len + rsrc_len;
    const size_t data_len = base > head + 4096 ? base - head : 4096;

    pe::PeBuildSpec spec;
    spec.timestamp = 0x5E000000u + static_cast<uint32_t>(rng.below(1u << 24));
    spec.sections.push_back({".text", opcode_texture(rng.fork("text"), text_len, tint),
                             0x60000020u, 0});
    spec.sections.push_back({".rdata", strings_section(rng.fork("strings"), fam, rdata_len),
                             0x40000040u, 0});
    spec.sections.push_back(
        {fam.shared_section_name,
         Rng(fam.shared_section_seed ? fam.shared_section_seed : tint).bytes(shared_len),
         0x40000040u, 0});
    const bool noisy_rsrc = rng.uniform() < fam.high_entropy_resource_fraction;
    spec.sections.push_back({".rsrc",
                             noisy_rsrc ? rng.fork("rsrc").bytes(rsrc_len)
                                        : icon_resource(rng.fork("rsrc"), rsrc_len, tint),
                             0x40000040u, 0});
    spec.sections.push_back({".data", data_texture(rng.fork("data"), data_len, tint),
                             0xC0000040u, 0});
    spec.imports = fam.imports;
    if (rng.uniform() < fam.certificate_fraction)
        spec.certificate = fake_certificate(rng.fork("cert"), 1200 + rng.below(512));
    if (rng.below(4) == 0) {
        Bytes overlay;
        append_string(overlay, "setup configuration " + std::to_string(rng.below(1000)));
        spec.overlay = overlay;
    }
    return pe::build_pe(spec);
}

const std::vector<std::string>& benign_import_pools() {
    static const std::vector<std::string> pools = {
        "kernel32:createfilea,readfile,writefile,closehandle;user32:messageboxa,loadstringa",
        "kernel32:getmodulehandlea,heapalloc,heapfree;gdi32:bitblt,createcompatibledc",
        "kernel32:createfilew,getfilesize;comdlg32:getopenfilenamea;user32:dialogboxparama",
        "kernel32:initializecriticalsection;shell32:shellexecutea;user32:createwindowexa",
        "kernel32:getcommandlinea,exitprocess;ole32:coinitialize;user32:showwindow",
        "kernel32:virtualquery,getsystemtimeasfiletime;version:getfileversioninfoa",
    };
    return pools;
}

const std::vector<std::string>& malicious_import_pools() {
    static const std::vector<std::string> pools = {
        "kernel32:createfilea,writefile;wininet:internetopena,internetconnecta,httpsendrequesta",
        "kernel32:createprocessa;ws2_32:socket,connect,send,recv",
        "advapi32:regopenkeyexa,regsetvalueexa,cryptencrypt;kernel32:getmodulefilenamea",
        "kernel32:openprocess,writeprocessmemory,createremotethread;psapi:enumprocesses",
        "urlmon:urldownloadtofilea;kernel32:winexec,getenvironmentvariablea",
        "ws2_32:wsastartup,gethostbyname;advapi32:regcreatekeyexa;kernel32:copyfilea",
    };
    return pools;
}

std::vector<pe::ImportEntry> parse_import_pool(const std::string& pool) {
    std::vector<pe::ImportEntry> out;
    std::stringstream dlls(pool);
    std::string part;
    while (std::getline(dlls, part, ';')) {
        const auto colon = part.find(':');
        pe::ImportEntry e;
        e.dll = part.substr(0, colon);
        std::stringstream fns(part.substr(colon + 1));
        std::string fn;
        while (std::getline(fns, fn, ',')) e.functions.push_back(fn);
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<std::string> benign_strings(int variant) {
    std::vector<std::string> out = {
        "Software concludes initialization",
        "DisplayConfigurationPanel",
        "LoadLocalizedResources",
    };
    for (int r = 0; r < 3; ++r) {
        out.push_back("https://schemas.example.com/ui/layout" + std::to_string(variant) + "/v" +
                      std::to_string(r));
        out.push_back("https://update.vendor" + std::to_string(variant) + ".example/check/" +
                      std::to_string(r));
        out.push_back("http://telemetry.vendor" + std::to_string(variant) + ".example/ping" +
                      std::to_string(r));
    }
    return out;
}

std::vector<std::string> malicious_iocs(int variant) {
    std::vector<std::string> out;
    for (int r = 0; r < 3; ++r) {
        out.push_back("http://c2-node" + std::to_string(variant) + ".bad.example/gate.php?id=" +
                      std::to_string(r));
        out.push_back("http://drop" + std::to_string(variant) + ".exfil.example/u/" +
                      std::to_string(r));
        out.push_back("https://panel" + std::to_string(variant) + ".bot.example/task" +
                      std::to_string(r));
        out.push_back("10.66." + std::to_string(40 + variant) + "." + std::to_string(10 + r));
        out.push_back("185.12." + std::to_string(100 + variant) + "." + std::to_string(5 + r));
    }
    out.push_back("HKEY_LOCAL_MACHINE\\Software\\Microsoft\\Windows\\CurrentVersion\\Run");
    out.push_back("HKEY_CURRENT_USER\\Software\\Classes\\exefile\\shell");
    out.push_back("HKEY_LOCAL_MACHINE\\System\\CurrentControlSet\\Services\\netsvc");
    return out;
}

}  // namespace

SyntheticCorpusSpec ablation_spec(uint64_t seed) {
    SyntheticCorpusSpec spec = demo_spec(seed);
    spec.benign_certificate_fraction = 1.0;
    return spec;
}

SyntheticCorpusSpec demo_spec(uint64_t seed) {
    SyntheticCorpusSpec spec;
    spec.seed = seed;
    spec.benign_count = 420;
    for (int f = 0; f < 6; ++f) {
        FamilySpec fam;
        fam.name = "mal-" + std::string(1, static_cast<char>('a' + f));
        fam.label = "malicious";
        fam.count = 70;
        fam.template_seed = 0xA100 + static_cast<uint64_t>(f);
        fam.imports = parse_import_pool(malicious_import_pools()[f]);
        // the noise-blob families keep their indicators inside the encrypted
        // config rather than as plaintext strings
        if (f < 4) fam.ioc_strings = malicious_iocs(f);
        fam.string_pool = {"DispatchCommand", "payload_stage" + std::to_string(f)};
        fam.shared_section_seed = 0xFA0000 + static_cast<uint64_t>(f);
        fam.certificate_fraction = 0.0;
        // two families ship noise-heavy blobs, the classic encrypted-config look
        fam.high_entropy_resource_fraction = (f >= 4) ? 1.0 : 0.3;
        if (f >= 4) fam.resource_size = 4096;
        spec.families.push_back(std::move(fam));
    }
    return spec;
}

GeneratedCorpus generate_corpus(const SyntheticCorpusSpec& spec, unsigned jobs) {
    if (spec.families.empty() && spec.benign_count == 0)
        throw SpecInvalid("corpus spec generates no files");
    const double benign_cert_fraction = spec.benign_certificate_fraction;

    std::vector<FamilySpec> families = spec.families;
    if (spec.benign_count > 0) {
        const size_t templates = benign_import_pools().size();
        for (size_t t = 0; t < templates; ++t) {
            FamilySpec fam;
            fam.name = "ben-" + std::string(1, static_cast<char>('a' + t));
            fam.label = "benign";
            fam.count = spec.benign_count / templates +
                        (t < spec.benign_count % templates ? 1 : 0);
            fam.template_seed = 0xBE00 + t;
            fam.imports = parse_import_pool(benign_import_pools()[t]);
            fam.installer_style = (t % 3 == 2);  // a third ship self-extractors
            fam.string_pool = fam.installer_style
                                  ? std::vector<std::string>{"ExtractTemporaryPayload",
                                                             "SetupCleanupPass"}
                                  : benign_strings(static_cast<int>(t));
            fam.shared_section_seed = 0x500000 + t;
            fam.certificate_fraction = benign_cert_fraction;
            fam.high_entropy_resource_fraction = 0.25;
            families.push_back(std::move(fam));
        }
    }
    for (const auto& f : families) {
        if (f.label != "benign" && f.label != "malicious")
            throw SpecInvalid("family label must be benign or malicious: " + f.name);
        if (f.count == 0) throw SpecInvalid("family with zero count: " + f.name);
    }

    struct Job {
        const FamilySpec* fam;
        size_t index;
    };
    std::vector<Job> jobs_list;
    for (const auto& f : families)
        for (size_t i = 0; i < f.count; ++i) jobs_list.push_back({&f, i});

    GeneratedCorpus corpus;
    corpus.seed = spec.seed;
    corpus.samples.resize(jobs_list.size());

    parallel_for(jobs_list.size(), jobs, [&](size_t j) {
        const auto& [fam, i] = jobs_list[j];
        Bytes raw = build_family_file(*fam, spec.seed, i);

        // packing policy: family key wins over the class key
        const std::vector<PackingPolicyEntry>* policy = nullptr;
        if (auto it = spec.packing_policy.find(fam->name); it != spec.packing_policy.end())
            policy = &it->second;
        else if (auto it2 = spec.packing_policy.find(fam->label);
                 it2 != spec.packing_policy.end())
            policy = &it2->second;

        CorpusSample s;
        s.id = fam->name + "-" + std::to_string(i);
        s.label = fam->label;
        s.family = fam->name;
        if (policy) {
            Rng prng = Rng(spec.seed).fork("packing").fork(fam->name).fork(i);
            double u = prng.uniform();
            for (const auto& entry : *policy) {
                if (u < entry.fraction) {
                    s.packer = entry.profile;
                    s.variant = static_cast<uint32_t>(prng.below(4));
                    raw = packlab::pack(
                        view(raw),
                        packlab::profile(entry.profile, packlab::kDefaultProfileSeed, s.variant));
                    break;
                }
                u -= entry.fraction;
            }
        }
        s.bytes = std::make_shared<const Bytes>(std::move(raw));
        corpus.samples[j] = std::move(s);
    });
    return corpus;
}

std::string GeneratedCorpus::manifest_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["files"] = nlohmann::json::array();
    for (const auto& s : samples) {
        nlohmann::json e;
        e["id"] = s.id;
        e["label"] = s.label;
        e["family"] = s.family;
        e["packer"] = s.packer ? nlohmann::json(*s.packer) : nlohmann::json(nullptr);
        e["variant"] = s.variant;
        j["files"].push_back(std::move(e));
    }
    return j.dump(2);
}

void write_corpus(const GeneratedCorpus& corpus, const std::string& dir) {
    fs::create_directories(dir);
    for (const auto& s : corpus.samples) {
        std::ofstream out(fs::path(dir) / (s.id + ".bin"), std::ios::binary);
        out.write(reinterpret_cast<const char*>(s.bytes->data()),
                  static_cast<std::streamsize>(s.bytes->size()));
    }
    std::ofstream m(fs::path(dir) / "manifest.json");
    m << corpus.manifest_json();
}

GeneratedCorpus load_corpus(const std::string& dir) {
    std::ifstream m(fs::path(dir) / "manifest.json");
    if (!m) throw NoFiles("no manifest.json in " + dir);
    nlohmann::json j;
    m >> j;
    GeneratedCorpus corpus;
    corpus.seed = j.value("seed", 0ull);
    for (const auto& e : j["files"]) {
        CorpusSample s;
        s.id = e.at("id").get<std::string>();
        s.label = e.at("label").get<std::string>();
        s.family = e.at("family").get<std::string>();
        if (!e["packer"].is_null()) s.packer = e["packer"].get<std::string>();
        s.variant = e.value("variant", 0u);
        std::ifstream in(fs::path(dir) / (s.id + ".bin"), std::ios::binary);
        if (!in) throw NoFiles("missing corpus file " + s.id);
        Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        s.bytes = std::make_shared<const Bytes>(std::move(bytes));
        corpus.samples.push_back(std::move(s));
    }
    if (corpus.samples.empty()) throw NoFiles("empty corpus in " + dir);
    return corpus;
}

structcluster::CorpusIndex index_corpus(const GeneratedCorpus& corpus, unsigned jobs) {
    std::vector<structcluster::MemorySample> mem;
    mem.reserve(corpus.samples.size());
    for (const auto& s : corpus.samples)
        mem.push_back({s.id, *s.bytes, s.family});
    return structcluster::build_index_from_memory(mem, packlab::default_rules(), jobs);
}

std::string SyntheticCorpusSpec::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["benign_count"] = benign_count;
    j["benign_certificate_fraction"] = benign_certificate_fraction;
    j["families"] = nlohmann::json::array();
    for (const auto& f : families) {
        nlohmann::json e;
        e["name"] = f.name;
        e["label"] = f.label;
        e["count"] = f.count;
        e["template_seed"] = f.template_seed;
        e["shared_section_name"] = f.shared_section_name;
        e["shared_section_seed"] = f.shared_section_seed;
        e["certificate_fraction"] = f.certificate_fraction;
        e["high_entropy_resource_fraction"] = f.high_entropy_resource_fraction;
        e["installer_style"] = f.installer_style;
        e["resource_size"] = f.resource_size;
        e["base_size_lo"] = f.base_size_lo;
        e["base_size_hi"] = f.base_size_hi;
        e["ioc_strings"] = f.ioc_strings;
        e["string_pool"] = f.string_pool;
        nlohmann::json imports = nlohmann::json::array();
        for (const auto& imp : f.imports) {
            nlohmann::json ie;
            ie["dll"] = imp.dll;
            ie["functions"] = imp.functions;
            imports.push_back(std::move(ie));
        }
        e["imports"] = std::move(imports);
        j["families"].push_back(std::move(e));
    }
    j["packing_policy"] = nlohmann::json::object();
    for (const auto& [key, entries] : packing_policy) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& p : entries) arr.push_back({{"profile", p.profile}, {"fraction", p.fraction}});
        j["packing_policy"][key] = std::move(arr);
    }
    return j.dump(2);
}

SyntheticCorpusSpec SyntheticCorpusSpec::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw SpecInvalid(std::string("corpus spec json: ") + e.what());
    }
    SyntheticCorpusSpec spec;
    spec.seed = j.value("seed", 0ull);
    spec.benign_count = j.value("benign_count", size_t{0});
    spec.benign_certificate_fraction = j.value("benign_certificate_fraction", 0.65);
    for (const auto& e : j.value("families", nlohmann::json::array())) {
        FamilySpec f;
        f.name = e.at("name").get<std::string>();
        f.label = e.at("label").get<std::string>();
        f.count = e.at("count").get<size_t>();
        f.template_seed = e.value("template_seed", 0ull);
        f.shared_section_name = e.value("shared_section_name", ".fdata");
        f.shared_section_seed = e.value("shared_section_seed", 0ull);
        f.certificate_fraction = e.value("certificate_fraction", 0.0);
        f.high_entropy_resource_fraction = e.value("high_entropy_resource_fraction", 0.0);
        f.installer_style = e.value("installer_style", false);
        f.resource_size = e.value("resource_size", size_t{2048});
        f.base_size_lo = e.value("base_size_lo", size_t{33000});
        f.base_size_hi = e.value("base_size_hi", size_t{38000});
        if (e.contains("ioc_strings")) f.ioc_strings = e["ioc_strings"].get<std::vector<std::string>>();
        if (e.contains("string_pool")) f.string_pool = e["string_pool"].get<std::vector<std::string>>();
        for (const auto& ie : e.value("imports", nlohmann::json::array())) {
            pe::ImportEntry imp;
            imp.dll = ie.at("dll").get<std::string>();
            imp.functions = ie.at("functions").get<std::vector<std::string>>();
            f.imports.push_back(std::move(imp));
        }
        spec.families.push_back(std::move(f));
    }
    if (j.contains("packing_policy"))
        for (const auto& [key, arr] : j["packing_policy"].items()) {
            std::vector<PackingPolicyEntry> entries;
            for (const auto& p : arr)
                entries.push_back({p.at("profile").get<std::string>(),
                                   p.at("fraction").get<double>()});
            spec.packing_policy[key] = std::move(entries);
        }
    return spec;
}

// ---- experiment machinery ----

namespace {

struct Pools {
    std::vector<const CorpusSample*> benign;
    std::vector<const CorpusSample*> malicious;
};

Pools unpacked_pools(const GeneratedCorpus& corpus, uint64_t seed) {
    Pools pools;
    for (const auto& s : corpus.samples) {
        if (s.packer) continue;  // experiments pack on the fly
        (s.label == "malicious" ? pools.malicious : pools.benign).push_back(&s);
    }
    auto shuffle = [&](std::vector<const CorpusSample*>& v, const char* tag) {
        Rng rng = Rng(seed).fork(tag);
        for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
    };
    shuffle(pools.benign, "pool-benign");
    shuffle(pools.malicious, "pool-malicious");
    return pools;
}

LabeledSample as_sample(const CorpusSample& s, Split split) {
    return LabeledSample{s.id, s.bytes, s.label, s.packer, split};
}

LabeledSample packed_sample(const CorpusSample& s, const std::string& profile_name,
                            uint32_t variant, Split split, const std::string& id_tag) {
    auto prof = packlab::profile(profile_name, packlab::kDefaultProfileSeed, variant);
    Bytes packed = packlab::pack(view(*s.bytes), prof);
    return LabeledSample{s.id + "+" + id_tag, std::make_shared<const Bytes>(std::move(packed)),
                         s.label, profile_name, split};
}

LabeledSample mangled_sample(const CorpusSample& s, packlab::MangleOptions opt, Split split,
                             const std::string& id_tag) {
    auto prof = packlab::profile("sim-mangle");
    Bytes packed = packlab::pack_mangle(view(*s.bytes), prof, opt);
    return LabeledSample{s.id + "+" + id_tag, std::make_shared<const Bytes>(std::move(packed)),
                         s.label, std::string("sim-mangle"), split};
}

struct BaseSplit {
    std::vector<const CorpusSample*> train_b, train_m, val_b, val_m, test_b, test_m;
    std::vector<const CorpusSample*> extra_b, extra_m;  // pool remainder
};

size_t scaled(size_t base, int scale) { return base / static_cast<size_t>(scale); }

void require_viable(size_t train_total, size_t val_total, size_t test_total,
                    const std::string& what) {
    if (train_total < 20 || val_total + test_total < 4 || test_total < 2)
        throw PlanInfeasible(what + ": scaled counts below viability (train " +
                             std::to_string(train_total) + ", val " + std::to_string(val_total) +
                             ", test " + std::to_string(test_total) + ")");
}

BaseSplit base_split(const GeneratedCorpus& corpus, int scale, uint64_t seed) {
    Pools pools = unpacked_pools(corpus, seed);
    const size_t n = scaled(22500, scale);
    if (pools.benign.size() < n || pools.malicious.size() < n)
        throw PlanInfeasible("corpus smaller than the scaled plan (need " + std::to_string(n) +
                             " unpacked per class)");
    const size_t n_train = n * 8 / 10;
    const size_t n_val = n / 10;
    const size_t n_test = n - n_train - n_val;
    require_viable(2 * n_train, 2 * n_val, 2 * n_test, "base split");

    BaseSplit out;
    auto cut = [&](std::vector<const CorpusSample*>& pool,
                   std::vector<const CorpusSample*>& train, std::vector<const CorpusSample*>& val,
                   std::vector<const CorpusSample*>& test,
                   std::vector<const CorpusSample*>& extra) {
        train.assign(pool.begin(), pool.begin() + static_cast<ptrdiff_t>(n_train));
        val.assign(pool.begin() + static_cast<ptrdiff_t>(n_train),
                   pool.begin() + static_cast<ptrdiff_t>(n_train + n_val));
        test.assign(pool.begin() + static_cast<ptrdiff_t>(n_train + n_val),
                    pool.begin() + static_cast<ptrdiff_t>(n));
        extra.assign(pool.begin() + static_cast<ptrdiff_t>(n), pool.end());
    };
    cut(pools.benign, out.train_b, out.val_b, out.test_b, out.extra_b);
    cut(pools.malicious, out.train_m, out.val_m, out.test_m, out.extra_m);
    return out;
}

std::vector<LabeledSample> to_samples(const std::vector<const CorpusSample*>& v, Split split) {
    std::vector<LabeledSample> out;
    out.reserve(v.size());
    for (const auto* s : v) out.push_back(as_sample(*s, split));
    return out;
}

const std::string& profile_at(size_t i, uint64_t salt) {
    const auto& names = packlab::profile_names();
    return names[(i + salt) % names.size()];
}

// every test file packed with every profile, tagged for grouped evaluation
std::vector<LabeledSample> packed_eval_set(const std::vector<const CorpusSample*>& test,
                                           uint64_t seed, unsigned jobs,
                                           const std::vector<std::string>& profiles) {
    struct Task {
        const CorpusSample* s;
        const std::string* prof;
    };
    std::vector<Task> tasks;
    for (const auto* s : test)
        for (const auto& p : profiles) tasks.push_back({s, &p});
    std::vector<LabeledSample> out(tasks.size());
    parallel_for(tasks.size(), jobs, [&](size_t i) {
        Rng rng = Rng(seed).fork("eval-variant").fork(tasks[i].s->id).fork(*tasks[i].prof);
        out[i] = packed_sample(*tasks[i].s, *tasks[i].prof,
                               static_cast<uint32_t>(rng.below(4)), Split::Test,
                               "eval-" + *tasks[i].prof);
    });
    return out;
}

// in-the-wild packer prevalence is heavily skewed; additions sampled from a
// pool follow that shape so rare profiles accumulate slowly with the budget
const std::vector<double>& profile_prevalence() {
    static const std::vector<double> w = {
        0.40,  // sim-upx
        0.20,  // sim-mpress
        0.08,  // sim-hyperion
        0.03,  // sim-nimcrypt
        0.05,  // sim-amber
        0.04,  // sim-mangle
        0.12,  // sim-themida
        0.08,  // sim-enigma
    };
    return w;
}

// deterministic largest-remainder stream: prefixes of the assignment are
// themselves prevalence-shaped, so sweep points nest
std::vector<size_t> weighted_assignment(size_t n, const std::vector<double>& weights) {
    std::vector<size_t> out(n);
    std::vector<double> given(weights.size(), 0.0);
    for (size_t i = 0; i < n; ++i) {
        size_t best = 0;
        double best_deficit = -1e18;
        for (size_t p = 0; p < weights.size(); ++p) {
            const double deficit = weights[p] * static_cast<double>(i + 1) - given[p];
            if (deficit > best_deficit) {
                best_deficit = deficit;
                best = p;
            }
        }
        given[best] += 1.0;
        out[i] = best;
    }
    return out;
}

std::vector<LabeledSample> packed_additions(const std::vector<const CorpusSample*>& pool,
                                            size_t count, uint64_t seed, unsigned jobs,
                                            const std::vector<std::string>& profiles,
                                            const std::string& tag,
                                            const std::vector<double>* weights = nullptr) {
    if (pool.size() < count)
        throw PlanInfeasible("not enough unpacked samples for packed additions");
    std::vector<LabeledSample> out(count);
    Rng salt_rng = Rng(seed).fork(tag);
    const uint64_t salt = salt_rng.next();
    std::vector<size_t> assignment;
    if (weights) assignment = weighted_assignment(count, *weights);
    parallel_for(count, jobs, [&](size_t i) {
        const auto& prof =
            weights ? profiles[assignment[i]] : profiles[(i + salt) % profiles.size()];
        Rng rng = Rng(seed).fork(tag).fork(pool[i]->id);
        out[i] = packed_sample(*pool[i], prof, static_cast<uint32_t>(rng.below(4)), Split::Train,
                               tag + "-" + prof);
    });
    return out;
}

detect::TrainConfig plan_train_config(uint64_t cell_seed, const detect::TrainConfig& base) {
    detect::TrainConfig cfg = base;
    cfg.gbt.seed = cell_seed;
    cfg.byte_conv.seed = cell_seed;
    cfg.image_linear.seed = cell_seed;
    return cfg;
}

detect::EvalReport run_cell(ModelKind kind, const std::vector<LabeledSample>& train,
                            const std::vector<LabeledSample>& eval_set, detect::GroupBy group_by,
                            const detect::TrainConfig& cfg, unsigned jobs) {
    std::vector<LabeledSample> all = train;
    all.insert(all.end(), eval_set.begin(), eval_set.end());
    auto model = detect::train_model(kind, all, cfg);
    return detect::evaluate(model, all, group_by, jobs);
}

double group_metric(const detect::EvalReport& report, const std::string& group,
                    const std::string& metric) {
    auto it = report.groups.find(group);
    if (it == report.groups.end()) return 0.0;
    if (metric == "tpr") return it->second.tpr;
    if (metric == "tnr") return it->second.tnr;
    return it->second.accuracy;
}

}  // namespace

const std::vector<std::string>& plan_ids() {
    static const std::vector<std::string> ids = {"I-A",  "I-B",  "II",    "III",
                                                 "IV",   "V-A",  "V-B",   "VI-A",
                                                 "VI-B", "VII-A", "VII-B", "ablation-mangle"};
    return ids;
}

ExperimentPlan default_plan(const std::string& id, int scale, uint64_t seed) {
    if (std::find(plan_ids().begin(), plan_ids().end(), id) == plan_ids().end())
        throw SpecInvalid("unknown experiment plan: " + id);
    ExperimentPlan plan;
    plan.id = id;
    plan.scale = scale;
    plan.seed = seed;
    plan.detectors = {ModelKind::FeatureGbt, ModelKind::ByteConv, ModelKind::ImageLinear};
    if (id == "ablation-mangle") plan.detectors = {ModelKind::FeatureGbt};
    // desk-scale training settings; the model defaults target full-size runs
    plan.train.gbt.min_samples_leaf = 24;
    plan.train.byte_conv.channels = 32;
    plan.train.byte_conv.max_len = 12288;
    plan.train.byte_conv.epochs = 10;
    plan.train.byte_conv.lr = 0.06;
    plan.train.image_linear.epochs = 500;
    plan.train.image_linear.lr = 0.6;
    plan.train.image_linear.width = 128;
    return plan;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    const size_t n = x.size();
    if (n != y.size() || n < 2) return 0.0;
    auto ranks = [](const std::vector<double>& v) {
        const size_t n = v.size();
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), size_t{0});
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && v[order[j + 1]] == v[order[i]]) j++;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (size_t k = i; k <= j; ++k) r[order[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    auto rx = ranks(x), ry = ranks(y);
    double mx = 0, my = 0;
    for (size_t i = 0; i < n; ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double num = 0, dx = 0, dy = 0;
    for (size_t i = 0; i < n; ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    if (dx == 0 || dy == 0) return 0.0;
    return num / std::sqrt(dx * dy);
}

namespace {

// ---- per-plan runners ----

void run_ia_like(const ExperimentPlan& plan, const GeneratedCorpus& corpus, unsigned jobs,
                 ExperimentResult& result) {
    BaseSplit split = base_split(corpus, plan.scale, plan.seed);

    std::vector<LabeledSample> train = to_samples(split.train_b, Split::Train);
    auto tm = to_samples(split.train_m, Split::Train);
    train.insert(train.end(), tm.begin(), tm.end());

    std::vector<const CorpusSample*> test_all = split.test_b;
    test_all.insert(test_all.end(), split.test_m.begin(), split.test_m.end());

    std::vector<LabeledSample> eval_set = to_samples(test_all, Split::Test);
    auto packed = packed_eval_set(test_all, plan.seed, jobs, packlab::profile_names());
    eval_set.insert(eval_set.end(), packed.begin(), packed.end());

    for (ModelKind kind : plan.detectors) {
        const auto cfg =
            plan_train_config(Rng(plan.seed).fork(kind_name(kind)).next(), plan.train);
        auto report = run_cell(kind, train, eval_set, detect::GroupBy::Packer, cfg, jobs);
        report.plan_id = plan.id;
        result.cells[kind_name(kind)]["main"] = std::move(report);
    }
}

void run_ii_or_va(const ExperimentPlan& plan, const GeneratedCorpus& corpus, unsigned jobs,
                  ExperimentResult& result) {
    BaseSplit split = base_split(corpus, plan.scale, plan.seed);
    const bool is_va = plan.id == "V-A";

    std::vector<LabeledSample> base_train = to_samples(split.train_b, Split::Train);
    auto tm = to_samples(split.train_m, Split::Train);
    base_train.insert(base_train.end(), tm.begin(), tm.end());

    auto packed_good = packed_eval_set(split.test_b, plan.seed, jobs, packlab::profile_names());
    auto packed_mal = packed_eval_set(split.test_m, plan.seed, jobs, packlab::profile_names());
    std::vector<const CorpusSample*> test_all = split.test_b;
    test_all.insert(test_all.end(), split.test_m.begin(), split.test_m.end());
    auto unpacked_eval = to_samples(test_all, Split::Test);

    const std::vector<size_t> sweep = {scaled(3600, plan.scale), scaled(7200, plan.scale),
                                       scaled(10800, plan.scale), scaled(14400, plan.scale),
                                       scaled(18000, plan.scale)};
    for (size_t k : sweep)
        if (k < 8) throw PlanInfeasible(plan.id + ": sweep step below one file per profile");

    struct Arm {
        std::string name;
        bool add_mal;
        bool add_good;
    };
    std::vector<Arm> arms;
    if (is_va)
        arms.push_back({"both", true, true});
    else
        arms = {{"packed-malware", true, false}, {"packed-goodware", false, true}};

    for (const auto& arm : arms) {
        for (size_t k : sweep) {
            std::vector<LabeledSample> train = base_train;
            if (arm.add_mal) {
                auto extra = packed_additions(split.extra_m, k, plan.seed, jobs,
                                              packlab::profile_names(), "add-mal",
                                              &profile_prevalence());
                train.insert(train.end(), extra.begin(), extra.end());
            }
            if (arm.add_good) {
                auto extra = packed_additions(split.extra_b, k, plan.seed, jobs,
                                              packlab::profile_names(), "add-good",
                                              &profile_prevalence());
                train.insert(train.end(), extra.begin(), extra.end());
            }
            for (ModelKind kind : plan.detectors) {
                const std::string det = kind_name(kind);
                const auto cfg = plan_train_config(
                    Rng(plan.seed).fork(arm.name).fork(k).fork(det).next(), plan.train);

                std::vector<LabeledSample> eval_set = unpacked_eval;
                eval_set.insert(eval_set.end(), packed_good.begin(), packed_good.end());
                eval_set.insert(eval_set.end(), packed_mal.begin(), packed_mal.end());

                std::vector<LabeledSample> all = train;
                all.insert(all.end(), eval_set.begin(), eval_set.end());
                auto model = detect::train_model(kind, all, cfg);

                auto eval_subset = [&](const std::vector<LabeledSample>& subset) {
                    std::vector<LabeledSample> scoped = train;
                    scoped.insert(scoped.end(), subset.begin(), subset.end());
                    auto rep = detect::evaluate(model, scoped, detect::GroupBy::Packer, jobs);
                    // pooled row alongside the per-packer groups
                    auto pooled = detect::evaluate(model, scoped, detect::GroupBy::None, jobs);
                    rep.groups["all"] = pooled.groups.at("all");
                    return rep;
                };
                auto rep_good = eval_subset(packed_good);
                auto rep_mal = eval_subset(packed_mal);
                auto rep_plain = eval_subset(unpacked_eval);

                const std::string arm_name =
                    arm.name + "+" + std::to_string(k);
                rep_plain.plan_id = plan.id;
                result.cells[det][arm_name + ":unpacked"] = rep_plain;
                result.cells[det][arm_name + ":packed-goodware"] = rep_good;
                result.cells[det][arm_name + ":packed-malware"] = rep_mal;

                auto& curves = result.curves[det];
                curves[arm.name + ":tnr-packed-goodware"].push_back(
                    {static_cast<int>(k), rep_good.groups.at("all").tnr});
                curves[arm.name + ":tpr-packed-malware"].push_back(
                    {static_cast<int>(k), rep_mal.groups.at("all").tpr});
                curves[arm.name + ":accuracy-unpacked"].push_back(
                    {static_cast<int>(k), rep_plain.groups.at("all").accuracy});
            }
        }
    }
}

void run_iii(const ExperimentPlan& plan, const GeneratedCorpus& corpus, unsigned jobs,
             ExperimentResult& result) {
    BaseSplit split = base_split(corpus, plan.scale, plan.seed);
    const std::vector<std::string> good = {"sim-upx", "sim-themida", "sim-enigma", "sim-mpress"};
    const std::vector<std::string> bad = {"sim-hyperion", "sim-amber", "sim-mangle",
                                          "sim-nimcrypt"};

    std::vector<LabeledSample> train;
    {
        auto good_train = packed_additions(split.train_b, split.train_b.size(), plan.seed, jobs,
                                           good, "iii-good");
        auto bad_train = packed_additions(split.train_m, split.train_m.size(), plan.seed, jobs,
                                          bad, "iii-bad");
        train = std::move(good_train);
        train.insert(train.end(), bad_train.begin(), bad_train.end());
    }

    std::vector<const CorpusSample*> test_all = split.test_b;
    test_all.insert(test_all.end(), split.test_m.begin(), split.test_m.end());
    auto eval_set = packed_eval_set(test_all, plan.seed, jobs, packlab::profile_names());

    for (ModelKind kind : plan.detectors) {
        const auto cfg =
            plan_train_config(Rng(plan.seed).fork(kind_name(kind)).next(), plan.train);
        auto report = run_cell(kind, train, eval_set, detect::GroupBy::Packer, cfg, jobs);
        report.plan_id = plan.id;
        result.cells[kind_name(kind)]["main"] = std::move(report);
    }
}

void run_iv(const ExperimentPlan& plan, const GeneratedCorpus& corpus, unsigned jobs,
            ExperimentResult& result) {
    BaseSplit split = base_split(corpus, plan.scale, plan.seed);
    std::vector<const CorpusSample*> pool;
    for (const auto& part : {split.train_b, split.train_m, split.val_b, split.val_m, split.test_b,
                             split.test_m})
        pool.insert(pool.end(), part.begin(), part.end());
    Rng rng = Rng(plan.seed).fork("iv-shuffle");
    for (size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);

    std::vector<std::string> classes = {"none"};
    for (const auto& p : packlab::profile_names()) classes.push_back(p);

    std::vector<LabeledSample> all(pool.size());
    parallel_for(pool.size(), jobs, [&](size_t i) {
        const std::string& cls = classes[i % classes.size()];
        // stratified 80/10/10 by position within each class stripe
        const size_t stripe_index = i / classes.size();
        const size_t stripe_total = (pool.size() + classes.size() - 1 - i % classes.size()) /
                                    classes.size();
        Split split_tag = Split::Train;
        if (stripe_index >= stripe_total * 8 / 10)
            split_tag = stripe_index >= stripe_total * 9 / 10 ? Split::Test : Split::Val;
        LabeledSample s;
        if (cls == "none") {
            s = as_sample(*pool[i], split_tag);
        } else {
            Rng vr = Rng(plan.seed).fork("iv-variant").fork(pool[i]->id);
            s = packed_sample(*pool[i], cls, static_cast<uint32_t>(vr.below(4)), split_tag,
                              "iv-" + cls);
        }
        s.label = cls;  // the packer class is the training label
        all[i] = std::move(s);
    });

    size_t test_total = 0;
    for (const auto& s : all)
        if (s.split == Split::Test) test_total++;
    require_viable(all.size() - test_total, test_total, test_total, "plan IV");

    for (ModelKind kind : plan.detectors) {
        const auto cfg =
            plan_train_config(Rng(plan.seed).fork(kind_name(kind)).next(), plan.train);
        auto model = detect::train_model(kind, all, cfg);
        auto overall = detect::evaluate(model, all, detect::GroupBy::None, jobs);
        auto per_class = detect::evaluate(model, all, detect::GroupBy::Label, jobs);
        overall.plan_id = plan.id;
        per_class.plan_id = plan.id;
        result.cells[kind_name(kind)]["overall"] = std::move(overall);
        result.cells[kind_name(kind)]["per-packer"] = std::move(per_class);
    }
}

void run_vi_or_vii_a(const ExperimentPlan& plan, const GeneratedCorpus& corpus, unsigned jobs,
                     ExperimentResult& result) {
    BaseSplit split = base_split(corpus, plan.scale, plan.seed);
    const bool leave_one_out = plan.id == "VII-A";
    const size_t per_packer = scaled(4000, plan.scale);

    std::vector<LabeledSample> base_train = to_samples(split.train_b, Split::Train);
    auto tm = to_samples(split.train_m, Split::Train);
    base_train.insert(base_train.end(), tm.begin(), tm.end());

    std::vector<const CorpusSample*> test_all = split.test_b;
    test_all.insert(test_all.end(), split.test_m.begin(), split.test_m.end());
    auto unpacked_eval = to_samples(test_all, Split::Test);

    for (const auto& target : packlab::profile_names()) {
        std::vector<LabeledSample> train = base_train;
        for (const auto& prof : packlab::profile_names()) {
            const bool include = leave_one_out ? (prof != target) : (prof == target);
            if (!include) continue;
            auto add_b = packed_additions(split.extra_b, per_packer, plan.seed, jobs, {prof},
                                          "vi-b-" + prof);
            auto add_m = packed_additions(split.extra_m, per_packer, plan.seed, jobs, {prof},
                                          "vi-m-" + prof);
            train.insert(train.end(), add_b.begin(), add_b.end());
            train.insert(train.end(), add_m.begin(), add_m.end());
        }
        auto packed_eval = packed_eval_set(test_all, plan.seed, jobs, {target});
        std::vector<LabeledSample> eval_set = unpacked_eval;
        eval_set.insert(eval_set.end(), packed_eval.begin(), packed_eval.end());

        for (ModelKind kind : plan.detectors) {
            const auto cfg = plan_train_config(
                Rng(plan.seed).fork(target).fork(kind_name(kind)).next(), plan.train);
            auto report =
                run_cell(kind, train, eval_set, detect::GroupBy::Packer, cfg, jobs);
            report.plan_id = plan.id;
            result.cells[kind_name(kind)][target] = std::move(report);
        }
    }
}

// classifier plans share family slicing
struct FamilySlices {
    // per family: train/val/test unpacked
    std::map<std::string, std::array<std::vector<const CorpusSample*>, 3>> families;
};

FamilySlices family_split(const GeneratedCorpus& corpus, size_t per_family, size_t train_n,
                          size_t val_n, uint64_t seed, const std::string& what) {
    std::map<std::string, std::vector<const CorpusSample*>> by_family;
    for (const auto& s : corpus.samples)
        if (!s.packer && s.label == "malicious") by_family[s.family].push_back(&s);

    FamilySlices out;
    for (auto& [fam, files] : by_family) {
        if (files.size() < per_family) continue;  // families below the floor are excluded
        Rng rng = Rng(seed).fork("family").fork(fam);
        for (size_t i = files.size(); i > 1; --i) std::swap(files[i - 1], files[rng.below(i)]);
        files.resize(per_family);
        auto& slices = out.families[fam];
        slices[0].assign(files.begin(), files.begin() + static_cast<ptrdiff_t>(train_n));
        slices[1].assign(files.begin() + static_cast<ptrdiff_t>(train_n),
                         files.begin() + static_cast<ptrdiff_t>(train_n + val_n));
        slices[2].assign(files.begin() + static_cast<ptrdiff_t>(train_n + val_n), files.end());
    }
    if (out.families.size() < 2)
        throw PlanInfeasible(what + ": fewer than two families meet the per-family floor of " +
                             std::to_string(per_family));
    return out;
}

std::vector<LabeledSample> family_samples(const FamilySlices& slices, int which, Split split) {
    std::vector<LabeledSample> out;
    for (const auto& [fam, parts] : slices.families) {
        for (const auto* s : parts[static_cast<size_t>(which)]) {
            LabeledSample ls = as_sample(*s, split);
            ls.label = fam;  // classification target is the family
            out.push_back(std::move(ls));
        }
    }
    return out;
}

void run_classifier_plan(const ExperimentPlan& plan, const GeneratedCorpus& corpus, unsigned jobs,
                         ExperimentResult& result) {
    size_t per_family, train_n, val_n;
    if (plan.id == "I-B" || plan.id == "V-B") {
        per_family = scaled(50, plan.scale);
        train_n = scaled(40, plan.scale);
        val_n = scaled(5, plan.scale);
    } else {  // VI-B, VII-B
        per_family = scaled(250, plan.scale);
        train_n = scaled(200, plan.scale);
        val_n = scaled(25, plan.scale);
    }
    if (per_family < 5 || train_n == 0 || val_n == 0 || train_n + val_n >= per_family)
        throw PlanInfeasible(plan.id + ": scaled per-family counts degenerate");

    FamilySlices slices =
        family_split(corpus, per_family, train_n, val_n, plan.seed, plan.id);
    const size_t fam_count = slices.families.size();
    require_viable(train_n * fam_count, val_n * fam_count,
                   (per_family - train_n - val_n) * fam_count, plan.id);

    auto train_base = family_samples(slices, 0, Split::Train);
    auto test_base = family_samples(slices, 2, Split::Test);

    auto packed_family_samples = [&](const std::vector<LabeledSample>& base, Split split,
                                     const std::vector<std::string>& profiles,
                                     const std::string& tag) {
        std::vector<LabeledSample> out(base.size());
        Rng salt_rng = Rng(plan.seed).fork(tag);
        const uint64_t salt = salt_rng.next();
        parallel_for(base.size(), jobs, [&](size_t i) {
            const auto& prof = profiles[(i + salt) % profiles.size()];
            Rng rng = Rng(plan.seed).fork(tag).fork(base[i].id);
            auto prof_obj = packlab::profile(prof, packlab::kDefaultProfileSeed,
                                             static_cast<uint32_t>(rng.below(4)));
            Bytes packed = packlab::pack(view(*base[i].bytes), prof_obj);
            out[i] = LabeledSample{base[i].id + "+" + tag,
                                   std::make_shared<const Bytes>(std::move(packed)),
                                   base[i].label, prof, split};
        });
        return out;
    };

    auto run_common = [&](const std::vector<LabeledSample>& train,
                          const std::vector<LabeledSample>& eval_set, const std::string& arm) {
        for (ModelKind kind : plan.detectors) {
            const auto cfg = plan_train_config(
                Rng(plan.seed).fork(arm).fork(kind_name(kind)).next(), plan.train);
            auto report = run_cell(kind, train, eval_set, detect::GroupBy::Packer, cfg, jobs);
            report.plan_id = plan.id;
            result.cells[kind_name(kind)][arm] = std::move(report);
        }
    };

    if (plan.id == "I-B" || plan.id == "V-B") {
        std::vector<LabeledSample> train = train_base;
        if (plan.id == "V-B") {
            auto packed = packed_family_samples(train_base, Split::Train,
                                                packlab::profile_names(), "vb-train");
            train.insert(train.end(), packed.begin(), packed.end());
        }
        std::vector<LabeledSample> eval_set = test_base;
        for (const auto& prof : packlab::profile_names()) {
            auto packed = packed_family_samples(test_base, Split::Test, {prof}, "test-" + prof);
            eval_set.insert(eval_set.end(), packed.begin(), packed.end());
        }
        run_common(train, eval_set, "main");
        return;
    }

    // VI-B / VII-B: one arm per target packer
    const bool leave_one_out = plan.id == "VII-B";
    for (const auto& target : packlab::profile_names()) {
        std::vector<LabeledSample> train = train_base;
        std::vector<std::string> train_profiles;
        if (leave_one_out) {
            for (const auto& p : packlab::profile_names())
                if (p != target) train_profiles.push_back(p);
        } else {
            train_profiles = {target};
        }
        auto packed_train =
            packed_family_samples(train_base, Split::Train, train_profiles, "train-" + target);
        train.insert(train.end(), packed_train.begin(), packed_train.end());

        std::vector<LabeledSample> eval_set = test_base;
        auto packed_test =
            packed_family_samples(test_base, Split::Test, {target}, "eval-" + target);
        eval_set.insert(eval_set.end(), packed_test.begin(), packed_test.end());
        run_common(train, eval_set, target);
    }
}

void run_ablation(const ExperimentPlan& plan, const GeneratedCorpus& corpus, unsigned jobs,
                  ExperimentResult& result) {
    BaseSplit split = base_split(corpus, plan.scale, plan.seed);

    std::vector<LabeledSample> train = to_samples(split.train_b, Split::Train);
    auto tm = to_samples(split.train_m, Split::Train);
    train.insert(train.end(), tm.begin(), tm.end());

    auto plain_eval = to_samples(split.test_b, Split::Test);
    auto plain_mal = to_samples(split.test_m, Split::Test);
    plain_eval.insert(plain_eval.end(), plain_mal.begin(), plain_mal.end());

    auto arm_eval = [&](packlab::MangleOptions opt, const std::string& tag) {
        std::vector<LabeledSample> out = to_samples(split.test_b, Split::Test);
        std::vector<LabeledSample> mal(split.test_m.size());
        parallel_for(split.test_m.size(), jobs, [&](size_t i) {
            mal[i] = mangled_sample(*split.test_m[i], opt, Split::Test, tag);
        });
        out.insert(out.end(), mal.begin(), mal.end());
        return out;
    };
    auto cert_eval = arm_eval(packlab::MangleOptions{false, true}, "cert");
    auto both_eval = arm_eval(packlab::MangleOptions{true, true}, "cert-strings");

    for (ModelKind kind : plan.detectors) {
        const std::string det = kind_name(kind);
        const auto cfg = plan_train_config(Rng(plan.seed).fork(det).next(), plan.train);
        std::vector<LabeledSample> all = train;
        all.insert(all.end(), plain_eval.begin(), plain_eval.end());
        auto model = detect::train_model(kind, all, cfg);

        auto eval_arm = [&](const std::vector<LabeledSample>& eval_set) {
            std::vector<LabeledSample> scoped = train;
            scoped.insert(scoped.end(), eval_set.begin(), eval_set.end());
            auto rep = detect::evaluate(model, scoped, detect::GroupBy::None, jobs);
            rep.plan_id = plan.id;
            return rep;
        };
        result.cells[det]["plain"] = eval_arm(plain_eval);
        result.cells[det]["cert-clone"] = eval_arm(cert_eval);
        result.cells[det]["cert-clone+ioc-obfuscation"] = eval_arm(both_eval);
    }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentPlan& plan, const GeneratedCorpus& corpus,
                                unsigned jobs) {
    ExperimentResult result;
    result.plan_id = plan.id;
    result.seed = plan.seed;
    result.scale = plan.scale;

    if (plan.id == "I-A")
        run_ia_like(plan, corpus, jobs, result);
    else if (plan.id == "II" || plan.id == "V-A")
        run_ii_or_va(plan, corpus, jobs, result);
    else if (plan.id == "III")
        run_iii(plan, corpus, jobs, result);
    else if (plan.id == "IV")
        run_iv(plan, corpus, jobs, result);
    else if (plan.id == "VI-A" || plan.id == "VII-A")
        run_vi_or_vii_a(plan, corpus, jobs, result);
    else if (plan.id == "I-B" || plan.id == "V-B" || plan.id == "VI-B" || plan.id == "VII-B")
        run_classifier_plan(plan, corpus, jobs, result);
    else if (plan.id == "ablation-mangle")
        run_ablation(plan, corpus, jobs, result);
    else
        throw SpecInvalid("unknown experiment plan: " + plan.id);

    result.findings = check_findings(result);
    return result;
}

std::vector<FindingOutcome> check_findings(const ExperimentResult& result) {
    std::vector<FindingOutcome> out;

    if (result.plan_id == "I-A") {
        for (const auto& [det, arms] : result.cells) {
            const auto& rep = arms.at("main");
            const double base = group_metric(rep, "none", "accuracy");
            if (det == "feature-gbt") {
                const double drop = base - group_metric(rep, "sim-hyperion", "accuracy");
                out.push_back({"finding-1-gbt-hyperion-drop", drop >= 0.20, drop - 0.20,
                               det + " accuracy drop " + std::to_string(drop)});
            }
            if (det == "image-linear") {
                for (const char* packer : {"sim-hyperion", "sim-nimcrypt"}) {
                    const double drop = base - group_metric(rep, packer, "accuracy");
                    out.push_back({std::string("finding-1-image-drop-") + packer, drop >= 0.30,
                                   drop - 0.30, det + " accuracy drop " + std::to_string(drop)});
                }
            }
        }
    }

    if (result.plan_id == "II") {
        for (const auto& [det, curves] : result.curves) {
            auto check_curve = [&](const std::string& curve, const std::string& finding) {
                auto it = curves.find(curve);
                if (it == curves.end()) return;
                std::vector<double> xs, ys;
                for (const auto& [x, y] : it->second) {
                    xs.push_back(x);
                    ys.push_back(y);
                }
                const double rho = spearman(xs, ys);
                bool monotone = true;
                for (size_t i = 1; i < ys.size(); ++i)
                    if (ys[i] > ys[i - 1] + 1e-9) monotone = false;
                out.push_back({finding + ":" + det, monotone && rho <= -0.8, -0.8 - rho,
                               "rho " + std::to_string(rho) + (monotone ? "" : " (not monotone)")});
            };
            check_curve("packed-malware:tnr-packed-goodware", "finding-3-tnr-declines");
            check_curve("packed-goodware:tpr-packed-malware", "finding-3-tpr-declines");
        }
    }

    if (result.plan_id == "III") {
        const std::vector<std::string> good = {"sim-upx", "sim-themida", "sim-enigma",
                                               "sim-mpress"};
        const std::vector<std::string> bad = {"sim-hyperion", "sim-amber", "sim-mangle",
                                              "sim-nimcrypt"};
        for (const auto& [det, arms] : result.cells) {
            const auto& rep = arms.at("main");
            double worst_false_flag = 1.0, worst_evasion = 0.0;
            for (const auto& p : bad)
                worst_false_flag =
                    std::min(worst_false_flag, 1.0 - group_metric(rep, p, "tnr"));
            for (const auto& p : good)
                worst_evasion = std::max(worst_evasion, group_metric(rep, p, "tpr"));
            out.push_back({"finding-4-false-flags:" + det, worst_false_flag >= 0.9,
                           worst_false_flag - 0.9,
                           "min false-flag rate on bad-packed goodware " +
                               std::to_string(worst_false_flag)});
            out.push_back({"finding-4-evasion:" + det, worst_evasion <= 0.3,
                           0.3 - worst_evasion,
                           "max tpr on good-packed malware " + std::to_string(worst_evasion)});
        }
    }

    if (result.plan_id == "IV") {
        for (const auto& [det, arms] : result.cells) {
            const double acc = group_metric(arms.at("overall"), "all", "accuracy");
            out.push_back({"finding-5-packer-id:" + det, acc >= 0.99, acc - 0.99,
                           "9-class accuracy " + std::to_string(acc)});
        }
    }

    if (result.plan_id == "ablation-mangle") {
        for (const auto& [det, arms] : result.cells) {
            const double plain = group_metric(arms.at("plain"), "all", "tpr");
            const double cert = group_metric(arms.at("cert-clone"), "all", "tpr");
            const double both = group_metric(arms.at("cert-clone+ioc-obfuscation"), "all", "tpr");
            const double drop = plain - cert;
            const double delta = std::abs(cert - both);
            out.push_back({"ablation-cert-drop:" + det, drop >= 0.30, drop - 0.30,
                           "tpr " + std::to_string(plain) + " -> " + std::to_string(cert)});
            out.push_back({"ablation-strings-marginal:" + det, delta <= 0.05, 0.05 - delta,
                           "tpr with strings " + std::to_string(both)});
        }
    }

    return out;
}

std::vector<FindingOutcome> check_findings(const std::vector<ExperimentResult>& results) {
    std::vector<FindingOutcome> out;
    const ExperimentResult* vi = nullptr;
    const ExperimentResult* vii = nullptr;
    for (const auto& r : results) {
        if (r.plan_id == "VI-A") vi = &r;
        if (r.plan_id == "VII-A") vii = &r;
        auto own = check_findings(r);
        out.insert(out.end(), own.begin(), own.end());
    }
    if (vi && vii) {
        // same-packer-trained accuracy vs withheld-packer accuracy on the
        // packed test subset, averaged across profiles and detector kinds
        double gap_sum = 0;
        size_t gap_n = 0;
        std::string detail;
        for (const auto& prof : packlab::profile_names()) {
            for (const auto& [det, arms] : vi->cells) {
                if (!vii->cells.count(det)) continue;
                const auto& same = arms.at(prof);
                const auto& withheld = vii->cells.at(det).at(prof);
                const double a = group_metric(same, prof, "accuracy");
                const double b = group_metric(withheld, prof, "accuracy");
                gap_sum += a - b;
                gap_n++;
            }
        }
        const double gap = gap_n ? gap_sum / static_cast<double>(gap_n) : 0.0;
        out.push_back({"finding-6-7-withheld-gap", gap >= 0.10, gap - 0.10,
                       "mean same-packer minus withheld accuracy " + std::to_string(gap)});
    }
    return out;
}

// ---- result serialization ----

std::string ExperimentResult::to_json() const {
    nlohmann::json j;
    j["plan_id"] = plan_id;
    j["seed"] = seed;
    j["scale"] = scale;
    j["cells"] = nlohmann::json::object();
    for (const auto& [det, arms] : cells) {
        for (const auto& [arm, rep] : arms)
            j["cells"][det][arm] = nlohmann::json::parse(rep.to_json());
    }
    j["curves"] = nlohmann::json::object();
    for (const auto& [det, curves] : curves)
        for (const auto& [name, points] : curves) {
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& [x, y] : points) arr.push_back({{"x", x}, {"y", y}});
            j["curves"][det][name] = std::move(arr);
        }
    j["findings"] = nlohmann::json::array();
    for (const auto& f : findings)
        j["findings"].push_back(
            {{"id", f.id}, {"pass", f.pass}, {"margin", f.margin}, {"detail", f.detail}});
    return j.dump(2);
}

std::string ExperimentResult::table_csv() const {
    // columns: every group key observed, "none" (unpacked) first
    std::set<std::string> group_keys;
    for (const auto& [det, arms] : cells)
        for (const auto& [arm, rep] : arms)
            for (const auto& [g, m] : rep.groups) group_keys.insert(g);
    std::vector<std::string> columns;
    for (const char* first : {"none", "all"})
        if (group_keys.count(first)) {
            columns.push_back(first);
            group_keys.erase(first);
        }
    columns.insert(columns.end(), group_keys.begin(), group_keys.end());

    std::ostringstream out;
    out << "detector,arm,metric";
    for (const auto& c : columns) out << "," << c;
    out << "\n";
    out.precision(6);
    for (const auto& [det, arms] : cells) {
        for (const auto& [arm, rep] : arms) {
            for (const char* metric : {"tnr", "tpr", "accuracy"}) {
                out << det << "," << arm << "," << metric;
                for (const auto& c : columns) {
                    auto it = rep.groups.find(c);
                    if (it == rep.groups.end()) {
                        out << ",";
                        continue;
                    }
                    const auto& m = it->second;
                    out << ","
                        << (std::string(metric) == "tnr"
                                ? m.tnr
                                : std::string(metric) == "tpr" ? m.tpr : m.accuracy);
                }
                out << "\n";
            }
        }
    }
    return out.str();
}

std::string ExperimentResult::curves_csv() const {
    std::ostringstream out;
    out << "detector,curve,x,y\n";
    out.precision(6);
    for (const auto& [det, by_name] : curves)
        for (const auto& [name, points] : by_name)
            for (const auto& [x, y] : points)
                out << det << "," << name << "," << x << "," << y << "\n";
    return out.str();
}

}  // namespace packscope::exphub
