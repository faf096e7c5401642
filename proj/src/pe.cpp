#include "packscope/pe.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>

namespace packscope::pe {

namespace {

constexpr size_t kDosHeaderSize = 0x40;
constexpr size_t kCoffSize = 20;
constexpr size_t kOptionalHeaderBase = 96;  // PE32, before data directories
constexpr size_t kSectionHeaderSize = 40;
constexpr uint32_t kMaxSections = 96;
constexpr size_t kSecurityDir = 4;
constexpr size_t kImportDir = 1;

class Reader {
public:
    explicit Reader(ByteView data) : data_(data) {}

    bool can_read(size_t off, size_t len) const {
        return off <= data_.size() && len <= data_.size() - off;
    }
    uint8_t u8(size_t off) const { return data_[off]; }
    uint16_t u16(size_t off) const {
        return static_cast<uint16_t>(data_[off] | (data_[off + 1] << 8));
    }
    uint32_t u32(size_t off) const {
        return static_cast<uint32_t>(data_[off]) | (static_cast<uint32_t>(data_[off + 1]) << 8) |
               (static_cast<uint32_t>(data_[off + 2]) << 16) |
               (static_cast<uint32_t>(data_[off + 3]) << 24);
    }
    Bytes slice(size_t off, size_t len) const {
        return Bytes(data_.begin() + static_cast<ptrdiff_t>(off),
                     data_.begin() + static_cast<ptrdiff_t>(off + len));
    }
    size_t size() const { return data_.size(); }

private:
    ByteView data_;
};

struct Writer {
    Bytes out;
    void u8(uint8_t v) { out.push_back(v); }
    void u16(uint16_t v) {
        out.push_back(static_cast<uint8_t>(v));
        out.push_back(static_cast<uint8_t>(v >> 8));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void raw(ByteView b) { out.insert(out.end(), b.begin(), b.end()); }
    void pad_to(size_t off, uint8_t fill = 0) {
        if (out.size() < off) out.resize(off, fill);
    }
};

std::string section_name_from(const uint8_t* p) {
    size_t len = 0;
    while (len < 8 && p[len] != 0) len++;
    return std::string(reinterpret_cast<const char*>(p), len);
}

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::string strip_module_extension(std::string name) {
    for (const char* ext : {".dll", ".sys", ".ocx"}) {
        if (name.size() > std::strlen(ext) &&
            name.compare(name.size() - std::strlen(ext), std::string::npos, ext) == 0) {
            name.resize(name.size() - std::strlen(ext));
            break;
        }
    }
    return name;
}

// file offset for an RVA, resolved through the section table
std::optional<size_t> rva_to_offset(const std::vector<SectionRecord>& sections, uint32_t rva) {
    for (const auto& s : sections) {
        const uint32_t span = std::max(s.virtual_size, s.declared_raw_size);
        if (rva >= s.virtual_address && rva < s.virtual_address + span) {
            const uint32_t delta = rva - s.virtual_address;
            if (delta >= s.raw_data.size()) return std::nullopt;
            return static_cast<size_t>(s.raw_offset) + delta;
        }
    }
    return std::nullopt;
}

std::optional<std::string> read_cstring(const Reader& r, size_t off, size_t max_len = 256) {
    std::string out;
    for (size_t i = 0; i < max_len; ++i) {
        if (!r.can_read(off + i, 1)) return std::nullopt;
        const uint8_t c = r.u8(off + i);
        if (c == 0) return out;
        out.push_back(static_cast<char>(c));
    }
    return std::nullopt;
}

void parse_imports(const Reader& r, PortableExecutable& pe, Tolerance tol) {
    const auto& dirs = pe.optional_header.data_dirs;
    if (dirs.size() <= kImportDir || dirs[kImportDir].rva == 0) return;

    auto fail = [&](const char* msg) {
        if (tol == Tolerance::Strict) throw MalformedHeader(msg);
    };

    auto desc_off = rva_to_offset(pe.sections, dirs[kImportDir].rva);
    if (!desc_off) {
        fail("import directory rva outside mapped sections");
        return;
    }

    for (size_t idx = 0; idx < 1024; ++idx) {
        const size_t off = *desc_off + idx * 20;
        if (!r.can_read(off, 20)) {
            fail("import descriptor past end of file");
            return;
        }
        const uint32_t original_first_thunk = r.u32(off);
        const uint32_t name_rva = r.u32(off + 12);
        const uint32_t first_thunk = r.u32(off + 16);
        if (original_first_thunk == 0 && name_rva == 0 && first_thunk == 0) break;

        auto name_off = name_rva ? rva_to_offset(pe.sections, name_rva) : std::nullopt;
        auto dll_name = name_off ? read_cstring(r, *name_off) : std::nullopt;
        if (!dll_name) {
            fail("import descriptor dll name unresolvable");
            continue;
        }

        ImportEntry entry;
        entry.dll = strip_module_extension(lower(*dll_name));

        const uint32_t thunk_rva = original_first_thunk ? original_first_thunk : first_thunk;
        auto thunk_off = thunk_rva ? rva_to_offset(pe.sections, thunk_rva) : std::nullopt;
        if (thunk_off) {
            for (size_t t = 0; t < 4096; ++t) {
                const size_t toff = *thunk_off + t * 4;
                if (!r.can_read(toff, 4)) {
                    fail("import thunk past end of file");
                    break;
                }
                const uint32_t thunk = r.u32(toff);
                if (thunk == 0) break;
                if (thunk & 0x80000000u) {
                    entry.functions.push_back("ord" + std::to_string(thunk & 0xFFFF));
                } else {
                    auto fn_off = rva_to_offset(pe.sections, thunk);
                    if (!fn_off || !r.can_read(*fn_off + 2, 1)) {
                        fail("import name rva unresolvable");
                        continue;
                    }
                    auto fn = read_cstring(r, *fn_off + 2);  // skip hint
                    if (!fn) {
                        fail("import name unterminated");
                        continue;
                    }
                    entry.functions.push_back(lower(*fn));
                }
            }
        }
        pe.imports.push_back(std::move(entry));
    }
}

}  // namespace

PortableExecutable parse_pe(ByteView bytes, Tolerance tol) {
    if (bytes.empty()) throw EmptyInput("empty PE input");
    Reader r(bytes);

    if (!r.can_read(0, kDosHeaderSize) || r.u16(0) != 0x5A4D)
        throw MalformedHeader("missing MZ signature");
    const uint32_t e_lfanew = r.u32(0x3C);
    if (!r.can_read(e_lfanew, 4) || r.u32(e_lfanew) != 0x00004550)
        throw MalformedHeader("missing PE signature");

    const size_t coff_off = e_lfanew + 4;
    if (!r.can_read(coff_off, kCoffSize)) throw MalformedHeader("COFF header past end of file");

    PortableExecutable pe;
    pe.coff.machine = r.u16(coff_off);
    pe.coff.num_sections = r.u16(coff_off + 2);
    pe.coff.timestamp = r.u32(coff_off + 4);
    pe.coff.symbol_table_offset = r.u32(coff_off + 8);
    pe.coff.num_symbols = r.u32(coff_off + 12);
    pe.coff.optional_header_size = r.u16(coff_off + 16);
    pe.coff.characteristics = r.u16(coff_off + 18);

    if (pe.coff.num_sections > kMaxSections) {
        if (tol == Tolerance::Strict) throw MalformedHeader("unreasonable section count");
        pe.coff.num_sections = kMaxSections;
    }

    const size_t opt_off = coff_off + kCoffSize;
    if (pe.coff.optional_header_size < kOptionalHeaderBase || !r.can_read(opt_off, kOptionalHeaderBase))
        throw MalformedHeader("optional header too small");

    auto& oh = pe.optional_header;
    oh.magic = r.u16(opt_off);
    if (oh.magic == 0x020B) throw Pe32PlusUnsupported();
    if (oh.magic != 0x010B) throw MalformedHeader("not a PE32 optional header");
    oh.linker_major = r.u8(opt_off + 2);
    oh.linker_minor = r.u8(opt_off + 3);
    oh.sizeof_code = r.u32(opt_off + 4);
    oh.sizeof_initialized_data = r.u32(opt_off + 8);
    oh.sizeof_uninitialized_data = r.u32(opt_off + 12);
    oh.entry_point_rva = r.u32(opt_off + 16);
    oh.base_of_code = r.u32(opt_off + 20);
    oh.base_of_data = r.u32(opt_off + 24);
    oh.image_base = r.u32(opt_off + 28);
    oh.section_alignment = r.u32(opt_off + 32);
    oh.file_alignment = r.u32(opt_off + 36);
    oh.os_major = r.u16(opt_off + 40);
    oh.os_minor = r.u16(opt_off + 42);
    oh.image_major = r.u16(opt_off + 44);
    oh.image_minor = r.u16(opt_off + 46);
    oh.subsys_major = r.u16(opt_off + 48);
    oh.subsys_minor = r.u16(opt_off + 50);
    oh.win32_version = r.u32(opt_off + 52);
    oh.sizeof_image = r.u32(opt_off + 56);
    oh.sizeof_headers = r.u32(opt_off + 60);
    oh.checksum = r.u32(opt_off + 64);
    oh.subsystem = r.u16(opt_off + 68);
    oh.dll_characteristics = r.u16(opt_off + 70);
    oh.stack_reserve = r.u32(opt_off + 72);
    oh.stack_commit = r.u32(opt_off + 76);
    oh.heap_reserve = r.u32(opt_off + 80);
    oh.heap_commit = r.u32(opt_off + 84);
    oh.loader_flags = r.u32(opt_off + 88);
    oh.num_data_dirs = r.u32(opt_off + 92);

    uint32_t dir_count = oh.num_data_dirs;
    if (dir_count > 16) {
        if (tol == Tolerance::Strict) throw MalformedHeader("unreasonable data directory count");
        dir_count = 16;
    }
    const size_t dirs_off = opt_off + kOptionalHeaderBase;
    if (!r.can_read(dirs_off, dir_count * 8)) throw MalformedHeader("data directories past end of file");
    oh.data_dirs.resize(dir_count);
    for (uint32_t i = 0; i < dir_count; ++i) {
        oh.data_dirs[i].rva = r.u32(dirs_off + i * 8);
        oh.data_dirs[i].size = r.u32(dirs_off + i * 8 + 4);
    }

    const size_t sec_table_off = opt_off + pe.coff.optional_header_size;
    if (!r.can_read(sec_table_off, static_cast<size_t>(pe.coff.num_sections) * kSectionHeaderSize))
        throw MalformedHeader("section table past end of file");

    pe.sections.reserve(pe.coff.num_sections);
    for (uint32_t i = 0; i < pe.coff.num_sections; ++i) {
        const size_t off = sec_table_off + i * kSectionHeaderSize;
        SectionRecord s;
        uint8_t name_raw[8];
        for (int k = 0; k < 8; ++k) name_raw[k] = r.u8(off + k);
        s.name = section_name_from(name_raw);
        s.virtual_size = r.u32(off + 8);
        s.virtual_address = r.u32(off + 12);
        s.declared_raw_size = r.u32(off + 16);
        s.raw_offset = r.u32(off + 20);
        s.relocations_offset = r.u32(off + 24);
        s.line_numbers_offset = r.u32(off + 28);
        s.num_relocations = r.u16(off + 32);
        s.num_line_numbers = r.u16(off + 34);
        s.characteristics = r.u32(off + 36);
        pe.sections.push_back(std::move(s));
    }

    // sections with raw data, in file order
    std::stable_sort(pe.sections.begin(), pe.sections.end(),
                     [](const SectionRecord& a, const SectionRecord& b) {
                         return a.raw_offset < b.raw_offset;
                     });

    size_t first_data = bytes.size();
    for (const auto& s : pe.sections)
        if (s.declared_raw_size > 0) first_data = std::min<size_t>(first_data, s.raw_offset);
    const size_t header_end = sec_table_off + static_cast<size_t>(pe.coff.num_sections) * kSectionHeaderSize;
    if (first_data < header_end) {
        if (tol == Tolerance::Strict) throw MalformedHeader("section data overlaps headers");
        first_data = std::min(bytes.size(), header_end);
    }
    pe.header_blob = r.slice(0, std::min(first_data, bytes.size()));

    size_t cursor = pe.header_blob.size();
    for (auto& s : pe.sections) {
        if (s.declared_raw_size == 0) continue;
        size_t off = s.raw_offset;
        size_t end = off + s.declared_raw_size;
        if (off > bytes.size()) {
            if (tol == Tolerance::Strict) throw MalformedHeader("section offset past end of file");
            pe.truncated = true;
            off = bytes.size();
            end = bytes.size();
        } else if (end > bytes.size()) {
            if (tol == Tolerance::Strict) throw MalformedHeader("section data past end of file");
            pe.truncated = true;
            end = bytes.size();
        }
        if (off < cursor) {
            if (tol == Tolerance::Strict) throw MalformedHeader("overlapping section data");
            // overlapping/garbage layout: treat the remainder as unmapped
            continue;
        }
        s.gap_before = r.slice(cursor, off - cursor);
        s.raw_data = r.slice(off, end - off);
        cursor = end;
    }
    pe.overlay = r.slice(cursor, bytes.size() - cursor);

    for (auto& s : pe.sections) {
        s.md5 = Md5::hash(view(s.raw_data));
        s.entropy = shannon_entropy(view(s.raw_data));
    }

    // certificate: the security directory holds a file offset, not an rva
    if (oh.data_dirs.size() > kSecurityDir && oh.data_dirs[kSecurityDir].rva != 0 &&
        oh.data_dirs[kSecurityDir].size != 0) {
        const size_t coff_start = oh.data_dirs[kSecurityDir].rva;
        size_t csize = oh.data_dirs[kSecurityDir].size;
        if (r.can_read(coff_start, csize)) {
            pe.certificate = r.slice(coff_start, csize);
        } else if (tol == Tolerance::Strict) {
            throw MalformedHeader("certificate region past end of file");
        } else if (coff_start < bytes.size()) {
            pe.truncated = true;
            pe.certificate = r.slice(coff_start, bytes.size() - coff_start);
        }
    }

    parse_imports(r, pe, tol);

    // export count only; the export table is not otherwise modeled
    if (oh.data_dirs.size() > 0 && oh.data_dirs[0].rva != 0) {
        auto exp_off = rva_to_offset(pe.sections, oh.data_dirs[0].rva);
        if (exp_off && r.can_read(*exp_off, 28)) pe.num_exported_functions = r.u32(*exp_off + 20);
    }
    return pe;
}

Bytes serialize(const PortableExecutable& pe) {
    Writer w;
    w.raw(view(pe.header_blob));
    for (const auto& s : pe.sections) {
        w.raw(view(s.gap_before));
        w.raw(view(s.raw_data));
    }
    w.raw(view(pe.overlay));
    return std::move(w.out);
}

Md5Digest imphash(const PortableExecutable& pe) {
    std::string joined;
    bool first = true;
    for (const auto& entry : pe.imports) {
        for (const auto& fn : entry.functions) {
            if (!first) joined.push_back(',');
            joined += entry.dll;
            joined.push_back('.');
            joined += fn;
            first = false;
        }
    }
    return Md5::hash(view(joined));
}

std::string imphash_hex(const PortableExecutable& pe) {
    auto d = imphash(pe);
    return to_hex(ByteView(d.data(), d.size()));
}

std::vector<SectionFingerprint> section_fingerprints(const PortableExecutable& pe) {
    std::vector<SectionFingerprint> out;
    out.reserve(pe.sections.size());
    for (const auto& s : pe.sections)
        out.push_back({s.name, to_hex(ByteView(s.md5.data(), s.md5.size())), s.entropy});
    return out;
}

std::string fingerprint_json(const std::string& path, const PortableExecutable& pe) {
    nlohmann::json j;
    j["path"] = path;
    j["imphash"] = imphash_hex(pe);
    j["sections"] = nlohmann::json::array();
    for (const auto& f : section_fingerprints(pe))
        j["sections"].push_back({{"name", f.name}, {"md5", f.md5}, {"entropy", f.entropy}});
    j["truncated"] = pe.truncated;
    return j.dump();
}

// ---- builder ----

namespace {

uint32_t align_up(uint32_t v, uint32_t a) { return (v + a - 1) / a * a; }

// import directory image for the requested entries, laid out at base_rva
Bytes build_import_blob(const std::vector<ImportEntry>& imports, uint32_t base_rva) {
    // layout: descriptors (+terminator), thunk arrays (ILT+IAT), hint/name table
    const size_t desc_bytes = (imports.size() + 1) * 20;
    size_t thunk_bytes = 0;
    for (const auto& e : imports) thunk_bytes += (e.functions.size() + 1) * 4;

    std::vector<uint32_t> name_offsets;  // per dll
    std::vector<std::vector<uint32_t>> fn_offsets(imports.size());
    Bytes names;
    auto push_name = [&](const std::string& s, bool hint) {
        const uint32_t off = static_cast<uint32_t>(names.size());
        if (hint) {
            names.push_back(0);
            names.push_back(0);
        }
        names.insert(names.end(), s.begin(), s.end());
        names.push_back(0);
        if (names.size() % 2) names.push_back(0);
        return off;
    };

    for (size_t i = 0; i < imports.size(); ++i) {
        for (const auto& fn : imports[i].functions) {
            if (fn.rfind("ord", 0) == 0 && fn.size() > 3 &&
                std::all_of(fn.begin() + 3, fn.end(), [](char c) { return std::isdigit(c); })) {
                fn_offsets[i].push_back(UINT32_MAX);  // marker, encoded as ordinal below
            } else {
                fn_offsets[i].push_back(push_name(fn, true));
            }
        }
        name_offsets.push_back(push_name(imports[i].dll + ".dll", false));
    }

    const uint32_t thunks_rva = base_rva + static_cast<uint32_t>(desc_bytes);
    const uint32_t names_rva = thunks_rva + static_cast<uint32_t>(2 * thunk_bytes);

    Writer w;
    // descriptors
    uint32_t thunk_cursor = thunks_rva;
    std::vector<uint32_t> ilt_rvas;
    for (size_t i = 0; i < imports.size(); ++i) {
        ilt_rvas.push_back(thunk_cursor);
        const uint32_t ilt = thunk_cursor;
        const uint32_t iat = thunk_cursor + static_cast<uint32_t>((imports[i].functions.size() + 1) * 4 * 1);
        w.u32(ilt);                      // OriginalFirstThunk
        w.u32(0);                        // TimeDateStamp
        w.u32(0);                        // ForwarderChain
        w.u32(names_rva + name_offsets[i]);
        w.u32(iat);                      // FirstThunk
        thunk_cursor += static_cast<uint32_t>((imports[i].functions.size() + 1) * 8);
    }
    for (int k = 0; k < 5; ++k) w.u32(0);  // terminator

    // thunk arrays: ILT then IAT per dll, identical contents
    for (size_t i = 0; i < imports.size(); ++i) {
        for (int copy = 0; copy < 2; ++copy) {
            for (size_t f = 0; f < imports[i].functions.size(); ++f) {
                const auto& fn = imports[i].functions[f];
                if (fn_offsets[i][f] == UINT32_MAX) {
                    w.u32(0x80000000u | static_cast<uint32_t>(std::stoul(fn.substr(3))));
                } else {
                    w.u32(names_rva + fn_offsets[i][f]);
                }
            }
            w.u32(0);
        }
    }
    w.raw(view(names));
    return std::move(w.out);
}

}  // namespace

Bytes build_pe(const PeBuildSpec& spec) {
    const uint32_t file_align = 0x200;
    const uint32_t sect_align = 0x1000;

    std::vector<SectionSpec> sections = spec.sections;
    const bool with_imports = !spec.imports.empty();
    size_t import_index = 0;
    if (with_imports) {
        import_index = sections.size();
        sections.push_back(SectionSpec{spec.import_section_name, {}, 0x40000040, 0});
    }
    if (sections.empty()) throw SpecInvalid("a PE needs at least one section");

    const uint32_t e_lfanew = static_cast<uint32_t>(kDosHeaderSize + spec.dos_stub_extra.size());
    const uint32_t headers_size = static_cast<uint32_t>(
        e_lfanew + 4 + kCoffSize + kOptionalHeaderBase + 16 * 8 + sections.size() * kSectionHeaderSize);
    const uint32_t sizeof_headers = align_up(headers_size, file_align);

    // assign rvas first so the import blob can be generated
    uint32_t rva = align_up(std::max(sizeof_headers, sect_align), sect_align);
    std::vector<uint32_t> rvas, vsizes;
    for (size_t i = 0; i < sections.size(); ++i) {
        rvas.push_back(rva);
        if (with_imports && i == import_index) {
            sections[i].data = build_import_blob(spec.imports, rva);
        }
        const uint32_t vs = sections[i].virtual_size
                                ? sections[i].virtual_size
                                : static_cast<uint32_t>(sections[i].data.size());
        vsizes.push_back(std::max<uint32_t>(vs, 1));
        rva = align_up(rva + std::max<uint32_t>(vs, 1), sect_align);
    }

    uint32_t entry = spec.entry_point_rva;
    uint32_t sizeof_code = 0, base_of_code = 0;
    for (size_t i = 0; i < sections.size(); ++i) {
        if (sections[i].characteristics & 0x20000000u) {  // executable
            if (entry == 0) entry = rvas[i];
            if (base_of_code == 0) base_of_code = rvas[i];
            sizeof_code += align_up(static_cast<uint32_t>(sections[i].data.size()), file_align);
        }
    }
    if (entry == 0) entry = rvas[0];

    Writer w;
    // DOS header
    w.u16(0x5A4D);
    w.u16(0x90);
    w.u16(3);
    w.u16(0);
    w.u16(4);
    w.u16(0);
    w.u16(0xFFFF);
    w.u16(0);
    w.u16(0xB8);
    w.u16(0);
    w.u16(0);
    w.u16(0);
    w.u16(0x40);
    w.u16(0);
    for (int i = 0; i < 4; ++i) w.u16(0);   // reserved
    w.u16(0);
    w.u16(0);
    for (int i = 0; i < 10; ++i) w.u16(0);  // reserved2
    w.u32(e_lfanew);
    w.raw(view(spec.dos_stub_extra));

    // PE signature + COFF
    w.u32(0x00004550);
    w.u16(spec.machine);
    w.u16(static_cast<uint16_t>(sections.size()));
    w.u32(spec.timestamp);
    w.u32(0);
    w.u32(0);
    w.u16(static_cast<uint16_t>(kOptionalHeaderBase + 16 * 8));
    w.u16(0x0102);

    uint32_t sizeof_image = rva;  // next free rva after the last section
    uint32_t sizeof_init = 0;
    for (size_t i = 0; i < sections.size(); ++i)
        if (!(sections[i].characteristics & 0x20000000u))
            sizeof_init += align_up(static_cast<uint32_t>(sections[i].data.size()), file_align);

    // optional header (PE32)
    w.u16(0x010B);
    w.u8(14);
    w.u8(0);
    w.u32(sizeof_code);
    w.u32(sizeof_init);
    w.u32(0);
    w.u32(entry);
    w.u32(base_of_code ? base_of_code : rvas[0]);
    w.u32(rvas[0]);
    w.u32(0x00400000);
    w.u32(sect_align);
    w.u32(file_align);
    w.u16(6);
    w.u16(0);
    w.u16(0);
    w.u16(0);
    w.u16(6);
    w.u16(0);
    w.u32(0);
    w.u32(sizeof_image);
    w.u32(sizeof_headers);
    w.u32(0);
    w.u16(spec.subsystem);
    w.u16(0);
    w.u32(0x100000);
    w.u32(0x1000);
    w.u32(0x100000);
    w.u32(0x1000);
    w.u32(0);
    w.u32(16);

    // data directories; import and security filled below
    uint32_t file_cursor = sizeof_headers;
    std::vector<uint32_t> raw_offsets, raw_sizes;
    for (size_t i = 0; i < sections.size(); ++i) {
        raw_offsets.push_back(sections[i].data.empty() ? 0 : file_cursor);
        raw_sizes.push_back(align_up(static_cast<uint32_t>(sections[i].data.size()), file_align));
        file_cursor += raw_sizes.back();
    }
    const uint32_t cert_offset = spec.certificate.empty() ? 0 : file_cursor;

    for (uint32_t i = 0; i < 16; ++i) {
        if (i == kImportDir && with_imports) {
            w.u32(rvas[import_index]);
            w.u32(static_cast<uint32_t>(sections[import_index].data.size()));
        } else if (i == kSecurityDir && !spec.certificate.empty()) {
            w.u32(cert_offset);
            w.u32(static_cast<uint32_t>(spec.certificate.size()));
        } else {
            w.u32(0);
            w.u32(0);
        }
    }

    // section table
    for (size_t i = 0; i < sections.size(); ++i) {
        char name[8] = {};
        std::memcpy(name, sections[i].name.data(), std::min<size_t>(8, sections[i].name.size()));
        w.raw(ByteView(reinterpret_cast<const uint8_t*>(name), 8));
        w.u32(vsizes[i]);
        w.u32(rvas[i]);
        w.u32(raw_sizes[i]);
        w.u32(raw_offsets[i]);
        w.u32(0);
        w.u32(0);
        w.u16(0);
        w.u16(0);
        w.u32(sections[i].characteristics);
    }

    w.pad_to(sizeof_headers);
    for (size_t i = 0; i < sections.size(); ++i) {
        w.raw(view(sections[i].data));
        w.pad_to(raw_offsets[i] + raw_sizes[i]);
    }
    w.raw(view(spec.certificate));
    w.raw(view(spec.overlay));
    return std::move(w.out);
}

}  // namespace packscope::pe
