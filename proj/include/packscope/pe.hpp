#pragma once

#include "packscope/common.hpp"
#include "packscope/md5.hpp"

#include <optional>

namespace packscope::pe {

// PE32 only; PE32+ inputs are rejected with Pe32PlusUnsupported.
class Pe32PlusUnsupported : public Error {
public:
    explicit Pe32PlusUnsupported(const std::string& what = "PE32+ images are not modeled")
        : Error("Pe32PlusUnsupported", what) {}
};

struct CoffHeader {
    uint16_t machine = 0x014C;
    uint16_t num_sections = 0;
    uint32_t timestamp = 0;
    uint32_t symbol_table_offset = 0;
    uint32_t num_symbols = 0;
    uint16_t optional_header_size = 0;
    uint16_t characteristics = 0x0102;  // EXECUTABLE_IMAGE | 32BIT_MACHINE
};

struct DataDirectory {
    uint32_t rva = 0;
    uint32_t size = 0;
};

struct OptionalHeader {
    uint16_t magic = 0x010B;
    uint8_t linker_major = 14, linker_minor = 0;
    uint32_t sizeof_code = 0;
    uint32_t sizeof_initialized_data = 0;
    uint32_t sizeof_uninitialized_data = 0;
    uint32_t entry_point_rva = 0;
    uint32_t base_of_code = 0;
    uint32_t base_of_data = 0;
    uint32_t image_base = 0x00400000;
    uint32_t section_alignment = 0x1000;
    uint32_t file_alignment = 0x200;
    uint16_t os_major = 6, os_minor = 0;
    uint16_t image_major = 0, image_minor = 0;
    uint16_t subsys_major = 6, subsys_minor = 0;
    uint32_t win32_version = 0;
    uint32_t sizeof_image = 0;
    uint32_t sizeof_headers = 0;
    uint32_t checksum = 0;
    uint16_t subsystem = 3;  // console
    uint16_t dll_characteristics = 0;
    uint32_t stack_reserve = 0x100000, stack_commit = 0x1000;
    uint32_t heap_reserve = 0x100000, heap_commit = 0x1000;
    uint32_t loader_flags = 0;
    uint32_t num_data_dirs = 16;
    std::vector<DataDirectory> data_dirs;  // num_data_dirs entries
};

struct SectionRecord {
    std::string name;  // up to 8 bytes
    uint32_t virtual_size = 0;
    uint32_t virtual_address = 0;
    uint32_t declared_raw_size = 0;  // SizeOfRawData as written in the header
    uint32_t raw_offset = 0;
    uint32_t relocations_offset = 0, line_numbers_offset = 0;
    uint16_t num_relocations = 0, num_line_numbers = 0;
    uint32_t characteristics = 0;
    Bytes raw_data;  // clamped to end-of-file in lenient mode
    Md5Digest md5{};
    double entropy = 0.0;
    // raw bytes between the previous region and this section (alignment slack)
    Bytes gap_before;
};

struct ImportEntry {
    std::string dll;  // lowercase, extension stripped
    std::vector<std::string> functions;  // names, or "ord<N>" for ordinals
};

struct PortableExecutable {
    // everything from offset 0 up to the first section's raw data (DOS
    // header+stub, PE signature, COFF, optional header, section table,
    // header padding), kept verbatim so serialization is byte-exact
    Bytes header_blob;
    CoffHeader coff;
    OptionalHeader optional_header;
    std::vector<SectionRecord> sections;  // ordered by raw offset
    std::vector<ImportEntry> imports;
    std::optional<Bytes> certificate;  // security-directory payload
    Bytes overlay;                     // bytes past the last section
    uint32_t num_exported_functions = 0;
    bool truncated = false;

    bool has_certificate() const { return certificate.has_value(); }
};

enum class Tolerance { Strict, Lenient };

// throws EmptyInput, MalformedHeader (strict, or structurally hopeless
// input in lenient mode), Pe32PlusUnsupported
PortableExecutable parse_pe(ByteView bytes, Tolerance tolerance);

// byte-identical to the original input for non-truncated parses
Bytes serialize(const PortableExecutable& pe);

// MD5 over the comma-joined, lowercased dll.function pairs in import order.
Md5Digest imphash(const PortableExecutable& pe);
std::string imphash_hex(const PortableExecutable& pe);

struct SectionFingerprint {
    std::string name;
    std::string md5;
    double entropy;
};
std::vector<SectionFingerprint> section_fingerprints(const PortableExecutable& pe);

// one JSON line: {"path":..,"imphash":..,"sections":[{name,md5,entropy}..],"truncated":..}
std::string fingerprint_json(const std::string& path, const PortableExecutable& pe);

// ---- synthetic PE32 construction ----

struct SectionSpec {
    std::string name;
    Bytes data;
    uint32_t characteristics = 0x40000040;  // initialized data, readable
    uint32_t virtual_size = 0;              // 0 = data size
};

struct PeBuildSpec {
    uint32_t timestamp = 0;
    uint16_t subsystem = 3;
    uint16_t machine = 0x014C;
    uint32_t entry_point_rva = 0;  // 0 = first executable section start
    std::vector<SectionSpec> sections;
    std::vector<ImportEntry> imports;  // emitted as an extra import section
    std::string import_section_name = ".idata";
    Bytes certificate;  // appended past the sections, security dir set
    Bytes overlay;
    Bytes dos_stub_extra;  // optional bytes between DOS header and PE sig
};

Bytes build_pe(const PeBuildSpec& spec);

}  // namespace packscope::pe
