#include "packscope/packlab.hpp"

#include "packscope/features.hpp"
#include "packscope/md5.hpp"
#include "packscope/pe.hpp"

#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <numeric>

namespace packscope::packlab {

namespace {

// payload frame marker, keyed per profile so no byte motif is shared
// across packers
uint32_t blob_magic(const PackerProfile& p) {
    return static_cast<uint32_t>(Rng::fnv1a64(p.name) | 0x01010101u);
}

Bytes deflate_bytes(ByteView data) {
    uLongf bound = compressBound(static_cast<uLong>(data.size()));
    Bytes out(bound);
    if (compress2(out.data(), &bound, data.data(), static_cast<uLong>(data.size()), 6) != Z_OK)
        throw Error("CompressError", "deflate failed");
    out.resize(bound);
    return out;
}

std::optional<Bytes> inflate_bytes(ByteView data, size_t expected) {
    Bytes out(expected);
    uLongf len = static_cast<uLongf>(expected);
    if (uncompress(out.data(), &len, data.data(), static_cast<uLong>(data.size())) != Z_OK)
        return std::nullopt;
    out.resize(len);
    return out;
}

// Deflate output is close to uniform no matter the input, which would leave
// compressed sections at ~7.99 bits/byte. A stored-marker byte after every
// kStuffPeriod literals drags the section into the 6.5..7.8 band while
// staying trivially reversible.
constexpr size_t kStuffPeriod = 6;

Bytes stuff_bytes(ByteView in) {
    Bytes out;
    out.reserve(in.size() + in.size() / kStuffPeriod + 1);
    for (size_t i = 0; i < in.size(); ++i) {
        out.push_back(in[i]);
        if ((i + 1) % kStuffPeriod == 0) out.push_back(0x00);
    }
    return out;
}

Bytes unstuff_bytes(ByteView in) {
    Bytes out;
    out.reserve(in.size());
    for (size_t i = 0; i < in.size(); ++i)
        if ((i + 1) % (kStuffPeriod + 1) != 0) out.push_back(in[i]);
    return out;
}

void put_u32(Bytes& b, uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_u64(Bytes& b, uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
uint32_t get_u32(ByteView b, size_t off) {
    return static_cast<uint32_t>(b[off]) | (static_cast<uint32_t>(b[off + 1]) << 8) |
           (static_cast<uint32_t>(b[off + 2]) << 16) | (static_cast<uint32_t>(b[off + 3]) << 24);
}
uint64_t get_u64(ByteView b, size_t off) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[off + static_cast<size_t>(i)];
    return v;
}

// [magic][orig_len][payload] so unpack knows how much to recover
Bytes frame_blob(ByteView payload, uint64_t orig_len, const PackerProfile& p) {
    Bytes out;
    out.reserve(payload.size() + 12);
    put_u32(out, blob_magic(p));
    put_u64(out, orig_len);
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

struct Framed {
    uint64_t orig_len;
    ByteView payload;
};
std::optional<Framed> unframe_blob(ByteView blob, const PackerProfile& p) {
    if (blob.size() < 12 || get_u32(blob, 0) != blob_magic(p)) return std::nullopt;
    return Framed{get_u64(blob, 4), ByteView(blob.data() + 12, blob.size() - 12)};
}

Rng profile_rng(const PackerProfile& p, std::string_view purpose) {
    return Rng(p.seed).fork(p.name).fork(purpose).fork(p.variant);
}

Bytes keystream_xor(ByteView data, Rng rng) {
    Bytes out(data.begin(), data.end());
    size_t i = 0;
    while (i < out.size()) {
        uint64_t k = rng.next();
        for (int b = 0; b < 8 && i < out.size(); ++b, ++i)
            out[i] ^= static_cast<uint8_t>(k >> (8 * b));
    }
    return out;
}

std::array<uint8_t, 256> substitution_box(Rng rng) {
    std::array<uint8_t, 256> s;
    for (int i = 0; i < 256; ++i) s[i] = static_cast<uint8_t>(i);
    for (int i = 255; i > 0; --i)
        std::swap(s[i], s[rng.below(static_cast<uint64_t>(i) + 1)]);
    return s;
}

// profile-keyed permutation of 512-byte blocks; the tail short block stays
// put so the transform is trivially invertible
std::vector<size_t> block_permutation(size_t blocks, Rng rng) {
    std::vector<size_t> perm(blocks);
    std::iota(perm.begin(), perm.end(), size_t{0});
    for (size_t i = blocks; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    return perm;
}

Bytes shuffle_blocks(ByteView data, Rng rng, bool inverse, size_t kBlock = 512) {
    const size_t blocks = data.size() / kBlock;
    Bytes out(data.begin(), data.end());
    if (blocks < 2) return out;
    const auto perm = block_permutation(blocks, rng);
    for (size_t i = 0; i < blocks; ++i) {
        const size_t src = inverse ? perm[i] : i;
        const size_t dst = inverse ? i : perm[i];
        std::copy_n(data.begin() + static_cast<ptrdiff_t>(src * kBlock), kBlock,
                    out.begin() + static_cast<ptrdiff_t>(dst * kBlock));
    }
    return out;
}

// virtualization-style bloat: every 512-byte block is followed by its
// bitwise complement and a constant filler block, so box-averaged views of
// the payload settle at a profile-specific constant while block-local
// structure stays recoverable
Bytes vm_bloat(ByteView coded, uint8_t filler) {
    constexpr size_t kBlock = 512;
    Bytes out;
    out.reserve(coded.size() * 3);
    for (size_t at = 0; at < coded.size(); at += kBlock) {
        const size_t n = std::min(kBlock, coded.size() - at);
        out.insert(out.end(), coded.begin() + static_cast<ptrdiff_t>(at),
                   coded.begin() + static_cast<ptrdiff_t>(at + n));
        for (size_t k = 0; k < n; ++k) out.push_back(coded[at + k] ^ 0xFF);
        out.insert(out.end(), n, filler);
    }
    return out;
}

Bytes vm_debloat(ByteView bloated) {
    constexpr size_t kBlock = 512;
    Bytes out;
    out.reserve(bloated.size() / 3);
    size_t at = 0;
    while (at < bloated.size()) {
        const size_t n = std::min(kBlock, (bloated.size() - at) / 3);
        if (n == 0) break;
        out.insert(out.end(), bloated.begin() + static_cast<ptrdiff_t>(at),
                   bloated.begin() + static_cast<ptrdiff_t>(at + n));
        at += 3 * n;
    }
    return out;
}

std::array<uint8_t, 256> invert_box(const std::array<uint8_t, 256>& s) {
    std::array<uint8_t, 256> inv{};
    for (int i = 0; i < 256; ++i) inv[s[i]] = static_cast<uint8_t>(i);
    return inv;
}

Bytes apply_box(ByteView data, const std::array<uint8_t, 256>& box) {
    Bytes out(data.size());
    for (size_t i = 0; i < data.size(); ++i) out[i] = box[data[i]];
    return out;
}

// opcode-shaped filler: skewed toward common encodings, rotated by a tint so
// different producers emit visibly different code textures
Bytes opcode_filler(Rng rng, size_t len, uint64_t tint = 0) {
    static constexpr uint8_t common[] = {0x55, 0x8B, 0x89, 0x83, 0xE8, 0xFF, 0x53, 0x56,
                                         0x57, 0x0F, 0x74, 0x75, 0xC3, 0x8D, 0x33, 0x3B};
    uint8_t ops[16];
    for (int i = 0; i < 16; ++i)
        ops[i] = static_cast<uint8_t>(common[(i + tint) % 16] + (tint % 7));
    Bytes out(len);
    for (size_t i = 0; i < len; ++i) {
        if (rng.below(4) == 0)
            out[i] = static_cast<uint8_t>(rng.below(256));
        else
            out[i] = ops[rng.below(16)];
    }
    return out;
}

Bytes make_stub(const PackerProfile& p, size_t len) {
    // 48-byte signature prefix, then loader-shaped code so stubs read like
    // .text rather than noise
    Bytes stub = p.stub;
    Bytes body = opcode_filler(profile_rng(p, "stub-body"), len > stub.size() ? len - stub.size() : 0,
                               Rng::fnv1a64(p.name));
    stub.insert(stub.end(), body.begin(), body.end());
    stub.resize(len);
    // variant wiggle confined to the tail half so signatures stay stable
    if (p.variant != 0) {
        Rng vr = profile_rng(p, "stub-variant");
        for (size_t i = stub.size() / 2; i < stub.size(); ++i)
            if (vr.below(4) == 0) stub[i] = static_cast<uint8_t>(vr.next());
    }
    return stub;
}

void append_text(Bytes& b, std::string_view s) { b.insert(b.end(), s.begin(), s.end()); }

void plant_markers(Bytes& stub, const std::vector<std::string>& markers) {
    size_t at = 64;
    for (const auto& m : markers) {
        if (at + m.size() + 1 >= stub.size()) break;
        std::memcpy(stub.data() + at, m.data(), m.size());
        stub[at + m.size()] = 0;
        at += m.size() + 17;
    }
}

// small trailer sections so packed layouts carry the same section count as
// ordinary builds
void append_trailer_sections(pe::PeBuildSpec& spec, const PackerProfile& p, size_t want_total) {
    Rng rng = profile_rng(p, "trailer");
    // names carry a profile-local suffix so the section table shares no
    // byte pattern across packers
    const char suffix = static_cast<char>('a' + (Rng::fnv1a64(p.name) % 26));
    const std::string names[] = {std::string(".rl") + suffix, std::string(".bs") + suffix,
                                 std::string(".pd") + suffix};
    size_t have = spec.sections.size() + 1;  // +1 for the import section
    size_t n = 0;
    while (have < want_total && n < 3) {
        Bytes data(128 + rng.below(256), 0);
        for (size_t i = 0; i < data.size(); i += 16) data[i] = static_cast<uint8_t>(rng.below(64));
        spec.sections.push_back({names[n], data, 0x42000040u, 0});
        have++;
        n++;
    }
}

pe::PortableExecutable parse_or_throw(ByteView pe_bytes) {
    try {
        return pe::parse_pe(pe_bytes, pe::Tolerance::Lenient);
    } catch (const Error& e) {
        throw UnparseableInput(std::string("pack input does not parse: ") + e.what());
    }
}

// long-run band texture: visually loud after box-averaging
Bytes band_texture(size_t len, uint8_t lo, uint8_t hi, size_t period) {
    Bytes out(len);
    for (size_t i = 0; i < len; ++i) out[i] = ((i / period) % 2 == 0) ? lo : hi;
    return out;
}

Bytes icon_like_resource(Rng rng) {
    // a light, banded block so compressor outputs still carry a visible
    // resource region
    Bytes out(1536);
    for (size_t i = 0; i < out.size(); ++i) {
        const uint8_t base = static_cast<uint8_t>(0xC0 + ((i / 48) % 4) * 8);
        out[i] = (i % 19 == 0) ? static_cast<uint8_t>(rng.below(256)) : base;
    }
    append_text(out, "MAINICON");
    return out;
}

Bytes pack_compress(ByteView input, const PackerProfile& p) {
    auto blob = frame_blob(view(stuff_bytes(view(deflate_bytes(input)))), input.size(), p);
    pe::PeBuildSpec spec;
    spec.timestamp = 0x5E000000u + static_cast<uint32_t>(profile_rng(p, "timestamp").below(1u << 24));
    if (p.name == "sim-upx") {
        Bytes stub = make_stub(p, 4608);
        Bytes body = stub;
        body.insert(body.end(), blob.begin(), blob.end());
        // UPX0 is virtual-only; entry lands on the stub at the head of UPX1
        spec.sections.push_back({p.section_names[0], {}, 0xC0000080u, 0x8000});
        spec.sections.push_back({p.section_names[1], body, 0xE0000040u, 0});
        spec.sections.push_back({p.section_names[2], icon_like_resource(profile_rng(p, "rsrc")),
                                 0x40000040u, 0});
        spec.imports = {{"kernel32", {"loadlibrarya", "getprocaddress", "virtualalloc",
                                      "virtualprotect", "exitprocess"}}};
    } else {  // sim-mpress
        Bytes stub = make_stub(p, 4608);
        Bytes dark = band_texture(1536, 0x00, 0x2A, 320);
        stub.insert(stub.end(), dark.begin(), dark.end());
        spec.sections.push_back({p.section_names[0], blob, 0xC0000040u, 0});
        spec.sections.push_back({p.section_names[1], stub, 0xE0000020u, 0});
        spec.imports = {{"kernel32", {"loadlibrarya", "getprocaddress", "heapalloc",
                                      "virtualfree"}}};
    }
    append_trailer_sections(spec, p, 6);
    return pe::build_pe(spec);
}

Bytes pack_encrypt(ByteView input, const PackerProfile& p) {
    // checksum rides with the plaintext, then everything is enciphered
    Bytes plain(input.begin(), input.end());
    const auto digest = Md5::hash(input);
    plain.insert(plain.end(), digest.begin(), digest.end());
    Bytes cipher = keystream_xor(view(plain), profile_rng(p, "keystream"));
    auto blob = frame_blob(view(cipher), input.size(), p);

    pe::PeBuildSpec spec;
    spec.timestamp = 0x5E000000u + static_cast<uint32_t>(profile_rng(p, "timestamp").below(1u << 24));
    Bytes stub = make_stub(p, 4864);
    if (p.name == "sim-hyperion") {
        plant_markers(stub, {"decrypt", "container", "aes128"});
        spec.imports = {{"kernel32", {"virtualalloc", "virtualprotect", "exitprocess"}},
                        {"msvcrt", {"memcpy", "malloc"}}};
    } else {  // sim-nimcrypt
        plant_markers(stub, {"ntdll.dll", "NimMain", "syscall"});
        spec.imports = {{"kernel32", {"virtualalloc", "createthread", "getprocaddress", "rtlmovememory"}}};
    }
    spec.sections.push_back({p.section_names[0], stub, 0x60000020u, 0});
    if (p.name == "sim-hyperion")
        spec.sections.push_back({".hypcfg", band_texture(1536, 0xC8, 0xF4, 384), 0x40000040u, 0});
    else
        spec.sections.push_back({".nimtab", band_texture(1536, 0x08, 0x30, 256), 0x40000040u, 0});
    spec.sections.push_back({p.section_names[1], blob, 0xC0000040u, 0});
    append_trailer_sections(spec, p, 6);
    return pe::build_pe(spec);
}

Bytes pack_reflective(ByteView input, const PackerProfile& p) {
    auto blob = frame_blob(input, input.size(), p);
    pe::PeBuildSpec spec;
    spec.timestamp = 0x5E000000u + static_cast<uint32_t>(profile_rng(p, "timestamp").below(1u << 24));
    Bytes stub = make_stub(p, 4736);
    plant_markers(stub, {"reflective", "ImageBase"});
    spec.sections.push_back({p.section_names[0], stub, 0x60000020u, 0});
    spec.sections.push_back({p.section_names[1], blob, 0xC0000040u, 0});
    spec.imports = {{"kernel32", {"virtualalloc", "virtualprotect", "createthread",
                                  "getmodulehandlea"}}};
    append_trailer_sections(spec, p, 6);
    return pe::build_pe(spec);
}

Bytes pack_protector(ByteView input, const PackerProfile& p) {
    const auto box = substitution_box(profile_rng(p, "sbox"));
    const uint8_t filler = p.name == "sim-themida" ? 0x00 : 0x30;
    Bytes coded = vm_bloat(view(apply_box(input, box)), filler);
    coded = shuffle_blocks(view(coded), profile_rng(p, "blocks"), false, 1536);
    auto blob = frame_blob(view(coded), input.size(), p);

    pe::PeBuildSpec spec;
    spec.timestamp = 0x5E000000u + static_cast<uint32_t>(profile_rng(p, "timestamp").below(1u << 24));
    Bytes stub = make_stub(p, 2560);
    if (p.name == "sim-themida") {
        plant_markers(stub, {"IsDebuggerPresent", "CheckRemoteDebuggerPresent", "vmentry"});
        spec.imports = {{"kernel32", {"getmodulehandlea", "getprocaddress", "isdebuggerpresent"}},
                        {"user32", {"messageboxa"}}};
    } else {  // sim-enigma
        plant_markers(stub, {"IsDebuggerPresent", "OutputDebugStringA", "license"});
        spec.imports = {{"kernel32", {"getmodulehandlea", "getprocaddress", "exitprocess"}},
                        {"advapi32", {"regopenkeyexa"}}};
    }
    spec.sections.push_back({p.section_names[0], stub, 0x60000020u, 0});
    spec.sections.push_back({p.section_names[1], blob, 0xC0000040u, 0});
    if (p.name == "sim-themida") {
        spec.sections.push_back(
            {p.section_names[2], opcode_filler(profile_rng(p, "filler"), 2560, Rng::fnv1a64(p.name) >> 8), 0x60000020u, 0});
    } else {
        Bytes filler = band_texture(3072, 0xCC, 0xEB, 448);
        spec.sections.push_back({p.section_names[2], filler, 0x60000020u, 0});
    }
    append_trailer_sections(spec, p, 6);
    return pe::build_pe(spec);
}

bool is_printable(uint8_t c) { return c >= 0x20 && c <= 0x7E; }

}  // namespace

const Bytes& donor_certificate() {
    // deterministic DER-shaped fixture: nested sequences, OID-ish runs and a
    // base64-looking body, so the blob reads like a real signature region
    static const Bytes cert = [] {
        Bytes b;
        b.reserve(3400);
        put_u32(b, 3392);        // WIN_CERTIFICATE dwLength
        b.push_back(0x00);
        b.push_back(0x02);       // wRevision 0x200
        b.push_back(0x02);
        b.push_back(0x00);       // wCertificateType PKCS#7
        b.push_back(0x30);
        b.push_back(0x82);
        b.push_back(0x0D);
        b.push_back(0x40);
        Rng rng(0xCE27F1CA7E);
        const std::string oid_pool = "\x06\x09\x2A\x86\x48\x86\xF7\x0D\x01\x07\x02";
        static const char b64[] =
            "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
        while (b.size() < 1024) {
            switch (rng.below(4)) {
                case 0:
                    b.insert(b.end(), oid_pool.begin(), oid_pool.end());
                    break;
                case 1:
                    for (int i = 0; i < 24; ++i) b.push_back(static_cast<uint8_t>(b64[rng.below(64)]));
                    break;
                case 2:
                    for (int i = 0; i < 16; ++i) b.push_back(0);
                    break;
                default:
                    b.push_back(0x30);
                    b.push_back(0x82);
                    b.push_back(static_cast<uint8_t>(rng.below(16)));
                    b.push_back(static_cast<uint8_t>(rng.below(256)));
                    break;
            }
        }
        // signature bitmap region: long alternating runs survive box-averaged
        // thumbnails, unlike the base64-looking body
        while (b.size() < 3300) {
            const uint8_t v = ((b.size() / 512) % 2 == 0) ? 0x00 : 0xFF;
            b.push_back(v);
        }
        append_text(b, "CN=Contoso Word Processor, O=Contoso Ltd, C=US");
        b.resize(3392, 0);
        return b;
    }();
    return cert;
}

const std::vector<std::string>& profile_names() {
    static const std::vector<std::string> names = {
        "sim-upx",   "sim-mpress",  "sim-hyperion", "sim-nimcrypt",
        "sim-amber", "sim-mangle",  "sim-themida",  "sim-enigma",
    };
    return names;
}

PackerProfile profile(std::string_view name, uint64_t seed, uint32_t variant) {
    PackerProfile p;
    p.name = std::string(name);
    p.seed = seed;
    p.variant = variant;
    if (name == "sim-upx") {
        p.transform_kind = TransformKind::Compress;
        p.section_names = {"UPX0", "UPX1", ".rsrc"};
    } else if (name == "sim-mpress") {
        p.transform_kind = TransformKind::Compress;
        p.section_names = {".MPRESS1", ".MPRESS2"};
    } else if (name == "sim-hyperion") {
        p.transform_kind = TransformKind::Encrypt;
        p.section_names = {".text", ".hyp"};
    } else if (name == "sim-nimcrypt") {
        p.transform_kind = TransformKind::Encrypt;
        p.section_names = {".text", ".nimdat"};
    } else if (name == "sim-amber") {
        p.transform_kind = TransformKind::ReflectiveWrap;
        p.section_names = {".text", ".ambdat"};
    } else if (name == "sim-mangle") {
        p.transform_kind = TransformKind::StringMangleCertClone;
        p.section_names = {};
    } else if (name == "sim-themida") {
        p.transform_kind = TransformKind::ProtectorWrap;
        p.section_names = {".tmd0", ".tmd1", ".tmdvm"};
    } else if (name == "sim-enigma") {
        p.transform_kind = TransformKind::ProtectorWrap;
        p.section_names = {".enig1", ".enig2", ".enigvm"};
    } else {
        throw SpecInvalid("unknown packer profile: " + p.name);
    }
    // stable stub prefix: hashes of the profile name, independent of variant
    Rng rng = Rng(seed).fork(p.name).fork("stub-prefix");
    p.stub = rng.bytes(48);
    p.stub[0] = 0x60;  // pusha-style prologue marker
    p.stub[1] = 0xBE;
    return p;
}

Bytes pack_mangle(ByteView pe_bytes, const PackerProfile& p, MangleOptions opt) {
    auto parsed = parse_or_throw(pe_bytes);
    Bytes out(pe_bytes.begin(), pe_bytes.end());

    if (opt.strings) {
        Rng rng = profile_rng(p, "strings");
        const size_t header_end = parsed.header_blob.size();
        for (const auto& hit : feat::string_scan(pe_bytes, 5)) {
            if (hit.offset < header_end) continue;
            if (!feat::looks_like_url(hit.text) && !feat::looks_like_ip(hit.text) &&
                !feat::looks_like_registry_path(hit.text))
                continue;
            for (size_t i = 0; i < hit.text.size(); ++i) {
                uint8_t c;
                do {
                    c = static_cast<uint8_t>(0x21 + rng.below(0x5E));
                } while (!is_printable(c));
                out[hit.offset + i] = c;
            }
        }
    }

    if (opt.cert) {
        // drop any existing certificate region, then append the donor blob
        // and point the security directory at it
        auto reparsed = pe::parse_pe(view(out), pe::Tolerance::Lenient);
        const auto& dirs = reparsed.optional_header.data_dirs;
        size_t cert_off = out.size(), cert_size = 0;
        if (dirs.size() > 4 && dirs[4].rva != 0 && dirs[4].rva <= out.size()) {
            cert_off = dirs[4].rva;
            cert_size = std::min<size_t>(dirs[4].size, out.size() - cert_off);
        }
        if (cert_size > 0 && cert_off + cert_size == out.size())
            out.resize(cert_off);  // strip a trailing certificate cleanly

        const auto& donor = donor_certificate();
        const uint32_t new_off = static_cast<uint32_t>(out.size());
        out.insert(out.end(), donor.begin(), donor.end());

        // security directory slot: e_lfanew + 4 + 20 + 96 + 4*8
        const uint32_t e_lfanew = get_u32(view(out), 0x3C);
        const size_t dir_off = e_lfanew + 4 + 20 + 96 + 4 * 8;
        if (reparsed.coff.optional_header_size >= 96 + 5 * 8 &&
            reparsed.optional_header.data_dirs.size() >= 5 && dir_off + 8 <= out.size()) {
            for (int i = 0; i < 4; ++i) {
                out[dir_off + i] = static_cast<uint8_t>(new_off >> (8 * i));
                out[dir_off + 4 + i] = static_cast<uint8_t>(donor.size() >> (8 * i));
            }
        }
    }
    return out;
}

Bytes pack(ByteView pe_bytes, const PackerProfile& p) {
    parse_or_throw(pe_bytes);
    switch (p.transform_kind) {
        case TransformKind::Compress:
            return pack_compress(pe_bytes, p);
        case TransformKind::Encrypt:
            return pack_encrypt(pe_bytes, p);
        case TransformKind::ReflectiveWrap:
            return pack_reflective(pe_bytes, p);
        case TransformKind::StringMangleCertClone:
            return pack_mangle(pe_bytes, p, MangleOptions{});
        case TransformKind::ProtectorWrap:
            return pack_protector(pe_bytes, p);
    }
    throw SpecInvalid("unhandled transform kind");
}

std::optional<Bytes> unpack(ByteView packed, const PackerProfile& p) {
    pe::PortableExecutable parsed;
    try {
        parsed = pe::parse_pe(packed, pe::Tolerance::Lenient);
    } catch (const Error&) {
        return std::nullopt;
    }
    // the payload blob is the largest section carrying a frame header
    for (const auto& s : parsed.sections) {
        ByteView raw = view(s.raw_data);
        // compress profiles prepend the stub inside the body section
        for (size_t skip : {size_t{0}, size_t{4608}}) {
            if (raw.size() <= skip) continue;
            auto framed = unframe_blob(ByteView(raw.data() + skip, raw.size() - skip), p);
            if (!framed) continue;
            switch (p.transform_kind) {
                case TransformKind::Compress:
                    return inflate_bytes(view(unstuff_bytes(framed->payload)), framed->orig_len);
                case TransformKind::Encrypt: {
                    Bytes plain =
                        keystream_xor(framed->payload, profile_rng(p, "keystream"));
                    if (plain.size() < framed->orig_len + 16) return std::nullopt;
                    Bytes original(plain.begin(),
                                   plain.begin() + static_cast<ptrdiff_t>(framed->orig_len));
                    Md5Digest tail;
                    std::copy_n(plain.begin() + static_cast<ptrdiff_t>(framed->orig_len), 16,
                                tail.begin());
                    if (Md5::hash(view(original)) != tail) return std::nullopt;
                    return original;
                }
                case TransformKind::ReflectiveWrap:
                    return Bytes(framed->payload.begin(),
                                 framed->payload.begin() +
                                     static_cast<ptrdiff_t>(std::min<uint64_t>(
                                         framed->orig_len, framed->payload.size())));
                case TransformKind::ProtectorWrap: {
                    Bytes unshuffled =
                        shuffle_blocks(framed->payload, profile_rng(p, "blocks"), true, 1536);
                    Bytes debloated = vm_debloat(view(unshuffled));
                    const auto inv = invert_box(substitution_box(profile_rng(p, "sbox")));
                    Bytes original = apply_box(view(debloated), inv);
                    original.resize(std::min<size_t>(original.size(),
                                                     static_cast<size_t>(framed->orig_len)));
                    return original;
                }
                case TransformKind::StringMangleCertClone:
                    return std::nullopt;  // not invertible
            }
        }
    }
    return std::nullopt;
}

// ---- rules ----

namespace {

struct StubPattern {
    std::vector<uint8_t> bytes;
    std::vector<bool> wild;
};

StubPattern parse_stub_pattern(const std::string& text) {
    StubPattern sp;
    std::string tok;
    auto flush = [&] {
        if (tok.empty()) return;
        if (tok == "??") {
            sp.bytes.push_back(0);
            sp.wild.push_back(true);
        } else {
            if (tok.size() != 2) throw RulesParseError("bad stub token: " + tok);
            sp.bytes.push_back(static_cast<uint8_t>(std::stoul(tok, nullptr, 16)));
            sp.wild.push_back(false);
        }
        tok.clear();
    };
    for (char c : text) {
        if (c == ' ' || c == '\t') {
            flush();
        } else if (std::isxdigit(static_cast<unsigned char>(c)) || c == '?') {
            tok.push_back(c);
            if (tok.size() > 2) throw RulesParseError("bad stub token: " + tok);
        } else {
            throw RulesParseError(std::string("bad stub pattern char: ") + c);
        }
    }
    flush();
    return sp;
}

bool glob_match(const std::string& pattern, const std::string& name) {
    if (!pattern.empty() && pattern.back() == '*')
        return name.rfind(pattern.substr(0, pattern.size() - 1), 0) == 0;
    return pattern == name;
}

}  // namespace

std::vector<PackerRule> default_rules() {
    std::vector<PackerRule> rules;
    for (const auto& name : profile_names()) {
        PackerProfile p = profile(name);
        PackerRule r;
        r.name = name;
        for (const auto& s : p.section_names) r.section_name_patterns.push_back(s);
        if (name == "sim-mangle") {
            // structure is preserved; the donor certificate is the signature
            r.section_name_patterns.clear();
            const auto& donor = donor_certificate();
            std::string pat;
            for (size_t i = 8; i < 24; ++i) {
                char buf[4];
                std::snprintf(buf, sizeof buf, "%02X ", donor[i]);
                pat += buf;
            }
            pat.pop_back();
            r.entry_stub_pattern = pat;  // matched anywhere, see identify_packer
            r.entropy_lo = 0.0;
            r.entropy_hi = 8.0;
        } else {
            std::string pat;
            for (size_t i = 0; i < 12; ++i) {
                char buf[4];
                std::snprintf(buf, sizeof buf, "%02X ", p.stub[i]);
                pat += buf;
            }
            pat.pop_back();
            r.entry_stub_pattern = pat;
            switch (p.transform_kind) {
                case TransformKind::Compress:
                    r.entropy_lo = 6.5;
                    r.entropy_hi = 7.8;
                    break;
                case TransformKind::Encrypt:
                    r.entropy_lo = 7.9;
                    r.entropy_hi = 8.0;
                    break;
                default:
                    r.entropy_lo = 0.0;
                    r.entropy_hi = 8.0;
            }
        }
        rules.push_back(std::move(r));
    }
    return rules;
}

std::vector<PackerRule> parse_rules(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw RulesParseError(std::string("rules json: ") + e.what());
    }
    if (!j.is_array()) throw RulesParseError("rules json must be an array");
    std::vector<PackerRule> rules;
    for (const auto& e : j) {
        PackerRule r;
        try {
            r.name = e.at("name").get<std::string>();
            if (e.contains("section_name_patterns"))
                r.section_name_patterns = e["section_name_patterns"].get<std::vector<std::string>>();
            if (e.contains("entry_stub_pattern"))
                r.entry_stub_pattern = e["entry_stub_pattern"].get<std::string>();
            if (e.contains("entropy_range")) {
                r.entropy_lo = e["entropy_range"].at(0).get<double>();
                r.entropy_hi = e["entropy_range"].at(1).get<double>();
            }
        } catch (const nlohmann::json::exception& ex) {
            throw RulesParseError(std::string("rules json: ") + ex.what());
        }
        (void)parse_stub_pattern(r.entry_stub_pattern);  // validate early
        rules.push_back(std::move(r));
    }
    return rules;
}

std::string rules_to_json(const std::vector<PackerRule>& rules) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rules) {
        j.push_back({{"name", r.name},
                     {"section_name_patterns", r.section_name_patterns},
                     {"entry_stub_pattern", r.entry_stub_pattern},
                     {"entropy_range", {r.entropy_lo, r.entropy_hi}}});
    }
    return j.dump(2);
}

std::vector<RuleMatch> identify_packer(ByteView pe_bytes, const std::vector<PackerRule>& rules) {
    pe::PortableExecutable parsed;
    try {
        parsed = pe::parse_pe(pe_bytes, pe::Tolerance::Lenient);
    } catch (const Error&) {
        return {};
    }

    // dominant section = largest raw data
    double dominant_entropy = 0.0;
    size_t dominant_size = 0;
    for (const auto& s : parsed.sections) {
        if (s.raw_data.size() > dominant_size) {
            dominant_size = s.raw_data.size();
            dominant_entropy = s.entropy;
        }
    }

    std::vector<RuleMatch> out;
    for (const auto& r : rules) {
        int specificity = 0;
        bool ok = true;

        if (!r.entry_stub_pattern.empty()) {
            const StubPattern sp = parse_stub_pattern(r.entry_stub_pattern);
            auto match_at = [&](size_t off) {
                if (off + sp.bytes.size() > pe_bytes.size()) return false;
                for (size_t i = 0; i < sp.bytes.size(); ++i)
                    if (!sp.wild[i] && pe_bytes[off + i] != sp.bytes[i]) return false;
                return true;
            };
            bool matched = false;
            // prefer the entry point; fall back to a full scan so signatures
            // living outside the stub (overlay blobs) still hit
            bool scanned_entry = false;
            for (const auto& s : parsed.sections) {
                const uint32_t span = std::max(s.virtual_size, s.declared_raw_size);
                const uint32_t ep = parsed.optional_header.entry_point_rva;
                if (ep >= s.virtual_address && ep < s.virtual_address + span) {
                    const size_t off = s.raw_offset + (ep - s.virtual_address);
                    scanned_entry = true;
                    matched = match_at(off);
                    break;
                }
            }
            if (!matched) {
                for (size_t off = 0; off + sp.bytes.size() <= pe_bytes.size(); ++off) {
                    if (match_at(off)) {
                        matched = true;
                        break;
                    }
                }
            }
            (void)scanned_entry;
            if (!matched) ok = false;
            specificity += 4;
        }

        if (ok && !r.section_name_patterns.empty()) {
            for (const auto& pat : r.section_name_patterns) {
                bool any = false;
                for (const auto& s : parsed.sections)
                    if (glob_match(pat, s.name)) any = true;
                if (!any) {
                    ok = false;
                    break;
                }
            }
            specificity += 2;
        }

        if (ok && (r.entropy_lo > 0.0 || r.entropy_hi < 8.0)) {
            if (dominant_entropy < r.entropy_lo || dominant_entropy > r.entropy_hi) ok = false;
            specificity += 1;
        }

        if (ok) out.push_back({r.name, specificity});
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const RuleMatch& a, const RuleMatch& b) { return a.specificity > b.specificity; });
    return out;
}

}  // namespace packscope::packlab
