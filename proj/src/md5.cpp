#include "packscope/md5.hpp"

#include <openssl/evp.h>

#include <stdexcept>

namespace packscope {

static EVP_MD_CTX* as_ctx(void* p) { return static_cast<EVP_MD_CTX*>(p); }

void Md5::CtxDeleter::operator()(void* ctx) const {
    if (ctx) EVP_MD_CTX_free(as_ctx(ctx));
}

Md5::Md5() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(as_ctx(ctx_.get()), EVP_md5(), nullptr) != 1)
        throw std::runtime_error("MD5 init failed");
}

Md5::Md5(const Md5& other) : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_MD_CTX_copy_ex(as_ctx(ctx_.get()), as_ctx(other.ctx_.get())) != 1)
        throw std::runtime_error("MD5 copy failed");
}

Md5& Md5::operator=(const Md5& other) {
    if (this != &other) {
        if (EVP_MD_CTX_copy_ex(as_ctx(ctx_.get()), as_ctx(other.ctx_.get())) != 1)
            throw std::runtime_error("MD5 copy failed");
    }
    return *this;
}

Md5::~Md5() = default;

void Md5::update(ByteView data) {
    if (data.empty()) return;
    if (EVP_DigestUpdate(as_ctx(ctx_.get()), data.data(), data.size()) != 1)
        throw std::runtime_error("MD5 update failed");
}

Md5Digest Md5::finish() const {
    // finalize a copy so the running state stays usable
    Md5 snapshot(*this);
    Md5Digest out{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(as_ctx(snapshot.ctx_.get()), out.data(), &len) != 1 || len != 16)
        throw std::runtime_error("MD5 final failed");
    return out;
}

Md5Digest Md5::hash(ByteView data) {
    Md5 h;
    h.update(data);
    return h.finish();
}

std::string md5_hex(ByteView data) {
    auto d = Md5::hash(data);
    return to_hex(ByteView(d.data(), d.size()));
}

}  // namespace packscope
