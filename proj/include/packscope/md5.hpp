#pragma once

#include "packscope/common.hpp"

#include <array>
#include <memory>

namespace packscope {

using Md5Digest = std::array<uint8_t, 16>;

// Incremental MD5 (backed by OpenSSL). Copyable: cloning mid-stream is cheap,
// which the suffix brute-force relies on to avoid rehashing a shared prefix.
class Md5 {
public:
    Md5();
    Md5(const Md5& other);
    Md5& operator=(const Md5& other);
    Md5(Md5&&) noexcept = default;
    Md5& operator=(Md5&&) noexcept = default;
    ~Md5();

    void update(ByteView data);
    Md5Digest finish() const;  // does not consume the running state

    static Md5Digest hash(ByteView data);

private:
    struct CtxDeleter {
        void operator()(void* ctx) const;
    };
    std::unique_ptr<void, CtxDeleter> ctx_;
};

std::string md5_hex(ByteView data);

}  // namespace packscope
