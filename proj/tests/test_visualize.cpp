#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "packscope/visualize.hpp"
#include "support.hpp"

#include <chrono>
#include <cstdio>

using namespace packscope;
using namespace packscope::viz;
using testsupport::gen_splitmix;

TEST_CASE("exact fit keeps every byte") {
    auto img = binary_to_image(view(gen_splitmix(1, 1024)), 32);
    CHECK(img.width == 32);
    CHECK(img.height == 32);
    CHECK(img.pixels.size() == 1024);
}

TEST_CASE("floor arithmetic drops the tail") {
    auto img = binary_to_image(view(gen_splitmix(2, 1030)), 32);
    CHECK(img.width == 32);
    CHECK(img.height == 32);
    CHECK(img.pixels.size() == 1024);
}

TEST_CASE("pixel (r,c) equals source byte r*width+c") {
    Bytes data(2048);
    for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<uint8_t>(i & 0xFF);
    auto img = binary_to_image(view(data), 64);
    for (uint32_t r = 0; r < img.height; ++r)
        for (uint32_t c = 0; c < img.width; ++c)
            REQUIRE(img.at(r, c) == static_cast<uint8_t>((r * 64 + c) & 0xFF));
}

TEST_CASE("width schedule follows file size") {
    CHECK(width_for_size(5 * 1024) == 32);
    CHECK(width_for_size(20 * 1024) == 64);
    CHECK(width_for_size(45 * 1024) == 128);
    CHECK(width_for_size(80 * 1024) == 256);
    CHECK(width_for_size(150 * 1024) == 384);
    CHECK(width_for_size(300 * 1024) == 512);
    CHECK(width_for_size(700 * 1024) == 768);
    CHECK(width_for_size(2 * 1024 * 1024) == 1024);
}

TEST_CASE("round-trip properties on random files") {
    Rng rng(11);
    for (int t = 0; t < 1000; ++t) {
        Rng r = rng.fork(t);
        const size_t len = 1 + r.below(6000);
        auto data = r.bytes(len);
        const uint32_t width = 1 + static_cast<uint32_t>(r.below(96));
        if (len < width) continue;  // zero-height images are not meaningful
        auto img = binary_to_image(view(data), width);
        auto back = image_to_binary(img);
        // image_to_binary ∘ binary_to_image drops exactly len mod width bytes
        REQUIRE(back.size() == len - len % width);
        REQUIRE(std::equal(back.begin(), back.end(), data.begin()));
        // binary_to_image ∘ image_to_binary is the identity on images
        REQUIRE(binary_to_image(view(back), width) == img);
    }
}

TEST_CASE("png write/read round-trip") {
    auto img = binary_to_image(view(gen_splitmix(5, 64 * 64)), 64);
    const std::string path = "/tmp/packscope_viz_test.png";
    write_png(img, path);
    auto loaded = read_png(path);
    CHECK(loaded == img);
    std::remove(path.c_str());
}

TEST_CASE("suffix reconstruction recovers removed bytes") {
    auto original = gen_splitmix(21, 100000);
    auto target = Md5::hash(view(original));

    SUBCASE("zero-length suffix returns the input unchanged") {
        auto got = reconstruct_suffix(view(original), target, 3);
        REQUIRE(got.has_value());
        CHECK(*got == original);
    }
    SUBCASE("two removed bytes are found") {
        ByteView cut(original.data(), original.size() - 2);
        auto got = reconstruct_suffix(cut, target, 3);
        REQUIRE(got.has_value());
        CHECK(*got == original);
    }
    SUBCASE("random target is not found at suffix length 1") {
        Md5Digest bogus{};
        bogus.fill(0xAB);
        ByteView cut(original.data(), original.size() - 1);
        CHECK_FALSE(reconstruct_suffix(cut, bogus, 1).has_value());
    }
}

TEST_CASE("suffix search sustains at least 1e5 candidates per second on a 1 MiB prefix") {
    auto prefix = gen_splitmix(33, 1 << 20);
    Md5Digest bogus{};
    bogus.fill(0xCD);
    const auto t0 = std::chrono::steady_clock::now();
    // full 2-byte sweep = 65536 candidates, all misses
    CHECK_FALSE(reconstruct_suffix(view(prefix), bogus, 2).has_value());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double rate = (65536.0 + 256.0) / secs;
    CHECK(rate >= 1e5);
}
