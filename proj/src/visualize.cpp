#include "packscope/visualize.hpp"

#include <png.h>

#include <atomic>
#include <cstdio>
#include <memory>
#include <mutex>
#include <thread>

namespace packscope::viz {

uint32_t width_for_size(size_t n) {
    const size_t kib = n / 1024;
    if (kib < 10) return 32;
    if (kib < 30) return 64;
    if (kib < 60) return 128;
    if (kib < 100) return 256;
    if (kib < 200) return 384;
    if (kib < 500) return 512;
    if (kib < 1000) return 768;
    return 1024;
}

GreyscaleImage binary_to_image(ByteView data, std::optional<uint32_t> width) {
    if (data.empty()) throw EmptyInput("cannot visualize an empty input");
    GreyscaleImage img;
    img.width = width.value_or(width_for_size(data.size()));
    if (img.width == 0) throw SpecInvalid("image width must be positive");
    img.height = static_cast<uint32_t>(data.size() / img.width);
    img.pixels.assign(data.begin(),
                      data.begin() + static_cast<ptrdiff_t>(img.width) * img.height);
    return img;
}

Bytes image_to_binary(const GreyscaleImage& img) { return img.pixels; }

GreyscaleImage resize_area(const GreyscaleImage& img, uint32_t side) {
    if (side == 0 || img.width == 0 || img.height == 0)
        throw SpecInvalid("resize needs a non-degenerate image and side");
    GreyscaleImage out;
    out.width = side;
    out.height = side;
    out.pixels.resize(static_cast<size_t>(side) * side);
    for (uint32_t r = 0; r < side; ++r) {
        size_t row_lo = static_cast<size_t>(r) * img.height / side;
        size_t row_hi = std::max(row_lo + 1, static_cast<size_t>(r + 1) * img.height / side);
        row_hi = std::min<size_t>(row_hi, img.height);
        if (row_lo >= img.height) row_lo = img.height - 1;
        for (uint32_t c = 0; c < side; ++c) {
            size_t col_lo = static_cast<size_t>(c) * img.width / side;
            size_t col_hi = std::max(col_lo + 1, static_cast<size_t>(c + 1) * img.width / side);
            col_hi = std::min<size_t>(col_hi, img.width);
            if (col_lo >= img.width) col_lo = img.width - 1;
            uint64_t sum = 0;
            size_t count = 0;
            for (size_t rr = row_lo; rr < std::max(row_hi, row_lo + 1); ++rr)
                for (size_t cc = col_lo; cc < std::max(col_hi, col_lo + 1); ++cc) {
                    sum += img.at(static_cast<uint32_t>(rr), static_cast<uint32_t>(cc));
                    count++;
                }
            out.pixels[static_cast<size_t>(r) * side + c] =
                static_cast<uint8_t>(sum / count);
        }
    }
    return out;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

}  // namespace

void write_png(const GreyscaleImage& img, const std::string& path) {
    std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw Error("IoError", "cannot open " + path + " for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error("IoError", "libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("IoError", "libpng write failed for " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (uint32_t row = 0; row < img.height; ++row)
        png_write_row(png, const_cast<png_bytep>(img.pixels.data() + row * img.width));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

GreyscaleImage read_png(const std::string& path) {
    std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw Error("IoError", "cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("IoError", "libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw UnparseableInput("not a readable PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    // normalize anything to 8-bit grey
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    if (png_get_color_type(png, info) & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray(png, 1, -1, -1);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);

    GreyscaleImage img;
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.pixels.resize(static_cast<size_t>(img.width) * img.height);
    for (uint32_t row = 0; row < img.height; ++row)
        png_read_row(png, img.pixels.data() + static_cast<size_t>(row) * img.width, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

std::optional<Bytes> reconstruct_suffix(ByteView truncated, const Md5Digest& target,
                                        unsigned max_suffix, unsigned jobs) {
    Md5 prefix;
    prefix.update(truncated);

    if (prefix.finish() == target) return Bytes(truncated.begin(), truncated.end());

    if (jobs == 0) jobs = default_jobs();

    // shortest suffix wins: complete each length before trying the next
    for (unsigned len = 1; len <= max_suffix; ++len) {
        uint64_t total = 1;
        for (unsigned i = 0; i < len; ++i) total *= 256;

        std::atomic<uint64_t> found{UINT64_MAX};
        const unsigned workers = static_cast<unsigned>(
            std::min<uint64_t>(std::max(1u, jobs), total));
        std::vector<std::thread> threads;
        threads.reserve(workers);
        for (unsigned w = 0; w < workers; ++w) {
            threads.emplace_back([&, w] {
                Bytes suffix(len);
                for (uint64_t c = w; c < total; c += workers) {
                    if (found.load(std::memory_order_relaxed) != UINT64_MAX) return;
                    uint64_t v = c;
                    for (unsigned k = 0; k < len; ++k) {
                        suffix[k] = static_cast<uint8_t>(v & 0xFF);
                        v >>= 8;
                    }
                    Md5 h(prefix);
                    h.update(view(suffix));
                    if (h.finish() == target) {
                        uint64_t expect = UINT64_MAX;
                        found.compare_exchange_strong(expect, c);
                        return;
                    }
                }
            });
        }
        for (auto& t : threads) t.join();

        // any match of this length is acceptable; report the lowest candidate
        // index so the result is independent of thread scheduling
        uint64_t winner = found.load();
        if (winner != UINT64_MAX) {
            // other threads may have passed a lower match after the flag was
            // set; rescan the range below the winner to make it exact
            for (uint64_t c = 0; c < winner; ++c) {
                Bytes suffix(len);
                uint64_t v = c;
                for (unsigned k = 0; k < len; ++k) {
                    suffix[k] = static_cast<uint8_t>(v & 0xFF);
                    v >>= 8;
                }
                Md5 h(prefix);
                h.update(view(suffix));
                if (h.finish() == target) {
                    winner = c;
                    break;
                }
            }
            Bytes out(truncated.begin(), truncated.end());
            uint64_t v = winner;
            for (unsigned k = 0; k < len; ++k) {
                out.push_back(static_cast<uint8_t>(v & 0xFF));
                v >>= 8;
            }
            return out;
        }
    }
    return std::nullopt;
}

}  // namespace packscope::viz
