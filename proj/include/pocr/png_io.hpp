#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pocr/common.hpp"
#include "pocr/image.hpp"

namespace pocr {
namespace detail {

inline void put_u32(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(static_cast<uint8_t>(x >> 24));
    v.push_back(static_cast<uint8_t>(x >> 16));
    v.push_back(static_cast<uint8_t>(x >> 8));
    v.push_back(static_cast<uint8_t>(x));
}

inline uint32_t get_u32(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

inline void png_chunk(std::vector<uint8_t>& out, const char* type, const std::vector<uint8_t>& data) {
    put_u32(out, static_cast<uint32_t>(data.size()));
    size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    uint32_t crc = static_cast<uint32_t>(
        ::crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
    put_u32(out, crc);
}

inline std::vector<uint8_t> zlib_compress(const std::vector<uint8_t>& in) {
    uLongf bound = compressBound(static_cast<uLong>(in.size()));
    std::vector<uint8_t> out(bound);
    int rc = compress2(out.data(), &bound, in.data(), static_cast<uLong>(in.size()), 6);
    POCR_CHECK_DATA(rc == Z_OK, "zlib compression failed");
    out.resize(bound);
    return out;
}

inline std::vector<uint8_t> zlib_decompress(const uint8_t* in, size_t len, size_t expected) {
    std::vector<uint8_t> out(expected);
    uLongf out_len = static_cast<uLongf>(expected);
    int rc = uncompress(out.data(), &out_len, in, static_cast<uLong>(len));
    POCR_CHECK_DATA(rc == Z_OK && out_len == expected, "zlib decompression failed");
    return out;
}

}  // namespace detail

// Writes an 8-bit grayscale or RGB PNG (filter 0 on every row, zlib level 6),
// with optional tEXt chunks. Output bytes are a pure function of the pixels.
inline void write_png(const std::string& path, const Image8& img,
                      const std::map<std::string, std::string>& text_chunks = {}) {
    POCR_CHECK(img.c == 1 || img.c == 3, "write_png: channels must be 1 or 3");
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(img.h) * (static_cast<size_t>(img.w) * img.c + 1));
    for (int y = 0; y < img.h; ++y) {
        raw.push_back(0);  // filter: none
        const uint8_t* row = img.px.data() + static_cast<size_t>(y) * img.w * img.c;
        raw.insert(raw.end(), row, row + static_cast<size_t>(img.w) * img.c);
    }

    std::vector<uint8_t> file = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<uint8_t> ihdr;
    detail::put_u32(ihdr, static_cast<uint32_t>(img.w));
    detail::put_u32(ihdr, static_cast<uint32_t>(img.h));
    ihdr.push_back(8);                                  // bit depth
    ihdr.push_back(img.c == 3 ? 2 : 0);                 // color type
    ihdr.push_back(0);                                  // compression
    ihdr.push_back(0);                                  // filter method
    ihdr.push_back(0);                                  // no interlace
    detail::png_chunk(file, "IHDR", ihdr);
    for (const auto& [key, value] : text_chunks) {
        std::vector<uint8_t> data(key.begin(), key.end());
        data.push_back(0);
        data.insert(data.end(), value.begin(), value.end());
        detail::png_chunk(file, "tEXt", data);
    }
    detail::png_chunk(file, "IDAT", detail::zlib_compress(raw));
    detail::png_chunk(file, "IEND", {});

    std::ofstream os(path, std::ios::binary);
    POCR_CHECK_DATA(os.good(), "write_png: cannot open " + path);
    os.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
    POCR_CHECK_DATA(os.good(), "write_png: write failed for " + path);
}

// Reads 8-bit non-interlaced PNG, color types gray(0)/RGB(2)/gray+alpha(4)/
// RGBA(6); alpha is dropped. Handles all five scanline filters.
inline Image8 read_png(const std::string& path, std::map<std::string, std::string>* text_chunks = nullptr) {
    std::ifstream is(path, std::ios::binary);
    POCR_CHECK_DATA(is.good(), "read_png: cannot open " + path);
    std::vector<uint8_t> file((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    POCR_CHECK_DATA(file.size() > 8 && std::memcmp(file.data(), sig, 8) == 0,
                    "read_png: not a PNG file: " + path);

    size_t pos = 8;
    int w = 0, h = 0, bit_depth = 0, color_type = 0, interlace = 0;
    std::vector<uint8_t> idat;
    bool seen_end = false;
    while (pos + 8 <= file.size() && !seen_end) {
        uint32_t len = detail::get_u32(file.data() + pos);
        POCR_CHECK_DATA(pos + 12 + len <= file.size(), "read_png: truncated chunk in " + path);
        std::string type(reinterpret_cast<const char*>(file.data() + pos + 4), 4);
        const uint8_t* data = file.data() + pos + 8;
        if (type == "IHDR") {
            POCR_CHECK_DATA(len == 13, "read_png: bad IHDR in " + path);
            w = static_cast<int>(detail::get_u32(data));
            h = static_cast<int>(detail::get_u32(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            interlace = data[12];
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (type == "tEXt" && text_chunks) {
            const uint8_t* sep = static_cast<const uint8_t*>(std::memchr(data, 0, len));
            if (sep) {
                std::string key(reinterpret_cast<const char*>(data), static_cast<size_t>(sep - data));
                std::string value(reinterpret_cast<const char*>(sep + 1),
                                  len - static_cast<size_t>(sep - data) - 1);
                (*text_chunks)[key] = value;
            }
        } else if (type == "IEND") {
            seen_end = true;
        }
        pos += 12 + len;
    }
    POCR_CHECK_DATA(w > 0 && h > 0, "read_png: missing IHDR in " + path);
    POCR_CHECK_DATA(bit_depth == 8, "read_png: only 8-bit PNGs supported: " + path);
    POCR_CHECK_DATA(interlace == 0, "read_png: interlaced PNGs not supported: " + path);
    int src_ch;
    switch (color_type) {
        case 0: src_ch = 1; break;
        case 2: src_ch = 3; break;
        case 4: src_ch = 2; break;
        case 6: src_ch = 4; break;
        default: throw DataError("read_png: unsupported color type in " + path);
    }

    size_t stride = static_cast<size_t>(w) * src_ch;
    std::vector<uint8_t> raw = detail::zlib_decompress(idat.data(), idat.size(), (stride + 1) * h);

    // Undo per-row filters in place.
    std::vector<uint8_t> prev(stride, 0);
    std::vector<uint8_t> cur(stride);
    int out_ch = (src_ch >= 3) ? 3 : 1;
    Image8 img(h, w, out_ch);
    int bpp = src_ch;
    for (int y = 0; y < h; ++y) {
        uint8_t filter = raw[static_cast<size_t>(y) * (stride + 1)];
        const uint8_t* src = raw.data() + static_cast<size_t>(y) * (stride + 1) + 1;
        for (size_t i = 0; i < stride; ++i) {
            int a = i >= static_cast<size_t>(bpp) ? cur[i - bpp] : 0;
            int b = prev[i];
            int cc = i >= static_cast<size_t>(bpp) ? prev[i - bpp] : 0;
            int x = src[i];
            switch (filter) {
                case 0: break;
                case 1: x += a; break;
                case 2: x += b; break;
                case 3: x += (a + b) / 2; break;
                case 4: {
                    int p = a + b - cc;
                    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - cc);
                    x += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : cc);
                    break;
                }
                default: throw DataError("read_png: bad filter byte in " + path);
            }
            cur[i] = static_cast<uint8_t>(x);
        }
        for (int xx = 0; xx < w; ++xx)
            for (int ch = 0; ch < out_ch; ++ch)
                img.at(y, xx, ch) = cur[static_cast<size_t>(xx) * src_ch + ch];
        std::swap(prev, cur);
    }
    return img;
}

}  // namespace pocr
