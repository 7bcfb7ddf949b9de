#pragma once

// Minimal PNG codec over zlib: enough to write the grayscale/RGB rasters
// this project produces and to read the common still-image layouts
// (non-interlaced; gray and palette at bit depths 1/2/4/8; 8-bit RGB,
// gray+alpha and RGBA).

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "metabias/common.hpp"

namespace metabias {

// Row-major grayscale image with values in [0,1].
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  double at(int y, int x) const {
    return pixels[static_cast<size_t>(y) * width + x];
  }
};

namespace pngdetail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

inline uint32_t get_u32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) |
         (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

inline void write_chunk(std::vector<uint8_t>& out, const char type[4],
                        const std::vector<uint8_t>& payload) {
  put_u32(out, static_cast<uint32_t>(payload.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  uint32_t crc = crc32(0, out.data() + start, out.size() - start);
  put_u32(out, crc);
}

inline std::vector<uint8_t> deflate_bytes(const std::vector<uint8_t>& raw) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> out(bound);
  if (compress2(out.data(), &bound, raw.data(),
                static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw DataError("png: deflate failed");
  out.resize(bound);
  return out;
}

inline std::vector<uint8_t> inflate_bytes(const uint8_t* data, size_t size,
                                          size_t expected) {
  std::vector<uint8_t> out(expected);
  uLongf dest = static_cast<uLongf>(expected);
  int rc = uncompress(out.data(), &dest, data, static_cast<uLong>(size));
  if (rc != Z_OK) throw DataError("png: inflate failed, code " +
                                  std::to_string(rc));
  out.resize(dest);
  return out;
}

}  // namespace pngdetail

// channels: 1 (gray) or 3 (RGB); pixels are [0,1] doubles, channel-major
// planes (like tensor layout [C,H,W]).
inline std::vector<uint8_t> encode_png(const double* planes, int channels,
                                       int height, int width) {
  if (channels != 1 && channels != 3)
    throw DataError("encode_png: unsupported channel count " +
                    std::to_string(channels));
  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(height) * (1 + width * channels));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c) {
        double v = planes[(static_cast<size_t>(c) * height + y) * width + x];
        v = std::min(1.0, std::max(0.0, v));
        raw.push_back(static_cast<uint8_t>(std::lround(v * 255.0)));
      }
  }
  std::vector<uint8_t> png{0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  std::vector<uint8_t> ihdr;
  pngdetail::put_u32(ihdr, static_cast<uint32_t>(width));
  pngdetail::put_u32(ihdr, static_cast<uint32_t>(height));
  ihdr.push_back(8);                              // bit depth
  ihdr.push_back(channels == 1 ? 0 : 2);          // color type
  ihdr.push_back(0);                              // compression
  ihdr.push_back(0);                              // filter
  ihdr.push_back(0);                              // interlace
  pngdetail::write_chunk(png, "IHDR", ihdr);
  pngdetail::write_chunk(png, "IDAT", pngdetail::deflate_bytes(raw));
  pngdetail::write_chunk(png, "IEND", {});
  return png;
}

inline void write_png(const std::string& path, const double* planes,
                      int channels, int height, int width) {
  auto bytes = encode_png(planes, channels, height, width);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
}

inline GrayImage decode_png_gray(const std::vector<uint8_t>& bytes) {
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    throw DataError("png: bad signature");

  int width = 0, height = 0, depth = 0, color = 0;
  std::vector<uint8_t> idat;
  std::vector<std::array<uint8_t, 3>> palette;

  size_t pos = 8;
  while (pos + 8 <= bytes.size()) {
    uint32_t len = pngdetail::get_u32(bytes.data() + pos);
    std::string type(reinterpret_cast<const char*>(bytes.data() + pos + 4), 4);
    const uint8_t* payload = bytes.data() + pos + 8;
    if (pos + 12 + len > bytes.size()) throw DataError("png: truncated chunk");
    if (type == "IHDR") {
      width = static_cast<int>(pngdetail::get_u32(payload));
      height = static_cast<int>(pngdetail::get_u32(payload + 4));
      depth = payload[8];
      color = payload[9];
      if (payload[12] != 0)
        throw DataError("png: interlaced images are not supported");
      bool ok = (color == 0 || color == 3)
                    ? (depth == 1 || depth == 2 || depth == 4 || depth == 8)
                    : ((color == 2 || color == 4 || color == 6) && depth == 8);
      if (!ok)
        throw DataError("png: unsupported color type " +
                        std::to_string(color) + " at depth " +
                        std::to_string(depth));
    } else if (type == "PLTE") {
      for (uint32_t i = 0; i + 2 < len; i += 3)
        palette.push_back({payload[i], payload[i + 1], payload[i + 2]});
    } else if (type == "IDAT") {
      idat.insert(idat.end(), payload, payload + len);
    } else if (type == "IEND") {
      break;
    }
    pos += 12 + len;
  }
  if (width <= 0 || height <= 0) throw DataError("png: missing IHDR");

  int channels = color == 2 ? 3 : color == 4 ? 2 : color == 6 ? 4 : 1;
  size_t bits_per_pixel = static_cast<size_t>(channels) * depth;
  size_t stride = (static_cast<size_t>(width) * bits_per_pixel + 7) / 8;
  size_t bpp = std::max<size_t>(1, bits_per_pixel / 8);
  std::vector<uint8_t> raw = pngdetail::inflate_bytes(
      idat.data(), idat.size(), (stride + 1) * static_cast<size_t>(height));
  if (raw.size() != (stride + 1) * static_cast<size_t>(height))
    throw DataError("png: unexpected data size");

  // undo per-row filters in place
  std::vector<uint8_t> prev(stride, 0);
  std::vector<uint8_t> cur(stride);
  std::vector<uint8_t> pixels;
  pixels.reserve(stride * static_cast<size_t>(height));
  for (int y = 0; y < height; ++y) {
    uint8_t filter = raw[static_cast<size_t>(y) * (stride + 1)];
    const uint8_t* src = raw.data() + static_cast<size_t>(y) * (stride + 1) + 1;
    for (size_t i = 0; i < stride; ++i) {
      int a = i >= bpp ? cur[i - bpp] : 0;
      int b = prev[i];
      int c = i >= bpp ? prev[i - bpp] : 0;
      int x = src[i];
      switch (filter) {
        case 0: break;
        case 1: x += a; break;
        case 2: x += b; break;
        case 3: x += (a + b) / 2; break;
        case 4: {
          int p = a + b - c;
          int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
          x += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          break;
        }
        default: throw DataError("png: unknown filter " +
                                 std::to_string(filter));
      }
      cur[i] = static_cast<uint8_t>(x & 0xFF);
    }
    pixels.insert(pixels.end(), cur.begin(), cur.end());
    std::swap(prev, cur);
  }

  GrayImage img;
  img.width = width;
  img.height = height;
  img.pixels.resize(static_cast<size_t>(width) * height);
  double maxval = static_cast<double>((1 << depth) - 1);
  for (int y = 0; y < height; ++y) {
    const uint8_t* row = pixels.data() + static_cast<size_t>(y) * stride;
    for (int x = 0; x < width; ++x) {
      double gray = 0.0;
      if (depth < 8) {  // gray or palette, packed most-significant first
        size_t bit = static_cast<size_t>(x) * depth;
        int v = (row[bit / 8] >> (8 - depth - bit % 8)) & ((1 << depth) - 1);
        if (color == 3) {
          if (static_cast<size_t>(v) >= palette.size())
            throw DataError("png: palette index out of range");
          const auto& p = palette[static_cast<size_t>(v)];
          gray = (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 255.0;
        } else {
          gray = static_cast<double>(v) / maxval;
        }
      } else {
        const uint8_t* px = row + static_cast<size_t>(x) * channels;
        switch (color) {
          case 0: gray = px[0] / 255.0; break;
          case 2: gray = (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]) /
                         255.0; break;
          case 3: {
            if (px[0] >= palette.size())
              throw DataError("png: palette index out of range");
            const auto& p = palette[px[0]];
            gray = (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 255.0;
            break;
          }
          case 4: gray = px[0] / 255.0; break;
          case 6: gray = (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]) /
                         255.0; break;
        }
      }
      img.pixels[static_cast<size_t>(y) * width + x] = gray;
    }
  }
  return img;
}

inline GrayImage read_png_gray(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return decode_png_gray(bytes);
}

// Box-filter resize (area averaging) to the target extent.
inline GrayImage resize_area(const GrayImage& src, int out_h, int out_w) {
  GrayImage out;
  out.width = out_w;
  out.height = out_h;
  out.pixels.resize(static_cast<size_t>(out_w) * out_h, 0.0);
  double sy = static_cast<double>(src.height) / out_h;
  double sx = static_cast<double>(src.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double y0 = y * sy, y1 = (y + 1) * sy;
    for (int x = 0; x < out_w; ++x) {
      double x0 = x * sx, x1 = (x + 1) * sx;
      double total = 0.0, weight = 0.0;
      for (int iy = static_cast<int>(y0); iy < std::min<int>(src.height,
           static_cast<int>(std::ceil(y1))); ++iy) {
        double wy = std::min<double>(y1, iy + 1) - std::max<double>(y0, iy);
        for (int ix = static_cast<int>(x0); ix < std::min<int>(src.width,
             static_cast<int>(std::ceil(x1))); ++ix) {
          double wx = std::min<double>(x1, ix + 1) - std::max<double>(x0, ix);
          total += wy * wx * src.at(iy, ix);
          weight += wy * wx;
        }
      }
      out.pixels[static_cast<size_t>(y) * out_w + x] =
          weight > 0 ? total / weight : 0.0;
    }
  }
  return out;
}

}  // namespace metabias
