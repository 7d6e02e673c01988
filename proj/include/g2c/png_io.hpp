#pragma once

// Minimal PNG reader/writer over zlib for the corpus images: 8-bit RGB,
// non-interlaced. The writer always emits filter type 0; the reader handles
// all five scanline filters so externally produced files of the same color
// format load too.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "g2c/tensor.hpp"

namespace g2c {

struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> rgb;  // 3 bytes per pixel, row-major
};

namespace detail {

inline void put_u32be(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline std::uint32_t get_u32be(const unsigned char* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

inline void append_chunk(std::vector<unsigned char>& out, const char type[5],
                         const std::vector<unsigned char>& data) {
  put_u32be(out, static_cast<std::uint32_t>(data.size()));
  std::vector<unsigned char> body(type, type + 4);
  body.insert(body.end(), data.begin(), data.end());
  out.insert(out.end(), body.begin(), body.end());
  put_u32be(out, static_cast<std::uint32_t>(crc32(0, body.data(), static_cast<uInt>(body.size()))));
}

inline unsigned char paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<unsigned char>(a);
  if (pb <= pc) return static_cast<unsigned char>(b);
  return static_cast<unsigned char>(c);
}

}  // namespace detail

inline std::vector<unsigned char> encode_png(const ImageU8& img) {
  check_arg(img.width > 0 && img.height > 0 &&
                img.rgb.size() == static_cast<std::size_t>(img.width) * img.height * 3,
            "encode_png: inconsistent image buffer");
  const int stride = img.width * 3;
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<std::size_t>(img.height) * (stride + 1));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), img.rgb.begin() + static_cast<std::ptrdiff_t>(y) * stride,
               img.rgb.begin() + static_cast<std::ptrdiff_t>(y + 1) * stride);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("encode_png: deflate failed");
  compressed.resize(bound);

  std::vector<unsigned char> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<unsigned char> ihdr;
  detail::put_u32be(ihdr, static_cast<std::uint32_t>(img.width));
  detail::put_u32be(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter method
  ihdr.push_back(0);   // no interlace
  detail::append_chunk(out, "IHDR", ihdr);
  detail::append_chunk(out, "IDAT", compressed);
  detail::append_chunk(out, "IEND", {});
  return out;
}

inline ImageU8 decode_png(const std::vector<unsigned char>& bytes, const std::string& context) {
  static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    throw std::runtime_error("decode_png: not a PNG file: " + context);
  std::size_t pos = 8;
  ImageU8 img;
  std::vector<unsigned char> idat;
  bool saw_ihdr = false;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t len = detail::get_u32be(&bytes[pos]);
    if (pos + 12 + len > bytes.size())
      throw std::runtime_error("decode_png: truncated chunk in " + context);
    const char* type = reinterpret_cast<const char*>(&bytes[pos + 4]);
    const unsigned char* data = &bytes[pos + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      img.width = static_cast<int>(detail::get_u32be(data));
      img.height = static_cast<int>(detail::get_u32be(data + 4));
      if (data[8] != 8 || data[9] != 2 || data[12] != 0)
        throw std::runtime_error("decode_png: unsupported format (need 8-bit RGB): " + context);
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (!saw_ihdr || img.width <= 0 || img.height <= 0)
    throw std::runtime_error("decode_png: missing IHDR in " + context);

  const int stride = img.width * 3;
  std::vector<unsigned char> raw(static_cast<std::size_t>(img.height) * (stride + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw std::runtime_error("decode_png: inflate failed for " + context);

  img.rgb.assign(static_cast<std::size_t>(img.height) * stride, 0);
  std::vector<unsigned char> prev(static_cast<std::size_t>(stride), 0);
  for (int y = 0; y < img.height; ++y) {
    const unsigned char filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
    const unsigned char* src = &raw[static_cast<std::size_t>(y) * (stride + 1) + 1];
    unsigned char* dst = &img.rgb[static_cast<std::size_t>(y) * stride];
    for (int x = 0; x < stride; ++x) {
      const int a = x >= 3 ? dst[x - 3] : 0;
      const int b = prev[static_cast<std::size_t>(x)];
      const int c = x >= 3 ? prev[static_cast<std::size_t>(x - 3)] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += detail::paeth(a, b, c); break;
        default: throw std::runtime_error("decode_png: bad filter byte in " + context);
      }
      dst[x] = static_cast<unsigned char>(v & 0xFF);
    }
    std::memcpy(prev.data(), dst, static_cast<std::size_t>(stride));
  }
  return img;
}

inline void write_file_atomic(const std::string& path, const std::vector<unsigned char>& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("rename failed: " + tmp + " -> " + path);
}

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open: " + path);
  const std::streamsize size = f.tellg();
  f.seekg(0);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(size));
  f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) throw std::runtime_error("read failed: " + path);
  return bytes;
}

// [3,H,W] float tensor in [0,1] <-> 8-bit PNG on disk.
inline void save_image(const std::string& path, const Tensor& img) {
  check_arg(img.rank() == 3 && img.dim(0) == 3, "save_image expects [3,H,W]");
  ImageU8 u8;
  u8.height = img.dim(1);
  u8.width = img.dim(2);
  u8.rgb.resize(static_cast<std::size_t>(u8.width) * u8.height * 3);
  const int plane = u8.width * u8.height;
  for (int y = 0; y < u8.height; ++y)
    for (int x = 0; x < u8.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = img[c * plane + y * u8.width + x];
        const float clamped = std::min(1.0f, std::max(0.0f, v));
        u8.rgb[(static_cast<std::size_t>(y) * u8.width + x) * 3 + static_cast<std::size_t>(c)] =
            static_cast<unsigned char>(std::lround(clamped * 255.0f));
      }
  write_file_atomic(path, encode_png(u8));
}

inline Tensor load_image(const std::string& path) {
  ImageU8 u8 = decode_png(read_file(path), path);
  Tensor img({3, u8.height, u8.width});
  const int plane = u8.width * u8.height;
  auto* out = img.mut();
  for (int y = 0; y < u8.height; ++y)
    for (int x = 0; x < u8.width; ++x)
      for (int c = 0; c < 3; ++c)
        (*out)[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * u8.width + x] =
            static_cast<float>(
                u8.rgb[(static_cast<std::size_t>(y) * u8.width + x) * 3 + static_cast<std::size_t>(c)]) /
            255.0f;
  return img;
}

}  // namespace g2c
