#include "aligndiff/io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include <zlib.h>

#include "aligndiff/error.hpp"

namespace aligndiff {

namespace {

constexpr std::array<char, 4> kBlobMagic{'A', 'D', 'T', 'B'};

void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(std::uint8_t(v >> (8 * i)));
}

void png_chunk(std::vector<std::uint8_t>& out, const char* type,
               const std::vector<std::uint8_t>& data) {
  put_u32_be(out, std::uint32_t(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uLong crc = crc32(0L, out.data() + start, uInt(out.size() - start));
  put_u32_be(out, std::uint32_t(crc));
}

}  // namespace

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32:
      return 4;
    case DType::u8:
      return 1;
    case DType::f64:
      return 8;
  }
  throw FormatError("unknown dtype");
}

std::size_t TensorBlob::element_count() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void write_blob(const std::string& path, const TensorBlob& blob) {
  if (blob.bytes.size() != blob.element_count() * dtype_size(blob.dtype)) {
    throw FormatError("blob payload does not match its shape");
  }
  std::vector<std::uint8_t> header(kBlobMagic.begin(), kBlobMagic.end());
  header.push_back(std::uint8_t(blob.dtype));
  header.push_back(std::uint8_t(blob.shape.size()));
  header.push_back(0);
  header.push_back(0);
  for (auto d : blob.shape) put_u32_le(header, d);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(header.data()), std::streamsize(header.size()));
  f.write(reinterpret_cast<const char*>(blob.bytes.data()),
          std::streamsize(blob.bytes.size()));
  if (!f) throw std::runtime_error("failed writing " + path);
}

TensorBlob read_blob(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::array<char, 8> head{};
  if (!f.read(head.data(), 8) || !std::equal(kBlobMagic.begin(), kBlobMagic.end(), head.begin())) {
    throw FormatError(path + ": not a tensor blob");
  }
  TensorBlob blob;
  blob.dtype = DType(std::uint8_t(head[4]));
  dtype_size(blob.dtype);
  const int rank = std::uint8_t(head[5]);
  for (int i = 0; i < rank; ++i) {
    std::array<unsigned char, 4> b{};
    if (!f.read(reinterpret_cast<char*>(b.data()), 4)) throw FormatError(path + ": truncated header");
    blob.shape.push_back(std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 |
                         std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24);
  }
  blob.bytes.resize(blob.element_count() * dtype_size(blob.dtype));
  if (!f.read(reinterpret_cast<char*>(blob.bytes.data()), std::streamsize(blob.bytes.size()))) {
    throw FormatError(path + ": truncated payload");
  }
  return blob;
}

std::string base64_encode(std::span<const std::uint8_t> data) {
  static constexpr char kTable[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((data.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < data.size(); i += 3) {
    const std::uint32_t v = data[i] << 16 | data[i + 1] << 8 | data[i + 2];
    out += kTable[v >> 18 & 63];
    out += kTable[v >> 12 & 63];
    out += kTable[v >> 6 & 63];
    out += kTable[v & 63];
  }
  if (i + 1 == data.size()) {
    const std::uint32_t v = data[i] << 16;
    out += kTable[v >> 18 & 63];
    out += kTable[v >> 12 & 63];
    out += "==";
  } else if (i + 2 == data.size()) {
    const std::uint32_t v = data[i] << 16 | data[i + 1] << 8;
    out += kTable[v >> 18 & 63];
    out += kTable[v >> 12 & 63];
    out += kTable[v >> 6 & 63];
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<std::uint8_t> out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=') break;
    const int v = value(c);
    if (v < 0) throw FormatError("invalid base64 character");
    acc = acc << 6 | std::uint32_t(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(std::uint8_t(acc >> bits & 0xFF));
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_png(const SampleD& image, int height, int width) {
  const Eigen::Index plane = Eigen::Index(height) * width;
  if (image.size() != 3 * plane) throw ShapeError("encode_png expects 3 x H x W");

  std::vector<std::uint8_t> raw;
  raw.reserve(std::size_t(height) * (1 + 3 * width));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image[c * plane + y * width + x], -1.0, 1.0);
        raw.push_back(std::uint8_t(std::lround((v + 1.0) * 127.5)));
      }
    }
  }
  uLongf packed_size = compressBound(uLong(raw.size()));
  std::vector<std::uint8_t> packed(packed_size);
  if (compress2(packed.data(), &packed_size, raw.data(), uLong(raw.size()), 6) != Z_OK) {
    throw std::runtime_error("zlib compression failed");
  }
  packed.resize(packed_size);

  std::vector<std::uint8_t> png{0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  std::vector<std::uint8_t> ihdr;
  put_u32_be(ihdr, std::uint32_t(width));
  put_u32_be(ihdr, std::uint32_t(height));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit truecolor
  png_chunk(png, "IHDR", ihdr);
  png_chunk(png, "IDAT", packed);
  png_chunk(png, "IEND", {});
  return png;
}

RunLengthMask rle_encode(const Mask& mask, int height, int width) {
  if (mask.size() != Eigen::Index(height) * width) throw ShapeError("rle_encode: size mismatch");
  RunLengthMask rle{height, width, {}};
  std::uint8_t current = 0;
  int run = 0;
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    const std::uint8_t v = mask[i] ? 1 : 0;
    if (v != current) {
      rle.counts.push_back(run);
      current = v;
      run = 0;
    }
    ++run;
  }
  rle.counts.push_back(run);
  return rle;
}

Mask rle_decode(const RunLengthMask& rle) {
  const Eigen::Index n = Eigen::Index(rle.height) * rle.width;
  Mask m = Mask::Zero(n);
  Eigen::Index pos = 0;
  std::uint8_t value = 0;
  for (int count : rle.counts) {
    if (count < 0 || pos + count > n) throw FormatError("RLE runs exceed mask size");
    m.segment(pos, count).setConstant(value);
    pos += count;
    value ^= 1;
  }
  if (pos != n) throw FormatError("RLE runs do not cover the mask");
  return m;
}

}  // namespace aligndiff
