#pragma once

// Small on-disk and wire encodings: raw tensor blobs, base64, PNG and
// run-length masks.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "aligndiff/toytask.hpp"

namespace aligndiff {

enum class DType : std::uint8_t { f32 = 1, u8 = 2, f64 = 3 };

std::size_t dtype_size(DType d);

/// Flat tensor file: "ADTB", dtype byte, rank byte, two reserved bytes,
/// rank x uint32 little-endian dims, then the raw little-endian payload.
struct TensorBlob {
  DType dtype = DType::f32;
  std::vector<std::uint32_t> shape;
  std::vector<std::uint8_t> bytes;

  std::size_t element_count() const;
};

void write_blob(const std::string& path, const TensorBlob& blob);
TensorBlob read_blob(const std::string& path);

std::string base64_encode(std::span<const std::uint8_t> data);
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// 8-bit RGB PNG of a 3 x H x W channel-major image in [-1, 1].
std::vector<std::uint8_t> encode_png(const SampleD& image, int height, int width);

/// Row-major run lengths, alternating background/foreground, starting with
/// a (possibly zero) background run.
struct RunLengthMask {
  int height = 0;
  int width = 0;
  std::vector<int> counts;
};

RunLengthMask rle_encode(const Mask& mask, int height, int width);
Mask rle_decode(const RunLengthMask& rle);

}  // namespace aligndiff
