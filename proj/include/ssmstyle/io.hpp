#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ssmstyle/tensor.hpp"

namespace ssmstyle {

// Writes `bytes` to a sibling temporary file and renames it over `path`, so
// readers never observe a truncated file.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

inline constexpr std::size_t kMaxImageExtent = 4096;

// 8-bit images as [H, W, 3] tensors in [0, 1]. The format is chosen by
// content (PNG signature or "P6") when reading and by extension (.png,
// otherwise PPM) when writing.
Tensor read_image(const std::string& path);
void write_image(const std::string& path, const Tensor& image);

Tensor decode_ppm(const std::string& bytes);
std::string encode_ppm(const Tensor& image);
Tensor decode_png(const std::string& bytes);
std::string encode_png(const Tensor& image);

// Flat weight file: a fixed header followed by named row-major float64
// tensors, all little-endian.
//
//   magic    4 bytes  "SSMW"
//   version  u32      1
//   seed     u64
//   count    u32      number of tensors
//   per tensor:
//     name_len u32, name bytes
//     rank     u32, extents u64 x rank
//     values   f64 x product(extents)
struct WeightFile {
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& at(const std::string& name) const;
};

inline constexpr std::uint32_t kWeightFileVersion = 1;

std::string encode_weights(const WeightFile& file);
WeightFile decode_weights(const std::string& bytes);
void save_weights(const std::string& path, const WeightFile& file);
WeightFile load_weights(const std::string& path);

}  // namespace ssmstyle
