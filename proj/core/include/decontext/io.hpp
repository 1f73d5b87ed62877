#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "decontext/tensor.hpp"

namespace decontext {

// DCTX tensor container, little-endian:
//   "DCTX" | version u32 | dtype u8 (0 = f32) | rank u32 | dims u64 x rank | f32 data
inline constexpr std::uint32_t kDctxVersion = 1;

std::vector<std::uint8_t> encode_dctx(const Tensor& tensor);
Tensor decode_dctx(std::span<const std::uint8_t> bytes);

void write_dctx(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_dctx(const std::filesystem::path& path);

/// Binary P6 PPM, maxval 255. Images are [3, height, width] tensors in [0, 1].
std::vector<std::uint8_t> encode_ppm(const Tensor& image);
/// Throws IoError naming the byte offset of the first malformed field.
Tensor decode_ppm(std::span<const std::uint8_t> bytes);

void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);

/// Quantises to 8 bits, keeping each pixel inside [clean - eta, clean + eta]
/// when read back. Pixels already at a grid point are unaffected.
Tensor quantize_within_budget(const Tensor& image, const Tensor& clean, double eta);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace decontext
