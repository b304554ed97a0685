#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sgdc/tensor.hpp"

namespace sgdc {

// TNSR binary tensor format:
//   "TNSR" | version 0x01 | dtype (0=f32, 1=f64, 2=u8) | rank | rank x u32 dims | payload
// All multi-byte fields little-endian, payload row-major.
enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kU8 = 2 };

inline constexpr std::uint8_t kTnsrVersion = 0x01;

// Decoded file contents. Values are widened to double, which is exact for all
// three stored dtypes.
struct TnsrData {
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<double> values;

  Tensor<float> to_float() const;
  Tensor<double> to_double() const;
};

std::vector<std::uint8_t> encode_tnsr(const Tensor<float>& t);
std::vector<std::uint8_t> encode_tnsr(const Tensor<double>& t);
// Stores a 0..255 integer-valued tensor as u8; other values are a ContractError.
std::vector<std::uint8_t> encode_tnsr_u8(const Tensor<float>& t);

// `source` names the file in error messages.
TnsrData decode_tnsr(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>");

void write_tnsr(const std::filesystem::path& path, const Tensor<float>& t);
void write_tnsr(const std::filesystem::path& path, const Tensor<double>& t);
void write_tnsr_u8(const std::filesystem::path& path, const Tensor<float>& t);
TnsrData read_tnsr(const std::filesystem::path& path);

// Whole-file helpers. Writes go to a temporary sibling and are renamed into place.
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

}  // namespace sgdc
