#include "sgdc/tnsr.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "sgdc/errors.hpp"

namespace sgdc {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::vector<std::uint8_t> header(DType dtype, const Shape& shape, std::size_t payload) {
  if (shape.size() > 255) throw ContractError("TNSR supports rank <= 255");
  std::vector<std::uint8_t> out{'T', 'N', 'S', 'R', kTnsrVersion, static_cast<std::uint8_t>(dtype),
                                static_cast<std::uint8_t>(shape.size())};
  out.reserve(out.size() + 4 * shape.size() + payload);
  for (int d : shape) put_u32(out, static_cast<std::uint32_t>(d));
  return out;
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
  }
  return 0;
}

}  // namespace

std::vector<std::uint8_t> encode_tnsr(const Tensor<float>& t) {
  auto out = header(DType::kF32, t.shape(), 4 * t.numel());
  for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

std::vector<std::uint8_t> encode_tnsr(const Tensor<double>& t) {
  auto out = header(DType::kF64, t.shape(), 8 * t.numel());
  for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

std::vector<std::uint8_t> encode_tnsr_u8(const Tensor<float>& t) {
  auto out = header(DType::kU8, t.shape(), t.numel());
  for (float v : t.data()) {
    if (!(v >= 0.0f && v <= 255.0f) || std::floor(v) != v) {
      throw ContractError("u8 TNSR payload must hold integers in [0, 255]");
    }
    out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

TnsrData decode_tnsr(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  auto fail = [&](const std::string& what) { return IoError(source + ": " + what); };
  if (bytes.size() < 7) throw fail("corrupt TNSR file (truncated header)");
  if (std::memcmp(bytes.data(), "TNSR", 4) != 0) throw fail("bad magic, not a TNSR file");
  if (bytes[4] != kTnsrVersion) throw fail("unsupported TNSR version " + std::to_string(bytes[4]));
  if (bytes[5] > 2) throw fail("unknown TNSR dtype " + std::to_string(bytes[5]));
  TnsrData d;
  d.dtype = static_cast<DType>(bytes[5]);
  const std::size_t rank = bytes[6];
  std::size_t pos = 7;
  if (bytes.size() < pos + 4 * rank) throw fail("corrupt TNSR file (truncated dims)");
  for (std::size_t i = 0; i < rank; ++i) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes[pos + b]) << (8 * b);
    if (v == 0 || v > 0x7fffffffu) throw fail("corrupt TNSR file (invalid dimension)");
    d.shape.push_back(static_cast<int>(v));
    pos += 4;
  }
  const std::size_t n = shape_numel(d.shape);
  const std::size_t es = dtype_size(d.dtype);
  if (bytes.size() - pos < n * es) throw fail("corrupt TNSR file (truncated payload)");
  if (bytes.size() - pos > n * es) throw fail("corrupt TNSR file (trailing bytes)");
  d.values.resize(n);
  for (std::size_t i = 0; i < n; ++i, pos += es) {
    switch (d.dtype) {
      case DType::kF32: {
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes[pos + b]) << (8 * b);
        d.values[i] = std::bit_cast<float>(v);
        break;
      }
      case DType::kF64: {
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(bytes[pos + b]) << (8 * b);
        d.values[i] = std::bit_cast<double>(v);
        break;
      }
      case DType::kU8:
        d.values[i] = bytes[pos];
        break;
    }
  }
  return d;
}

Tensor<float> TnsrData::to_float() const {
  return Tensor<float>(shape, std::vector<float>(values.begin(), values.end()));
}

Tensor<double> TnsrData::to_double() const { return Tensor<double>(shape, values); }

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(path.string() + ": cannot open for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError(path.string() + ": write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(path.string() + ": rename failed: " + ec.message());
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string() + ": cannot open (missing file?)");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

std::string read_text(const std::filesystem::path& path) {
  const auto b = read_file(path);
  return std::string(b.begin(), b.end());
}

void write_tnsr(const std::filesystem::path& path, const Tensor<float>& t) { write_file_atomic(path, encode_tnsr(t)); }
void write_tnsr(const std::filesystem::path& path, const Tensor<double>& t) { write_file_atomic(path, encode_tnsr(t)); }
void write_tnsr_u8(const std::filesystem::path& path, const Tensor<float>& t) {
  write_file_atomic(path, encode_tnsr_u8(t));
}

TnsrData read_tnsr(const std::filesystem::path& path) { return decode_tnsr(read_file(path), path.string()); }

}  // namespace sgdc
