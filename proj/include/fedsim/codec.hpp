#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "fedsim/nn.hpp"

namespace fedsim::codec {

using Bytes = std::vector<std::uint8_t>;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32_le(std::uint32_t v);
  void u64_le(std::uint64_t v);
  void i64_le(std::int64_t v) { u64_le(static_cast<std::uint64_t>(v)); }
  void f64_le(double v);
  void u32_be(std::uint32_t v);
  void raw(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
  void tag(std::string_view four_cc);

  const Bytes& bytes() const& { return buf_; }
  Bytes bytes() && { return std::move(buf_); }

 private:
  Bytes buf_;
};

/// Bounds-checked cursor; every failure is a FormatError carrying the offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8();
  std::uint32_t u32_le();
  std::uint64_t u64_le();
  std::int64_t i64_le() { return static_cast<std::int64_t>(u64_le()); }
  double f64_le();
  std::uint32_t u32_be();
  std::span<const std::uint8_t> take(std::size_t n);
  void expect_tag(std::string_view four_cc);

  std::size_t offset() const { return offset_; }
  std::size_t remaining() const { return data_.size() - offset_; }

 private:
  void need(std::size_t n, const char* what) const;

  std::span<const std::uint8_t> data_;
  std::size_t offset_ = 0;
};

inline constexpr std::uint32_t kParamsFormatVersion = 1;

/// Layout: "FSNN", u32 format, u32 layer count, then per layer
/// u32 out_dim, u32 in_dim, u8 activation, f64 weights (row-major), f64 biases.
/// All little-endian.
void write_params(ByteWriter& w, const nn::ModelParams& params);
nn::ModelParams read_params(ByteReader& r);

Bytes encode_params(const nn::ModelParams& params);
nn::ModelParams decode_params(std::span<const std::uint8_t> bytes);
std::size_t encoded_params_size(const nn::ModelParams& params);

}  // namespace fedsim::codec
