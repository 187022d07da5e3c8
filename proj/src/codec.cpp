#include "fedsim/codec.hpp"

#include <bit>
#include <cstring>
#include <string>

#include "fedsim/error.hpp"

namespace fedsim::codec {

void ByteWriter::u32_le(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64_le(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64_le(double v) { u64_le(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::u32_be(std::uint32_t v) {
  for (int i = 3; i >= 0; --i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::tag(std::string_view four_cc) {
  for (char c : four_cc) buf_.push_back(static_cast<std::uint8_t>(c));
}

void ByteReader::need(std::size_t n, const char* what) const {
  if (remaining() < n) {
    throw FormatError(std::string("truncated input reading ") + what, offset_);
  }
}

std::uint8_t ByteReader::u8() {
  need(1, "u8");
  return data_[offset_++];
}

std::uint32_t ByteReader::u32_le() {
  need(4, "u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[offset_ + i]) << (8 * i);
  offset_ += 4;
  return v;
}

std::uint64_t ByteReader::u64_le() {
  need(8, "u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[offset_ + i]) << (8 * i);
  offset_ += 8;
  return v;
}

double ByteReader::f64_le() { return std::bit_cast<double>(u64_le()); }

std::uint32_t ByteReader::u32_be() {
  need(4, "u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | data_[offset_ + i];
  offset_ += 4;
  return v;
}

std::span<const std::uint8_t> ByteReader::take(std::size_t n) {
  need(n, "payload");
  auto out = data_.subspan(offset_, n);
  offset_ += n;
  return out;
}

void ByteReader::expect_tag(std::string_view four_cc) {
  const std::size_t at = offset_;
  auto got = take(four_cc.size());
  if (std::memcmp(got.data(), four_cc.data(), four_cc.size()) != 0) {
    throw FormatError("bad magic, expected '" + std::string(four_cc) + "'", at);
  }
}

void write_params(ByteWriter& w, const nn::ModelParams& params) {
  w.tag("FSNN");
  w.u32_le(kParamsFormatVersion);
  w.u32_le(static_cast<std::uint32_t>(params.layout.size()));
  for (std::size_t k = 0; k < params.layout.size(); ++k) {
    const auto& s = params.layout[k];
    w.u32_le(static_cast<std::uint32_t>(s.output_dim));
    w.u32_le(static_cast<std::uint32_t>(s.input_dim));
    w.u8(static_cast<std::uint8_t>(s.activation));
    for (double v : params.arrays.at(2 * k)) w.f64_le(v);
    for (double v : params.arrays.at(2 * k + 1)) w.f64_le(v);
  }
}

nn::ModelParams read_params(ByteReader& r) {
  r.expect_tag("FSNN");
  const std::size_t version_at = r.offset();
  if (const auto version = r.u32_le(); version != kParamsFormatVersion) {
    throw FormatError("unsupported parameter format " + std::to_string(version), version_at);
  }
  const std::uint32_t layers = r.u32_le();
  nn::ModelParams p;
  for (std::uint32_t k = 0; k < layers; ++k) {
    nn::LayerSpec s;
    s.output_dim = r.u32_le();
    s.input_dim = r.u32_le();
    const std::size_t act_at = r.offset();
    const auto act = r.u8();
    if (act > static_cast<std::uint8_t>(nn::Activation::tanh)) {
      throw FormatError("unknown activation code " + std::to_string(act), act_at);
    }
    s.activation = static_cast<nn::Activation>(act);
    const std::size_t n_weights = s.output_dim * s.input_dim;
    if (r.remaining() / 8 < n_weights + s.output_dim) {
      throw FormatError("truncated layer " + std::to_string(k), r.offset());
    }
    std::vector<double> weights(n_weights), biases(s.output_dim);
    for (auto& v : weights) v = r.f64_le();
    for (auto& v : biases) v = r.f64_le();
    p.layout.push_back(s);
    p.arrays.push_back(std::move(weights));
    p.arrays.push_back(std::move(biases));
  }
  return p;
}

Bytes encode_params(const nn::ModelParams& params) {
  ByteWriter w;
  write_params(w, params);
  return std::move(w).bytes();
}

nn::ModelParams decode_params(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto p = read_params(r);
  if (r.remaining() != 0) throw FormatError("trailing bytes after parameters", r.offset());
  return p;
}

std::size_t encoded_params_size(const nn::ModelParams& params) {
  std::size_t n = 4 + 4 + 4;
  for (const auto& s : params.layout) n += 4 + 4 + 1 + 8 * (s.output_dim * s.input_dim + s.output_dim);
  return n;
}

}  // namespace fedsim::codec
