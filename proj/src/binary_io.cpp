// SPDX-License-Identifier: Apache-2.0
#include "tspm/binary_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "tspm/error.hpp"

namespace tspm {

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::f32s(std::span<const float> v) {
  buf_.reserve(buf_.size() + 4 * v.size());
  for (float x : v) f32(x);
}

void ByteReader::require(std::uint64_t bytes, const char* what) const {
  if (bytes > remaining()) {
    throw FormatError(std::string("truncated input: ") + what + " needs " + std::to_string(bytes) +
                          " bytes, " + std::to_string(remaining()) + " left",
                      pos_);
  }
}

void ByteReader::expect_magic(std::string_view magic, const char* what) {
  require(magic.size(), what);
  if (std::memcmp(data_.data() + pos_, magic.data(), magic.size()) != 0) {
    throw FormatError(std::string("bad magic for ") + what + ", expected \"" + std::string(magic) + "\"", pos_);
  }
  pos_ += magic.size();
}

std::uint32_t ByteReader::u32() {
  require(4, "u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::string ByteReader::string(std::size_t length) {
  require(length, "string");
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), length);
  pos_ += length;
  return s;
}

std::vector<float> ByteReader::f32s(std::uint64_t count) {
  if (count > remaining() / 4) {
    throw FormatError("truncated input: f32 array claims " + std::to_string(count) + " values, " +
                          std::to_string(remaining()) + " bytes left",
                      pos_);
  }
  std::vector<float> out(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t at = pos_;
    const float v = std::bit_cast<float>(u32());
    if (!std::isfinite(v)) throw FormatError("non-finite value in f32 array", at);
    out[i] = v;
  }
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw Error("short read on " + path.string());
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write on " + path.string());
}

}  // namespace tspm
