#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ribtoy/errors.hpp"

namespace ribtoy {

// Append-only byte buffer with big-endian encoders. CRC coverage starts at
// byte 0, so finish_crc32() must be the last call before writing out.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32be(std::uint32_t v);
  void u64be(std::uint64_t v);
  void f64be(double v);  // IEEE-754 bit pattern, big-endian
  void bytes(std::span<const std::uint8_t> b);
  void magic(const char tag[4]);
  void finish_crc32();  // appends CRC32 of everything written so far

  const std::vector<std::uint8_t>& data() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

// Bounds-checked big-endian reader over a byte span. Overruns throw
// FormatError mentioning the field that was being read.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : buf_(bytes) {}

  std::uint8_t u8(const char* field);
  std::uint32_t u32be(const char* field);
  std::uint64_t u64be(const char* field);
  double f64be(const char* field);
  void expect_magic(const char tag[4], const char* what);
  std::span<const std::uint8_t> bytes(std::size_t n, const char* field);
  // Validates the trailing CRC32 against everything before it.
  void check_crc32(const char* what);

  std::size_t remaining() const { return buf_.size() - pos_; }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* field);
  std::span<const std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::string& path);

}  // namespace ribtoy
