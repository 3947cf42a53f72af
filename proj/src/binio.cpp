#include "ribtoy/binio.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <sstream>

namespace ribtoy {

void ByteWriter::u32be(std::uint32_t v) {
  buf_.push_back(static_cast<std::uint8_t>(v >> 24));
  buf_.push_back(static_cast<std::uint8_t>(v >> 16));
  buf_.push_back(static_cast<std::uint8_t>(v >> 8));
  buf_.push_back(static_cast<std::uint8_t>(v));
}

void ByteWriter::u64be(std::uint64_t v) {
  for (int s = 56; s >= 0; s -= 8)
    buf_.push_back(static_cast<std::uint8_t>(v >> s));
}

void ByteWriter::f64be(double v) { u64be(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::bytes(std::span<const std::uint8_t> b) {
  buf_.insert(buf_.end(), b.begin(), b.end());
}

void ByteWriter::magic(const char tag[4]) {
  buf_.insert(buf_.end(), tag, tag + 4);
}

void ByteWriter::finish_crc32() { u32be(crc32_of(buf_)); }

void ByteReader::need(std::size_t n, const char* field) {
  if (pos_ + n > buf_.size()) {
    std::ostringstream os;
    os << "truncated stream while reading " << field << " (need " << n
       << " bytes at offset " << pos_ << ", have " << remaining() << ")";
    throw FormatError(os.str());
  }
}

std::uint8_t ByteReader::u8(const char* field) {
  need(1, field);
  return buf_[pos_++];
}

std::uint32_t ByteReader::u32be(const char* field) {
  need(4, field);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | buf_[pos_++];
  return v;
}

std::uint64_t ByteReader::u64be(const char* field) {
  need(8, field);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v = (v << 8) | buf_[pos_++];
  return v;
}

double ByteReader::f64be(const char* field) {
  return std::bit_cast<double>(u64be(field));
}

void ByteReader::expect_magic(const char tag[4], const char* what) {
  need(4, what);
  if (std::memcmp(buf_.data() + pos_, tag, 4) != 0) {
    std::ostringstream os;
    os << what << ": bad magic, observed 0x" << std::hex;
    for (int i = 0; i < 4; ++i) {
      char b[3];
      std::snprintf(b, sizeof b, "%02x", buf_[pos_ + i]);
      os << b;
    }
    os << ", expected \"" << std::string(tag, 4) << "\"";
    throw FormatError(os.str());
  }
  pos_ += 4;
}

std::span<const std::uint8_t> ByteReader::bytes(std::size_t n,
                                                const char* field) {
  need(n, field);
  auto out = buf_.subspan(pos_, n);
  pos_ += n;
  return out;
}

void ByteReader::check_crc32(const char* what) {
  if (remaining() != 4) {
    std::ostringstream os;
    os << what << ": expected exactly 4 trailing CRC bytes, have "
       << remaining();
    throw FormatError(os.str());
  }
  const std::uint32_t want = crc32_of(buf_.first(pos_));
  const std::uint32_t got = u32be("crc32");
  if (want != got) {
    std::ostringstream os;
    os << what << ": CRC32 mismatch (stored 0x" << std::hex << got
       << ", computed 0x" << want << ")";
    throw FormatError(os.str());
  }
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw FormatError("cannot open file: " + path);
  std::fseek(f, 0, SEEK_END);
  const long n = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n));
  const std::size_t got = n ? std::fread(out.data(), 1, out.size(), f) : 0;
  std::fclose(f);
  if (got != out.size()) throw FormatError("short read: " + path);
  return out;
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw FormatError("cannot open file for writing: " + path);
  const std::size_t put =
      bytes.empty() ? 0 : std::fwrite(bytes.data(), 1, bytes.size(), f);
  const int rc = std::fclose(f);
  if (put != bytes.size() || rc != 0)
    throw FormatError("short write: " + path);
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_file(const std::string& path) {
  auto bytes = read_file(path);
  return sha256_hex(bytes);
}

}  // namespace ribtoy
