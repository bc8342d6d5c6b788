#pragma once

// Little-endian byte buffers and CRC-32 for the on-disk formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

namespace dmfa {

using Bytes = std::vector<unsigned char>;

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large payloads in chunks.
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
 public:
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  template <class UInt>
  void uint(UInt v) {
    static_assert(std::is_unsigned_v<UInt>);
    for (std::size_t i = 0; i < sizeof(UInt); ++i)
      bytes_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
  }

  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) { uint(v); }
  void u64(std::uint64_t v) { uint(v); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }

  void append(const Bytes& other) { bytes_.insert(bytes_.end(), other.begin(), other.end()); }

  const Bytes& bytes() const { return bytes_; }
  Bytes take() { return std::move(bytes_); }

 private:
  Bytes bytes_;
};

/// Thrown by ByteReader when a read runs past the end of the buffer.
class TruncatedInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}
  explicit ByteReader(const Bytes& b) : ByteReader(b.data(), b.size()) {}

  std::string raw(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }

  template <class UInt>
  UInt uint() {
    need(sizeof(UInt));
    UInt v = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i)
      v |= static_cast<UInt>(static_cast<UInt>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(UInt);
    return v;
  }

  std::uint8_t u8() { return uint<std::uint8_t>(); }
  std::uint32_t u32() { return uint<std::uint32_t>(); }
  std::uint64_t u64() { return uint<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return size_ - pos_; }
  const unsigned char* cursor() const { return data_ + pos_; }

 private:
  void need(std::size_t n) const {
    if (n > size_ - pos_) throw TruncatedInput("unexpected end of data");
  }

  const unsigned char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline Bytes read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::string& path, const Bytes& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace dmfa
