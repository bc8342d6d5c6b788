#pragma once

// Matrix files: CSV with an optional header line, and the "DMF1" raw binary
// format:
//
//   offset  size     field
//   0       4        magic "DMF1"
//   4       8        N (u64, little endian)
//   12      8        D (u64, little endian)
//   20      8*N*D    row-major IEEE-754 doubles, little endian
//   20+8ND  4        CRC-32 (zlib polynomial) of the N*D double payload

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "dmfa/binary_io.hpp"
#include "dmfa/dataset.hpp"

namespace dmfa {

enum class MatrixFormat { automatic, csv, raw_f64 };

inline constexpr std::string_view kMatrixMagic = "DMF1";

class MatrixFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest decimal representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw std::runtime_error("format_double failed");
  return std::string(buf, end);
}

inline bool parse_double(std::string_view s, double& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                        : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

inline bool blank(std::string_view s) {
  return s.find_first_not_of(" \t\r") == std::string_view::npos;
}

}  // namespace detail

inline MatrixFormat resolve_format(const std::string& path, MatrixFormat format) {
  if (format != MatrixFormat::automatic) return format;
  auto ends_with = [&](std::string_view suffix) {
    return path.size() >= suffix.size() &&
           path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return (ends_with(".dmf") || ends_with(".bin") || ends_with(".raw")) ? MatrixFormat::raw_f64
                                                                       : MatrixFormat::csv;
}

inline Dataset parse_csv(std::string_view text) {
  std::vector<double> values;
  Index cols = -1;
  Index row = 0;
  bool first_line = true;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t eol = text.find('\n', start);
    if (eol == std::string_view::npos) eol = text.size();
    const std::string_view line = text.substr(start, eol - start);
    start = eol + 1;
    if (detail::blank(line)) {
      if (eol == text.size()) break;
      continue;
    }
    const auto cells = detail::split_csv_line(line);
    std::vector<double> parsed(cells.size());
    std::size_t bad = cells.size();
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (!parse_double(cells[c], parsed[c])) {
        bad = c;
        break;
      }
    }
    if (first_line) {
      first_line = false;
      if (bad != cells.size()) continue;  // header
    }
    ++row;
    if (bad != cells.size())
      throw MatrixFormatError("non-numeric cell at row " + std::to_string(row) + ", column " +
                              std::to_string(bad + 1));
    if (cols < 0) cols = static_cast<Index>(cells.size());
    if (static_cast<Index>(cells.size()) != cols)
      throw MatrixFormatError("ragged row " + std::to_string(row) + ": " +
                              std::to_string(cells.size()) + " columns, expected " +
                              std::to_string(cols));
    for (std::size_t c = 0; c < parsed.size(); ++c) {
      if (!std::isfinite(parsed[c]))
        throw MatrixFormatError("non-finite value at row " + std::to_string(row) +
                                ", column " + std::to_string(c + 1));
    }
    values.insert(values.end(), parsed.begin(), parsed.end());
    if (eol == text.size()) break;
  }
  if (row == 0) throw MatrixFormatError("no data rows");
  RowMatrix m = Eigen::Map<const RowMatrix>(values.data(), row, cols);
  return Dataset(std::move(m));
}

inline Dataset parse_raw_f64(const Bytes& bytes) {
  ByteReader in(bytes);
  try {
    if (in.raw(4) != kMatrixMagic) throw MatrixFormatError("bad magic, expected DMF1");
    const std::uint64_t n = in.u64();
    const std::uint64_t dim = in.u64();
    if (n == 0 || dim == 0) throw MatrixFormatError("DMF1 header declares an empty matrix");
    if (dim > in.remaining() / 8 || n > in.remaining() / (8 * dim))
      throw MatrixFormatError("DMF1 file truncated: payload shorter than N*D doubles");
    const unsigned char* payload = in.cursor();
    const std::size_t payload_size = static_cast<std::size_t>(n * dim * 8);
    RowMatrix m(static_cast<Index>(n), static_cast<Index>(dim));
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = in.f64();
    const std::uint32_t stored = in.u32();
    if (stored != crc32_of(payload, payload_size))
      throw MatrixFormatError("DMF1 checksum mismatch");
    if (in.remaining() != 0) throw MatrixFormatError("DMF1 file has trailing bytes");
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c)
        if (!std::isfinite(m(r, c)))
          throw MatrixFormatError("non-finite value at row " + std::to_string(r + 1) +
                                  ", column " + std::to_string(c + 1));
    return Dataset(std::move(m));
  } catch (const TruncatedInput&) {
    throw MatrixFormatError("DMF1 file truncated");
  }
}

inline Dataset load_matrix(const std::string& path, MatrixFormat format = MatrixFormat::automatic) {
  format = resolve_format(path, format);
  const Bytes bytes = read_file_bytes(path);
  if (format == MatrixFormat::raw_f64) return parse_raw_f64(bytes);
  return parse_csv(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

inline Bytes encode_raw_f64(const RowMatrix& m) {
  ByteWriter payload;
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) payload.f64(m(r, c));
  ByteWriter out;
  out.raw(kMatrixMagic);
  out.u64(static_cast<std::uint64_t>(m.rows()));
  out.u64(static_cast<std::uint64_t>(m.cols()));
  out.append(payload.bytes());
  out.u32(crc32_of(payload.bytes().data(), payload.bytes().size()));
  return out.take();
}

inline std::string encode_csv(const RowMatrix& m, const std::vector<std::string>& header = {}) {
  std::string out;
  if (!header.empty()) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i) out += ',';
      out += header[i];
    }
    out += '\n';
  }
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) {
      if (c) out += ',';
      out += format_double(m(r, c));
    }
    out += '\n';
  }
  return out;
}

inline void save_matrix(const std::string& path, const RowMatrix& m,
                        MatrixFormat format = MatrixFormat::automatic,
                        const std::vector<std::string>& header = {}) {
  format = resolve_format(path, format);
  if (format == MatrixFormat::raw_f64) {
    write_file_bytes(path, encode_raw_f64(m));
    return;
  }
  const std::string text = encode_csv(m, header);
  write_file_bytes(path, Bytes(text.begin(), text.end()));
}

}  // namespace dmfa
