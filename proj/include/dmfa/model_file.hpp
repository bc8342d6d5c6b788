#pragma once

// Versioned binary model container ("DMFM", version 1). All integers and
// doubles are little endian; doubles are stored bit for bit.
//
//   magic "DMFM" | u32 version | u32 kind (0 mfa, 1 dmfa tree)
//   u64 payload length | payload | u32 CRC-32 of payload
//
// payload:
//   u32 preprocessing kind | f64 scale | u64 n | n x f64 shift
//   u64 m | m bytes of UTF-8 JSON metadata
//   node
//
// node:
//   u64 C | u64 D | u64 d | C x f64 log weights
//   per component: D*d f64 loading (row-major) | D f64 mean | D f64 noise
//   C x u8 child flags | child nodes, in component order, for flags == 1

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dmfa/binary_io.hpp"
#include "dmfa/dataset.hpp"
#include "dmfa/deep.hpp"
#include "dmfa/model.hpp"

namespace dmfa {

inline constexpr std::string_view kModelMagic = "DMFM";
inline constexpr std::uint32_t kModelVersion = 1;

enum class ModelKind : std::uint32_t { mfa = 0, dmfa = 1 };

struct ModelFile {
  ModelKind kind = ModelKind::mfa;
  DmfaNodePtr tree;  // an mfa file is a tree without children
  PreprocessRecord preprocessing;
  nlohmann::json metadata = nlohmann::json::object();

  const MfaModel& layer() const { return tree->layer(); }
};

inline ModelFile make_model_file(MfaModel m, PreprocessRecord rec = {},
                                 nlohmann::json meta = nlohmann::json::object()) {
  return {ModelKind::mfa, std::make_shared<const DmfaNode>(std::move(m)), std::move(rec),
          std::move(meta)};
}

inline ModelFile make_model_file(DmfaNodePtr tree, PreprocessRecord rec = {},
                                 nlohmann::json meta = nlohmann::json::object()) {
  const ModelKind kind = tree->is_leaf() ? ModelKind::mfa : ModelKind::dmfa;
  return {kind, std::move(tree), std::move(rec), std::move(meta)};
}

class ModelFileError : public std::runtime_error {
 public:
  enum class Code { io, bad_magic, version_mismatch, truncated, checksum_mismatch, malformed };

  ModelFileError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

namespace detail {

inline void write_node(ByteWriter& out, const DmfaNode& node) {
  const MfaModel& m = node.layer();
  out.u64(m.size());
  out.u64(static_cast<std::uint64_t>(m.dim()));
  out.u64(static_cast<std::uint64_t>(m.factors()));
  for (Index c = 0; c < m.log_weights().size(); ++c) out.f64(m.log_weights()(c));
  for (const FactorAnalyser& fa : m.components()) {
    for (Index i = 0; i < fa.dim(); ++i)
      for (Index j = 0; j < fa.factors(); ++j) out.f64(fa.loading()(i, j));
    for (Index i = 0; i < fa.dim(); ++i) out.f64(fa.mean()(i));
    for (Index i = 0; i < fa.dim(); ++i) out.f64(fa.noise()(i));
  }
  for (std::size_t c = 0; c < m.size(); ++c) out.u8(node.has_child(c) ? 1 : 0);
  for (std::size_t c = 0; c < m.size(); ++c)
    if (node.has_child(c)) write_node(out, *node.child(c));
}

inline DmfaNodePtr read_node(ByteReader& in, int depth) {
  if (depth > 64) throw ModelFileError(ModelFileError::Code::malformed, "model tree too deep");
  const std::uint64_t c_count = in.u64();
  const std::uint64_t dim = in.u64();
  const std::uint64_t d = in.u64();
  const std::uint64_t per_comp = dim * d + 2 * dim;
  if (c_count == 0 || dim == 0 || d > (1u << 24) || dim > (1u << 24) ||
      c_count > in.remaining() / 8 || per_comp > in.remaining() / 8 / c_count)
    throw ModelFileError(ModelFileError::Code::malformed, "implausible model dimensions");
  Vector log_w(static_cast<Index>(c_count));
  for (Index c = 0; c < log_w.size(); ++c) log_w(c) = in.f64();
  std::vector<FactorAnalyser> comps;
  comps.reserve(c_count);
  for (std::uint64_t c = 0; c < c_count; ++c) {
    Matrix loading(static_cast<Index>(dim), static_cast<Index>(d));
    Vector mean(static_cast<Index>(dim));
    Vector noise(static_cast<Index>(dim));
    for (Index i = 0; i < loading.rows(); ++i)
      for (Index j = 0; j < loading.cols(); ++j) loading(i, j) = in.f64();
    for (Index i = 0; i < mean.size(); ++i) mean(i) = in.f64();
    for (Index i = 0; i < noise.size(); ++i) noise(i) = in.f64();
    comps.emplace_back(std::move(loading), std::move(mean), std::move(noise));
  }
  MfaModel layer(std::move(comps), std::move(log_w));
  std::vector<std::uint8_t> flags(c_count);
  for (auto& f : flags) f = in.u8();
  std::vector<DmfaNodePtr> children(c_count);
  for (std::size_t c = 0; c < c_count; ++c) {
    if (flags[c] > 1) throw ModelFileError(ModelFileError::Code::malformed, "bad child flag");
    if (flags[c]) children[c] = read_node(in, depth + 1);
  }
  return std::make_shared<const DmfaNode>(std::move(layer), std::move(children));
}

}  // namespace detail

inline Bytes encode_model(const ModelFile& file) {
  if (!file.tree) throw std::invalid_argument("encode_model: empty model");
  if (file.kind == ModelKind::mfa && !file.tree->is_leaf())
    throw std::invalid_argument("encode_model: mfa file cannot hold a tree with children");
  ByteWriter payload;
  const PreprocessRecord& rec = file.preprocessing;
  payload.u32(static_cast<std::uint32_t>(rec.kind));
  payload.f64(rec.scale);
  payload.u64(static_cast<std::uint64_t>(rec.shift.size()));
  for (Index i = 0; i < rec.shift.size(); ++i) payload.f64(rec.shift(i));
  const std::string meta = file.metadata.dump();
  payload.u64(meta.size());
  payload.raw(meta);
  detail::write_node(payload, *file.tree);

  ByteWriter out;
  out.raw(kModelMagic);
  out.u32(kModelVersion);
  out.u32(static_cast<std::uint32_t>(file.kind));
  out.u64(payload.bytes().size());
  out.append(payload.bytes());
  out.u32(crc32_of(payload.bytes().data(), payload.bytes().size()));
  return out.take();
}

inline ModelFile decode_model(const Bytes& bytes) {
  using Code = ModelFileError::Code;
  ByteReader in(bytes);
  try {
    if (in.raw(4) != kModelMagic) throw ModelFileError(Code::bad_magic, "not a DMFM model file");
    const std::uint32_t version = in.u32();
    if (version != kModelVersion)
      throw ModelFileError(Code::version_mismatch,
                           "model file version " + std::to_string(version) + ", expected " +
                               std::to_string(kModelVersion));
    const std::uint32_t kind = in.u32();
    if (kind > 1) throw ModelFileError(Code::malformed, "unknown model kind");
    const std::uint64_t length = in.u64();
    if (length > in.remaining() || in.remaining() - length < 4)
      throw ModelFileError(Code::truncated, "model file truncated");
    const unsigned char* payload = in.cursor();
    ByteReader body(payload, static_cast<std::size_t>(length));
    ByteReader tail(payload + length, in.remaining() - length);
    if (tail.u32() != crc32_of(payload, static_cast<std::size_t>(length)))
      throw ModelFileError(Code::checksum_mismatch, "model file checksum mismatch");
    if (tail.remaining() != 0) throw ModelFileError(Code::malformed, "trailing bytes after model");

    ModelFile file;
    file.kind = static_cast<ModelKind>(kind);
    const std::uint32_t pk = body.u32();
    if (pk > 2) throw ModelFileError(Code::malformed, "unknown preprocessing kind");
    file.preprocessing.kind = static_cast<PreprocessKind>(pk);
    file.preprocessing.scale = body.f64();
    const std::uint64_t shift_len = body.u64();
    if (shift_len > body.remaining() / 8) throw ModelFileError(Code::malformed, "bad shift length");
    file.preprocessing.shift.resize(static_cast<Index>(shift_len));
    for (Index i = 0; i < file.preprocessing.shift.size(); ++i) file.preprocessing.shift(i) = body.f64();
    const std::uint64_t meta_len = body.u64();
    if (meta_len > body.remaining()) throw ModelFileError(Code::malformed, "bad metadata length");
    file.metadata = nlohmann::json::parse(body.raw(static_cast<std::size_t>(meta_len)));
    file.tree = detail::read_node(body, 0);
    if (body.remaining() != 0) throw ModelFileError(Code::malformed, "unread payload bytes");
    if (file.kind == ModelKind::mfa && !file.tree->is_leaf())
      throw ModelFileError(Code::malformed, "mfa file holds a tree");
    return file;
  } catch (const TruncatedInput&) {
    throw ModelFileError(Code::truncated, "model file truncated");
  } catch (const nlohmann::json::exception& e) {
    throw ModelFileError(Code::malformed, std::string("bad metadata: ") + e.what());
  } catch (const ModelFileError&) {
    throw;
  } catch (const std::exception& e) {
    throw ModelFileError(Code::malformed, std::string("invalid model parameters: ") + e.what());
  }
}

inline void save_model(const ModelFile& file, const std::string& path) {
  write_file_bytes(path, encode_model(file));
}

inline ModelFile load_model(const std::string& path) {
  Bytes bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const std::exception& e) {
    throw ModelFileError(ModelFileError::Code::io, e.what());
  }
  return decode_model(bytes);
}

}  // namespace dmfa
