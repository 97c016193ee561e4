#pragma once

// Binary tensor container ("LIAR" files) and the JSON model manifest.
//
// Layout, all integers little-endian:
//   magic "LIAR" | u32 version (1) | u32 tensor_count
//   per tensor: u16 name_len | name bytes | u8 dtype (0 f32, 1 f64) | u8 ndim
//               | u64 dims[ndim] | payload (row-major, little-endian)

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prunekit/errors.hpp"
#include "prunekit/linalg.hpp"

namespace prunekit {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

struct Tensor {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::uint64_t> dims;
  std::vector<double> values;  // f32 tensors hold float-representable values

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  bool operator==(const Tensor&) const = default;
};

using TensorList = std::vector<Tensor>;

inline Tensor make_tensor(std::string name, const Matrix& m, DType dtype = DType::f64) {
  Tensor t{std::move(name), dtype, {m.rows(), m.cols()}, m.values()};
  if (dtype == DType::f32)
    for (double& v : t.values) v = static_cast<double>(static_cast<float>(v));
  return t;
}

inline Tensor make_tensor(std::string name, std::span<const double> v, DType dtype = DType::f64) {
  Tensor t{std::move(name), dtype, {v.size()}, {v.begin(), v.end()}};
  if (dtype == DType::f32)
    for (double& x : t.values) x = static_cast<double>(static_cast<float>(x));
  return t;
}

inline Matrix tensor_to_matrix(const Tensor& t) {
  if (t.dims.size() != 2) throw ValidationError("tensor '" + t.name + "' is not 2-D");
  return Matrix(t.dims[0], t.dims[1], t.values);
}

inline const Tensor& find_tensor(const TensorList& list, const std::string& name) {
  for (const auto& t : list)
    if (t.name == name) return t;
  throw ValidationError("missing tensor '" + name + "'");
}

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CorruptionError("tensor file truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr std::uint32_t kTensorFileVersion = 1;

inline std::vector<std::uint8_t> encode_tensors(const TensorList& tensors) {
  std::set<std::string> names;
  std::vector<std::uint8_t> out{'L', 'I', 'A', 'R'};
  detail::put_le(out, kTensorFileVersion, 4);
  detail::put_le(out, tensors.size(), 4);
  for (const auto& t : tensors) {
    if (t.name.empty() || t.name.size() > 0xFFFF)
      throw ValidationError("tensor name length must be in [1, 65535]");
    if (!names.insert(t.name).second) throw ValidationError("duplicate tensor name '" + t.name + "'");
    if (t.dims.size() > 0xFF) throw ValidationError("tensor '" + t.name + "' has too many dims");
    if (t.values.size() != t.element_count())
      throw ValidationError("tensor '" + t.name + "' value count does not match dims");
    detail::put_le(out, t.name.size(), 2);
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(static_cast<std::uint8_t>(t.dtype));
    out.push_back(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) detail::put_le(out, d, 8);
    for (double v : t.values) {
      if (t.dtype == DType::f32)
        detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
      else
        detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
    }
  }
  return out;
}

inline TensorList decode_tensors(std::span<const std::uint8_t> bytes) {
  detail::Reader in(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "LIAR", 4) != 0)
    throw FormatError("bad magic, expected \"LIAR\"");
  in.take(4);
  const auto version = in.le(4);
  if (version != kTensorFileVersion)
    throw FormatError("unsupported tensor file version " + std::to_string(version));
  const auto count = in.le(4);
  TensorList out;
  std::set<std::string> names;
  for (std::uint64_t i = 0; i < count; ++i) {
    Tensor t;
    const auto name_len = in.le(2);
    auto name = in.take(name_len);
    t.name.assign(name.begin(), name.end());
    if (t.name.empty()) throw ValidationError("empty tensor name");
    if (!names.insert(t.name).second) throw ValidationError("duplicate tensor name '" + t.name + "'");
    const auto dtype = in.le(1);
    if (dtype > 1) throw FormatError("unknown dtype " + std::to_string(dtype));
    t.dtype = static_cast<DType>(dtype);
    const auto ndim = in.le(1);
    for (std::uint64_t d = 0; d < ndim; ++d) t.dims.push_back(in.le(8));
    const auto count_elems = t.element_count();
    if (count_elems > in.remaining() / dtype_size(t.dtype))
      throw CorruptionError("tensor '" + t.name + "' payload truncated");
    t.values.reserve(count_elems);
    for (std::uint64_t e = 0; e < count_elems; ++e) {
      if (t.dtype == DType::f32)
        t.values.push_back(std::bit_cast<float>(static_cast<std::uint32_t>(in.le(4))));
      else
        t.values.push_back(std::bit_cast<double>(in.le(8)));
    }
    out.push_back(std::move(t));
  }
  if (in.remaining() != 0) throw CorruptionError("trailing bytes after last tensor");
  return out;
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_tensors(const std::filesystem::path& path, const TensorList& tensors) {
  write_bytes(path, encode_tensors(tensors));
}

inline TensorList read_tensors(const std::filesystem::path& path) {
  return decode_tensors(read_bytes(path));
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

/// Shape description of a stored model. `layer_heads` and `layer_ffn` track
/// per-layer widths, which diverge from `heads`/`ffn_dim` after pruning.
struct ModelManifest {
  std::size_t layers = 0;
  std::size_t embed_dim = 0;
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  std::size_t ffn_dim = 0;
  std::size_t vocab = 0;
  std::size_t max_seq = 0;
  bool causal = false;
  std::vector<std::size_t> layer_heads;
  std::vector<std::size_t> layer_ffn;
  std::map<std::string, std::vector<std::uint64_t>> tensors;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = "prunekit-model";
    j["version"] = 1;
    j["layers"] = layers;
    j["embed_dim"] = embed_dim;
    j["heads"] = heads;
    j["head_dim"] = head_dim;
    j["ffn_dim"] = ffn_dim;
    j["vocab"] = vocab;
    j["max_seq"] = max_seq;
    j["causal"] = causal;
    j["layer_heads"] = layer_heads;
    j["layer_ffn"] = layer_ffn;
    j["tensors"] = tensors;
    return j;
  }

  static ModelManifest from_json(const nlohmann::json& j) {
    try {
      if (j.at("format") != "prunekit-model") throw FormatError("not a prunekit model manifest");
      if (j.at("version") != 1) throw FormatError("unsupported manifest version");
      ModelManifest m;
      j.at("layers").get_to(m.layers);
      j.at("embed_dim").get_to(m.embed_dim);
      j.at("heads").get_to(m.heads);
      j.at("head_dim").get_to(m.head_dim);
      j.at("ffn_dim").get_to(m.ffn_dim);
      j.at("vocab").get_to(m.vocab);
      j.at("max_seq").get_to(m.max_seq);
      j.at("causal").get_to(m.causal);
      j.at("layer_heads").get_to(m.layer_heads);
      j.at("layer_ffn").get_to(m.layer_ffn);
      j.at("tensors").get_to(m.tensors);
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("manifest: ") + e.what());
    }
  }

  // Every manifest tensor exists in `list` with matching dims.
  void validate_against(const TensorList& list) const {
    if (embed_dim != heads * head_dim) throw ValidationError("manifest: embed_dim != heads * head_dim");
    if (layer_heads.size() != layers || layer_ffn.size() != layers)
      throw ValidationError("manifest: per-layer widths do not match layer count");
    for (const auto& [name, dims] : tensors) {
      const Tensor& t = find_tensor(list, name);
      if (t.dims != dims) throw ValidationError("manifest: dims mismatch for tensor '" + name + "'");
    }
  }
};

}  // namespace prunekit
