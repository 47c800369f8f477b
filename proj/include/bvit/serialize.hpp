#pragma once

// Weight container (little-endian):
//   "BVIT" | u32 version | u32 len + config text | u32 tensor count
//   per tensor: u16 len + name | u8 dtype (0 f32, 1 packed u64) | u8 rank | u64 dims[rank] | payload
// Binary weights are stored packed as <layer>.w_bits (D_in x D_out) next to
// <layer>.w_alpha and <layer>.w_mu; latent real weights are not stored.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "bvit/config_io.hpp"
#include "bvit/errors.hpp"
#include "bvit/model.hpp"

namespace bvit {

static_assert(std::endian::native == std::endian::little, "weight container I/O assumes a little-endian host");

inline constexpr char kWeightMagic[4] = {'B', 'V', 'I', 'T'};
inline constexpr std::uint32_t kWeightVersion = 1;
inline constexpr std::uint64_t kMaxTensorElements = std::uint64_t{1} << 32;

enum class DType : std::uint8_t { f32 = 0, packed_u64 = 1 };

struct StoredTensor {
  DType dtype = DType::f32;
  Shape dims;
  std::vector<float> f32;
  std::vector<std::uint64_t> bits;
};

namespace detail {

template <class V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class V>
V get(std::istream& is, const std::string& what) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError(FormatError::Kind::truncated, "weights: truncated while reading " + what);
  return v;
}

inline std::string get_bytes(std::istream& is, std::size_t n, const std::string& what) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError(FormatError::Kind::truncated, "weights: truncated while reading " + what);
  return s;
}

inline void write_tensor(std::ostream& os, const std::string& name, const StoredTensor& t) {
  if (name.size() > 0xFFFF) throw FormatError(FormatError::Kind::bad_tensor, "weights: tensor name too long: " + name);
  put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.dims.size()));
  for (std::size_t d : t.dims) put<std::uint64_t>(os, d);
  if (t.dtype == DType::f32)
    os.write(reinterpret_cast<const char*>(t.f32.data()), static_cast<std::streamsize>(t.f32.size() * sizeof(float)));
  else
    os.write(reinterpret_cast<const char*>(t.bits.data()), static_cast<std::streamsize>(t.bits.size() * sizeof(std::uint64_t)));
}

template <class T>
StoredTensor to_stored(const Tensor<T>& t) {
  StoredTensor s;
  s.dims = t.shape();
  s.f32.resize(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) s.f32[i] = static_cast<float>(t[i]);
  return s;
}

template <class T>
Tensor<T> from_stored(const StoredTensor& s) {
  std::vector<T> v(s.f32.begin(), s.f32.end());
  return Tensor<T>(s.dims, std::move(v));
}

}  // namespace detail

/// Writes the model in the container format. Binary layers are written in
/// their packed form (derived from the latent weights when present).
template <class T>
void save_weights(const Model<T>& model, std::ostream& os) {
  std::vector<std::pair<std::string, StoredTensor>> tensors;
  struct V {
    std::vector<std::pair<std::string, StoredTensor>>& out;
    void param(const std::string& n, Param<T>& p) { out.emplace_back(n, detail::to_stored(p.value)); }
    void buffer(const std::string& n, Tensor<T>& t) { out.emplace_back(n, detail::to_stored(t)); }
    void binary(const std::string& n, BiFC<T>& l) {
      const BinWeight<T> w = l.binary_weight();
      StoredTensor bits;
      bits.dtype = DType::packed_u64;
      bits.dims = {l.din, l.dout};
      bits.bits = w.bits.words();
      out.emplace_back(n + ".w_bits", std::move(bits));
      out.emplace_back(n + ".w_alpha", detail::to_stored(Tensor<T>({1}, w.alpha)));
      out.emplace_back(n + ".w_mu", detail::to_stored(w.mu));
    }
  } v{tensors};
  const_cast<Model<T>&>(model).visit(v);

  const std::string cfg = to_config_text(model.config());
  os.write(kWeightMagic, 4);
  detail::put<std::uint32_t>(os, kWeightVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) detail::write_tensor(os, name, t);
  if (!os) throw FormatError(FormatError::Kind::io, "weights: write failed");
}

template <class T>
void save_weights(const Model<T>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(FormatError::Kind::io, "weights: cannot open " + path + " for writing");
  save_weights(model, os);
}

/// Reads the raw container: configuration text and named tensors.
inline std::pair<std::string, std::map<std::string, StoredTensor>> read_container(std::istream& is) {
  using K = FormatError::Kind;
  char magic[4] = {};
  if (!is.read(magic, 4)) throw FormatError(K::truncated, "weights: file shorter than the magic");
  if (std::memcmp(magic, kWeightMagic, 4) != 0) throw FormatError(K::bad_magic, "weights: bad magic (not a BVIT file)");
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kWeightVersion) throw FormatError(K::bad_version, "weights: unsupported version " + std::to_string(version));
  const auto cfg_len = detail::get<std::uint32_t>(is, "config length");
  std::string cfg = detail::get_bytes(is, cfg_len, "config text");
  const auto count = detail::get<std::uint32_t>(is, "tensor count");
  std::map<std::string, StoredTensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::get<std::uint16_t>(is, "tensor name length");
    std::string name = detail::get_bytes(is, name_len, "tensor name");
    StoredTensor t;
    const auto dtype = detail::get<std::uint8_t>(is, name + " dtype");
    if (dtype > 1) throw FormatError(K::bad_tensor, "weights: tensor " + name + " has unknown dtype " + std::to_string(dtype));
    t.dtype = static_cast<DType>(dtype);
    const auto rank = detail::get<std::uint8_t>(is, name + " rank");
    std::uint64_t numel = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      const auto d = detail::get<std::uint64_t>(is, name + " dims");
      t.dims.push_back(d);
      if (d != 0 && numel > kMaxTensorElements / d) throw FormatError(K::bad_tensor, "weights: tensor " + name + " is implausibly large");
      numel *= d;
    }
    if (t.dtype == DType::f32) {
      const std::size_t n = shape_numel(t.dims);
      t.f32.resize(n);
      std::string raw = detail::get_bytes(is, n * sizeof(float), name + " payload");
      std::memcpy(t.f32.data(), raw.data(), raw.size());
    } else {
      if (rank != 2) throw FormatError(K::bad_tensor, "weights: packed tensor " + name + " must be 2-D");
      const std::size_t n = t.dims[0] * BitMatrix::words_for(t.dims[1]);
      t.bits.resize(n);
      std::string raw = detail::get_bytes(is, n * sizeof(std::uint64_t), name + " payload");
      std::memcpy(t.bits.data(), raw.data(), raw.size());
    }
    if (!tensors.emplace(name, std::move(t)).second) throw FormatError(K::bad_tensor, "weights: duplicate tensor " + name);
  }
  return {std::move(cfg), std::move(tensors)};
}

template <class T = float>
Model<T> load_weights(std::istream& is) {
  using K = FormatError::Kind;
  auto [cfg_text, tensors] = read_container(is);
  ModelConfig cfg;
  try {
    cfg = parse_config(cfg_text);
  } catch (const ConfigError& e) {
    throw FormatError(K::bad_config, std::string("weights: embedded config is invalid: ") + e.what());
  }
  Model<T> model(cfg);

  struct V {
    std::map<std::string, StoredTensor>& in;
    const StoredTensor& take(const std::string& n, DType dtype, const Shape& shape) {
      auto it = in.find(n);
      if (it == in.end()) throw FormatError(K::missing_tensor, "weights: missing tensor " + n);
      if (it->second.dtype != dtype || it->second.dims != shape)
        throw FormatError(K::bad_tensor, "weights: tensor " + n + " has shape " + shape_str(it->second.dims) + ", expected " + shape_str(shape));
      return it->second;
    }
    void done(const std::string& n) { in.erase(n); }
    void param(const std::string& n, Param<T>& p) {
      p = Param<T>(detail::from_stored<T>(take(n, DType::f32, p.value.shape())));
      done(n);
    }
    void buffer(const std::string& n, Tensor<T>& t) {
      t = detail::from_stored<T>(take(n, DType::f32, t.shape()));
      done(n);
    }
    void binary(const std::string& n, BiFC<T>& l) {
      BinWeight<T> w;
      try {
        w.bits = BitMatrix::from_words(l.din, l.dout, take(n + ".w_bits", DType::packed_u64, {l.din, l.dout}).bits);
      } catch (const ShapeError& e) {
        throw FormatError(K::bad_tensor, "weights: " + n + ".w_bits: " + e.what());
      }
      w.bits_t = w.bits.transposed();
      w.alpha = detail::from_stored<T>(take(n + ".w_alpha", DType::f32, {1}))[0];
      w.mu = detail::from_stored<T>(take(n + ".w_mu", DType::f32, {l.dout}));
      l.set_frozen(std::move(w));
      done(n + ".w_bits");
      done(n + ".w_alpha");
      done(n + ".w_mu");
    }
  } v{tensors};
  model.visit(v);
  if (!tensors.empty()) throw FormatError(K::unknown_tensor, "weights: unknown tensor " + tensors.begin()->first);
  return model;
}

template <class T = float>
Model<T> load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::io, "weights: cannot open " + path);
  return load_weights<T>(is);
}

}  // namespace bvit
