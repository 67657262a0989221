#pragma once

// Deterministic initialization, the byte tokenizer, the `.einf` weight
// container and the `model.json` config document.
//
// Container layout (all integers little-endian):
//
//   "EINF"                     4 bytes magic
//   u32 version                currently 1
//   u32 tensor_count
//   tensor_count x {
//     u32 name_len, name bytes (UTF-8)
//     u32 dtype                0 = float32
//     u32 ndim                 always 2
//     u64 dims[ndim]
//     u64 offset               byte offset into the payload
//   }
//   payload                    float32 values, little-endian, row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "einf/model.hpp"
#include "einf/numerics.hpp"

namespace einf {

// ---------------------------------------------------------------------------
// Tokenizer

/// Byte-level vocabulary: ids 0..255 are raw bytes, followed by BOS, EOS, PAD.
class ByteTokenizer {
 public:
  static constexpr TokenId bos = 256;
  static constexpr TokenId eos = 257;
  static constexpr TokenId pad = 258;
  static constexpr std::size_t vocab_size = 259;

  static std::vector<TokenId> tokenize(std::string_view text) {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
    return ids;
  }

  /// Special ids produce no bytes.
  static std::string detokenize(std::span<const TokenId> ids) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) throw RangeError("detokenize: unknown id " + std::to_string(id));
      if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Initialization

/// Closed-form parameter count for a config: embeddings and LM head,
/// per-layer attention, norms and SwiGLU, and the per-head gating module.
inline std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, dh = c.head_dim(), hid = c.gate_hidden_dim();
  const std::size_t per_gate = dh * hid + hid + hid * dh + dh + c.gate_width();
  const std::size_t per_layer = 4 * d * d + 2 * d + 3 * d * c.d_ff + c.heads * per_gate;
  return 2 * c.vocab * d + c.layers * per_layer + d;
}

/// Gate initial value: sigmoid(-2) ~ 0.12 leans toward local attention.
inline constexpr float kGateInit = -2.0f;

template <class T = float>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Model<T> m;
  m.config = cfg;
  const std::size_t d = cfg.d_model, dh = cfg.head_dim(), hid = cfg.gate_hidden_dim();
  auto linear = [&](std::size_t in, std::size_t out) {
    const double a = 1.0 / std::sqrt(static_cast<double>(in));
    return rng.uniform_matrix<T>(in, out, -a, a);
  };
  m.embed = rng.uniform_matrix<T>(cfg.vocab, d, -1.0, 1.0);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerParams<T> lp;
    lp.attn_norm = BasicMatrix<T>(1, d, T{1});
    lp.attn = {linear(d, d), linear(d, d), linear(d, d), linear(d, d)};
    lp.ffn_norm = BasicMatrix<T>(1, d, T{1});
    lp.w_gate = linear(d, cfg.d_ff);
    lp.w_up = linear(d, cfg.d_ff);
    lp.w_down = linear(cfg.d_ff, d);
    m.layers.push_back(std::move(lp));
  }
  m.final_norm = BasicMatrix<T>(1, d, T{1});
  m.lm_head = linear(d, cfg.vocab);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    m.gates.emplace_back();
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      GateParams<T> g;
      g.w1 = rng.uniform_matrix<T>(dh, hid, -0.1, 0.1);
      g.b1 = BasicMatrix<T>(1, hid);
      g.w2 = rng.uniform_matrix<T>(hid, dh, -0.1, 0.1);
      g.b2 = BasicMatrix<T>(1, dh);
      g.g = BasicMatrix<T>(1, cfg.gate_width(), static_cast<T>(kGateInit));
      m.gates.back().push_back(std::move(g));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Config document

NLOHMANN_JSON_SERIALIZE_ENUM(FeatureMap, {{FeatureMap::elu1, "elu1"}, {FeatureMap::softplus, "softplus"}})
NLOHMANN_JSON_SERIALIZE_ENUM(GateMode, {{GateMode::per_coordinate, "per_coordinate"},
                                        {GateMode::per_head_scalar, "per_head_scalar"}})

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},     {"heads", c.heads},         {"layers", c.layers},
          {"d_ff", c.d_ff},           {"vocab", c.vocab},         {"rope_base", c.rope_base},
          {"feature_map", c.feature_map}, {"gate_mode", c.gate_mode}, {"gate_hidden", c.gate_hidden},
          {"norm_eps", c.norm_eps}};
}

/// Missing keys keep their defaults.
inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.d_model = j.value("d_model", c.d_model);
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.vocab = j.value("vocab", c.vocab);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.feature_map = j.value("feature_map", c.feature_map);
    c.gate_mode = j.value("gate_mode", c.gate_mode);
    c.gate_hidden = j.value("gate_hidden", c.gate_hidden);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("model config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Weight container

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'E', 'I', 'N', 'F'};

using NamedTensors = std::vector<std::pair<std::string, Matrix>>;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void raw(std::string_view s) { bytes_.append(s); }
  std::string& bytes() { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(little(4)); }
  std::uint64_t u64() { return little(8); }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  std::size_t size() const { return data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw TruncatedError("weight container truncated at byte " + std::to_string(pos_));
  }
  std::uint64_t little(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a sibling temporary and renames, so a failed write never leaves
/// a partial file behind.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline std::string encode_container(const NamedTensors& tensors) {
  detail::ByteWriter w;
  w.raw(std::string_view(kContainerMagic, 4));
  w.u32(kContainerVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(0);
    w.u32(2);
    w.u64(m.rows());
    w.u64(m.cols());
    w.u64(offset);
    offset += m.size() * 4;
  }
  for (const auto& [name, m] : tensors)
    for (float v : m.data()) w.f32(v);
  return std::move(w.bytes());
}

/// Parses a whole container. Throws BadMagicError, VersionError,
/// TruncatedError or FormatError; never returns partial results.
inline NamedTensors decode_container(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0)
    throw BadMagicError("not an EINF weight container (bad magic)");
  r.raw(4);
  const std::uint32_t version = r.u32();
  if (version != kContainerVersion)
    throw VersionError("unsupported container version " + std::to_string(version));
  const std::uint32_t count = r.u32();

  struct Entry {
    std::string name;
    std::uint64_t rows, cols, offset;
  };
  std::vector<Entry> entries;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = std::string(r.raw(r.u32()));
    const std::uint32_t dtype = r.u32();
    const std::uint32_t ndim = r.u32();
    if (dtype != 0) throw FormatError("tensor " + e.name + ": unsupported dtype " + std::to_string(dtype));
    if (ndim != 2) throw FormatError("tensor " + e.name + ": expected 2 dimensions");
    e.rows = r.u64();
    e.cols = r.u64();
    e.offset = r.u64();
    if (!names.insert(e.name).second) throw FormatError("duplicate tensor name " + e.name);
    entries.push_back(std::move(e));
  }

  const std::size_t payload_begin = r.position();
  const std::size_t payload_size = bytes.size() - payload_begin;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const auto& e : entries) {
    const std::uint64_t len = e.rows * e.cols * 4;
    if (e.rows != 0 && len / e.rows / 4 != e.cols) throw FormatError("tensor " + e.name + ": size overflow");
    if (e.offset > payload_size || len > payload_size - e.offset)
      throw TruncatedError("tensor " + e.name + " extends past end of file");
    spans.emplace_back(e.offset, e.offset + len);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i)
    if (spans[i].first < spans[i - 1].second) throw FormatError("tensor payloads overlap");

  NamedTensors out;
  for (const auto& e : entries) {
    Matrix m(e.rows, e.cols);
    const char* src = bytes.data() + payload_begin + e.offset;
    for (std::size_t i = 0; i < m.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[i * 4 + b])) << (8 * b);
      m.data()[i] = std::bit_cast<float>(bits);
    }
    out.emplace_back(e.name, std::move(m));
  }
  return out;
}

inline NamedTensors backbone_tensors(const Model<float>& model) {
  NamedTensors t;
  model.for_each_backbone([&](const std::string& n, const Matrix& m) { t.emplace_back(n, m); });
  return t;
}

inline NamedTensors gate_tensors(const Model<float>& model) {
  NamedTensors t;
  model.for_each_gate([&](const std::string& n, const Matrix& m) { t.emplace_back(n, m); });
  return t;
}

namespace detail {

// Assigns `tensors` onto the visited slots of a copy of the model; the
// caller's model is only touched once every name and shape checked out.
template <class Visit>
void apply_tensors(Model<float>& model, const NamedTensors& tensors, bool require_all, Visit visit) {
  std::map<std::string, const Matrix*> by_name;
  for (const auto& [n, m] : tensors) by_name[n] = &m;
  Model<float> staged = model;
  std::size_t used = 0;
  visit(staged, [&](const std::string& name, Matrix& slot) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      if (require_all) throw ShapeMismatchError("container is missing tensor " + name);
      return;
    }
    if (it->second->rows() != slot.rows() || it->second->cols() != slot.cols())
      throw ShapeMismatchError("tensor " + name + " has shape " + std::to_string(it->second->rows()) + "x" +
                               std::to_string(it->second->cols()) + ", config expects " +
                               std::to_string(slot.rows()) + "x" + std::to_string(slot.cols()));
    slot = *it->second;
    ++used;
  });
  if (used != tensors.size()) throw ShapeMismatchError("container holds tensors the config does not define");
  model = std::move(staged);
}

}  // namespace detail

/// Full weights: backbone and gating module.
inline void save_weights(const std::filesystem::path& path, const Model<float>& model) {
  NamedTensors t = backbone_tensors(model);
  for (auto& g : gate_tensors(model)) t.push_back(std::move(g));
  detail::write_file_atomic(path, encode_container(t));
}

/// Loads into a model whose config is already set (shapes are validated
/// against it). On any error the model is left unchanged.
inline void load_weights(const std::filesystem::path& path, Model<float>& model) {
  const NamedTensors t = decode_container(detail::read_file(path));
  detail::apply_tensors(model, t, true, [](Model<float>& m, auto&& f) {
    m.for_each_backbone(f);
    m.for_each_gate(f);
  });
}

/// Gating-only checkpoint.
inline void save_gates(const std::filesystem::path& path, const Model<float>& model) {
  detail::write_file_atomic(path, encode_container(gate_tensors(model)));
}

/// Replaces the gating tensors from a gating-only checkpoint; the backbone
/// is not touched.
inline void overlay_gates(const std::filesystem::path& path, Model<float>& model) {
  const NamedTensors t = decode_container(detail::read_file(path));
  detail::apply_tensors(model, t, true, [](Model<float>& m, auto&& f) { m.for_each_gate(f); });
}

inline void save_config(const std::filesystem::path& path, const ModelConfig& cfg) {
  detail::write_file_atomic(path, config_to_json(cfg).dump(2) + "\n");
}

/// Model from a config and a weight file.
inline Model<float> load_model(const std::filesystem::path& weights, const ModelConfig& cfg) {
  Model<float> m = init_model(cfg, 0);
  load_weights(weights, m);
  return m;
}

}  // namespace einf
