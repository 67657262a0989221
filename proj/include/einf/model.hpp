#pragma once

// Toy decoder-only transformer: token embeddings, pre-norm layers of
// (attention with memory gating, SwiGLU feed-forward), final norm, LM head.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "einf/attention.hpp"
#include "einf/kvcache.hpp"
#include "einf/numerics.hpp"
#include "einf/ops.hpp"
#include "einf/rope.hpp"

namespace einf {

using TokenId = std::int32_t;

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t d_ff = 64;
  std::size_t vocab = 259;
  double rope_base = 10000.0;
  FeatureMap feature_map = FeatureMap::elu1;
  GateMode gate_mode = GateMode::per_coordinate;
  std::size_t gate_hidden = 0;  // 0 means "same as head_dim"
  double norm_eps = 1e-5;

  std::size_t head_dim() const { return d_model / heads; }
  std::size_t gate_hidden_dim() const { return gate_hidden == 0 ? head_dim() : gate_hidden; }
  std::size_t gate_width() const { return gate_mode == GateMode::per_coordinate ? head_dim() : 1; }

  void validate() const {
    if (d_model == 0 || heads == 0 || layers == 0 || d_ff == 0 || vocab == 0)
      throw ContractError("ModelConfig: dimensions must be positive");
    if (d_model % heads != 0) throw ContractError("ModelConfig: d_model must be divisible by heads");
    if (head_dim() % 2 != 0) throw ContractError("ModelConfig: head_dim must be even for rotary embeddings");
    if (rope_base <= 1.0) throw ContractError("ModelConfig: rope_base must exceed 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T = float>
struct LayerParams {
  BasicMatrix<T> attn_norm;  // 1 x d_model
  LayerWeights<T> attn;
  BasicMatrix<T> ffn_norm;  // 1 x d_model
  BasicMatrix<T> w_gate;    // d_model x d_ff
  BasicMatrix<T> w_up;      // d_model x d_ff
  BasicMatrix<T> w_down;    // d_ff x d_model
};

template <class T = float>
struct Model {
  ModelConfig config;
  BasicMatrix<T> embed;       // vocab x d_model
  std::vector<LayerParams<T>> layers;
  std::vector<std::vector<GateParams<T>>> gates;  // [layer][head]
  BasicMatrix<T> final_norm;  // 1 x d_model
  BasicMatrix<T> lm_head;     // d_model x vocab

  /// Visits every frozen tensor with a stable name.
  template <class F>
  void for_each_backbone(F&& f) {
    visit_backbone(*this, f);
  }
  template <class F>
  void for_each_backbone(F&& f) const {
    visit_backbone(*this, f);
  }

  /// Visits every gating tensor (the only trainable ones).
  template <class F>
  void for_each_gate(F&& f) {
    visit_gates(*this, f);
  }
  template <class F>
  void for_each_gate(F&& f) const {
    visit_gates(*this, f);
  }

  template <class U>
  Model<U> cast() const {
    Model<U> out;
    out.config = config;
    out.embed = embed.template cast<U>();
    for (const auto& l : layers) {
      out.layers.push_back({l.attn_norm.template cast<U>(),
                            {l.attn.w_q.template cast<U>(), l.attn.w_k.template cast<U>(),
                             l.attn.w_v.template cast<U>(), l.attn.w_o.template cast<U>()},
                            l.ffn_norm.template cast<U>(), l.w_gate.template cast<U>(), l.w_up.template cast<U>(),
                            l.w_down.template cast<U>()});
    }
    for (const auto& layer : gates) {
      out.gates.emplace_back();
      for (const auto& g : layer) out.gates.back().push_back(g.template cast<U>());
    }
    out.final_norm = final_norm.template cast<U>();
    out.lm_head = lm_head.template cast<U>();
    return out;
  }

 private:
  template <class Self, class F>
  static void visit_backbone(Self& m, F& f) {
    f(std::string("embed"), m.embed);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
      auto& l = m.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      f(p + "attn_norm", l.attn_norm);
      f(p + "attn.w_q", l.attn.w_q);
      f(p + "attn.w_k", l.attn.w_k);
      f(p + "attn.w_v", l.attn.w_v);
      f(p + "attn.w_o", l.attn.w_o);
      f(p + "ffn_norm", l.ffn_norm);
      f(p + "ffn.w_gate", l.w_gate);
      f(p + "ffn.w_up", l.w_up);
      f(p + "ffn.w_down", l.w_down);
    }
    f(std::string("final_norm"), m.final_norm);
    f(std::string("lm_head"), m.lm_head);
  }

  template <class Self, class F>
  static void visit_gates(Self& m, F& f) {
    for (std::size_t i = 0; i < m.gates.size(); ++i)
      for (std::size_t h = 0; h < m.gates[i].size(); ++h) {
        const std::string p = "layers." + std::to_string(i) + ".gate." + std::to_string(h) + ".";
        m.gates[i][h].for_each([&](const char* name, auto& t) { f(p + name, t); });
      }
  }
};

template <class T>
std::size_t backbone_parameter_count(const Model<T>& m) {
  std::size_t n = 0;
  m.for_each_backbone([&](const std::string&, const BasicMatrix<T>& t) { n += t.size(); });
  return n;
}

template <class T>
std::size_t gate_parameter_count(const Model<T>& m) {
  std::size_t n = 0;
  m.for_each_gate([&](const std::string&, const BasicMatrix<T>& t) { n += t.size(); });
  return n;
}

template <class T>
double trainable_fraction(const Model<T>& m) {
  const double g = static_cast<double>(gate_parameter_count(m));
  return g / (g + static_cast<double>(backbone_parameter_count(m)));
}

// ---------------------------------------------------------------------------

template <class Ops>
using GateBindings = std::vector<std::vector<GateBinding<Ops>>>;

template <class Ops, class T>
GateBindings<Ops> bind_gates(Ops& ops, const Model<T>& model, bool trainable) {
  GateBindings<Ops> out;
  for (const auto& layer : model.gates) {
    out.emplace_back();
    for (const auto& g : layer) out.back().push_back(bind_gate(ops, g, trainable));
  }
  return out;
}

enum class LogitsMode { none, last, all };

template <class Ops>
struct BlockOutput {
  bool has_logits = false;
  typename Ops::Value logits{};  // rows: every block row (all) or the final row (last)
  std::vector<std::vector<HeadKv<typename Ops::Scalar>>> kv;  // [layer][head]
};

/// Runs `tokens` through the stack. `cache` rows (if any) precede the block
/// and are attended to by every query; `memory` (if non-empty) feeds the
/// gating path of each layer.
template <class Ops, class T = typename Ops::Scalar>
BlockOutput<Ops> forward_block(Ops& ops, const Model<T>& model, const GateBindings<Ops>& gates,
                               std::span<const TokenId> tokens, const KvCache<T>* cache,
                               const MemoryState* memory, const RotaryTable<T>& rope, LogitsMode mode) {
  const ModelConfig& cfg = model.config;
  if (tokens.empty()) throw ContractError("forward_block: empty token block");
  const std::size_t n = tokens.size();
  BasicMatrix<T> emb(n, cfg.d_model);
  for (std::size_t i = 0; i < n; ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg.vocab)
      throw RangeError("token id " + std::to_string(tokens[i]) + " outside vocabulary");
    auto src = model.embed.row(static_cast<std::size_t>(tokens[i]));
    std::copy(src.begin(), src.end(), emb.row(i).begin());
  }

  const T eps = static_cast<T>(cfg.norm_eps);
  const AttentionOptions opt{cfg.heads, cfg.feature_map, 1e-6};
  BlockOutput<Ops> out;
  typename Ops::Value h = ops.constant(emb);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& lp = model.layers[l];
    const auto xn = ops.mul_row(ops.rms_normalize(h, eps), ops.constant(lp.attn_norm));
    std::span<const GateBinding<Ops>> layer_gates;
    if (l < gates.size()) layer_gates = gates[l];
    std::span<const HeadMemory> layer_mem;
    if (memory && !memory->empty()) layer_mem = memory->layer(l);
    std::span<const HeadKv<T>> layer_cache;
    if (cache) layer_cache = cache->layer(l);
    auto att = attention_forward(ops, xn, lp.attn, layer_gates, layer_mem, layer_cache, rope, opt);
    h = ops.add(h, att.out);

    const auto xf = ops.mul_row(ops.rms_normalize(h, eps), ops.constant(lp.ffn_norm));
    auto scope = ops.count_as(FlopKind::projection);
    const auto gate = ops.activation(Activation::silu, ops.matmul(xf, ops.constant(lp.w_gate)));
    const auto up = ops.matmul(xf, ops.constant(lp.w_up));
    h = ops.add(h, ops.matmul(ops.mul(gate, up), ops.constant(lp.w_down)));
    out.kv.push_back(std::move(att.kv));
  }

  if (mode != LogitsMode::none) {
    const auto hs = mode == LogitsMode::last ? ops.slice_rows(h, n - 1, 1) : h;
    auto scope = ops.count_as(FlopKind::projection);
    out.logits = ops.matmul(ops.mul_row(ops.rms_normalize(hs, eps), ops.constant(model.final_norm)),
                            ops.constant(model.lm_head));
    out.has_logits = true;
  }
  return out;
}

}  // namespace einf
