#pragma once

// Long/short routed inference over the toy stack.
//
// Long inputs keep the first `sink_len` tokens as pinned cache, fold whole
// `seg_len` blocks into compressive memory (with the sink rows as attention
// context), and keep the rest (at least `window_len` tokens) as live cache.
// During decoding, once the rolling residual beyond the window reaches
// `seg_len`, that segment is compressed, the cache is cut back to the sink
// and the window tokens are re-encoded after it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "einf/attention.hpp"
#include "einf/kvcache.hpp"
#include "einf/model.hpp"
#include "einf/ops.hpp"
#include "einf/rope.hpp"

namespace einf {

struct InferenceConfig {
  std::size_t seg_len = 8;
  std::size_t sink_len = 4;
  std::size_t window_len = 2;
  std::size_t max_len = 64;  // L_max: total sequence length generation stops at

  std::size_t route_threshold() const { return sink_len + window_len + seg_len; }

  void validate() const {
    if (seg_len == 0 || sink_len == 0 || window_len == 0 || max_len == 0)
      throw ContractError("InferenceConfig: all lengths must be positive");
    if (max_len <= sink_len + window_len) throw ContractError("InferenceConfig: max_len must exceed sink_len + window_len");
  }

  /// Full-size segment, sink and window lengths.
  static InferenceConfig edge_device(std::size_t max_len = 8192) { return {2048, 300, 200, max_len}; }
};

enum class Route { short_context, long_context };

inline Route route(std::size_t length, const InferenceConfig& cfg) {
  return length >= cfg.route_threshold() ? Route::long_context : Route::short_context;
}

/// How prefill splits an input of `length` tokens.
struct PrefillLayout {
  Route route = Route::short_context;
  std::size_t sink = 0;       // tokens in the sink block
  std::size_t segments = 0;   // whole segments compressed into memory
  std::size_t remaining = 0;  // tokens cached after the sink (residual + window)

  std::size_t cache_rows() const { return sink + remaining; }
};

inline PrefillLayout plan_prefill(std::size_t length, const InferenceConfig& cfg) {
  PrefillLayout p;
  p.route = route(length, cfg);
  if (p.route == Route::short_context) {
    p.sink = std::min(length, cfg.sink_len);
    p.remaining = length - p.sink;
    return p;
  }
  p.sink = cfg.sink_len;
  p.segments = (length - cfg.sink_len - cfg.window_len) / cfg.seg_len;
  p.remaining = length - cfg.sink_len - p.segments * cfg.seg_len;
  return p;
}

enum class AttentionMode { dense, edge_infinite };

inline const char* to_string(AttentionMode m) { return m == AttentionMode::dense ? "dense" : "edgeinfinite"; }

// ---------------------------------------------------------------------------

/// Runs blocks through the model against a cache and memory it owns by
/// reference. Shared by the inference session and the training forward.
template <class Ops, class T = typename Ops::Scalar>
class BlockRunner {
 public:
  BlockRunner(Ops& ops, const Model<T>& model, const GateBindings<Ops>& gates, const RotaryTable<T>& rope,
              KvCache<T>& cache, MemoryState* memory, FlopCounter* memory_flops = nullptr)
      : ops_(ops), model_(model), gates_(gates), rope_(rope), cache_(cache), memory_(memory),
        memory_flops_(memory_flops) {}

  /// Processes tokens that follow the cache and appends their keys/values.
  BlockOutput<Ops> extend(std::span<const TokenId> tokens, LogitsMode mode) {
    auto out = forward_block(ops_, model_, gates_, tokens, &cache_, memory_, rope_, mode);
    for (std::size_t l = 0; l < out.kv.size(); ++l) cache_.append_layer(l, out.kv[l]);
    return out;
  }

  /// Processes a segment with the current cache as context and folds its own
  /// keys/values (not the context's) into memory. The cache is unchanged.
  BlockOutput<Ops> compress(std::span<const TokenId> tokens, LogitsMode mode) {
    if (!memory_) throw ContractError("compress: runner has no memory");
    auto out = forward_block(ops_, model_, gates_, tokens, &cache_, memory_, rope_, mode);
    for (std::size_t l = 0; l < out.kv.size(); ++l)
      for (std::size_t h = 0; h < out.kv[l].size(); ++h)
        memory_->heads[l][h] = memory_update(memory_->heads[l][h], out.kv[l][h].keys, out.kv[l][h].values,
                                             model_.config.feature_map, memory_flops_);
    return out;
  }

 private:
  Ops& ops_;
  const Model<T>& model_;
  const GateBindings<Ops>& gates_;
  const RotaryTable<T>& rope_;
  KvCache<T>& cache_;
  MemoryState* memory_;
  FlopCounter* memory_flops_;
};

/// Prefill orchestration. `on_logits(first_position, logits)` receives every
/// block that produced logits. Returns the layout that was applied.
template <class Ops, class OnLogits, class OnBlock>
PrefillLayout run_prefill(BlockRunner<Ops>& runner, std::span<const TokenId> tokens, const InferenceConfig& cfg,
                          AttentionMode mode, LogitsMode logits, OnLogits&& on_logits, OnBlock&& on_block) {
  if (tokens.empty()) throw ContractError("prefill: empty input");
  const LogitsMode inner = logits == LogitsMode::all ? LogitsMode::all : LogitsMode::none;
  PrefillLayout layout = plan_prefill(tokens.size(), cfg);
  if (mode == AttentionMode::dense || layout.route == Route::short_context) {
    if (mode == AttentionMode::dense) layout = {Route::short_context, std::min(tokens.size(), cfg.sink_len), 0, 0};
    layout.remaining = tokens.size() - layout.sink;
    auto out = runner.extend(tokens, logits);
    on_block("prefill", tokens.size(), 0);
    if (out.has_logits) on_logits(std::size_t{0}, out.logits);
    return layout;
  }

  auto sink = runner.extend(tokens.subspan(0, layout.sink), inner);
  on_block("prefill-sink", layout.sink, 0);
  if (sink.has_logits) on_logits(std::size_t{0}, sink.logits);
  for (std::size_t i = 0; i < layout.segments; ++i) {
    const std::size_t begin = layout.sink + i * cfg.seg_len;
    auto seg = runner.compress(tokens.subspan(begin, cfg.seg_len), inner);
    on_block("prefill-segment", cfg.seg_len, layout.sink);
    if (seg.has_logits) on_logits(begin, seg.logits);
  }
  const std::size_t begin = layout.sink + layout.segments * cfg.seg_len;
  auto rest = runner.extend(tokens.subspan(begin), logits);
  on_block("prefill-remaining", layout.remaining, layout.sink);
  if (rest.has_logits) on_logits(begin, rest.logits);
  return layout;
}

// ---------------------------------------------------------------------------

struct SessionStats {
  FlopCounter flops;                 // cumulative over the session
  std::uint64_t prefill_flops = 0;   // flops.total() when prefill finished
  std::size_t peak_cache_rows = 0;
  std::size_t peak_bytes = 0;        // cache + memory + one layer's attention scores
};

struct StepTrace {
  std::string stage;  // "prefill", "decode" or "flush"
  std::size_t step = 0;
  std::size_t sink_len = 0;
  std::size_t rolling_len = 0;
  std::size_t total = 0;
  std::size_t segments = 0;
  std::uint64_t flops = 0;
};

inline std::string format_trace(const StepTrace& t) {
  std::ostringstream os;
  os << "stage=" << t.stage << " step=" << t.step << " sink=" << t.sink_len << " rolling=" << t.rolling_len
     << " total=" << t.total << " segments=" << t.segments << " flops=" << t.flops;
  return os.str();
}

/// One generation session: owns the cache, memory and token history for a
/// model it borrows. Not copyable; the model must outlive it.
template <class T = float>
class Session {
 public:
  Session(const Model<T>& model, InferenceConfig cfg, AttentionMode mode = AttentionMode::edge_infinite)
      : model_(model),
        cfg_(cfg),
        mode_(mode),
        rope_(model.config.head_dim(), std::max(cfg.max_len, cfg.route_threshold()) + 1, model.config.rope_base),
        ops_(&stats_.flops),
        gates_(bind_gates(ops_, model, false)),
        cache_(model.config.layers, model.config.heads, model.config.head_dim(), cfg.sink_len),
        memory_(MemoryState::zeros(model.config.layers, model.config.heads, model.config.head_dim())) {
    cfg_.validate();
    model.config.validate();
  }
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  void set_trace(std::function<void(const StepTrace&)> fn) { trace_ = std::move(fn); }

  /// Ingests the prompt and returns next-token logits (1 x vocab). The
  /// greedy next token is appended to tokens() and becomes pending input
  /// for the first decode step.
  BasicMatrix<T> prefill(std::span<const TokenId> prompt) {
    if (prefilled_) throw ContractError("prefill: session already prefilled");
    if (prompt.empty()) throw ContractError("prefill: empty input");
    tokens_.assign(prompt.begin(), prompt.end());
    BlockRunner<EagerOps<T>> runner(ops_, model_, gates_, rope_, cache_, memory_ptr(), &stats_.flops);
    BasicMatrix<T> last;
    const auto layout = run_prefill(
        runner, prompt, cfg_, mode_, LogitsMode::last, [&](std::size_t, const BasicMatrix<T>& l) { last = l; },
        [&](const char*, std::size_t rows, std::size_t context) { note_block(rows, context); });
    compressed_ = layout.segments * cfg_.seg_len;
    stats_.prefill_flops = stats_.flops.total();
    prefilled_ = true;
    tokens_.push_back(static_cast<TokenId>(argmax_row(last, 0)));
    emit("prefill");
    return last;
  }

  /// Consumes the pending token and returns the next greedy token.
  TokenId decode_step() {
    if (!prefilled_) throw ContractError("decode_step: call prefill first");
    BlockRunner<EagerOps<T>> runner(ops_, model_, gates_, rope_, cache_, memory_ptr(), &stats_.flops);
    const std::size_t n = tokens_.size();
    const std::span<const TokenId> all(tokens_);
    BlockOutput<EagerOps<T>> out;
    const char* stage = "decode";
    if (mode_ == AttentionMode::edge_infinite && residual_length() == cfg_.seg_len) {
      const std::size_t seg_begin = n - cfg_.seg_len - cfg_.window_len;
      cache_.truncate_to_sink();
      runner.compress(all.subspan(seg_begin, cfg_.seg_len), LogitsMode::none);
      note_block(cfg_.seg_len, cache_.total());
      compressed_ += cfg_.seg_len;
      out = runner.extend(all.subspan(n - cfg_.window_len), LogitsMode::last);
      note_block(cfg_.window_len, cache_.total() - cfg_.window_len);
      stage = "flush";
    } else {
      out = runner.extend(all.subspan(n - 1), LogitsMode::last);
      note_block(1, cache_.total() - 1);
    }
    const auto next = static_cast<TokenId>(argmax_row(out.logits, 0));
    tokens_.push_back(next);
    ++step_;
    emit(stage);
    return next;
  }

  /// Prefill followed by decode steps until tokens().size() == max_len.
  std::vector<TokenId> generate(std::span<const TokenId> prompt) {
    if (cfg_.max_len <= prompt.size()) throw ContractError("generate: max_len must exceed the prompt length");
    prefill(prompt);
    while (tokens_.size() < cfg_.max_len) decode_step();
    return tokens_;
  }

  /// Uncompressed tokens beyond sink and window, counting the pending token.
  std::size_t residual_length() const {
    const std::size_t fixed = cfg_.sink_len + compressed_ + cfg_.window_len;
    return tokens_.size() > fixed ? tokens_.size() - fixed : 0;
  }

  const std::vector<TokenId>& tokens() const { return tokens_; }
  const KvCache<T>& cache() const { return cache_; }
  const MemoryState& memory() const { return memory_; }
  const SessionStats& stats() const { return stats_; }
  const InferenceConfig& config() const { return cfg_; }
  AttentionMode mode() const { return mode_; }
  std::size_t compressed_tokens() const { return compressed_; }
  std::size_t step() const { return step_; }
  bool prefilled() const { return prefilled_; }

 private:
  MemoryState* memory_ptr() { return mode_ == AttentionMode::edge_infinite ? &memory_ : nullptr; }

  std::size_t memory_bytes() const {
    if (mode_ == AttentionMode::dense) return 0;
    const std::size_t d = model_.config.head_dim();
    return model_.config.layers * model_.config.heads * (d * d + d) * sizeof(double);
  }

  // `rows` block rows attended against `context` earlier rows.
  void note_block(std::size_t rows, std::size_t context) {
    stats_.peak_cache_rows = std::max(stats_.peak_cache_rows, cache_.total());
    const std::size_t scores = rows * (context + rows) * model_.config.heads * sizeof(T);
    stats_.peak_bytes = std::max(stats_.peak_bytes, cache_.bytes() + memory_bytes() + scores);
  }

  void emit(const char* stage) {
    if (!trace_) return;
    trace_({stage, step_, cache_.sink_len(), cache_.rolling_len(), cache_.total(), memory_.segment_count(),
            stats_.flops.total()});
  }

  const Model<T>& model_;
  InferenceConfig cfg_;
  AttentionMode mode_;
  RotaryTable<T> rope_;
  SessionStats stats_;
  EagerOps<T> ops_;
  GateBindings<EagerOps<T>> gates_;
  KvCache<T> cache_;
  MemoryState memory_;
  std::vector<TokenId> tokens_;
  std::size_t compressed_ = 0;
  std::size_t step_ = 0;
  bool prefilled_ = false;
  std::function<void(const StepTrace&)> trace_;
};

/// Logits for every input position (L x vocab) from one prefill pass, as
/// used by the dense-vs-memory comparison. In the long route the segment
/// positions get the logits computed while they were being compressed.
template <class T = float>
BasicMatrix<T> all_position_logits(const Model<T>& model, std::span<const TokenId> tokens, const InferenceConfig& cfg,
                                   AttentionMode mode) {
  EagerOps<T> ops;
  const auto gates = bind_gates(ops, model, false);
  const RotaryTable<T> rope(model.config.head_dim(), std::max(tokens.size(), cfg.route_threshold()) + 1,
                            model.config.rope_base);
  KvCache<T> cache(model.config.layers, model.config.heads, model.config.head_dim(), cfg.sink_len);
  MemoryState memory = MemoryState::zeros(model.config.layers, model.config.heads, model.config.head_dim());
  BlockRunner<EagerOps<T>> runner(ops, model, gates, rope, cache,
                                  mode == AttentionMode::edge_infinite ? &memory : nullptr);
  BasicMatrix<T> out(tokens.size(), model.config.vocab);
  run_prefill(
      runner, tokens, cfg, mode, LogitsMode::all,
      [&](std::size_t first, const BasicMatrix<T>& logits) {
        for (std::size_t r = 0; r < logits.rows(); ++r)
          std::copy(logits.row(r).begin(), logits.row(r).end(), out.row(first + r).begin());
      },
      [](const char*, std::size_t, std::size_t) {});
  return out;
}

}  // namespace einf
