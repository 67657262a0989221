#pragma once

// Fine-tuning of the memory-gating module only. The backbone enters the
// tape as constants; memory and cache handed from one block to the next are
// plain values, so gradients stop at block boundaries.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "einf/engine.hpp"
#include "einf/model.hpp"
#include "einf/ops.hpp"
#include "einf/tape.hpp"

namespace einf {

enum class TaskKind { copy, kv_recall, needle };

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::kv_recall: return "kv";
    case TaskKind::needle: return "needle";
  }
  return "?";
}

/// `input` is the prompt; `target` the continuation the loss supervises.
struct TaskSample {
  TaskKind kind = TaskKind::copy;
  std::vector<TokenId> input;
  std::vector<TokenId> target;
  friend bool operator==(const TaskSample&, const TaskSample&) = default;
};

inline constexpr TokenId kFiller = '.';
inline constexpr TokenId kNeedleMarker = '#';

/// Builds one synthetic sample of `length` total tokens (prompt + target).
///
///   copy       prompt = n random lowercase letters, target = the same n
///              letters (length = 2n).
///   kv_recall  `pairs` (key, value) tokens open the first compressed
///              segment, filler follows, the prompt ends with one of the
///              keys and the target is its value.
///   needle     '#' followed by a digit hidden at a random spot of the
///              compressed region; the prompt ends with '#'.
inline TaskSample make_task(TaskKind kind, std::size_t length, Rng& rng, const InferenceConfig& cfg,
                            std::size_t pairs = 1) {
  if (length <= cfg.route_threshold())
    throw ContractError(std::string("make_task(") + to_string(kind) + "): length " + std::to_string(length) +
                        " does not exceed the long-route threshold " + std::to_string(cfg.route_threshold()));
  TaskSample s;
  s.kind = kind;
  auto letter = [&] { return static_cast<TokenId>('a' + rng.below(26)); };
  auto digit = [&] { return static_cast<TokenId>('0' + rng.below(10)); };

  switch (kind) {
    case TaskKind::copy: {
      if (length % 2 != 0) throw ContractError("make_task(copy): length must be even");
      for (std::size_t i = 0; i < length / 2; ++i) s.input.push_back(letter());
      s.target = s.input;
      break;
    }
    case TaskKind::kv_recall: {
      if (pairs == 0 || pairs > 26 || 2 * pairs > cfg.seg_len)
        throw ContractError("make_task(kv): pairs must fit in one segment");
      s.input.assign(length - 1, kFiller);
      std::vector<TokenId> keys;
      while (keys.size() < pairs) {
        const auto k = static_cast<TokenId>('A' + rng.below(26));
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
      }
      std::vector<TokenId> values;
      for (std::size_t i = 0; i < pairs; ++i) {
        values.push_back(digit());
        s.input[cfg.sink_len + 2 * i] = keys[i];
        s.input[cfg.sink_len + 2 * i + 1] = values[i];
      }
      const std::size_t q = rng.below(pairs);
      s.input.back() = keys[q];
      s.target = {values[q]};
      break;
    }
    case TaskKind::needle: {
      s.input.assign(length - 1, kFiller);
      const auto layout = plan_prefill(s.input.size(), cfg);
      const std::size_t region = layout.segments * cfg.seg_len;
      const std::size_t pos = cfg.sink_len + rng.below(region - 1);
      s.input[pos] = kNeedleMarker;
      s.input[pos + 1] = digit();
      s.input.back() = kNeedleMarker;
      s.target = {s.input[pos + 1]};
      break;
    }
  }
  return s;
}

inline std::vector<TaskSample> make_tasks(TaskKind kind, std::size_t count, std::size_t length, std::uint64_t seed,
                                          const InferenceConfig& cfg, std::size_t pairs = 1) {
  Rng rng(seed);
  std::vector<TaskSample> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_task(kind, length, rng, cfg, pairs));
  return out;
}

// ---------------------------------------------------------------------------

template <class T>
RotaryTable<T> training_rope(const Model<T>& model, std::span<const TaskSample> batch, const InferenceConfig& cfg) {
  std::size_t longest = cfg.route_threshold();
  for (const auto& s : batch) longest = std::max(longest, s.input.size() + s.target.size());
  return RotaryTable<T>(model.config.head_dim(), longest + 1, model.config.rope_base);
}

inline std::size_t supervised_positions(std::span<const TaskSample> batch) {
  std::size_t n = 0;
  for (const auto& s : batch) n += s.target.size();
  return n;
}

/// Sum over the sample's target positions of the next-token cross-entropy,
/// divided by `normalizer`. The sample is run teacher-forced through the
/// same segmented prefill path inference uses.
template <class Ops, class T = typename Ops::Scalar>
typename Ops::Value sample_loss(Ops& ops, const Model<T>& model, const GateBindings<Ops>& gates,
                                const TaskSample& sample, const InferenceConfig& cfg, const RotaryTable<T>& rope,
                                T normalizer) {
  if (sample.input.empty() || sample.target.empty()) throw ContractError("sample_loss: empty prompt or target");
  std::vector<TokenId> seq = sample.input;
  seq.insert(seq.end(), sample.target.begin(), sample.target.end() - 1);
  const std::size_t first_supervised = sample.input.size() - 1;

  const auto& c = model.config;
  KvCache<T> cache(c.layers, c.heads, c.head_dim(), cfg.sink_len);
  MemoryState memory = MemoryState::zeros(c.layers, c.heads, c.head_dim());
  BlockRunner<Ops> runner(ops, model, gates, rope, cache, &memory);

  std::vector<typename Ops::Value> parts;
  run_prefill(
      runner, std::span<const TokenId>(seq), cfg, AttentionMode::edge_infinite, LogitsMode::all,
      [&](std::size_t first, const typename Ops::Value& logits) {
        const std::size_t rows = ops.value(logits).rows();
        std::vector<int> targets(rows, -1);
        bool any = false;
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t pos = first + r;
          if (pos < first_supervised) continue;
          targets[r] = sample.target[pos - first_supervised];
          any = true;
        }
        if (any) parts.push_back(ops.cross_entropy(logits, std::move(targets), normalizer));
      },
      [](const char*, std::size_t, std::size_t) {});
  typename Ops::Value total = parts.at(0);
  for (std::size_t i = 1; i < parts.size(); ++i) total = ops.add(total, parts[i]);
  return total;
}

/// Mean next-token cross-entropy over every supervised position of the batch.
template <class Ops, class T = typename Ops::Scalar>
typename Ops::Value batch_loss(Ops& ops, const Model<T>& model, const GateBindings<Ops>& gates,
                               std::span<const TaskSample> batch, const InferenceConfig& cfg,
                               const RotaryTable<T>& rope) {
  if (batch.empty()) throw ContractError("loss: empty batch");
  const T normalizer = static_cast<T>(supervised_positions(batch));
  typename Ops::Value total = sample_loss(ops, model, gates, batch[0], cfg, rope, normalizer);
  for (std::size_t i = 1; i < batch.size(); ++i)
    total = ops.add(total, sample_loss(ops, model, gates, batch[i], cfg, rope, normalizer));
  return total;
}

/// Loss value without recording a tape.
template <class T>
double evaluate_loss(const Model<T>& model, std::span<const TaskSample> batch, const InferenceConfig& cfg) {
  EagerOps<T> ops;
  const auto gates = bind_gates(ops, model, false);
  const auto rope = training_rope(model, batch, cfg);
  return static_cast<double>(batch_loss(ops, model, gates, batch, cfg, rope)(0, 0));
}

/// Gradients of the batch loss for every gating tensor, laid out [layer][head].
template <class T>
struct GateGradients {
  double loss = 0.0;
  std::vector<std::vector<GateParams<T>>> grads;
};

template <class T>
GateGradients<T> gate_gradients(const Model<T>& model, std::span<const TaskSample> batch, const InferenceConfig& cfg) {
  Tape<T> tape;
  TapeOps<T> ops(tape);
  const auto rope = training_rope(model, batch, cfg);
  const auto gates = bind_gates(ops, model, true);
  const Var loss = batch_loss(ops, model, gates, batch, cfg, rope);
  GateGradients<T> out;
  out.loss = static_cast<double>(tape.value(loss)(0, 0));
  if (!std::isfinite(out.loss)) throw NumericError("non-finite loss");
  const Gradients<T> g = tape.backward(loss);
  for (const auto& layer : gates) {
    out.grads.emplace_back();
    for (const auto& b : layer) out.grads.back().push_back({g.at(b.w1), g.at(b.b1), g.at(b.w2), g.at(b.b2), g.at(b.g)});
  }
  return out;
}

// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 0.005;
  std::size_t epochs = 2;
  std::size_t batch_size = 4;
  std::size_t max_steps = 0;  // 0: run `epochs` full passes
  double momentum = 0.0;      // 0: plain SGD
  std::uint64_t seed = 0;     // shuffling order
};

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<LossPoint> curve;
};

/// Trains model.gates in place. Every other tensor is left bit-for-bit
/// unchanged. Throws NumericError if the loss stops being finite.
inline TrainResult train_gate(Model<float>& model, std::span<const TaskSample> data, const TrainConfig& tc,
                              const InferenceConfig& icfg,
                              const std::function<void(const LossPoint&)>& on_step = {}) {
  if (tc.learning_rate <= 0.0) throw ContractError("train_gate: learning_rate must be positive");
  if (data.empty() || tc.batch_size == 0) throw ContractError("train_gate: no data");
  const std::size_t per_epoch = (data.size() + tc.batch_size - 1) / tc.batch_size;
  const std::size_t steps = tc.max_steps > 0 ? tc.max_steps : tc.epochs * per_epoch;

  std::vector<std::vector<GateParams<float>>> velocity;
  if (tc.momentum > 0.0) {
    velocity = model.gates;
    for (auto& layer : velocity)
      for (auto& g : layer) g.for_each([](const char*, Matrix& m) { std::fill(m.data().begin(), m.data().end(), 0.0f); });
  }

  Rng rng(tc.seed);
  std::vector<std::size_t> order(data.size());
  TrainResult result;
  std::vector<TaskSample> batch;
  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t slot = step % per_epoch;
    if (slot == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    }
    batch.clear();
    for (std::size_t i = slot * tc.batch_size; i < std::min(data.size(), (slot + 1) * tc.batch_size); ++i)
      batch.push_back(data[order[i]]);

    GateGradients<float> gg;
    try {
      gg = gate_gradients(model, std::span<const TaskSample>(batch), icfg);
    } catch (const NumericError& e) {
      throw NumericError("train_gate: step " + std::to_string(step) + ": " + e.what());
    }
    for (std::size_t l = 0; l < model.gates.size(); ++l)
      for (std::size_t h = 0; h < model.gates[l].size(); ++h) {
        std::vector<Matrix*> params, grads, vel;
        model.gates[l][h].for_each([&](const char*, Matrix& m) { params.push_back(&m); });
        gg.grads[l][h].for_each([&](const char*, Matrix& m) { grads.push_back(&m); });
        if (!velocity.empty()) velocity[l][h].for_each([&](const char*, Matrix& m) { vel.push_back(&m); });
        for (std::size_t t = 0; t < params.size(); ++t) {
          auto p = params[t]->data();
          auto g = grads[t]->data();
          for (std::size_t i = 0; i < p.size(); ++i) {
            float update = g[i];
            if (!vel.empty()) {
              float& v = vel[t]->data()[i];
              v = static_cast<float>(tc.momentum) * v + g[i];
              update = v;
            }
            p[i] -= static_cast<float>(tc.learning_rate) * update;
          }
        }
      }
    result.curve.push_back({step, gg.loss});
    if (on_step) on_step(result.curve.back());
  }
  return result;
}

/// Fraction of samples whose whole target is reproduced by greedy decoding.
inline double exact_match_accuracy(const Model<float>& model, std::span<const TaskSample> samples,
                                   InferenceConfig cfg) {
  if (samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : samples) {
    cfg.max_len = s.input.size() + s.target.size();
    Session<float> session(model, cfg);
    const auto out = session.generate(s.input);
    hits += std::equal(s.target.begin(), s.target.end(), out.begin() + static_cast<std::ptrdiff_t>(s.input.size()));
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

inline void write_loss_csv(std::ostream& os, std::span<const LossPoint> curve) {
  os << "step,loss\n";
  for (const auto& p : curve) os << p.step << ',' << p.loss << '\n';
}

}  // namespace einf
