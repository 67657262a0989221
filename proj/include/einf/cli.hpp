#pragma once

// Command-line front end. `run` is the whole program minus process setup so
// tests can drive it with string streams.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "einf/bench.hpp"
#include "einf/engine.hpp"
#include "einf/model_io.hpp"
#include "einf/training.hpp"

namespace einf::cli {

namespace fs = std::filesystem;

struct ModelArgs {
  std::string model;   // .einf weights; empty means "initialize from --seed"
  std::string config;  // model.json; empty means model.json beside --model, else toy defaults
  std::string gates;   // optional gating-only checkpoint overlaid after loading
  std::uint64_t seed = 0;
};

struct EngineArgs {
  std::string mode = "edgeinfinite";
  std::size_t seg_len = 8;
  std::size_t sink = 4;
  std::size_t window = 2;
};

struct PromptArgs {
  std::string prompt_file;
  std::string text;
  std::vector<TokenId> ids;
};

inline void add_model_flags(CLI::App* app, ModelArgs& a) {
  app->add_option("--model", a.model, "weight container (.einf)");
  app->add_option("--config", a.config, "model config (JSON)");
  app->add_option("--gates", a.gates, "gating-only checkpoint to overlay");
  app->add_option("--seed", a.seed, "init seed when no --model is given");
}

inline void add_engine_flags(CLI::App* app, EngineArgs& a) {
  app->add_option("--mode", a.mode, "attention mode")->check(CLI::IsMember({"dense", "edgeinfinite"}));
  app->add_option("--seg-len", a.seg_len, "segment length")->check(CLI::PositiveNumber);
  app->add_option("--sink", a.sink, "sink tokens")->check(CLI::PositiveNumber);
  app->add_option("--window", a.window, "window tokens")->check(CLI::PositiveNumber);
}

inline void add_prompt_flags(CLI::App* app, PromptArgs& a) {
  auto* file = app->add_option("--prompt", a.prompt_file, "prompt file (raw bytes)");
  auto* text = app->add_option("--text", a.text, "prompt text");
  auto* ids = app->add_option("--ids", a.ids, "prompt token ids, comma separated")->delimiter(',');
  file->excludes(text)->excludes(ids);
  text->excludes(ids);
}

inline ModelConfig resolve_config(const ModelArgs& a) {
  if (!a.config.empty()) return load_config(a.config);
  if (!a.model.empty()) {
    const fs::path sibling = fs::path(a.model).parent_path() / "model.json";
    if (fs::exists(sibling)) return load_config(sibling);
  }
  return ModelConfig{};
}

inline Model<float> resolve_model(const ModelArgs& a) {
  const ModelConfig cfg = resolve_config(a);
  cfg.validate();
  if (!a.model.empty() && !fs::exists(a.model)) throw Error("model file not found: " + a.model);
  Model<float> m = a.model.empty() ? init_model(cfg, a.seed) : load_model(a.model, cfg);
  if (!a.gates.empty()) overlay_gates(a.gates, m);
  return m;
}

inline AttentionMode parse_mode(const std::string& s) {
  if (s == "dense") return AttentionMode::dense;
  if (s == "edgeinfinite") return AttentionMode::edge_infinite;
  throw ContractError("unknown mode: " + s);
}

inline InferenceConfig engine_config(const EngineArgs& a, std::size_t max_len) {
  return {a.seg_len, a.sink, a.window, std::max(max_len, a.sink + a.window + 1)};
}

/// BOS followed by the prompt bytes, or the ids verbatim.
inline std::vector<TokenId> resolve_prompt(const PromptArgs& a) {
  if (!a.ids.empty()) return a.ids;
  std::string text = a.text;
  if (!a.prompt_file.empty()) {
    if (!fs::exists(a.prompt_file)) throw Error("prompt file not found: " + a.prompt_file);
    text = detail::read_file(a.prompt_file);
  }
  std::vector<TokenId> ids{ByteTokenizer::bos};
  const auto bytes = ByteTokenizer::tokenize(text);
  ids.insert(ids.end(), bytes.begin(), bytes.end());
  return ids;
}

/// Writes to --out atomically, or to stdout.
inline void emit(const std::string& path, const std::string& body, std::ostream& out) {
  if (path.empty())
    out << body;
  else
    detail::write_file_atomic(path, body);
}

inline std::string join_ids(std::span<const TokenId> ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? "," : "") + std::to_string(ids[i]);
  return s;
}

// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"EdgeInfinite toy inference, gate training and benchmarks", "einf"};
  app.require_subcommand(1);

  ModelArgs model_args;
  EngineArgs engine_args;
  PromptArgs prompt_args;
  std::string out_path;
  bool trace = false;
  std::size_t max_tokens = 16;

  // init
  ModelConfig init_cfg;
  std::string init_gate_mode = "per-coordinate";
  auto* init = app.add_subcommand("init", "write a freshly initialized model (model.einf + model.json)");
  init->add_option("--out", out_path, "output directory")->required();
  init->add_option("--seed", model_args.seed, "init seed");
  init->add_option("--d-model", init_cfg.d_model)->check(CLI::PositiveNumber);
  init->add_option("--heads", init_cfg.heads)->check(CLI::PositiveNumber);
  init->add_option("--layers", init_cfg.layers)->check(CLI::PositiveNumber);
  init->add_option("--d-ff", init_cfg.d_ff)->check(CLI::PositiveNumber);
  init->add_option("--gate-mode", init_gate_mode)->check(CLI::IsMember({"per-coordinate", "per-head-scalar"}));

  // generate
  bool emit_ids = false;
  auto* gen = app.add_subcommand("generate", "greedy generation; prints the continuation");
  add_model_flags(gen, model_args);
  add_engine_flags(gen, engine_args);
  add_prompt_flags(gen, prompt_args);
  gen->add_option("--max-tokens", max_tokens, "tokens to append")->check(CLI::PositiveNumber);
  gen->add_flag("--trace", trace, "step trace on stderr");
  gen->add_flag("--emit-ids", emit_ids, "print the full id sequence instead of text");
  gen->add_option("--out", out_path, "write output here instead of stdout");

  // train-gate
  std::string task = "kv";
  std::size_t samples = 64, length = 24, pairs = 1;
  TrainConfig tc;
  std::string loss_csv;
  auto* train = app.add_subcommand("train-gate", "fine-tune the memory-gating module only");
  add_model_flags(train, model_args);
  add_engine_flags(train, engine_args);
  train->add_option("--task", task)->check(CLI::IsMember({"copy", "kv", "needle"}));
  train->add_option("--samples", samples)->check(CLI::PositiveNumber);
  train->add_option("--length", length, "tokens per sample (prompt + target)")->check(CLI::PositiveNumber);
  train->add_option("--pairs", pairs, "key/value pairs per kv sample")->check(CLI::PositiveNumber);
  train->add_option("--lr", tc.learning_rate)->check(CLI::PositiveNumber);
  train->add_option("--epochs", tc.epochs)->check(CLI::PositiveNumber);
  train->add_option("--batch", tc.batch_size)->check(CLI::PositiveNumber);
  train->add_option("--steps", tc.max_steps, "step count (overrides --epochs)");
  train->add_option("--momentum", tc.momentum)->check(CLI::Range(0.0, 0.999));
  train->add_option("--loss-csv", loss_csv, "loss curve CSV path");
  train->add_option("--out", out_path, "gating-only checkpoint path")->required();
  train->add_flag("--trace", trace, "per-step loss on stderr");

  // bench
  std::vector<std::size_t> lengths{16, 32, 64, 128};
  std::size_t repeats = 1;
  std::string bench_modes = "both";
  auto* bench = app.add_subcommand("bench", "TTFT / flop / cache-size CSV over prompt lengths");
  add_model_flags(bench, model_args);
  add_engine_flags(bench, engine_args);
  bench->add_option("--lengths", lengths, "ascending prompt lengths")->delimiter(',');
  bench->add_option("--repeats", repeats)->check(CLI::PositiveNumber);
  bench->add_option("--modes", bench_modes)->check(CLI::IsMember({"both", "dense", "edgeinfinite"}));
  bench->add_option("--out", out_path, "CSV path");

  // compare
  auto* compare = app.add_subcommand("compare", "per-position max |logit difference|, dense vs edgeinfinite");
  add_model_flags(compare, model_args);
  add_engine_flags(compare, engine_args);
  add_prompt_flags(compare, prompt_args);
  compare->add_option("--out", out_path, "report path");

  // inspect-cache
  auto* inspect = app.add_subcommand("inspect-cache", "cache layout after prefill and every decode step");
  add_model_flags(inspect, model_args);
  add_engine_flags(inspect, engine_args);
  add_prompt_flags(inspect, prompt_args);
  inspect->add_option("--max-tokens", max_tokens)->check(CLI::PositiveNumber);
  inspect->add_flag("--trace", trace, "step trace on stderr");
  inspect->add_option("--out", out_path, "CSV path");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "einf: " << e.what() << '\n';
    return e.get_exit_code();
  }

  try {
    auto trace_fn = [&](const StepTrace& t) { err << format_trace(t) << '\n'; };

    if (init->parsed()) {
      init_cfg.gate_mode = init_gate_mode == "per-head-scalar" ? GateMode::per_head_scalar : GateMode::per_coordinate;
      init_cfg.validate();
      const Model<float> m = init_model(init_cfg, model_args.seed);
      fs::create_directories(out_path);
      save_config(fs::path(out_path) / "model.json", init_cfg);
      save_weights(fs::path(out_path) / "model.einf", m);
      out << "parameters " << backbone_parameter_count(m) + gate_parameter_count(m) << " (gating "
          << gate_parameter_count(m) << ")\n";
      return 0;
    }

    if (gen->parsed()) {
      const Model<float> m = resolve_model(model_args);
      const auto prompt = resolve_prompt(prompt_args);
      if (prompt.empty()) throw ContractError("empty prompt");
      Session<float> s(m, engine_config(engine_args, prompt.size() + max_tokens), parse_mode(engine_args.mode));
      if (trace) s.set_trace(trace_fn);
      const auto ids = s.generate(prompt);
      const std::span<const TokenId> tail = std::span<const TokenId>(ids).subspan(prompt.size());
      emit(out_path, emit_ids ? join_ids(ids) + "\n" : ByteTokenizer::detokenize(tail), out);
      return 0;
    }

    if (train->parsed()) {
      Model<float> m = resolve_model(model_args);
      const TaskKind kind = task == "copy" ? TaskKind::copy : task == "kv" ? TaskKind::kv_recall : TaskKind::needle;
      const InferenceConfig icfg = engine_config(engine_args, length + 1);
      const auto data = make_tasks(kind, samples, length, model_args.seed + 1, icfg, pairs);
      tc.seed = model_args.seed;
      err << "trainable fraction " << std::setprecision(4) << 100.0 * trainable_fraction(m) << "%\n";
      const auto result = train_gate(m, data, tc, icfg, [&](const LossPoint& p) {
        if (trace) err << "step=" << p.step << " loss=" << p.loss << '\n';
      });
      if (!loss_csv.empty()) {
        std::ostringstream os;
        write_loss_csv(os, result.curve);
        detail::write_file_atomic(loss_csv, os.str());
      }
      save_gates(out_path, m);
      out << "loss " << result.curve.front().loss << " -> " << result.curve.back().loss << " over "
          << result.curve.size() << " steps\n";
      return 0;
    }

    if (bench->parsed()) {
      const Model<float> m = resolve_model(model_args);
      std::vector<AttentionMode> modes;
      if (bench_modes != "edgeinfinite") modes.push_back(AttentionMode::dense);
      if (bench_modes != "dense") modes.push_back(AttentionMode::edge_infinite);
      const auto records = run_bench(m, engine_config(engine_args, 1 + engine_args.sink + engine_args.window),
                                     lengths, repeats, modes, bench_threads(), model_args.seed);
      std::ostringstream os;
      write_bench_csv(os, records);
      emit(out_path, os.str(), out);
      return 0;
    }

    if (compare->parsed()) {
      const Model<float> m = resolve_model(model_args);
      const auto prompt = resolve_prompt(prompt_args);
      if (prompt.empty()) throw ContractError("empty prompt");
      const InferenceConfig icfg = engine_config(engine_args, prompt.size() + 1);
      const Matrix dense = all_position_logits(m, prompt, icfg, AttentionMode::dense);
      const Matrix edge = all_position_logits(m, prompt, icfg, AttentionMode::edge_infinite);
      const bool short_route = route(prompt.size(), icfg) == Route::short_context;
      std::ostringstream os;
      os << "position,max_abs_delta\n";
      double worst = 0.0;
      for (std::size_t r = 0; r < dense.rows(); ++r) {
        double d = 0.0;
        for (std::size_t c = 0; c < dense.cols(); ++c)
          d = std::max(d, std::abs(static_cast<double>(dense(r, c)) - edge(r, c)));
        worst = std::max(worst, d);
        os << r << ',' << d << '\n';
      }
      os << "# route=" << (short_route ? "short" : "long") << " length=" << prompt.size() << " max_abs_delta=" << worst
         << '\n';
      emit(out_path, os.str(), out);
      return short_route && !(worst < 1e-4) ? 1 : 0;
    }

    if (inspect->parsed()) {
      const Model<float> m = resolve_model(model_args);
      const auto prompt = resolve_prompt(prompt_args);
      if (prompt.empty()) throw ContractError("empty prompt");
      Session<float> s(m, engine_config(engine_args, prompt.size() + max_tokens), parse_mode(engine_args.mode));
      std::ostringstream os;
      os << "step,sink_len,rolling_len,total,memory_segments\n";
      s.set_trace([&](const StepTrace& t) {
        os << t.step << ',' << t.sink_len << ',' << t.rolling_len << ',' << t.total << ',' << t.segments << '\n';
        if (trace) trace_fn(t);
      });
      s.generate(prompt);
      emit(out_path, os.str(), out);
      return 0;
    }
  } catch (const std::exception& e) {
    err << "einf: error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace einf::cli
