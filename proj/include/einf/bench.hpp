#pragma once

// Time-to-first-token and memory benchmark: one prefill per
// (mode, length, repeat) cell. Flop counts and cache rows are analytic and
// therefore deterministic; only ttft_ms depends on the machine.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <mutex>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "einf/engine.hpp"
#include "einf/model.hpp"
#include "einf/model_io.hpp"

namespace einf {

struct BenchRecord {
  AttentionMode mode = AttentionMode::edge_infinite;
  std::size_t length = 0;
  std::size_t repeat = 0;
  double ttft_ms = 0.0;
  std::uint64_t prefill_flops = 0;
  std::uint64_t attention_flops = 0;  // QK^T and PV terms only
  std::size_t peak_cache_rows = 0;
  std::size_t peak_bytes = 0;
};

inline constexpr const char* kBenchCsvHeader = "mode,length,ttft_ms,prefill_flops,peak_cache_rows,peak_bytes";

/// BOS followed by length-1 pseudo-random bytes.
inline std::vector<TokenId> bench_prompt(std::size_t length, std::uint64_t seed) {
  Rng rng(seed ^ (0x9E3779B97F4A7C15ull * (length + 1)));
  std::vector<TokenId> ids;
  ids.reserve(length);
  if (length > 0) ids.push_back(ByteTokenizer::bos);
  while (ids.size() < length) ids.push_back(static_cast<TokenId>(rng.below(256)));
  return ids;
}

inline BenchRecord bench_once(const Model<float>& model, InferenceConfig cfg, AttentionMode mode, std::size_t length,
                              std::uint64_t seed) {
  if (length < 1) throw ContractError("bench: length must be >= 1");
  cfg.max_len = std::max(length + 1, cfg.sink_len + cfg.window_len + 1);
  const auto prompt = bench_prompt(length, seed);
  Session<float> session(model, cfg, mode);
  const auto t0 = std::chrono::steady_clock::now();
  session.prefill(prompt);
  const auto t1 = std::chrono::steady_clock::now();
  BenchRecord r;
  r.mode = mode;
  r.length = length;
  r.ttft_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  r.prefill_flops = session.stats().prefill_flops;
  r.attention_flops = session.stats().flops[FlopKind::attention];
  r.peak_cache_rows = session.stats().peak_cache_rows;
  r.peak_bytes = session.stats().peak_bytes;
  return r;
}

/// Thread cap from EINF_THREADS, else the hardware concurrency.
inline std::size_t bench_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("EINF_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = static_cast<std::size_t>(v);
  }
  return n;
}

/// Rows come back ordered by (mode, length, repeat) regardless of threads.
inline std::vector<BenchRecord> run_bench(const Model<float>& model, const InferenceConfig& cfg,
                                          std::span<const std::size_t> lengths, std::size_t repeats,
                                          std::span<const AttentionMode> modes, std::size_t threads,
                                          std::uint64_t seed = 0) {
  if (!std::is_sorted(lengths.begin(), lengths.end())) throw ContractError("bench: lengths must be ascending");
  for (auto l : lengths)
    if (l < 1) throw ContractError("bench: length must be >= 1");
  struct Cell {
    AttentionMode mode;
    std::size_t length, repeat;
  };
  std::vector<Cell> cells;
  for (auto m : modes)
    for (auto l : lengths)
      for (std::size_t r = 0; r < repeats; ++r) cells.push_back({m, l, r});

  std::vector<BenchRecord> out(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex error_mu;
  std::exception_ptr error;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        out[i] = bench_once(model, cfg, cells[i].mode, cells[i].length, seed);
        out[i].repeat = cells[i].repeat;
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return out;
}

inline void write_bench_csv(std::ostream& os, std::span<const BenchRecord> records) {
  os << kBenchCsvHeader << '\n';
  for (const auto& r : records)
    os << to_string(r.mode) << ',' << r.length << ',' << r.ttft_ms << ',' << r.prefill_flops << ','
       << r.peak_cache_rows << ',' << r.peak_bytes << '\n';
}

}  // namespace einf
