#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "einf/attention.hpp"
#include "einf/numerics.hpp"

namespace einf {

/// Per-layer, per-head key/value rows. The first `sink_quota` rows ever
/// appended form the sink region; they are never evicted or modified.
/// Everything after them is the rolling region, which truncate_to_sink()
/// drops.
template <class T = float>
class KvCache {
 public:
  KvCache() = default;
  KvCache(std::size_t layers, std::size_t heads, std::size_t head_dim, std::size_t sink_quota)
      : head_dim_(head_dim), sink_quota_(sink_quota) {
    HeadKv<T> empty{BasicMatrix<T>(0, head_dim), BasicMatrix<T>(0, head_dim)};
    layers_.assign(layers, std::vector<HeadKv<T>>(heads, empty));
  }

  std::size_t num_layers() const { return layers_.size(); }
  std::size_t num_heads() const { return layers_.empty() ? 0 : layers_[0].size(); }
  std::size_t head_dim() const { return head_dim_; }
  std::size_t sink_quota() const { return sink_quota_; }

  void append(std::size_t layer, std::size_t head, const BasicMatrix<T>& keys, const BasicMatrix<T>& values) {
    if (keys.cols() != head_dim_ || values.cols() != head_dim_)
      throw ShapeError("KvCache::append: row width != head_dim");
    if (keys.rows() != values.rows()) throw ShapeError("KvCache::append: key/value row counts differ");
    HeadKv<T>& slot = layers_.at(layer).at(head);
    slot.keys.append_rows(keys);
    slot.values.append_rows(values);
  }

  void append_layer(std::size_t layer, std::span<const HeadKv<T>> rows) {
    if (rows.size() != num_heads()) throw ShapeError("KvCache::append_layer: one entry per head");
    for (std::size_t h = 0; h < rows.size(); ++h) append(layer, h, rows[h].keys, rows[h].values);
  }

  /// Drops the rolling region. Idempotent.
  void truncate_to_sink() {
    for (auto& layer : layers_)
      for (auto& slot : layer) {
        slot.keys.truncate_rows(sink_quota_);
        slot.values.truncate_rows(sink_quota_);
      }
  }

  std::size_t total() const { return layers_.empty() || layers_[0].empty() ? 0 : layers_[0][0].keys.rows(); }
  std::size_t sink_len() const { return std::min(total(), sink_quota_); }
  std::size_t rolling_len() const { return total() - sink_len(); }
  /// Retained rows, the quantity reported as the cache budget.
  std::size_t budget() const { return total(); }

  /// Resident bytes of all key and value rows.
  std::size_t bytes() const { return total() * num_layers() * num_heads() * head_dim_ * 2 * sizeof(T); }

  std::span<const HeadKv<T>> layer(std::size_t l) const { return layers_.at(l); }
  const HeadKv<T>& head(std::size_t l, std::size_t h) const { return layers_.at(l).at(h); }

 private:
  std::size_t head_dim_ = 0;
  std::size_t sink_quota_ = 0;
  std::vector<std::vector<HeadKv<T>>> layers_;
};

}  // namespace einf
