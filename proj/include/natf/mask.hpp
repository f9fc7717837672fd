#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "natf/error.hpp"

namespace natf {

enum class MaskKind { kFull, kCausal, kSelfMasked };

// Boolean [queries x keys] matrix; true means the key may be attended to.
class AttentionMask {
 public:
  AttentionMask(std::size_t queries, std::size_t keys, bool permitted = true)
      : queries_(queries), keys_(keys), allowed_(queries * keys, permitted ? 1 : 0) {}

  static AttentionMask full(std::size_t queries, std::size_t keys) {
    return AttentionMask(queries, keys, true);
  }

  // Key j is visible from query i iff j <= i.
  static AttentionMask causal(std::size_t n) {
    AttentionMask mask(n, n, false);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        mask.set(i, j, true);
      }
    }
    return mask;
  }

  // Every key except the query's own position. A length-1 sequence keeps its
  // single self link so that no row is empty.
  static AttentionMask self_masked(std::size_t n) {
    AttentionMask mask(n, n, true);
    if (n > 1) {
      for (std::size_t i = 0; i < n; ++i) {
        mask.set(i, i, false);
      }
    }
    return mask;
  }

  static AttentionMask of_kind(MaskKind kind, std::size_t queries, std::size_t keys) {
    switch (kind) {
      case MaskKind::kCausal:
        return causal(queries);
      case MaskKind::kSelfMasked:
        return self_masked(queries);
      case MaskKind::kFull:
        break;
    }
    return full(queries, keys);
  }

  std::size_t queries() const noexcept { return queries_; }
  std::size_t keys() const noexcept { return keys_; }
  bool allowed(std::size_t q, std::size_t k) const { return allowed_[q * keys_ + k] != 0; }
  void set(std::size_t q, std::size_t k, bool permitted) { allowed_[q * keys_ + k] = permitted ? 1 : 0; }

  std::size_t permitted_in_row(std::size_t q) const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < keys_; ++k) {
      n += allowed_[q * keys_ + k];
    }
    return n;
  }

  void validate() const {
    for (std::size_t q = 0; q < queries_; ++q) {
      if (permitted_in_row(q) == 0) {
        throw NumericError("attention mask row " + std::to_string(q) + " has no permitted keys");
      }
    }
  }

 private:
  std::size_t queries_;
  std::size_t keys_;
  std::vector<std::uint8_t> allowed_;
};

// One independent attention problem inside a packed batch: query rows
// [q_offset, q_offset + mask.queries()) attend to key rows
// [k_offset, k_offset + mask.keys()).
struct AttentionBlock {
  std::size_t q_offset = 0;
  std::size_t k_offset = 0;
  AttentionMask mask;
};

using AttentionLayout = std::vector<AttentionBlock>;

// Row ranges of the sequences packed into one matrix.
struct SegmentLayout {
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> lengths;

  std::size_t count() const noexcept { return lengths.size(); }
  std::size_t total() const noexcept {
    return lengths.empty() ? 0 : offsets.back() + lengths.back();
  }

  void push(std::size_t length) {
    offsets.push_back(total());
    lengths.push_back(length);
  }
};

inline AttentionLayout self_attention_layout(const SegmentLayout& segs, MaskKind kind) {
  AttentionLayout layout;
  layout.reserve(segs.count());
  for (std::size_t s = 0; s < segs.count(); ++s) {
    layout.push_back({segs.offsets[s], segs.offsets[s],
                      AttentionMask::of_kind(kind, segs.lengths[s], segs.lengths[s])});
  }
  return layout;
}

inline AttentionLayout cross_attention_layout(const SegmentLayout& queries, const SegmentLayout& keys) {
  if (queries.count() != keys.count()) {
    throw UsageError("cross attention: query and key batches differ in size");
  }
  AttentionLayout layout;
  layout.reserve(queries.count());
  for (std::size_t s = 0; s < queries.count(); ++s) {
    layout.push_back({queries.offsets[s], keys.offsets[s],
                      AttentionMask::full(queries.lengths[s], keys.lengths[s])});
  }
  return layout;
}

}  // namespace natf
