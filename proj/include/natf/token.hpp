#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "natf/error.hpp"
#include "natf/mask.hpp"

namespace natf {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr std::size_t kNumReserved = 4;

// Token ids plus a logical length. Storage past length() is padding and is
// never read by the models.
class TokenSeq {
 public:
  TokenSeq() = default;
  TokenSeq(std::vector<TokenId> ids) : ids_(std::move(ids)), length_(ids_.size()) {}  // NOLINT
  TokenSeq(std::initializer_list<TokenId> ids) : ids_(ids), length_(ids_.size()) {}
  TokenSeq(std::vector<TokenId> ids, std::size_t length) : ids_(std::move(ids)), length_(length) {
    if (length_ > ids_.size()) {
      throw UsageError("TokenSeq: length exceeds storage");
    }
  }

  std::span<const TokenId> tokens() const noexcept { return {ids_.data(), length_}; }
  std::vector<TokenId> to_vector() const { return {ids_.begin(), ids_.begin() + static_cast<std::ptrdiff_t>(length_)}; }
  std::size_t size() const noexcept { return length_; }
  bool empty() const noexcept { return length_ == 0; }
  std::size_t capacity() const noexcept { return ids_.size(); }
  TokenId operator[](std::size_t i) const { return ids_[i]; }

  // Raw storage including the padding region.
  std::span<TokenId> storage() noexcept { return ids_; }

  TokenSeq padded_to(std::size_t width, TokenId pad = kPad) const {
    std::vector<TokenId> out = to_vector();
    if (out.size() < width) out.resize(width, pad);
    return TokenSeq(std::move(out), length_);
  }

  bool operator==(const TokenSeq& other) const {
    const auto a = tokens(), b = other.tokens();
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
  }

 private:
  std::vector<TokenId> ids_;
  std::size_t length_ = 0;
};

struct SentencePair {
  TokenSeq source;
  TokenSeq target;
};

using ParallelCorpus = std::vector<SentencePair>;

// Sequences concatenated row-wise for one batched forward pass.
struct PackedBatch {
  std::vector<TokenId> ids;
  SegmentLayout layout;

  std::size_t count() const noexcept { return layout.count(); }
  std::size_t total() const noexcept { return ids.size(); }

  void push(std::span<const TokenId> seq) {
    if (seq.empty()) {
      throw UsageError("PackedBatch: empty sequence");
    }
    layout.push(seq.size());
    ids.insert(ids.end(), seq.begin(), seq.end());
  }
};

inline PackedBatch pack(std::span<const TokenSeq> seqs) {
  PackedBatch batch;
  for (const auto& s : seqs) batch.push(s.tokens());
  return batch;
}

// Position of each packed row inside its own sequence.
inline std::vector<std::size_t> positions_in_segment(const SegmentLayout& layout) {
  std::vector<std::size_t> pos;
  pos.reserve(layout.total());
  for (std::size_t s = 0; s < layout.count(); ++s) {
    for (std::size_t j = 0; j < layout.lengths[s]; ++j) pos.push_back(j);
  }
  return pos;
}

}  // namespace natf
