#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "natf/error.hpp"
#include "natf/token.hpp"

namespace natf {

// Whitespace-token vocabulary. Ids 0..3 are pad, bos, eos, unk; the rest are
// ordered by descending frequency, ties broken lexicographically.
class Vocab {
 public:
  Vocab() : tokens_{"<pad>", "<s>", "</s>", "<unk>"} { reindex(); }

  static Vocab build(const std::vector<std::vector<std::string>>& sentences, std::size_t min_count = 1,
                     std::size_t max_size = 0) {
    std::map<std::string, std::size_t> counts;
    for (const auto& s : sentences) {
      for (const auto& w : s) ++counts[w];
    }
    Vocab v;
    std::vector<std::pair<std::string, std::size_t>> items;
    for (const auto& [w, c] : counts) {
      if (c >= min_count && !v.contains(w)) items.emplace_back(w, c);
    }
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    for (const auto& [w, c] : items) {
      if (max_size != 0 && v.size() >= max_size) break;
      v.tokens_.push_back(w);
    }
    v.reindex();
    return v;
  }

  static Vocab from_tokens(std::vector<std::string> tokens) {
    Vocab v;
    if (tokens.size() < kNumReserved) {
      throw DataError("vocab: fewer entries than reserved tokens");
    }
    for (std::size_t i = 0; i < kNumReserved; ++i) {
      if (tokens[i] != v.tokens_[i]) {
        throw DataError("vocab: entry " + std::to_string(i) + " must be " + v.tokens_[i] + ", found " + tokens[i]);
      }
    }
    v.tokens_ = std::move(tokens);
    v.reindex();
    return v;
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocab file " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return from_tokens(std::move(tokens));
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocab file " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  TokenId id(const std::string& token) const {
    const auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw UsageError("vocab: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  TokenSeq encode(const std::vector<std::string>& words) const {
    std::vector<TokenId> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(id(w));
    return TokenSeq(std::move(ids));
  }

  std::string decode(const TokenSeq& seq) const {
    std::string out;
    for (const TokenId t : seq.tokens()) {
      if (t == kPad || t == kBos || t == kEos) continue;
      if (!out.empty()) out += ' ';
      out += token(t);
    }
    return out;
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
        throw DataError("vocab: duplicate token " + tokens_[i]);
      }
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

inline std::vector<std::string> split_words(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

}  // namespace natf
