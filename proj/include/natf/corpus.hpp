#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "natf/error.hpp"
#include "natf/token.hpp"
#include "natf/vocab.hpp"

namespace natf {

using Sentence = std::vector<std::string>;

struct TextCorpus {
  std::vector<Sentence> source;
  std::vector<Sentence> target;

  std::size_t size() const noexcept { return source.size(); }
};

inline std::vector<Sentence> read_sentences(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file " + path);
  std::vector<Sentence> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(split_words(line));
  return out;
}

inline void write_sentences(const std::string& path, const std::vector<Sentence>& sentences) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? " " : "") << s[i];
    out << '\n';
  }
}

// Reads <prefix>.src and <prefix>.tgt.
inline TextCorpus load_corpus(const std::string& prefix) {
  TextCorpus c;
  c.source = read_sentences(prefix + ".src");
  c.target = read_sentences(prefix + ".tgt");
  if (c.source.size() != c.target.size()) {
    throw DataError("corpus " + prefix + ": " + std::to_string(c.source.size()) + " source lines but " +
                    std::to_string(c.target.size()) + " target lines");
  }
  return c;
}

inline void save_corpus(const std::string& prefix, const TextCorpus& c) {
  write_sentences(prefix + ".src", c.source);
  write_sentences(prefix + ".tgt", c.target);
}

// Pairs with an empty side are dropped; `dropped` receives their count.
inline ParallelCorpus encode_corpus(const TextCorpus& c, const Vocab& src, const Vocab& tgt,
                                    std::size_t* dropped = nullptr) {
  ParallelCorpus out;
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c.source[i].empty() || c.target[i].empty()) {
      ++skipped;
      continue;
    }
    out.push_back({src.encode(c.source[i]), tgt.encode(c.target[i])});
  }
  if (dropped) *dropped = skipped;
  return out;
}

inline std::vector<Sentence> decode_all(const std::vector<TokenSeq>& seqs, const Vocab& v) {
  std::vector<Sentence> out;
  for (const auto& s : seqs) out.push_back(split_words(v.decode(s)));
  return out;
}

}  // namespace natf
