// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rnnsearch/error.hpp"
#include "rnnsearch/random.hpp"

namespace rnnsearch {

using Sentence = std::vector<std::string>;
using IdSequence = std::vector<int>;

inline constexpr int kEosId = 0;
inline constexpr int kUnkId = 1;
inline constexpr const char* kEosToken = "</s>";
inline constexpr const char* kUnkToken = "<unk>";

/// Token <-> id map. Ids 0 and 1 are the reserved end-of-sentence and
/// unknown-word symbols; shortlisted tokens follow from id 2.
class Vocabulary {
 public:
  Vocabulary() : tokens_{kEosToken, kUnkToken} {}

  explicit Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
    for (const auto& t : tokens) add(t);
  }

  std::size_t size() const noexcept { return tokens_.size(); }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw std::out_of_range(detail::concat("Vocabulary: id ", id, " out of range"));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  /// Shortlisted tokens in id order (ids 2, 3, ...).
  std::vector<std::string> regular_tokens() const {
    return {tokens_.begin() + 2, tokens_.end()};
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(const std::string& token) {
    if (token.empty() || token == kEosToken || token == kUnkToken) {
      throw DataError(detail::concat("Vocabulary: token '", token, "' is reserved or empty"));
    }
    if (!ids_.emplace(token, static_cast<int>(tokens_.size())).second) {
      throw DataError(detail::concat("Vocabulary: duplicate token '", token, "'"));
    }
    tokens_.push_back(token);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

/// Shortlist of the `k` most frequent tokens; ties go to the lexicographically
/// smaller token. Reserved spellings are never shortlisted.
inline Vocabulary build_vocab(const std::vector<Sentence>& sentences, std::size_t k) {
  if (k == 0) throw std::invalid_argument("build_vocab: shortlist size must be at least 1");
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& s : sentences) {
    for (const auto& t : s) {
      ++total;
      if (t != kEosToken && t != kUnkToken) ++counts[t];
    }
  }
  if (total == 0) throw DataError("build_vocab: empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > k) ranked.resize(k);
  std::vector<std::string> tokens;
  tokens.reserve(ranked.size());
  for (auto& [tok, _] : ranked) tokens.push_back(tok);
  return Vocabulary(tokens);
}

/// Ids with UNK substitution and a trailing EOS.
inline IdSequence encode_sentence(const Vocabulary& v, const Sentence& tokens) {
  if (tokens.empty()) throw DataError("encode_sentence: empty sentence");
  IdSequence ids;
  ids.reserve(tokens.size() + 1);
  for (const auto& t : tokens) ids.push_back(v.id(t));
  ids.push_back(kEosId);
  return ids;
}

/// Tokens up to (not including) the first EOS.
inline Sentence decode_sentence(const Vocabulary& v, const IdSequence& ids) {
  Sentence out;
  for (const int id : ids) {
    if (id == kEosId) break;
    out.push_back(v.token(id));
  }
  return out;
}

inline void save_vocab(const Vocabulary& v, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(detail::concat("cannot write vocabulary file ", path.string()));
  for (const auto& t : v.regular_tokens()) out << t << '\n';
  if (!out) throw DataError(detail::concat("failed writing vocabulary file ", path.string()));
}

/// One token per line; line k (1-based) gets id k + 1.
inline Vocabulary load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(detail::concat("cannot open vocabulary file ", path.string()));
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocabulary(tokens);
}

struct Corpus {
  std::vector<Sentence> source;
  std::vector<Sentence> target;

  std::size_t size() const noexcept { return source.size(); }

  void add(Sentence src, Sentence tgt) {
    if (src.empty() || tgt.empty()) throw DataError("Corpus: empty sentence");
    source.push_back(std::move(src));
    target.push_back(std::move(tgt));
  }
};

/// Drop pairs whose source or target has more than `max_len` tokens (0 keeps all).
inline Corpus filter_by_length(const Corpus& c, std::size_t max_len) {
  if (max_len == 0) return c;
  Corpus out;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c.source[i].size() <= max_len && c.target[i].size() <= max_len) {
      out.add(c.source[i], c.target[i]);
    }
  }
  return out;
}

namespace detail {

inline std::vector<Sentence> read_tokenized_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(concat("cannot open corpus file ", path.string()));
  std::vector<Sentence> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    Sentence s;
    for (std::string tok; ss >> tok;) s.push_back(std::move(tok));
    if (s.empty()) throw DataError(concat(path.string(), ":", out.size() + 1, ": empty line"));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

inline Corpus load_parallel(const std::filesystem::path& source_path,
                            const std::filesystem::path& target_path) {
  auto src = detail::read_tokenized_lines(source_path);
  auto tgt = detail::read_tokenized_lines(target_path);
  if (src.size() != tgt.size()) {
    throw DataError(detail::concat("line count mismatch: ", source_path.string(), " has ",
                                   src.size(), " lines, ", target_path.string(), " has ",
                                   tgt.size()));
  }
  Corpus c;
  c.source = std::move(src);
  c.target = std::move(tgt);
  return c;
}

inline void write_lines(const std::vector<Sentence>& sentences, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(detail::concat("cannot write ", path.string()));
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? " " : "") << s[i];
    out << '\n';
  }
  if (!out) throw DataError(detail::concat("failed writing ", path.string()));
}

enum class SyntheticTask { copy, reverse };

/// n pairs of uniform random sequences over tokens t0..t{vocab_size-1}; the
/// target is the source itself (copy) or reversed (reverse).
inline Corpus gen_synthetic(SyntheticTask task, std::size_t vocab_size, std::size_t min_len,
                            std::size_t max_len, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("gen_synthetic: n must be positive");
  if (vocab_size < 2) throw std::invalid_argument("gen_synthetic: vocab_size must be at least 2");
  if (min_len == 0 || min_len > max_len) {
    throw std::invalid_argument("gen_synthetic: empty length range");
  }
  Rng rng(seed);
  Corpus c;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = min_len + rng.uniform_index(max_len - min_len + 1);
    Sentence src(len);
    for (auto& t : src) t = "t" + std::to_string(rng.uniform_index(vocab_size));
    Sentence tgt = src;
    if (task == SyntheticTask::reverse) std::reverse(tgt.begin(), tgt.end());
    c.add(std::move(src), std::move(tgt));
  }
  return c;
}

/// Sentence pairs as id sequences (each ending in EOS).
struct EncodedCorpus {
  std::vector<IdSequence> source;
  std::vector<IdSequence> target;
  std::size_t size() const noexcept { return source.size(); }
};

inline EncodedCorpus encode_corpus(const Corpus& c, const Vocabulary& src_vocab,
                                   const Vocabulary& tgt_vocab) {
  EncodedCorpus e;
  e.source.reserve(c.size());
  e.target.reserve(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    e.source.push_back(encode_sentence(src_vocab, c.source[i]));
    e.target.push_back(encode_sentence(tgt_vocab, c.target[i]));
  }
  return e;
}

/// Padded minibatch, one sentence per row. Padding carries the EOS id with
/// mask 0; real tokens (including the terminal EOS) have mask 1.
struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<int> source;  // size x src_len
  std::vector<int> target;  // size x tgt_len
  std::vector<std::uint8_t> source_mask;
  std::vector<std::uint8_t> target_mask;

  int src(std::size_t b, std::size_t t) const { return source[b * src_len + t]; }
  int tgt(std::size_t b, std::size_t t) const { return target[b * tgt_len + t]; }
  bool src_real(std::size_t b, std::size_t t) const { return source_mask[b * src_len + t] != 0; }
  bool tgt_real(std::size_t b, std::size_t t) const { return target_mask[b * tgt_len + t] != 0; }

  std::size_t source_length(std::size_t b) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < src_len; ++t) n += src_real(b, t);
    return n;
  }
  std::size_t target_length(std::size_t b) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < tgt_len; ++t) n += tgt_real(b, t);
    return n;
  }
};

/// Pack pairs into one batch. `min_src_len`/`min_tgt_len` widen the padding.
inline Batch make_batch(const std::vector<IdSequence>& sources, const std::vector<IdSequence>& targets,
                        std::size_t min_src_len = 0, std::size_t min_tgt_len = 0) {
  if (sources.size() != targets.size() || sources.empty()) {
    throw std::invalid_argument("make_batch: need equal, nonzero numbers of sources and targets");
  }
  Batch b;
  b.size = sources.size();
  b.src_len = min_src_len;
  b.tgt_len = min_tgt_len;
  for (std::size_t i = 0; i < b.size; ++i) {
    if (sources[i].empty() || targets[i].empty()) throw DataError("make_batch: empty sequence");
    if (sources[i].back() != kEosId || targets[i].back() != kEosId) {
      throw DataError("make_batch: sequences must end with EOS");
    }
    b.src_len = std::max(b.src_len, sources[i].size());
    b.tgt_len = std::max(b.tgt_len, targets[i].size());
  }
  b.source.assign(b.size * b.src_len, kEosId);
  b.target.assign(b.size * b.tgt_len, kEosId);
  b.source_mask.assign(b.size * b.src_len, 0);
  b.target_mask.assign(b.size * b.tgt_len, 0);
  for (std::size_t i = 0; i < b.size; ++i) {
    for (std::size_t t = 0; t < sources[i].size(); ++t) {
      b.source[i * b.src_len + t] = sources[i][t];
      b.source_mask[i * b.src_len + t] = 1;
    }
    for (std::size_t t = 0; t < targets[i].size(); ++t) {
      b.target[i * b.tgt_len + t] = targets[i][t];
      b.target_mask[i * b.tgt_len + t] = 1;
    }
  }
  return b;
}

/// One epoch of minibatches: shuffle, take consecutive buckets of `bucket`
/// pairs, sort each by source length, split into `bucket / batch` minibatches.
inline std::vector<Batch> make_batches(const EncodedCorpus& c, std::size_t batch, std::size_t bucket,
                                       Rng& rng) {
  if (batch == 0) throw std::invalid_argument("make_batches: batch size must be positive");
  if (bucket == 0 || bucket % batch != 0) {
    throw std::invalid_argument(
        detail::concat("make_batches: batch size ", batch, " must divide bucket size ", bucket));
  }
  std::vector<std::size_t> order(c.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());

  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += bucket) {
    const std::size_t end = std::min(order.size(), start + bucket);
    std::vector<std::size_t> chunk(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
    std::stable_sort(chunk.begin(), chunk.end(), [&](std::size_t a, std::size_t b) {
      return c.source[a].size() < c.source[b].size();
    });
    for (std::size_t m = 0; m < chunk.size(); m += batch) {
      std::vector<IdSequence> src, tgt;
      for (std::size_t k = m; k < std::min(chunk.size(), m + batch); ++k) {
        src.push_back(c.source[chunk[k]]);
        tgt.push_back(c.target[chunk[k]]);
      }
      out.push_back(make_batch(src, tgt));
    }
  }
  return out;
}

}  // namespace rnnsearch
