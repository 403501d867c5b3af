// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "rnnsearch/error.hpp"
#include "rnnsearch/inference.hpp"
#include "rnnsearch/model.hpp"
#include "rnnsearch/text_data.hpp"

namespace rnnsearch {

struct BleuReport {
  double bleu = 0;
  std::vector<double> precisions;  // p_1 .. p_N
  std::vector<std::size_t> matches;
  std::vector<std::size_t> totals;
  double brevity_penalty = 0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
};

/// Corpus BLEU, single reference, no smoothing: clipped n-gram counts are
/// summed over the corpus before forming precisions.
template <typename Token>
BleuReport bleu(const std::vector<std::vector<Token>>& candidates,
                const std::vector<std::vector<Token>>& references, std::size_t max_n = 4) {
  if (candidates.empty()) throw DataError("bleu: empty corpus");
  if (candidates.size() != references.size()) {
    throw DataError(detail::concat("bleu: ", candidates.size(), " candidates but ", references.size(),
                                   " references"));
  }
  if (max_n == 0) throw std::invalid_argument("bleu: max_n must be positive");
  BleuReport r;
  r.matches.assign(max_n, 0);
  r.totals.assign(max_n, 0);
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const auto& c = candidates[s];
    const auto& ref = references[s];
    r.candidate_length += c.size();
    r.reference_length += ref.size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      if (c.size() < n) continue;
      std::map<std::vector<Token>, std::size_t> ref_counts, cand_counts;
      for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[{ref.begin() + i, ref.begin() + i + n}];
      for (std::size_t i = 0; i + n <= c.size(); ++i) ++cand_counts[{c.begin() + i, c.begin() + i + n}];
      r.totals[n - 1] += c.size() - n + 1;
      for (const auto& [gram, count] : cand_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) r.matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  double log_sum = 0;
  bool any_zero = false;
  for (std::size_t n = 0; n < max_n; ++n) {
    const double p = r.totals[n] == 0 ? 0.0 : double(r.matches[n]) / double(r.totals[n]);
    r.precisions.push_back(p);
    if (p == 0) any_zero = true; else log_sum += std::log(p);
  }
  if (r.candidate_length == 0) {
    r.brevity_penalty = 0;
  } else if (r.candidate_length < r.reference_length) {
    r.brevity_penalty = std::exp(1.0 - double(r.reference_length) / double(r.candidate_length));
  } else {
    r.brevity_penalty = 1;
  }
  r.bleu = any_zero ? 0.0 : r.brevity_penalty * std::exp(log_sum / double(max_n));
  return r;
}

inline IdSequence strip_eos(const IdSequence& ids) {
  auto end = std::find(ids.begin(), ids.end(), kEosId);
  return {ids.begin(), end};
}

/// Positionwise matches over the longer length; two empty sequences score 1.
template <typename Token>
double token_accuracy(const std::vector<Token>& candidate, const std::vector<Token>& reference) {
  const std::size_t longest = std::max(candidate.size(), reference.size());
  if (longest == 0) return 1.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(candidate.size(), reference.size()); ++i) hits += candidate[i] == reference[i];
  return double(hits) / double(longest);
}

/// Id-sequence overload: everything from the first EOS on is ignored.
inline double token_accuracy(const IdSequence& candidate, const IdSequence& reference) {
  return token_accuracy<int>(strip_eos(candidate), strip_eos(reference));
}

enum class LengthMetric { bleu, token_accuracy };

struct LengthBin {
  std::size_t low = 0;
  std::size_t high = 0;  // inclusive
  std::size_t count = 0;
  double score = std::numeric_limits<double>::quiet_NaN();
};

struct LengthCurve {
  std::vector<LengthBin> bins;
};

struct DecodeOptions {
  std::size_t beam = 12;
  bool forbid_unk = false;
  std::size_t max_len = 0;  // 0: 2 * source length + 10
};

/// Bins from inclusive upper edges: (prev + 1 .. edge]. Lengths above the
/// last edge fall into one extra bin so counts always cover the corpus.
inline std::vector<LengthBin> make_bins(const std::vector<std::size_t>& upper_edges, std::size_t longest) {
  if (upper_edges.empty()) throw UsageError("score_by_length: no bins");
  std::vector<LengthBin> bins;
  std::size_t low = 1;
  for (const auto e : upper_edges) {
    if (e < low) throw UsageError("score_by_length: bin edges must be strictly increasing and positive");
    bins.push_back({low, e, 0, std::numeric_limits<double>::quiet_NaN()});
    low = e + 1;
  }
  if (longest >= low) bins.push_back({low, longest, 0, std::numeric_limits<double>::quiet_NaN()});
  return bins;
}

/// Groups sentence pairs by source length and scores each group. Token
/// accuracy is averaged per sentence; BLEU is computed over each bin's
/// sentences as a corpus.
template <typename Token>
LengthCurve length_curve(const std::vector<std::size_t>& source_lengths,
                         const std::vector<std::vector<Token>>& candidates,
                         const std::vector<std::vector<Token>>& references,
                         const std::vector<std::size_t>& upper_edges, LengthMetric metric) {
  if (source_lengths.empty()) throw DataError("score_by_length: empty corpus");
  if (candidates.size() != source_lengths.size() || references.size() != source_lengths.size()) {
    throw DataError(detail::concat("score_by_length: ", source_lengths.size(), " sources, ", candidates.size(),
                                   " candidates, ", references.size(), " references"));
  }
  const std::size_t longest = *std::max_element(source_lengths.begin(), source_lengths.end());
  LengthCurve curve{make_bins(upper_edges, longest)};

  std::vector<std::vector<std::vector<Token>>> hyps(curve.bins.size()), refs(curve.bins.size());
  std::vector<double> acc_sum(curve.bins.size(), 0.0);
  for (std::size_t i = 0; i < source_lengths.size(); ++i) {
    const std::size_t len = source_lengths[i];
    auto bin = std::find_if(curve.bins.begin(), curve.bins.end(),
                            [&](const LengthBin& b) { return len >= b.low && len <= b.high; });
    if (bin == curve.bins.end()) throw DataError(detail::concat("score_by_length: sentence ", i, " has length 0"));
    const auto k = static_cast<std::size_t>(bin - curve.bins.begin());
    ++bin->count;
    acc_sum[k] += token_accuracy(candidates[i], references[i]);
    hyps[k].push_back(candidates[i]);
    refs[k].push_back(references[i]);
  }
  for (std::size_t k = 0; k < curve.bins.size(); ++k) {
    auto& b = curve.bins[k];
    if (b.count == 0) continue;
    b.score = metric == LengthMetric::token_accuracy ? acc_sum[k] / double(b.count) : bleu(hyps[k], refs[k]).bleu;
  }
  return curve;
}

/// Beam-decodes every source sentence. Returned outputs have EOS stripped.
template <typename Real>
std::vector<IdSequence> decode_corpus(const ModelParams<Real>& params, ContextMode mode,
                                      const std::vector<IdSequence>& sources, const DecodeOptions& opts = {}) {
  std::vector<IdSequence> out;
  out.reserve(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const std::size_t len = strip_eos(sources[i]).size();
    const std::size_t max_len = opts.max_len ? opts.max_len : 2 * len + 10;
    try {
      out.push_back(strip_eos(beam_search(params, mode, sources[i], opts.beam, max_len, opts.forbid_unk).best.tokens));
    } catch (const std::exception& e) {
      throw DataError(detail::concat("decode: sentence ", i, ": ", e.what()));
    }
  }
  return out;
}

/// Metric of decoded outputs against references, grouped by source length
/// (tokens, EOS excluded).
template <typename Real>
LengthCurve score_by_length(const ModelParams<Real>& params, ContextMode mode, const EncodedCorpus& test,
                            const std::vector<std::size_t>& upper_edges, LengthMetric metric,
                            const DecodeOptions& opts = {}) {
  if (test.size() == 0) throw DataError("score_by_length: empty corpus");
  if (upper_edges.empty()) throw UsageError("score_by_length: no bins");
  const auto outputs = decode_corpus(params, mode, test.source, opts);
  std::vector<std::size_t> lengths;
  std::vector<IdSequence> refs;
  for (std::size_t i = 0; i < test.size(); ++i) {
    lengths.push_back(strip_eos(test.source[i]).size());
    refs.push_back(strip_eos(test.target[i]));
  }
  return length_curve(lengths, outputs, refs, upper_edges, metric);
}

inline void write_curve_tsv(const LengthCurve& c, std::ostream& os) {
  os << "bin_low\tbin_high\tcount\tscore\n";
  for (const auto& b : c.bins) {
    os << b.low << '\t' << b.high << '\t' << b.count << '\t';
    if (b.count == 0) os << "NA"; else os << b.score;
    os << '\n';
  }
}

inline void write_bleu_report(const BleuReport& r, std::ostream& os) {
  os << "BLEU\t" << r.bleu << '\n';
  for (std::size_t n = 0; n < r.precisions.size(); ++n) {
    os << "p" << n + 1 << '\t' << r.precisions[n] << '\t' << r.matches[n] << '/' << r.totals[n] << '\n';
  }
  os << "BP\t" << r.brevity_penalty << '\n';
  os << "candidate_length\t" << r.candidate_length << '\n';
  os << "reference_length\t" << r.reference_length << '\n';
}

}  // namespace rnnsearch
