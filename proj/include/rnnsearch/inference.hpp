// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "rnnsearch/error.hpp"
#include "rnnsearch/model.hpp"
#include "rnnsearch/text_data.hpp"

namespace rnnsearch {

template <typename Real>
struct Hypothesis {
  IdSequence tokens;
  double log_prob = 0;
  Tensor<Real> state;                      // 1 x n decoder state after the last token
  std::vector<std::vector<Real>> alphas;   // one attention row per emitted token
  bool has_alignment = false;              // false for fixed-context decoding

  bool finished() const { return !tokens.empty() && tokens.back() == kEosId; }
};

/// T_y x T_x attention weights, one row per target step.
struct AlignmentMatrix {
  std::size_t target_len = 0;
  std::size_t source_len = 0;
  std::vector<double> weights;

  double operator()(std::size_t i, std::size_t j) const { return weights[i * source_len + j]; }
};

template <typename Real>
struct BeamResult {
  Hypothesis<Real> best;
  std::vector<Hypothesis<Real>> top;  // finished by score, then unfinished by score
};

namespace detail {

template <typename Real>
Tensor<Real> stack_states(const std::vector<Hypothesis<Real>>& hyps) {
  Tensor<Real> s(hyps.size(), hyps.front().state.cols());
  for (std::size_t h = 0; h < hyps.size(); ++h)
    std::copy(hyps[h].state.row(0).begin(), hyps[h].state.row(0).end(), s.row(h).begin());
  return s;
}

template <typename Real>
Tensor<Real> row_of(const Tensor<Real>& t, std::size_t r) {
  Tensor<Real> out(1, t.cols());
  std::copy(t.row(r).begin(), t.row(r).end(), out.row(0).begin());
  return out;
}

inline void check_source(const IdSequence& source) {
  if (source.empty()) throw DataError("decode: empty source sentence");
}

}  // namespace detail

/// Argmax decoding (ties to the lower id) until EOS or `max_len` tokens.
template <typename Real>
Hypothesis<Real> greedy_decode(const ModelParams<Real>& params, ContextMode mode, const IdSequence& source,
                               std::size_t max_len, bool forbid_unk = false) {
  if (max_len == 0) throw std::invalid_argument("greedy_decode: max_len must be positive");
  detail::check_source(source);
  DecoderSession<Real> session(params, mode, source);
  Hypothesis<Real> h;
  h.state = session.initial_state();
  h.has_alignment = mode == ContextMode::attention;
  int prev = -1;
  for (std::size_t step = 0; step < max_len; ++step) {
    auto out = session.step(h.state, {prev});
    int best = -1;
    for (std::size_t w = 0; w < out.log_probs.cols(); ++w) {
      if (forbid_unk && static_cast<int>(w) == kUnkId) continue;
      if (best < 0 || out.log_probs(0, w) > out.log_probs(0, static_cast<std::size_t>(best))) {
        best = static_cast<int>(w);
      }
    }
    h.tokens.push_back(best);
    h.log_prob += static_cast<double>(out.log_probs(0, static_cast<std::size_t>(best)));
    if (h.has_alignment) h.alphas.emplace_back(out.alpha.row(0).begin(), out.alpha.row(0).end());
    h.state = out.next_state;
    prev = best;
    if (best == kEosId) break;
  }
  return h;
}

/// Beam search without length normalisation. Finished hypotheses leave the
/// beam and shrink its width; ranking ties go to the lower token id, then to
/// the higher-ranked parent.
template <typename Real>
BeamResult<Real> beam_search(const ModelParams<Real>& params, ContextMode mode, const IdSequence& source,
                             std::size_t width, std::size_t max_len, bool forbid_unk = false) {
  if (width == 0) throw std::invalid_argument("beam_search: width must be positive");
  if (max_len == 0) throw std::invalid_argument("beam_search: max_len must be positive");
  detail::check_source(source);
  DecoderSession<Real> session(params, mode, source);

  struct Candidate {
    double score;
    int token;
    std::size_t parent;
  };
  auto better = [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.token != b.token) return a.token < b.token;
    return a.parent < b.parent;
  };

  std::vector<Hypothesis<Real>> live(1), done;
  live[0].state = session.initial_state();
  live[0].has_alignment = mode == ContextMode::attention;

  for (std::size_t step = 0; step < max_len && !live.empty() && done.size() < width; ++step) {
    std::vector<int> prev(live.size());
    for (std::size_t h = 0; h < live.size(); ++h) prev[h] = live[h].tokens.empty() ? -1 : live[h].tokens.back();
    auto out = session.step(detail::stack_states(live), prev);

    std::vector<Candidate> cands;
    cands.reserve(live.size() * out.log_probs.cols());
    for (std::size_t h = 0; h < live.size(); ++h) {
      for (std::size_t w = 0; w < out.log_probs.cols(); ++w) {
        if (forbid_unk && static_cast<int>(w) == kUnkId) continue;
        cands.push_back({live[h].log_prob + static_cast<double>(out.log_probs(h, w)), static_cast<int>(w), h});
      }
    }
    const std::size_t slots = std::min(width - done.size(), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(slots), cands.end(), better);

    std::vector<Hypothesis<Real>> next;
    for (std::size_t c = 0; c < slots; ++c) {
      const auto& cand = cands[c];
      const auto& parent = live[cand.parent];
      Hypothesis<Real> h;
      h.tokens = parent.tokens;
      h.tokens.push_back(cand.token);
      h.log_prob = cand.score;
      h.state = detail::row_of(out.next_state, cand.parent);
      h.has_alignment = parent.has_alignment;
      h.alphas = parent.alphas;
      if (h.has_alignment) {
        h.alphas.emplace_back(out.alpha.row(cand.parent).begin(), out.alpha.row(cand.parent).end());
      }
      (cand.token == kEosId ? done : next).push_back(std::move(h));
    }
    live = std::move(next);
    // extensions only lose log-probability, so nothing live can overtake this
    if (!done.empty() && !live.empty()) {
      double best_done = -std::numeric_limits<double>::infinity();
      for (const auto& d : done) best_done = std::max(best_done, d.log_prob);
      bool any_better = false;
      for (const auto& h : live) any_better = any_better || h.log_prob > best_done;
      if (!any_better) break;
    }
  }

  auto by_score = [](const Hypothesis<Real>& a, const Hypothesis<Real>& b) { return a.log_prob > b.log_prob; };
  std::stable_sort(done.begin(), done.end(), by_score);
  std::stable_sort(live.begin(), live.end(), by_score);
  BeamResult<Real> r;
  r.top = done;
  r.top.insert(r.top.end(), live.begin(), live.end());
  r.best = r.top.front();
  return r;
}

/// Stacked attention rows of a hypothesis.
template <typename Real>
AlignmentMatrix extract_alignment(const Hypothesis<Real>& h) {
  if (!h.has_alignment) {
    throw UsageError("extract_alignment: hypothesis comes from fixed-context decoding and has no alignment");
  }
  AlignmentMatrix a;
  a.target_len = h.alphas.size();
  a.source_len = h.alphas.empty() ? 0 : h.alphas.front().size();
  for (const auto& row : h.alphas)
    for (const Real v : row) a.weights.push_back(static_cast<double>(v));
  return a;
}

/// Teacher-forced attention weights for a known (source, target) pair.
template <typename Real>
AlignmentMatrix forced_alignment(const ModelParams<Real>& params, const IdSequence& source,
                                 const IdSequence& target) {
  ag::Tape<Real> tape;
  auto p = bind(tape, params);
  auto g = build_nll(p, ContextMode::attention, make_batch({source}, {target}));
  AlignmentMatrix a;
  a.target_len = g.alphas.size();
  a.source_len = source.size();
  for (const auto& row : g.alphas)
    for (const Real v : row.value().span()) a.weights.push_back(static_cast<double>(v));
  return a;
}

/// Sum of teacher-forced log-probabilities of `target` (which ends in EOS).
template <typename Real>
double score_sequence(const ModelParams<Real>& params, ContextMode mode, const IdSequence& source,
                      const IdSequence& target) {
  return -forward_nll(params, mode, make_batch({source}, {target})).per_sentence.at(0);
}

inline void write_alignment_tsv(const AlignmentMatrix& a, std::ostream& os) {
  os << std::setprecision(10);
  for (std::size_t i = 0; i < a.target_len; ++i) {
    for (std::size_t j = 0; j < a.source_len; ++j) os << (j ? "\t" : "") << a(i, j);
    os << '\n';
  }
}

/// Binary greymap, width T_x, height T_y; weight 1 is white.
inline void write_alignment_pgm(const AlignmentMatrix& a, std::ostream& os) {
  os << "P5\n" << a.source_len << ' ' << a.target_len << "\n255\n";
  for (const double w : a.weights) {
    const long v = std::lround(255.0 * std::clamp(w, 0.0, 1.0));
    os.put(static_cast<char>(static_cast<unsigned char>(v)));
  }
}

inline void save_alignment(const AlignmentMatrix& a, const std::filesystem::path& prefix) {
  auto tsv = prefix;
  tsv += ".tsv";
  auto pgm = prefix;
  pgm += ".pgm";
  std::ofstream t(tsv, std::ios::binary), p(pgm, std::ios::binary);
  if (!t || !p) throw DataError(detail::concat("cannot write alignment files with prefix ", prefix.string()));
  write_alignment_tsv(a, t);
  write_alignment_pgm(a, p);
  if (!t || !p) throw DataError(detail::concat("failed writing alignment files with prefix ", prefix.string()));
}

}  // namespace rnnsearch
