// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rnnsearch/autograd.hpp"
#include "rnnsearch/error.hpp"
#include "rnnsearch/model.hpp"
#include "rnnsearch/text_data.hpp"

namespace rnnsearch {

/// Global L2 norm over every gradient tensor jointly.
template <typename Real>
double global_norm(const ag::GradientSet<Real>& grads) {
  double sq = 0;
  for (const auto& [name, g] : grads) {
    for (const Real v : g.span()) {
      if (!std::isfinite(v)) throw NumericError(detail::concat("non-finite gradient for ", name));
      sq += static_cast<double>(v) * static_cast<double>(v);
    }
  }
  return std::sqrt(sq);
}

/// Rescale the whole set to norm `threshold` when its norm exceeds it.
template <typename Real>
ag::GradientSet<Real> clip_gradients(ag::GradientSet<Real> grads, double threshold = 1.0) {
  if (!(threshold > 0)) throw std::invalid_argument("clip_gradients: threshold must be positive");
  const double norm = global_norm(grads);
  if (norm > threshold) {
    const double factor = threshold / norm;
    for (auto& [_, g] : grads)
      for (auto& v : g.span()) v = static_cast<Real>(static_cast<double>(v) * factor);
  }
  return grads;
}

/// Running averages E[g^2] and E[dx^2] per parameter.
template <typename Real>
struct OptimizerState {
  double rho = 0.95;
  double epsilon = 1e-6;
  std::vector<Tensor<Real>> mean_sq_grad;   // indexed by Param
  std::vector<Tensor<Real>> mean_sq_delta;  // indexed by Param

  static OptimizerState zeros_like(const ModelParams<Real>& p, double rho = 0.95, double eps = 1e-6) {
    OptimizerState s;
    s.rho = rho;
    s.epsilon = eps;
    for (const auto& t : p.tensors) {
      s.mean_sq_grad.emplace_back(t.rows(), t.cols());
      s.mean_sq_delta.emplace_back(t.rows(), t.cols());
    }
    return s;
  }

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// One Adadelta step on a single tensor.
template <typename Real>
void adadelta_update(Tensor<Real>& param, const Tensor<Real>& grad, Tensor<Real>& mean_sq_grad,
                     Tensor<Real>& mean_sq_delta, double rho, double eps) {
  if (!param.same_shape(grad) || !param.same_shape(mean_sq_grad) || !param.same_shape(mean_sq_delta)) {
    throw std::invalid_argument(detail::concat("adadelta_update: shape mismatch (param ",
                                               param.shape_string(), ", grad ", grad.shape_string(), ")"));
  }
  for (std::size_t k = 0; k < param.size(); ++k) {
    const double g = grad[k];
    const double eg = rho * mean_sq_grad[k] + (1 - rho) * g * g;
    const double delta = -std::sqrt(mean_sq_delta[k] + eps) / std::sqrt(eg + eps) * g;
    mean_sq_grad[k] = static_cast<Real>(eg);
    mean_sq_delta[k] = static_cast<Real>(rho * mean_sq_delta[k] + (1 - rho) * delta * delta);
    param[k] = static_cast<Real>(param[k] + delta);
  }
}

template <typename Real>
void adadelta_update(OptimizerState<Real>& state, ModelParams<Real>& params,
                     const ag::GradientSet<Real>& grads) {
  if (state.mean_sq_grad.size() != kParamCount) throw std::invalid_argument("adadelta_update: bad state");
  for (std::size_t i = 0; i < kParamCount; ++i) {
    auto it = grads.find(std::string(kParamNames[i]));
    if (it == grads.end()) {
      throw std::invalid_argument(detail::concat("adadelta_update: no gradient for ", kParamNames[i]));
    }
    adadelta_update(params.tensors[i], it->second, state.mean_sq_grad[i], state.mean_sq_delta[i],
                    state.rho, state.epsilon);
  }
}

struct TrainConfig {
  ModelDims dims;  // vocab sizes are filled from the vocabularies
  ContextMode mode = ContextMode::attention;
  std::size_t batch = 80;
  std::size_t bucket = 1600;
  double clip = 1.0;
  double rho = 0.95;
  double epsilon = 1e-6;
  std::size_t epochs = 10;
  std::optional<std::size_t> max_updates;  // total update budget
  std::size_t dev_interval = 0;            // in updates; 0 = once per epoch
  std::uint64_t seed = 1234;
};

/// One row per dev evaluation (and per epoch end).
struct TrainRecord {
  std::size_t updates = 0;
  double epochs = 0;
  double seconds = 0;
  double train_nll = 0;        // mean per sentence since the previous record
  double train_nll_token = 0;  // per target token since the previous record
  std::optional<double> dev_nll;

  bool same_numbers(const TrainRecord& o) const {
    return updates == o.updates && epochs == o.epochs && train_nll == o.train_nll &&
           train_nll_token == o.train_nll_token && dev_nll == o.dev_nll;
  }
};

struct TrainLog {
  std::vector<TrainRecord> records;
  std::size_t best_index = 0;  // record whose parameters were kept
};

inline void write_log_header(std::ostream& os) {
  os << "update\tepoch\tseconds\ttrain_nll\ttrain_nll_token\tdev_nll\n";
}

inline void write_log_row(std::ostream& os, const TrainRecord& r) {
  os << r.updates << '\t' << r.epochs << '\t' << r.seconds << '\t' << r.train_nll << '\t'
     << r.train_nll_token << '\t';
  if (r.dev_nll) os << *r.dev_nll; else os << "NA";
  os << '\n';
}

template <typename Real>
struct TrainResult {
  ModelParams<Real> best;
  ModelParams<Real> last;
  OptimizerState<Real> optimizer;
  TrainLog log;
};

template <typename Real>
struct TrainCallbacks {
  std::function<void(const TrainRecord&)> on_record;
  // Called whenever the kept (best) parameters change.
  std::function<void(const ModelParams<Real>&, const OptimizerState<Real>&)> on_best;
  // Returning true after a record ends training early.
  std::function<bool(const TrainRecord&)> should_stop;
};

/// Mean per-sentence NLL over a corpus, in length-sorted batches of `batch`.
template <typename Real>
double corpus_nll(const ModelParams<Real>& params, ContextMode mode, const EncodedCorpus& c,
                  std::size_t batch = 80) {
  if (c.size() == 0) throw DataError("corpus_nll: empty corpus");
  std::vector<std::size_t> order(c.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return c.source[a].size() < c.source[b].size(); });
  double total = 0;
  for (std::size_t s = 0; s < order.size(); s += batch) {
    std::vector<IdSequence> src, tgt;
    for (std::size_t k = s; k < std::min(order.size(), s + batch); ++k) {
      src.push_back(c.source[order[k]]);
      tgt.push_back(c.target[order[k]]);
    }
    for (const double v : forward_nll(params, mode, make_batch(src, tgt)).per_sentence) total += v;
  }
  return total / static_cast<double>(c.size());
}

/// Minibatch Adadelta training with global-norm clipping. Keeps the
/// parameters with the best dev NLL (train NLL when no dev set is given).
template <typename Real>
TrainResult<Real> train(const TrainConfig& cfg, const EncodedCorpus& train_set, const EncodedCorpus* dev_set,
                        ModelParams<Real> init, const TrainCallbacks<Real>& cb = {}) {
  if (train_set.size() == 0) throw DataError("train: empty training corpus");
  init.validate();
  TrainResult<Real> res{init, std::move(init), {}, {}};
  res.optimizer = OptimizerState<Real>::zeros_like(res.last, cfg.rho, cfg.epsilon);
  Rng batch_rng = Rng(cfg.seed).split(0xBA7C4);

  const auto start = std::chrono::steady_clock::now();
  std::size_t updates = 0;
  double best_score = std::numeric_limits<double>::infinity();
  double window_nll = 0, window_sentences = 0, window_tokens = 0;

  auto emit = [&](double epoch_pos) -> bool {
    TrainRecord r;
    r.updates = updates;
    r.epochs = epoch_pos;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.train_nll = window_sentences > 0 ? window_nll / window_sentences : 0;
    r.train_nll_token = window_tokens > 0 ? window_nll / window_tokens : 0;
    if (dev_set && dev_set->size() > 0) r.dev_nll = corpus_nll(res.last, cfg.mode, *dev_set, cfg.batch);
    window_nll = window_sentences = window_tokens = 0;
    const double score = r.dev_nll ? *r.dev_nll : r.train_nll;
    res.log.records.push_back(r);
    if (score <= best_score && updates > 0) {
      best_score = score;
      res.best = res.last;
      res.log.best_index = res.log.records.size() - 1;
      if (cb.on_best) cb.on_best(res.best, res.optimizer);
    }
    if (cb.on_record) cb.on_record(r);
    return cb.should_stop && cb.should_stop(r);
  };

  const bool budget_exhausted_initially = cfg.max_updates && *cfg.max_updates == 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !budget_exhausted_initially; ++epoch) {
    auto batches = make_batches(train_set, cfg.batch, cfg.bucket, batch_rng);
    bool stop = false;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& batch = batches[bi];
      auto lg = loss_and_grad(res.last, cfg.mode, batch);
      if (!std::isfinite(lg.loss)) {
        throw NumericError(detail::concat("train: non-finite loss at update ", updates + 1));
      }
      auto grads = clip_gradients(std::move(lg.grads), cfg.clip);
      adadelta_update(res.optimizer, res.last, grads);
      ++updates;
      window_nll += lg.total_nll;
      window_sentences += static_cast<double>(batch.size);
      for (std::size_t b = 0; b < batch.size; ++b) window_tokens += static_cast<double>(batch.target_length(b));

      const double epoch_pos = static_cast<double>(epoch) +
                               static_cast<double>(bi + 1) / static_cast<double>(batches.size());
      const bool last_in_epoch = bi + 1 == batches.size();
      if ((cfg.dev_interval > 0 && updates % cfg.dev_interval == 0) ||
          (cfg.dev_interval == 0 && last_in_epoch)) {
        if (emit(epoch_pos)) {
          stop = true;
          break;
        }
      }
      if (cfg.max_updates && updates >= *cfg.max_updates) {
        if (window_sentences > 0) emit(epoch_pos);
        stop = true;
        break;
      }
    }
    if (stop) break;
  }
  return res;
}

}  // namespace rnnsearch
