// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "rnnsearch/autograd.hpp"
#include "rnnsearch/error.hpp"
#include "rnnsearch/random.hpp"
#include "rnnsearch/tensor.hpp"
#include "rnnsearch/text_data.hpp"

namespace rnnsearch {

struct ModelDims {
  std::size_t hidden = 32;    // n
  std::size_t embed = 16;     // m
  std::size_t maxout = 16;    // l
  std::size_t align = 32;     // n'
  std::size_t src_vocab = 0;  // K_x
  std::size_t tgt_vocab = 0;  // K_y

  static ModelDims full_size(std::size_t src_vocab, std::size_t tgt_vocab) {
    return {1000, 620, 500, 1000, src_vocab, tgt_vocab};
  }

  void validate() const {
    if (hidden == 0 || embed == 0 || maxout == 0 || align == 0 || src_vocab == 0 ||
        tgt_vocab == 0) {
      throw UsageError("ModelDims: every dimension must be at least 1");
    }
  }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// attention: per-step soft alignment. fixed: every step reads the last
/// forward encoder state (the encoder-decoder baseline).
enum class ContextMode { attention, fixed };

inline std::string_view to_string(ContextMode m) {
  return m == ContextMode::attention ? "attention" : "fixed";
}

enum class Param : std::size_t {
  enc_emb,
  enc_fwd_W, enc_fwd_Wz, enc_fwd_Wr, enc_fwd_U, enc_fwd_Uz, enc_fwd_Ur,
  enc_fwd_b, enc_fwd_bz, enc_fwd_br,
  enc_bwd_W, enc_bwd_Wz, enc_bwd_Wr, enc_bwd_U, enc_bwd_Uz, enc_bwd_Ur,
  enc_bwd_b, enc_bwd_bz, enc_bwd_br,
  dec_emb,
  dec_W, dec_Wz, dec_Wr, dec_U, dec_Uz, dec_Ur, dec_C, dec_Cz, dec_Cr,
  dec_b, dec_bz, dec_br,
  dec_Ws, dec_bs,
  att_Wa, att_Ua, att_va, att_b,
  out_Uo, out_Vo, out_Co, out_bt, out_Wo, out_bo,
  count
};

inline constexpr std::size_t kParamCount = static_cast<std::size_t>(Param::count);

inline constexpr std::array<std::string_view, kParamCount> kParamNames = {
    "enc.emb",
    "enc.fwd.W", "enc.fwd.W_z", "enc.fwd.W_r", "enc.fwd.U", "enc.fwd.U_z", "enc.fwd.U_r",
    "enc.fwd.b", "enc.fwd.b_z", "enc.fwd.b_r",
    "enc.bwd.W", "enc.bwd.W_z", "enc.bwd.W_r", "enc.bwd.U", "enc.bwd.U_z", "enc.bwd.U_r",
    "enc.bwd.b", "enc.bwd.b_z", "enc.bwd.b_r",
    "dec.emb",
    "dec.W", "dec.W_z", "dec.W_r", "dec.U", "dec.U_z", "dec.U_r", "dec.C", "dec.C_z", "dec.C_r",
    "dec.b", "dec.b_z", "dec.b_r",
    "dec.W_s", "dec.b_s",
    "att.W_a", "att.U_a", "att.v_a", "att.b_a",
    "out.U_o", "out.V_o", "out.C_o", "out.b_t", "out.W_o", "out.b_o",
};

inline std::string_view param_name(Param p) { return kParamNames[static_cast<std::size_t>(p)]; }

enum class Init { orthogonal, gaussian_align, gaussian, zero };

struct ParamSpec {
  Param id;
  std::size_t rows;
  std::size_t cols;
  Init init;
};

/// Shape and initializer of every parameter. Weights are stored (out x in);
/// biases and v_a are single rows.
inline std::vector<ParamSpec> param_specs(const ModelDims& d) {
  const std::size_t n = d.hidden, m = d.embed, l = d.maxout, na = d.align;
  std::vector<ParamSpec> s;
  s.reserve(kParamCount);
  auto add = [&](Param p, std::size_t r, std::size_t c, Init i) { s.push_back({p, r, c, i}); };
  add(Param::enc_emb, m, d.src_vocab, Init::gaussian);
  for (Param base : {Param::enc_fwd_W, Param::enc_bwd_W}) {
    const auto b = static_cast<std::size_t>(base);
    for (std::size_t k = 0; k < 3; ++k) add(static_cast<Param>(b + k), n, m, Init::gaussian);
    for (std::size_t k = 3; k < 6; ++k) add(static_cast<Param>(b + k), n, n, Init::orthogonal);
    for (std::size_t k = 6; k < 9; ++k) add(static_cast<Param>(b + k), 1, n, Init::zero);
  }
  add(Param::dec_emb, m, d.tgt_vocab, Init::gaussian);
  add(Param::dec_W, n, m, Init::gaussian);
  add(Param::dec_Wz, n, m, Init::gaussian);
  add(Param::dec_Wr, n, m, Init::gaussian);
  add(Param::dec_U, n, n, Init::orthogonal);
  add(Param::dec_Uz, n, n, Init::orthogonal);
  add(Param::dec_Ur, n, n, Init::orthogonal);
  add(Param::dec_C, n, 2 * n, Init::gaussian);
  add(Param::dec_Cz, n, 2 * n, Init::gaussian);
  add(Param::dec_Cr, n, 2 * n, Init::gaussian);
  add(Param::dec_b, 1, n, Init::zero);
  add(Param::dec_bz, 1, n, Init::zero);
  add(Param::dec_br, 1, n, Init::zero);
  add(Param::dec_Ws, n, n, Init::gaussian);
  add(Param::dec_bs, 1, n, Init::zero);
  add(Param::att_Wa, na, n, Init::gaussian_align);
  add(Param::att_Ua, na, 2 * n, Init::gaussian_align);
  add(Param::att_va, 1, na, Init::zero);
  add(Param::att_b, 1, na, Init::zero);
  add(Param::out_Uo, 2 * l, n, Init::gaussian);
  add(Param::out_Vo, 2 * l, m, Init::gaussian);
  add(Param::out_Co, 2 * l, 2 * n, Init::gaussian);
  add(Param::out_bt, 1, 2 * l, Init::zero);
  add(Param::out_Wo, d.tgt_vocab, l, Init::gaussian);
  add(Param::out_bo, 1, d.tgt_vocab, Init::zero);
  return s;
}

inline std::size_t parameter_count(const ModelDims& d) {
  std::size_t total = 0;
  for (const auto& s : param_specs(d)) total += s.rows * s.cols;
  return total;
}

inline bool is_alignment_param(Param p) {
  return p == Param::att_Wa || p == Param::att_Ua || p == Param::att_va || p == Param::att_b;
}

template <typename Real>
struct ModelParams {
  ModelDims dims;
  std::vector<Tensor<Real>> tensors;  // indexed by Param

  Tensor<Real>& operator[](Param p) { return tensors[static_cast<std::size_t>(p)]; }
  const Tensor<Real>& operator[](Param p) const { return tensors[static_cast<std::size_t>(p)]; }

  Tensor<Real>* find(std::string_view name) {
    for (std::size_t i = 0; i < kParamCount; ++i)
      if (kParamNames[i] == name) return &tensors[i];
    return nullptr;
  }

  /// Shapes match param_specs(dims) and every entry is finite.
  void validate() const {
    dims.validate();
    const auto specs = param_specs(dims);
    if (tensors.size() != specs.size()) throw DataError("ModelParams: wrong number of tensors");
    for (const auto& s : specs) {
      const auto& t = (*this)[s.id];
      if (t.rows() != s.rows || t.cols() != s.cols) {
        throw DataError(detail::concat("ModelParams: ", param_name(s.id), " is ", t.shape_string(),
                                       ", expected ", s.rows, "x", s.cols));
      }
      if (!t.all_finite()) {
        throw NumericError(detail::concat("ModelParams: ", param_name(s.id), " has non-finite entries"));
      }
    }
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

template <typename To, typename From>
ModelParams<To> params_cast(const ModelParams<From>& p) {
  ModelParams<To> out{p.dims, {}};
  for (const auto& t : p.tensors) out.tensors.push_back(tensor_cast<To>(t));
  return out;
}

/// Recurrent matrices orthogonal; W_a, U_a ~ N(0, 0.001^2); v_a and biases
/// zero; every other matrix ~ N(0, 0.01^2). Each tensor draws from its own
/// child stream of `rng`.
template <typename Real>
ModelParams<Real> init_params(const ModelDims& dims, const Rng& rng) {
  dims.validate();
  ModelParams<Real> p{dims, {}};
  p.tensors.resize(kParamCount);
  for (const auto& s : param_specs(dims)) {
    Rng local = rng.split(static_cast<std::uint64_t>(s.id));
    auto& t = p[s.id];
    switch (s.init) {
      case Init::orthogonal: t = orthogonal_init<Real>(local, s.rows); break;
      case Init::gaussian_align: t = gaussian_fill<Real>(local, s.rows, s.cols, 0.0, 0.001); break;
      case Init::gaussian: t = gaussian_fill<Real>(local, s.rows, s.cols, 0.0, 0.01); break;
      case Init::zero: t = Tensor<Real>(s.rows, s.cols); break;
    }
  }
  return p;
}

/// Every parameter registered as a named leaf on one tape.
template <typename Real>
struct BoundParams {
  std::array<ag::Var<Real>, kParamCount> vars;
  ag::Var<Real> operator[](Param p) const { return vars[static_cast<std::size_t>(p)]; }
  ag::Tape<Real>& tape() const { return *vars[0].tape; }
};

template <typename Real>
BoundParams<Real> bind(ag::Tape<Real>& tape, const ModelParams<Real>& params) {
  BoundParams<Real> b;
  for (std::size_t i = 0; i < kParamCount; ++i) {
    b.vars[i] = tape.parameter(std::string(kParamNames[i]), params.tensors[i]);
  }
  return b;
}

enum class GruKind { encoder_forward, encoder_backward, decoder };

template <typename Real>
struct GruTrace {
  ag::Var<Real> state;
  ag::Var<Real> update;    // z
  ag::Var<Real> reset;     // r
  ag::Var<Real> proposal;  // tanh candidate
};

/// Gated recurrent unit step over a batch of rows. The decoder cell also
/// reads a context vector; encoder cells must not be given one.
template <typename Real>
GruTrace<Real> gru_step(const BoundParams<Real>& p, GruKind kind, ag::Var<Real> input,
                        ag::Var<Real> prev, std::optional<std::type_identity_t<ag::Var<Real>>> context) {
  const bool decoder = kind == GruKind::decoder;
  if (decoder != context.has_value()) {
    throw std::invalid_argument("gru_step: a context vector is required for the decoder only");
  }
  Param base = Param::dec_W;
  if (kind == GruKind::encoder_forward) base = Param::enc_fwd_W;
  if (kind == GruKind::encoder_backward) base = Param::enc_bwd_W;
  auto at = [&](std::size_t k) { return p[static_cast<Param>(static_cast<std::size_t>(base) + k)]; };
  // Layout from base: W, W_z, W_r, U, U_z, U_r, then (decoder) C, C_z, C_r, then b, b_z, b_r.
  const std::size_t bias_off = decoder ? 9 : 6;

  auto gate = [&](std::size_t w, std::size_t u, std::size_t c, std::size_t b) {
    auto pre = ag::add(ag::linear(input, at(w)), ag::linear(prev, at(u)));
    if (decoder) pre = ag::add(pre, ag::linear(*context, at(c)));
    return ag::sigmoid(ag::add(pre, at(b)));
  };
  auto z = gate(1, 4, 7, bias_off + 1);
  auto r = gate(2, 5, 8, bias_off + 2);
  auto pre = ag::add(ag::linear(input, at(0)), ag::linear(ag::mul(r, prev), at(3)));
  if (decoder) pre = ag::add(pre, ag::linear(*context, at(6)));
  auto proposal = ag::tanh(ag::add(pre, at(bias_off)));
  auto state = ag::add(prev, ag::mul(z, ag::sub(proposal, prev)));
  return {state, z, r, proposal};
}

/// Encoder output for a batch: annotations h_j = [fwd_j ; bwd_j] per source
/// position, their alignment projections U_a h_j + b_a, and the states the
/// decoder initialisation and the fixed-context mode read.
template <typename Real>
struct Annotations {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<ag::Var<Real>> rows;       // length entries, each batch x 2n
  std::vector<ag::Var<Real>> projected;  // length entries, each batch x n' (attention mode)
  ag::Var<Real> forward_last;            // fwd state at each sentence's last real position
  ag::Var<Real> backward_first;          // bwd state at position 1
  Tensor<Real> mask;                     // batch x length, 1 on real positions
};

namespace detail {

template <typename Real>
Tensor<Real> column_mask(const std::vector<std::uint8_t>& mask, std::size_t rows, std::size_t cols,
                         std::size_t col, bool inverted) {
  Tensor<Real> m(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    const bool real = mask[r * cols + col] != 0;
    m(r, 0) = (real != inverted) ? Real(1) : Real(0);
  }
  return m;
}

// new on real rows, prev on padded rows; exact when the mask is 0/1.
template <typename Real>
ag::Var<Real> masked_carry(ag::Tape<Real>& tape, ag::Var<Real> next, ag::Var<Real> prev,
                           const std::vector<std::uint8_t>& mask, std::size_t rows,
                           std::size_t cols, std::size_t col) {
  bool all_real = true;
  for (std::size_t r = 0; r < rows; ++r) all_real = all_real && mask[r * cols + col] != 0;
  if (all_real) return next;
  auto keep = tape.constant(column_mask<Real>(mask, rows, cols, col, false));
  auto hold = tape.constant(column_mask<Real>(mask, rows, cols, col, true));
  return ag::add(ag::mul(next, keep), ag::mul(prev, hold));
}

}  // namespace detail

/// Bidirectional encoder over a padded batch of source ids (batch x length).
template <typename Real>
Annotations<Real> encode(const BoundParams<Real>& p, ContextMode mode, const std::vector<int>& ids,
                         const std::vector<std::uint8_t>& mask, std::size_t batch,
                         std::size_t length) {
  if (batch == 0 || length == 0) throw DataError("encode: empty source");
  if (ids.size() != batch * length || mask.size() != batch * length) {
    throw std::invalid_argument("encode: ids/mask do not match batch x length");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (mask[b * length] == 0) throw DataError(detail::concat("encode: sentence ", b, " is empty"));
  }
  auto& tape = p.tape();
  const std::size_t n = p[Param::enc_fwd_U].rows();
  Annotations<Real> a;
  a.batch = batch;
  a.length = length;
  a.mask = Tensor<Real>(batch, length);
  for (std::size_t k = 0; k < mask.size(); ++k) a.mask[k] = mask[k] ? Real(1) : Real(0);

  std::vector<ag::Var<Real>> emb(length);
  for (std::size_t j = 0; j < length; ++j) {
    std::vector<int> col(batch);
    for (std::size_t b = 0; b < batch; ++b) col[b] = ids[b * length + j];
    emb[j] = ag::lookup(p[Param::enc_emb], std::move(col));
  }

  std::vector<ag::Var<Real>> fwd(length), bwd(length);
  auto h = tape.constant(Tensor<Real>(batch, n));
  for (std::size_t j = 0; j < length; ++j) {
    auto next = gru_step(p, GruKind::encoder_forward, emb[j], h, std::nullopt).state;
    h = detail::masked_carry(tape, next, h, mask, batch, length, j);
    fwd[j] = h;
  }
  h = tape.constant(Tensor<Real>(batch, n));
  for (std::size_t j = length; j-- > 0;) {
    auto next = gru_step(p, GruKind::encoder_backward, emb[j], h, std::nullopt).state;
    h = detail::masked_carry(tape, next, h, mask, batch, length, j);
    bwd[j] = h;
  }
  a.forward_last = fwd[length - 1];
  a.backward_first = bwd[0];
  a.rows.resize(length);
  for (std::size_t j = 0; j < length; ++j) {
    a.rows[j] = ag::concat({fwd[j], bwd[j]});
    if (mode == ContextMode::attention) {
      a.projected.push_back(ag::add(ag::linear(a.rows[j], p[Param::att_Ua]), p[Param::att_b]));
    }
  }
  return a;
}

/// e_j = v_a . tanh(W_a s_prev + U_a h_j + b_a), as a batch x length matrix.
/// Padded positions are left in place; attend() masks them.
template <typename Real>
ag::Var<Real> align_energy(const BoundParams<Real>& p, ag::Var<Real> s_prev,
                           const Annotations<Real>& a) {
  if (a.projected.size() != a.length) {
    throw std::invalid_argument("align_energy: annotations carry no alignment projection");
  }
  auto query = ag::linear(s_prev, p[Param::att_Wa]);
  std::vector<ag::Var<Real>> cols;
  cols.reserve(a.length);
  for (std::size_t j = 0; j < a.length; ++j) {
    cols.push_back(ag::linear(ag::tanh(ag::add(a.projected[j], query)), p[Param::att_va]));
  }
  return ag::concat(std::span<const ag::Var<Real>>(cols));
}

template <typename Real>
struct Attention {
  ag::Var<Real> alpha;    // batch x length
  ag::Var<Real> context;  // batch x 2n
};

/// Softmax over real positions, then the expected annotation.
template <typename Real>
Attention<Real> attend(ag::Var<Real> energies, const Annotations<Real>& a) {
  auto alpha = ag::softmax_rows(energies, &a.mask);
  ag::Var<Real> context;
  for (std::size_t j = 0; j < a.length; ++j) {
    auto term = ag::mul(a.rows[j], ag::slice(alpha, j, 1));
    context = j == 0 ? term : ag::add(context, term);
  }
  return {alpha, context};
}

/// s_0 = tanh(W_s bwd_1 + b_s).
template <typename Real>
ag::Var<Real> decoder_init(const BoundParams<Real>& p, const Annotations<Real>& a) {
  return ag::tanh(ag::add(ag::linear(a.backward_first, p[Param::dec_Ws]), p[Param::dec_bs]));
}

/// [fwd_last ; 0], the context every step reads in fixed mode.
template <typename Real>
ag::Var<Real> fixed_context(const Annotations<Real>& a) {
  auto& tape = *a.forward_last.tape;
  auto zeros = tape.constant(Tensor<Real>(a.batch, a.forward_last.cols()));
  return ag::concat({a.forward_last, zeros});
}

/// Logits of the deep maxout output: W_o max-pairs(U_o s_prev + V_o e + C_o c + b_t) + b_o.
template <typename Real>
ag::Var<Real> output_logits(const BoundParams<Real>& p, ag::Var<Real> s_prev, ag::Var<Real> y_prev_emb,
                            ag::Var<Real> context) {
  auto pre = ag::add(ag::linear(s_prev, p[Param::out_Uo]), ag::linear(y_prev_emb, p[Param::out_Vo]));
  pre = ag::add(ag::add(pre, ag::linear(context, p[Param::out_Co])), p[Param::out_bt]);
  auto t = ag::pairwise_max(pre);
  return ag::add(ag::linear(t, p[Param::out_Wo]), p[Param::out_bo]);
}

template <typename Real>
struct StepTrace {
  ag::Var<Real> state;                 // s_i
  std::optional<ag::Var<Real>> alpha;  // absent in fixed mode
  ag::Var<Real> context;               // c_i
  ag::Var<Real> logits;                // over the target vocabulary, from s_{i-1}
  GruTrace<Real> gru;
};

/// One decoder step for a batch. `prev_ids` holds y_{i-1} per row, or -1 for
/// the first step (zero embedding).
template <typename Real>
StepTrace<Real> decoder_step(const BoundParams<Real>& p, ContextMode mode, ag::Var<Real> s_prev,
                             const std::vector<int>& prev_ids, const Annotations<Real>& a) {
  const auto k_y = static_cast<int>(p[Param::dec_emb].cols());
  for (const int id : prev_ids) {
    if (id < -1 || id >= k_y) {
      throw std::invalid_argument(detail::concat("decoder_step: previous word id ", id,
                                                 " outside target vocabulary of ", k_y));
    }
  }
  StepTrace<Real> out;
  if (mode == ContextMode::attention) {
    auto att = attend(align_energy(p, s_prev, a), a);
    out.alpha = att.alpha;
    out.context = att.context;
  } else {
    out.context = fixed_context(a);
  }
  auto emb = ag::lookup(p[Param::dec_emb], prev_ids);
  out.gru = gru_step(p, GruKind::decoder, emb, s_prev, out.context);
  out.state = out.gru.state;
  out.logits = output_logits(p, s_prev, emb, out.context);
  return out;
}

template <typename Real>
struct NllGraph {
  ag::Var<Real> loss;          // 1 x 1, mean NLL per sentence
  ag::Var<Real> per_sentence;  // batch x 1
  std::vector<ag::Var<Real>> alphas;
  Annotations<Real> annotations;
};

/// Teacher-forced negative log-likelihood of a batch; padded target steps
/// contribute exactly zero.
template <typename Real>
NllGraph<Real> build_nll(const BoundParams<Real>& p, ContextMode mode, const Batch& batch) {
  auto& tape = p.tape();
  NllGraph<Real> g;
  g.annotations = encode(p, mode, batch.source, batch.source_mask, batch.size, batch.src_len);
  auto state = decoder_init(p, g.annotations);
  ag::Var<Real> acc;
  std::vector<int> prev(batch.size, -1);
  for (std::size_t i = 0; i < batch.tgt_len; ++i) {
    auto step = decoder_step(p, mode, state, prev, g.annotations);
    if (step.alpha) g.alphas.push_back(*step.alpha);
    std::vector<int> gold(batch.size);
    for (std::size_t b = 0; b < batch.size; ++b) gold[b] = batch.tgt(b, i);
    auto ll = ag::pick(ag::log_softmax_rows(step.logits), gold);
    auto keep = tape.constant(
        detail::column_mask<Real>(batch.target_mask, batch.size, batch.tgt_len, i, false));
    ll = ag::mul(ll, keep);
    acc = i == 0 ? ll : ag::add(acc, ll);
    state = step.state;
    prev = std::move(gold);
  }
  g.per_sentence = ag::negate(acc);
  g.loss = ag::scale(ag::sum(g.per_sentence), Real(1) / static_cast<Real>(batch.size));
  return g;
}

struct NllResult {
  double mean = 0;  // per sentence
  std::vector<double> per_sentence;
  std::size_t tokens = 0;  // real target tokens, EOS included
};

template <typename Real>
NllResult forward_nll(const ModelParams<Real>& params, ContextMode mode, const Batch& batch) {
  ag::Tape<Real> tape;
  auto p = bind(tape, params);
  auto g = build_nll(p, mode, batch);
  NllResult r;
  r.mean = static_cast<double>(g.loss.value()(0, 0));
  for (std::size_t b = 0; b < batch.size; ++b) {
    r.per_sentence.push_back(static_cast<double>(g.per_sentence.value()(b, 0)));
    r.tokens += batch.target_length(b);
  }
  return r;
}

template <typename Real>
struct LossAndGrad {
  double loss = 0;
  double total_nll = 0;
  ag::GradientSet<Real> grads;
};

template <typename Real>
LossAndGrad<Real> loss_and_grad(const ModelParams<Real>& params, ContextMode mode, const Batch& batch) {
  ag::Tape<Real> tape;
  auto p = bind(tape, params);
  auto g = build_nll(p, mode, batch);
  LossAndGrad<Real> r;
  r.loss = static_cast<double>(g.loss.value()(0, 0));
  for (std::size_t b = 0; b < batch.size; ++b) r.total_nll += static_cast<double>(g.per_sentence.value()(b, 0));
  r.grads = tape.backward(g.loss);
  return r;
}

/// Encoded single source sentence for step-by-step decoding of several
/// hypotheses at once. Each step runs on a fresh tape through the same
/// graph code as training.
template <typename Real>
class DecoderSession {
 public:
  struct Step {
    Tensor<Real> log_probs;   // hyps x K_y
    Tensor<Real> alpha;       // hyps x T_x (empty in fixed mode)
    Tensor<Real> context;     // hyps x 2n
    Tensor<Real> next_state;  // hyps x n
  };

  DecoderSession(const ModelParams<Real>& params, ContextMode mode, const IdSequence& source)
      : params_(&params), mode_(mode) {
    if (source.empty()) throw DataError("DecoderSession: empty source");
    for (const int id : source) {
      if (id < 0 || static_cast<std::size_t>(id) >= params.dims.src_vocab) {
        throw DataError(detail::concat("DecoderSession: source id ", id, " outside vocabulary"));
      }
    }
    length_ = source.size();
    ag::Tape<Real> tape;
    auto p = bind(tape, params);
    std::vector<std::uint8_t> mask(length_, 1);
    auto a = encode(p, mode, source, mask, 1, length_);
    for (std::size_t j = 0; j < length_; ++j) {
      rows_.push_back(a.rows[j].value());
      if (mode == ContextMode::attention) projected_.push_back(a.projected[j].value());
    }
    forward_last_ = a.forward_last.value();
    backward_first_ = a.backward_first.value();
    initial_ = decoder_init(p, a).value();
  }

  std::size_t source_length() const noexcept { return length_; }
  ContextMode mode() const noexcept { return mode_; }
  const Tensor<Real>& initial_state() const noexcept { return initial_; }
  const Tensor<Real>& annotation(std::size_t j) const { return rows_.at(j); }
  const Tensor<Real>& forward_last() const noexcept { return forward_last_; }
  const Tensor<Real>& backward_first() const noexcept { return backward_first_; }

  Step step(const Tensor<Real>& states, const std::vector<int>& prev_ids) const {
    const std::size_t hyps = states.rows();
    if (prev_ids.size() != hyps) throw std::invalid_argument("DecoderSession::step: id count mismatch");
    ag::Tape<Real> tape;
    auto p = bind(tape, *params_);
    Annotations<Real> a;
    a.batch = hyps;
    a.length = length_;
    a.mask = Tensor<Real>(hyps, length_, Real(1));
    for (std::size_t j = 0; j < length_; ++j) {
      a.rows.push_back(tape.constant(replicate(rows_[j], hyps)));
      if (mode_ == ContextMode::attention) a.projected.push_back(tape.constant(replicate(projected_[j], hyps)));
    }
    a.forward_last = tape.constant(replicate(forward_last_, hyps));
    a.backward_first = tape.constant(replicate(backward_first_, hyps));
    auto s = decoder_step(p, mode_, tape.constant(states), prev_ids, a);
    Step out;
    out.log_probs = ag::log_softmax_rows(s.logits).value();
    if (s.alpha) out.alpha = s.alpha->value();
    out.context = s.context.value();
    out.next_state = s.state.value();
    return out;
  }

 private:
  static Tensor<Real> replicate(const Tensor<Real>& row, std::size_t times) {
    Tensor<Real> out(times, row.cols());
    for (std::size_t r = 0; r < times; ++r) std::copy(row.row(0).begin(), row.row(0).end(), out.row(r).begin());
    return out;
  }

  const ModelParams<Real>* params_;
  ContextMode mode_;
  std::size_t length_ = 0;
  std::vector<Tensor<Real>> rows_;
  std::vector<Tensor<Real>> projected_;
  Tensor<Real> forward_last_;
  Tensor<Real> backward_first_;
  Tensor<Real> initial_;
};

/// Softmax over the target vocabulary for one decoder input set.
template <typename Real>
Tensor<Real> output_probs(const ModelParams<Real>& params, const Tensor<Real>& s_prev,
                          const Tensor<Real>& y_prev_emb, const Tensor<Real>& context) {
  ag::Tape<Real> tape;
  auto p = bind(tape, params);
  auto logits = output_logits(p, tape.constant(s_prev), tape.constant(y_prev_emb), tape.constant(context));
  return ag::softmax_rows(logits).value();
}

}  // namespace rnnsearch
