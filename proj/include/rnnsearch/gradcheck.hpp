// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rnnsearch/autograd.hpp"
#include "rnnsearch/model.hpp"
#include "rnnsearch/random.hpp"
#include "rnnsearch/text_data.hpp"

namespace rnnsearch {

struct GradcheckEntry {
  std::string name;
  double worst = 0;  // max relative error over the tensor's coordinates
};

struct GradcheckReport {
  ContextMode mode = ContextMode::attention;
  std::vector<GradcheckEntry> entries;  // one per parameter, in parameter order

  double worst() const {
    double w = 0;
    for (const auto& e : entries) w = std::max(w, e.worst);
    return w;
  }
};

inline ModelDims gradcheck_dims() { return {8, 6, 4, 7, 11, 11}; }

/// Parameters for gradient checking. Everything, including biases and v_a,
/// is drawn from N(0, 0.5^2) so that no path through the graph is flat.
inline ModelParams<double> gradcheck_params(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  ModelParams<double> p{dims, {}};
  p.tensors.resize(kParamCount);
  Rng rng(seed);
  for (const auto& s : param_specs(dims)) {
    Rng local = rng.split(static_cast<std::uint64_t>(s.id));
    p[s.id] = gaussian_fill<double>(local, s.rows, s.cols, 0.0, 0.5);
  }
  return p;
}

/// Two sentence pairs of different lengths so padding is exercised on both sides.
inline Batch gradcheck_batch(const ModelDims& dims, std::uint64_t seed) {
  Rng rng = Rng(seed).split(0x6A7C);
  auto draw = [&](std::size_t len, std::size_t vocab) {
    IdSequence s(len);
    for (auto& id : s) id = 1 + static_cast<int>(rng.uniform_index(vocab - 1));
    if (vocab == 1) std::fill(s.begin(), s.end(), kUnkId);
    s.push_back(kEosId);
    return s;
  };
  const auto kx = dims.src_vocab, ky = dims.tgt_vocab;
  return make_batch({draw(4, kx), draw(2, kx)}, {draw(2, ky), draw(4, ky)});
}

/// Analytic vs central-difference gradients of the mean batch NLL.
inline GradcheckReport gradient_check(const ModelDims& dims, ContextMode mode, std::uint64_t seed,
                                      double h = 1e-5) {
  auto params = gradcheck_params(dims, seed);
  const auto batch = gradcheck_batch(dims, seed);
  const auto analytic = loss_and_grad(params, mode, batch).grads;

  ag::ParamRefs refs;
  for (std::size_t i = 0; i < kParamCount; ++i) refs.emplace_back(std::string(kParamNames[i]), &params.tensors[i]);
  auto loss = [&] { return forward_nll(params, mode, batch).mean; };
  const auto numeric = ag::finite_diff_grad(loss, refs, h);

  GradcheckReport r;
  r.mode = mode;
  for (std::size_t i = 0; i < kParamCount; ++i) {
    const std::string name(kParamNames[i]);
    r.entries.push_back({name, ag::max_relative_error(analytic.at(name), numeric.at(name))});
  }
  return r;
}

}  // namespace rnnsearch
