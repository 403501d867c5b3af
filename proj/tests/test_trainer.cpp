// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "rnnsearch/trainer.hpp"

using namespace rnnsearch;
using T = Tensor<double>;

namespace {

ag::GradientSet<double> grads_with_norm(double norm) {
  // 3-4-12 triangle: sqrt(9 + 16 + 144) = 13
  ag::GradientSet<double> g;
  g["a"] = T{{3.0 * norm / 13, -4.0 * norm / 13}};
  g["b"] = T{{12.0 * norm / 13}};
  return g;
}

struct Toy {
  EncodedCorpus train, dev;
  ModelDims dims;
};

Toy toy_copy() {
  const auto c = gen_synthetic(SyntheticTask::copy, 10, 3, 6, 100, 42);
  const auto d = gen_synthetic(SyntheticTask::copy, 10, 3, 6, 20, 43);
  const auto v = build_vocab(c.source, 100);
  Toy t;
  t.train = encode_corpus(c, v, v);
  t.dev = encode_corpus(d, v, v);
  t.dims = {32, 16, 16, 32, v.size(), v.size()};
  return t;
}

TrainConfig toy_config(const Toy& t) {
  TrainConfig cfg;
  cfg.dims = t.dims;
  cfg.batch = 10;
  cfg.bucket = 100;
  cfg.epochs = 5;
  cfg.seed = 42;
  return cfg;
}

}  // namespace

TEST(Clip, SmallNormUnchanged) {
  const auto g = grads_with_norm(0.5);
  EXPECT_EQ(clip_gradients(g, 1.0), g);
}

TEST(Clip, NormTwoIsHalved) {
  const auto g = grads_with_norm(2.0);
  EXPECT_NEAR(global_norm(g), 2.0, 1e-15);
  const auto c = clip_gradients(g, 1.0);
  EXPECT_NEAR(global_norm(c), 1.0, 1e-12);
  for (const auto& [name, t] : g) {
    for (std::size_t k = 0; k < t.size(); ++k) EXPECT_NEAR(c.at(name)[k], 0.5 * t[k], 1e-15);
  }
}

TEST(Clip, PreservesDirectionAndBound) {
  Rng rng(3);
  ag::GradientSet<double> g;
  g["x"] = gaussian_fill<double>(rng, 4, 5, 0, 3);
  g["y"] = gaussian_fill<double>(rng, 1, 7, 0, 3);
  const auto c = clip_gradients(g, 1.0);
  EXPECT_LE(global_norm(c), 1.0 + 1e-12);
  const double ratio = c.at("x")[0] / g.at("x")[0];
  EXPECT_GT(ratio, 0.0);
  for (const auto& [name, t] : g)
    for (std::size_t k = 0; k < t.size(); ++k) EXPECT_NEAR(c.at(name)[k], ratio * t[k], 1e-14);
}

TEST(Clip, NonFiniteNamesParameter) {
  ag::GradientSet<double> g;
  g["fine"] = T{{1.0}};
  g["broken"] = T{{std::nan("")}};
  try {
    clip_gradients(g, 1.0);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("broken"), std::string::npos);
  }
  EXPECT_THROW(clip_gradients(grads_with_norm(1), 0.0), std::invalid_argument);
}

TEST(Adadelta, FirstStepClosedForm) {
  T p{{0.0}}, g{{1.0}}, eg{{0.0}}, ed{{0.0}};
  adadelta_update(p, g, eg, ed, 0.95, 1e-6);
  EXPECT_NEAR(p(0, 0), -std::sqrt(1e-6 / 0.050001), 1e-9);
  EXPECT_NEAR(p(0, 0), -4.4721e-3, 1e-7);
  EXPECT_NEAR(eg(0, 0), 0.05, 1e-15);
}

TEST(Adadelta, ZeroGradientOnlyDecays) {
  T p{{0.7}}, g{{0.0}}, eg{{0.2}}, ed{{0.4}};
  adadelta_update(p, g, eg, ed, 0.95, 1e-6);
  EXPECT_EQ(p(0, 0), 0.7);
  EXPECT_NEAR(eg(0, 0), 0.95 * 0.2, 1e-15);
  EXPECT_NEAR(ed(0, 0), 0.95 * 0.4, 1e-15);
}

TEST(Adadelta, StepOpposesGradient) {
  Rng rng(4);
  T g = gaussian_fill<double>(rng, 3, 4, 0, 10), p(3, 4), eg(3, 4), ed(3, 4);
  g(0, 0) = 1e-300;  // tiny but finite: epsilon keeps the ratio finite
  adadelta_update(p, g, eg, ed, 0.95, 1e-6);
  for (std::size_t k = 0; k < p.size(); ++k) {
    EXPECT_TRUE(std::isfinite(p[k]));
    EXPECT_EQ(std::signbit(p[k]), !std::signbit(g[k])) << k;
  }
}

TEST(Adadelta, ShapeMismatchRejected) {
  T p(1, 2), g(2, 1), eg(1, 2), ed(1, 2);
  EXPECT_THROW(adadelta_update(p, g, eg, ed, 0.95, 1e-6), std::invalid_argument);
}

TEST(Train, ToyCopyLossDecreasesEachEpoch) {
  const auto toy = toy_copy();
  auto cfg = toy_config(toy);
  cfg.batch = 20;  // batch 10 is noisy enough to bounce on the unigram plateau
  // training-set NLL at each epoch end; shorter runs are prefixes of longer ones
  std::vector<double> nll{corpus_nll(init_params<float>(toy.dims, Rng(42)), cfg.mode, toy.train)};
  for (std::size_t epochs = 1; epochs <= 5; ++epochs) {
    cfg.epochs = epochs;
    const auto res = train(cfg, toy.train, nullptr, init_params<float>(toy.dims, Rng(42)));
    ASSERT_EQ(res.log.records.size(), epochs);
    EXPECT_EQ(res.log.records.back().updates, 5 * epochs);
    nll.push_back(corpus_nll(res.last, cfg.mode, toy.train));
  }
  for (std::size_t e = 1; e < nll.size(); ++e) EXPECT_LT(nll[e], nll[e - 1]) << "epoch " << e;
}

TEST(Train, SameSeedSameTrajectory) {
  const auto toy = toy_copy();
  auto cfg = toy_config(toy);
  cfg.epochs = 2;
  const auto a = train(cfg, toy.train, &toy.dev, init_params<float>(toy.dims, Rng(42)));
  const auto b = train(cfg, toy.train, &toy.dev, init_params<float>(toy.dims, Rng(42)));
  ASSERT_EQ(a.log.records.size(), b.log.records.size());
  for (std::size_t i = 0; i < a.log.records.size(); ++i) EXPECT_TRUE(a.log.records[i].same_numbers(b.log.records[i]));
  EXPECT_EQ(a.last, b.last);
}

TEST(Train, ZeroBudgetLeavesParametersUnchanged) {
  const auto toy = toy_copy();
  auto cfg = toy_config(toy);
  cfg.max_updates = 0;
  const auto init = init_params<float>(toy.dims, Rng(42));
  const auto res = train(cfg, toy.train, nullptr, init);
  EXPECT_EQ(res.last, init);
  EXPECT_EQ(res.best, init);
  EXPECT_TRUE(res.log.records.empty());
}

TEST(Train, UpdateBudgetAndIntervalLogging) {
  const auto toy = toy_copy();
  auto cfg = toy_config(toy);
  cfg.max_updates = 7;
  cfg.dev_interval = 3;
  const auto res = train(cfg, toy.train, &toy.dev, init_params<float>(toy.dims, Rng(42)));
  ASSERT_EQ(res.log.records.size(), 3u);
  EXPECT_EQ(res.log.records[0].updates, 3u);
  EXPECT_EQ(res.log.records[1].updates, 6u);
  EXPECT_EQ(res.log.records[2].updates, 7u);
  for (const auto& r : res.log.records) EXPECT_TRUE(r.dev_nll.has_value());
}

TEST(Train, BestCheckpointHasLowestDevNll) {
  const auto toy = toy_copy();
  auto cfg = toy_config(toy);
  cfg.epochs = 4;
  cfg.dev_interval = 4;
  std::size_t best_calls = 0;
  TrainCallbacks<float> cb;
  cb.on_best = [&](const ModelParams<float>&, const OptimizerState<float>&) { ++best_calls; };
  const auto res = train(cfg, toy.train, &toy.dev, init_params<float>(toy.dims, Rng(42)), cb);
  const auto& best = res.log.records.at(res.log.best_index);
  for (const auto& r : res.log.records) EXPECT_LE(*best.dev_nll, *r.dev_nll);
  EXPECT_EQ(corpus_nll(res.best, cfg.mode, toy.dev, cfg.batch), *best.dev_nll);
  EXPECT_GE(best_calls, 1u);
}

TEST(Train, NonFiniteLossAborts) {
  const auto toy = toy_copy();
  auto cfg = toy_config(toy);
  auto init = init_params<float>(toy.dims, Rng(42));
  init[Param::out_bt].fill(3e38f);
  init[Param::out_Wo].fill(1.0f);
  EXPECT_THROW(train(cfg, toy.train, nullptr, init), NumericError);
}

TEST(TrainLog, TsvColumns) {
  std::ostringstream os;
  write_log_header(os);
  TrainRecord r;
  r.updates = 20;
  r.epochs = 1;
  r.train_nll = 3.5;
  write_log_row(os, r);
  const auto text = os.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "update\tepoch\tseconds\ttrain_nll\ttrain_nll_token\tdev_nll");
  EXPECT_NE(text.find("\tNA\n"), std::string::npos);
}
