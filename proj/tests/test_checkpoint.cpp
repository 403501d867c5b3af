// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "rnnsearch/checkpoint.hpp"
#include "rnnsearch/gradcheck.hpp"

using namespace rnnsearch;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "rnnsearch_checkpoint_test";
  fs::create_directories(dir);
  return dir / name;
}

template <typename Real>
Checkpoint<Real> sample(ContextMode mode = ContextMode::attention, bool with_optimizer = true) {
  const auto sv = build_vocab({{"ein", "kleiner", "test", "test"}}, 10);
  const auto tv = build_vocab({{"a", "small", "test"}}, 10);
  Checkpoint<Real> ck;
  ck.mode = mode;
  ck.source_vocab = sv;
  ck.target_vocab = tv;
  ck.params = init_params<Real>({6, 4, 3, 5, sv.size(), tv.size()}, Rng(17));
  if (with_optimizer) {
    auto opt = OptimizerState<Real>::zeros_like(ck.params);
    Rng rng(2);
    for (auto& t : opt.mean_sq_grad) t = gaussian_fill<Real>(rng, t.rows(), t.cols(), 1, 0.1);
    ck.optimizer = opt;
  }
  return ck;
}

Batch sample_batch() { return make_batch({{2, 3, kEosId}, {4, kEosId}}, {{2, kEosId}, {3, 4, 2, kEosId}}); }

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto ck = sample<float>();
  const auto p1 = scratch("a.ckpt"), p2 = scratch("b.ckpt");
  save_checkpoint(ck, p1);
  save_checkpoint(load_checkpoint<float>(p1), p2);
  std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
  const std::string x{std::istreambuf_iterator<char>(a), {}}, y{std::istreambuf_iterator<char>(b), {}};
  EXPECT_EQ(x, y);
  EXPECT_FALSE(fs::exists(p1.string() + ".tmp"));
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto ck = sample<double>(ContextMode::fixed);
  const auto back = parse_checkpoint<double>(serialize_checkpoint(ck));
  EXPECT_EQ(back.mode, ContextMode::fixed);
  EXPECT_EQ(back.source_vocab, ck.source_vocab);
  EXPECT_EQ(back.target_vocab, ck.target_vocab);
  EXPECT_EQ(back.params, ck.params);
  ASSERT_TRUE(back.optimizer.has_value());
  EXPECT_EQ(*back.optimizer, *ck.optimizer);
}

TEST(Checkpoint, NllBitwiseAfterRoundTrip) {
  const auto ck = sample<float>();
  const auto back = parse_checkpoint<float>(serialize_checkpoint(ck));
  const auto batch = sample_batch();
  EXPECT_EQ(forward_nll(ck.params, ck.mode, batch).per_sentence, forward_nll(back.params, back.mode, batch).per_sentence);
}

TEST(Checkpoint, HeaderLayout) {
  const auto bytes = serialize_checkpoint(sample<double>());
  EXPECT_EQ(bytes.substr(0, 4), "ATNS");
  EXPECT_EQ(bytes[4], 1);  // version, little endian
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[8], 8);  // precision byte
  EXPECT_EQ(static_cast<unsigned char>(bytes[9]), 6u);  // n
  const auto path = scratch("layout.ckpt");
  save_checkpoint(sample<float>(), path);
  EXPECT_EQ(checkpoint_precision(path), 4);
}

TEST(Checkpoint, WithoutOptimizer) {
  const auto ck = sample<float>(ContextMode::attention, false);
  EXPECT_FALSE(parse_checkpoint<float>(serialize_checkpoint(ck)).optimizer.has_value());
}

TEST(Checkpoint, EveryTruncationRejected) {
  const auto bytes = serialize_checkpoint(sample<float>());
  for (std::size_t cut = 0; cut < bytes.size(); cut += 1 + cut / 16) {
    EXPECT_THROW(parse_checkpoint<float>(bytes.substr(0, cut)), DataError) << "cut at " << cut;
  }
}

TEST(Checkpoint, CorruptionRejected) {
  auto bytes = serialize_checkpoint(sample<float>());
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint<float>(bad_magic), DataError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(parse_checkpoint<float>(bad_version), DataError);
  EXPECT_THROW(parse_checkpoint<double>(bytes), DataError);  // precision mismatch
  EXPECT_THROW(parse_checkpoint<float>(bytes + "x"), DataError);
  auto bad_dims = bytes;
  bad_dims[9] = 7;  // hidden size no longer matches the stored tensors
  EXPECT_THROW(parse_checkpoint<float>(bad_dims), DataError);
}

TEST(Checkpoint, MissingFileIsDataError) {
  EXPECT_THROW(load_checkpoint<float>(scratch("does-not-exist.ckpt")), DataError);
}
