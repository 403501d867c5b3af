// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>

#include "rnnsearch/text_data.hpp"

using namespace rnnsearch;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "rnnsearch_text_data_test";
  fs::create_directories(dir);
  return dir / name;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

EncodedCorpus lengths_corpus(std::size_t n) {
  EncodedCorpus e;
  for (std::size_t i = 0; i < n; ++i) {
    IdSequence s(1 + (i * 7) % 13, 2);
    s.push_back(kEosId);
    e.source.push_back(s);
    e.target.push_back(IdSequence{3, kEosId});
  }
  return e;
}

}  // namespace

TEST(Vocabulary, ShortlistMapsRestToUnk) {
  const auto v = build_vocab({{"a", "a", "b"}}, 1);
  EXPECT_EQ(v.size(), 3u);
  EXPECT_EQ(v.id("a"), 2);
  EXPECT_EQ(encode_sentence(v, {"b"}), (IdSequence{kUnkId, kEosId}));
}

TEST(Vocabulary, LargeKKeepsEverything) {
  const auto v = build_vocab({{"x", "y"}, {"z"}}, 100);
  EXPECT_EQ(v.size(), 5u);
  for (const char* t : {"x", "y", "z"}) EXPECT_TRUE(v.contains(t));
}

TEST(Vocabulary, LexicographicTieBreak) {
  const auto v = build_vocab({{"c", "b", "a"}, {"b", "a"}, {"a", "b"}}, 2);
  EXPECT_EQ(v.id("a"), 2);
  EXPECT_EQ(v.id("b"), 3);
  EXPECT_EQ(v.id("c"), kUnkId);
}

TEST(Vocabulary, DescendingFrequency) {
  const auto v = build_vocab({{"rare", "common", "common", "mid", "mid", "common"}}, 3);
  EXPECT_EQ(v.token(2), "common");
  EXPECT_EQ(v.token(3), "mid");
  EXPECT_EQ(v.token(4), "rare");
}

TEST(Vocabulary, PermutationInvariant) {
  std::vector<Sentence> c{{"a", "b"}, {"c", "b"}, {"d"}, {"a", "e", "e"}};
  const auto v1 = build_vocab(c, 3);
  std::reverse(c.begin(), c.end());
  EXPECT_EQ(build_vocab(c, 3), v1);
}

TEST(Vocabulary, EmptyCorpusRejected) {
  EXPECT_THROW(build_vocab({}, 5), DataError);
}

TEST(Vocabulary, FileRoundTrip) {
  const auto v = build_vocab({{"der", "die", "das", "die"}}, 10);
  const auto p = scratch("vocab.txt");
  save_vocab(v, p);
  EXPECT_EQ(load_vocab(p), v);
  std::ifstream in(p);
  std::string first;
  std::getline(in, first);
  EXPECT_EQ(first, "die");  // line 1 is id 2
}

TEST(Encode, AppendsEos) {
  const auto v = build_vocab({{"a"}}, 5);
  EXPECT_EQ(encode_sentence(v, {"a"}), (IdSequence{2, kEosId}));
}

TEST(Encode, AllOovBecomesUnk) {
  const auto v = build_vocab({{"a"}}, 5);
  EXPECT_EQ(encode_sentence(v, {"p", "q", "r"}), (IdSequence{kUnkId, kUnkId, kUnkId, kEosId}));
}

TEST(Encode, RoundTrip) {
  const Sentence s{"the", "cat", "sat"};
  const auto v = build_vocab({s}, 10);
  EXPECT_EQ(decode_sentence(v, encode_sentence(v, s)), s);
}

TEST(Encode, EmptyRejected) {
  const auto v = build_vocab({{"a"}}, 5);
  EXPECT_THROW(encode_sentence(v, {}), DataError);
}

TEST(Batches, BucketOf1600SplitsInto20) {
  Rng rng(1);
  const auto batches = make_batches(lengths_corpus(1600), 80, 1600, rng);
  ASSERT_EQ(batches.size(), 20u);
  for (const auto& b : batches) EXPECT_EQ(b.size, 80u);
}

TEST(Batches, SmallCorpusSingleBatch) {
  Rng rng(1);
  const auto batches = make_batches(lengths_corpus(50), 80, 1600, rng);
  ASSERT_EQ(batches.size(), 1u);
  EXPECT_EQ(batches[0].size, 50u);
}

TEST(Batches, ShortLastBatchAndSortedWithinBucket) {
  Rng rng(3);
  const auto batches = make_batches(lengths_corpus(250), 10, 100, rng);
  ASSERT_EQ(batches.size(), 25u);
  EXPECT_EQ(batches.back().size, 10u);
  const auto odd = make_batches(lengths_corpus(95), 10, 100, rng);
  ASSERT_EQ(odd.size(), 10u);
  EXPECT_EQ(odd.back().size, 5u);
  // lengths are nondecreasing across the minibatches of one bucket
  for (std::size_t bucket = 0; bucket < 2; ++bucket) {
    std::size_t prev = 0;
    for (std::size_t k = bucket * 10; k < bucket * 10 + 10; ++k) {
      const auto& b = batches[k];
      for (std::size_t i = 0; i < b.size; ++i) {
        EXPECT_GE(b.source_length(i), prev);
        prev = b.source_length(i);
      }
    }
  }
}

TEST(Batches, EveryPairAppearsOnce) {
  Rng rng(9);
  const auto c = lengths_corpus(333);
  std::size_t total = 0;
  for (const auto& b : make_batches(c, 20, 100, rng)) total += b.size;
  EXPECT_EQ(total, 333u);
}

TEST(Batches, ZeroBatchRejected) {
  Rng rng(1);
  EXPECT_THROW(make_batches(lengths_corpus(5), 0, 1600, rng), std::invalid_argument);
  EXPECT_THROW(make_batches(lengths_corpus(5), 7, 100, rng), std::invalid_argument);
}

TEST(Batches, ShuffleDependsOnRng) {
  Rng a(1), b(1), c(2);
  const auto corpus = lengths_corpus(200);
  const auto x = make_batches(corpus, 10, 200, a), y = make_batches(corpus, 10, 200, b);
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_EQ(x[k].source, y[k].source);
  // a fresh epoch from the same generator reshuffles
  const auto z = make_batches(corpus, 10, 10, a);
  const auto w = make_batches(corpus, 10, 10, c);
  bool differs = false;
  for (std::size_t k = 0; k < z.size(); ++k) differs |= z[k].source != w[k].source;
  EXPECT_TRUE(differs);
}

TEST(Batches, MasksAndPadding) {
  const auto b = make_batch({{5, 6, kEosId}, {7, kEosId}}, {{3, kEosId}, {4, 4, 4, kEosId}});
  EXPECT_EQ(b.src_len, 3u);
  EXPECT_EQ(b.tgt_len, 4u);
  EXPECT_EQ(b.source_length(0), 3u);
  EXPECT_EQ(b.source_length(1), 2u);
  EXPECT_EQ(b.target_length(0), 2u);
  EXPECT_EQ(b.src(1, 2), kEosId);
  EXPECT_FALSE(b.src_real(1, 2));
  EXPECT_TRUE(b.src_real(1, 1));
  EXPECT_THROW(make_batch({{5}}, {{3, kEosId}}), DataError);
}

TEST(Synthetic, CopyAndReverse) {
  const auto copy = gen_synthetic(SyntheticTask::copy, 10, 2, 6, 50, 4);
  const auto rev = gen_synthetic(SyntheticTask::reverse, 10, 2, 6, 50, 4);
  ASSERT_EQ(copy.size(), 50u);
  for (std::size_t i = 0; i < copy.size(); ++i) {
    EXPECT_EQ(copy.target[i], copy.source[i]);
    EXPECT_EQ(rev.source[i], copy.source[i]);
    EXPECT_EQ(rev.target[i], Sentence(copy.source[i].rbegin(), copy.source[i].rend()));
    EXPECT_GE(copy.source[i].size(), 2u);
    EXPECT_LE(copy.source[i].size(), 6u);
  }
}

TEST(Synthetic, DeterministicPerSeed) {
  const auto a = gen_synthetic(SyntheticTask::copy, 20, 3, 8, 30, 42);
  const auto b = gen_synthetic(SyntheticTask::copy, 20, 3, 8, 30, 42);
  const auto c = gen_synthetic(SyntheticTask::copy, 20, 3, 8, 30, 43);
  EXPECT_EQ(a.source, b.source);
  EXPECT_NE(a.source, c.source);
}

TEST(Synthetic, BadArgumentsRejected) {
  EXPECT_THROW(gen_synthetic(SyntheticTask::copy, 20, 3, 8, 0, 1), std::invalid_argument);
  EXPECT_THROW(gen_synthetic(SyntheticTask::copy, 1, 3, 8, 5, 1), std::invalid_argument);
  EXPECT_THROW(gen_synthetic(SyntheticTask::copy, 20, 9, 8, 5, 1), std::invalid_argument);
}

TEST(LoadParallel, ReadsPairs) {
  const auto s = scratch("three.src"), t = scratch("three.tgt");
  write_file(s, "a b\nc\nd e f\n");
  write_file(t, "x\ny y\nz\n");
  const auto c = load_parallel(s, t);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.source[0], (Sentence{"a", "b"}));
  EXPECT_EQ(c.target[1], (Sentence{"y", "y"}));
}

TEST(LoadParallel, CountMismatchNamesBoth) {
  const auto s = scratch("ten.src"), t = scratch("nine.tgt");
  std::string ten, nine;
  for (int i = 0; i < 10; ++i) ten += "w\n";
  for (int i = 0; i < 9; ++i) nine += "w\n";
  write_file(s, ten);
  write_file(t, nine);
  try {
    load_parallel(s, t);
    FAIL();
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("10"), std::string::npos);
    EXPECT_NE(msg.find("9"), std::string::npos);
  }
}

TEST(LoadParallel, EmptyLineNamesLineNumber) {
  const auto s = scratch("gap.src"), t = scratch("gap.tgt");
  write_file(s, "a\n\nb\n");
  write_file(t, "a\nb\nc\n");
  try {
    load_parallel(s, t);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
}

TEST(LengthFilter, DropsLongPairs) {
  Corpus c;
  c.add(Sentence(30, "a"), Sentence(30, "b"));
  c.add(Sentence(31, "a"), Sentence(3, "b"));
  c.add(Sentence(3, "a"), Sentence(31, "b"));
  const auto f = filter_by_length(c, 30);
  ASSERT_EQ(f.size(), 1u);
  EXPECT_EQ(f.source[0].size(), 30u);
}
