// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rnnsearch/cli.hpp"

using namespace rnnsearch;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "rnnsearch");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / (std::string("rnnsearch_cli_") + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  void write(const std::string& name, const std::string& text) const {
    std::ofstream(dir / name, std::ios::binary) << text;
  }

  // tiny copy-task model; returns the checkpoint path
  std::string train_tiny(const std::string& context = "attention", int precision = 32) {
    EXPECT_EQ(run_cli({"gen-data", "--vocab", "8", "--count", "20", "--min-len", "2", "--max-len", "5",
                       "--out-src", path("train.src"), "--out-tgt", path("train.tgt")})
                  .code,
              0);
    write("tiny.cfg", "hidden = 8\nembed = 6\nmaxout = 4\nalign = 7\nbatch = 5\nbucket = 10\nepochs = 2\n"
                      "seed = 3\ncontext = " + context + "\nprecision = " + std::to_string(precision) + "\n");
    const auto r = run_cli({"train", "--config", path("tiny.cfg"), "--train-src", path("train.src"),
                            "--train-tgt", path("train.tgt"), "--out", path("model.ckpt")});
    EXPECT_EQ(r.code, 0) << r.err;
    return path("model.ckpt");
  }
};

}  // namespace

TEST_F(CliTest, GenDataIsDeterministic) {
  auto gen = [&](const std::string& tag, const std::string& seed, const std::string& task) {
    return run_cli({"gen-data", "--task", task, "--seed", seed, "--out-src", path(tag + ".src"), "--out-tgt",
                    path(tag + ".tgt")});
  };
  ASSERT_EQ(gen("a", "5", "copy").code, 0);
  ASSERT_EQ(gen("b", "5", "copy").code, 0);
  ASSERT_EQ(gen("c", "6", "copy").code, 0);
  EXPECT_EQ(slurp(path("a.src")), slurp(path("b.src")));
  EXPECT_NE(slurp(path("a.src")), slurp(path("c.src")));
  EXPECT_EQ(slurp(path("a.src")), slurp(path("a.tgt")));
  EXPECT_EQ(lines_of(path("a.src")).size(), 200u);

  ASSERT_EQ(gen("r", "5", "reverse").code, 0);
  const auto src = lines_of(path("r.src")), tgt = lines_of(path("r.tgt"));
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto words = cli::detail::split_words(src[i]);
    std::reverse(words.begin(), words.end());
    EXPECT_EQ(cli::detail::join(words), tgt[i]);
  }
  EXPECT_EQ(gen("x", "5", "shuffle").code, 1);
}

TEST_F(CliTest, GradcheckPassesAndCatchesInjectedFault) {
  const auto good = run_cli({"gradcheck"});
  EXPECT_EQ(good.code, 0) << good.out;
  EXPECT_NE(good.out.find("\nPASS\n"), std::string::npos);
  for (const auto name : kParamNames) {
    const std::string row = "\n" + std::string(name) + "\t";
    const auto first = good.out.find(row);
    EXPECT_NE(first, std::string::npos) << name;
    EXPECT_EQ(good.out.find(row, first + 1), std::string::npos) << name;
  }

  const auto bad = run_cli({"gradcheck", "--inject-fault", "tanh"});
  EXPECT_EQ(bad.code, 3);
  EXPECT_NE(bad.out.find("\nFAIL\n"), std::string::npos);
  EXPECT_FALSE(ag::corrupted_backward().has_value());

  EXPECT_EQ(run_cli({"gradcheck", "--inject-fault", "nonsense"}).code, 1);
}

TEST_F(CliTest, TrainWritesLogAndCheckpoint) {
  const auto ck = train_tiny();
  EXPECT_TRUE(fs::exists(ck));
  EXPECT_FALSE(fs::exists(ck + ".tmp"));
  const auto r = run_cli({"train", "--config", path("tiny.cfg"), "--train-src", path("train.src"), "--train-tgt",
                          path("train.tgt"), "--dev-src", path("train.src"), "--dev-tgt", path("train.tgt"), "--out",
                          path("again.ckpt")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream log(r.out);
  std::string header;
  std::getline(log, header);
  EXPECT_EQ(header, "update\tepoch\tseconds\ttrain_nll\ttrain_nll_token\tdev_nll");
  std::size_t rows = 0;
  for (std::string l; std::getline(log, l);) {
    ++rows;
    EXPECT_EQ(std::count(l.begin(), l.end(), '\t'), 5);
    EXPECT_EQ(l.find("NA"), std::string::npos);
  }
  EXPECT_EQ(rows, 2u);
  EXPECT_NE(r.err.find("kept 20 of 20"), std::string::npos);
  EXPECT_EQ(checkpoint_precision(path("again.ckpt")), 4);
}

TEST_F(CliTest, TrainRejectsBadInput) {
  write("bad.cfg", "batch = 3\nbucket = 10\n");
  write("a.src", "x y\n");
  write("a.tgt", "x y\n");
  EXPECT_EQ(run_cli({"train", "--config", path("bad.cfg"), "--train-src", path("a.src"), "--train-tgt",
                     path("a.tgt"), "--out", path("m.ckpt")})
                .code,
            1);
  write("ok.cfg", "batch = 1\nbucket = 1\nepochs = 1\n");
  write("b.tgt", "x y\nz\n");
  EXPECT_EQ(run_cli({"train", "--config", path("ok.cfg"), "--train-src", path("a.src"), "--train-tgt",
                     path("b.tgt"), "--out", path("m.ckpt")})
                .code,
            2);
  EXPECT_EQ(run_cli({"train", "--config", path("ok.cfg"), "--train-src", path("a.src"), "--train-tgt",
                     path("a.tgt"), "--dev-src", path("a.src"), "--out", path("m.ckpt")})
                .code,
            1);
}

TEST_F(CliTest, TranslateKeepsLineCountsAndMatchesGreedy) {
  const auto ck = train_tiny("attention", 64);
  write("in.txt", "t1 t2 t3\n\nt4 t5\nzzz t1\n");
  auto r = run_cli({"translate", "--checkpoint", ck, "--input", path("in.txt"), "--output", path("out.txt"),
                    "--beam", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto out = lines_of(path("out.txt"));
  ASSERT_EQ(out.size(), 4u);
  EXPECT_EQ(out[1], "");

  const auto model = load_checkpoint<double>(ck);
  const auto src = encode_sentence(model.source_vocab, {"t1", "t2", "t3"});
  const auto greedy = greedy_decode(model.params, model.mode, src, 16);
  EXPECT_EQ(out[0], cli::detail::join(decode_sentence(model.target_vocab, greedy.tokens)));

  r = run_cli({"translate", "--checkpoint", ck, "--input", path("in.txt"), "--output", path("out2.txt"), "--no-unk"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const auto& l : lines_of(path("out2.txt"))) EXPECT_EQ(l.find(kUnkToken), std::string::npos);

  EXPECT_EQ(run_cli({"translate", "--checkpoint", path("missing.ckpt"), "--input", path("in.txt"), "--output",
                     path("o.txt")})
                .code,
            2);
  EXPECT_EQ(run_cli({"translate", "--checkpoint", ck, "--input", path("in.txt"), "--output", path("o.txt"), "--beam",
                     "0"})
                .code,
            1);
}

TEST_F(CliTest, AlignWritesTsvAndPgm) {
  const auto ck = train_tiny();
  const auto r = run_cli({"align", "--checkpoint", ck, "--source", "t1 t2 t3", "--target", "t1 t2 t3",
                          "--out-prefix", path("al")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines_of(path("al.tsv"));
  ASSERT_EQ(rows.size(), 4u);  // three words plus EOS on the target side
  for (const auto& row : rows) {
    std::istringstream ss(row);
    double sum = 0;
    int cols = 0;
    for (double v; ss >> v; ++cols) sum += v;
    EXPECT_EQ(cols, 4);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
  const auto pgm = slurp(path("al.pgm"));
  EXPECT_EQ(pgm.substr(0, 11), "P5\n4 4\n255\n");
  EXPECT_EQ(pgm.size(), 11u + 16u);

  const auto decoded = run_cli({"align", "--checkpoint", ck, "--source", "t1 t2", "--out-prefix", path("dec")});
  EXPECT_EQ(decoded.code, 0) << decoded.err;
  EXPECT_TRUE(fs::exists(path("dec.pgm")));
}

TEST_F(CliTest, AlignRefusesFixedContextModel) {
  const auto ck = train_tiny("fixed");
  const auto r = run_cli({"align", "--checkpoint", ck, "--source", "t1 t2", "--out-prefix", path("al")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("fixed-context"), std::string::npos);
  EXPECT_FALSE(fs::exists(path("al.tsv")));
}

TEST_F(CliTest, EvaluateHypothesisFile) {
  write("test.src", "a b c\nd e f g h i j k l m n o\nx\n");
  write("test.tgt", "a b c\nd e f g h i j k l m n o\nx\n");
  auto r = run_cli({"evaluate", "--hyp", path("test.tgt"), "--test-src", path("test.src"), "--test-tgt",
                    path("test.tgt"), "--bins", "5,10", "--metric", "token-accuracy"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.substr(0, 7), "BLEU\t1\n");
  EXPECT_NE(r.out.find("1\t5\t2\t1\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("6\t10\t0\tNA\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("11\t12\t1\t1\n"), std::string::npos) << r.out;

  write("short.txt", "a b c\n");
  EXPECT_EQ(run_cli({"evaluate", "--hyp", path("short.txt"), "--test-src", path("test.src"), "--test-tgt",
                     path("test.tgt")})
                .code,
            2);
  EXPECT_EQ(run_cli({"evaluate", "--test-src", path("test.src"), "--test-tgt", path("test.tgt")}).code, 1);
  EXPECT_EQ(run_cli({"evaluate", "--hyp", path("test.tgt"), "--test-src", path("test.src"), "--test-tgt",
                     path("test.tgt"), "--metric", "meteor"})
                .code,
            1);
}

TEST_F(CliTest, EvaluateCheckpointWritesCurve) {
  const auto ck = train_tiny();
  const auto r = run_cli({"evaluate", "--checkpoint", ck, "--test-src", path("train.src"), "--test-tgt",
                          path("train.tgt"), "--bins", "3,5", "--beam", "2", "--curve-out", path("curve.tsv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto curve = lines_of(path("curve.tsv"));
  ASSERT_EQ(curve.size(), 3u);
  EXPECT_EQ(curve[0], "bin_low\tbin_high\tcount\tscore");
  std::size_t total = 0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    std::istringstream ss(curve[i]);
    std::size_t lo, hi, count;
    ss >> lo >> hi >> count;
    total += count;
  }
  EXPECT_EQ(total, 20u);
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run_cli({}).code, 1);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 1);
  EXPECT_EQ(run_cli({"gen-data"}).code, 1);
  EXPECT_EQ(run_cli({"gen-data", "--count", "many", "--out-src", "a", "--out-tgt", "b"}).code, 1);
  const auto help = run_cli({"--help"});
  EXPECT_EQ(help.code, 0);
  EXPECT_NE(help.out.find("translate"), std::string::npos);
  EXPECT_EQ(help.out.find("inject-fault"), std::string::npos);
}
