#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "mno/cli.hpp"
#include "mno/datagen.hpp"
#include "mno/manifest.hpp"
#include "mno/training.hpp"

using namespace mno;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> v;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) v.push_back(l);
  return v;
}

std::vector<std::string> split(const std::string& s, char c) {
  std::vector<std::string> v;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, c)) v.push_back(cur);
  return v;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root = fs::temp_directory_path() /
           ("mno-cli-" + std::to_string(::getpid()) + "-" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root);
    fs::create_directories(root);
  }
  void TearDown() override { fs::remove_all(root); }

  fs::path gen(const std::string& name, int n, int count, int seed) {
    const auto dir = root / name;
    const auto r = cli({"gen-data", "--generator", "sphere-flow", "--n", std::to_string(n), "--count",
                        std::to_string(count), "--seed", std::to_string(seed), "--out", dir.string()});
    EXPECT_EQ(r.code, kExitOk) << r.err;
    return dir;
  }

  std::vector<std::string> tiny_train(const fs::path& data, const fs::path& out) {
    return {"train", "--data", data.string(), "--out", out.string(), "--epochs", "2", "--dim", "8",
            "--modes", "4", "--heads", "2", "--k", "4", "--blocks", "1", "--batch", "2"};
  }

  bool has_partial() const {
    for (const auto& e : fs::directory_iterator(root))
      if (e.path().filename().string().find(".partial-") != std::string::npos) return true;
    return false;
  }

  fs::path root;
};

}  // namespace

TEST_F(CliTest, GenDataWritesCorpus) {
  const auto dir = gen("d", 32, 3, 5);
  const auto samples = load_corpus(dir);
  ASSERT_EQ(samples.size(), 3u);
  EXPECT_EQ(samples[0].n, 36u);  // 32 shell points + 32/8 on the surface
  EXPECT_EQ(samples[0].f, 4u);
  EXPECT_EQ(samples[0].o, 4u);
  EXPECT_TRUE(fs::exists(dir / "manifest.csv"));
  EXPECT_TRUE(fs::exists(dir / "run_manifest.txt"));
  EXPECT_FALSE(has_partial());
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(cli({}).code, kExitUsage);
  EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(cli({"gen-data", "--n", "8", "--bogus", "1", "--out", (root / "x").string()}).code, kExitUsage);
  EXPECT_EQ(cli({"gen-data", "--generator", "nope", "--out", (root / "x").string()}).code, kExitUsage);
  EXPECT_EQ(cli({"gen-data", "--n", "0", "--out", (root / "x").string()}).code, kExitUsage);
  EXPECT_EQ(cli({"train", "--out", (root / "t").string()}).code, kExitUsage);  // --data missing
  EXPECT_FALSE(fs::exists(root / "x"));
  EXPECT_FALSE(fs::exists(root / "t"));
  EXPECT_FALSE(has_partial());
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
}

TEST_F(CliTest, BadConfigValuesAreUsageErrors) {
  const auto data = gen("d", 32, 2, 1);
  auto args = tiny_train(data, root / "t");
  args.insert(args.end(), {"--mask", "XYZ"});
  EXPECT_EQ(cli(args).code, kExitUsage);
  std::ofstream(root / "bad.cfg") << "nonsense.key=1\n";
  args = tiny_train(data, root / "t");
  args.insert(args.end(), {"--config", (root / "bad.cfg").string()});
  EXPECT_EQ(cli(args).code, kExitUsage);
  EXPECT_FALSE(fs::exists(root / "t"));
  EXPECT_FALSE(has_partial());
}

TEST_F(CliTest, RuntimeErrorsExitOne) {
  const auto data = gen("d", 16, 1, 1);
  std::ofstream(root / "junk.ckpt") << "definitely not a checkpoint";
  const auto r = cli({"eval", "--checkpoint", (root / "junk.ckpt").string(), "--data", data.string(), "--out",
                      (root / "e").string()});
  EXPECT_EQ(r.code, kExitRuntime);
  EXPECT_FALSE(r.err.empty());
  EXPECT_FALSE(fs::exists(root / "e"));
  // A missing file is an argument problem, not a runtime failure.
  EXPECT_EQ(cli({"eval", "--checkpoint", (root / "missing.ckpt").string(), "--data", data.string(), "--out",
                 (root / "e").string()})
                .code,
            kExitUsage);
}

TEST_F(CliTest, RefusesNonEmptyOutputWithoutOverwrite) {
  const auto dir = gen("d", 16, 1, 1);
  const auto again = cli({"gen-data", "--n", "16", "--count", "1", "--out", dir.string()});
  EXPECT_EQ(again.code, kExitUsage);
  EXPECT_EQ(cli({"gen-data", "--n", "16", "--count", "1", "--out", dir.string(), "--overwrite"}).code, kExitOk);
}

TEST_F(CliTest, TrainEvalAndManifestRerunAreIdentical) {
  const auto data = gen("d", 48, 3, 2);
  const auto a = cli(tiny_train(data, root / "a"));
  ASSERT_EQ(a.code, kExitOk) << a.err;
  for (const char* f : {"final.ckpt", "best.ckpt", "history.csv", "run_manifest.txt"})
    EXPECT_TRUE(fs::exists(root / "a" / f)) << f;
  EXPECT_NE(a.out.find("epoch 2"), std::string::npos);

  // Re-run from the recorded manifest alone.
  const auto b = cli({"train", "--data", data.string(), "--out", (root / "b").string(), "--config",
                      (root / "a" / "run_manifest.txt").string()});
  ASSERT_EQ(b.code, kExitOk) << b.err;
  EXPECT_EQ(slurp(root / "a" / "history.csv"), slurp(root / "b" / "history.csv"));
  EXPECT_EQ(slurp(root / "a" / "final.ckpt"), slurp(root / "b" / "final.ckpt"));

  for (const char* run : {"a", "b"}) {
    const auto e = cli({"eval", "--checkpoint", (root / run / "final.ckpt").string(), "--data", data.string(),
                        "--out", (root / (std::string("e") + run)).string()});
    ASSERT_EQ(e.code, kExitOk) << e.err;
  }
  const auto ma = lines(slurp(root / "ea" / "metrics.csv")), mb = lines(slurp(root / "eb" / "metrics.csv"));
  ASSERT_EQ(ma.size(), 3u);  // header + velocity + pressure
  EXPECT_EQ(ma[0], "field,rl2,mae,samples,wall_seconds,fingerprint");
  for (std::size_t i = 1; i < ma.size(); ++i) {
    const auto ra = split(ma[i], ','), rb = split(mb[i], ',');
    EXPECT_EQ(ra[0], rb[0]);
    EXPECT_EQ(ra[1], rb[1]);
    EXPECT_EQ(ra[2], rb[2]);
    EXPECT_EQ(ra[5], rb[5]);
  }
  const auto manifest = Manifest::load(root / "ea" / "run_manifest.txt");
  EXPECT_EQ(manifest.get("run.command"), "eval");
}

TEST_F(CliTest, DumpFieldsMatchesEvaluate) {
  const auto data = gen("d", 40, 2, 3);
  ASSERT_EQ(cli(tiny_train(data, root / "t")).code, kExitOk);
  const auto sample_path = data / "sample_00000.mno";
  const auto r = cli({"dump-fields", "--checkpoint", (root / "t" / "final.ckpt").string(), "--sample",
                      sample_path.string(), "--out", (root / "f").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto rows = lines(slurp(root / "f" / "fields.csv"));
  const auto sample = read_pointset(sample_path);
  ASSERT_EQ(rows.size(), sample.n + 1);
  const auto header = split(rows[0], ',');
  ASSERT_EQ(header.size(), 3 + 3 * sample.o);
  EXPECT_EQ(header[3], "truth_0");
  EXPECT_EQ(header[3 + sample.o], "pred_0");
  EXPECT_EQ(header[3 + 2 * sample.o], "abs_err_0");

  std::vector<double> pred, truth;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto c = split(rows[i], ',');
    for (std::size_t j = 0; j < sample.o; ++j) {
      const double t = std::stod(c[3 + j]), p = std::stod(c[3 + sample.o + j]);
      EXPECT_NEAR(std::stod(c[3 + 2 * sample.o + j]), std::abs(p - t), 1e-6);
      EXPECT_EQ(static_cast<float>(t), sample.targets[(i - 1) * sample.o + j]);
      truth.push_back(t);
      pred.push_back(p);
    }
  }
  const auto ckpt = load_checkpoint(root / "t" / "final.ckpt");
  const auto rep = evaluate(ckpt, {sample}, default_grouping(sample.o));
  EXPECT_NEAR(rl2(pred, truth), rep.row("all").rl2, 1e-5);

  PointSample wrong = sample;
  wrong.o = 1;
  wrong.targets.resize(wrong.n);
  EXPECT_THROW(dump_fields(ckpt, wrong), std::invalid_argument);
}

TEST_F(CliTest, AblateWritesTable) {
  const auto data = gen("d", 32, 3, 4);
  const auto test = gen("t", 32, 1, 99);
  const auto r = cli({"ablate", "--data", data.string(), "--test", test.string(), "--out",
                      (root / "ab").string(), "--seeds", "0", "--epochs", "1", "--dim", "8", "--modes", "4",
                      "--heads", "2", "--k", "4", "--blocks", "1"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto table = lines(slurp(root / "ab" / "table.csv"));
  ASSERT_EQ(table.size(), 8u);
  std::vector<std::string> labels;
  for (std::size_t i = 1; i < table.size(); ++i) labels.push_back(split(table[i], ',')[0]);
  EXPECT_EQ(labels, (std::vector<std::string>{"G", "L", "M", "GL", "GM", "LM", "GLM"}));
  EXPECT_EQ(lines(slurp(root / "ab" / "ablation.csv")).size(), 1u + 7 * 2);  // one row per mask and field
}

TEST_F(CliTest, GradcheckPassesAndFails) {
  const auto ok = cli({"gradcheck"});
  EXPECT_EQ(ok.code, kExitOk) << ok.out << ok.err;
  EXPECT_NE(ok.out.find("PASS"), std::string::npos);
  const auto bad = cli({"gradcheck", "--tol", "1e-30"});
  EXPECT_EQ(bad.code, kExitRuntime);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
}

TEST_F(CliTest, BenchPrintsCsv) {
  const auto r = cli({"bench", "--module", "micro", "--n", "64,128", "--modes", "8", "--dim", "8", "--heads",
                      "2", "--repeats", "1", "--out", (root / "b").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto rows = lines(slurp(root / "b" / "bench.csv"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "module,n,modes,k,dim,ms,ratio");
  EXPECT_EQ(split(rows[1], ',')[0], "micro");
  EXPECT_NE(r.out.find("module,n,modes"), std::string::npos);
}
