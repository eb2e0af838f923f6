#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "robustcert/robustcert.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           (std::string("robustcert_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Exit status of the binary; stdout and stderr go to files in the temp dir.
  int run(const std::string& args) {
    const std::string cmd = std::string(ROBUSTCERT_CLI_PATH) + " " + args + " > " + (dir_ / "stdout").string() +
                            " 2> " + (dir_ / "stderr").string();
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  }
  std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  // Twelve 2D points and a small robustly trained model.
  void small_run() {
    ASSERT_EQ(run("gen-data --kind 2d --seed 3 --out " + p("d.csv")), 0);
    ASSERT_EQ(run("train --data " + p("d.csv") + " --hidden 20,20 --eps 0.02 --epochs 30 --batch-size 0 --out " +
                  p("run")),
              0);
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, HelpDocumentsEverySchema) {
  const std::vector<std::pair<std::string, std::string>> cases{
      {"gen-data", "x0,x1,...,x{d-1},label"},
      {"train", "epoch,eps,clean_loss,clean_err,robust_loss,robust_err_bound"},
      {"certify", "n,eps,clean_err,robust_err,mean_max_certified_eps"},
      {"attack", "eps,test_error,fgsm_error,pgd_error,robust_error_bound"},
      {"eval", "robust_err_bound"},
      {"oracle-check", "index,label,target,dual_bound,lp_optimum,gap,span_count"},
      {"polytope", "kind,order,z0,z1"},
      {"bounds-check", "example,layer,frac_neg,frac_pos,frac_span"},
      {"run", "\"steps\""}};
  for (const auto& [cmd, schema] : cases) {
    EXPECT_EQ(run(cmd + " --help"), 0) << cmd;
    EXPECT_NE(slurp(dir_ / "stdout").find(schema), std::string::npos) << cmd;
  }
}

TEST_F(Cli, GenDataIsDeterministic) {
  ASSERT_EQ(run("gen-data --kind 2d --seed 5 --out " + p("a.csv")), 0);
  ASSERT_EQ(run("gen-data --kind 2d --seed 5 --out " + p("b.csv")), 0);
  EXPECT_EQ(slurp(p("a.csv")), slurp(p("b.csv")));
  const robustcert::Dataset d = robustcert::load_csv(p("a.csv"));
  EXPECT_EQ(d.inputs, robustcert::gen_2d(5).inputs);
}

TEST_F(Cli, TrainAndReportsAreReproducible) {
  small_run();
  const std::string model = slurp(p("run/model.json"));
  ASSERT_EQ(run("train --data " + p("d.csv") + " --hidden 20,20 --eps 0.02 --epochs 30 --batch-size 0 --out " +
                p("run2")),
            0);
  EXPECT_EQ(slurp(p("run2/model.json")), model);
  EXPECT_EQ(slurp(p("run2/metrics.csv")), slurp(p("run/metrics.csv")));

  std::istringstream batches(slurp(p("run/batches.csv")));
  std::string line;
  std::getline(batches, line);
  int rows = 0;
  while (std::getline(batches, line)) {
    double clean = 0, robust = 0;
    int e = 0, b = 0;
    double eps = 0;
    ASSERT_EQ(std::sscanf(line.c_str(), "%d,%d,%lf,%lf,%lf", &e, &b, &eps, &clean, &robust), 5);
    EXPECT_GE(robust, clean - 1e-12);
    ++rows;
  }
  EXPECT_EQ(rows, 30);
}

TEST_F(Cli, CertifyAtZeroEpsCertifiesCorrectPredictions) {
  small_run();
  ASSERT_EQ(run("certify --model " + p("run/model.json") + " --data " + p("d.csv") + " --eps 0 --out " + p("c")), 0);
  std::istringstream in(slurp(p("c/certificates.jsonl")));
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const json j = json::parse(line);
    EXPECT_EQ(j["certified"].get<bool>(), j["correct"].get<bool>());
    ++n;
  }
  EXPECT_EQ(n, 12);
}

TEST_F(Cli, AttackSummaryOrderingAndNoCertifiedFlips) {
  small_run();
  ASSERT_EQ(run("attack --model " + p("run/model.json") + " --data " + p("d.csv") +
                " --eps 0.05 --restarts 2 --out " + p("a")),
            0);
  std::istringstream in(slurp(p("a/attack_summary.csv")));
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  double eps, test, fgsm, pgd, bound;
  ASSERT_EQ(std::sscanf(row.c_str(), "%lf,%lf,%lf,%lf,%lf", &eps, &test, &fgsm, &pgd, &bound), 5);
  EXPECT_LE(test, pgd);
  EXPECT_LE(pgd, bound);
  EXPECT_NE(slurp(dir_ / "stdout").find("certified but attacked: 0"), std::string::npos);
}

TEST_F(Cli, OracleBoundsAndPolytopeOutputs) {
  small_run();
  const std::string base = "--model " + p("run/model.json") + " --data " + p("d.csv") + " --eps 0.05 ";
  ASSERT_EQ(run("oracle-check " + base + "--limit 3 --out " + p("o")), 0);
  const std::string t = slurp(p("o/tightness.csv"));
  EXPECT_EQ(std::count(t.begin(), t.end(), '\n'), 4);  // header + 3 examples x 1 other class
  ASSERT_EQ(run("bounds-check " + base + "--index 2 --out " + p("b")), 0);
  const json b = json::parse(slurp(p("b/bounds.json")));
  EXPECT_EQ(b["layers"].size(), 3u);
  EXPECT_TRUE(b["layers"][0].contains("span"));
  EXPECT_FALSE(b["layers"][2].contains("span"));
  ASSERT_EQ(run("polytope " + base + "--index 1 --grid 21 --directions 32 --out " + p("poly")), 0);
  const json o = json::parse(slurp(p("poly/outer_bound.json")));
  EXPECT_GE(o["outer_area"].get<double>(), o["hull_area"].get<double>());
  EXPECT_EQ(o["offsets"].size(), 32u);
}

TEST_F(Cli, PolytopeOnRandomNetwork) {
  ASSERT_EQ(run("polytope --random-net 2,10,10,2 --x 0.5,0.5 --eps 0.1 --grid 11 --out " + p("r")), 0);
  EXPECT_TRUE(fs::exists(p("r/polytope.csv")));
}

TEST_F(Cli, ErrorsAreStructuredAndLeaveNoOutput) {
  small_run();
  // the model expects 2 inputs; a 3-column dataset must be rejected
  std::ofstream(p("bad.csv")) << "x0,x1,x2,label\n0.1,0.2,0.3,1\n";
  const int rc = run("certify --model " + p("run/model.json") + " --data " + p("bad.csv") + " --out " + p("x"));
  EXPECT_EQ(rc, 3);
  const json err = json::parse(slurp(dir_ / "stderr"));
  EXPECT_EQ(err["error"], "dimension");
  EXPECT_FALSE(fs::exists(p("x/certificates.jsonl")));

  std::ofstream(p("broken.json")) << "[{\"kind\":\"dense\"";
  EXPECT_EQ(run("eval --model " + p("broken.json") + " --data " + p("d.csv") + " --out " + p("x")), 4);
  EXPECT_NE(run("certify --model " + p("run/model.json") + " --data " + p("d.csv") + " --eps -1"), 0);
  EXPECT_NE(run("certify --model " + p("run/model.json") + " --data " + p("d.csv") + " --norm l3"), 0);
  EXPECT_NE(run("no-such-command"), 0);
}

TEST_F(Cli, ManifestReplaysAPipeline) {
  const json m = {{"steps",
                   {{{"command", "gen-data"}, {"args", {{"kind", "2d"}, {"seed", 4}, {"out", p("m/d.csv")}}}},
                    {{"command", "train"},
                     {"args",
                      {{"data", p("m/d.csv")},
                       {"hidden", "10"},
                       {"eps", 0.02},
                       {"epochs", 5},
                       {"batch-size", 0},
                       {"stop-when-certified", false},
                       {"out", p("m")}}}},
                    {{"command", "certify"},
                     {"args", {{"model", p("m/model.json")}, {"data", p("m/d.csv")}, {"eps", 0.02}, {"out", p("m")}}}}}}};
  std::ofstream(p("manifest.json")) << m.dump();
  ASSERT_EQ(run("run --manifest " + p("manifest.json")), 0);
  EXPECT_TRUE(fs::exists(p("m/certificates.jsonl")));
  std::ofstream(p("bad_manifest.json")) << R"({"steps":[{"command":"certify","args":{"model":"/nonexistent"}}]})";
  EXPECT_NE(run("run --manifest " + p("bad_manifest.json")), 0);
}
