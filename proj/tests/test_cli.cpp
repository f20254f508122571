#include <gtest/gtest.h>
#include <sys/wait.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class Cli : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::path(FEDMETA_TEST_TMP) / info->name();
    fs::remove_all(dir);
    fs::create_directories(dir);
  }

  Outcome run(const std::string& args) const {
    const fs::path log = dir / "stdout.txt";
    const std::string cmd = std::string(FEDMETA_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
  }

  fs::path write_config(const std::string& name, std::size_t rounds) const {
    const nlohmann::json j = {
        {"algorithm", "fedmeta_uga"},
        {"clients", 8},
        {"client_fraction", 0.5},
        {"local_epochs", 2},
        {"batch_size", 8},
        {"lr", 0.05},
        {"lr_global", 1.0},
        {"lr_meta", 0.05},
        {"rounds", rounds},
        {"seeds", {{"partition", 1}, {"init", 2}, {"training", 3}}},
        {"model", {{"kind", "mlp"}, {"hidden", {8}}}},
        {"dataset",
         {{"kind", "synthetic"}, {"classes", 4}, {"dims", 6}, {"per_class", 40}, {"test_per_class", 10},
          {"separation", 2.0}, {"seed", 5}}},
        {"partition", {{"scheme", "label-skew"}, {"classes_per_client", 2}}},
        {"meta", {{"fraction", 0.05}}}};
    const fs::path p = dir / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }
};

constexpr const char* kSynth = "synthetic:classes=10,dims=4,per_class=100,separation=1,seed=3";

}  // namespace

TEST_F(Cli, PartitionIidGivesEqualClients) {
  const auto r = run(std::string("partition --dataset ") + kSynth + " --k 10 --scheme iid --seed 1 --out " +
                     (dir / "m.json").string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto m = nlohmann::json::parse(slurp(dir / "m.json"));
  ASSERT_EQ(m["clients"].size(), 10u);
  for (const auto& c : m["clients"]) EXPECT_EQ(c.size(), 100u);
  EXPECT_NE(r.out.find("total 1000 examples over 10 clients"), std::string::npos);
}

TEST_F(Cli, PartitionManifestIsReproducible) {
  const std::string base = std::string("partition --dataset ") + kSynth + " --k 7 --scheme label-skew --seed 4 --out ";
  ASSERT_EQ(run(base + (dir / "a.json").string()).code, 0);
  ASSERT_EQ(run(base + (dir / "b.json").string()).code, 0);
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
}

TEST_F(Cli, PartitionUsageErrorsExitTwo) {
  const std::string out = " --out " + (dir / "m.json").string();
  auto r = run(std::string("partition --dataset ") + kSynth + " --k 5 --scheme label-skew --classes-per-client 11" + out);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("error"), std::string::npos);
  EXPECT_EQ(run(std::string("partition --dataset ") + kSynth + " --k 5 --scheme shards" + out).code, 2);
  EXPECT_EQ(run("partition --dataset synthetic:colors=3 --k 5" + out).code, 2);
  EXPECT_EQ(run("partition --k 5" + out).code, 2);
  EXPECT_FALSE(fs::exists(dir / "m.json"));
}

TEST_F(Cli, RunWritesOneRowPerRound) {
  const auto cfg = write_config("c.json", 5);
  const auto r = run("run --config " + cfg.string() + " --out " + (dir / "m.csv").string());
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string csv = slurp(dir / "m.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
  EXPECT_EQ(csv.rfind("round,algorithm,accuracy,loss,meta_loss,selected_clients,wall_ms\n", 0), 0u);
  const auto manifest = nlohmann::json::parse(slurp(dir / "m.csv.manifest.json"));
  EXPECT_EQ(manifest["config"]["rounds"], 5);
  EXPECT_EQ(manifest["partition_hash"].get<std::string>().size(), 40u);
}

TEST_F(Cli, RunIsByteIdenticalAcrossRepeatsAndThreads) {
  const auto cfg = write_config("c.json", 4);
  const std::string base = "run --no-wall-time --config " + cfg.string();
  ASSERT_EQ(run(base + " --threads 1 --out " + (dir / "a.csv").string()).code, 0);
  ASSERT_EQ(run(base + " --threads 1 --out " + (dir / "b.csv").string()).code, 0);
  ASSERT_EQ(run(base + " --threads 4 --out " + (dir / "c.csv").string()).code, 0);
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "c.csv"));
  EXPECT_EQ(slurp(dir / "a.csv.manifest.json"), slurp(dir / "c.csv.manifest.json"));
}

TEST_F(Cli, RunConfigErrorsExitTwo) {
  EXPECT_EQ(run("run --config " + (dir / "missing.json").string() + " --out " + (dir / "m.csv").string()).code, 2);
  std::ofstream(dir / "bad.json") << R"({"algorithm": "fedavg", "clients": 2, "rounds": 1, "lr": 0.1, "colour": 1})";
  const auto r = run("run --config " + (dir / "bad.json").string() + " --out " + (dir / "m.csv").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("colour"), std::string::npos);
  EXPECT_EQ(run("run --config " + (dir / "bad.json").string()).code, 2);
}

TEST_F(Cli, RunUnwritableOutputExitsOne) {
  const auto cfg = write_config("c.json", 1);
  EXPECT_EQ(run("run --config " + cfg.string() + " --out " + (dir / "nope" / "m.csv").string()).code, 1);
}

TEST_F(Cli, ReportPrintsMilestoneTable) {
  const auto cfg = write_config("c.json", 6);
  ASSERT_EQ(run("run --config " + cfg.string() + " --out " + (dir / "m.csv").string()).code, 0);
  const auto r = run("report --metrics " + (dir / "m.csv").string() + " --milestones 0.1,0.999");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("fedmeta_uga"), std::string::npos);
  EXPECT_NE(r.out.find("10%"), std::string::npos);
}

TEST_F(Cli, ReportRejectsMalformedCsv) {
  std::ofstream(dir / "bad.csv") << "round,algorithm,accuracy,loss,meta_loss,selected_clients,wall_ms\n1,fedavg,x\n";
  const auto r = run("report --metrics " + (dir / "bad.csv").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find(":2:"), std::string::npos);
  EXPECT_EQ(run("report --metrics " + (dir / "missing.csv").string()).code, 1);
}

TEST_F(Cli, SelftestPassesQuickly) {
  const auto start = std::chrono::steady_clock::now();
  const auto r = run("selftest");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  EXPECT_LE(secs, 60.0);
}

TEST_F(Cli, SelftestCatchesPerturbedUga) {
  const auto r = run("selftest --perturb-uga 0.01");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("FAIL uga-vs-unrolled-finite-difference"), std::string::npos);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("train").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}
