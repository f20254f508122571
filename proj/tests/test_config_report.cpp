#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedmeta/config.hpp"
#include "fedmeta/report.hpp"

using namespace fedmeta;
using nlohmann::json;

namespace {

json minimal() {
  return json::parse(R"({
    "algorithm": "fedmeta_uga",
    "clients": 20,
    "rounds": 10,
    "lr": 0.001,
    "local_epochs": 3,
    "model": {"kind": "mlp", "hidden": [32]},
    "dataset": {"kind": "synthetic", "classes": 5, "dims": 8, "per_class": 40, "seed": 3}
  })");
}

// Rounds 1..9 at 0.5 then 0.9 from round 10 on.
std::string step_csv(std::size_t rows) {
  std::string s = std::string(kMetricsHeader) + "\n";
  for (std::size_t r = 1; r <= rows; ++r)
    s += std::to_string(r) + ",fedavg," + (r < 10 ? "0.500000" : "0.900000") + ",1.0,,0;1,3\n";
  return s;
}

MetricsRun parse(const std::string& text, const std::string& name = "m.csv") {
  std::istringstream in(text);
  return parse_metrics_csv(in, name);
}

std::string parse_error(const std::string& text) {
  try {
    parse(text);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, MinimalParsesWithDefaults) {
  const RunConfig c = config_from_json(minimal());
  EXPECT_EQ(c.algorithm, Algorithm::kFedMetaUga);
  EXPECT_EQ(c.clients, 20u);
  EXPECT_EQ(c.model.kind, ModelKind::kMlp);
  EXPECT_EQ(c.model.hidden, std::vector<std::size_t>{32});
  EXPECT_EQ(c.batch_size, kFullBatch);
  EXPECT_FALSE(c.lr_global);
  EXPECT_DOUBLE_EQ(c.prox_mu, 2e-4);
  EXPECT_EQ(c.partition.scheme, "iid");
}

TEST(Config, RoundTripThroughJson) {
  json j = minimal();
  j["batch_size"] = 16;
  j["lr_global"] = 0.5;
  j["partition"] = {{"scheme", "label-skew"}, {"classes_per_client", 2}};
  j["meta"] = {{"fraction", 0.02}, {"source", "overlap"}, {"overlap_rate", 0.25}};
  const RunConfig c = config_from_json(j);
  const json back = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(back)), back);
  EXPECT_EQ(back["batch_size"], 16);
  EXPECT_EQ(back["meta"]["source"], "overlap");
}

TEST(Config, FullBatchKeyword) {
  json j = minimal();
  j["batch_size"] = "full";
  EXPECT_EQ(config_from_json(j).batch_size, kFullBatch);
  EXPECT_EQ(config_to_json(config_from_json(j))["batch_size"], "full");
  j["batch_size"] = "half";
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(Config, UnknownKeysAreRejectedAtEveryLevel) {
  for (const char* path : {"/lerning_rate", "/model/width", "/dataset/noise"}) {
    json j = minimal();
    j[json::json_pointer(path)] = 1;
    EXPECT_THROW(config_from_json(j), ConfigError) << path;
  }
  json j = minimal();
  j["seeds"] = {{"partition", 1}, {"shuffle", 2}};
  try {
    config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("shuffle"), std::string::npos);
  }
}

TEST(Config, MissingRequiredKeys) {
  for (const char* key : {"algorithm", "clients", "rounds", "lr", "model", "dataset"}) {
    json j = minimal();
    j.erase(key);
    EXPECT_THROW(config_from_json(j), ConfigError) << key;
  }
}

TEST(Config, TypeAndRangeErrors) {
  json j = minimal();
  j["clients"] = -3;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = minimal();
  j["lr"] = "fast";
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = minimal();
  j["local_epochs"] = 1;  // too few for a look-ahead method
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = minimal();
  j["algorithm"] = "fedsgd";
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(Config, LoadConfigReportsMissingFileAndBadJson) {
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
  const std::string path = ::testing::TempDir() + "broken_config.json";
  std::ofstream(path) << "{\"algorithm\": ";
  EXPECT_THROW(load_config(path), ConfigError);
}

TEST(Report, ParsesRows) {
  const auto run = parse(step_csv(3));
  ASSERT_EQ(run.rows.size(), 3u);
  EXPECT_EQ(run.rows[2].round, 3u);
  EXPECT_EQ(run.rows[0].selected, (std::vector<std::size_t>{0, 1}));
  EXPECT_FALSE(run.rows[0].meta_loss);
  EXPECT_EQ(run.rows[0].wall_ms, 3);
}

TEST(Report, TrailingMeanCrossesSeventyAtRoundTwelve) {
  const auto run = parse(step_csv(20));
  EXPECT_EQ(rounds_to_milestone(run, 0.70), 12u);
  EXPECT_EQ(rounds_to_milestone(run, 0.80), 13u);
  EXPECT_FALSE(rounds_to_milestone(run, 0.95));
  EXPECT_EQ(rounds_to_milestone(run, 0.70, 1), 10u);
  EXPECT_NEAR(final_accuracy(run), 0.9, 1e-15);
}

TEST(Report, ParseErrorsNameTheLine) {
  EXPECT_NE(parse_error("").find("m.csv:1: missing header"), std::string::npos);
  EXPECT_NE(parse_error("round,acc\n").find("m.csv:1:"), std::string::npos);
  std::string bad = step_csv(2) + "3,fedavg,1.5,1.0,,0,1\n";
  EXPECT_NE(parse_error(bad).find("m.csv:4: bad accuracy"), std::string::npos);
  bad = step_csv(2) + "3,fedavg,0.5,1.0\n";
  EXPECT_NE(parse_error(bad).find("m.csv:4: expected 7 fields"), std::string::npos);
  bad = step_csv(2) + "2,fedavg,0.5,1.0,,0,1\n";
  EXPECT_NE(parse_error(bad).find("m.csv:4: rounds must increase"), std::string::npos);
}

TEST(Report, TablePreservesInputOrderAndMarksMissedMilestones) {
  auto slow = parse(step_csv(20), "slow");
  auto fast = parse(step_csv(11), "fast");
  const std::string table = format_report({slow, fast}, {0.7, 0.95});
  const auto slow_at = table.find("slow"), fast_at = table.find("fast");
  ASSERT_NE(slow_at, std::string::npos);
  ASSERT_NE(fast_at, std::string::npos);
  EXPECT_LT(slow_at, fast_at);
  const std::string fast_line = table.substr(fast_at, table.find('\n', fast_at) - fast_at);
  EXPECT_EQ(std::count(fast_line.begin(), fast_line.end(), '\xe2'), 2);  // both milestones missed
  EXPECT_NE(table.find("70%"), std::string::npos);
}

TEST(Report, LongRunNamesAreNotTruncated) {
  const std::string name(90, 'x');
  const std::string table = format_report({parse(step_csv(12), name)}, {0.7});
  EXPECT_NE(table.find(name + "  fedavg"), std::string::npos);
  EXPECT_NE(table.find("12"), std::string::npos);
}

TEST(Config, ShippedConfigsParse) {
  std::size_t n = 0;
  for (const auto& entry : std::filesystem::directory_iterator(FEDMETA_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_config(entry.path().string())) << entry.path();
    ++n;
  }
  EXPECT_GE(n, 6u);
}
