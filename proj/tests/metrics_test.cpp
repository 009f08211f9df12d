#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperaug/metrics.hpp"
#include "testutil.hpp"

using hyperaug::DataError;
using hyperaug::EpochRecord;
using hyperaug::MetricsWriter;
using hyperaug::PolicyParams;
using hyperaug::PolicySnapshot;

namespace {

PolicySnapshot sample_snapshot() {
  auto snap = PolicyParams<double>::init(2, 0.05).snapshot();
  snap.stages[0].pi[3] = 1.0 / 3.0;
  snap.stages[0].p[0] = 0.1 + 0.2;  // deliberately not a round binary value
  snap.stages[1].mu[10] = 1e-17;
  return snap;
}

EpochRecord sample_record(int64_t epoch) {
  EpochRecord rec;
  rec.epoch = epoch;
  rec.train_loss = 1.25 / double(epoch);
  rec.val_loss = 0.75;
  rec.test_error = 0.0625 * double(epoch);
  rec.grad_norm_theta = 3.5;
  rec.hypergrad_norm = 0.017;
  rec.policy = sample_snapshot();
  rec.peak_tape_nodes = 777 + size_t(epoch);
  rec.wall_ms = 12.5;
  rec.divergence_skips = epoch == 2 ? 3 : 0;
  return rec;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

}  // namespace

TEST(SnapshotJson, RoundtripsBitExactly) {
  PolicySnapshot snap = sample_snapshot();
  auto j = hyperaug::detail::snapshot_to_json(snap);
  PolicySnapshot back = hyperaug::detail::snapshot_from_json(j);
  ASSERT_EQ(back.stages.size(), 2u);
  for (size_t s = 0; s < 2; ++s) {
    EXPECT_EQ(back.stages[s].pi, snap.stages[s].pi);
    EXPECT_EQ(back.stages[s].p, snap.stages[s].p);
    EXPECT_EQ(back.stages[s].mu, snap.stages[s].mu);
  }
}

TEST(MetricsJsonl, WriterAndReaderRoundtrip) {
  auto dir = testutil::fresh_dir("metrics");
  auto path = (dir / "metrics.jsonl").string();
  {
    MetricsWriter w(path, true);
    w.write_initial(sample_snapshot(), 0.9);
    w.write_epoch(sample_record(1));
    w.write_epoch(sample_record(2));
  }

  auto records = hyperaug::read_metrics_jsonl(path);
  ASSERT_EQ(records.size(), 3u);

  EXPECT_EQ(records[0].epoch, 0);
  EXPECT_EQ(records[0].train_loss, 0.0);
  EXPECT_EQ(records[0].val_loss, 0.0);
  EXPECT_EQ(records[0].test_error, 0.9);
  EXPECT_EQ(records[0].peak_tape_nodes, 0u);
  EXPECT_EQ(records[0].policy.stages[0].p[0], 0.1 + 0.2);

  EXPECT_EQ(records[1].epoch, 1);
  EXPECT_EQ(records[1].train_loss, 1.25);
  EXPECT_EQ(records[1].wall_ms, 12.5);
  EXPECT_EQ(records[1].divergence_skips, 0);
  EXPECT_EQ(records[2].divergence_skips, 3);
  EXPECT_EQ(records[2].test_error, 0.125);
  EXPECT_EQ(records[2].peak_tape_nodes, 779u);
  EXPECT_EQ(records[2].policy.stages[1].mu[10], 1e-17);
}

TEST(MetricsJsonl, TimingsFlagZeroesWallClock) {
  auto dir = testutil::fresh_dir("metrics");
  auto path = (dir / "metrics.jsonl").string();
  {
    MetricsWriter w(path, false);
    w.write_epoch(sample_record(1));
  }
  auto records = hyperaug::read_metrics_jsonl(path);
  ASSERT_EQ(records.size(), 1u);
  EXPECT_EQ(records[0].wall_ms, 0.0);
}

TEST(MetricsJsonl, ReaderNamesBadLineAndSkipsBlanks) {
  auto dir = testutil::fresh_dir("metrics");
  auto path = (dir / "metrics.jsonl").string();
  {
    MetricsWriter w(path, true);
    w.write_initial(sample_snapshot(), 0.5);
    w.write_epoch(sample_record(1));
  }
  {
    std::ofstream app(path, std::ios::app);
    app << "\n{oops\n";
  }
  try {
    hyperaug::read_metrics_jsonl(path);
    FAIL() << "corrupt line accepted";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(path + ":4"), std::string::npos)
        << e.what();
  }

  EXPECT_THROW(hyperaug::read_metrics_jsonl((dir / "absent").string()),
               DataError);

  // A blank line alone is fine.
  auto clean = (dir / "clean.jsonl").string();
  {
    MetricsWriter w(clean, true);
    w.write_initial(sample_snapshot(), 0.5);
  }
  {
    std::ofstream app(clean, std::ios::app);
    app << "\n";
  }
  EXPECT_EQ(hyperaug::read_metrics_jsonl(clean).size(), 1u);
}

TEST(PolicyJson, RoundtripAndOpNameList) {
  auto dir = testutil::fresh_dir("policy");
  auto path = (dir / "policy.json").string();
  PolicySnapshot snap = sample_snapshot();
  hyperaug::write_policy_json(path, snap);

  nlohmann::json j = nlohmann::json::parse(std::ifstream(path));
  ASSERT_TRUE(j.contains("ops"));
  ASSERT_EQ(j["ops"].size(), 14u);
  EXPECT_EQ(j["ops"][0], "shear_x");
  EXPECT_EQ(j["ops"][13], "sharpness");
  ASSERT_EQ(j["stages"].size(), 2u);
  EXPECT_EQ(j["stages"][0]["pi"].size(), 14u);
  EXPECT_EQ(j["stages"][0]["mu"].size(), 11u);

  PolicySnapshot back = hyperaug::read_policy_json(path);
  EXPECT_EQ(back.stages[0].pi, snap.stages[0].pi);
  EXPECT_EQ(back.stages[1].mu, snap.stages[1].mu);

  auto bad = (dir / "bad.json").string();
  std::ofstream(bad) << "{not json";
  try {
    hyperaug::read_policy_json(bad);
    FAIL() << "bad JSON accepted";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad JSON"), std::string::npos);
  }
  EXPECT_THROW(hyperaug::read_policy_json((dir / "absent.json").string()),
               DataError);
}

TEST(PolicyEvolution, CsvLayoutAndBitExactValues) {
  auto dir = testutil::fresh_dir("evolution");
  auto metrics = (dir / "metrics.jsonl").string();
  {
    MetricsWriter w(metrics, true);
    w.write_initial(sample_snapshot(), 0.5);
    w.write_epoch(sample_record(1));
    w.write_epoch(sample_record(2));
  }
  auto csv = (dir / "policy_evolution.csv").string();
  hyperaug::export_policy_evolution(metrics, csv);

  auto lines = read_lines(csv);
  // 3 records x 2 stages x 14 ops, plus the header.
  ASSERT_EQ(lines.size(), size_t(1 + 3 * 2 * 14));
  EXPECT_EQ(lines[0], "epoch,stage,op,pi,p,mu");

  // First data row: epoch 0, stage 0, shear_x.
  std::istringstream row(lines[1]);
  std::string epoch, stage, op, pi, p, mu;
  std::getline(row, epoch, ',');
  std::getline(row, stage, ',');
  std::getline(row, op, ',');
  std::getline(row, pi, ',');
  std::getline(row, p, ',');
  std::getline(row, mu, ',');
  EXPECT_EQ(epoch, "0");
  EXPECT_EQ(stage, "0");
  EXPECT_EQ(op, "shear_x");
  EXPECT_EQ(std::strtod(pi.c_str(), nullptr), 1.0 / 14.0);
  EXPECT_EQ(std::strtod(p.c_str(), nullptr), 0.1 + 0.2);
  EXPECT_EQ(std::strtod(mu.c_str(), nullptr), 0.6224593312018546);

  // Magnitude-free ops leave the mu column empty (row ends with a comma).
  // invert is op index 5 within each 14-op block.
  const std::string& invert_row = lines[1 + 5];
  EXPECT_NE(invert_row.find(",invert,"), std::string::npos);
  EXPECT_EQ(invert_row.back(), ',');

  auto empty = (dir / "empty.jsonl").string();
  std::ofstream(empty).close();
  EXPECT_THROW(hyperaug::export_policy_evolution(empty, csv), DataError);
}

TEST(SweepCsv, WritesOneRowPerRun) {
  auto dir = testutil::fresh_dir("sweep");
  auto path = (dir / "sweep.csv").string();
  std::vector<hyperaug::SweepRow> rows(2);
  rows[0].param = "inner_steps";
  rows[0].value = 5.0;
  rows[0].seed = 3;
  rows[0].final_test_error = 0.125;
  rows[0].peak_memory_proxy = 1234;
  rows[1].param = "inner_steps";
  rows[1].value = 30.0;
  rows[1].seed = 4;
  rows[1].final_test_error = 0.0625;
  rows[1].peak_memory_proxy = 9999;
  rows[1].status = "diverged";
  hyperaug::write_sweep_csv(path, rows);

  auto lines = read_lines(path);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], "param,value,seed,final_test_error,peak_memory_proxy,status");
  EXPECT_EQ(lines[1], "inner_steps,5.0,3,0.125,1234,ok");
  EXPECT_EQ(lines[2], "inner_steps,30.0,4,0.0625,9999,diverged");
}

TEST(DoubleRepr, RoundTripsAwkwardValues) {
  for (double v : {1.0 / 3.0, 0.1, 1e-17, 6.02214076e23, 1e300, 0.0, -2.5}) {
    std::string s = hyperaug::detail::double_repr(v);
    EXPECT_EQ(std::strtod(s.c_str(), nullptr), v) << s;
  }
}
