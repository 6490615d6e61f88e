#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "normssl/verify.hpp"

using namespace normssl;

TEST(Grid, PerComponentTableHasAllColumns) {
  const AblationGrid g = table1_grid();
  ASSERT_EQ(g.cells.size(), 22u);
  std::size_t byol = 0, simclr = 0;
  std::set<std::string> labels;
  for (const auto& cell : g.cells) {
    labels.insert(cell.label);
    (cell.config.objective == Objective::byol ? byol : simclr)++;
  }
  EXPECT_EQ(byol, 15u);
  EXPECT_EQ(simclr, 7u);
  EXPECT_EQ(labels.size(), 22u);
  EXPECT_TRUE(labels.contains("byol -/-/-"));
  EXPECT_TRUE(labels.contains("byol LN/LN/LN"));
  EXPECT_TRUE(labels.contains("simclr LN/LN"));
  EXPECT_NO_THROW(check_unique(g));
}

TEST(Grid, SummaryTableUsesPresets) {
  const AblationGrid g = table2_grid({"epochs=3"});
  ASSERT_EQ(g.cells.size(), 4u);
  for (const auto& cell : g.cells) {
    EXPECT_EQ(cell.config.epochs, 3u);
    ExperimentConfig p = preset(cell.label);
    p.epochs = 3;
    EXPECT_EQ(config_hash(cell.config), config_hash(p));
  }
}

TEST(Grid, SpecMergesTheSharedRun) {
  const AblationGrid g = parse_grid("include = table1\ninclude = table2\nset = epochs=2\n");
  EXPECT_EQ(g.cells.size(), 24u);  // 22 + 4, two runs shared
  std::size_t merged = 0;
  for (const auto& cell : g.cells) merged += cell.label.find(" = ") != std::string::npos;
  EXPECT_EQ(merged, 2u);
  EXPECT_NO_THROW(check_unique(g));
}

TEST(Grid, SeedsExpandEveryCell) {
  const AblationGrid g = parse_grid("cell = a: lr=0.1\ncell = b: lr=0.2 epochs=3\nseeds = 1, 2, 3\n");
  ASSERT_EQ(g.cells.size(), 6u);
  EXPECT_EQ(g.cells[4].label, "b");
  EXPECT_EQ(g.cells[4].config.seed, 2u);
  EXPECT_EQ(g.cells[4].config.epochs, 3u);
}

TEST(Grid, SampleFilesParse) {
  const ExperimentConfig c = load_config(NORMSSL_SAMPLES_DIR "/toy.conf");
  EXPECT_NO_THROW(validate(c));
  EXPECT_EQ(c.epochs, 50u);
  std::ifstream in(NORMSSL_SAMPLES_DIR "/table2-toy.grid");
  std::stringstream text;
  text << in.rdbuf();
  const AblationGrid g = parse_grid(text.str());
  EXPECT_EQ(g.cells.size(), 12u);
  for (const auto& cell : g.cells) EXPECT_EQ(cell.config.image_size, 16u);
}

TEST(Grid, EmptyOrMalformedSpecsAreRejected) {
  try {
    parse_grid("# nothing\nseeds = 1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("no cells"), std::string::npos);
  }
  EXPECT_THROW(parse_grid("include = table3\n"), ConfigError);
  EXPECT_THROW(parse_grid("cell = nolabel\n"), ConfigError);
  EXPECT_THROW(parse_grid("cell = x: bogus=1\n"), ConfigError);
  EXPECT_THROW(parse_grid("frobnicate = 1\n"), ConfigError);
  EXPECT_THROW(run_grid({}), ConfigError);
}

TEST(Grid, DuplicateCellsAreRejected) {
  const AblationGrid g = parse_grid("cell = a: lr=0.1\ncell = b: lr=0.1\n");
  EXPECT_THROW(check_unique(g), ConfigError);
}

TEST(Grid, StaticDetectorAgreesWithSwapTest) {
  const PropertyResult r = batch_statistics_agreement(5);
  EXPECT_TRUE(r.passed) << r.note;
}

TEST(Grid, RunReportsRowsAndDivergence) {
  ExperimentConfig base = small_test_config();
  base.probe_iterations = 5;
  AblationGrid g;
  g.cells.push_back({"ok", base});
  ExperimentConfig bad = base;
  bad.encoder_norm = bad.projector_norm = bad.predictor_norm = NormKind::none;
  bad.optimizer = OptimizerKind::sgd;
  bad.lr = 1e200;
  bad.warmup_epochs = 0;
  bad.epochs = 10;
  g.cells.push_back({"boom", bad});
  std::size_t seen = 0;
  const auto rows = run_grid(g, 2, [&](const GridRow&) { ++seen; });
  EXPECT_EQ(seen, 2u);
  EXPECT_EQ(rows[0].status, "ok");
  EXPECT_TRUE(rows[0].uses_batch_statistics);
  EXPECT_TRUE(rows[0].batch_dependent);
  ASSERT_TRUE(rows[0].probe.has_value());
  EXPECT_EQ(rows[1].status, "diverged");
  EXPECT_FALSE(rows[1].uses_batch_statistics);
  EXPECT_FALSE(rows[1].batch_dependent);

  const std::string header = grid_csv_header();
  const auto columns = [](const std::string& s) {
    std::size_t n = 0;
    bool quoted = false;
    for (char c : s) {
      if (c == '"') quoted = !quoted;
      n += c == ',' && !quoted;
    }
    return n;
  };
  for (const auto& r : rows) EXPECT_EQ(columns(grid_csv_line(r)), columns(header)) << grid_csv_line(r);
}
