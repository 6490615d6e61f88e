#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "normssl/checkpoint.hpp"
#include "normssl/verify.hpp"

using namespace normssl;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("normssl_test_" + name);
}

std::vector<double> losses_after(Trainer& t) {
  std::vector<double> out;
  while (!t.finished()) out.push_back(t.run_epoch().loss);
  return out;
}

}  // namespace

TEST(Checkpoint, BytesRoundTrip) {
  CheckpointData d;
  d.config_text = "a = 1\n";
  d.config_hash = "0123456789abcdef";
  d.rng_state = "42";
  d.step = 7;
  d.epoch = 3;
  d.has_target = true;
  d.records["x"] = {{2, 2}, {1.0, -0.0, 1e-300, std::numeric_limits<double>::max()}};
  std::stringstream buf;
  write_checkpoint(buf, d);
  const CheckpointData back = read_checkpoint(buf);
  EXPECT_EQ(back.step, 7u);
  EXPECT_TRUE(back.has_target);
  EXPECT_FALSE(back.has_captured);
  ASSERT_EQ(back.at("x").shape, (Shape{2, 2}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(back.at("x").values[i]),
                                                std::bit_cast<std::uint64_t>(d.records["x"].values[i]));
}

TEST(Checkpoint, LayoutIsLittleEndian) {
  CheckpointData d;
  std::stringstream buf;
  write_checkpoint(buf, d);
  const std::string bytes = buf.str();
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(bytes.substr(0, 8), "NSSLCKPT");
  EXPECT_EQ(bytes[8], '\x01');
  EXPECT_EQ(bytes[9], '\0');
}

TEST(Checkpoint, RejectsForeignAndFutureFiles) {
  std::stringstream junk("not a checkpoint at all");
  EXPECT_THROW(read_checkpoint(junk), CheckpointError);
  CheckpointData d;
  d.version = kCheckpointVersion + 1;
  std::stringstream buf;
  write_checkpoint(buf, d);
  try {
    read_checkpoint(buf);
    FAIL() << "future version accepted";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(Checkpoint, TruncatedFileIsAnError) {
  ExperimentConfig c = small_test_config();
  Trainer t(c, load_data(c));
  std::stringstream buf;
  write_checkpoint(buf, snapshot(t.state()));
  std::string bytes = buf.str();
  bytes.resize(bytes.size() / 2);
  std::stringstream cut(bytes);
  EXPECT_THROW(read_checkpoint(cut), CheckpointError);
}

TEST(Checkpoint, TamperedConfigIsDetected) {
  ExperimentConfig c = small_test_config();
  Trainer t(c, load_data(c));
  CheckpointData d = snapshot(t.state());
  d.config_text += "lr = 0.5\n";
  EXPECT_THROW(restore(d), CheckpointError);
}

TEST(Checkpoint, ResumeFollowsTheSameTrajectory) {
  for (const char* name : {"vanilla-bn", "modified-init"}) {
    ExperimentConfig c = small_test_config();
    if (std::string(name) == "modified-init") c.init = InitMode::bn_capture_reinit;
    c.epochs = 4;
    c.probe_iterations = 5;
    const DataSplits data = load_data(c);

    Trainer straight(c, data);
    const std::vector<double> expected = losses_after(straight);

    Trainer first(c, data);
    first.run_epoch();
    first.run_epoch();
    const auto path = temp_path(std::string(name) + ".bin");
    save_checkpoint(path, first.state());
    Trainer resumed(load_checkpoint(path), data);
    std::filesystem::remove(path);
    EXPECT_EQ(resumed.state().step, 4u);
    const std::vector<double> rest = losses_after(resumed);
    ASSERT_EQ(rest.size(), 2u);
    EXPECT_EQ(rest[0], expected[2]) << name;
    EXPECT_EQ(rest[1], expected[3]) << name;
    EXPECT_EQ(parameter_hash(resumed.state().online.params), parameter_hash(straight.state().online.params));
    EXPECT_EQ(parameter_hash(resumed.state().target->params), parameter_hash(straight.state().target->params));
  }
}
