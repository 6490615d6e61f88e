#include <gtest/gtest.h>

#include "normssl/verify.hpp"

using namespace normssl;

namespace {

ExperimentConfig reinit_config() {
  ExperimentConfig c = small_test_config();
  c.init = InitMode::bn_capture_reinit;
  return c;
}

Tensor batch_of(std::size_t n, std::size_t side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return detail::random_tensor({n, side, side, 3}, rng);
}

}  // namespace

TEST(InitProtocol, ReproducesBatchNormOnCapturedBatch) {
  const ExperimentConfig c = reinit_config();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const InitEquivalence eq = init_equivalence(c, batch_of(8, c.image_size, seed));
    EXPECT_LE(eq.first_site, 1e-10) << eq.first_site_name;
    EXPECT_LE(eq.end_to_end, 1e-4);
  }
}

TEST(InitProtocol, AffinesFollowCapturedStatistics) {
  const ExperimentConfig c = reinit_config();
  ReinitResult re = apply_bn_capture_reinit(build(c), batch_of(8, c.image_size, 9), c.stat_floor);
  ASSERT_EQ(re.stats.sites.size(), re.network.sites.size());
  for (const NormSite& site : re.network.sites) {
    EXPECT_EQ(site.spec.kind, NormKind::none);
    const SiteStats* st = re.stats.find(site.name);
    ASSERT_NE(st, nullptr) << site.name;
    const auto gamma = re.network.params[site.gamma].data();
    const auto beta = re.network.params[site.beta].data();
    for (std::size_t ch = 0; ch < site.channels; ++ch) {
      const double g0 = site.final_in_block ? 0.0 : 1.0;
      EXPECT_DOUBLE_EQ(gamma[ch], g0 / st->std[ch]);
      EXPECT_DOUBLE_EQ(beta[ch], -st->mean[ch] * gamma[ch]);
      EXPECT_GE(st->std[ch], c.stat_floor);
    }
  }
  EXPECT_FALSE(re.network.uses_batch_statistics());
}

TEST(InitProtocol, ReinitNetworkHandlesSingleImages) {
  const ExperimentConfig c = reinit_config();
  ReinitResult re = apply_bn_capture_reinit(build(c), batch_of(8, c.image_size, 3), c.stat_floor);
  const Tensor one = batch_of(1, c.image_size, 4);
  NoGradGuard no_grad;
  EXPECT_NO_THROW(re.network.encode(one));
  re.network.mode = NormMode::eval;
  EXPECT_NO_THROW(re.network.encode(one));
}

TEST(InitProtocol, CaptureLeavesRunningStatisticsAlone) {
  const ExperimentConfig c = reinit_config();
  NetworkAssembly net = build(c);
  const auto before = parameter_hash(net.params);
  capture_stats(net, batch_of(8, c.image_size, 5));
  for (const auto& s : net.sites) {
    EXPECT_FALSE(s.running.populated) << s.name;
    EXPECT_FALSE(s.last_batch.has_value()) << s.name;
  }
  EXPECT_EQ(parameter_hash(net.params), before);
}

TEST(InitProtocol, RejectsUnusableInputs) {
  const ExperimentConfig c = reinit_config();
  NetworkAssembly net = build(c);
  EXPECT_THROW(capture_stats(net, batch_of(1, c.image_size, 6)), Error);
  NetworkAssembly plain = build(preset("no-bn"));
  EXPECT_THROW(capture_stats(plain, batch_of(4, 8, 6)), Error);
}

TEST(InitProtocol, StatFloorBoundsDeadChannels) {
  // An all-zero batch gives zero variance after the stem: sigma = sqrt(eps_bn) < floor.
  const ExperimentConfig c = reinit_config();
  NetworkAssembly net = build(c);
  const CapturedStats st = capture_stats(net, Tensor::zeros({4, c.image_size, c.image_size, 3}), 0.01);
  for (double s : st.sites.front().std) EXPECT_EQ(s, 0.01);
}

TEST(InitProtocol, TrainerCapturesBeforeTheFirstStep) {
  ExperimentConfig c = reinit_config();
  Trainer trainer(c, load_data(c));
  ASSERT_TRUE(trainer.state().captured.has_value());
  EXPECT_FALSE(trainer.state().online.uses_batch_statistics());
  EXPECT_FALSE(trainer.state().target->uses_batch_statistics());
}

TEST(InitProtocol, SuiteMeetsTolerances) {
  for (const auto& r : init_protocol_suite(11)) EXPECT_TRUE(r.passed) << r.name << " " << r.measured;
}
