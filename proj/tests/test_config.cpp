#include <gtest/gtest.h>

#include <cstdlib>

#include "ptq4vm/config.hpp"

using namespace ptq4vm;

namespace {

TEST(ConfigTest, CanonicalTextRoundTripsAndIsIdempotent) {
    RunConfig cfg;
    const std::string text = config_text(cfg);
    RunConfig parsed;
    parsed.seed = 12345;  // will be overwritten by the full text
    apply_config_text(parsed, text);
    EXPECT_EQ(config_text(parsed), text);
    EXPECT_EQ(config_hash(parsed), config_hash(cfg));
}

TEST(ConfigTest, ParsesCommentsBlanksAndSpacing) {
    RunConfig cfg;
    apply_config_text(cfg,
                      "# a comment\n"
                      "\n"
                      "  seed=99   \n"
                      "biq_lr = 1e-6  # trailing comment\n"
                      "flow =lk\n");
    EXPECT_EQ(cfg.seed, 99u);
    EXPECT_DOUBLE_EQ(cfg.biq_lr, 1e-6);
    EXPECT_EQ(cfg.flow, "lk");
    EXPECT_EQ(cfg.calib_clips, 64);  // untouched keys keep defaults
}

TEST(ConfigTest, RejectsUnknownKeysAndBadValues) {
    RunConfig cfg;
    EXPECT_THROW(apply_config_text(cfg, "biq_iters = 3\n"), std::invalid_argument);
    EXPECT_THROW(apply_config_text(cfg, "seed = banana\n"), std::invalid_argument);
    EXPECT_THROW(apply_config_text(cfg, "biq_lr = 1e-3x\n"), std::invalid_argument);
    EXPECT_THROW(apply_config_text(cfg, "just a line\n"), std::invalid_argument);
}

TEST(ConfigTest, HashTracksEveryField) {
    RunConfig base;
    const std::uint64_t h0 = config_hash(base);
    RunConfig a = base;
    a.seed = 8;
    RunConfig b = base;
    b.gac_lambda = 0.07;
    RunConfig c = base;
    c.out_dir = "elsewhere";
    EXPECT_NE(config_hash(a), h0);
    EXPECT_NE(config_hash(b), h0);
    EXPECT_NE(config_hash(c), h0);
    RunConfig same;
    EXPECT_EQ(config_hash(same), h0);
}

TEST(ConfigTest, ModuleSeedsDeriveFromMasterAndDiffer) {
    RunConfig cfg;
    cfg.seed = 1001;
    const auto d = dataset_config(cfg);
    const auto n = net_config(cfg);
    const auto p = pretrain_config(cfg);
    const auto b = biq_config(cfg);
    const auto g = gac_config(cfg);
    EXPECT_NE(d.seed, n.seed);
    EXPECT_NE(p.seed, b.seed);
    EXPECT_NE(b.seed, g.seed);

    RunConfig other = cfg;
    other.seed = 1002;
    EXPECT_NE(dataset_config(other).seed, d.seed);
    EXPECT_NE(biq_config(other).seed, b.seed);

    RunConfig again = cfg;
    EXPECT_EQ(dataset_config(again).seed, d.seed);
}

TEST(ConfigTest, ResolvedConfigsCarryEveryKnob) {
    RunConfig cfg;
    cfg.calib_clips = 12;
    cfg.eval_frames = 7;
    cfg.biq_iterations = 55;
    cfg.biq_batch = 3;
    cfg.gac_epochs = 4;
    cfg.gac_lambda = 0.11;
    cfg.pretrain_target_mad = 0.02;
    const auto d = dataset_config(cfg);
    EXPECT_EQ(d.calib_clips, 12);
    EXPECT_EQ(d.eval_frames, 7);
    const auto b = biq_config(cfg);
    EXPECT_EQ(b.iterations, 55);
    EXPECT_EQ(b.batch, 3);
    const auto g = gac_config(cfg);
    EXPECT_EQ(g.epochs, 4);
    EXPECT_DOUBLE_EQ(g.lambda_ofa, 0.11);
    EXPECT_DOUBLE_EQ(pretrain_config(cfg).target_mad, 0.02);
}

TEST(ConfigTest, FlowSourceMapping) {
    RunConfig cfg;
    EXPECT_EQ(static_cast<int>(flow_source(cfg)), static_cast<int>(FlowSource::GroundTruth));
    cfg.flow = "lk";
    EXPECT_EQ(static_cast<int>(flow_source(cfg)), static_cast<int>(FlowSource::Lk));
    cfg.flow = "raft";
    EXPECT_THROW(flow_source(cfg), std::invalid_argument);
}

TEST(ConfigTest, ThreadEnvCapsButNeverRaises) {
    RunConfig cfg;
    cfg.threads = 4;
    unsetenv("PTQ4VM_THREADS");
    EXPECT_EQ(resolve_threads(cfg), 4);
    setenv("PTQ4VM_THREADS", "2", 1);
    EXPECT_EQ(resolve_threads(cfg), 2);
    setenv("PTQ4VM_THREADS", "16", 1);
    EXPECT_EQ(resolve_threads(cfg), 4);
    setenv("PTQ4VM_THREADS", "garbage", 1);
    EXPECT_EQ(resolve_threads(cfg), 4);
    unsetenv("PTQ4VM_THREADS");
    cfg.threads = 0;
    EXPECT_GE(resolve_threads(cfg), 1);
}

}  // namespace
