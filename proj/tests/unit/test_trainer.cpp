#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "voxcomp/error.hpp"
#include "voxcomp/io.hpp"
#include "voxcomp/trainer.hpp"

using namespace voxcomp;
using vc_test::TempDir;

namespace {

const Corpus& tiny_corpus() {
    static const Corpus corpus = [] {
        const auto spec = default_phantom_spec({16, 16, 16});
        RemovalPolicy p;
        p.protected_classes = protected_class_ids(spec);
        p.seed = 5;
        return build_corpus(generate_phantoms(spec, 4, 2), p, 0.5);
    }();
    return corpus;
}

ExperimentConfig tiny_config(ExperimentName name, int epochs = 2) {
    ExperimentConfig c;
    c.name = name;
    c.dae.input_shape = {16, 16, 16};
    c.dae.channel_widths = {2, 4, 4, 4};
    c.epochs = epochs;
    c.learning_rate = 1e-3;
    c.seed = 3;
    c.apply_name();
    return c;
}

}  // namespace

TEST(ExperimentConfig, NamesMapToVariants) {
    const std::map<ExperimentName, std::pair<bool, bool>> expected{
        {ExperimentName::dae_b, {false, false}},
        {ExperimentName::dae_agg, {false, true}},
        {ExperimentName::dae_res, {true, false}},
        {ExperimentName::dae_agg_res, {true, true}},
        {ExperimentName::multiclass_agg, {false, true}},
    };
    for (const auto& [name, v] : expected) {
        ExperimentConfig c;
        c.name = name;
        if (name == ExperimentName::multiclass_agg) c.dae = DaeConfig::multiclass_preset();
        c.apply_name();
        EXPECT_EQ(c.dae.residual, v.first) << to_string(name);
        EXPECT_EQ(c.loss.aggregated, v.second) << to_string(name);
        EXPECT_EQ(c.loss.mapping == Mapping::residual, v.first);
        EXPECT_NO_THROW(c.validate());
    }
}

TEST(ExperimentConfig, Defaults) {
    const ExperimentConfig c;
    EXPECT_EQ(c.epochs, 100);
    EXPECT_DOUBLE_EQ(c.learning_rate, 1e-4);
    EXPECT_DOUBLE_EQ(c.beta1, 0.3);
    EXPECT_DOUBLE_EQ(c.beta2, 0.999);
    EXPECT_DOUBLE_EQ(c.adam_eps, 1e-8);
    EXPECT_EQ(c.batch_size, 1);
}

TEST(ExperimentConfig, JsonRejectsUnknownAndConflictingKeys) {
    auto j = to_json(tiny_config(ExperimentName::dae_res));
    const auto back = experiment_config_from_json(j);
    EXPECT_EQ(back.hash(), tiny_config(ExperimentName::dae_res).hash());
    auto typo = j;
    typo["epoch"] = 3;
    EXPECT_THROW(experiment_config_from_json(typo), ConfigError);
    auto conflict = j;
    conflict["dae"]["residual"] = false;
    EXPECT_THROW(experiment_config_from_json(conflict), ConfigError);
    auto multi = nlohmann::json{{"name", "multiclass_agg"}};
    const auto mc = experiment_config_from_json(multi);
    EXPECT_EQ(mc.dae.num_classes, 13);
    EXPECT_EQ(mc.dae.final_activation, FinalActivation::softmax);
    EXPECT_TRUE(mc.loss.aggregated);
    EXPECT_EQ(mc.loss.mapping, Mapping::full);
}

TEST(ExperimentConfig, HashCoversOptimiserSettings) {
    auto a = tiny_config(ExperimentName::dae_b), b = a;
    b.beta2 = 0.99;
    EXPECT_NE(a.hash(), b.hash());
    auto c = a;
    c.output_dir = "/elsewhere";
    EXPECT_EQ(a.hash(), c.hash());
}

TEST(Adam, SingleStepMatchesClosedForm) {
    DaeConfig cfg;
    cfg.input_shape = {16, 16, 16};
    cfg.channel_widths = {1, 1, 1, 1};
    Dae model(cfg, 1);
    auto grads = model.make_gradients();
    grads.weight[0][0] = 0.5f;
    grads.bias[0][0] = -2.0f;
    const float w0 = model.layers()[0].weight[0], b0 = model.layers()[0].bias[0];
    const float w1 = model.layers()[0].weight[1];
    Adam adam(model, 1e-3, 0.3, 0.999, 1e-8);
    adam.step(model, grads);
    // First step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
    EXPECT_NEAR(model.layers()[0].weight[0], w0 - 1e-3 * 0.5 / (0.5 + 1e-8), 1e-7);
    EXPECT_NEAR(model.layers()[0].bias[0], b0 + 1e-3 * 2.0 / (2.0 + 1e-8), 1e-7);
    EXPECT_EQ(model.layers()[0].weight[1], w1);
    EXPECT_EQ(adam.steps(), 1);
}

TEST(PlanEpoch, EveryVariantOnceAndGroupsStayTogether) {
    const std::vector<std::size_t> sizes{3, 3, 2, 3};
    for (bool aggregated : {false, true})
        for (int bs : {1, 2, 5}) {
            Rng rng(4);
            const auto plan = plan_epoch(sizes, aggregated, bs, rng);
            std::set<std::pair<std::size_t, std::size_t>> seen;
            for (const auto& batch : plan) {
                std::set<std::size_t> groups;
                for (const auto& ref : batch) {
                    EXPECT_TRUE(seen.insert(ref).second);
                    groups.insert(ref.first);
                }
                if (aggregated) {
                    std::size_t expected = 0;
                    for (auto g : groups) expected += sizes[g];
                    EXPECT_EQ(batch.size(), expected);
                    EXPECT_LE(groups.size(), static_cast<std::size_t>(bs));
                } else {
                    EXPECT_LE(batch.size(), static_cast<std::size_t>(bs));
                }
            }
            EXPECT_EQ(seen.size(), 11u);
        }
}

TEST(Train, ZeroEpochsWritesInitialCheckpoint) {
    TempDir dir;
    auto cfg = tiny_config(ExperimentName::dae_agg_res, 0);
    cfg.output_dir = dir.path().string();
    const auto r = train(cfg, tiny_corpus(), "cafebabe");
    EXPECT_TRUE(r.record.epoch_losses.empty());
    ASSERT_TRUE(std::filesystem::exists(r.record.checkpoint));
    const auto ck = load_checkpoint(r.record.checkpoint);
    EXPECT_EQ(ck.meta.epoch, 0);
    EXPECT_EQ(ck.meta.manifest_checksum, "cafebabe");
    EXPECT_EQ(ck.meta.config_hash, cfg.hash());
    const auto fresh = build_dae(cfg.dae, cfg.seed);
    for (std::size_t i = 0; i < fresh.layers().size(); ++i) EXPECT_EQ(ck.model.layers()[i].weight, fresh.layers()[i].weight);
}

TEST(Train, DeterministicAndRecorded) {
    TempDir dir;
    auto cfg = tiny_config(ExperimentName::dae_agg, 2);
    cfg.output_dir = dir.path().string();
    cfg.checkpoint_every = 1;
    const auto a = train(cfg, tiny_corpus());
    const auto b = train(cfg, tiny_corpus());
    ASSERT_EQ(a.record.epoch_losses.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_TRUE(std::isfinite(a.record.epoch_losses[i]));
        EXPECT_NEAR(a.record.epoch_losses[i], b.record.epoch_losses[i], 1e-5);
    }
    EXPECT_EQ(a.record.config_hash, cfg.hash());
    EXPECT_TRUE(std::filesystem::exists(dir / "dae_agg_epoch1.ckpt"));
    EXPECT_TRUE(std::filesystem::exists(dir / "dae_agg.ckpt"));
    EXPECT_TRUE(std::filesystem::exists(dir / "dae_agg_record.json"));
}

TEST(Train, SeedIsolation) {
    // The initialisation stream depends only on the experiment seed, not the corpus seed.
    auto cfg = tiny_config(ExperimentName::dae_b, 0);
    const auto spec = default_phantom_spec({16, 16, 16});
    RemovalPolicy p;
    p.protected_classes = protected_class_ids(spec);
    p.seed = 99;
    const auto other = build_corpus(generate_phantoms(spec, 4, 2), p, 0.5);
    const auto a = train(cfg, tiny_corpus()), b = train(cfg, other);
    for (std::size_t i = 0; i < a.model.layers().size(); ++i)
        EXPECT_EQ(a.model.layers()[i].weight, b.model.layers()[i].weight);
    // And the corpus built with a given seed is unaffected by training.
    RemovalPolicy q = p;
    q.seed = 5;
    const auto again = build_corpus(generate_phantoms(spec, 4, 2), q, 0.5);
    EXPECT_EQ(again.pairs.size(), tiny_corpus().pairs.size());
    for (std::size_t i = 0; i < again.pairs.size(); ++i)
        EXPECT_EQ(again.pairs[i].incomplete, tiny_corpus().pairs[i].incomplete);
}

TEST(Train, RejectsMismatchedCorpus) {
    auto cfg = tiny_config(ExperimentName::dae_b, 1);
    cfg.dae.input_shape = {32, 32, 32};
    EXPECT_THROW(train(cfg, tiny_corpus()), ConfigError);
}

TEST(Train, NonFiniteLossAborts) {
    auto cfg = tiny_config(ExperimentName::dae_b, 1);
    Dae broken = build_dae(cfg.dae, 1);
    broken.layers().back().bias[0] = std::nanf("");
    try {
        train(cfg, tiny_corpus(), "", TrainOptions{{}, &broken});
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("epoch 0"), std::string::npos);
        EXPECT_NE(msg.find("batch 0"), std::string::npos);
    }
}

TEST(Ablation, FourRecordsWithDistinctHashes) {
    TempDir dir;
    auto cfg = tiny_config(ExperimentName::dae_b, 1);
    cfg.output_dir = dir.path().string();
    const auto suite = run_ablation_suite(cfg, tiny_corpus(), "0badf00d");
    EXPECT_FALSE(suite.partial());
    ASSERT_EQ(suite.runs.size(), 4u);
    std::set<std::string> hashes;
    for (const auto& r : suite.runs) {
        hashes.insert(r.record.config_hash);
        EXPECT_EQ(r.record.manifest_checksum, "0badf00d");
        EXPECT_TRUE(std::filesystem::exists(r.record.checkpoint));
    }
    EXPECT_EQ(hashes.size(), 4u);
}

TEST(Ablation, FailuresMarkSuitePartial) {
    auto cfg = tiny_config(ExperimentName::dae_b, 1);
    Dae broken = build_dae(cfg.dae, 1);
    broken.layers().back().bias[0] = std::nanf("");
    // Members whose network config differs from the warm start fail with ConfigError, the rest hit the NaN.
    const auto suite = run_ablation_suite(cfg, tiny_corpus(), "", TrainOptions{{}, &broken});
    EXPECT_TRUE(suite.partial());
    EXPECT_EQ(suite.runs.size() + suite.failures.size(), 4u);
}

TEST(Ablation, NeedsThreeThresholds) {
    const auto spec = default_phantom_spec({16, 16, 16});
    RemovalPolicy p;
    p.protected_classes = protected_class_ids(spec);
    p.thresholds = {0.1};
    const auto corpus = build_corpus(generate_phantoms(spec, 3, 2), p, 0.5);
    EXPECT_THROW(run_ablation_suite(tiny_config(ExperimentName::dae_b), corpus), ConfigError);
}
