#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "voxcomp/error.hpp"
#include "voxcomp/objective.hpp"

using namespace voxcomp;

namespace {

std::vector<double> random_probs(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

std::vector<double> random_mask(std::size_t n, double p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution d(p);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng) ? 1.0 : 0.0;
    return v;
}

// Independent scalar evaluation of one Dice term.
double dice_term(const std::vector<double>& y, const std::vector<double>& p, double eps) {
    double num = 0.0, yy = 0.0, pp = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        num += 2.0 * y[i] * p[i];
        yy += y[i] * y[i];
        pp += p[i] * p[i];
    }
    if (yy + pp + eps == 0.0) return 0.0;
    return 1.0 - (num + eps) / (yy + pp + eps);
}

/// A stand-in model output: fixed probability tensors per sample index.
Sample make_sample(const std::vector<double>& x, const std::vector<double>& y, Shape3 s) {
    Tensor tx(1, s), ty(1, s);
    for (std::size_t i = 0; i < x.size(); ++i) {
        tx.data[i] = static_cast<float>(x[i]);
        ty.data[i] = static_cast<float>(y[i]);
    }
    return Sample{tx, ty};
}

}  // namespace

TEST(Dice, IdenticalDisjointAndHandCounted) {
    const std::vector<double> a{1, 0, 1, 1, 0, 0, 1, 0};
    EXPECT_DOUBLE_EQ(dice_coefficient<double>(a, a, 0.0), 1.0);
    EXPECT_DOUBLE_EQ(dice_loss<double>(a, a, 0.0), 0.0);
    const std::vector<double> b{0, 1, 0, 0, 1, 1, 0, 1};
    EXPECT_DOUBLE_EQ(dice_coefficient<double>(a, b, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(dice_loss<double>(a, b, 0.0), 1.0);

    // 8 foreground voxels each, 4 shared.
    std::vector<double> y(16, 0.0), p(16, 0.0);
    for (int i = 0; i < 8; ++i) y[static_cast<std::size_t>(i)] = 1.0;
    for (int i = 4; i < 12; ++i) p[static_cast<std::size_t>(i)] = 1.0;
    EXPECT_EQ(dice_coefficient<double>(y, p, 0.0), 0.5);
    EXPECT_EQ(dice_loss<double>(y, p, 0.0), 0.5);
}

TEST(Dice, SymmetryAndRange) {
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto y = random_probs(64, s), p = random_probs(64, s + 100);
        const double a = dice_coefficient<double>(y, p), b = dice_coefficient<double>(p, y);
        EXPECT_NEAR(a, b, 1e-12);
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0);
    }
}

TEST(Dice, EmptyGridsAndShapeMismatch) {
    const std::vector<double> z(8, 0.0);
    EXPECT_DOUBLE_EQ(dice_coefficient<double>(z, z, 0.0), 1.0);
    EXPECT_DOUBLE_EQ(dice_loss<double>(z, z), 0.0);
    const std::vector<double> shorter(7, 0.0);
    EXPECT_THROW(dice_coefficient<double>(z, shorter), ShapeError);
}

TEST(Dice, GradientMatchesFiniteDifferences) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto y = random_mask(64, 0.4, s);
        auto p = random_probs(64, s + 1000);
        std::vector<double> g(64);
        dice_loss_grad<double>(y, p, 1e-6, g);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double h = 1e-6;
            auto pp = p, pm = p;
            pp[i] += h;
            pm[i] -= h;
            const double fd = (dice_loss<double>(y, pp) - dice_loss<double>(y, pm)) / (2 * h);
            ASSERT_NEAR(g[i], fd, 1e-3 * std::max(std::abs(fd), 1e-3));
        }
    }
}

TEST(Residual, GradientMatchesFiniteDifferencesAwayFromKinks) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto y = random_mask(64, 0.5, s);
        std::vector<double> x(64);
        for (std::size_t i = 0; i < 64; ++i) x[i] = y[i] * ((i % 3) != 0 ? 1.0 : 0.0);
        auto r = random_probs(64, s + 7);
        std::vector<double> g(64);
        residual_dice_loss_grad<double>(y, x, r, 1e-6, g);
        for (std::size_t i = 0; i < r.size(); ++i) {
            const double sum = x[i] + r[i];
            if (std::abs(sum) < 1e-4 || std::abs(sum - 1.0) < 1e-4) continue;
            const double h = 1e-6;
            auto rp = r, rm = r;
            rp[i] += h;
            rm[i] -= h;
            const double fd = (residual_dice_loss<double>(y, x, rp) - residual_dice_loss<double>(y, x, rm)) / (2 * h);
            ASSERT_NEAR(g[i], fd, 1e-3 * std::max(std::abs(fd), 1e-3));
        }
    }
}

TEST(Multiclass, GradientMatchesFiniteDifferences) {
    const int C = 3;
    const std::vector<double> w{0.5, 1.0, 2.0};
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto labels = vc_test::random_labels({4, 4, 4}, C - 1, s);
        const auto oh = one_hot(labels, C);
        std::vector<double> y(oh.data().begin(), oh.data().end());
        auto p = random_probs(y.size(), s + 3);
        std::vector<double> g(y.size());
        multiclass_dice_loss_grad<double>(y, p, C, w, 1e-6, g);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double h = 1e-6;
            auto pp = p, pm = p;
            pp[i] += h;
            pm[i] -= h;
            const double fd = (multiclass_dice_loss<double>(y, pp, C, w) - multiclass_dice_loss<double>(y, pm, C, w)) / (2 * h);
            ASSERT_NEAR(g[i], fd, 1e-3 * std::max(std::abs(fd), 1e-3));
        }
    }
}

TEST(Multiclass, PerfectUniformAndPermutation) {
    const int C = 4;
    const auto labels = vc_test::random_labels({4, 4, 4}, C - 1, 5);
    const auto oh = one_hot(labels, C);
    Tensor exact = to_tensor(oh);
    EXPECT_NEAR(loss_multiclass(oh, exact, {}), 0.0, 1e-9);

    // Uniform 1/C against one-hot: per channel 1 - (2 n_c / C + eps) / (n_c + N / C^2 + eps).
    Tensor uniform(C, oh.shape(), 1.0f / C);
    const double N = static_cast<double>(oh.shape().voxels()), eps = 1e-6;
    double expected = 0.0;
    const auto counts = labels.label_counts();
    for (int c = 0; c < C; ++c) {
        const double n = static_cast<double>(counts[static_cast<std::size_t>(c)]);
        expected += 1.0 - (2.0 * n / C + eps) / (n + N / (C * C) + eps);
    }
    EXPECT_NEAR(loss_multiclass(oh, uniform, {}, eps), expected / C, 1e-6);

    // Permuting channels together with their weights leaves the loss unchanged.
    std::vector<double> y(oh.data().begin(), oh.data().end());
    const auto p = random_probs(y.size(), 9);
    const std::vector<double> w{1, 2, 3, 4};
    const int perm[] = {2, 0, 3, 1};
    const std::size_t n = y.size() / C;
    std::vector<double> yp(y.size()), pp(p.size()), wp(C);
    for (int c = 0; c < C; ++c) {
        wp[static_cast<std::size_t>(c)] = w[static_cast<std::size_t>(perm[c])];
        for (std::size_t i = 0; i < n; ++i) {
            yp[static_cast<std::size_t>(c) * n + i] = y[static_cast<std::size_t>(perm[c]) * n + i];
            pp[static_cast<std::size_t>(c) * n + i] = p[static_cast<std::size_t>(perm[c]) * n + i];
        }
    }
    EXPECT_NEAR(multiclass_dice_loss<double>(y, p, C, w), multiclass_dice_loss<double>(yp, pp, C, wp), 1e-12);
    EXPECT_THROW(multiclass_dice_loss<double>(y, p, C, std::vector<double>{1, 2}), ShapeError);
}

TEST(SampleLoss, FullAndResidualTermByTerm) {
    const Shape3 s{4, 4, 4};
    const std::size_t n = 64;
    LossConfig full_cfg;
    LossConfig res_cfg;
    res_cfg.mapping = Mapping::residual;
    double full_sum = 0.0, res_sum = 0.0, oracle_full = 0.0, oracle_res = 0.0;
    for (std::uint64_t k = 0; k < 6; ++k) {
        const auto y = random_mask(n, 0.5, k);
        std::vector<double> x(n);
        for (std::size_t i = 0; i < n; ++i) x[i] = y[i] * ((i + k) % 2 ? 1.0 : 0.0);
        const auto p = random_probs(n, k + 50);
        const Sample sample = make_sample(x, y, s);
        Tensor pt(1, s);
        for (std::size_t i = 0; i < n; ++i) pt.data[i] = static_cast<float>(p[i]);
        std::vector<double> pf(pt.data.begin(), pt.data.end());
        full_sum += sample_loss(sample, ModelOutput{pt, OutputMode::full}, full_cfg);
        res_sum += sample_loss(sample, ModelOutput{pt, OutputMode::residual}, res_cfg);
        oracle_full += dice_term(y, pf, 1e-6);
        std::vector<double> q(n);
        for (std::size_t i = 0; i < n; ++i) q[i] = std::clamp(x[i] + pf[i], 0.0, 1.0);
        oracle_res += dice_term(y, q, 1e-6);
    }
    EXPECT_NEAR(full_sum, oracle_full, 1e-9);
    EXPECT_NEAR(res_sum, oracle_res, 1e-6);
}

TEST(SampleLoss, ResidualEqualsFullWhenOutputsDifferByInput) {
    // If residual output = full output - x, composing restores the full output.
    const Shape3 s{4, 4, 4};
    const auto y = random_mask(64, 0.5, 3);
    std::vector<double> x(64);
    for (std::size_t i = 0; i < 64; ++i) x[i] = y[i] * (i % 2);
    Tensor full(1, s), res(1, s);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    for (std::size_t i = 0; i < 64; ++i) {
        full.data[i] = x[i] > 0 ? 1.0f : d(rng);
        res.data[i] = full.data[i] - static_cast<float>(x[i]);
    }
    const Sample sample = make_sample(x, y, s);
    LossConfig fc, rc;
    rc.mapping = Mapping::residual;
    EXPECT_NEAR(sample_loss(sample, ModelOutput{full, OutputMode::full}, fc),
                sample_loss(sample, ModelOutput{res, OutputMode::residual}, rc), 1e-9);
}

TEST(SampleLoss, PerfectOutputsGiveZero) {
    const Shape3 s{4, 4, 4};
    const auto y = random_mask(64, 0.5, 8);
    std::vector<double> x(64);
    for (std::size_t i = 0; i < 64; ++i) x[i] = y[i] * (i % 2);
    const Sample sample = make_sample(x, y, s);
    Tensor exact_res(1, s), zero(1, s);
    for (std::size_t i = 0; i < 64; ++i) exact_res.data[i] = static_cast<float>(y[i] - x[i]);
    LossConfig rc;
    rc.mapping = Mapping::residual;
    EXPECT_NEAR(sample_loss(sample, ModelOutput{exact_res, OutputMode::residual}, rc), 0.0, 1e-12);
    LossConfig fc;
    EXPECT_NEAR(sample_loss(sample, ModelOutput{sample.target, OutputMode::full}, fc), 0.0, 1e-12);
    const Sample complete = make_sample(y, y, s);
    EXPECT_NEAR(sample_loss(complete, ModelOutput{zero, OutputMode::residual}, rc), 0.0, 1e-12);
}

TEST(SampleLoss, ModeMismatchIsConfigError) {
    const Shape3 s{2, 2, 2};
    const Sample sample{Tensor(1, s), Tensor(1, s)};
    LossConfig rc;
    rc.mapping = Mapping::residual;
    EXPECT_THROW(sample_loss(sample, ModelOutput{Tensor(1, s), OutputMode::full}, rc), ConfigError);
    const Sample multi{Tensor(3, s), Tensor(3, s)};
    EXPECT_THROW(sample_loss(multi, ModelOutput{Tensor(3, s), OutputMode::residual}, rc), ConfigError);
}

TEST(BatchLoss, AggregationIsLinear) {
    DaeConfig c;
    c.input_shape = {16, 16, 16};
    c.channel_widths = {2, 2, 2, 2};
    const Dae model(c, 3);
    std::vector<Sample> batch;
    for (std::uint64_t k = 0; k < 4; ++k) {
        const auto y = vc_test::random_binary({16, 16, 16}, 0.4, k);
        batch.push_back(Sample{to_tensor(y), to_tensor(y)});
    }
    LossConfig cfg;
    const double whole = loss_full(batch, model, cfg);
    const double parts = loss_full(std::span(batch).subspan(0, 1), model, cfg) + loss_full(std::span(batch).subspan(1), model, cfg);
    EXPECT_NEAR(whole, parts, 1e-9);
    cfg.reduction = Reduction::mean;
    EXPECT_NEAR(loss_full(batch, model, cfg), whole / 4.0, 1e-9);
}

TEST(LossConfig, ValidationAndJson) {
    LossConfig c;
    c.smooth_eps = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    LossConfig w;
    w.class_weights = {1.0, 0.0};
    EXPECT_THROW(w.validate(), ConfigError);
    LossConfig ok;
    ok.mapping = Mapping::residual;
    ok.aggregated = true;
    ok.class_weights = {1.0, 2.0};
    const auto back = loss_config_from_json(to_json(ok));
    EXPECT_EQ(back.mapping, Mapping::residual);
    EXPECT_TRUE(back.aggregated);
    EXPECT_EQ(back.class_weights, ok.class_weights);
    auto j = to_json(ok);
    j["smoth_eps"] = 0.1;
    EXPECT_THROW(loss_config_from_json(j), ConfigError);
}
