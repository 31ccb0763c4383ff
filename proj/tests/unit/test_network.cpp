#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "param_oracle.hpp"
#include "voxcomp/error.hpp"
#include "voxcomp/io.hpp"
#include "voxcomp/network.hpp"

using namespace voxcomp;
using vc_test::TempDir;
using vc_test::closed_form_parameters;

namespace {

DaeConfig tiny(Shape3 shape, bool residual = false, int classes = 1) {
    DaeConfig c;
    c.input_shape = shape;
    c.channel_widths = {2, 3, 4, 4};
    c.residual = residual;
    c.num_classes = classes;
    c.final_activation = classes > 1 ? FinalActivation::softmax : FinalActivation::sigmoid;
    return c;
}

Tensor random_tensor(int c, Shape3 s, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(lo, hi);
    Tensor t(c, s);
    for (auto& v : t.data) v = d(rng);
    return t;
}

double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += static_cast<double>(a.data[i]) * b.data[i];
    return s;
}

void randomize(ConvLayer& l, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(-0.5f, 0.5f);
    for (auto& w : l.weight) w = d(rng);
    for (auto& b : l.bias) b = d(rng);
}

}  // namespace

TEST(Conv, UnitStrideParameterEnumeration) {
    ConvLayer l(ConvLayer::Kind::conv, 1, 8, 3, 1);
    std::int64_t enumerated = 0;
    for (std::size_t i = 0; i < l.weight.size(); ++i) ++enumerated;
    for (std::size_t i = 0; i < l.bias.size(); ++i) ++enumerated;
    EXPECT_EQ(enumerated, 224);
    EXPECT_EQ(l.parameter_count(), 1 * 8 * 27 + 8);
}

TEST(Conv, OutputShapes) {
    const ConvLayer down(ConvLayer::Kind::conv, 1, 1, 3, 2);
    const ConvLayer up(ConvLayer::Kind::transposed, 1, 1, 3, 2);
    EXPECT_EQ(down.output_shape({7, 8, 9}), (Shape3{4, 4, 5}));
    EXPECT_EQ(up.output_shape({4, 4, 5}), (Shape3{8, 8, 10}));
}

TEST(Conv, TransposedIsAdjointOfStridedConv) {
    // <conv(x), y> = <x, conv^T(y)> when both share the kernel and biases are zero.
    ConvLayer conv(ConvLayer::Kind::conv, 3, 2, 3, 2);
    randomize(conv, 1);
    std::fill(conv.bias.begin(), conv.bias.end(), 0.0f);
    ConvLayer tconv(ConvLayer::Kind::transposed, 2, 3, 3, 2);
    // conv weight (out=2, in=3, taps) -> transposed weight (in=2, out=3, taps): same memory order.
    tconv.weight = conv.weight;
    const Shape3 big{6, 6, 6};
    const auto x = random_tensor(3, big, 2);
    const auto y = random_tensor(2, conv.output_shape(big), 3);
    Tensor cx, ty;
    conv.forward(x, cx);
    tconv.forward(y, ty);
    EXPECT_NEAR(dot(cx, y), dot(x, ty), 1e-4 * std::max(1.0, std::abs(dot(cx, y))));
}

TEST(Conv, BackwardMatchesFiniteDifferences) {
    for (auto kind : {ConvLayer::Kind::conv, ConvLayer::Kind::transposed})
        for (int stride : {1, 2}) {
            if (kind == ConvLayer::Kind::transposed && stride == 1) continue;
            ConvLayer l(kind, 2, 3, 3, stride);
            randomize(l, 7);
            const Shape3 in_shape = kind == ConvLayer::Kind::conv ? Shape3{5, 6, 7} : Shape3{3, 3, 4};
            auto x = random_tensor(2, in_shape, 8);
            Tensor out;
            l.forward(x, out);
            const auto g = random_tensor(3, out.shape, 9);
            Tensor gx;
            std::vector<float> gw(l.weight.size(), 0.0f), gb(l.bias.size(), 0.0f);
            l.backward(x, g, &gx, gw, gb);

            auto loss = [&](const ConvLayer& layer, const Tensor& in) {
                Tensor o;
                layer.forward(in, o);
                return dot(o, g);
            };
            const float h = 1e-2f;
            for (std::size_t i = 0; i < l.weight.size(); i += 7) {
                ConvLayer p = l, m = l;
                p.weight[i] += h;
                m.weight[i] -= h;
                const double fd = (loss(p, x) - loss(m, x)) / (2.0 * h);
                ASSERT_NEAR(gw[i], fd, 2e-3 * std::max(1.0, std::abs(fd)));
            }
            for (std::size_t i = 0; i < l.bias.size(); ++i) {
                ConvLayer p = l, m = l;
                p.bias[i] += h;
                m.bias[i] -= h;
                const double fd = (loss(p, x) - loss(m, x)) / (2.0 * h);
                ASSERT_NEAR(gb[i], fd, 2e-3 * std::max(1.0, std::abs(fd)));
            }
            for (std::size_t i = 0; i < x.data.size(); i += 5) {
                Tensor xp = x, xm = x;
                xp.data[i] += h;
                xm.data[i] -= h;
                const double fd = (loss(l, xp) - loss(l, xm)) / (2.0 * h);
                ASSERT_NEAR(gx.data[i], fd, 2e-3 * std::max(1.0, std::abs(fd)));
            }
        }
}

TEST(Dae, CanonicalParameterBudget) {
    const auto cfg = DaeConfig::canonical();
    const auto model = build_dae(cfg, 1, BuildOptions{true});
    const auto n = count_parameters(model);
    EXPECT_EQ(n, closed_form_parameters(cfg));
    EXPECT_GE(n, kCanonicalParamsMin);
    EXPECT_LE(n, kCanonicalParamsMax);
    EXPECT_TRUE(model.warnings().empty());
    EXPECT_EQ(model.bottleneck_shape(), (Shape3{8, 8, 8}));
    EXPECT_EQ(count_parameters(build_dae(cfg, 2)), n);
}

TEST(Dae, Topology) {
    const auto cfg = tiny({16, 16, 16});
    const Dae model(cfg, 1);
    const auto& layers = model.layers();
    ASSERT_EQ(layers.size(), 4u + 2u * 4u + 4u);
    for (int i = 0; i < 4; ++i) {
        EXPECT_EQ(layers[static_cast<std::size_t>(i)].kind, ConvLayer::Kind::conv);
        EXPECT_EQ(layers[static_cast<std::size_t>(i)].stride, 2);
    }
    for (int i = 0; i < 4; ++i) {
        EXPECT_EQ(layers[static_cast<std::size_t>(4 + 2 * i)].kind, ConvLayer::Kind::transposed);
        EXPECT_EQ(layers[static_cast<std::size_t>(5 + 2 * i)].stride, 1);
    }
    for (std::size_t i = 12; i < 16; ++i) EXPECT_EQ(layers[i].stride, 1);
    for (const auto& l : layers) EXPECT_EQ(l.kernel, 3);
    EXPECT_EQ(count_parameters(model), closed_form_parameters(cfg));
}

TEST(Dae, OutOfBudgetCanonicalGeometryWarnsOrThrows) {
    auto cfg = DaeConfig::canonical();
    cfg.channel_widths = {8, 16, 32, 64};
    EXPECT_FALSE(build_dae(cfg, 1).warnings().empty());
    EXPECT_THROW(build_dae(cfg, 1, BuildOptions{true}), ConfigError);
}

TEST(Dae, MulticlassHead) {
    const auto preset = DaeConfig::multiclass_preset();
    EXPECT_EQ(preset.num_classes, 13);
    EXPECT_EQ(preset.input_shape, (Shape3{256, 256, 128}));
    EXPECT_EQ(preset.input_channels(), 13);
    const Dae model(tiny({16, 16, 16}, false, 13), 3);
    EXPECT_EQ(model.layers().back().out_channels, 13);
    const auto out = model.forward(random_tensor(13, {16, 16, 16}, 4, 0.0f, 1.0f));
    ASSERT_EQ(out.probabilities.channels, 13);
    const auto n = static_cast<std::size_t>(out.probabilities.spatial());
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (int c = 0; c < 13; ++c) s += out.probabilities.data[static_cast<std::size_t>(c) * n + i];
        ASSERT_NEAR(s, 1.0, 1e-5);
    }
}

TEST(Dae, ShapeContract) {
    for (Shape3 s : {Shape3{32, 32, 32}, Shape3{48, 48, 48}}) {
        const Dae model(tiny(s), 1);
        const auto out = model.forward(random_tensor(1, s, 2, 0.0f, 1.0f));
        EXPECT_EQ(out.probabilities.shape, s);
    }
    for (Shape3 s : {Shape3{128, 128, 128}, Shape3{256, 256, 128}}) {
        const Dae model(tiny(s), 1);
        Shape3 cur = s;
        for (const auto& l : model.layers()) cur = l.output_shape(cur);
        EXPECT_EQ(cur, s);
    }
    const Dae model(tiny({16, 16, 16}), 1);
    EXPECT_THROW(model.forward(Tensor(1, {16, 16, 8})), ShapeError);
    EXPECT_THROW(model.forward(Tensor(2, {16, 16, 16})), ShapeError);
}

TEST(Dae, ForwardRangeModeAndDeterminism) {
    const Dae model(tiny({16, 16, 16}, true), 5);
    EXPECT_EQ(model.mode(), OutputMode::residual);
    const auto x = vc_test::random_binary({16, 16, 16}, 0.3, 1);
    const auto a = model.forward(x), b = model.forward(x);
    EXPECT_EQ(a.mode, OutputMode::residual);
    EXPECT_EQ(a.probabilities.data, b.probabilities.data);
    for (float v : a.probabilities.data) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
    }
}

TEST(Dae, ZeroFinalLayerGivesConstantField) {
    Dae model(tiny({16, 16, 16}, true), 5);
    auto& last = model.layers().back();
    std::fill(last.weight.begin(), last.weight.end(), 0.0f);
    std::fill(last.bias.begin(), last.bias.end(), 0.0f);
    const auto out = model.forward(vc_test::random_binary({16, 16, 16}, 0.3, 1));
    for (float v : out.probabilities.data) ASSERT_FLOAT_EQ(v, 0.5f);
}

TEST(Dae, BackwardMatchesFiniteDifferences) {
    // Directional derivatives over every parameter. Biases are moved off zero
    // so that dead receptive fields do not sit exactly on a ReLU kink, and the
    // step is small enough to cross few kinks while staying above float noise.
    for (int classes : {1, 3}) {
        Dae model(tiny({16, 16, 16}, false, classes), 11);
        std::mt19937_64 rng(5);
        std::uniform_real_distribution<float> bias(0.02f, 0.1f), dir(-1.0f, 1.0f);
        for (auto& l : model.layers())
            for (auto& b : l.bias) b = bias(rng);
        const auto x = random_tensor(model.config().input_channels(), {16, 16, 16}, 12, 0.0f, 1.0f);
        const auto g = random_tensor(classes, {16, 16, 16}, 13);
        Dae::Tape tape;
        model.forward(x, tape);
        auto grads = model.make_gradients();
        model.backward(tape, g, grads);

        double num = 0.0, den = 0.0;
        const float h = 1e-5f;
        for (int trial = 0; trial < 5; ++trial) {
            Dae p = model, m = model;
            double analytic = 0.0;
            for (std::size_t li = 0; li < model.layers().size(); ++li) {
                for (std::size_t i = 0; i < model.layers()[li].weight.size(); ++i) {
                    const float d = dir(rng);
                    p.layers()[li].weight[i] += h * d;
                    m.layers()[li].weight[i] -= h * d;
                    analytic += d * grads.weight[li][i];
                }
                for (std::size_t i = 0; i < model.layers()[li].bias.size(); ++i) {
                    const float d = dir(rng);
                    p.layers()[li].bias[i] += h * d;
                    m.layers()[li].bias[i] -= h * d;
                    analytic += d * grads.bias[li][i];
                }
            }
            const double fd = (dot(p.forward(x).probabilities, g) - dot(m.forward(x).probabilities, g)) / (2.0 * h);
            num += (fd - analytic) * (fd - analytic);
            den += analytic * analytic;
        }
        EXPECT_LT(std::sqrt(num / den), 2e-2) << classes << " classes";
    }
}

TEST(Compose, ResidualAndFullModes) {
    const Shape3 s{4, 4, 4};
    const auto x = vc_test::random_binary(s, 0.4, 3);
    ModelOutput zero{Tensor(1, s, 0.0f), OutputMode::residual};
    EXPECT_EQ(compose_completion(x, zero), x);

    const auto y = vc_test::random_binary(s, 0.5, 4);
    ModelOutput full{to_tensor(y), OutputMode::full};
    EXPECT_EQ(compose_completion(x, full), y);

    ModelOutput any{random_tensor(1, s, 5, 0.0f, 1.0f), OutputMode::residual};
    const auto c = compose_completion(x, any, 0.5);
    for (std::size_t i = 0; i < x.data().size(); ++i)
        if (x.data()[i]) ASSERT_EQ(c.data()[i], 1);
    EXPECT_NO_THROW(compose_completion(x, any, 1.0));
    EXPECT_THROW(compose_completion(x, any, 0.0), ConfigError);
    EXPECT_THROW(compose_completion(x, any, 1.5), ConfigError);
}

TEST(Compose, LabelsFromArgmax) {
    const Shape3 s{1, 1, 2};
    Tensor p(3, s);
    // Channel-major: voxel 0 peaks in channel 1, voxel 1 in channel 2.
    p.data = {0.1f, 0.2f, 0.7f, 0.1f, 0.2f, 0.7f};
    const auto labels = compose_labels(ModelOutput{p, OutputMode::full}, {{1, "a"}, {2, "b"}});
    EXPECT_EQ(labels.data()[0], 1);
    EXPECT_EQ(labels.data()[1], 2);
}

TEST(Dae, FrozenModelHasNoTrainableParameters) {
    Dae model(tiny({16, 16, 16}), 1);
    model.freeze();
    EXPECT_EQ(count_parameters(model), 0);
}

TEST(Dae, ConfigValidationAndJson) {
    auto c = tiny({16, 16, 16});
    c.residual = true;
    c.num_classes = 3;
    c.final_activation = FinalActivation::softmax;
    EXPECT_THROW(c.validate(), ConfigError);
    auto d = tiny({18, 16, 16});
    EXPECT_THROW(d.validate(), ConfigError);
    auto j = to_json(tiny({16, 16, 16}));
    EXPECT_EQ(dae_config_from_json(j), tiny({16, 16, 16}));
    j["chanel_widths"] = {1, 2, 3, 4};
    EXPECT_THROW(dae_config_from_json(j), ConfigError);
}

TEST(Checkpoint, RoundTripAndCorruption) {
    TempDir dir;
    const Dae model(tiny({16, 16, 16}, true), 9);
    CheckpointMeta meta{"dae_res", {{"mapping", "residual"}}, "abcd1234", 9, 3, "00ff00ff"};
    save_checkpoint(dir / "m.ckpt", model, meta);
    const auto back = load_checkpoint(dir / "m.ckpt");
    EXPECT_EQ(back.model.config(), model.config());
    EXPECT_EQ(back.meta.experiment, "dae_res");
    EXPECT_EQ(back.meta.manifest_checksum, "abcd1234");
    EXPECT_EQ(back.meta.seed, 9u);
    EXPECT_EQ(back.meta.epoch, 3);
    const auto probe = vc_test::random_binary({16, 16, 16}, 0.3, 2);
    const auto a = model.forward(probe), b = back.model.forward(probe);
    for (std::size_t i = 0; i < a.probabilities.data.size(); ++i)
        ASSERT_NEAR(a.probabilities.data[i], b.probabilities.data[i], 1e-6);

    auto bytes = read_file(dir / "m.ckpt");
    bytes[bytes.size() - 3] ^= 0x40;
    write_file_atomic(dir / "bad.ckpt", std::span<const std::uint8_t>(bytes));
    EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), ChecksumError);
    write_file_atomic(dir / "junk.ckpt", std::string("not a checkpoint at all"));
    EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), IoError);
    EXPECT_THROW(load_checkpoint(dir / "absent.ckpt"), MissingFileError);
}
