#include <gtest/gtest.h>

#include <cstdlib>

#include "helpers.hpp"
#include "voxcomp/error.hpp"
#include "voxcomp/voxel.hpp"

using namespace voxcomp;
using vc_test::random_binary;
using vc_test::random_labels;

namespace {

// Nearest source voxel centre to the output sample centre, by exhaustive search
// in exact integer arithmetic; ties go to the higher index.
std::int64_t brute_nearest(std::int64_t i, std::int64_t src, std::int64_t dst) {
    std::int64_t best = 0, best_d = -1;
    for (std::int64_t j = 0; j < src; ++j) {
        const std::int64_t d = std::llabs((2 * j + 1) * dst - (2 * i + 1) * src);
        if (best_d < 0 || d <= best_d) {
            best = j;
            best_d = d;
        }
    }
    return best;
}

}  // namespace

TEST(Shape, IndexIsRowMajorLwh) {
    const Shape3 s{2, 3, 4};
    EXPECT_EQ(s.voxels(), 24);
    EXPECT_EQ(s.index(0, 0, 1), 1);
    EXPECT_EQ(s.index(0, 1, 0), 4);
    EXPECT_EQ(s.index(1, 0, 0), 12);
    EXPECT_EQ(s.index(1, 2, 3), 23);
}

TEST(LabelVolume, RejectsBadConstruction) {
    EXPECT_THROW(LabelVolume({0, 2, 2}, {}, {1, 1, 1}, {}), InvalidVolumeError);
    EXPECT_THROW(LabelVolume({1, 1, 2}, {0, 0, 0}, {1, 1, 1}, {}), InvalidVolumeError);
    EXPECT_THROW(LabelVolume({1, 1, 2}, {0, 0}, {1, 0, 1}, {}), InvalidVolumeError);
    EXPECT_THROW(LabelVolume({1, 1, 2}, {0, 3}, {1, 1, 1}, {{1, "a"}}), InvalidVolumeError);
    EXPECT_THROW(BinaryVolume({1, 1, 2}, {0, 2}), InvalidVolumeError);
}

TEST(Resample, NearestIndexMatchesBruteForce) {
    for (std::int64_t src = 1; src <= 17; ++src)
        for (std::int64_t dst = 1; dst <= 17; ++dst)
            for (std::int64_t i = 0; i < dst; ++i)
                ASSERT_EQ(nearest_source_index(i, src, dst), brute_nearest(i, src, dst)) << src << "->" << dst << " @" << i;
}

TEST(Resample, UpsamplingReplicatesBlocks) {
    const auto v = random_labels({2, 2, 2}, 5, 1);
    const auto up = resample_labels(v, {4, 4, 4});
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            for (int k = 0; k < 4; ++k) ASSERT_EQ(up.at(i, j, k), v.at(i / 2, j / 2, k / 2));
    EXPECT_EQ(up.class_table(), v.class_table());
    EXPECT_DOUBLE_EQ(up.spacing()[0], 0.5);
}

TEST(Resample, IdentityShape) {
    const auto v = random_labels({5, 6, 7}, 3, 2);
    EXPECT_EQ(resample_labels(v, v.shape()), v);
}

TEST(Resample, CheckerboardToSingleVoxel) {
    std::vector<std::uint8_t> data(27);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) data[static_cast<std::size_t>((i * 3 + j) * 3 + k)] = (i + j + k) % 2;
    const LabelVolume v({3, 3, 3}, data, {1, 1, 1}, {{1, "one"}});
    const auto r = resample_labels(v, {1, 1, 1});
    const auto b = brute_nearest(0, 3, 1);
    EXPECT_EQ(r.data()[0], v.at(b, b, b));
    EXPECT_EQ(r.data()[0], 1);
}

TEST(Resample, ArbitraryShapesMatchOracleAndAreIdempotent) {
    const auto v = random_labels({7, 5, 9}, 4, 3);
    const Shape3 t{4, 11, 6};
    const auto r = resample_labels(v, t);
    for (int i = 0; i < t.l; ++i)
        for (int j = 0; j < t.w; ++j)
            for (int k = 0; k < t.h; ++k)
                ASSERT_EQ(r.at(i, j, k), v.at(brute_nearest(i, 7, 4), brute_nearest(j, 5, 11), brute_nearest(k, 9, 6)));
    EXPECT_EQ(resample_labels(r, t), r);
}

TEST(Resample, RejectsEmptyTarget) {
    const auto v = random_labels({2, 2, 2}, 1, 1);
    EXPECT_THROW(resample_labels(v, {0, 2, 2}), InvalidVolumeError);
}

TEST(Binarize, Definition) {
    const LabelVolume v({1, 1, 4}, {0, 3, 7, 0}, {1, 1, 1}, {{3, "a"}, {7, "b"}});
    const auto b = binarize(v);
    EXPECT_EQ(std::vector<std::uint8_t>(b.data().begin(), b.data().end()), (std::vector<std::uint8_t>{0, 1, 1, 0}));
    const LabelVolume empty({2, 2, 2}, std::vector<std::uint8_t>(8, 0), {1, 1, 1}, {});
    EXPECT_EQ(binarize(empty).foreground(), 0);
}

TEST(Binarize, ForegroundEqualsNonzeroCount) {
    const auto v = random_labels({8, 8, 8}, 6, 4);
    const auto counts = v.label_counts();
    std::int64_t nonzero = 0;
    for (int c = 1; c < 256; ++c) nonzero += counts[static_cast<std::size_t>(c)];
    EXPECT_EQ(binarize(v).foreground(), nonzero);
}

TEST(OneHot, Definition) {
    const LabelVolume v({1, 1, 2}, {0, 2}, {1, 1, 1}, {{2, "b"}});
    const auto oh = one_hot(v, 3);
    ASSERT_EQ(oh.channels(), 3);
    EXPECT_EQ(oh.channel(0)[0], 1);
    EXPECT_EQ(oh.channel(2)[1], 1);
    EXPECT_EQ(oh.channel(1)[0] + oh.channel(1)[1] + oh.channel(2)[0] + oh.channel(0)[1], 0);
}

TEST(OneHot, AllBackground) {
    const LabelVolume v({2, 2, 2}, std::vector<std::uint8_t>(8, 0), {1, 1, 1}, {});
    const auto oh = one_hot(v, 3);
    for (auto x : oh.channel(0)) EXPECT_EQ(x, 1);
    for (int c = 1; c < 3; ++c)
        for (auto x : oh.channel(c)) EXPECT_EQ(x, 0);
}

TEST(OneHot, RoundTripAndPartition) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto v = random_labels({6, 6, 6}, 4, seed);
        const auto oh = one_hot(v, 5);
        for (std::int64_t i = 0; i < v.shape().voxels(); ++i) {
            int sum = 0;
            for (int c = 0; c < 5; ++c) sum += oh.channel(c)[static_cast<std::size_t>(i)];
            ASSERT_EQ(sum, 1);
        }
        const auto back = argmax(oh);
        ASSERT_TRUE(std::equal(back.data().begin(), back.data().end(), v.data().begin()));
    }
}

TEST(OneHot, RejectsOutOfRangeLabel) {
    const auto v = random_labels({3, 3, 3}, 4, 9);
    EXPECT_THROW(one_hot(v, 4), OutOfRangeError);
    EXPECT_THROW(OneHotVolume(2, {1, 1, 1}, {1, 1}), InvalidVolumeError);
}

TEST(VolumeFraction, Basics) {
    const LabelVolume all({2, 2, 1}, {1, 1, 1, 1}, {1, 1, 1}, {{1, "a"}, {2, "b"}});
    EXPECT_DOUBLE_EQ(volume_fraction(all, 1), 1.0);
    EXPECT_DOUBLE_EQ(volume_fraction(all, 2), 0.0);
    EXPECT_THROW(volume_fraction(all, 3), OutOfRangeError);
    const LabelVolume empty({2, 2, 1}, {0, 0, 0, 0}, {1, 1, 1}, {{1, "a"}});
    EXPECT_THROW(volume_fraction(empty, 1), UndefinedFractionError);
    EXPECT_THROW(volume_fraction(empty, 1, FractionReference::largest_class), UndefinedFractionError);
    EXPECT_DOUBLE_EQ(volume_fraction(empty, 1, FractionReference::whole_grid), 0.0);
}

TEST(VolumeFraction, CountingOracleOnPhantom) {
    const auto subjects = vc_test::small_phantoms(1, 5);
    const auto& v = subjects.front().volume;
    std::map<int, std::int64_t> counts;
    std::int64_t fg = 0, largest = 0;
    for (auto x : v.data())
        if (x) {
            ++counts[x];
            ++fg;
        }
    for (const auto& [c, n] : counts) largest = std::max(largest, n);
    double sum = 0.0;
    for (const auto& [c, n] : counts) {
        EXPECT_DOUBLE_EQ(volume_fraction(v, c), static_cast<double>(n) / static_cast<double>(fg));
        EXPECT_DOUBLE_EQ(volume_fraction(v, c, FractionReference::largest_class),
                         static_cast<double>(n) / static_cast<double>(largest));
        EXPECT_DOUBLE_EQ(volume_fraction(v, c, FractionReference::whole_grid),
                         static_cast<double>(n) / static_cast<double>(v.shape().voxels()));
        sum += volume_fraction(v, c);
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(UpscaleBinary, Cases) {
    const BinaryVolume one({1, 1, 1}, {1});
    EXPECT_EQ(upscale_binary(one, {3, 4, 5}).foreground(), 60);
    const auto r = random_binary({4, 4, 4}, 0.5, 6);
    EXPECT_EQ(upscale_binary(r, r.shape()), r);
    const auto up = upscale_binary(r, {8, 8, 8});
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
            for (int k = 0; k < 8; ++k)
                ASSERT_EQ(up.data()[static_cast<std::size_t>((i * 8 + j) * 8 + k)],
                          r.data()[static_cast<std::size_t>(((i / 2) * 4 + j / 2) * 4 + k / 2)]);
    const auto odd = upscale_binary(r, {5, 9, 3});
    for (auto x : odd.data()) ASSERT_LE(x, 1);
}

TEST(ClassMask, SelectsClasses) {
    const LabelVolume v({1, 1, 4}, {0, 1, 2, 3}, {1, 1, 1}, vc_test::table_for(3));
    const int cls[] = {1, 3};
    const auto m = class_mask(v, cls);
    EXPECT_EQ(std::vector<std::uint8_t>(m.data().begin(), m.data().end()), (std::vector<std::uint8_t>{0, 1, 0, 1}));
}
