#pragma once

// Volumetric label/occupancy grids and geometry-preserving transforms.
//
// Memory layout is row-major over (L, W, H): H is the fastest-varying axis,
// flat index = (l * W + w) * H + h. Every file format in this project
// documents its mapping onto this order.

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace voxcomp {

struct Shape3 {
    std::int64_t l = 1;
    std::int64_t w = 1;
    std::int64_t h = 1;

    constexpr std::int64_t voxels() const noexcept { return l * w * h; }
    constexpr std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t k) const noexcept {
        return (i * w + j) * h + k;
    }
    constexpr std::int64_t operator[](int axis) const noexcept {
        return axis == 0 ? l : (axis == 1 ? w : h);
    }
    bool valid() const noexcept { return l >= 1 && w >= 1 && h >= 1; }
    std::string str() const;

    friend constexpr auto operator<=>(const Shape3&, const Shape3&) = default;
};

using Spacing = std::array<double, 3>;
/// 3x4 voxel-to-world transform in mm; column 3 is the translation.
using Affine = std::array<std::array<double, 4>, 3>;
/// class ID -> anatomy name. ID 0 is background and never listed.
using ClassTable = std::map<int, std::string>;

Affine diagonal_affine(const Spacing& spacing);

class LabelVolume {
public:
    LabelVolume(Shape3 shape, std::vector<std::uint8_t> data, Spacing spacing = {1.0, 1.0, 1.0},
                ClassTable class_table = {}, std::optional<Affine> affine = std::nullopt);

    const Shape3& shape() const noexcept { return shape_; }
    std::span<const std::uint8_t> data() const noexcept { return data_; }
    const Spacing& spacing() const noexcept { return spacing_; }
    const ClassTable& class_table() const noexcept { return class_table_; }
    const Affine& affine() const noexcept { return affine_; }

    std::uint8_t at(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return data_[static_cast<std::size_t>(shape_.index(i, j, k))];
    }

    /// Voxel count per label value (index 0 = background).
    std::array<std::int64_t, 256> label_counts() const;
    /// Labels present in the grid, background excluded, ascending.
    std::vector<int> present_classes() const;

    friend bool operator==(const LabelVolume&, const LabelVolume&) = default;

private:
    Shape3 shape_;
    std::vector<std::uint8_t> data_;
    Spacing spacing_;
    ClassTable class_table_;
    Affine affine_;
};

class BinaryVolume {
public:
    BinaryVolume(Shape3 shape, std::vector<std::uint8_t> data, Spacing spacing = {1.0, 1.0, 1.0});

    const Shape3& shape() const noexcept { return shape_; }
    std::span<const std::uint8_t> data() const noexcept { return data_; }
    const Spacing& spacing() const noexcept { return spacing_; }
    std::int64_t foreground() const;

    friend bool operator==(const BinaryVolume&, const BinaryVolume&) = default;

private:
    Shape3 shape_;
    std::vector<std::uint8_t> data_;
    Spacing spacing_;
};

/// Channel-major (C, L, W, H) one-hot encoding; channel 0 is background.
class OneHotVolume {
public:
    OneHotVolume(int channels, Shape3 shape, std::vector<std::uint8_t> data, ClassTable class_table = {});

    int channels() const noexcept { return channels_; }
    const Shape3& shape() const noexcept { return shape_; }
    std::span<const std::uint8_t> data() const noexcept { return data_; }
    std::span<const std::uint8_t> channel(int c) const {
        const auto n = static_cast<std::size_t>(shape_.voxels());
        return std::span<const std::uint8_t>(data_).subspan(static_cast<std::size_t>(c) * n, n);
    }
    const ClassTable& class_table() const noexcept { return class_table_; }

private:
    int channels_;
    Shape3 shape_;
    std::vector<std::uint8_t> data_;
    ClassTable class_table_;
};

enum class FractionReference { total_foreground, largest_class, whole_grid };

std::string to_string(FractionReference ref);
FractionReference fraction_reference_from_string(const std::string& s);

/// Source index sampled by nearest-neighbour resampling of an axis of length
/// `src` onto `dst` samples (output centre mapped to source coordinates,
/// ties rounded up).
constexpr std::int64_t nearest_source_index(std::int64_t i, std::int64_t src, std::int64_t dst) noexcept {
    const std::int64_t s = ((2 * i + 1) * src) / (2 * dst);
    return s < src ? s : src - 1;
}

LabelVolume resample_labels(const LabelVolume& vol, Shape3 target_shape);
BinaryVolume binarize(const LabelVolume& vol);
OneHotVolume one_hot(const LabelVolume& vol, int num_classes);
/// Inverse of one_hot: channel index of the hot channel at every voxel.
LabelVolume argmax(const OneHotVolume& vol, Spacing spacing = {1.0, 1.0, 1.0});
double volume_fraction(const LabelVolume& vol, int class_id,
                       FractionReference reference = FractionReference::total_foreground);
BinaryVolume upscale_binary(const BinaryVolume& vol, Shape3 target_shape);

/// Voxels whose label is in `classes` set to 1.
BinaryVolume class_mask(const LabelVolume& vol, std::span<const int> classes);

}  // namespace voxcomp
