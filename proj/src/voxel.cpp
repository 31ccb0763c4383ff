#include "voxcomp/voxel.hpp"

#include <algorithm>

#include "voxcomp/error.hpp"

namespace voxcomp {

std::string Shape3::str() const {
    return std::to_string(l) + "x" + std::to_string(w) + "x" + std::to_string(h);
}

Affine diagonal_affine(const Spacing& spacing) {
    Affine a{};
    for (int r = 0; r < 3; ++r) a[r][r] = spacing[r];
    return a;
}

namespace {

void check_grid(const Shape3& shape, std::size_t size, const char* what) {
    if (!shape.valid()) throw InvalidVolumeError(std::string(what) + ": empty grid " + shape.str());
    if (static_cast<std::int64_t>(size) != shape.voxels())
        throw InvalidVolumeError(std::string(what) + ": data size " + std::to_string(size) +
                                 " does not match shape " + shape.str());
}

void check_spacing(const Spacing& spacing) {
    for (double s : spacing)
        if (!(s > 0.0)) throw InvalidVolumeError("voxel spacing must be positive");
}

Spacing rescaled_spacing(const Spacing& spacing, const Shape3& from, const Shape3& to) {
    Spacing out{};
    for (int a = 0; a < 3; ++a) out[a] = spacing[a] * static_cast<double>(from[a]) / static_cast<double>(to[a]);
    return out;
}

template <typename T>
std::vector<T> resample_nearest(std::span<const T> src, const Shape3& from, const Shape3& to) {
    std::vector<T> out(static_cast<std::size_t>(to.voxels()));
    std::vector<std::int64_t> jl(to.l), jw(to.w), jh(to.h);
    for (std::int64_t i = 0; i < to.l; ++i) jl[i] = nearest_source_index(i, from.l, to.l);
    for (std::int64_t i = 0; i < to.w; ++i) jw[i] = nearest_source_index(i, from.w, to.w);
    for (std::int64_t i = 0; i < to.h; ++i) jh[i] = nearest_source_index(i, from.h, to.h);
    std::size_t o = 0;
    for (std::int64_t i = 0; i < to.l; ++i)
        for (std::int64_t j = 0; j < to.w; ++j) {
            const T* row = src.data() + from.index(jl[i], jw[j], 0);
            for (std::int64_t k = 0; k < to.h; ++k) out[o++] = row[jh[k]];
        }
    return out;
}

}  // namespace

LabelVolume::LabelVolume(Shape3 shape, std::vector<std::uint8_t> data, Spacing spacing,
                         ClassTable class_table, std::optional<Affine> affine)
    : shape_(shape),
      data_(std::move(data)),
      spacing_(spacing),
      class_table_(std::move(class_table)),
      affine_(affine ? *affine : diagonal_affine(spacing)) {
    check_grid(shape_, data_.size(), "label volume");
    check_spacing(spacing_);
    if (class_table_.contains(0)) throw InvalidVolumeError("class table must not list background (0)");
    const auto counts = label_counts();
    for (int v = 1; v < 256; ++v)
        if (counts[v] > 0 && !class_table_.contains(v))
            throw InvalidVolumeError("label " + std::to_string(v) + " missing from class table");
}

std::array<std::int64_t, 256> LabelVolume::label_counts() const {
    std::array<std::int64_t, 256> counts{};
    for (auto v : data_) ++counts[v];
    return counts;
}

std::vector<int> LabelVolume::present_classes() const {
    const auto counts = label_counts();
    std::vector<int> out;
    for (int v = 1; v < 256; ++v)
        if (counts[v] > 0) out.push_back(v);
    return out;
}

BinaryVolume::BinaryVolume(Shape3 shape, std::vector<std::uint8_t> data, Spacing spacing)
    : shape_(shape), data_(std::move(data)), spacing_(spacing) {
    check_grid(shape_, data_.size(), "binary volume");
    check_spacing(spacing_);
    if (std::any_of(data_.begin(), data_.end(), [](std::uint8_t v) { return v > 1; }))
        throw InvalidVolumeError("binary volume values must be 0 or 1");
}

std::int64_t BinaryVolume::foreground() const {
    return std::count(data_.begin(), data_.end(), std::uint8_t{1});
}

OneHotVolume::OneHotVolume(int channels, Shape3 shape, std::vector<std::uint8_t> data, ClassTable class_table)
    : channels_(channels), shape_(shape), data_(std::move(data)), class_table_(std::move(class_table)) {
    if (channels_ < 2) throw InvalidVolumeError("one-hot volume needs at least 2 channels");
    if (!shape_.valid()) throw InvalidVolumeError("one-hot volume: empty grid");
    const auto n = static_cast<std::size_t>(shape_.voxels());
    if (data_.size() != n * static_cast<std::size_t>(channels_))
        throw InvalidVolumeError("one-hot volume: data size mismatch");
    for (std::size_t v = 0; v < n; ++v) {
        int sum = 0;
        for (int c = 0; c < channels_; ++c) {
            const auto x = data_[static_cast<std::size_t>(c) * n + v];
            if (x > 1) throw InvalidVolumeError("one-hot volume values must be 0 or 1");
            sum += x;
        }
        if (sum != 1) throw InvalidVolumeError("one-hot volume: voxel " + std::to_string(v) + " is not a partition");
    }
}

std::string to_string(FractionReference ref) {
    switch (ref) {
        case FractionReference::total_foreground: return "total_foreground";
        case FractionReference::largest_class: return "largest_class";
        case FractionReference::whole_grid: return "whole_grid";
    }
    return "?";
}

FractionReference fraction_reference_from_string(const std::string& s) {
    if (s == "total_foreground") return FractionReference::total_foreground;
    if (s == "largest_class") return FractionReference::largest_class;
    if (s == "whole_grid") return FractionReference::whole_grid;
    throw ConfigError("unknown fraction reference '" + s + "'");
}

LabelVolume resample_labels(const LabelVolume& vol, Shape3 target_shape) {
    if (!target_shape.valid()) throw InvalidVolumeError("target shape must be at least 1 along every axis");
    const Shape3& from = vol.shape();
    auto data = resample_nearest<std::uint8_t>(vol.data(), from, target_shape);

    Affine affine = vol.affine();
    for (int r = 0; r < 3; ++r) {
        double shift = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double ratio = static_cast<double>(from[c]) / static_cast<double>(target_shape[c]);
            shift += affine[r][c] * (0.5 * ratio - 0.5);
            affine[r][c] *= ratio;
        }
        affine[r][3] += shift;
    }
    return LabelVolume(target_shape, std::move(data), rescaled_spacing(vol.spacing(), from, target_shape),
                       vol.class_table(), affine);
}

BinaryVolume binarize(const LabelVolume& vol) {
    std::vector<std::uint8_t> out(vol.data().size());
    std::transform(vol.data().begin(), vol.data().end(), out.begin(),
                   [](std::uint8_t v) { return static_cast<std::uint8_t>(v != 0); });
    return BinaryVolume(vol.shape(), std::move(out), vol.spacing());
}

OneHotVolume one_hot(const LabelVolume& vol, int num_classes) {
    if (num_classes < 2) throw OutOfRangeError("one_hot needs num_classes >= 2");
    const auto n = static_cast<std::size_t>(vol.shape().voxels());
    std::vector<std::uint8_t> out(n * static_cast<std::size_t>(num_classes), 0);
    const auto src = vol.data();
    for (std::size_t v = 0; v < n; ++v) {
        if (src[v] >= num_classes)
            throw OutOfRangeError("label " + std::to_string(src[v]) + " >= num_classes " + std::to_string(num_classes));
        out[static_cast<std::size_t>(src[v]) * n + v] = 1;
    }
    return OneHotVolume(num_classes, vol.shape(), std::move(out), vol.class_table());
}

LabelVolume argmax(const OneHotVolume& vol, Spacing spacing) {
    const auto n = static_cast<std::size_t>(vol.shape().voxels());
    std::vector<std::uint8_t> out(n, 0);
    for (int c = 1; c < vol.channels(); ++c) {
        const auto ch = vol.channel(c);
        for (std::size_t v = 0; v < n; ++v)
            if (ch[v]) out[v] = static_cast<std::uint8_t>(c);
    }
    ClassTable table = vol.class_table();
    for (int c = 1; c < vol.channels(); ++c)
        if (!table.contains(c)) table[c] = "class_" + std::to_string(c);
    return LabelVolume(vol.shape(), std::move(out), spacing, std::move(table));
}

double volume_fraction(const LabelVolume& vol, int class_id, FractionReference reference) {
    if (class_id <= 0 || class_id > 255 || !vol.class_table().contains(class_id))
        throw OutOfRangeError("class " + std::to_string(class_id) + " not in class table");
    const auto counts = vol.label_counts();
    std::int64_t denom = 0;
    switch (reference) {
        case FractionReference::total_foreground:
            denom = vol.shape().voxels() - counts[0];
            break;
        case FractionReference::largest_class:
            denom = *std::max_element(counts.begin() + 1, counts.end());
            break;
        case FractionReference::whole_grid:
            denom = vol.shape().voxels();
            break;
    }
    if (denom == 0) throw UndefinedFractionError("reference population '" + to_string(reference) + "' is empty");
    return static_cast<double>(counts[class_id]) / static_cast<double>(denom);
}

BinaryVolume upscale_binary(const BinaryVolume& vol, Shape3 target_shape) {
    if (!target_shape.valid()) throw InvalidVolumeError("target shape must be at least 1 along every axis");
    auto data = resample_nearest<std::uint8_t>(vol.data(), vol.shape(), target_shape);
    return BinaryVolume(target_shape, std::move(data), rescaled_spacing(vol.spacing(), vol.shape(), target_shape));
}

BinaryVolume class_mask(const LabelVolume& vol, std::span<const int> classes) {
    std::array<bool, 256> hit{};
    for (int c : classes)
        if (c > 0 && c < 256) hit[c] = true;
    std::vector<std::uint8_t> out(vol.data().size());
    std::transform(vol.data().begin(), vol.data().end(), out.begin(),
                   [&](std::uint8_t v) { return static_cast<std::uint8_t>(hit[v]); });
    return BinaryVolume(vol.shape(), std::move(out), vol.spacing());
}

}  // namespace voxcomp
