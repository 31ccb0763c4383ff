#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "voxcomp/voxel.hpp"

namespace voxcomp {

/// Dense float feature map, channel-major (C, L, W, H).
struct Tensor {
    int channels = 0;
    Shape3 shape{0, 0, 0};
    std::vector<float> data;

    Tensor() = default;
    Tensor(int c, Shape3 s, float fill = 0.0f)
        : channels(c), shape(s), data(static_cast<std::size_t>(c) * static_cast<std::size_t>(s.voxels()), fill) {}

    std::int64_t spatial() const noexcept { return shape.voxels(); }
    std::span<float> channel(int c) {
        const auto n = static_cast<std::size_t>(spatial());
        return std::span<float>(data).subspan(static_cast<std::size_t>(c) * n, n);
    }
    std::span<const float> channel(int c) const {
        const auto n = static_cast<std::size_t>(spatial());
        return std::span<const float>(data).subspan(static_cast<std::size_t>(c) * n, n);
    }
};

inline Tensor to_tensor(const BinaryVolume& v) {
    Tensor t(1, v.shape());
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(v.data()[i]);
    return t;
}

inline Tensor to_tensor(const OneHotVolume& v) {
    Tensor t(v.channels(), v.shape());
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(v.data()[i]);
    return t;
}

}  // namespace voxcomp
