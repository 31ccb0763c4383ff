#pragma once

// 3D convolution and transposed convolution with "same"-style padding
// (pad = kernel / 2). A stride-2 convolution maps n -> ceil(n / 2); the
// transposed layer is its exact adjoint and maps n -> 2n.
//
// Kernels are lowered to GEMM through im2col on depth slabs, so peak scratch
// memory stays bounded regardless of grid size.

#include <cstdint>
#include <span>
#include <vector>

#include "voxcomp/tensor.hpp"

namespace voxcomp {

struct ConvLayer {
    enum class Kind { conv, transposed };

    Kind kind = Kind::conv;
    int in_channels = 1;
    int out_channels = 1;
    int kernel = 3;
    int stride = 1;
    bool trainable = true;
    /// conv: (out, in * k^3); transposed: (in, out * k^3). Row-major.
    std::vector<float> weight;
    std::vector<float> bias;

    ConvLayer() = default;
    ConvLayer(Kind k, int cin, int cout, int kernel_size, int stride_);

    std::int64_t taps() const noexcept { return static_cast<std::int64_t>(kernel) * kernel * kernel; }
    Shape3 output_shape(Shape3 in) const;
    std::int64_t parameter_count() const noexcept {
        return static_cast<std::int64_t>(weight.size() + bias.size());
    }

    void forward(const Tensor& in, Tensor& out) const;
    /// Accumulates into grad_weight / grad_bias; writes grad_in if non-null.
    void backward(const Tensor& in, const Tensor& grad_out, Tensor* grad_in, std::span<float> grad_weight,
                  std::span<float> grad_bias) const;
};

namespace detail {

/// Unfolds rows [z0, z1) of the conv output grid `small` into columns.
/// `src` has C channels on grid `big`. `col` is (C * k^3) x ((z1 - z0) * small.w * small.h).
void im2col(const float* src, int channels, Shape3 big, Shape3 small, int kernel, int stride, std::int64_t z0,
            std::int64_t z1, float* col);
/// Adjoint of im2col: scatters `col` back onto `dst` (accumulating).
void col2im(const float* col, int channels, Shape3 big, Shape3 small, int kernel, int stride, std::int64_t z0,
            std::int64_t z1, float* dst);

}  // namespace detail

}  // namespace voxcomp
