#include "voxcomp/conv.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cstring>

#include "voxcomp/error.hpp"

namespace voxcomp {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstMatMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

constexpr std::int64_t kScratchFloats = std::int64_t{1} << 22;

std::int64_t slab_depth(std::int64_t rows, const Shape3& small) {
    const std::int64_t plane = small.w * small.h;
    return std::clamp<std::int64_t>(kScratchFloats / std::max<std::int64_t>(1, rows * plane), 1, small.l);
}

Shape3 conv_out(Shape3 in, int kernel, int stride) {
    const int pad = kernel / 2;
    auto f = [&](std::int64_t n) { return (n + 2 * pad - kernel) / stride + 1; };
    return Shape3{f(in.l), f(in.w), f(in.h)};
}

}  // namespace

namespace detail {

void im2col(const float* src, int channels, Shape3 big, Shape3 small, int kernel, int stride, std::int64_t z0,
            std::int64_t z1, float* col) {
    const int pad = kernel / 2;
    const std::int64_t cols = (z1 - z0) * small.w * small.h;
    const std::int64_t big_plane = big.w * big.h;
    float* row = col;
    for (int c = 0; c < channels; ++c) {
        const float* s = src + static_cast<std::int64_t>(c) * big.voxels();
        for (int kz = 0; kz < kernel; ++kz)
            for (int ky = 0; ky < kernel; ++ky)
                for (int kx = 0; kx < kernel; ++kx) {
                    float* r = row;
                    // Valid output x range where 0 <= x * stride + kx - pad < big.h.
                    const std::int64_t off = kx - pad;
                    const std::int64_t x_lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
                    const std::int64_t x_hi =
                        big.h - 1 - off < 0 ? 0 : std::min<std::int64_t>(small.h, (big.h - 1 - off) / stride + 1);
                    for (std::int64_t z = z0; z < z1; ++z) {
                        const std::int64_t iz = z * stride + kz - pad;
                        for (std::int64_t y = 0; y < small.w; ++y, r += small.h) {
                            const std::int64_t iy = y * stride + ky - pad;
                            if (iz < 0 || iz >= big.l || iy < 0 || iy >= big.w || x_hi <= x_lo) {
                                std::fill(r, r + small.h, 0.0f);
                                continue;
                            }
                            const float* line = s + iz * big_plane + iy * big.h + off;
                            std::fill(r, r + x_lo, 0.0f);
                            if (stride == 1) {
                                std::memcpy(r + x_lo, line + x_lo, static_cast<std::size_t>(x_hi - x_lo) * sizeof(float));
                            } else {
                                for (std::int64_t x = x_lo; x < x_hi; ++x) r[x] = line[x * stride];
                            }
                            std::fill(r + x_hi, r + small.h, 0.0f);
                        }
                    }
                    row += cols;
                }
    }
}

void col2im(const float* col, int channels, Shape3 big, Shape3 small, int kernel, int stride, std::int64_t z0,
            std::int64_t z1, float* dst) {
    const int pad = kernel / 2;
    const std::int64_t cols = (z1 - z0) * small.w * small.h;
    const std::int64_t big_plane = big.w * big.h;
    const float* row = col;
    for (int c = 0; c < channels; ++c) {
        float* d = dst + static_cast<std::int64_t>(c) * big.voxels();
        for (int kz = 0; kz < kernel; ++kz)
            for (int ky = 0; ky < kernel; ++ky)
                for (int kx = 0; kx < kernel; ++kx) {
                    const float* r = row;
                    const std::int64_t off = kx - pad;
                    const std::int64_t x_lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
                    const std::int64_t x_hi =
                        big.h - 1 - off < 0 ? 0 : std::min<std::int64_t>(small.h, (big.h - 1 - off) / stride + 1);
                    for (std::int64_t z = z0; z < z1; ++z) {
                        const std::int64_t iz = z * stride + kz - pad;
                        for (std::int64_t y = 0; y < small.w; ++y, r += small.h) {
                            const std::int64_t iy = y * stride + ky - pad;
                            if (iz < 0 || iz >= big.l || iy < 0 || iy >= big.w) continue;
                            float* line = d + iz * big_plane + iy * big.h + off;
                            if (stride == 1) {
                                for (std::int64_t x = x_lo; x < x_hi; ++x) line[x] += r[x];
                            } else {
                                for (std::int64_t x = x_lo; x < x_hi; ++x) line[x * stride] += r[x];
                            }
                        }
                    }
                    row += cols;
                }
    }
}

}  // namespace detail

ConvLayer::ConvLayer(Kind k, int cin, int cout, int kernel_size, int stride_)
    : kind(k), in_channels(cin), out_channels(cout), kernel(kernel_size), stride(stride_) {
    if (cin < 1 || cout < 1) throw ConfigError("convolution channels must be positive");
    if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("kernel size must be odd");
    if (stride_ < 1) throw ConfigError("stride must be positive");
    weight.assign(static_cast<std::size_t>(cin) * static_cast<std::size_t>(cout) * static_cast<std::size_t>(taps()), 0.0f);
    bias.assign(static_cast<std::size_t>(cout), 0.0f);
}

Shape3 ConvLayer::output_shape(Shape3 in) const {
    if (kind == Kind::conv) return conv_out(in, kernel, stride);
    return Shape3{in.l * stride, in.w * stride, in.h * stride};
}

void ConvLayer::forward(const Tensor& in, Tensor& out) const {
    if (in.channels != in_channels) throw ShapeError("convolution input has wrong channel count");
    const Shape3 out_shape = output_shape(in.shape);
    out = Tensor(out_channels, out_shape);
    const std::int64_t K = in_channels * taps();

    if (kind == Kind::conv) {
        const Shape3 big = in.shape, small = out_shape;
        const std::int64_t plane = small.w * small.h, P = small.voxels();
        const std::int64_t depth = slab_depth(K, small);
        std::vector<float> col(static_cast<std::size_t>(K * depth * plane));
        const Eigen::Map<const RowMat> W(weight.data(), out_channels, K);
        for (std::int64_t z0 = 0; z0 < small.l; z0 += depth) {
            const std::int64_t z1 = std::min(small.l, z0 + depth), pc = (z1 - z0) * plane;
            detail::im2col(in.data.data(), in_channels, big, small, kernel, stride, z0, z1, col.data());
            ConstMatMap C(col.data(), K, pc, Eigen::OuterStride<>(pc));
            MatMap O(out.data.data() + z0 * plane, out_channels, pc, Eigen::OuterStride<>(P));
            O.noalias() = W * C;
        }
    } else {
        // Adjoint of a conv from `out_shape` (big) down to `in.shape` (small).
        const Shape3 big = out_shape, small = in.shape;
        const std::int64_t plane = small.w * small.h, P = small.voxels();
        const std::int64_t Kout = out_channels * taps();
        const std::int64_t depth = slab_depth(Kout, small);
        std::vector<float> col(static_cast<std::size_t>(Kout * depth * plane));
        const Eigen::Map<const RowMat> W(weight.data(), in_channels, Kout);
        for (std::int64_t z0 = 0; z0 < small.l; z0 += depth) {
            const std::int64_t z1 = std::min(small.l, z0 + depth), pc = (z1 - z0) * plane;
            ConstMatMap X(in.data.data() + z0 * plane, in_channels, pc, Eigen::OuterStride<>(P));
            MatMap C(col.data(), Kout, pc, Eigen::OuterStride<>(pc));
            C.noalias() = W.transpose() * X;
            detail::col2im(col.data(), out_channels, big, small, kernel, stride, z0, z1, out.data.data());
        }
    }
    const auto n = static_cast<std::size_t>(out.spatial());
    for (int c = 0; c < out_channels; ++c) {
        float* p = out.data.data() + static_cast<std::size_t>(c) * n;
        const float b = bias[static_cast<std::size_t>(c)];
        for (std::size_t i = 0; i < n; ++i) p[i] += b;
    }
}

void ConvLayer::backward(const Tensor& in, const Tensor& grad_out, Tensor* grad_in, std::span<float> grad_weight,
                         std::span<float> grad_bias) const {
    const std::int64_t K = in_channels * taps();
    if (grad_weight.size() != weight.size() || grad_bias.size() != bias.size())
        throw ShapeError("gradient buffers do not match layer parameters");
    if (grad_in) *grad_in = Tensor(in_channels, in.shape);

    const auto n_out = static_cast<std::size_t>(grad_out.spatial());
    for (int c = 0; c < out_channels; ++c) {
        const float* g = grad_out.data.data() + static_cast<std::size_t>(c) * n_out;
        double s = 0.0;
        for (std::size_t i = 0; i < n_out; ++i) s += g[i];
        grad_bias[static_cast<std::size_t>(c)] += static_cast<float>(s);
    }

    if (kind == Kind::conv) {
        const Shape3 big = in.shape, small = grad_out.shape;
        const std::int64_t plane = small.w * small.h, P = small.voxels();
        const std::int64_t depth = slab_depth(K, small);
        std::vector<float> col(static_cast<std::size_t>(K * depth * plane));
        const Eigen::Map<const RowMat> W(weight.data(), out_channels, K);
        Eigen::Map<RowMat> dW(grad_weight.data(), out_channels, K);
        for (std::int64_t z0 = 0; z0 < small.l; z0 += depth) {
            const std::int64_t z1 = std::min(small.l, z0 + depth), pc = (z1 - z0) * plane;
            ConstMatMap G(grad_out.data.data() + z0 * plane, out_channels, pc, Eigen::OuterStride<>(P));
            detail::im2col(in.data.data(), in_channels, big, small, kernel, stride, z0, z1, col.data());
            MatMap C(col.data(), K, pc, Eigen::OuterStride<>(pc));
            dW.noalias() += G * C.transpose();
            if (grad_in) {
                C.noalias() = W.transpose() * G;
                detail::col2im(col.data(), in_channels, big, small, kernel, stride, z0, z1, grad_in->data.data());
            }
        }
    } else {
        const Shape3 big = grad_out.shape, small = in.shape;
        const std::int64_t plane = small.w * small.h, P = small.voxels();
        const std::int64_t Kout = out_channels * taps();
        const std::int64_t depth = slab_depth(Kout, small);
        std::vector<float> col(static_cast<std::size_t>(Kout * depth * plane));
        const Eigen::Map<const RowMat> W(weight.data(), in_channels, Kout);
        Eigen::Map<RowMat> dW(grad_weight.data(), in_channels, Kout);
        for (std::int64_t z0 = 0; z0 < small.l; z0 += depth) {
            const std::int64_t z1 = std::min(small.l, z0 + depth), pc = (z1 - z0) * plane;
            detail::im2col(grad_out.data.data(), out_channels, big, small, kernel, stride, z0, z1, col.data());
            ConstMatMap C(col.data(), Kout, pc, Eigen::OuterStride<>(pc));
            ConstMatMap X(in.data.data() + z0 * plane, in_channels, pc, Eigen::OuterStride<>(P));
            dW.noalias() += X * C.transpose();
            if (grad_in) {
                MatMap GI(grad_in->data.data() + z0 * plane, in_channels, pc, Eigen::OuterStride<>(P));
                GI.noalias() = W * C;
            }
        }
    }
}

}  // namespace voxcomp
