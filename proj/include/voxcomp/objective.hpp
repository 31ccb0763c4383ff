#pragma once

// Soft Dice objectives for the full and residual completion mappings.
//
// dice = (2 * sum(y * p) + eps) / (sum(y * y) + sum(p * p) + eps), and the
// loss minimised is 1 - dice. With eps = 0 and both grids empty the
// coefficient is defined as 1.
//
// The *_grad variants return the loss and write dLoss/dp, templated on the
// scalar so gradient checks can run in double precision.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxcomp/error.hpp"
#include "voxcomp/network.hpp"
#include "voxcomp/tensor.hpp"

namespace voxcomp {

enum class Mapping { full, residual };
enum class Reduction { sum, mean };

struct LossConfig {
    Mapping mapping = Mapping::full;
    /// Sum over all M variants of each subject in one step vs. per-sample.
    bool aggregated = false;
    double smooth_eps = 1e-6;
    /// Per-channel weights for multi-class; empty means uniform.
    std::vector<double> class_weights;
    Reduction reduction = Reduction::sum;

    void validate() const;
};

nlohmann::json to_json(const LossConfig& config);
LossConfig loss_config_from_json(const nlohmann::json& j);

namespace detail {

struct DiceSums {
    double yp = 0.0;
    double yy = 0.0;
    double pp = 0.0;
};

inline double dice_from_sums(const DiceSums& s, double eps) {
    const double den = s.yy + s.pp + eps;
    if (den == 0.0) return 1.0;
    return (2.0 * s.yp + eps) / den;
}

template <typename T>
DiceSums dice_sums(std::span<const T> y, std::span<const T> p) {
    if (y.size() != p.size()) throw ShapeError("dice: prediction and target differ in size");
    DiceSums s;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double a = static_cast<double>(y[i]), b = static_cast<double>(p[i]);
        s.yp += a * b;
        s.yy += a * a;
        s.pp += b * b;
    }
    return s;
}

/// dLoss/dp_i = -(2 y_i (S + eps) - 2 p_i (2 I + eps)) / (S + eps)^2.
template <typename T>
void dice_loss_gradient(std::span<const T> y, std::span<const T> p, const DiceSums& s, double eps, double scale,
                        std::span<T> grad) {
    const double den = s.yy + s.pp + eps;
    if (den == 0.0) {
        std::fill(grad.begin(), grad.end(), T(0));
        return;
    }
    const double num = 2.0 * s.yp + eps;
    const double inv = 1.0 / (den * den);
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double g = -(2.0 * static_cast<double>(y[i]) * den - 2.0 * static_cast<double>(p[i]) * num) * inv;
        grad[i] = static_cast<T>(scale * g);
    }
}

}  // namespace detail

template <typename T>
double dice_coefficient(std::span<const T> y, std::span<const T> p, double eps = 1e-6) {
    return detail::dice_from_sums(detail::dice_sums(y, p), eps);
}

template <typename T>
double dice_loss(std::span<const T> y, std::span<const T> p, double eps = 1e-6) {
    return 1.0 - dice_coefficient(y, p, eps);
}

template <typename T>
double dice_loss_grad(std::span<const T> y, std::span<const T> p, double eps, std::span<T> grad) {
    if (grad.size() != p.size()) throw ShapeError("dice: gradient buffer has wrong size");
    const auto s = detail::dice_sums(y, p);
    detail::dice_loss_gradient(y, p, s, eps, 1.0, grad);
    return 1.0 - detail::dice_from_sums(s, eps);
}

/// Composed prediction clamp(x + r, 0, 1), the residual completion.
template <typename T>
std::vector<T> residual_composition(std::span<const T> x, std::span<const T> r) {
    if (x.size() != r.size()) throw ShapeError("residual: input and output differ in size");
    std::vector<T> q(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) q[i] = std::clamp<T>(x[i] + r[i], T(0), T(1));
    return q;
}

template <typename T>
double residual_dice_loss(std::span<const T> y, std::span<const T> x, std::span<const T> r, double eps = 1e-6) {
    const auto q = residual_composition(x, r);
    return dice_loss(y, std::span<const T>(q), eps);
}

/// Loss of clamp(x + r) against y, gradient with respect to r. The clamp
/// passes gradient only strictly inside (0, 1).
template <typename T>
double residual_dice_loss_grad(std::span<const T> y, std::span<const T> x, std::span<const T> r, double eps,
                               std::span<T> grad) {
    const auto q = residual_composition(x, r);
    const double loss = dice_loss_grad(y, std::span<const T>(q), eps, grad);
    for (std::size_t i = 0; i < q.size(); ++i) {
        const T s = x[i] + r[i];
        if (!(s > T(0) && s < T(1))) grad[i] = T(0);
    }
    return loss;
}

/// Weighted mean of per-channel Dice losses. `y` and `p` are channel-major
/// with `channels` planes.
template <typename T>
double multiclass_dice_loss_grad(std::span<const T> y, std::span<const T> p, int channels,
                                 std::span<const double> weights, double eps, std::span<T> grad) {
    if (channels < 2) throw ShapeError("multi-class dice needs at least 2 channels");
    if (y.size() != p.size() || y.size() % static_cast<std::size_t>(channels) != 0)
        throw ShapeError("multi-class dice: channel mismatch");
    if (!weights.empty() && weights.size() != static_cast<std::size_t>(channels))
        throw ShapeError("multi-class dice: one weight per channel required");
    const std::size_t n = y.size() / static_cast<std::size_t>(channels);
    double wsum = 0.0;
    for (int c = 0; c < channels; ++c) wsum += weights.empty() ? 1.0 : weights[static_cast<std::size_t>(c)];
    double loss = 0.0;
    for (int c = 0; c < channels; ++c) {
        const double w = (weights.empty() ? 1.0 : weights[static_cast<std::size_t>(c)]) / wsum;
        const auto yc = y.subspan(static_cast<std::size_t>(c) * n, n);
        const auto pc = p.subspan(static_cast<std::size_t>(c) * n, n);
        const auto s = detail::dice_sums(yc, pc);
        if (!grad.empty()) detail::dice_loss_gradient(yc, pc, s, eps, w, grad.subspan(static_cast<std::size_t>(c) * n, n));
        loss += w * (1.0 - detail::dice_from_sums(s, eps));
    }
    return loss;
}

template <typename T>
double multiclass_dice_loss(std::span<const T> y, std::span<const T> p, int channels, std::span<const double> weights,
                            double eps = 1e-6) {
    return multiclass_dice_loss_grad(y, p, channels, weights, eps, std::span<T>());
}

// ---- model-level objectives -----------------------------------------------------

/// One (x_n^m, y_n) record as network tensors: binary occupancy (1 channel)
/// or one-hot (C channels) for multi-class models.
struct Sample {
    Tensor input;
    Tensor target;
};

/// Per-sample Dice term for the configured mapping given the model output.
/// Writes dLoss/dOutput into `grad` when it is non-null.
double sample_loss(const Sample& sample, const ModelOutput& out, const LossConfig& config, Tensor* grad = nullptr);

/// Sum (or mean) of Dice losses of the full mapping.
double loss_full(std::span<const Sample> batch, const Dae& model, const LossConfig& config);
/// Residual objective: Dice of clamp(x + output) against y.
double loss_residual(std::span<const Sample> batch, const Dae& model, const LossConfig& config);
double loss_multiclass(const OneHotVolume& y, const Tensor& p, std::span<const double> weights, double eps = 1e-6);

}  // namespace voxcomp
