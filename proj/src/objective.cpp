#include "voxcomp/objective.hpp"

namespace voxcomp {

using json = nlohmann::json;

void LossConfig::validate() const {
    if (!(smooth_eps >= 0.0)) throw ConfigError("smooth_eps must be >= 0");
    for (double w : class_weights)
        if (!(w > 0.0)) throw ConfigError("class weights must be positive");
}

json to_json(const LossConfig& c) {
    return json{
        {"mapping", c.mapping == Mapping::full ? "full" : "residual"},
        {"aggregated", c.aggregated},
        {"smooth_eps", c.smooth_eps},
        {"class_weights", c.class_weights},
        {"reduction", c.reduction == Reduction::sum ? "sum" : "mean"},
    };
}

LossConfig loss_config_from_json(const json& j) {
    static const std::vector<std::string> known{"mapping", "aggregated", "smooth_eps", "class_weights", "reduction"};
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown loss key '" + key + "'");
    LossConfig c;
    try {
        const std::string mapping = j.value("mapping", "full");
        if (mapping != "full" && mapping != "residual") throw ConfigError("unknown mapping '" + mapping + "'");
        c.mapping = mapping == "full" ? Mapping::full : Mapping::residual;
        c.aggregated = j.value("aggregated", false);
        c.smooth_eps = j.value("smooth_eps", 1e-6);
        if (j.contains("class_weights")) c.class_weights = j.at("class_weights").get<std::vector<double>>();
        const std::string reduction = j.value("reduction", "sum");
        if (reduction != "sum" && reduction != "mean") throw ConfigError("unknown reduction '" + reduction + "'");
        c.reduction = reduction == "sum" ? Reduction::sum : Reduction::mean;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed loss config: ") + e.what());
    }
    c.validate();
    return c;
}

double sample_loss(const Sample& sample, const ModelOutput& out, const LossConfig& config, Tensor* grad) {
    const Tensor& p = out.probabilities;
    if (p.data.size() != sample.target.data.size()) throw ShapeError("model output and target differ in size");
    std::span<const float> y(sample.target.data), pv(p.data);
    std::span<float> g;
    if (grad) {
        *grad = Tensor(p.channels, p.shape);
        g = std::span<float>(grad->data);
    }

    if (p.channels >= 2) {
        if (config.mapping == Mapping::residual)
            throw ConfigError("residual mapping is unsupported for multi-class completion");
        return multiclass_dice_loss_grad<float>(y, pv, p.channels, config.class_weights, config.smooth_eps, g);
    }
    if (config.mapping == Mapping::residual) {
        if (out.mode != OutputMode::residual) throw ConfigError("residual loss needs a residual-mode model");
        std::span<const float> x(sample.input.data);
        if (!grad) return residual_dice_loss<float>(y, x, pv, config.smooth_eps);
        return residual_dice_loss_grad<float>(y, x, pv, config.smooth_eps, g);
    }
    if (out.mode != OutputMode::full) throw ConfigError("full-mapping loss needs a full-mode model");
    if (!grad) return dice_loss<float>(y, pv, config.smooth_eps);
    return dice_loss_grad<float>(y, pv, config.smooth_eps, g);
}

namespace {

double batch_loss(std::span<const Sample> batch, const Dae& model, const LossConfig& config) {
    double total = 0.0;
    for (const auto& s : batch) total += sample_loss(s, model.forward(s.input), config);
    if (config.reduction == Reduction::mean && !batch.empty()) total /= static_cast<double>(batch.size());
    return total;
}

}  // namespace

double loss_full(std::span<const Sample> batch, const Dae& model, const LossConfig& config) {
    if (config.mapping != Mapping::full || model.mode() != OutputMode::full)
        throw ConfigError("loss_full needs a full-mode model and mapping");
    return batch_loss(batch, model, config);
}

double loss_residual(std::span<const Sample> batch, const Dae& model, const LossConfig& config) {
    if (model.config().num_classes != 1) throw ConfigError("residual loss is unsupported for multi-class completion");
    if (config.mapping != Mapping::residual || model.mode() != OutputMode::residual)
        throw ConfigError("loss_residual needs a residual-mode model and mapping");
    return batch_loss(batch, model, config);
}

double loss_multiclass(const OneHotVolume& y, const Tensor& p, std::span<const double> weights, double eps) {
    if (p.channels != y.channels() || p.shape != y.shape()) throw ShapeError("multi-class loss: channel mismatch");
    std::vector<float> yf(y.data().begin(), y.data().end());
    return multiclass_dice_loss<float>(yf, p.data, p.channels, weights, eps);
}

}  // namespace voxcomp
