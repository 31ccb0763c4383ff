#include "voxcomp/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

#include "voxcomp/error.hpp"
#include "voxcomp/io.hpp"
#include "voxcomp/random.hpp"

namespace voxcomp {

using json = nlohmann::json;

void DaeConfig::validate() const {
    if (!input_shape.valid()) throw ConfigError("input shape must be non-empty");
    if (down_stages < 1) throw ConfigError("down_stages must be >= 1");
    if (static_cast<int>(channel_widths.size()) != down_stages)
        throw ConfigError("channel_widths needs one entry per down stage");
    for (int w : channel_widths)
        if (w < 1) throw ConfigError("channel widths must be positive");
    if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("kernel size must be odd");
    if (tail_convs < 1) throw ConfigError("tail_convs must be >= 1");
    const std::int64_t factor = std::int64_t{1} << down_stages;
    for (int a = 0; a < 3; ++a)
        if (input_shape[a] % factor != 0)
            throw ConfigError("input shape " + input_shape.str() + " not divisible by 2^" + std::to_string(down_stages));
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (num_classes == 1 && final_activation != FinalActivation::sigmoid)
        throw ConfigError("binary completion uses a sigmoid head");
    if (num_classes >= 2 && final_activation != FinalActivation::softmax)
        throw ConfigError("multi-class completion uses a softmax head");
    if (residual && num_classes != 1) throw ConfigError("residual mode is only defined for binary completion");
}

DaeConfig DaeConfig::canonical() { return DaeConfig{}; }

DaeConfig DaeConfig::multiclass_preset() {
    DaeConfig c;
    c.input_shape = Shape3{256, 256, 128};
    c.num_classes = 13;
    c.final_activation = FinalActivation::softmax;
    return c;
}

json to_json(const DaeConfig& c) {
    return json{
        {"input_shape", {c.input_shape.l, c.input_shape.w, c.input_shape.h}},
        {"down_stages", c.down_stages},
        {"channel_widths", c.channel_widths},
        {"kernel_size", c.kernel_size},
        {"residual", c.residual},
        {"num_classes", c.num_classes},
        {"final_activation", c.final_activation == FinalActivation::sigmoid ? "sigmoid" : "softmax"},
        {"tail_convs", c.tail_convs},
    };
}

DaeConfig dae_config_from_json(const json& j) {
    static const std::vector<std::string> known{"input_shape", "down_stages", "channel_widths", "kernel_size",
                                                "residual",    "num_classes", "final_activation", "tail_convs"};
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown dae key '" + key + "'");
    DaeConfig c;
    try {
        if (j.contains("input_shape")) {
            const auto& s = j.at("input_shape");
            c.input_shape = Shape3{s.at(0).get<std::int64_t>(), s.at(1).get<std::int64_t>(), s.at(2).get<std::int64_t>()};
        }
        c.down_stages = j.value("down_stages", c.down_stages);
        if (j.contains("channel_widths")) c.channel_widths = j.at("channel_widths").get<std::vector<int>>();
        c.kernel_size = j.value("kernel_size", c.kernel_size);
        c.residual = j.value("residual", c.residual);
        c.num_classes = j.value("num_classes", c.num_classes);
        const std::string act = j.value("final_activation", c.num_classes == 1 ? "sigmoid" : "softmax");
        if (act != "sigmoid" && act != "softmax") throw ConfigError("unknown final activation '" + act + "'");
        c.final_activation = act == "sigmoid" ? FinalActivation::sigmoid : FinalActivation::softmax;
        c.tail_convs = j.value("tail_convs", c.tail_convs);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed dae config: ") + e.what());
    }
    return c;
}

void Gradients::zero() {
    for (auto& w : weight) std::fill(w.begin(), w.end(), 0.0f);
    for (auto& b : bias) std::fill(b.begin(), b.end(), 0.0f);
}

Dae::Dae(DaeConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
    config_.validate();
    using Kind = ConvLayer::Kind;
    const auto& w = config_.channel_widths;
    const int k = config_.kernel_size;
    int cur = config_.input_channels();
    for (int s = 0; s < config_.down_stages; ++s) {
        layers_.emplace_back(Kind::conv, cur, w[static_cast<std::size_t>(s)], k, 2);
        cur = w[static_cast<std::size_t>(s)];
    }
    for (int s = 0; s < config_.down_stages; ++s) {
        const int target = s < config_.down_stages - 1 ? w[static_cast<std::size_t>(config_.down_stages - 2 - s)] : w[0];
        layers_.emplace_back(Kind::transposed, cur, target, k, 2);
        layers_.emplace_back(Kind::conv, target, target, k, 1);
        cur = target;
    }
    for (int t = 0; t < config_.tail_convs - 1; ++t) layers_.emplace_back(Kind::conv, cur, cur, k, 1);
    layers_.emplace_back(Kind::conv, cur, config_.num_classes, k, 1);

    // He-normal on each layer's effective fan-in; zero biases.
    Rng rng = make_stream(init_seed, {stream::weights});
    for (auto& layer : layers_) {
        double fan_in = static_cast<double>(layer.in_channels) * static_cast<double>(layer.taps());
        if (layer.kind == Kind::transposed) fan_in /= static_cast<double>(layer.stride * layer.stride * layer.stride);
        std::normal_distribution<float> dist(0.0f, static_cast<float>(std::sqrt(2.0 / fan_in)));
        for (auto& v : layer.weight) v = dist(rng);
    }
}

Shape3 Dae::bottleneck_shape() const {
    Shape3 s = config_.input_shape;
    for (int i = 0; i < config_.down_stages; ++i) s = layers_[static_cast<std::size_t>(i)].output_shape(s);
    return s;
}

void Dae::check_input(const Tensor& input) const {
    if (input.shape != config_.input_shape)
        throw ShapeError("input shape " + input.shape.str() + " does not match model input " + config_.input_shape.str());
    if (input.channels != config_.input_channels())
        throw ShapeError("input has " + std::to_string(input.channels) + " channels, model expects " +
                         std::to_string(config_.input_channels()));
}

namespace {

void relu_inplace(Tensor& t) {
    for (auto& v : t.data) v = v > 0.0f ? v : 0.0f;
}

void apply_head(Tensor& t, FinalActivation act) {
    if (act == FinalActivation::sigmoid) {
        for (auto& v : t.data) v = 1.0f / (1.0f + std::exp(-v));
        return;
    }
    const auto n = static_cast<std::size_t>(t.spatial());
    const auto C = static_cast<std::size_t>(t.channels);
    float* p = t.data.data();
    for (std::size_t i = 0; i < n; ++i) {
        float m = p[i];
        for (std::size_t c = 1; c < C; ++c) m = std::max(m, p[c * n + i]);
        float s = 0.0f;
        for (std::size_t c = 0; c < C; ++c) {
            const float e = std::exp(p[c * n + i] - m);
            p[c * n + i] = e;
            s += e;
        }
        const float inv = 1.0f / s;
        for (std::size_t c = 0; c < C; ++c) p[c * n + i] *= inv;
    }
}

// Subnormal activations and gradients stall the GEMM kernels once the head
// saturates, so they are flushed to zero (FTZ | DAZ) for the duration of a pass.
class FlushDenormals {
public:
#if defined(__SSE__)
    FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
    ~FlushDenormals() { _mm_setcsr(saved_); }

private:
    unsigned saved_;
#endif
};

}  // namespace

ModelOutput Dae::forward(const Tensor& input) const {
    check_input(input);
    FlushDenormals ftz;
    Tensor cur = input, next;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        layers_[i].forward(cur, next);
        if (i + 1 < layers_.size()) relu_inplace(next);
        std::swap(cur, next);
    }
    apply_head(cur, config_.final_activation);
    return ModelOutput{std::move(cur), mode()};
}

ModelOutput Dae::forward(const BinaryVolume& x) const { return forward(to_tensor(x)); }
ModelOutput Dae::forward(const OneHotVolume& x) const { return forward(to_tensor(x)); }

ModelOutput Dae::forward(const Tensor& input, Tape& tape) const {
    check_input(input);
    FlushDenormals ftz;
    tape.activations.clear();
    tape.activations.reserve(layers_.size() + 1);
    tape.activations.push_back(input);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        Tensor next;
        layers_[i].forward(tape.activations.back(), next);
        if (i + 1 < layers_.size())
            relu_inplace(next);
        else
            apply_head(next, config_.final_activation);
        tape.activations.push_back(std::move(next));
    }
    return ModelOutput{tape.activations.back(), mode()};
}

void Dae::backward(const Tape& tape, const Tensor& grad_probabilities, Gradients& grads) const {
    if (tape.activations.size() != layers_.size() + 1) throw ShapeError("tape does not match model");
    const Tensor& prob = tape.activations.back();
    if (grad_probabilities.data.size() != prob.data.size()) throw ShapeError("output gradient has wrong size");
    FlushDenormals ftz;

    Tensor g(prob.channels, prob.shape);
    if (config_.final_activation == FinalActivation::sigmoid) {
        for (std::size_t i = 0; i < g.data.size(); ++i)
            g.data[i] = grad_probabilities.data[i] * prob.data[i] * (1.0f - prob.data[i]);
    } else {
        const auto n = static_cast<std::size_t>(prob.spatial());
        const auto C = static_cast<std::size_t>(prob.channels);
        for (std::size_t i = 0; i < n; ++i) {
            float dot = 0.0f;
            for (std::size_t c = 0; c < C; ++c) dot += prob.data[c * n + i] * grad_probabilities.data[c * n + i];
            for (std::size_t c = 0; c < C; ++c)
                g.data[c * n + i] = prob.data[c * n + i] * (grad_probabilities.data[c * n + i] - dot);
        }
    }

    for (std::size_t li = layers_.size(); li-- > 0;) {
        const ConvLayer& layer = layers_[li];
        Tensor grad_in;
        layer.backward(tape.activations[li], g, li > 0 ? &grad_in : nullptr, grads.weight[li], grads.bias[li]);
        if (li == 0) break;
        const Tensor& act = tape.activations[li];
        for (std::size_t i = 0; i < grad_in.data.size(); ++i)
            if (act.data[i] <= 0.0f) grad_in.data[i] = 0.0f;
        g = std::move(grad_in);
    }
}

Gradients Dae::make_gradients() const {
    Gradients g;
    for (const auto& l : layers_) {
        g.weight.emplace_back(l.weight.size(), 0.0f);
        g.bias.emplace_back(l.bias.size(), 0.0f);
    }
    return g;
}

void Dae::freeze() {
    for (auto& l : layers_) l.trainable = false;
}

Dae build_dae(const DaeConfig& config, std::uint64_t init_seed, BuildOptions options) {
    Dae model(config, init_seed);
    const bool canonical_geometry = config.input_shape == Shape3{128, 128, 128} && config.num_classes == 1 &&
                                    config.down_stages == 4 && config.kernel_size == 3;
    if (canonical_geometry) {
        const auto n = count_parameters(model);
        if (n < kCanonicalParamsMin || n > kCanonicalParamsMax) {
            const std::string msg = "canonical configuration has " + std::to_string(n) +
                                    " trainable parameters, outside [20M, 24M]";
            if (options.strict) throw ConfigError(msg);
            std::cerr << "warning: " << msg << "\n";
            model.warnings_.push_back(msg);
        }
    }
    return model;
}

std::int64_t count_parameters(const Dae& model) {
    std::int64_t n = 0;
    for (const auto& l : model.layers())
        if (l.trainable) n += l.parameter_count();
    return n;
}

BinaryVolume compose_completion(const BinaryVolume& x, const ModelOutput& out, double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("completion threshold must lie in (0, 1]");
    if (out.probabilities.channels != 1 || out.probabilities.shape != x.shape())
        throw ShapeError("model output does not match the input volume");
    const auto& p = out.probabilities.data;
    std::vector<std::uint8_t> data(p.size());
    const auto xs = x.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        double v = p[i];
        if (out.mode == OutputMode::residual) v = std::clamp(static_cast<double>(xs[i]) + v, 0.0, 1.0);
        data[i] = static_cast<std::uint8_t>(v >= threshold);
    }
    return BinaryVolume(x.shape(), std::move(data), x.spacing());
}

LabelVolume compose_labels(const ModelOutput& out, const ClassTable& table, Spacing spacing) {
    const Tensor& p = out.probabilities;
    if (p.channels < 2) throw ShapeError("compose_labels needs a multi-class output");
    const auto n = static_cast<std::size_t>(p.spatial());
    std::vector<std::uint8_t> labels(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        int best = 0;
        for (int c = 1; c < p.channels; ++c)
            if (p.data[static_cast<std::size_t>(c) * n + i] > p.data[static_cast<std::size_t>(best) * n + i]) best = c;
        labels[i] = static_cast<std::uint8_t>(best);
    }
    ClassTable t = table;
    for (int c = 1; c < p.channels; ++c)
        if (!t.contains(c)) t[c] = "class_" + std::to_string(c);
    return LabelVolume(p.shape, std::move(labels), spacing, std::move(t));
}

// ---- checkpoints --------------------------------------------------------------

namespace {
constexpr char kCheckpointMagic[8] = {'V', 'X', 'C', 'K', 'P', 'T', '0', '1'};
}

void save_checkpoint(const std::filesystem::path& path, const Dae& model, const CheckpointMeta& meta) {
    std::vector<std::uint8_t> blob;
    json layers = json::array();
    for (const auto& l : model.layers()) {
        layers.push_back(json{{"weights", l.weight.size()}, {"bias", l.bias.size()}, {"trainable", l.trainable}});
        const auto* w = reinterpret_cast<const std::uint8_t*>(l.weight.data());
        blob.insert(blob.end(), w, w + l.weight.size() * sizeof(float));
        const auto* b = reinterpret_cast<const std::uint8_t*>(l.bias.data());
        blob.insert(blob.end(), b, b + l.bias.size() * sizeof(float));
    }
    json header{
        {"schema_version", 1},
        {"dae", to_json(model.config())},
        {"experiment", meta.experiment},
        {"loss", meta.loss_config},
        {"manifest_checksum", meta.manifest_checksum},
        {"seed", meta.seed},
        {"epoch", meta.epoch},
        {"config_hash", meta.config_hash},
        {"layers", layers},
        {"weights_checksum", checksum(blob)},
    };
    const std::string text = header.dump();
    std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
    const std::uint64_t len = text.size();
    const auto* lp = reinterpret_cast<const std::uint8_t*>(&len);
    out.insert(out.end(), lp, lp + 8);
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), blob.begin(), blob.end());
    write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw IoError("not a checkpoint file: " + path.string());
    std::uint64_t len;
    std::memcpy(&len, bytes.data() + 8, 8);
    if (16 + len > bytes.size()) throw IoError("truncated checkpoint header in " + path.string());
    json header;
    try {
        header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
    } catch (const json::parse_error& e) {
        throw ParseError("corrupted checkpoint header in " + path.string() + ": " + e.what(), 16 + e.byte);
    }
    const std::span<const std::uint8_t> blob(bytes.data() + 16 + len, bytes.size() - 16 - len);
    if (checksum(blob) != header.at("weights_checksum").get<std::string>())
        throw ChecksumError("checkpoint weights checksum mismatch in " + path.string());

    CheckpointMeta meta;
    meta.experiment = header.value("experiment", "");
    meta.loss_config = header.value("loss", json::object());
    meta.manifest_checksum = header.value("manifest_checksum", "");
    meta.seed = header.value("seed", std::uint64_t{0});
    meta.epoch = header.value("epoch", 0);
    meta.config_hash = header.value("config_hash", "");

    Dae model(dae_config_from_json(header.at("dae")), meta.seed);
    const auto& layers = header.at("layers");
    if (layers.size() != model.layers().size()) throw IoError("checkpoint layer count does not match its config");
    std::size_t off = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto& l = model.layers()[i];
        if (layers[i].at("weights").get<std::size_t>() != l.weight.size() ||
            layers[i].at("bias").get<std::size_t>() != l.bias.size())
            throw IoError("checkpoint layer " + std::to_string(i) + " has unexpected size");
        const std::size_t wb = l.weight.size() * sizeof(float), bb = l.bias.size() * sizeof(float);
        if (off + wb + bb > blob.size()) throw IoError("truncated checkpoint weights in " + path.string());
        std::memcpy(l.weight.data(), blob.data() + off, wb);
        std::memcpy(l.bias.data(), blob.data() + off + wb, bb);
        off += wb + bb;
        l.trainable = layers[i].value("trainable", true);
    }
    return Checkpoint{std::move(model), std::move(meta)};
}

}  // namespace voxcomp
