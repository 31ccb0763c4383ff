#pragma once

// Denoising auto-encoder for volumetric shape completion.
//
// Topology: `down_stages` stride-2 convolutions, then per up stage one
// stride-2 transposed convolution followed by a unit-stride convolution, then
// `tail_convs` unit-stride convolutions. Hidden activations are ReLU; the
// last convolution feeds a sigmoid (binary occupancy) or a softmax over
// classes.
//
// In residual mode the network output is the estimate of the missing part
// only; the addition with the input happens in compose_completion.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxcomp/conv.hpp"
#include "voxcomp/tensor.hpp"
#include "voxcomp/voxel.hpp"

namespace voxcomp {

enum class FinalActivation { sigmoid, softmax };
enum class OutputMode { full, residual };

struct DaeConfig {
    Shape3 input_shape{128, 128, 128};
    int down_stages = 4;
    /// Encoder widths, one per down stage. Up stages mirror them and the
    /// tail runs at the first width.
    std::vector<int> channel_widths{86, 172, 344, 688};
    int kernel_size = 3;
    bool residual = false;
    /// 1 = binary occupancy; >= 2 = multi-class incl. background channel.
    int num_classes = 1;
    FinalActivation final_activation = FinalActivation::sigmoid;
    int tail_convs = 4;

    /// Multi-class models read the one-hot incomplete volume.
    int input_channels() const noexcept { return num_classes == 1 ? 1 : num_classes; }
    void validate() const;

    /// 128^3 binary configuration with ~22M trainable parameters.
    static DaeConfig canonical();
    /// 256x256x128, 12 anatomies + background, softmax head.
    static DaeConfig multiclass_preset();

    friend bool operator==(const DaeConfig&, const DaeConfig&) = default;
};

nlohmann::json to_json(const DaeConfig& config);
DaeConfig dae_config_from_json(const nlohmann::json& j);

inline constexpr std::int64_t kCanonicalParamsMin = 20'000'000;
inline constexpr std::int64_t kCanonicalParamsMax = 24'000'000;

struct BuildOptions;

struct ModelOutput {
    Tensor probabilities;
    OutputMode mode = OutputMode::full;
};

/// Per-layer parameter gradients, laid out like the layers' own buffers.
struct Gradients {
    std::vector<std::vector<float>> weight;
    std::vector<std::vector<float>> bias;
    void zero();
};

class Dae {
public:
    /// Activations kept for backpropagation: [0] is the input, [i + 1] the
    /// post-activation output of layer i.
    struct Tape {
        std::vector<Tensor> activations;
    };

    Dae(DaeConfig config, std::uint64_t init_seed);

    const DaeConfig& config() const noexcept { return config_; }
    std::vector<ConvLayer>& layers() noexcept { return layers_; }
    const std::vector<ConvLayer>& layers() const noexcept { return layers_; }
    OutputMode mode() const noexcept { return config_.residual ? OutputMode::residual : OutputMode::full; }
    /// Spatial shape after the encoder.
    Shape3 bottleneck_shape() const;
    const std::vector<std::string>& warnings() const noexcept { return warnings_; }

    ModelOutput forward(const Tensor& input) const;
    ModelOutput forward(const BinaryVolume& x) const;
    ModelOutput forward(const OneHotVolume& x) const;
    ModelOutput forward(const Tensor& input, Tape& tape) const;
    /// `grad_probabilities` is dLoss/dOutput; parameter gradients accumulate.
    void backward(const Tape& tape, const Tensor& grad_probabilities, Gradients& grads) const;

    Gradients make_gradients() const;
    void freeze();

private:
    friend Dae build_dae(const DaeConfig& config, std::uint64_t init_seed, BuildOptions options);

    void check_input(const Tensor& input) const;

    DaeConfig config_;
    std::vector<ConvLayer> layers_;
    std::vector<std::string> warnings_;
};

struct BuildOptions {
    /// Out-of-budget parameter count on the canonical geometry throws instead of warning.
    bool strict = false;
};

Dae build_dae(const DaeConfig& config, std::uint64_t init_seed, BuildOptions options = {});

/// Exact count of trainable scalars.
std::int64_t count_parameters(const Dae& model);

/// full: out >= threshold. residual: clamp(x + out, 0, 1) >= threshold, so
/// every input foreground voxel survives for any threshold <= 1.
BinaryVolume compose_completion(const BinaryVolume& x, const ModelOutput& out, double threshold = 0.5);
/// Multi-class: channel argmax of the softmax output.
LabelVolume compose_labels(const ModelOutput& out, const ClassTable& table, Spacing spacing = {1.0, 1.0, 1.0});

// ---- checkpoints --------------------------------------------------------------

struct CheckpointMeta {
    std::string experiment;
    nlohmann::json loss_config = nlohmann::json::object();
    std::string manifest_checksum;
    std::uint64_t seed = 0;
    int epoch = 0;
    std::string config_hash;
};

struct Checkpoint {
    Dae model;
    CheckpointMeta meta;
};

/// Binary file: "VXCKPT01", u64 header length, JSON header, float32 LE weights.
void save_checkpoint(const std::filesystem::path& path, const Dae& model, const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace voxcomp
