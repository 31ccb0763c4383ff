#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxcomp/corpus.hpp"
#include "voxcomp/network.hpp"
#include "voxcomp/objective.hpp"

namespace voxcomp {

enum class ExperimentName { dae_b, dae_agg, dae_res, dae_agg_res, multiclass_agg };

std::string to_string(ExperimentName name);
ExperimentName experiment_name_from_string(const std::string& s);

struct ExperimentConfig {
    ExperimentName name = ExperimentName::dae_agg_res;
    DaeConfig dae;
    LossConfig loss;
    int epochs = 100;
    double learning_rate = 1e-4;
    double beta1 = 0.3;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    /// Subject groups per step when aggregated, instances per step otherwise.
    int batch_size = 1;
    std::uint64_t seed = 0;
    std::string corpus;
    std::string output_dir;
    int checkpoint_every = 0;

    /// Sets residual / aggregation / mapping from the experiment name.
    void apply_name();
    void validate() const;
    /// CRC-32 of the canonical JSON form (output location excluded).
    std::string hash() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Unknown keys are rejected. Missing keys keep their defaults.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct TrainingRecord {
    std::string experiment;
    /// Mean per-sample loss of each epoch.
    std::vector<double> epoch_losses;
    double wall_clock_seconds = 0.0;
    std::uint64_t seed = 0;
    std::string checkpoint;
    std::string config_hash;
    std::string manifest_checksum;
};

nlohmann::json to_json(const TrainingRecord& record);

/// Adaptive-moment optimiser over all trainable layers.
class Adam {
public:
    Adam(const Dae& model, double lr, double beta1, double beta2, double eps);
    void step(Dae& model, const Gradients& grads);
    int steps() const noexcept { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    int t_ = 0;
    std::vector<std::vector<float>> m_w_, v_w_, m_b_, v_b_;
};

/// Network tensors for one pair: binary occupancy, or one-hot for multi-class.
Sample make_sample(const CompletionPair& pair, const DaeConfig& dae);

/// (subject group, variant) references making up each optimisation step of
/// one epoch. Aggregated batches hold whole subject groups; otherwise
/// variants are shuffled independently. Every variant appears exactly once.
using BatchPlan = std::vector<std::vector<std::pair<std::size_t, std::size_t>>>;
BatchPlan plan_epoch(std::span<const std::size_t> group_sizes, bool aggregated, int batch_size, Rng& rng);

struct TrainOptions {
    std::function<void(int epoch, double loss)> on_epoch;
    /// Warm start from these weights instead of a fresh initialisation.
    const Dae* initial_model = nullptr;
};

struct TrainResult {
    TrainingRecord record;
    Dae model;
};

TrainResult train(const ExperimentConfig& config, const Corpus& corpus, const std::string& manifest_checksum = {},
                  const TrainOptions& options = {});
/// Loads the manifest named by config.corpus.
TrainResult train(const ExperimentConfig& config, const TrainOptions& options = {});

struct AblationResult {
    std::vector<TrainResult> runs;
    /// experiment name -> error for members that failed.
    std::vector<std::pair<std::string, std::string>> failures;
    bool partial() const noexcept { return !failures.empty(); }
};

/// The four binary variants (dae_b, dae_agg, dae_res, dae_agg_res) from the
/// same seed and corpus. Checkpoints land in base.output_dir/<name>.ckpt.
AblationResult run_ablation_suite(const ExperimentConfig& base, const Corpus& corpus,
                                  const std::string& manifest_checksum = {}, const TrainOptions& options = {});

}  // namespace voxcomp
