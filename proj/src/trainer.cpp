#include "voxcomp/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "voxcomp/error.hpp"
#include "voxcomp/io.hpp"
#include "voxcomp/random.hpp"

namespace voxcomp {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(ExperimentName name) {
    switch (name) {
        case ExperimentName::dae_b: return "dae_b";
        case ExperimentName::dae_agg: return "dae_agg";
        case ExperimentName::dae_res: return "dae_res";
        case ExperimentName::dae_agg_res: return "dae_agg_res";
        case ExperimentName::multiclass_agg: return "multiclass_agg";
    }
    return "?";
}

ExperimentName experiment_name_from_string(const std::string& s) {
    for (auto n : {ExperimentName::dae_b, ExperimentName::dae_agg, ExperimentName::dae_res, ExperimentName::dae_agg_res,
                   ExperimentName::multiclass_agg})
        if (to_string(n) == s) return n;
    throw ConfigError("unknown experiment name '" + s + "'");
}

namespace {

struct Variant {
    bool residual;
    bool aggregated;
};

Variant variant_of(ExperimentName name) {
    switch (name) {
        case ExperimentName::dae_b: return {false, false};
        case ExperimentName::dae_agg: return {false, true};
        case ExperimentName::dae_res: return {true, false};
        case ExperimentName::dae_agg_res: return {true, true};
        case ExperimentName::multiclass_agg: return {false, true};
    }
    return {false, false};
}

}  // namespace

void ExperimentConfig::apply_name() {
    const auto v = variant_of(name);
    dae.residual = v.residual;
    loss.aggregated = v.aggregated;
    loss.mapping = v.residual ? Mapping::residual : Mapping::full;
    if (name != ExperimentName::multiclass_agg && dae.num_classes != 1) {
        dae.num_classes = 1;
        dae.final_activation = FinalActivation::sigmoid;
    }
}

void ExperimentConfig::validate() const {
    dae.validate();
    loss.validate();
    const auto v = variant_of(name);
    if (dae.residual != v.residual || loss.aggregated != v.aggregated ||
        (loss.mapping == Mapping::residual) != v.residual)
        throw ConfigError("experiment '" + to_string(name) + "' requires residual=" + (v.residual ? "true" : "false") +
                          " and aggregated=" + (v.aggregated ? "true" : "false"));
    if (name == ExperimentName::multiclass_agg && dae.num_classes < 2)
        throw ConfigError("multiclass_agg needs num_classes >= 2");
    if (name != ExperimentName::multiclass_agg && dae.num_classes != 1)
        throw ConfigError("binary experiments need num_classes = 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

json to_json(const ExperimentConfig& c) {
    return json{
        {"schema_version", 1},
        {"name", to_string(c.name)},
        {"dae", to_json(c.dae)},
        {"loss", to_json(c.loss)},
        {"epochs", c.epochs},
        {"learning_rate", c.learning_rate},
        {"beta1", c.beta1},
        {"beta2", c.beta2},
        {"adam_eps", c.adam_eps},
        {"batch_size", c.batch_size},
        {"seed", c.seed},
        {"corpus", c.corpus},
        {"output_dir", c.output_dir},
        {"checkpoint_every", c.checkpoint_every},
    };
}

std::string ExperimentConfig::hash() const {
    json j = to_json(*this);
    j.erase("output_dir");
    j.erase("checkpoint_every");
    j.erase("corpus");
    return checksum(j.dump());
}

ExperimentConfig experiment_config_from_json(const json& j) {
    static const std::vector<std::string> known{"schema_version", "name",     "dae",        "loss",
                                                "epochs",         "learning_rate", "beta1", "beta2",
                                                "adam_eps",       "batch_size", "seed",       "corpus",
                                                "output_dir",     "checkpoint_every"};
    if (!j.is_object()) throw ConfigError("experiment config must be a key-value object");
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("unknown config key '" + key + "'");
    if (j.value("schema_version", 1) != 1) throw ConfigError("unsupported config schema_version");

    ExperimentConfig c;
    try {
        c.name = experiment_name_from_string(j.value("name", std::string("dae_agg_res")));
        if (j.contains("dae")) c.dae = dae_config_from_json(j.at("dae"));
        if (c.name == ExperimentName::multiclass_agg && !(j.contains("dae") && j.at("dae").contains("num_classes")))
            c.dae = DaeConfig::multiclass_preset();
        if (c.dae.num_classes >= 2 && !(j.contains("dae") && j.at("dae").contains("final_activation")))
            c.dae.final_activation = FinalActivation::softmax;
        if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"));
        c.epochs = j.value("epochs", c.epochs);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        c.corpus = j.value("corpus", c.corpus);
        c.output_dir = j.value("output_dir", c.output_dir);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed experiment config: ") + e.what());
    }

    // Explicit flags that contradict the experiment name are errors, not overrides.
    const auto v = variant_of(c.name);
    if (j.contains("dae") && j.at("dae").contains("residual") && c.dae.residual != v.residual)
        throw ConfigError("dae.residual conflicts with experiment '" + to_string(c.name) + "'");
    if (j.contains("loss") && j.at("loss").contains("aggregated") && c.loss.aggregated != v.aggregated)
        throw ConfigError("loss.aggregated conflicts with experiment '" + to_string(c.name) + "'");
    c.apply_name();
    c.validate();
    return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    const auto bytes = read_file(path);
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw ParseError("cannot parse config " + path.string() + ": " + e.what(), e.byte);
    }
    auto c = experiment_config_from_json(j);
    if (!c.corpus.empty() && fs::path(c.corpus).is_relative()) c.corpus = (path.parent_path() / c.corpus).string();
    return c;
}

json to_json(const TrainingRecord& r) {
    return json{
        {"experiment", r.experiment},
        {"epoch_losses", r.epoch_losses},
        {"wall_clock_seconds", r.wall_clock_seconds},
        {"seed", r.seed},
        {"checkpoint", r.checkpoint},
        {"config_hash", r.config_hash},
        {"manifest_checksum", r.manifest_checksum},
    };
}

// ---- optimiser -------------------------------------------------------------------

Adam::Adam(const Dae& model, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& l : model.layers()) {
        m_w_.emplace_back(l.weight.size(), 0.0f);
        v_w_.emplace_back(l.weight.size(), 0.0f);
        m_b_.emplace_back(l.bias.size(), 0.0f);
        v_b_.emplace_back(l.bias.size(), 0.0f);
    }
}

namespace {

void adam_update(std::vector<float>& param, const std::vector<float>& grad, std::vector<float>& m,
                 std::vector<float>& v, double lr_t, double b1, double b2, double eps) {
    const float fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2);
    for (std::size_t i = 0; i < param.size(); ++i) {
        const float g = grad[i];
        m[i] = fb1 * m[i] + (1.0f - fb1) * g;
        v[i] = fb2 * v[i] + (1.0f - fb2) * g * g;
        param[i] -= static_cast<float>(lr_t * m[i] / (std::sqrt(static_cast<double>(v[i])) + eps));
    }
}

}  // namespace

void Adam::step(Dae& model, const Gradients& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    const double lr_t = lr_ * std::sqrt(bc2) / bc1;
    // eps is applied to the bias-corrected second moment, as in the original formulation.
    const double eps_t = eps_ * std::sqrt(bc2);
    auto& layers = model.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (!layers[i].trainable) continue;
        adam_update(layers[i].weight, grads.weight[i], m_w_[i], v_w_[i], lr_t, beta1_, beta2_, eps_t);
        adam_update(layers[i].bias, grads.bias[i], m_b_[i], v_b_[i], lr_t, beta1_, beta2_, eps_t);
    }
}

// ---- training ----------------------------------------------------------------------

Sample make_sample(const CompletionPair& pair, const DaeConfig& dae) {
    if (pair.incomplete.shape() != dae.input_shape)
        throw ConfigError("pair grid " + pair.incomplete.shape().str() + " does not match model input " +
                          dae.input_shape.str());
    if (dae.num_classes == 1) return Sample{to_tensor(binarize(pair.incomplete)), to_tensor(binarize(pair.complete))};
    return Sample{to_tensor(one_hot(pair.incomplete, dae.num_classes)), to_tensor(one_hot(pair.complete, dae.num_classes))};
}

BatchPlan plan_epoch(std::span<const std::size_t> group_sizes, bool aggregated, int batch_size, Rng& rng) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    const auto bs = static_cast<std::size_t>(batch_size);
    BatchPlan batches;
    if (aggregated) {
        std::vector<std::size_t> order(group_sizes.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t b = 0; b < order.size(); b += bs) {
            batches.emplace_back();
            for (std::size_t k = b; k < std::min(order.size(), b + bs); ++k)
                for (std::size_t v = 0; v < group_sizes[order[k]]; ++v) batches.back().emplace_back(order[k], v);
        }
    } else {
        std::vector<std::pair<std::size_t, std::size_t>> all;
        for (std::size_t g = 0; g < group_sizes.size(); ++g)
            for (std::size_t v = 0; v < group_sizes[g]; ++v) all.emplace_back(g, v);
        std::shuffle(all.begin(), all.end(), rng);
        for (std::size_t b = 0; b < all.size(); b += bs)
            batches.emplace_back(all.begin() + static_cast<std::ptrdiff_t>(b),
                                 all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), b + bs)));
    }
    return batches;
}

namespace {

void check_corpus(const ExperimentConfig& config, const Corpus& corpus) {
    if (corpus.model_shape != config.dae.input_shape)
        throw ConfigError("corpus grid " + corpus.model_shape.str() + " does not match model input " +
                          config.dae.input_shape.str());
    if (config.dae.num_classes >= 2) {
        for (const auto& p : corpus.pairs)
            for (int c : p.complete.present_classes())
                if (c >= config.dae.num_classes)
                    throw ConfigError("corpus label " + std::to_string(c) + " exceeds num_classes " +
                                      std::to_string(config.dae.num_classes));
    }
}

std::string checkpoint_path(const ExperimentConfig& config, const std::string& suffix) {
    return (fs::path(config.output_dir) / (to_string(config.name) + suffix + ".ckpt")).string();
}

}  // namespace

TrainResult train(const ExperimentConfig& config, const Corpus& corpus, const std::string& manifest_checksum,
                  const TrainOptions& options) {
    config.validate();
    check_corpus(config, corpus);
    const auto start = std::chrono::steady_clock::now();

    // Group training samples by subject (all M variants together).
    std::vector<std::vector<Sample>> groups;
    {
        std::map<std::string, std::size_t> index;
        for (const CompletionPair* p : corpus.pairs_in(Split::train)) {
            auto [it, inserted] = index.emplace(p->subject_id, groups.size());
            if (inserted) groups.emplace_back();
            groups[it->second].push_back(make_sample(*p, config.dae));
        }
    }
    if (config.epochs > 0 && groups.empty()) throw ConfigError("corpus has no training pairs");

    std::vector<std::size_t> group_sizes;
    for (const auto& g : groups) group_sizes.push_back(g.size());
    Dae model = build_dae(config.dae, config.seed);
    if (options.initial_model) {
        if (!(options.initial_model->config() == config.dae))
            throw ConfigError("warm-start model does not match the experiment's network config");
        model = *options.initial_model;
    }
    Adam adam(model, config.learning_rate, config.beta1, config.beta2, config.adam_eps);
    Gradients grads = model.make_gradients();
    Rng order_rng = make_stream(config.seed, {stream::data_order});

    TrainingRecord record;
    record.experiment = to_string(config.name);
    record.seed = config.seed;
    record.config_hash = config.hash();
    record.manifest_checksum = manifest_checksum;

    CheckpointMeta meta{record.experiment, to_json(config.loss), manifest_checksum, config.seed, 0, record.config_hash};
    if (!config.output_dir.empty()) fs::create_directories(config.output_dir);

    Dae::Tape tape;
    Tensor grad_out;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto batches = plan_epoch(group_sizes, config.loss.aggregated, config.batch_size, order_rng);
        double epoch_sum = 0.0;
        std::size_t epoch_count = 0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            grads.zero();
            const auto& batch = batches[bi];
            const double scale = config.loss.reduction == Reduction::mean ? 1.0 / static_cast<double>(batch.size()) : 1.0;
            double batch_sum = 0.0;
            for (const auto& [g, v] : batch) {
                const Sample& s = groups[g][v];
                const ModelOutput out = model.forward(s.input, tape);
                const double loss = sample_loss(s, out, config.loss, &grad_out);
                if (!std::isfinite(loss))
                    throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                        std::to_string(bi));
                if (scale != 1.0)
                    for (auto& x : grad_out.data) x = static_cast<float>(x * scale);
                model.backward(tape, grad_out, grads);
                batch_sum += loss;
            }
            adam.step(model, grads);
            epoch_sum += batch_sum;
            epoch_count += batch.size();
        }
        const double epoch_loss = epoch_count ? epoch_sum / static_cast<double>(epoch_count) : 0.0;
        if (!std::isfinite(epoch_loss)) throw TrainingError("non-finite loss at epoch " + std::to_string(epoch));
        record.epoch_losses.push_back(epoch_loss);
        if (options.on_epoch) options.on_epoch(epoch, epoch_loss);

        if (!config.output_dir.empty() && config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 &&
            epoch + 1 < config.epochs) {
            meta.epoch = epoch + 1;
            save_checkpoint(checkpoint_path(config, "_epoch" + std::to_string(epoch + 1)), model, meta);
        }
    }

    if (!config.output_dir.empty()) {
        meta.epoch = config.epochs;
        record.checkpoint = checkpoint_path(config, "");
        save_checkpoint(record.checkpoint, model, meta);
        write_file_atomic(fs::path(config.output_dir) / (to_string(config.name) + "_config.json"),
                          to_json(config).dump(2) + "\n");
    }
    record.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!config.output_dir.empty()) {
        // On disk the checkpoint is named relative to the record so output directories can move.
        json j = to_json(record);
        j["checkpoint"] = fs::path(record.checkpoint).filename().string();
        write_file_atomic(fs::path(config.output_dir) / (to_string(config.name) + "_record.json"), j.dump(2) + "\n");
    }
    return TrainResult{std::move(record), std::move(model)};
}

TrainResult train(const ExperimentConfig& config, const TrainOptions& options) {
    if (config.corpus.empty()) throw ConfigError("experiment config names no corpus manifest");
    const auto manifest = load_manifest(config.corpus);
    return train(config, load_corpus(manifest), manifest.checksum, options);
}

AblationResult run_ablation_suite(const ExperimentConfig& base, const Corpus& corpus,
                                  const std::string& manifest_checksum, const TrainOptions& options) {
    if (corpus.policy.mode == RemovalMode::threshold_candidates || corpus.policy.mode == RemovalMode::cumulative_target) {
        if (corpus.policy.thresholds.size() < 3)
            throw ConfigError("ablation suite needs a corpus built with three thresholds");
    } else {
        throw ConfigError("ablation suite needs a threshold-mode corpus");
    }
    AblationResult result;
    for (auto name : {ExperimentName::dae_b, ExperimentName::dae_agg, ExperimentName::dae_res, ExperimentName::dae_agg_res}) {
        ExperimentConfig cfg = base;
        cfg.name = name;
        cfg.apply_name();
        try {
            result.runs.push_back(train(cfg, corpus, manifest_checksum, options));
        } catch (const Error& e) {
            result.failures.emplace_back(to_string(name), e.what());
        }
    }
    return result;
}

}  // namespace voxcomp
