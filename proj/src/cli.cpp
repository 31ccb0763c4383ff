#include "voxcomp/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "voxcomp/corpus.hpp"
#include "voxcomp/error.hpp"
#include "voxcomp/evalkit.hpp"
#include "voxcomp/io.hpp"
#include "voxcomp/trainer.hpp"

namespace voxcomp {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

void apply_overrides(json& doc, const std::vector<std::string>& overrides) {
    std::map<std::string, json> seen;
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError("override '" + ov + "' is not of the form key=value");
        const std::string key = ov.substr(0, eq), raw = ov.substr(eq + 1);
        json value = json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;
        if (const auto it = seen.find(key); it != seen.end() && it->second != value)
            throw ConfigError("conflicting overrides for '" + key + "': " + it->second.dump() + " vs " + value.dump());
        seen[key] = value;

        json* node = &doc;
        std::stringstream parts(key);
        std::string part;
        std::vector<std::string> path;
        while (std::getline(parts, part, '.')) path.push_back(part);
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
            if (!node->is_object()) throw ConfigError("override '" + key + "' descends into a non-object");
            node = &(*node)[path[i]];
            if (node->is_null()) *node = json::object();
        }
        if (!node->is_object()) throw ConfigError("override '" + key + "' descends into a non-object");
        (*node)[path.back()] = value;
    }
}

namespace {

class Log {
public:
    enum Level { error = 0, warn = 1, info = 2, debug = 3 };
    Log(std::ostream& os, Level level) : os_(os), level_(level) {}
    void operator()(Level l, const std::string& msg) const {
        static const char* names[] = {"error", "warn", "info", "debug"};
        if (l <= level_) os_ << "[" << names[l] << "] " << msg << "\n";
    }

private:
    std::ostream& os_;
    Level level_;
};

Log::Level level_from_string(const std::string& s) {
    if (s == "error") return Log::error;
    if (s == "warn") return Log::warn;
    if (s == "info") return Log::info;
    if (s == "debug") return Log::debug;
    throw UsageError("unknown log level '" + s + "' (error, warn, info, debug)");
}

Shape3 parse_shape(const std::string& s) {
    std::vector<std::int64_t> dims;
    std::string cur;
    for (char c : s + "x") {
        if (c == 'x' || c == 'X' || c == ',') {
            try {
                std::size_t used = 0;
                dims.push_back(std::stoll(cur, &used));
                if (used != cur.size()) throw std::invalid_argument(cur);
            } catch (const std::exception&) {
                throw UsageError("malformed shape '" + s + "' (expected LxWxH)");
            }
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (dims.size() != 3) throw UsageError("malformed shape '" + s + "' (expected LxWxH)");
    Shape3 shape{dims[0], dims[1], dims[2]};
    if (!shape.valid()) throw UsageError("shape " + s + " must be positive");
    return shape;
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

/// Class IDs for names or numbers, resolved against the subjects' class tables.
std::set<int> resolve_classes(const std::vector<std::string>& names, std::span<const Subject> subjects) {
    std::set<int> ids;
    for (const auto& name : names) {
        char* end = nullptr;
        const long v = std::strtol(name.c_str(), &end, 10);
        if (!name.empty() && *end == '\0') {
            ids.insert(static_cast<int>(v));
            continue;
        }
        bool found = false;
        for (const auto& s : subjects)
            for (const auto& [id, n] : s.volume.class_table())
                if (lower(n) == lower(name)) {
                    ids.insert(id);
                    found = true;
                }
        if (!found) throw ConfigError("protected class '" + name + "' not found in any class table");
    }
    return ids;
}

std::vector<std::string> redact_outputs(const std::vector<std::string>& args) {
    static const std::set<std::string> out_flags{"--out", "--residual-out", "--panels"};
    std::vector<std::string> r;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const auto eq = args[i].find('=');
        if (eq != std::string::npos && out_flags.count(args[i].substr(0, eq))) {
            r.push_back(args[i].substr(0, eq) + "=<out>");
            continue;
        }
        r.push_back(args[i]);
        if (out_flags.count(args[i]) && i + 1 < args.size()) {
            r.push_back("<out>");
            ++i;
        }
    }
    return r;
}

json make_stamp(const std::string& subcommand, const std::vector<std::string>& args, const std::string& config_hash,
                const json& seeds) {
    return json{{"tool", "voxcomp"},
                {"version", kVersion},
                {"subcommand", subcommand},
                {"arguments", redact_outputs(args)},
                {"config_hash", config_hash},
                {"seeds", seeds},
                {"formats", {{"manifest_schema", kManifestSchemaVersion}, {"checkpoint", "VXCKPT01"}, {"report_schema", 1}}}};
}

void write_stamp(const fs::path& path, const json& stamp) { write_file_atomic(path, stamp.dump(2) + "\n"); }

/// Writes a NIfTI beside its destination and renames it into place.
void save_nifti_atomic(const LabelVolume& vol, const fs::path& path) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    const std::string name = path.filename().string();
    const bool gz = name.size() > 3 && name.ends_with(".gz");
    const fs::path tmp = path.parent_path() / ("." + name + ".partial" + (gz ? ".nii.gz" : ".nii"));
    save_nifti(vol, tmp);
    fs::rename(tmp, path);
}

fs::path residual_path_for(const fs::path& out) {
    std::string name = out.filename().string();
    for (const char* ext : {".nii.gz", ".nii"})
        if (name.ends_with(ext)) {
            name = name.substr(0, name.size() - std::string(ext).size()) + "_residual" + ext;
            return out.parent_path() / name;
        }
    return out.parent_path() / (name + "_residual.nii.gz");
}

LabelVolume load_input_volume(const fs::path& path, const std::optional<Shape3>& assume_shape) {
    const std::string name = path.filename().string();
    if (name.ends_with(".nii") || name.ends_with(".nii.gz")) return load_nifti(path);
    fs::path stem = path;
    if (name.ends_with(".raw")) stem.replace_extension();
    if (fs::exists(stem.string() + ".json")) return load_cache(stem);
    if (!assume_shape)
        throw UsageError("input " + path.string() +
                         " carries no resolution metadata; pass --assume-shape LxWxH to read it as a raw grid");
    return load_raw(path, *assume_shape);
}

json load_json_file(const fs::path& path) {
    const auto bytes = read_file(path);
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw ParseError("cannot parse " + path.string() + ": " + e.what(), e.byte);
    }
}

struct Context {
    std::vector<std::string> args;
    std::ostream& out;
    Log log;
};

// ---- subcommands -------------------------------------------------------------------

struct PolicyFlags {
    std::vector<double> thresholds{0.1, 0.2, 0.4};
    std::string mode = "threshold_candidates";
    std::string reference = "total_foreground";
    int instances = 1;
    double split = 0.8;
    std::string model_shape;
    std::uint64_t seed = 0;
    std::string out;

    void add_to(CLI::App* app) {
        app->add_option("--thresholds", thresholds, "Incompleteness thresholds")->delimiter(',');
        app->add_option("--mode", mode, "Removal mode")
            ->check(CLI::IsMember({"threshold_candidates", "cumulative_target", "single_anatomy", "skeleton_only"}));
        app->add_option("--reference", reference, "Fraction reference population")
            ->check(CLI::IsMember({"total_foreground", "largest_class", "whole_grid"}));
        app->add_option("--instances", instances, "Incomplete instances per subject and threshold");
        app->add_option("--split", split, "Training fraction of subjects");
        app->add_option("--model-shape", model_shape, "Network grid LxWxH");
        app->add_option("--seed", seed, "Corpus seed");
        app->add_option("--out", out, "Output directory")->required();
    }

    RemovalPolicy policy(std::set<int> protected_classes) const {
        RemovalPolicy p;
        p.thresholds = thresholds;
        p.mode = removal_mode_from_string(mode);
        p.reference = fraction_reference_from_string(reference);
        p.instances_per_subject = instances;
        p.protected_classes = std::move(protected_classes);
        p.seed = seed;
        p.validate();
        return p;
    }
};

int finish_corpus(const Context& ctx, const std::vector<Subject>& subjects, const RemovalPolicy& policy,
                  const PolicyFlags& flags, Shape3 default_shape, const std::string& subcommand,
                  const std::function<void(const fs::path&)>& extra) {
    const Shape3 shape = flags.model_shape.empty() ? default_shape : parse_shape(flags.model_shape);
    const Corpus corpus = build_corpus(subjects, policy, flags.split, shape);
    for (const auto& s : corpus.skipped) ctx.log(Log::warn, "skipped subject " + s.id + ": " + s.reason);
    StagedDirectory stage(flags.out);
    const auto manifest = save_corpus(corpus, stage.path());
    if (extra) extra(stage.path());
    write_stamp(stage.path() / "stamp.json",
                make_stamp(subcommand, ctx.args, checksum(to_json(policy).dump()), {{"corpus", policy.seed}}));
    stage.commit();
    ctx.out << "wrote " << corpus.pairs.size() << " pairs from " << subjects.size() - corpus.skipped.size() << " of "
            << subjects.size() << " subjects to " << (fs::path(flags.out) / "manifest.json").string()
            << " (checksum " << manifest.checksum << ")\n";
    return exit_ok;
}

ExperimentConfig resolve_experiment(const std::string& config_path, const std::vector<std::string>& overrides,
                                    const std::string& out_flag) {
    json doc = load_json_file(config_path);
    auto ovs = overrides;
    if (!out_flag.empty()) {
        for (const auto& o : overrides)
            if (o.rfind("output_dir=", 0) == 0) {
                json v = json::parse(o.substr(11), nullptr, false);
                const std::string s = v.is_string() ? v.get<std::string>() : o.substr(11);
                if (s != out_flag) throw ConfigError("conflicting overrides: --out " + out_flag + " vs --set " + o);
            }
        ovs.push_back("output_dir=" + json(out_flag).dump());
    }
    apply_overrides(doc, ovs);
    auto cfg = experiment_config_from_json(doc);
    if (!cfg.corpus.empty() && fs::path(cfg.corpus).is_relative())
        cfg.corpus = (fs::path(config_path).parent_path() / cfg.corpus).string();
    if (cfg.output_dir.empty()) throw UsageError("no output directory: pass --out or set output_dir");
    return cfg;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Volumetric shape completion with a denoising auto-encoder", "voxcomp"};
    app.require_subcommand(1, 1);
    app.allow_extras();
    app.set_version_flag("--version", kVersion);
    std::string log_level = "info";
    app.add_option("--log-level", log_level, "error, warn, info or debug");

    // prepare
    auto* prepare = app.add_subcommand("prepare", "Build a corpus from a directory of NIfTI label volumes");
    std::string input_dir;
    std::vector<std::string> protected_names;
    PolicyFlags prepare_flags;
    prepare->add_option("--input", input_dir, "Directory of .nii/.nii.gz label volumes")->required();
    prepare->add_option("--protected", protected_names, "Protected class names or IDs")->delimiter(',');
    prepare_flags.add_to(prepare);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a phantom corpus");
    std::string spec_path, synth_shape = "48x48x48";
    int count = 10;
    PolicyFlags synth_flags;
    synth->add_option("--spec", spec_path, "Phantom spec JSON (default built-in)");
    synth->add_option("--shape", synth_shape, "Phantom grid LxWxH for the built-in spec");
    synth->add_option("--count", count, "Number of phantoms");
    synth_flags.add_to(synth);

    // train / ablate
    std::string config_path, train_out;
    std::vector<std::string> overrides;
    auto* train_cmd = app.add_subcommand("train", "Train one experiment");
    train_cmd->add_option("--config", config_path, "Experiment config JSON")->required();
    train_cmd->add_option("--set", overrides, "Override key=value (dotted keys)");
    train_cmd->add_option("--out", train_out, "Output directory");
    auto* ablate = app.add_subcommand("ablate", "Train and compare the four binary variants");
    ablate->add_option("--config", config_path, "Experiment config JSON")->required();
    ablate->add_option("--set", overrides, "Override key=value (dotted keys)");
    ablate->add_option("--out", train_out, "Output directory");

    // complete
    auto* complete = app.add_subcommand("complete", "Complete one label volume");
    std::string checkpoint, input_path, out_path, residual_out, assume_shape;
    double threshold = 0.5;
    complete->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    complete->add_option("--input", input_path, "Incomplete volume (.nii, .nii.gz or cached .raw)")->required();
    complete->add_option("--out", out_path, "Completed volume path")->required();
    complete->add_option("--residual-out", residual_out, "Residual-only volume path");
    complete->add_option("--assume-shape", assume_shape, "Grid LxWxH for raw input without sidecar");
    complete->add_option("--threshold", threshold, "Binarisation threshold");

    // evaluate
    auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a checkpoint on a corpus");
    std::string manifest_path, eval_out, split_name = "test", panel_dir;
    std::vector<std::string> test_sets;
    bool single_anatomy = false;
    evaluate_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    evaluate_cmd->add_option("--manifest", manifest_path, "Corpus manifest")->required();
    evaluate_cmd->add_option("--out", eval_out, "Report directory");
    evaluate_cmd->add_option("--threshold", threshold, "Binarisation threshold");
    evaluate_cmd->add_option("--test-sets", test_sets, "Restrict to these test sets")->delimiter(',');
    evaluate_cmd->add_option("--split", split_name, "train or test")->check(CLI::IsMember({"train", "test"}));
    evaluate_cmd->add_flag("--single-anatomy", single_anatomy, "Per-class scores for single-anatomy corpora");
    evaluate_cmd->add_option("--panels", panel_dir, "Directory for single-anatomy panels");

    // compare
    auto* compare_cmd = app.add_subcommand("compare", "t-test between two evaluation reports");
    std::string report_a, report_b, compare_out, alternative = "two-sided";
    bool unpaired = false;
    compare_cmd->add_option("--a", report_a, "First report.json")->required();
    compare_cmd->add_option("--b", report_b, "Second report.json")->required();
    compare_cmd->add_flag("--unpaired", unpaired, "Welch's test instead of the paired test");
    compare_cmd->add_option("--alternative", alternative, "two-sided, greater or less");
    compare_cmd->add_option("--out", compare_out, "Comparison JSON path");

    // render
    auto* render_cmd = app.add_subcommand("render", "Render slice montages of one completion");
    std::string subject, plane_name = "coronal", render_out;
    int variant = 0, scale = 4;
    std::vector<int> slices;
    render_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
    render_cmd->add_option("--manifest", manifest_path, "Corpus manifest")->required();
    render_cmd->add_option("--subject", subject, "Subject id")->required();
    render_cmd->add_option("--variant", variant, "Variant id");
    render_cmd->add_option("--plane", plane_name, "coronal, axial or sagittal");
    render_cmd->add_option("--slices", slices, "Slice indices")->delimiter(',');
    render_cmd->add_option("--scale", scale, "Pixels per voxel");
    render_cmd->add_option("--threshold", threshold, "Binarisation threshold");
    render_cmd->add_option("--out", render_out, "PNG path")->required();

    for (auto* sub : app.get_subcommands({})) sub->allow_extras();

    auto suggest = [&](const std::string& arg, const std::vector<std::string>& candidates) {
        std::string best;
        std::size_t best_d = 4;
        for (const auto& c : candidates) {
            const auto d = edit_distance(arg, c);
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        return best.empty() ? std::string() : "; did you mean '" + best + "'?";
    };
    auto subcommand_names = [&] {
        std::vector<std::string> names;
        for (auto* s : app.get_subcommands({})) names.push_back(s->get_name());
        return names;
    };
    auto option_names = [](CLI::App* a) {
        std::vector<std::string> names;
        for (auto* o : a->get_options())
            for (const auto& n : o->get_lnames()) names.push_back("--" + n);
        return names;
    };

    try {
        if (const char* dev = std::getenv("VOXCOMP_DEVICE"); dev && std::string(dev) != "cpu")
            throw UsageError(std::string("VOXCOMP_DEVICE=") + dev + " is not available; only 'cpu' is supported");

        std::vector<std::string> reversed(args.rbegin(), args.rend());
        try {
            app.parse(reversed);
        } catch (const CLI::RequiredError& e) {
            if (app.get_subcommands().empty()) {
                std::string msg = "a subcommand is required";
                for (const auto& a : app.remaining())
                    if (!a.empty() && a[0] != '-') {
                        msg = "unknown subcommand '" + a + "'" + suggest(a, subcommand_names());
                        break;
                    }
                throw UsageError(msg);
            }
            throw;
        }
        CLI::App* sub = app.get_subcommands().front();
        for (auto* a : {&app, sub}) {
            for (const auto& extra : a->remaining()) {
                if (!extra.empty() && extra[0] == '-') {
                    const auto name = extra.substr(0, extra.find('='));
                    auto names = option_names(sub);
                    names.push_back("--log-level");
                    throw UsageError("unknown flag '" + name + "'" + suggest(name, names));
                }
                throw UsageError("unexpected argument '" + extra + "'");
            }
        }

        Context ctx{args, out, Log(err, level_from_string(log_level))};
        const std::string name = sub->get_name();

        if (name == "prepare") {
            if (!fs::is_directory(input_dir)) throw MissingFileError(input_dir);
            std::vector<fs::path> files;
            for (const auto& e : fs::directory_iterator(input_dir)) {
                const auto fn = e.path().filename().string();
                if (e.is_regular_file() && (fn.ends_with(".nii") || fn.ends_with(".nii.gz"))) files.push_back(e.path());
            }
            std::sort(files.begin(), files.end());
            if (files.empty()) throw InvalidVolumeError("no .nii or .nii.gz volumes in " + input_dir);
            std::vector<Subject> subjects;
            for (const auto& f : files) {
                std::string id = f.filename().string();
                id = id.substr(0, id.find(".nii"));
                subjects.push_back(Subject{id, load_nifti_subject(f)});
            }
            const auto policy = prepare_flags.policy(resolve_classes(protected_names, subjects));
            return finish_corpus(ctx, subjects, policy, prepare_flags, subjects.front().volume.shape(), "prepare", {});
        }

        if (name == "synth") {
            const PhantomSpec spec = spec_path.empty() ? default_phantom_spec(parse_shape(synth_shape))
                                                       : phantom_spec_from_json(load_json_file(spec_path));
            if (count < 1) throw UsageError("--count must be >= 1");
            const auto subjects = generate_phantoms(spec, count, synth_flags.seed);
            const auto policy = synth_flags.policy(protected_class_ids(spec));
            return finish_corpus(ctx, subjects, policy, synth_flags, spec.shape, "synth", [&](const fs::path& dir) {
                write_file_atomic(dir / "phantom_spec.json", to_json(spec).dump(2) + "\n");
            });
        }

        if (name == "train") {
            auto cfg = resolve_experiment(config_path, overrides, train_out);
            const fs::path final_dir = cfg.output_dir;
            StagedDirectory stage(final_dir);
            cfg.output_dir = stage.path().string();
            const auto result = train(cfg, TrainOptions{[&](int epoch, double loss) {
                ctx.log(Log::info, "epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) +
                                       " loss " + std::to_string(loss));
            }});
            write_stamp(stage.path() / "stamp.json",
                        make_stamp("train", args, result.record.config_hash,
                                   {{"init", cfg.seed}, {"data_order", cfg.seed}}));
            stage.commit();
            out << "trained " << result.record.experiment << " for " << cfg.epochs << " epochs";
            if (!result.record.epoch_losses.empty()) out << ", final loss " << result.record.epoch_losses.back();
            out << "; checkpoint " << (final_dir / fs::path(result.record.checkpoint).filename()).string() << "\n";
            return exit_ok;
        }

        if (name == "ablate") {
            auto cfg = resolve_experiment(config_path, overrides, train_out);
            if (cfg.corpus.empty()) throw ConfigError("experiment config names no corpus manifest");
            const fs::path final_dir = cfg.output_dir;
            const auto manifest = load_manifest(cfg.corpus);
            const auto corpus = load_corpus(manifest);
            StagedDirectory stage(final_dir);
            cfg.output_dir = stage.path().string();
            const auto suite = run_ablation_suite(cfg, corpus, manifest.checksum, TrainOptions{[&](int epoch, double loss) {
                ctx.log(Log::debug, "epoch " + std::to_string(epoch + 1) + " loss " + std::to_string(loss));
            }});
            std::vector<EvalReport> reports;
            json hashes = json::object();
            for (const auto& run : suite.runs) {
                EvalOptions eo;
                eo.model_name = run.record.experiment;
                eo.checkpoint_hash = checksum_file(run.record.checkpoint);
                auto report = evaluate(run.model, corpus, eo);
                report.metadata["manifest_checksum"] = manifest.checksum;
                write_eval_report(report, stage.path() / run.record.experiment);
                hashes[run.record.experiment] = run.record.config_hash;
                reports.push_back(std::move(report));
            }
            std::vector<ComparisonReport> comparisons;
            for (std::size_t i = 0; i < reports.size(); ++i)
                for (std::size_t j = i + 1; j < reports.size(); ++j) comparisons.push_back(compare(reports[j], reports[i]));
            json cj = json::array();
            for (const auto& c : comparisons) cj.push_back(to_json(c));
            write_file_atomic(stage.path() / "comparisons.json", cj.dump(2) + "\n");
            const std::string table = "## DSC, mean (SD)\n\n" + markdown_dsc_table(reports) + "\n## Paired t-test p values\n\n" +
                                      markdown_pvalue_table(comparisons);
            write_file_atomic(stage.path() / "table.md", table);
            json failures = json::object();
            for (const auto& [n, msg] : suite.failures) failures[n] = msg;
            auto stamp = make_stamp("ablate", args, cfg.hash(), {{"init", cfg.seed}, {"data_order", cfg.seed}});
            stamp["member_config_hashes"] = hashes;
            stamp["failures"] = failures;
            write_stamp(stage.path() / "stamp.json", stamp);
            stage.commit();
            out << table;
            if (suite.partial()) {
                for (const auto& [n, msg] : suite.failures) ctx.log(Log::error, n + " failed: " + msg);
                return exit_training;
            }
            return exit_ok;
        }

        if (name == "complete") {
            if (!(threshold > 0.0 && threshold <= 1.0)) throw UsageError("--threshold must lie in (0, 1]");
            const auto ckpt = load_checkpoint(checkpoint);
            const auto& model = ckpt.model;
            const auto input = load_input_volume(
                input_path, assume_shape.empty() ? std::nullopt : std::optional<Shape3>(parse_shape(assume_shape)));
            const Shape3 grid = model.config().input_shape;
            const auto at_grid = resample_labels(input, grid);
            const int classes = model.config().num_classes;

            std::vector<std::uint8_t> completed, residual(static_cast<std::size_t>(input.shape().voxels()), 0);
            ClassTable table;
            if (classes == 1) {
                const auto comp = compose_completion(binarize(at_grid), model.forward(binarize(at_grid)), threshold);
                const auto up = upscale_binary(comp, input.shape());
                completed.assign(up.data().begin(), up.data().end());
                table = {{1, "foreground"}};
            } else {
                table = input.class_table();
                for (int c = 1; c < classes; ++c)
                    if (!table.count(c)) table[c] = "class_" + std::to_string(c);
                for (int c : input.present_classes())
                    if (c >= classes)
                        throw ConfigError("input label " + std::to_string(c) + " exceeds the model's " +
                                          std::to_string(classes) + " classes");
                const auto labels = resample_labels(
                    compose_labels(model.forward(one_hot(at_grid, classes)), table, at_grid.spacing()), input.shape());
                completed.assign(labels.data().begin(), labels.data().end());
            }
            for (std::size_t i = 0; i < completed.size(); ++i)
                if (input.data()[i] == 0) residual[i] = completed[i];
            const fs::path out_file = out_path;
            const fs::path res_file = residual_out.empty() ? residual_path_for(out_file) : fs::path(residual_out);
            save_nifti_atomic(LabelVolume(input.shape(), std::move(completed), input.spacing(), table, input.affine()),
                              out_file);
            save_nifti_atomic(LabelVolume(input.shape(), std::move(residual), input.spacing(), table, input.affine()),
                              res_file);
            auto stamp = make_stamp("complete", args, ckpt.meta.config_hash, {{"init", ckpt.meta.seed}});
            stamp["checkpoint_checksum"] = checksum_file(checkpoint);
            write_stamp(out_file.string() + ".stamp.json", stamp);
            out << "wrote " << out_file.string() << " and " << res_file.string() << "\n";
            return exit_ok;
        }

        if (name == "evaluate") {
            EvalOptions eo;
            eo.threshold = threshold;
            eo.test_sets = test_sets;
            eo.training_split = split_name == "train";
            const auto ckpt = load_checkpoint(checkpoint);
            eo.model_name = ckpt.meta.experiment;
            eo.checkpoint_hash = checksum_file(checkpoint);
            const auto manifest = load_manifest(manifest_path);
            if (ckpt.model.config().input_shape != manifest.model_shape)
                throw EvaluationError("checkpoint input " + ckpt.model.config().input_shape.str() +
                                      " does not match manifest preprocessing " + manifest.model_shape.str());
            const auto corpus = load_corpus(manifest);
            std::optional<StagedDirectory> stage;
            if (!eval_out.empty()) stage.emplace(eval_out);
            EvalReport report;
            if (single_anatomy) {
                const fs::path panels = panel_dir.empty() ? (stage ? stage->path() / "panels" : fs::path()) : fs::path(panel_dir);
                auto sa = evaluate_single_anatomy(ckpt.model, corpus, panels, eo);
                report = std::move(sa.report);
            } else {
                report = evaluate(ckpt.model, corpus, eo);
            }
            report.metadata["manifest_checksum"] = manifest.checksum;
            for (const auto& n : report.notes) ctx.log(Log::warn, n);
            const std::string table = markdown_dsc_table(std::span<const EvalReport>(&report, 1));
            if (stage) {
                write_eval_report(report, stage->path());
                write_file_atomic(stage->path() / "table.md", table);
                write_stamp(stage->path() / "stamp.json",
                            make_stamp("evaluate", args, ckpt.meta.config_hash, {{"init", ckpt.meta.seed}}));
                stage->commit();
            }
            out << table;
            return exit_ok;
        }

        if (name == "compare") {
            const auto a = load_eval_report(report_a), b = load_eval_report(report_b);
            const auto cmp = compare(a, b, CompareOptions{!unpaired, alternative_from_string(alternative)});
            if (!compare_out.empty()) write_file_atomic(compare_out, to_json(cmp).dump(2) + "\n");
            out << markdown_pvalue_table(std::span<const ComparisonReport>(&cmp, 1));
            return exit_ok;
        }

        if (name == "render") {
            const Plane plane = plane_from_string(plane_name);
            const auto ckpt = load_checkpoint(checkpoint);
            if (ckpt.model.config().num_classes != 1) throw UsageError("render expects a binary checkpoint");
            const auto corpus = load_corpus(load_manifest(manifest_path));
            const CompletionPair* pair = nullptr;
            for (const auto& p : corpus.pairs)
                if (p.subject_id == subject && p.variant_id == variant) pair = &p;
            if (!pair) throw UsageError("no pair " + subject + "/" + std::to_string(variant) + " in the manifest");
            const auto& orig = corpus.originals.at(subject);
            const auto x = binarize(pair->incomplete);
            const auto comp = upscale_binary(compose_completion(x, ckpt.model.forward(x), threshold), pair->original_shape);
            const auto truth = binarize(orig);
            const auto removed = class_mask(orig, pair->removed_classes);
            std::vector<std::uint8_t> in(truth.data().begin(), truth.data().end());
            for (std::size_t i = 0; i < in.size(); ++i) in[i] = static_cast<std::uint8_t>(in[i] & !removed.data()[i]);
            RenderOptions ro;
            ro.slices = slices;
            ro.scale = scale;
            const auto r = render_slices(BinaryVolume(pair->original_shape, std::move(in), orig.spacing()), truth, comp,
                                         plane, render_out, ro);
            for (std::size_t c = 1; c < r.counts.size(); ++c)
                out << to_string(static_cast<VoxelCategory>(c)) << ": " << r.counts[c] << "\n";
            return exit_ok;
        }
        throw UsageError("unhandled subcommand " + name);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return exit_ok;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return exit_ok;
    } catch (const CLI::CallForVersion&) {
        out << kVersion << "\n";
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n";
        return exit_usage;
    } catch (const Error& e) {
        static const std::map<ErrorKind, std::pair<int, const char*>> codes{
            {ErrorKind::usage, {exit_usage, "usage error"}},
            {ErrorKind::data, {exit_data, "data error"}},
            {ErrorKind::training, {exit_training, "training error"}},
            {ErrorKind::evaluation, {exit_evaluation, "evaluation error"}},
        };
        const auto& [code, label] = codes.at(e.kind());
        err << label << ": " << e.what() << "\n";
        return code;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << "\n";
        return exit_data;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_other;
    }
}

int dispatch(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dispatch(args, std::cout, std::cerr);
}

}  // namespace voxcomp
