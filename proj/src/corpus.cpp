#include "voxcomp/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "voxcomp/error.hpp"
#include "voxcomp/io.hpp"

namespace voxcomp {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(RemovalMode mode) {
    switch (mode) {
        case RemovalMode::threshold_candidates: return "threshold_candidates";
        case RemovalMode::cumulative_target: return "cumulative_target";
        case RemovalMode::single_anatomy: return "single_anatomy";
        case RemovalMode::skeleton_only: return "skeleton_only";
    }
    return "?";
}

RemovalMode removal_mode_from_string(const std::string& s) {
    if (s == "threshold_candidates") return RemovalMode::threshold_candidates;
    if (s == "cumulative_target") return RemovalMode::cumulative_target;
    if (s == "single_anatomy") return RemovalMode::single_anatomy;
    if (s == "skeleton_only") return RemovalMode::skeleton_only;
    throw ConfigError("unknown removal mode '" + s + "'");
}

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

void RemovalPolicy::validate() const {
    if (instances_per_subject < 1) throw InvalidPolicyError("instances_per_subject must be >= 1");
    const bool needs_thresholds =
        mode == RemovalMode::threshold_candidates || mode == RemovalMode::cumulative_target;
    if (needs_thresholds && thresholds.empty()) throw InvalidPolicyError("threshold modes need at least one threshold");
    for (double t : thresholds)
        if (!(t > 0.0 && t < 1.0)) throw InvalidPolicyError("thresholds must lie strictly in (0, 1)");
    for (int c : protected_classes)
        if (c <= 0 || c > 255) throw InvalidPolicyError("protected class IDs must be in [1, 255]");
}

int RemovalPolicy::variants_per_subject() const {
    switch (mode) {
        case RemovalMode::threshold_candidates:
        case RemovalMode::cumulative_target:
            return static_cast<int>(thresholds.size()) * instances_per_subject;
        case RemovalMode::single_anatomy: return instances_per_subject;
        case RemovalMode::skeleton_only: return 1;
    }
    return 0;
}

json to_json(const RemovalPolicy& policy) {
    return json{
        {"thresholds", policy.thresholds},
        {"reference", to_string(policy.reference)},
        {"protected_classes", std::vector<int>(policy.protected_classes.begin(), policy.protected_classes.end())},
        {"mode", to_string(policy.mode)},
        {"instances_per_subject", policy.instances_per_subject},
        {"seed", policy.seed},
    };
}

RemovalPolicy removal_policy_from_json(const json& j) {
    RemovalPolicy p;
    p.thresholds = j.at("thresholds").get<std::vector<double>>();
    p.reference = fraction_reference_from_string(j.at("reference").get<std::string>());
    const auto prot = j.at("protected_classes").get<std::vector<int>>();
    p.protected_classes = std::set<int>(prot.begin(), prot.end());
    p.mode = removal_mode_from_string(j.at("mode").get<std::string>());
    p.instances_per_subject = j.at("instances_per_subject").get<int>();
    p.seed = j.at("seed").get<std::uint64_t>();
    return p;
}

namespace {

std::vector<int> removable_classes(const LabelVolume& vol, const RemovalPolicy& policy) {
    std::vector<int> out;
    for (int c : vol.present_classes())
        if (!policy.protected_classes.contains(c)) out.push_back(c);
    return out;
}

double reference_population(const std::array<std::int64_t, 256>& counts, std::int64_t voxels, FractionReference ref) {
    switch (ref) {
        case FractionReference::total_foreground: return static_cast<double>(voxels - counts[0]);
        case FractionReference::largest_class:
            return static_cast<double>(*std::max_element(counts.begin() + 1, counts.end()));
        case FractionReference::whole_grid: return static_cast<double>(voxels);
    }
    return 0.0;
}

}  // namespace

std::vector<int> candidate_classes(const LabelVolume& vol, const RemovalPolicy& policy, double threshold) {
    std::vector<int> out;
    for (int c : removable_classes(vol, policy))
        if (volume_fraction(vol, c, policy.reference) >= threshold) out.push_back(c);
    return out;
}

RemovalResult remove_anatomies(const LabelVolume& vol, const RemovalPolicy& policy, double threshold, Rng& rng) {
    policy.validate();
    const auto removable = removable_classes(vol, policy);
    if (removable.empty()) throw InvalidPolicyError("volume contains only protected classes");

    const auto counts = vol.label_counts();
    const double denom = reference_population(counts, vol.shape().voxels(), policy.reference);
    if (denom <= 0.0) throw UndefinedFractionError("reference population is empty");

    std::vector<int> removed;
    switch (policy.mode) {
        case RemovalMode::threshold_candidates: {
            const auto candidates = candidate_classes(vol, policy, threshold);
            if (candidates.empty())
                throw NoCandidateError("no removable class reaches fraction " + std::to_string(threshold));
            // Uniform over non-empty subsets: independent fair coins, rejecting the empty draw.
            std::bernoulli_distribution coin(0.5);
            do {
                removed.clear();
                for (int c : candidates)
                    if (coin(rng)) removed.push_back(c);
            } while (removed.empty());
            break;
        }
        case RemovalMode::cumulative_target: {
            auto order = removable;
            std::shuffle(order.begin(), order.end(), rng);
            double acc = 0.0;
            for (int c : order) {
                if (acc >= threshold) break;
                removed.push_back(c);
                acc += static_cast<double>(counts[c]) / denom;
            }
            if (acc < threshold)
                throw NoCandidateError("removable classes cover only " + std::to_string(acc) + " < " +
                                       std::to_string(threshold));
            break;
        }
        case RemovalMode::single_anatomy: {
            std::uniform_int_distribution<std::size_t> pick(0, removable.size() - 1);
            removed.push_back(removable[pick(rng)]);
            break;
        }
        case RemovalMode::skeleton_only:
            removed = removable;
            break;
    }
    std::sort(removed.begin(), removed.end());

    std::array<bool, 256> erase{};
    std::int64_t removed_voxels = 0;
    for (int c : removed) {
        erase[c] = true;
        removed_voxels += counts[c];
    }
    std::vector<std::uint8_t> data(vol.data().begin(), vol.data().end());
    for (auto& v : data)
        if (erase[v]) v = 0;
    return RemovalResult{
        LabelVolume(vol.shape(), std::move(data), vol.spacing(), vol.class_table(), vol.affine()),
        removed,
        static_cast<double>(removed_voxels) / denom,
    };
}

std::vector<const CompletionPair*> Corpus::pairs_in(Split s) const {
    std::vector<const CompletionPair*> out;
    for (const auto& p : pairs) {
        auto it = split.find(p.subject_id);
        if (it != split.end() && it->second == s) out.push_back(&p);
    }
    return out;
}

std::vector<std::string> Corpus::subjects_in(Split s) const {
    std::vector<std::string> out;
    for (const auto& p : pairs)
        if (split.at(p.subject_id) == s && (out.empty() || out.back() != p.subject_id)) out.push_back(p.subject_id);
    return out;
}

Corpus build_corpus(std::span<const Subject> subjects, const RemovalPolicy& policy, double split_fraction,
                    std::optional<Shape3> model_shape) {
    policy.validate();
    if (subjects.size() < 2) throw InvalidPolicyError("building a corpus needs at least 2 subjects");
    if (!(split_fraction > 0.0 && split_fraction < 1.0)) throw InvalidPolicyError("split fraction must lie in (0, 1)");

    Corpus corpus;
    corpus.policy = policy;
    corpus.model_shape = model_shape ? *model_shape : subjects.front().volume.shape();
    std::vector<std::string> kept;

    for (std::size_t s = 0; s < subjects.size(); ++s) {
        const Subject& subject = subjects[s];
        if (!model_shape && subject.volume.shape() != corpus.model_shape) {
            corpus.skipped.push_back({subject.id, "shape " + subject.volume.shape().str() +
                                                      " differs from corpus grid and no model shape was given"});
            continue;
        }
        std::vector<CompletionPair> pairs;
        try {
            const int per_threshold = policy.instances_per_subject;
            const int variants = policy.variants_per_subject();
            for (int v = 0; v < variants; ++v) {
                Rng rng = make_stream(policy.seed, {stream::corpus, s, static_cast<std::uint64_t>(v)});
                int t_index = -1;
                double threshold = 0.0;
                if (policy.mode == RemovalMode::threshold_candidates || policy.mode == RemovalMode::cumulative_target) {
                    t_index = v / per_threshold;
                    threshold = policy.thresholds[static_cast<std::size_t>(t_index)];
                }
                auto removal = remove_anatomies(subject.volume, policy, threshold, rng);
                CompletionPair pair{
                    subject.id,
                    v,
                    t_index,
                    threshold,
                    policy.mode,
                    model_shape ? resample_labels(removal.incomplete, *model_shape) : removal.incomplete,
                    model_shape ? resample_labels(subject.volume, *model_shape) : subject.volume,
                    removal.removed_classes,
                    removal.removed_fraction,
                    subject.volume.shape(),
                };
                pairs.push_back(std::move(pair));
            }
        } catch (const NoCandidateError& e) {
            corpus.skipped.push_back({subject.id, e.what()});
            continue;
        } catch (const InvalidPolicyError& e) {
            corpus.skipped.push_back({subject.id, e.what()});
            continue;
        }
        for (auto& p : pairs) corpus.pairs.push_back(std::move(p));
        corpus.originals.emplace(subject.id, subject.volume);
        kept.push_back(subject.id);
    }
    if (kept.size() < 2) throw InvalidPolicyError("fewer than 2 subjects survived removal; cannot split");

    auto order = kept;
    Rng rng = make_stream(policy.seed, {stream::split});
    std::shuffle(order.begin(), order.end(), rng);
    auto n_train = static_cast<std::size_t>(std::lround(split_fraction * static_cast<double>(order.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, order.size() - 1);
    for (std::size_t i = 0; i < order.size(); ++i) corpus.split[order[i]] = i < n_train ? Split::train : Split::test;
    return corpus;
}

// ---- manifest ---------------------------------------------------------------

namespace {

json shape_json(const Shape3& s) { return json::array({s.l, s.w, s.h}); }
Shape3 shape_from_json(const json& j) {
    return Shape3{j.at(0).get<std::int64_t>(), j.at(1).get<std::int64_t>(), j.at(2).get<std::int64_t>()};
}

json file_json(const FileRef& f) { return json{{"path", f.path}, {"checksum", f.checksum}}; }
FileRef file_from_json(const json& j) { return FileRef{j.at("path").get<std::string>(), j.at("checksum").get<std::string>()}; }

void verify_file(const fs::path& root, const FileRef& ref) {
    const fs::path stem = root / ref.path;
    const fs::path raw = stem.string() + ".raw";
    const fs::path side = stem.string() + ".json";
    if (!fs::exists(raw)) throw MissingFileError(raw.string());
    if (!fs::exists(side)) throw MissingFileError(side.string());
    if (checksum_file(raw) != ref.checksum) throw ChecksumError("checksum mismatch for " + raw.string());
}

}  // namespace

PairRecord save_pair(const CompletionPair& pair, const fs::path& dir) {
    const std::string base = pair.subject_id + "_v" + std::to_string(pair.variant_id);
    fs::create_directories(dir);
    PairRecord rec;
    rec.subject_id = pair.subject_id;
    rec.variant_id = pair.variant_id;
    rec.threshold_index = pair.threshold_index;
    rec.threshold = pair.threshold;
    rec.mode = pair.mode;
    rec.removed_classes = pair.removed_classes;
    rec.removed_fraction = pair.removed_fraction;
    rec.original_shape = pair.original_shape;
    rec.incomplete = FileRef{base + "_incomplete", save_cache(pair.incomplete, dir / (base + "_incomplete"))};
    rec.complete = FileRef{base + "_complete", save_cache(pair.complete, dir / (base + "_complete"))};
    return rec;
}

CorpusManifest save_corpus(const Corpus& corpus, const fs::path& dir) {
    fs::create_directories(dir / "pairs");
    fs::create_directories(dir / "subjects");
    CorpusManifest m;
    m.policy = corpus.policy;
    m.model_shape = corpus.model_shape;
    m.created_with_seed = corpus.policy.seed;
    m.split = corpus.split;
    m.skipped = corpus.skipped;
    m.root = dir;
    for (const auto& [id, vol] : corpus.originals)
        m.originals[id] = FileRef{"subjects/" + id, save_cache(vol, dir / "subjects" / id)};
    for (const auto& pair : corpus.pairs) {
        auto rec = save_pair(pair, dir / "pairs");
        rec.incomplete.path = "pairs/" + rec.incomplete.path;
        rec.complete.path = "pairs/" + rec.complete.path;
        m.pairs.push_back(std::move(rec));
    }

    json j;
    j["schema_version"] = kManifestSchemaVersion;
    j["policy"] = to_json(m.policy);
    j["model_shape"] = shape_json(m.model_shape);
    j["created_with_seed"] = m.created_with_seed;
    json split = json::object();
    for (const auto& [id, s] : m.split) split[id] = to_string(s);
    j["split"] = split;
    json originals = json::object();
    for (const auto& [id, f] : m.originals) originals[id] = file_json(f);
    j["originals"] = originals;
    json pairs = json::array();
    for (const auto& p : m.pairs) {
        pairs.push_back(json{
            {"subject_id", p.subject_id},
            {"variant_id", p.variant_id},
            {"threshold_index", p.threshold_index},
            {"threshold", p.threshold},
            {"mode", to_string(p.mode)},
            {"removed_classes", p.removed_classes},
            {"removed_fraction", p.removed_fraction},
            {"original_shape", shape_json(p.original_shape)},
            {"incomplete", file_json(p.incomplete)},
            {"complete", file_json(p.complete)},
        });
    }
    j["pairs"] = pairs;
    json skipped = json::array();
    for (const auto& s : m.skipped) skipped.push_back(json{{"id", s.id}, {"reason", s.reason}});
    j["skipped"] = skipped;

    const std::string text = j.dump(2) + "\n";
    write_file_atomic(dir / "manifest.json", text);
    m.checksum = checksum(text);
    return m;
}

CorpusManifest load_manifest(const fs::path& path) {
    const auto bytes = read_file(path);
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw ParseError("corrupted manifest " + path.string() + ": " + e.what(), e.byte);
    }
    CorpusManifest m;
    m.root = path.parent_path();
    m.checksum = checksum(bytes);
    try {
        m.schema_version = j.at("schema_version").get<int>();
        if (m.schema_version != kManifestSchemaVersion)
            throw IoError("unsupported manifest schema version " + std::to_string(m.schema_version));
        m.policy = removal_policy_from_json(j.at("policy"));
        m.model_shape = shape_from_json(j.at("model_shape"));
        m.created_with_seed = j.at("created_with_seed").get<std::uint64_t>();
        for (const auto& [id, s] : j.at("split").items())
            m.split[id] = s.get<std::string>() == "train" ? Split::train : Split::test;
        for (const auto& [id, f] : j.at("originals").items()) m.originals[id] = file_from_json(f);
        for (const auto& p : j.at("pairs")) {
            PairRecord r;
            r.subject_id = p.at("subject_id").get<std::string>();
            r.variant_id = p.at("variant_id").get<int>();
            r.threshold_index = p.at("threshold_index").get<int>();
            r.threshold = p.at("threshold").get<double>();
            r.mode = removal_mode_from_string(p.at("mode").get<std::string>());
            r.removed_classes = p.at("removed_classes").get<std::vector<int>>();
            r.removed_fraction = p.at("removed_fraction").get<double>();
            r.original_shape = shape_from_json(p.at("original_shape"));
            r.incomplete = file_from_json(p.at("incomplete"));
            r.complete = file_from_json(p.at("complete"));
            m.pairs.push_back(std::move(r));
        }
        for (const auto& s : j.at("skipped"))
            m.skipped.push_back({s.at("id").get<std::string>(), s.at("reason").get<std::string>()});
    } catch (const json::exception& e) {
        throw IoError("malformed manifest " + path.string() + ": " + e.what());
    }

    for (const auto& [id, f] : m.originals) verify_file(m.root, f);
    for (const auto& p : m.pairs) {
        verify_file(m.root, p.incomplete);
        verify_file(m.root, p.complete);
        if (!m.split.contains(p.subject_id)) throw IoError("pair subject " + p.subject_id + " has no split entry");
    }
    return m;
}

Corpus load_corpus(const CorpusManifest& m) {
    Corpus c;
    c.policy = m.policy;
    c.model_shape = m.model_shape;
    c.split = m.split;
    c.skipped = m.skipped;
    for (const auto& [id, f] : m.originals) c.originals.emplace(id, load_cache(m.root / f.path));
    for (const auto& r : m.pairs) {
        c.pairs.push_back(CompletionPair{
            r.subject_id,
            r.variant_id,
            r.threshold_index,
            r.threshold,
            r.mode,
            load_cache(m.root / r.incomplete.path),
            load_cache(m.root / r.complete.path),
            r.removed_classes,
            r.removed_fraction,
            r.original_shape,
        });
    }
    return c;
}

LabelVolume load_nifti_subject(const fs::path& path) { return load_nifti(path); }

}  // namespace voxcomp
