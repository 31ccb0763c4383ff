#pragma once

// Synthesis of (incomplete, complete) training/evaluation pairs from whole
// label volumes, plus a procedural phantom generator standing in for real
// whole-body segmentations.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxcomp/random.hpp"
#include "voxcomp/voxel.hpp"

namespace voxcomp {

enum class RemovalMode { threshold_candidates, cumulative_target, single_anatomy, skeleton_only };

std::string to_string(RemovalMode mode);
RemovalMode removal_mode_from_string(const std::string& s);

struct RemovalPolicy {
    std::vector<double> thresholds{0.10, 0.20, 0.40};
    FractionReference reference = FractionReference::total_foreground;
    std::set<int> protected_classes;
    RemovalMode mode = RemovalMode::threshold_candidates;
    /// Incomplete instances drawn per threshold (M per subject is
    /// thresholds x instances for threshold modes, instances for
    /// single_anatomy, 1 for skeleton_only).
    int instances_per_subject = 1;
    std::uint64_t seed = 0;

    void validate() const;
    int variants_per_subject() const;
};

nlohmann::json to_json(const RemovalPolicy& policy);
RemovalPolicy removal_policy_from_json(const nlohmann::json& j);

struct RemovalResult {
    LabelVolume incomplete;
    std::vector<int> removed_classes;
    double removed_fraction = 0.0;
};

/// Non-protected classes whose fraction reaches `threshold`.
std::vector<int> candidate_classes(const LabelVolume& vol, const RemovalPolicy& policy, double threshold);

/// Erases anatomies from `vol` according to the policy's mode. `threshold` is
/// ignored by single_anatomy and skeleton_only.
RemovalResult remove_anatomies(const LabelVolume& vol, const RemovalPolicy& policy, double threshold, Rng& rng);

struct CompletionPair {
    std::string subject_id;
    int variant_id = 0;
    /// Index into policy.thresholds, -1 for modes without thresholds.
    int threshold_index = -1;
    double threshold = 0.0;
    RemovalMode mode = RemovalMode::threshold_candidates;
    LabelVolume incomplete;
    LabelVolume complete;
    std::vector<int> removed_classes;
    double removed_fraction = 0.0;
    /// Grid of the native-resolution ground truth the pair was resampled from.
    Shape3 original_shape;
};

enum class Split { train, test };
std::string to_string(Split s);

struct Subject {
    std::string id;
    LabelVolume volume;
};

struct SkippedSubject {
    std::string id;
    std::string reason;
};

struct Corpus {
    RemovalPolicy policy;
    Shape3 model_shape;
    std::map<std::string, Split> split;
    /// Ordered by subject (input order), then variant.
    std::vector<CompletionPair> pairs;
    /// Native-resolution complete volumes keyed by subject id.
    std::map<std::string, LabelVolume> originals;
    std::vector<SkippedSubject> skipped;

    std::vector<const CompletionPair*> pairs_in(Split s) const;
    /// Train/test subject ids in corpus order.
    std::vector<std::string> subjects_in(Split s) const;
};

/// Pairs for every subject and variant; `model_shape` (if given) resamples
/// incomplete/complete grids to the network input grid.
Corpus build_corpus(std::span<const Subject> subjects, const RemovalPolicy& policy, double split_fraction,
                    std::optional<Shape3> model_shape = std::nullopt);

// ---- on-disk manifest -------------------------------------------------------

inline constexpr int kManifestSchemaVersion = 1;

struct FileRef {
    std::string path;  // relative to the manifest directory (cache stem)
    std::string checksum;
};

struct PairRecord {
    std::string subject_id;
    int variant_id = 0;
    int threshold_index = -1;
    double threshold = 0.0;
    RemovalMode mode = RemovalMode::threshold_candidates;
    std::vector<int> removed_classes;
    double removed_fraction = 0.0;
    Shape3 original_shape;
    FileRef incomplete;
    FileRef complete;
};

struct CorpusManifest {
    int schema_version = kManifestSchemaVersion;
    RemovalPolicy policy;
    Shape3 model_shape;
    std::uint64_t created_with_seed = 0;
    std::map<std::string, Split> split;
    std::map<std::string, FileRef> originals;
    std::vector<PairRecord> pairs;
    std::vector<SkippedSubject> skipped;
    std::filesystem::path root;
    /// CRC-32 of the manifest document as written.
    std::string checksum;
};

PairRecord save_pair(const CompletionPair& pair, const std::filesystem::path& dir);
CorpusManifest save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
/// Parses and verifies (existence + checksum of every referenced file).
CorpusManifest load_manifest(const std::filesystem::path& path);
Corpus load_corpus(const CorpusManifest& manifest);
LabelVolume load_nifti_subject(const std::filesystem::path& path);

// ---- phantoms ---------------------------------------------------------------

enum class PrimitiveKind { ellipsoid, tube, box, lattice };

struct PrimitiveSpec {
    std::string name;
    PrimitiveKind kind = PrimitiveKind::ellipsoid;
    /// Target share of the whole grid, drawn uniformly in [min, max].
    double fraction_min = 0.0;
    double fraction_max = 0.0;
    /// Relative centre in [0, 1]^3.
    std::array<double, 3> center{0.5, 0.5, 0.5};
    /// Relative aspect; radii are this times a solved scale. For tubes and
    /// lattices extent[2] is the fixed relative length along H.
    std::array<double, 3> extent{0.1, 0.1, 0.1};
    double jitter = 0.03;
    bool protect = false;
};

struct PhantomSpec {
    Shape3 shape{48, 48, 48};
    Spacing spacing{1.0, 1.0, 1.0};
    std::vector<PrimitiveSpec> primitives;
};

struct Phantom {
    LabelVolume volume;
    /// Achieved whole-grid fraction per class ID.
    std::map<int, double> achieved_fractions;
    std::set<int> protected_classes;
};

/// Rib-cage lattice + spine (protected) and four soft-tissue classes.
PhantomSpec default_phantom_spec(Shape3 shape = {48, 48, 48});
nlohmann::json to_json(const PhantomSpec& spec);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);

Phantom generate_phantom(const PhantomSpec& spec, Rng& rng);
/// `count` phantoms with ids "phantom_000"... drawn from independent streams.
std::vector<Subject> generate_phantoms(const PhantomSpec& spec, int count, std::uint64_t seed);
/// Class IDs of the phantom spec's protected primitives.
std::set<int> protected_class_ids(const PhantomSpec& spec);

}  // namespace voxcomp
