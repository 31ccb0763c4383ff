#pragma once

// Quantitative evaluation at native resolution, statistical comparison of
// models and slice rendering.

#include <array>
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

namespace voxcomp {

/// 2|A n B| / (|A| + |B|), 1 when both are empty.
double binary_dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);
double binary_dice(const BinaryVolume& a, const BinaryVolume& b);

/// D_test1..3 by threshold index, D_test4 for single-anatomy pairs,
/// D_skeleton for skeleton-only pairs.
std::string test_set_name(const CompletionPair& pair);

struct EvalRow {
    std::string subject_id;
    int variant_id = 0;
    double threshold = 0.0;
    std::string test_set;
    /// Empty for whole-volume rows, otherwise the class name.
    std::string label;
    double dsc = 0.0;
};

struct SetSummary {
    std::string test_set;
    std::string label;
    std::size_t count = 0;
    double mean = 0.0;
    /// Sample standard deviation (n - 1); 0 for a single row.
    double sd = 0.0;
};

struct EvalReport {
    std::string model;
    std::vector<EvalRow> rows;
    std::vector<SetSummary> summaries;
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<std::string> notes;

    /// Rebuilds `summaries` from `rows`, ordered by (test_set, label).
    void summarize();
    const SetSummary* summary(const std::string& test_set, const std::string& label = {}) const;
    /// Mean of the per-class means of one test set (multi-class reports).
    double macro_dsc(const std::string& test_set) const;
};

nlohmann::json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& j);
EvalReport load_eval_report(const std::filesystem::path& path);
/// report.csv (rows) and report.json (aggregates, metadata and rows) into `dir`.
void write_eval_report(const EvalReport& report, const std::filesystem::path& dir);
std::string rows_csv(const EvalReport& report);

struct EvalOptions {
    double threshold = 0.5;
    /// Restrict to these test sets; empty evaluates every test pair.
    std::vector<std::string> test_sets;
    std::string model_name;
    std::string checkpoint_hash;
    /// Evaluate the training split instead of the test split.
    bool training_split = false;
};

/// Binary completion at the model grid for one pair.
using CompletionFn = std::function<BinaryVolume(const CompletionPair&)>;

/// Upscales each completion to the pair's original grid and scores it
/// against the native-resolution ground truth.
EvalReport evaluate_completions(const Corpus& corpus, const CompletionFn& complete, const EvalOptions& options = {});
/// Binary models score whole-volume DSC; multi-class models add one row per
/// class present in the ground truth or the prediction.
EvalReport evaluate(const Dae& model, const Corpus& corpus, const EvalOptions& options = {});
EvalReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                    const EvalOptions& options = {});

struct SingleAnatomyReport {
    /// Rows labelled "" hold whole-volume DSC; rows labelled with a class
    /// name hold the DSC of the reconstructed region against that class.
    EvalReport report;
    std::vector<std::filesystem::path> panels;
};

/// `panel_dir` empty skips rendering.
SingleAnatomyReport evaluate_single_anatomy(const Corpus& corpus, const CompletionFn& complete,
                                            const std::filesystem::path& panel_dir = {},
                                            const EvalOptions& options = {});
SingleAnatomyReport evaluate_single_anatomy(const Dae& model, const Corpus& corpus,
                                            const std::filesystem::path& panel_dir = {},
                                            const EvalOptions& options = {});

// ---- statistics ---------------------------------------------------------------

enum class Alternative { two_sided, greater, less };
std::string to_string(Alternative a);
Alternative alternative_from_string(const std::string& s);

struct TTestResult {
    std::size_t n = 0;
    double mean_difference = 0.0;
    double t = 0.0;
    double df = 0.0;
    double p_value = 1.0;
    bool degenerate = false;
};

/// Paired t-test on a - b.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b,
                          Alternative alternative = Alternative::two_sided);
/// Welch's unequal-variance t-test.
TTestResult welch_t_test(std::span<const double> a, std::span<const double> b,
                         Alternative alternative = Alternative::two_sided);

struct CompareOptions {
    bool paired = true;
    Alternative alternative = Alternative::two_sided;
};

struct ComparisonEntry {
    std::string test_set;
    std::string label;
    TTestResult result;
};

struct ComparisonReport {
    std::string model_a;
    std::string model_b;
    bool paired = true;
    Alternative alternative = Alternative::two_sided;
    std::vector<ComparisonEntry> entries;
};

/// One test per (test_set, label) group. Paired tests require both reports
/// to hold the same (subject, variant) keys in every group.
ComparisonReport compare(const EvalReport& a, const EvalReport& b, const CompareOptions& options = {});
nlohmann::json to_json(const ComparisonReport& report);

/// Mean (SD) of whole-volume DSC, one row per model, one column per test set.
std::string markdown_dsc_table(std::span<const EvalReport> reports);
/// p values, one row per model pair, one column per test set.
std::string markdown_pvalue_table(std::span<const ComparisonReport> reports);

// ---- rendering -----------------------------------------------------------------

enum class Plane { coronal, axial, sagittal };
std::string to_string(Plane p);
/// Unknown names raise UsageError.
Plane plane_from_string(const std::string& s);

enum class VoxelCategory : std::uint8_t {
    background,
    input_overlap,
    reconstructed_missing,
    false_negative,
    false_positive,
};

struct Rgb {
    std::uint8_t r, g, b;
};

inline constexpr std::array<Rgb, 5> kCategoryColors{{
    {0, 0, 0},
    {170, 170, 170},
    {235, 125, 35},
    {255, 255, 255},
    {40, 120, 235},
}};

std::string to_string(VoxelCategory c);

struct RenderOptions {
    /// Slice indices along the plane normal; empty picks `tiles` evenly spaced ones.
    std::vector<int> slices;
    int tiles = 6;
    int columns = 3;
    /// Pixels per voxel edge.
    int scale = 4;
};

struct RenderResult {
    std::filesystem::path path;
    std::vector<int> slices;
    /// Voxel cells per category over all rendered slices, indexed by VoxelCategory.
    std::array<std::int64_t, 5> counts{};
};

VoxelCategory classify_voxel(bool input, bool truth, bool completion) noexcept;

/// Montage PNG plus a legend sidecar (<path>.legend.json).
RenderResult render_slices(const BinaryVolume& input, const BinaryVolume& truth, const BinaryVolume& completion,
                           Plane plane, const std::filesystem::path& path, const RenderOptions& options = {});

}  // namespace voxcomp
