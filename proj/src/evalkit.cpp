#include "voxcomp/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

#include "voxcomp/error.hpp"
#include "voxcomp/io.hpp"

namespace voxcomp {

namespace fs = std::filesystem;
using json = nlohmann::json;

double binary_dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
    if (a.size() != b.size()) throw ShapeError("dice: volumes differ in size");
    std::int64_t inter = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += a[i] & b[i];
        sa += a[i];
        sb += b[i];
    }
    if (sa + sb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

double binary_dice(const BinaryVolume& a, const BinaryVolume& b) {
    if (a.shape() != b.shape()) throw ShapeError("dice: " + a.shape().str() + " vs " + b.shape().str());
    return binary_dice(a.data(), b.data());
}

std::string test_set_name(const CompletionPair& pair) {
    switch (pair.mode) {
        case RemovalMode::single_anatomy: return "D_test4";
        case RemovalMode::skeleton_only: return "D_skeleton";
        default: return "D_test" + std::to_string(pair.threshold_index + 1);
    }
}

// ---- report ---------------------------------------------------------------------

void EvalReport::summarize() {
    std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
    for (const auto& r : rows) groups[{r.test_set, r.label}].push_back(r.dsc);
    summaries.clear();
    for (const auto& [key, values] : groups) {
        SetSummary s{key.first, key.second, values.size(), 0.0, 0.0};
        double sum = 0.0;
        for (double v : values) sum += v;
        s.mean = sum / static_cast<double>(values.size());
        if (values.size() > 1) {
            double ss = 0.0;
            for (double v : values) ss += (v - s.mean) * (v - s.mean);
            s.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
        }
        summaries.push_back(s);
    }
}

const SetSummary* EvalReport::summary(const std::string& test_set, const std::string& label) const {
    for (const auto& s : summaries)
        if (s.test_set == test_set && s.label == label) return &s;
    return nullptr;
}

double EvalReport::macro_dsc(const std::string& test_set) const {
    double sum = 0.0;
    int n = 0;
    for (const auto& s : summaries)
        if (s.test_set == test_set && !s.label.empty()) {
            sum += s.mean;
            ++n;
        }
    if (n == 0) throw EvaluationError("no per-class rows for " + test_set);
    return sum / n;
}

json to_json(const EvalReport& r) {
    json rows = json::array();
    for (const auto& row : r.rows)
        rows.push_back({{"subject_id", row.subject_id},
                        {"variant_id", row.variant_id},
                        {"threshold", row.threshold},
                        {"test_set", row.test_set},
                        {"label", row.label},
                        {"dsc", row.dsc}});
    json sums = json::array();
    for (const auto& s : r.summaries)
        sums.push_back(
            {{"test_set", s.test_set}, {"label", s.label}, {"count", s.count}, {"mean", s.mean}, {"sd", s.sd}});
    return json{{"schema_version", 1}, {"model", r.model},   {"metadata", r.metadata},
                {"notes", r.notes},    {"summaries", sums}, {"rows", rows}};
}

EvalReport eval_report_from_json(const json& j) {
    EvalReport r;
    try {
        if (j.value("schema_version", 0) != 1) throw ParseError("unsupported evaluation report schema", 0);
        r.model = j.at("model").get<std::string>();
        r.metadata = j.value("metadata", json::object());
        r.notes = j.value("notes", std::vector<std::string>{});
        for (const auto& row : j.at("rows"))
            r.rows.push_back(EvalRow{row.at("subject_id").get<std::string>(), row.at("variant_id").get<int>(),
                                     row.at("threshold").get<double>(), row.at("test_set").get<std::string>(),
                                     row.at("label").get<std::string>(), row.at("dsc").get<double>()});
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed evaluation report: ") + e.what(), 0);
    }
    r.summarize();
    return r;
}

EvalReport load_eval_report(const fs::path& path) {
    const auto bytes = read_file(path);
    try {
        return eval_report_from_json(json::parse(bytes.begin(), bytes.end()));
    } catch (const json::parse_error& e) {
        throw ParseError("cannot parse report " + path.string() + ": " + e.what(), e.byte);
    }
}

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

}  // namespace

std::string rows_csv(const EvalReport& r) {
    std::string out = "subject_id,variant_id,threshold,test_set,label,dsc\n";
    for (const auto& row : r.rows)
        out += csv_field(row.subject_id) + "," + std::to_string(row.variant_id) + "," + fmt("%.17g", row.threshold) +
               "," + csv_field(row.test_set) + "," + csv_field(row.label) + "," + fmt("%.17g", row.dsc) + "\n";
    return out;
}

void write_eval_report(const EvalReport& r, const fs::path& dir) {
    fs::create_directories(dir);
    write_file_atomic(dir / "report.csv", rows_csv(r));
    write_file_atomic(dir / "report.json", to_json(r).dump(2) + "\n");
}

// ---- evaluation -----------------------------------------------------------------

namespace {

bool wanted(const EvalOptions& o, const std::string& set) {
    return o.test_sets.empty() || std::find(o.test_sets.begin(), o.test_sets.end(), set) != o.test_sets.end();
}

json base_metadata(const EvalOptions& o) {
    return json{{"checkpoint_hash", o.checkpoint_hash},
                {"upscaling", "nearest-neighbour"},
                {"threshold", o.threshold},
                {"split", o.training_split ? "train" : "test"}};
}

template <typename F>
void for_each_pair(const Corpus& corpus, const EvalOptions& o, EvalReport& report, F&& fn) {
    const auto split = o.training_split ? Split::train : Split::test;
    for (const CompletionPair* p : corpus.pairs_in(split)) {
        const auto set = test_set_name(*p);
        if (!wanted(o, set)) continue;
        const auto it = corpus.originals.find(p->subject_id);
        if (it == corpus.originals.end() || !p->original_shape.valid() || it->second.shape() != p->original_shape) {
            report.notes.push_back("skipped " + p->subject_id + " variant " + std::to_string(p->variant_id) +
                                   ": missing original-resolution ground truth");
            continue;
        }
        fn(*p, set, it->second);
    }
}

std::string class_name(const ClassTable& table, int c) {
    const auto it = table.find(c);
    return it == table.end() ? "class_" + std::to_string(c) : it->second;
}

ClassTable full_table(const ClassTable& base, int num_classes) {
    ClassTable t = base;
    for (int c = 1; c < num_classes; ++c)
        if (!t.count(c)) t[c] = "class_" + std::to_string(c);
    return t;
}

CompletionFn binary_completion(const Dae& model, double threshold) {
    return [&model, threshold](const CompletionPair& p) {
        const auto x = binarize(p.incomplete);
        return compose_completion(x, model.forward(x), threshold);
    };
}

}  // namespace

EvalReport evaluate_completions(const Corpus& corpus, const CompletionFn& complete, const EvalOptions& o) {
    EvalReport report;
    report.model = o.model_name;
    report.metadata = base_metadata(o);
    for_each_pair(corpus, o, report, [&](const CompletionPair& p, const std::string& set, const LabelVolume& orig) {
        const auto comp = complete(p);
        if (comp.shape() != corpus.model_shape)
            throw ShapeError("completion grid " + comp.shape().str() + " != model grid " + corpus.model_shape.str());
        const auto up = upscale_binary(comp, p.original_shape);
        report.rows.push_back(EvalRow{p.subject_id, p.variant_id, p.threshold, set, "", binary_dice(up, binarize(orig))});
    });
    report.summarize();
    return report;
}

EvalReport evaluate(const Dae& model, const Corpus& corpus, const EvalOptions& o) {
    if (model.config().input_shape != corpus.model_shape)
        throw EvaluationError("model input " + model.config().input_shape.str() + " does not match corpus grid " +
                              corpus.model_shape.str());
    const int classes = model.config().num_classes;
    if (classes == 1) return evaluate_completions(corpus, binary_completion(model, o.threshold), o);

    EvalReport report;
    report.model = o.model_name;
    report.metadata = base_metadata(o);
    report.metadata["num_classes"] = classes;
    for_each_pair(corpus, o, report, [&](const CompletionPair& p, const std::string& set, const LabelVolume& orig) {
        const auto table = full_table(p.complete.class_table(), classes);
        const auto out = model.forward(one_hot(p.incomplete, classes));
        const auto labels = resample_labels(compose_labels(out, table, p.incomplete.spacing()), p.original_shape);
        report.rows.push_back(
            EvalRow{p.subject_id, p.variant_id, p.threshold, set, "", binary_dice(binarize(labels), binarize(orig))});
        std::set<int> present;
        for (int c : orig.present_classes()) present.insert(c);
        for (int c : labels.present_classes()) present.insert(c);
        for (int c : present) {
            if (c == 0) continue;
            const int cls[] = {c};
            report.rows.push_back(EvalRow{p.subject_id, p.variant_id, p.threshold, set, class_name(table, c),
                                          binary_dice(class_mask(labels, cls), class_mask(orig, cls))});
        }
    });
    report.summarize();
    return report;
}

EvalReport evaluate(const fs::path& checkpoint, const fs::path& manifest_path, const EvalOptions& options) {
    const auto ckpt = load_checkpoint(checkpoint);
    const auto manifest = load_manifest(manifest_path);
    if (ckpt.model.config().input_shape != manifest.model_shape)
        throw EvaluationError("checkpoint input " + ckpt.model.config().input_shape.str() +
                              " does not match manifest preprocessing " + manifest.model_shape.str());
    EvalOptions o = options;
    if (o.checkpoint_hash.empty()) o.checkpoint_hash = checksum_file(checkpoint);
    if (o.model_name.empty()) o.model_name = ckpt.meta.experiment;
    auto report = evaluate(ckpt.model, load_corpus(manifest), o);
    report.metadata["manifest_checksum"] = manifest.checksum;
    return report;
}

SingleAnatomyReport evaluate_single_anatomy(const Corpus& corpus, const CompletionFn& complete,
                                            const fs::path& panel_dir, const EvalOptions& o) {
    bool any = false;
    for (const auto& p : corpus.pairs) any = any || p.mode == RemovalMode::single_anatomy;
    if (!any) throw EvaluationError("corpus was not built in single_anatomy mode");

    SingleAnatomyReport result;
    auto& report = result.report;
    report.model = o.model_name;
    report.metadata = base_metadata(o);
    std::set<std::string> rendered;
    std::set<int> seen;
    for_each_pair(corpus, o, report, [&](const CompletionPair& p, const std::string& set, const LabelVolume& orig) {
        if (p.mode != RemovalMode::single_anatomy) return;
        const auto comp = upscale_binary(complete(p), p.original_shape);
        const auto truth = binarize(orig);
        const auto removed = class_mask(orig, p.removed_classes);
        std::vector<std::uint8_t> input(truth.data().begin(), truth.data().end());
        std::vector<std::uint8_t> predicted(comp.data().size());
        for (std::size_t i = 0; i < input.size(); ++i) {
            input[i] = static_cast<std::uint8_t>(input[i] & !removed.data()[i]);
            predicted[i] = static_cast<std::uint8_t>(comp.data()[i] & !input[i]);
        }
        std::string label;
        for (int c : p.removed_classes) {
            label += (label.empty() ? "" : "+") + class_name(orig.class_table(), c);
            seen.insert(c);
        }
        report.rows.push_back(EvalRow{p.subject_id, p.variant_id, p.threshold, set, "", binary_dice(comp, truth)});
        report.rows.push_back(
            EvalRow{p.subject_id, p.variant_id, p.threshold, set, label, binary_dice(predicted, removed.data())});

        if (!panel_dir.empty() && !rendered.count(label)) {
            rendered.insert(label);
            fs::create_directories(panel_dir);
            const auto path = panel_dir / (label + "_" + p.subject_id + "_v" + std::to_string(p.variant_id) + "_coronal.png");
            const BinaryVolume in_vol(p.original_shape, std::move(input), orig.spacing());
            render_slices(in_vol, truth, comp, Plane::coronal, path);
            result.panels.push_back(path);
        }
    });
    // Removable classes that never appear as a test-set removal.
    std::set<int> removable;
    for (const auto& [id, vol] : corpus.originals)
        for (int c : vol.present_classes())
            if (c != 0 && !corpus.policy.protected_classes.count(c)) removable.insert(c);
    for (int c : removable)
        if (!seen.count(c)) report.notes.push_back("class " + std::to_string(c) + " absent from evaluated pairs");
    report.summarize();
    return result;
}

SingleAnatomyReport evaluate_single_anatomy(const Dae& model, const Corpus& corpus, const fs::path& panel_dir,
                                            const EvalOptions& o) {
    if (model.config().num_classes != 1) throw EvaluationError("single-anatomy evaluation expects a binary model");
    return evaluate_single_anatomy(corpus, binary_completion(model, o.threshold), panel_dir, o);
}

// ---- statistics ---------------------------------------------------------------

std::string to_string(Alternative a) {
    switch (a) {
        case Alternative::two_sided: return "two-sided";
        case Alternative::greater: return "greater";
        case Alternative::less: return "less";
    }
    return "?";
}

Alternative alternative_from_string(const std::string& s) {
    for (auto a : {Alternative::two_sided, Alternative::greater, Alternative::less})
        if (to_string(a) == s) return a;
    throw UsageError("unknown alternative '" + s + "' (two-sided, greater, less)");
}

namespace {

double mean_of(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double var_of(std::span<const double> v, double mean) {
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return s / static_cast<double>(v.size() - 1);
}

void finish(TTestResult& r, double se, Alternative alt) {
    if (se == 0.0) {
        r.degenerate = true;
        if (r.mean_difference == 0.0) {
            r.t = 0.0;
            r.p_value = 1.0;
            return;
        }
        const bool pos = r.mean_difference > 0.0;
        r.t = pos ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
        switch (alt) {
            case Alternative::two_sided: r.p_value = 0.0; break;
            case Alternative::greater: r.p_value = pos ? 0.0 : 1.0; break;
            case Alternative::less: r.p_value = pos ? 1.0 : 0.0; break;
        }
        return;
    }
    r.t = r.mean_difference / se;
    const boost::math::students_t dist(r.df);
    switch (alt) {
        case Alternative::two_sided: r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))); break;
        case Alternative::greater: r.p_value = boost::math::cdf(boost::math::complement(dist, r.t)); break;
        case Alternative::less: r.p_value = boost::math::cdf(dist, r.t); break;
    }
    r.p_value = std::clamp(r.p_value, 0.0, 1.0);
}

}  // namespace

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b, Alternative alt) {
    if (a.size() != b.size()) throw AlignmentError("paired t-test: samples differ in length");
    TTestResult r;
    r.n = a.size();
    if (r.n < 2) {
        r.degenerate = true;
        if (r.n == 1) r.mean_difference = a[0] - b[0];
        return r;
    }
    std::vector<double> d(r.n);
    for (std::size_t i = 0; i < r.n; ++i) d[i] = a[i] - b[i];
    r.mean_difference = mean_of(d);
    r.df = static_cast<double>(r.n - 1);
    finish(r, std::sqrt(var_of(d, r.mean_difference) / static_cast<double>(r.n)), alt);
    return r;
}

TTestResult welch_t_test(std::span<const double> a, std::span<const double> b, Alternative alt) {
    TTestResult r;
    r.n = a.size() + b.size();
    if (a.size() < 2 || b.size() < 2) {
        r.degenerate = true;
        return r;
    }
    const double ma = mean_of(a), mb = mean_of(b);
    const double qa = var_of(a, ma) / static_cast<double>(a.size());
    const double qb = var_of(b, mb) / static_cast<double>(b.size());
    r.mean_difference = ma - mb;
    const double se2 = qa + qb;
    r.df = se2 > 0.0 ? se2 * se2 /
                           (qa * qa / static_cast<double>(a.size() - 1) + qb * qb / static_cast<double>(b.size() - 1))
                     : static_cast<double>(r.n - 2);
    finish(r, std::sqrt(se2), alt);
    return r;
}

ComparisonReport compare(const EvalReport& a, const EvalReport& b, const CompareOptions& o) {
    using Key = std::pair<std::string, int>;
    using Group = std::map<Key, double>;
    auto groups_of = [](const EvalReport& r) {
        std::map<std::pair<std::string, std::string>, Group> g;
        for (const auto& row : r.rows) {
            auto& grp = g[{row.test_set, row.label}];
            if (!grp.emplace(Key{row.subject_id, row.variant_id}, row.dsc).second)
                throw AlignmentError("duplicate row " + row.subject_id + "/" + std::to_string(row.variant_id) +
                                     " in report " + r.model);
        }
        return g;
    };
    const auto ga = groups_of(a), gb = groups_of(b);

    ComparisonReport report{a.model, b.model, o.paired, o.alternative, {}};
    if (o.paired) {
        std::vector<std::string> missing;
        auto note_missing = [&](const auto& from, const auto& in, const std::string& where) {
            for (const auto& [gk, grp] : from) {
                const auto it = in.find(gk);
                for (const auto& [k, _] : grp)
                    if (it == in.end() || !it->second.count(k))
                        missing.push_back(gk.first + (gk.second.empty() ? "" : "/" + gk.second) + ":" + k.first + "/" +
                                          std::to_string(k.second) + " missing from " + where);
            }
        };
        note_missing(ga, gb, b.model.empty() ? "b" : b.model);
        note_missing(gb, ga, a.model.empty() ? "a" : a.model);
        if (!missing.empty()) {
            std::string msg = "reports are not aligned (" + std::to_string(missing.size()) + " keys):";
            for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 10); ++i) msg += "\n  " + missing[i];
            if (missing.size() > 10) msg += "\n  ...";
            throw AlignmentError(msg);
        }
    }
    for (const auto& [gk, grp] : ga) {
        const auto it = gb.find(gk);
        if (it == gb.end()) continue;
        std::vector<double> va, vb;
        for (const auto& [k, v] : grp) va.push_back(v);
        for (const auto& [k, v] : it->second) vb.push_back(v);
        const auto res = o.paired ? paired_t_test(va, vb, o.alternative) : welch_t_test(va, vb, o.alternative);
        report.entries.push_back(ComparisonEntry{gk.first, gk.second, res});
    }
    return report;
}

json to_json(const ComparisonReport& r) {
    json entries = json::array();
    for (const auto& e : r.entries)
        entries.push_back({{"test_set", e.test_set},
                           {"label", e.label},
                           {"n", e.result.n},
                           {"mean_difference", e.result.mean_difference},
                           {"t", std::isfinite(e.result.t) ? json(e.result.t) : json(e.result.t > 0 ? "inf" : "-inf")},
                           {"df", e.result.df},
                           {"p_value", e.result.p_value},
                           {"degenerate", e.result.degenerate}});
    return json{{"schema_version", 1},
                {"model_a", r.model_a},
                {"model_b", r.model_b},
                {"test", r.paired ? "paired" : "welch"},
                {"alternative", to_string(r.alternative)},
                {"entries", entries}};
}

std::string markdown_dsc_table(std::span<const EvalReport> reports) {
    std::set<std::string> sets;
    for (const auto& r : reports)
        for (const auto& s : r.summaries)
            if (s.label.empty()) sets.insert(s.test_set);
    std::string out = "| Model |";
    std::string rule = "|---|";
    for (const auto& s : sets) {
        out += " " + s + " |";
        rule += "---|";
    }
    out += "\n" + rule + "\n";
    for (const auto& r : reports) {
        out += "| " + r.model + " |";
        for (const auto& s : sets) {
            const auto* sum = r.summary(s);
            out += sum ? " " + fmt("%.3f", sum->mean) + " (" + fmt("%.3f", sum->sd) + ") |" : " - |";
        }
        out += "\n";
    }
    return out;
}

std::string markdown_pvalue_table(std::span<const ComparisonReport> reports) {
    std::set<std::string> sets;
    for (const auto& r : reports)
        for (const auto& e : r.entries)
            if (e.label.empty()) sets.insert(e.test_set);
    std::string out = "| Comparison |";
    std::string rule = "|---|";
    for (const auto& s : sets) {
        out += " " + s + " |";
        rule += "---|";
    }
    out += "\n" + rule + "\n";
    for (const auto& r : reports) {
        out += "| " + r.model_a + " vs " + r.model_b + " |";
        for (const auto& s : sets) {
            const ComparisonEntry* hit = nullptr;
            for (const auto& e : r.entries)
                if (e.test_set == s && e.label.empty()) hit = &e;
            if (!hit)
                out += " - |";
            else
                out += " " + fmt("%.3e", hit->result.p_value) + (hit->result.degenerate ? " (degenerate)" : "") + " |";
        }
        out += "\n";
    }
    return out;
}

}  // namespace voxcomp
