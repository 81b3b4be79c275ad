#pragma once

// Glue shared by the command-line tool and the acceptance harness: report
// records, trim-plan files, the threshold sweep and its table.

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "trimlab/checkpoint.hpp"
#include "trimlab/costbench.hpp"
#include "trimlab/trimming.hpp"

namespace trimlab {

// ----- report records -----------------------------------------------------------

inline Json to_json(const TrimReport& r) {
    Json j{{"params_before", r.params_before},
           {"params_after", r.params_after},
           {"trimming_ratio", r.trimming_ratio},
           {"head_params_before", r.head_params_before},
           {"head_params_after", r.head_params_after},
           {"removed_units", r.removed_units},
           {"removed_params", r.removed_params},
           {"warnings", r.warnings}};
    j["bytes_before"] = r.bytes_before ? Json(*r.bytes_before) : Json(nullptr);
    j["bytes_after"] = r.bytes_after ? Json(*r.bytes_after) : Json(nullptr);
    j["max_deviation"] = r.max_deviation ? Json(*r.max_deviation) : Json(nullptr);
    return j;
}

inline Json to_json(const TimingReport& t) {
    return Json{{"median_ms", t.median_ms}, {"min_ms", t.min_ms}, {"p90_ms", t.p90_ms}, {"reps", t.reps}, {"discarded", t.discarded}};
}

inline Json to_json(const CostReport& r) {
    return Json{{"params", r.params},
                {"encoder_params", r.encoder_params},
                {"macs", r.macs},
                {"flops", r.flops},
                {"bytes", r.bytes ? Json(*r.bytes) : Json(nullptr)},
                {"timing", r.timing ? to_json(*r.timing) : Json(nullptr)},
                {"speedup", r.speedup ? Json(*r.speedup) : Json(nullptr)},
                {"convention", "MACs count multiply-accumulates in matmul, conv and depthwise kernels; FLOPs = 2 * MACs; "
                               "bias, normalisation, activations, softmax and pooling excluded; single example"}};
}

// ----- trim plans on disk -----------------------------------------------------------

inline Json to_json(const TrimPlan& p) { return Json{{"source", to_json(p.source)}, {"keep", p.keep}}; }

inline TrimPlan trim_plan_from_json(const Json& j) {
    detail::require_object(j, "plan");
    detail::reject_unknown(j, "plan", {"source", "keep"});
    if (!j.contains("source") || !j.contains("keep")) throw ConfigError("plan: needs \"source\" and \"keep\"");
    std::map<std::string, std::vector<std::size_t>> keep;
    try {
        keep = j["keep"].get<std::map<std::string, std::vector<std::size_t>>>();
    } catch (const Json::exception&) {
        throw ConfigError("plan.keep: expected an object of index arrays");
    }
    return plan_from_keep(model_spec_from_json(j["source"], "plan.source"), std::move(keep));
}

// ----- threshold sweep ------------------------------------------------------------------

inline std::vector<double> default_t_grid() { return {0.3, 0.4, 0.5, 0.6, 0.7}; }
inline std::vector<double> default_targets() { return {0.25, 0.50, 0.75}; }

struct SweepRow {
    double t = 0;
    double trim_ratio = 0;
    double metric = 0;
    std::size_t params = 0;  // encoder params after trimming
    std::uint64_t macs = 0;  // single-example forward of the trimmed model
};

struct SweepSelection {
    double target = 0;
    std::size_t row = 0;
};

/// For each target, the grid row whose trim ratio is nearest; ties go to the
/// earlier row.
inline std::vector<SweepSelection> select_nearest(const std::vector<SweepRow>& rows, const std::vector<double>& targets) {
    if (rows.empty()) throw ConfigError("sweep: no grid rows to select from");
    std::vector<SweepSelection> out;
    for (double target : targets) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < rows.size(); ++i)
            if (std::abs(rows[i].trim_ratio - target) < std::abs(rows[best].trim_ratio - target)) best = i;
        out.push_back({target, best});
    }
    return out;
}

inline std::string format_double(double v) {
    std::ostringstream s;
    s.precision(6);
    s << v;
    return s.str();
}

/// One row per grid point, then one per target selection.
inline std::string sweep_csv(const std::vector<SweepRow>& rows, const std::vector<SweepSelection>& picks) {
    std::ostringstream out;
    out << "kind,target,t,trim_ratio,metric,params,macs\n";
    auto line = [&](const char* kind, const std::string& target, const SweepRow& r) {
        out << kind << ',' << target << ',' << format_double(r.t) << ',' << format_double(r.trim_ratio) << ','
            << format_double(r.metric) << ',' << r.params << ',' << r.macs << '\n';
    };
    for (const auto& r : rows) line("grid", "", r);
    for (const auto& p : picks) line("select", format_double(p.target), rows.at(p.row));
    return out.str();
}

/// Grid rows that respect "larger t trims no more": count of adjacent pairs
/// (in grid order) where the ratio does not increase.
inline std::size_t monotone_pairs(const std::vector<SweepRow>& rows) {
    std::size_t n = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) n += rows[i].trim_ratio <= rows[i - 1].trim_ratio;
    return n;
}

// ----- files ----------------------------------------------------------------------------

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

/// One compact JSON object per line.
inline std::string history_jsonl(const std::vector<HistoryRecord>& history) {
    std::string s;
    for (const auto& h : history) s += to_json(h).dump() + "\n";
    return s;
}

}  // namespace trimlab
