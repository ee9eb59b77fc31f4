#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "aulite/au_codec.hpp"
#include "aulite/task.hpp"

namespace aulite {

// Per-AU metric table plus average column; values keep full precision and are
// rounded only when rendered.
struct EvalReport {
    TaskKind task = TaskKind::Detect;
    std::string metric;  // "f1" or "mae"
    std::vector<int> au_ids;
    std::vector<double> per_au;
    double average = 0.0;
    int fold_count = 1;
    std::string tune_mode;             // row tag for ablation tables
    double level_exact_accuracy = -1;  // level task only; -1 otherwise
    int64_t parse_failures = 0;
    int64_t sample_count = 0;
};

// Per-AU F1 = 2TP / (2TP + FP + FN) over binary answers. Degenerate AUs
// (TP = FP = FN = 0) score 1.0; `degenerate` reports which, when non-null.
std::vector<double> f1_per_au(const std::vector<AuAnswer>& preds,
                              const std::vector<AuAnswer>& truths,
                              std::vector<bool>* degenerate = nullptr);

std::vector<double> mae_per_au(const std::vector<AuAnswer>& preds,
                               const std::vector<AuAnswer>& truths);

// Fraction of (sample, AU) pairs predicted at the exact level.
double exact_match_rate(const std::vector<AuAnswer>& preds,
                        const std::vector<AuAnswer>& truths);

struct FoldAggregate {
    std::vector<double> per_au;  // unweighted mean over folds
    double average = 0.0;        // mean of per-AU means
};

FoldAggregate aggregate_folds(const std::vector<std::vector<double>>& fold_metrics);

enum class ReportLayout { Bp4d, Disfa, Feafa, Ablation };
ReportLayout report_layout_from_name(const std::string& name);
const char* report_layout_name(ReportLayout layout);

// Paper-table-shaped text rendering: F1 as percent with 1 decimal, MAE with
// 3 decimals and a leading "."; one row per report (ablation stacks the three
// tune modes).
std::string render_report(const std::vector<EvalReport>& rows, ReportLayout layout);

nlohmann::ordered_json report_to_json(const std::vector<EvalReport>& rows,
                                      ReportLayout layout);

}  // namespace aulite
