#include "aulite/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace aulite {

namespace {

void check_aligned(const std::vector<AuAnswer>& preds, const std::vector<AuAnswer>& truths) {
    if (preds.size() != truths.size())
        throw ShapeError("metric: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(truths.size()) + " truths");
    if (preds.empty()) throw ValueError("metric: empty sample list");
    for (size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].au_ids != truths[i].au_ids || preds[i].au_ids != preds[0].au_ids)
            throw ShapeError("metric: AU id lists disagree at sample " + std::to_string(i));
        if (preds[i].values.size() != preds[i].au_ids.size() ||
            truths[i].values.size() != truths[i].au_ids.size())
            throw ShapeError("metric: value/id length mismatch at sample " +
                             std::to_string(i));
    }
}

}  // namespace

std::vector<double> f1_per_au(const std::vector<AuAnswer>& preds,
                              const std::vector<AuAnswer>& truths,
                              std::vector<bool>* degenerate) {
    check_aligned(preds, truths);
    const size_t n_au = preds[0].au_ids.size();
    std::vector<double> out(n_au);
    if (degenerate) degenerate->assign(n_au, false);
    for (size_t a = 0; a < n_au; ++a) {
        int64_t tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < preds.size(); ++i) {
            const double p = preds[i].values[a];
            const double t = truths[i].values[a];
            if (p != 0.0 && p != 1.0)
                throw ValueError("f1: non-binary prediction " + std::to_string(p));
            if (t != 0.0 && t != 1.0)
                throw ValueError("f1: non-binary truth " + std::to_string(t));
            if (p == 1.0 && t == 1.0) ++tp;
            if (p == 1.0 && t == 0.0) ++fp;
            if (p == 0.0 && t == 1.0) ++fn;
        }
        if (tp == 0 && fp == 0 && fn == 0) {
            // no positives anywhere: perfect-absence convention
            out[a] = 1.0;
            if (degenerate) (*degenerate)[a] = true;
        } else {
            out[a] = 2.0 * static_cast<double>(tp) /
                     static_cast<double>(2 * tp + fp + fn);
        }
    }
    return out;
}

std::vector<double> mae_per_au(const std::vector<AuAnswer>& preds,
                               const std::vector<AuAnswer>& truths) {
    check_aligned(preds, truths);
    const size_t n_au = preds[0].au_ids.size();
    std::vector<double> out(n_au, 0.0);
    for (size_t a = 0; a < n_au; ++a) {
        double total = 0.0;
        for (size_t i = 0; i < preds.size(); ++i)
            total += std::abs(preds[i].values[a] - truths[i].values[a]);
        out[a] = total / static_cast<double>(preds.size());
    }
    return out;
}

double exact_match_rate(const std::vector<AuAnswer>& preds,
                        const std::vector<AuAnswer>& truths) {
    check_aligned(preds, truths);
    int64_t hits = 0, total = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        for (size_t a = 0; a < preds[i].values.size(); ++a) {
            hits += preds[i].values[a] == truths[i].values[a] ? 1 : 0;
            ++total;
        }
    return static_cast<double>(hits) / static_cast<double>(total);
}

FoldAggregate aggregate_folds(const std::vector<std::vector<double>>& fold_metrics) {
    if (fold_metrics.empty()) throw ValueError("aggregate: no folds");
    const size_t n_au = fold_metrics[0].size();
    for (const auto& fold : fold_metrics)
        if (fold.size() != n_au)
            throw ShapeError("aggregate: folds report different AU sets");

    FoldAggregate agg;
    agg.per_au.assign(n_au, 0.0);
    for (const auto& fold : fold_metrics)
        for (size_t a = 0; a < n_au; ++a) agg.per_au[a] += fold[a];
    for (double& v : agg.per_au) v /= static_cast<double>(fold_metrics.size());
    double total = 0.0;
    for (double v : agg.per_au) total += v;
    agg.average = total / static_cast<double>(n_au);
    return agg;
}

ReportLayout report_layout_from_name(const std::string& name) {
    if (name == "bp4d") return ReportLayout::Bp4d;
    if (name == "disfa") return ReportLayout::Disfa;
    if (name == "feafa") return ReportLayout::Feafa;
    if (name == "ablation") return ReportLayout::Ablation;
    throw ValueError("unknown report layout '" + name + "'");
}

const char* report_layout_name(ReportLayout layout) {
    switch (layout) {
        case ReportLayout::Bp4d: return "bp4d";
        case ReportLayout::Disfa: return "disfa";
        case ReportLayout::Feafa: return "feafa";
        case ReportLayout::Ablation: return "ablation";
    }
    return "?";
}

namespace {

// FEAFA comparisons show the 12 odd-id columns; the average still covers all.
const std::vector<int>& feafa_display_ids() {
    static const std::vector<int> ids = {1, 3, 5, 7, 9, 11, 13, 15, 17, 19, 21, 23};
    return ids;
}

std::string format_metric(const std::string& metric, double value) {
    char buf[32];
    if (metric == "mae") {
        std::snprintf(buf, sizeof(buf), "%.3f", value);
        std::string s = buf;
        if (s.size() > 1 && s[0] == '0') s.erase(0, 1);  // ".011" style
        return s;
    }
    std::snprintf(buf, sizeof(buf), "%.1f", value * 100.0);  // percent, 1 decimal
    return buf;
}

void check_layout_ids(const EvalReport& row, ReportLayout layout) {
    switch (layout) {
        case ReportLayout::Bp4d:
            if (row.au_ids != bp4d_au_ids())
                throw ValueError("bp4d layout expects the 12-AU id list");
            break;
        case ReportLayout::Disfa:
            if (row.au_ids != disfa_au_ids())
                throw ValueError("disfa layout expects the 8-AU id list");
            break;
        case ReportLayout::Feafa:
            if (row.au_ids != feafa_au_ids())
                throw ValueError("feafa layout expects the 24-AU id list");
            break;
        case ReportLayout::Ablation:
            break;  // any AU set; rows carry tune-mode tags
    }
}

std::vector<int> display_ids(const EvalReport& row, ReportLayout layout) {
    if (layout == ReportLayout::Feafa) return feafa_display_ids();
    return row.au_ids;
}

}  // namespace

std::string render_report(const std::vector<EvalReport>& rows, ReportLayout layout) {
    if (rows.empty()) throw ValueError("render: no rows");
    for (const EvalReport& row : rows) check_layout_ids(row, layout);
    for (size_t r = 1; r < rows.size(); ++r)
        if (rows[r].au_ids != rows[0].au_ids)
            throw ValueError("render: rows disagree on AU ids");

    const std::vector<int> ids = display_ids(rows[0], layout);
    const size_t label_width = 12;

    std::ostringstream os;
    auto pad = [&os](const std::string& s, size_t width) {
        os << s;
        for (size_t i = s.size(); i < width; ++i) os << ' ';
    };

    pad(layout == ReportLayout::Ablation ? "FT comp." : "Row", label_width);
    for (int id : ids) pad("AU" + std::to_string(id), 7);
    os << "Avg.\n";

    for (const EvalReport& row : rows) {
        pad(row.tune_mode.empty() ? "result" : row.tune_mode, label_width);
        for (int id : ids) {
            const auto it = std::find(row.au_ids.begin(), row.au_ids.end(), id);
            const size_t a = static_cast<size_t>(it - row.au_ids.begin());
            pad(format_metric(row.metric, row.per_au[a]), 7);
        }
        os << format_metric(row.metric, row.average) << "\n";
    }
    return os.str();
}

nlohmann::ordered_json report_to_json(const std::vector<EvalReport>& rows,
                                      ReportLayout layout) {
    nlohmann::ordered_json doc;
    doc["layout"] = report_layout_name(layout);
    nlohmann::ordered_json rows_json = nlohmann::ordered_json::array();
    for (const EvalReport& row : rows) {
        nlohmann::ordered_json r;
        r["task"] = task_kind_name(row.task);
        r["metric"] = row.metric;
        r["tune_mode"] = row.tune_mode;
        r["fold_count"] = row.fold_count;
        r["sample_count"] = row.sample_count;
        r["parse_failures"] = row.parse_failures;
        nlohmann::ordered_json per_au = nlohmann::ordered_json::object();
        for (size_t a = 0; a < row.au_ids.size(); ++a)
            per_au["AU" + std::to_string(row.au_ids[a])] = row.per_au[a];
        r["per_au"] = std::move(per_au);
        r["average"] = row.average;
        if (row.level_exact_accuracy >= 0)
            r["level_exact_accuracy"] = row.level_exact_accuracy;
        rows_json.push_back(std::move(r));
    }
    doc["rows"] = std::move(rows_json);
    return doc;
}

}  // namespace aulite
