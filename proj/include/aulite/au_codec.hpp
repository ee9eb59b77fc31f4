#pragma once

#include <string>
#include <vector>

#include "aulite/task.hpp"

namespace aulite {

// Parsed answer array; one value per AU in TaskSpec order. Detect and level
// values are whole numbers, intensity values exact multiples of 0.01.
struct AuAnswer {
    TaskKind kind = TaskKind::Detect;
    std::vector<int> au_ids;
    std::vector<double> values;
};

enum class ParseIssue { Incomplete, RangeViolation, Malformed };

// Parse failures are structured so callers can surface the raw generation
// instead of silently substituting defaults.
class ParseError : public std::runtime_error {
public:
    ParseError(ParseIssue issue, int au_id, double value, std::string raw_text,
               const std::string& message)
        : std::runtime_error(message),
          issue(issue),
          au_id(au_id),
          value(value),
          raw_text(std::move(raw_text)) {}

    ParseIssue issue;
    int au_id;     // offending id, or -1
    double value;  // offending value, or 0
    std::string raw_text;
};

// Canonical wire format: `AU<id>: <value>` entries joined by `, `.
// Intensity values always carry exactly two decimals.
std::string serialize(const AuAnswer& answer);

// Tolerant inverse: whitespace- and order-flexible, matches entries by AU id,
// validates range and completeness. parse(serialize(a)) == a.
AuAnswer parse(const std::string& text, const TaskSpec& task);

// DISFA-style validation mapping: levels 2 and below -> 0, above 2 -> 1.
// Applied symmetrically to predictions and ground truth before F1.
std::vector<int> level_to_binary(const std::vector<int>& levels);

// Ingestion guard for dataset labels; same range rules as parse, intensity
// quantized to 2 decimals (round half away from zero).
AuAnswer validate_label(const std::vector<double>& raw, const TaskSpec& task,
                        const std::string& sample_id);

double quantize_intensity(double value);

}  // namespace aulite
