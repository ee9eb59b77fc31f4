#include "aulite/au_codec.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>

namespace aulite {

namespace {

bool is_integral(double v) { return std::floor(v) == v; }

std::string format_value(TaskKind kind, double v) {
    if (kind == TaskKind::Intensity) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%.2f", v);
        return buf;
    }
    return std::to_string(static_cast<long long>(v));
}

void check_range(TaskKind kind, int au_id, double v, const std::string& raw) {
    bool ok = false;
    switch (kind) {
        case TaskKind::Detect: ok = is_integral(v) && (v == 0.0 || v == 1.0); break;
        case TaskKind::Level: ok = is_integral(v) && v >= 0.0 && v <= 5.0; break;
        case TaskKind::Intensity: ok = v >= 0.0 && v <= 1.0; break;
    }
    if (!ok)
        throw ParseError(ParseIssue::RangeViolation, au_id, v, raw,
                         "AU" + std::to_string(au_id) + ": value " + std::to_string(v) +
                             " outside the " + task_kind_name(kind) + " range");
}

}  // namespace

double quantize_intensity(double value) { return std::round(value * 100.0) / 100.0; }

std::string serialize(const AuAnswer& answer) {
    if (answer.values.size() != answer.au_ids.size())
        throw ValueError("serialize: answer has " + std::to_string(answer.values.size()) +
                         " values for " + std::to_string(answer.au_ids.size()) + " AU ids");
    std::string out;
    for (size_t i = 0; i < answer.au_ids.size(); ++i) {
        if (i) out += ", ";
        out += "AU" + std::to_string(answer.au_ids[i]) + ": " +
               format_value(answer.kind, answer.values[i]);
    }
    return out;
}

AuAnswer parse(const std::string& text, const TaskSpec& task) {
    task.validate();
    std::map<int, double> found;

    size_t pos = 0;
    const size_t len = text.size();
    auto skip_ws = [&]() {
        while (pos < len && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    };
    auto malformed = [&](const std::string& why) -> ParseError {
        return ParseError(ParseIssue::Malformed, -1, 0.0, text, "malformed answer (" + why + "): " + text);
    };

    skip_ws();
    if (pos == len) throw malformed("empty");
    while (pos < len) {
        skip_ws();
        if (pos + 1 >= len || (text[pos] != 'A' && text[pos] != 'a') ||
            (text[pos + 1] != 'U' && text[pos + 1] != 'u'))
            throw malformed("expected 'AU'");
        pos += 2;
        size_t id_start = pos;
        while (pos < len && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
        if (pos == id_start) throw malformed("missing AU id");
        const int id = std::atoi(text.substr(id_start, pos - id_start).c_str());
        skip_ws();
        if (pos == len || text[pos] != ':') throw malformed("missing ':' after AU id");
        ++pos;
        skip_ws();
        const char* value_start = text.c_str() + pos;
        char* value_end = nullptr;
        const double value = std::strtod(value_start, &value_end);
        if (value_end == value_start) throw malformed("missing value");
        pos += static_cast<size_t>(value_end - value_start);
        skip_ws();
        if (pos < len) {
            if (text[pos] != ',') throw malformed("unexpected trailing text");
            ++pos;
        }
        if (found.count(id))
            throw malformed("duplicate entry for AU" + std::to_string(id));
        found[id] = value;
    }

    AuAnswer answer;
    answer.kind = task.kind;
    answer.au_ids = task.au_ids;
    answer.values.reserve(task.au_ids.size());
    for (int id : task.au_ids) {
        auto it = found.find(id);
        if (it == found.end())
            throw ParseError(ParseIssue::Incomplete, id, 0.0, text,
                             "answer is missing AU" + std::to_string(id));
        check_range(task.kind, id, it->second, text);
        double v = it->second;
        if (task.kind == TaskKind::Intensity) v = quantize_intensity(v);
        answer.values.push_back(v);
    }
    return answer;
}

std::vector<int> level_to_binary(const std::vector<int>& levels) {
    std::vector<int> out;
    out.reserve(levels.size());
    for (int v : levels) {
        if (v < 0 || v > 5)
            throw ValueError("level_to_binary: level " + std::to_string(v) +
                             " outside [0,5]");
        out.push_back(v <= 2 ? 0 : 1);
    }
    return out;
}

AuAnswer validate_label(const std::vector<double>& raw, const TaskSpec& task,
                        const std::string& sample_id) {
    task.validate();
    if (raw.size() != task.au_ids.size())
        throw ValueError("label for sample '" + sample_id + "' has " +
                         std::to_string(raw.size()) + " values, expected " +
                         std::to_string(task.au_ids.size()));
    AuAnswer answer;
    answer.kind = task.kind;
    answer.au_ids = task.au_ids;
    answer.values.reserve(raw.size());
    for (size_t i = 0; i < raw.size(); ++i) {
        double v = raw[i];
        if (task.kind == TaskKind::Intensity) {
            if (v < 0.0 || v > 1.0)
                throw ValueError("label for sample '" + sample_id + "': AU" +
                                 std::to_string(task.au_ids[i]) + " intensity " +
                                 std::to_string(v) + " outside [0,1]");
            v = quantize_intensity(v);
        } else {
            try {
                check_range(task.kind, task.au_ids[i], v, sample_id);
            } catch (const ParseError& e) {
                throw ValueError("label for sample '" + sample_id + "': " + e.what());
            }
        }
        answer.values.push_back(v);
    }
    return answer;
}

}  // namespace aulite
