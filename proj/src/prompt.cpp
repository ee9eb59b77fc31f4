#include "aulite/prompt.hpp"

namespace aulite {

const char* face_region_text(FaceRegion region) {
    switch (region) {
        case FaceRegion::Upper: return "upper face";
        case FaceRegion::Mid: return "mid face";
        case FaceRegion::Lower: return "lower face";
    }
    return "?";
}

const std::vector<AuDefinition>& builtin_au_table() {
    static const std::vector<AuDefinition> table = {
        {1, "inner brow raiser", FaceRegion::Upper},
        {2, "outer brow raiser", FaceRegion::Upper},
        {3, "brow gatherer", FaceRegion::Upper},
        {4, "brow lowerer", FaceRegion::Upper},
        {5, "upper lid raiser", FaceRegion::Upper},
        {6, "cheek raiser", FaceRegion::Mid},
        {7, "lid tightener", FaceRegion::Upper},
        {8, "lips toward each other", FaceRegion::Lower},
        {9, "nose wrinkler", FaceRegion::Mid},
        {10, "upper lip raiser", FaceRegion::Mid},
        {11, "nasolabial deepener", FaceRegion::Mid},
        {12, "lip corner puller", FaceRegion::Lower},
        {13, "sharp lip puller", FaceRegion::Lower},
        {14, "dimpler", FaceRegion::Lower},
        {15, "lip corner depressor", FaceRegion::Lower},
        {16, "lower lip depressor", FaceRegion::Lower},
        {17, "chin raiser", FaceRegion::Lower},
        {18, "lip pucker", FaceRegion::Lower},
        {19, "tongue show", FaceRegion::Lower},
        {20, "lip stretcher", FaceRegion::Lower},
        {21, "neck tightener", FaceRegion::Lower},
        {22, "lip funneler", FaceRegion::Lower},
        {23, "lip tightener", FaceRegion::Lower},
        {24, "lip pressor", FaceRegion::Lower},
        {25, "lips part", FaceRegion::Lower},
        {26, "jaw drop", FaceRegion::Lower},
    };
    return table;
}

const AuDefinition& lookup_au(int id) {
    for (const AuDefinition& def : builtin_au_table())
        if (def.id == id) return def;
    throw ValueError("no definition for AU id " + std::to_string(id));
}

namespace {

std::string task_purpose(TaskKind kind) {
    switch (kind) {
        case TaskKind::Detect:
            return "Mark each listed AU as present or absent in the face image.";
        case TaskKind::Level:
            return "Rate the strength of each listed AU in the face image on a whole-number "
                   "scale from 0 to 5.";
        case TaskKind::Intensity:
            return "Rate the intensity of each listed AU in the face image on a scale from 0 "
                   "to 1.";
    }
    return "";
}

std::string output_format(TaskKind kind) {
    std::string tail;
    switch (kind) {
        case TaskKind::Detect: tail = "each value is 0 or 1."; break;
        case TaskKind::Level: tail = "each value is a whole number from 0 to 5."; break;
        case TaskKind::Intensity:
            tail = "each value is a number from 0.00 to 1.00 with two decimals.";
            break;
    }
    return "AU<id>: <value> entries joined by ', ', in the listed order; " + tail;
}

}  // namespace

std::string build_description(const TaskSpec& task) {
    task.validate();
    std::string text = "TASK: " + task_purpose(task.kind) + "\n";
    text += "AU DEFINITIONS: ";
    for (size_t i = 0; i < task.au_ids.size(); ++i) {
        const AuDefinition& def = lookup_au(task.au_ids[i]);
        if (i) text += "; ";
        text += "AU" + std::to_string(def.id) + " " + def.name + " (" +
                face_region_text(def.region) + ")";
    }
    text += ".\n";
    text += "OUTPUT FORMAT: " + output_format(task.kind);
    for (char c : text)
        if (static_cast<unsigned char>(c) > 127)
            throw ValueError("prompt text is not ASCII");  // tokenizer precondition
    return text;
}

}  // namespace aulite
