#pragma once

#include <string>
#include <vector>

#include "aulite/task.hpp"

namespace aulite {

// Prompt wording is versioned; checkpoints embed the tag so evaluation
// prompts always match the prompts a model was trained with.
inline constexpr const char* kPromptVersion = "PROMPT_V1";

enum class FaceRegion { Upper, Mid, Lower };

const char* face_region_text(FaceRegion region);

struct AuDefinition {
    int id;
    std::string name;  // muscle action, e.g. "lip corner puller"
    FaceRegion region;
};

// Covers ids 1..26: the BP4D-style, DISFA-style and 24-entry FEAFA-style
// lists all resolve against it.
const std::vector<AuDefinition>& builtin_au_table();

const AuDefinition& lookup_au(int id);

// Three fixed parts in fixed order: task purpose, AU definitions with face
// regions, expected output format. Pure function of the TaskSpec;
// byte-identical across calls.
std::string build_description(const TaskSpec& task);

}  // namespace aulite
