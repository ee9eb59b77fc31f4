#pragma once

#include <string>
#include <vector>

#include "aulite/common.hpp"

namespace aulite {

// The three answer formats: binary presence, discrete 0-5 level, continuous
// [0,1] intensity with two decimals.
enum class TaskKind { Detect, Level, Intensity };

const char* task_kind_name(TaskKind kind);
TaskKind task_kind_from_name(const std::string& name);

struct TaskSpec {
    TaskKind kind = TaskKind::Detect;
    std::vector<int> au_ids;  // non-empty, unique, ascending

    void validate() const;
};

TaskSpec make_task(TaskKind kind, std::vector<int> au_ids);

// Canonical AU id lists mirroring the three dataset label conventions.
const std::vector<int>& bp4d_au_ids();   // 12 ids
const std::vector<int>& disfa_au_ids();  // 8 ids
const std::vector<int>& feafa_au_ids();  // 24 ids

}  // namespace aulite
