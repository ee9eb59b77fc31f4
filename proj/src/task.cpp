#include "aulite/task.hpp"

#include <algorithm>

namespace aulite {

const char* task_kind_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::Detect: return "detect";
        case TaskKind::Level: return "level";
        case TaskKind::Intensity: return "intensity";
    }
    return "?";
}

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "detect") return TaskKind::Detect;
    if (name == "level") return TaskKind::Level;
    if (name == "intensity") return TaskKind::Intensity;
    throw ValueError("unknown task kind '" + name + "' (expected detect|level|intensity)");
}

void TaskSpec::validate() const {
    if (au_ids.empty()) throw ValueError("task: empty AU id list");
    for (size_t i = 1; i < au_ids.size(); ++i)
        if (au_ids[i] <= au_ids[i - 1])
            throw ValueError("task: AU ids must be unique and ascending");
    for (int id : au_ids)
        if (id < 1) throw ValueError("task: AU ids must be positive");
}

TaskSpec make_task(TaskKind kind, std::vector<int> au_ids) {
    TaskSpec task{kind, std::move(au_ids)};
    task.validate();
    return task;
}

const std::vector<int>& bp4d_au_ids() {
    static const std::vector<int> ids = {1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24};
    return ids;
}

const std::vector<int>& disfa_au_ids() {
    static const std::vector<int> ids = {1, 2, 4, 6, 9, 12, 25, 26};
    return ids;
}

const std::vector<int>& feafa_au_ids() {
    static const std::vector<int> ids = {1,  2,  3,  4,  5,  6,  7,  8,  9,  10, 11, 12,
                                         13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24};
    return ids;
}

}  // namespace aulite
