#include "metaif/oracle.hpp"

#include <algorithm>
#include <chrono>

#include "metaif/error.hpp"

namespace metaif {

const char* removal_kind_name(RemovalKind k) {
    switch (k) {
        case RemovalKind::task: return "task";
        case RemovalKind::train_instance: return "train_instance";
        case RemovalKind::val_instance: return "val_instance";
    }
    return "unknown";
}

RemovalKind parse_removal_kind(const std::string& s) {
    if (s == "task") return RemovalKind::task;
    if (s == "train_instance") return RemovalKind::train_instance;
    if (s == "val_instance") return RemovalKind::val_instance;
    fail(ErrorCode::parse, "unknown removal kind '" + s + "'");
}

std::vector<TaskData> apply_removal(std::span<const TaskData> tasks, const RemovalSpec& removal) {
    std::vector<TaskData> out(tasks.begin(), tasks.end());
    auto it = std::find_if(out.begin(), out.end(), [&](const TaskData& t) { return t.id == removal.task_id; });
    if (it == out.end()) fail(ErrorCode::invalid_argument, "removal: unknown task id " + std::to_string(removal.task_id));
    switch (removal.kind) {
        case RemovalKind::task:
            if (out.size() < 2) fail(ErrorCode::invalid_argument, "removal: at least one task must remain");
            out.erase(it);
            break;
        case RemovalKind::train_instance:
        case RemovalKind::val_instance: {
            auto& set = removal.kind == RemovalKind::train_instance ? it->train : it->val;
            if (removal.example_index >= set.size())
                fail(ErrorCode::invalid_argument, "removal: example index " + std::to_string(removal.example_index) +
                                                      " out of range for task " + std::to_string(removal.task_id));
            if (set.size() < 2) fail(ErrorCode::invalid_argument, "removal: split would become empty");
            set.erase(set.begin() + static_cast<std::ptrdiff_t>(removal.example_index));
            break;
        }
    }
    return out;
}

RetrainResult retrain_without(std::span<const TaskData> tasks, const RemovalSpec& removal, const BilevelConfig& cfg,
                              const Problem& pb, const Vector& lambda0, std::uint64_t seed, const RetrainOptions& opt) {
    const std::vector<TaskData> reduced = apply_removal(tasks, removal);
    const Vector& start = opt.warm_start ? *opt.warm_start : lambda0;
    const auto t0 = std::chrono::steady_clock::now();
    TrainOutcome outcome = train_meta(reduced, cfg, pb, start, seed);
    const auto t1 = std::chrono::steady_clock::now();
    return {std::move(outcome), opt.warm_start != nullptr, std::chrono::duration<double>(t1 - t0).count()};
}

RetrainResult retrain_without(std::span<const TaskData> tasks, const RemovalSpec& removal, const BilevelConfig& cfg,
                              const Architecture& arch, std::uint64_t seed, const RetrainOptions& opt) {
    return retrain_without(tasks, removal, cfg, Problem::mlp(arch, LossKind::cross_entropy),
                           init_params(arch, seed).values, seed, opt);
}

InnerSolution retrain_inner_without(const MetaState& state, const Problem& pb, std::span<const TaskData> tasks,
                                    int task_id, std::size_t example_index) {
    const std::vector<TaskData> reduced =
        apply_removal(tasks, {RemovalKind::train_instance, task_id, example_index});
    auto it = std::find_if(reduced.begin(), reduced.end(), [&](const TaskData& t) { return t.id == task_id; });
    return solve_inner(pb, state.lambda_star, *it, state.config);
}

}  // namespace metaif
