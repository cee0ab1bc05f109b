#pragma once

// Retraining oracle: recompute λ* (or one θ_k) with a task or an example
// removed. Ground truth for every influence estimator.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metaif/bilevel.hpp"

namespace metaif {

enum class RemovalKind { task, train_instance, val_instance };

const char* removal_kind_name(RemovalKind k);
RemovalKind parse_removal_kind(const std::string& s);

struct RemovalSpec {
    RemovalKind kind = RemovalKind::task;
    int task_id = 0;
    std::size_t example_index = 0;
};

// Copy of `tasks` with the removal applied. Throws invalid_argument when the
// target does not exist or when the removal would leave an empty split or no
// task at all.
std::vector<TaskData> apply_removal(std::span<const TaskData> tasks, const RemovalSpec& removal);

struct RetrainOptions {
    // Start from the given λ instead of the seeded initialization. Biases the
    // result toward the influence prediction; flagged in the outcome.
    const Vector* warm_start = nullptr;
};

struct RetrainResult {
    TrainOutcome outcome;
    bool warm_started = false;
    double seconds = 0.0;  // wall time of the training call only
};

// Full retraining on the reduced dataset from λ0 (normally the same seeded
// initialization as the original run).
RetrainResult retrain_without(std::span<const TaskData> tasks, const RemovalSpec& removal, const BilevelConfig& cfg,
                              const Problem& pb, const Vector& lambda0, std::uint64_t seed,
                              const RetrainOptions& opt = {});
// MLP/cross-entropy form: λ0 = init_params(arch, seed).
RetrainResult retrain_without(std::span<const TaskData> tasks, const RemovalSpec& removal, const BilevelConfig& cfg,
                              const Architecture& arch, std::uint64_t seed, const RetrainOptions& opt = {});

// θ_k⁻ = argmin_θ L_I(λ*, θ; D_k^tr \ z̃), solved from λ* like the original.
InnerSolution retrain_inner_without(const MetaState& state, const Problem& pb, std::span<const TaskData> tasks,
                                    int task_id, std::size_t example_index);

}  // namespace metaif
