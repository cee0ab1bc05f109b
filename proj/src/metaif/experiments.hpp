#pragma once

// Batch drivers behind the command-line front end: training, attribution,
// editing, oracle comparison, harmful-task scans and removal-effectiveness
// curves. Every driver writes versioned CSV (first line "#schema=<name>")
// and returns a JSON summary.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metaif/bilevel.hpp"
#include "metaif/datasets.hpp"
#include "metaif/influence.hpp"
#include "metaif/oracle.hpp"

namespace metaif {

struct DataConfig {
    std::string source = "synthetic";  // synthetic | csv | bundle
    EpisodeSpec episodes;              // episodes.seed is replaced by the run seed
    std::size_t clusters = 10;
    std::size_t dim = 20;
    double noise = 1.0;
    double separation = 1.0;
    // csv: corpus file; bundle: training-task bundle directory.
    std::filesystem::path path;
    std::string label_column = "label";
    // bundle only: optional evaluation / probe bundles.
    std::filesystem::path heldout_path;
    std::filesystem::path probe_path;
    CorruptionSpec corruption;  // seed is replaced by the run seed
    std::size_t heldout_episodes = 50;
    std::size_t probe_tasks = 10;
};

struct ExperimentConfig {
    Architecture arch{{20, 11, 5}, {Activation::tanh}};
    BilevelConfig bilevel;
    DataConfig data;
    std::uint64_t seed = 1;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    InfluenceOptions influence;
};

// Unknown fields and invalid values raise config errors naming the JSON path.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::string& where = "config");
nlohmann::json experiment_config_to_json(const ExperimentConfig& c);
DataConfig data_config_from_json(const nlohmann::json& j, const std::string& where = "data");
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

InfluenceOptions influence_options_from_json(const nlohmann::json& j, const std::string& where = "influence");
nlohmann::json influence_options_to_json(const InfluenceOptions& o);

// Training tasks (corrupted per config), clean held-out evaluation episodes
// and clean probe tasks. Ids: training 0.., held-out 100000.., probe 200000..
struct TaskSets {
    std::vector<TaskData> train;
    std::vector<TaskData> heldout;
    std::vector<TaskData> probe;
};

TaskSets build_tasks(const DataConfig& d, std::uint64_t seed);

struct TrainRun {
    TaskSets tasks;
    Problem problem;
    Vector lambda0;
    MetaState state;
    double seconds = 0.0;
};

// Throws NonConvergence when the meta problem does not converge.
TrainRun run_training(const ExperimentConfig& cfg, std::uint64_t seed);

// "task:<id>", "train:<id>:<index>", "val:<id>:<index>".
RemovalSpec parse_removal(const std::string& s);
std::string removal_label(const RemovalSpec& r);

// Removes several training tasks / training instances at once.
std::vector<TaskData> remove_tasks(std::span<const TaskData> tasks, const std::vector<int>& ids);
std::vector<TaskData> remove_train_instances(std::span<const TaskData> tasks,
                                             const std::vector<std::pair<int, std::size_t>>& items);

// ---- commands ------------------------------------------------------------

// Writes <out>/checkpoint, <out>/tasks, <out>/heldout, <out>/probe and
// <out>/config.json. A non-converged run still writes its checkpoint before
// throwing NonConvergence.
nlohmann::json cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out);

struct AttributeOptions {
    std::filesystem::path run_dir;  // output of cmd_train
    std::string method = "task_if";  // task_if | direct_if | instance_train | instance_val | inner
    // "all", or comma-separated "<task>" / "<task>:<index>" entries. For
    // instance methods "all" expands every example of every task.
    std::string targets = "all";
    std::optional<InfluenceOptions> influence;  // defaults to the run's config
    std::filesystem::path out;
};

nlohmann::json cmd_attribute(const AttributeOptions& opt);

// λ* with the given influence files applied by their edit signs; writes the
// edited parameters to `out` (MIFP when the run has an architecture).
nlohmann::json cmd_edit(const std::filesystem::path& run_dir, const std::vector<std::filesystem::path>& influences,
                        const std::filesystem::path& out);

struct CompareOptions {
    ExperimentConfig config;
    std::vector<std::string> removals{"task:0"};
    // retrain | original | task_if | direct_if | instance_train | instance_val
    std::vector<std::string> methods{"retrain", "original", "task_if", "direct_if"};
    bool accuracy = true;
    bool warm_start_oracle = false;
    std::filesystem::path out;  // CSV path; empty skips writing
};

nlohmann::json cmd_compare_oracle(const CompareOptions& opt);

struct HarmfulOptions {
    ExperimentConfig config;  // data.corruption must flag at least one task
    std::vector<double> fractions{0.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 1.0};
    int random_draws = 20;
    bool retrain = true;
    std::filesystem::path out;
};

nlohmann::json cmd_harmful_scan(const HarmfulOptions& opt);

struct EffectivenessOptions {
    ExperimentConfig config;
    std::string level = "task";  // task | instance
    std::vector<double> fractions{0.0, 0.1, 0.2, 0.3};
    std::filesystem::path out;
};

nlohmann::json cmd_effectiveness(const EffectivenessOptions& opt);

// Validates a CSV written by any command: schema line, header, column count,
// numeric columns and value ranges. Returns {"schema", "rows"}; throws a
// parse error naming the line on failure.
nlohmann::json cmd_schema_check(const std::filesystem::path& csv);

}  // namespace metaif
