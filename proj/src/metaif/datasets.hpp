#pragma once

// Few-shot task construction: synthetic Gaussian-cluster tasks, CSV corpora
// with N-way K-shot episode sampling, and train-label corruption.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "metaif/bilevel.hpp"

namespace metaif {

struct EpisodeSpec {
    std::size_t n_way = 5;
    std::size_t k_shot = 5;
    std::size_t k_query = 15;
    std::size_t num_tasks = 20;
    std::uint64_t seed = 0;

    void validate() const;
};

struct CorruptionSpec {
    double task_fraction = 0.0;
    double sample_fraction = 0.0;
    std::uint64_t seed = 0;

    void validate() const;
};

// Examples keyed by their original class label.
struct ClassPool {
    std::size_t dim = 0;
    std::map<int, std::vector<Vector>> by_class;

    std::size_t size() const;
};

// Cluster means are drawn once per (seed, clusters, dim) as separation·N(0, I);
// points are mean + noise·N(0, I). Each task picks
// n_way distinct clusters in random order, which defines its label mapping.
// Task ids are 0..num_tasks-1.
std::vector<TaskData> gen_synthetic_tasks(const EpisodeSpec& spec, std::size_t clusters, std::size_t dim, double noise,
                                          double separation = 1.0);

// Header row required. `label_column` names the integer label column; every
// other column must be numeric. Lines starting with '#' are skipped.
ClassPool load_csv_corpus(const std::filesystem::path& path, const std::string& label_column);
void write_csv_corpus(const ClassPool& pool, const std::filesystem::path& path, const std::string& label_column = "label");

std::vector<TaskData> make_episodes(const ClassPool& pool, const EpisodeSpec& spec, int first_id = 0);

// Flags round(task_fraction·n) tasks and flips round(sample_fraction·|train|)
// of their training labels to a uniformly drawn different class.
std::vector<TaskData> corrupt(std::span<const TaskData> tasks, const CorruptionSpec& spec);

// Directory of CSV files plus manifest.json. `meta` is stored verbatim under
// the manifest's "meta" key (a JSON object text, may be empty).
void save_task_bundle(const std::filesystem::path& dir, std::span<const TaskData> tasks, const std::string& meta = "");
std::vector<TaskData> load_task_bundle(const std::filesystem::path& dir, std::string* meta = nullptr);

}  // namespace metaif
