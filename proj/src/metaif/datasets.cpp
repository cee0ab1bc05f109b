#include "metaif/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "metaif/error.hpp"
#include "metaif/random.hpp"

namespace metaif {

using nlohmann::json;

void EpisodeSpec::validate() const {
    if (n_way == 0) fail(ErrorCode::config, "episodes.n_way: must be > 0");
    if (k_shot == 0) fail(ErrorCode::config, "episodes.k_shot: must be > 0");
    if (k_query == 0) fail(ErrorCode::config, "episodes.k_query: must be > 0");
    if (num_tasks == 0) fail(ErrorCode::config, "episodes.num_tasks: must be > 0");
}

void CorruptionSpec::validate() const {
    if (!(task_fraction >= 0.0 && task_fraction <= 1.0))
        fail(ErrorCode::config, "corruption.task_fraction: must be in [0, 1]");
    if (!(sample_fraction >= 0.0 && sample_fraction <= 1.0))
        fail(ErrorCode::config, "corruption.sample_fraction: must be in [0, 1]");
}

std::size_t ClassPool::size() const {
    std::size_t n = 0;
    for (const auto& [label, xs] : by_class) n += xs.size();
    return n;
}

std::vector<TaskData> gen_synthetic_tasks(const EpisodeSpec& spec, std::size_t clusters, std::size_t dim, double noise,
                                          double separation) {
    spec.validate();
    if (dim == 0) fail(ErrorCode::config, "synthetic.dim: must be > 0");
    if (clusters < spec.n_way)
        fail(ErrorCode::config, "synthetic.clusters: " + std::to_string(clusters) + " clusters cannot serve " +
                                    std::to_string(spec.n_way) + "-way tasks");
    if (!(noise >= 0.0) || !(separation > 0.0)) fail(ErrorCode::config, "synthetic: noise must be >= 0, separation > 0");

    Rng mean_rng = Rng::stream(spec.seed, 1);
    std::vector<Vector> means(clusters, Vector(dim));
    for (Vector& m : means)
        for (double& x : m) x = separation * mean_rng.normal();

    std::vector<TaskData> tasks(spec.num_tasks);
    for (std::size_t t = 0; t < spec.num_tasks; ++t) {
        Rng rng = Rng::stream(spec.seed, 1000 + t);
        TaskData& task = tasks[t];
        task.id = static_cast<int>(t);
        const std::vector<std::size_t> chosen = rng.sample_without_replacement(clusters, spec.n_way);
        auto draw = [&](std::size_t cls, int label) {
            Example ex;
            ex.label = label;
            ex.x.resize(dim);
            for (std::size_t d = 0; d < dim; ++d) ex.x[d] = means[cls][d] + noise * rng.normal();
            return ex;
        };
        for (std::size_t c = 0; c < spec.n_way; ++c)
            for (std::size_t k = 0; k < spec.k_shot; ++k) task.train.push_back(draw(chosen[c], static_cast<int>(c)));
        for (std::size_t c = 0; c < spec.n_way; ++c)
            for (std::size_t k = 0; k < spec.k_query; ++k) task.val.push_back(draw(chosen[c], static_cast<int>(c)));
    }
    return tasks;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(line);
    while (std::getline(ss, cur, ',')) {
        const auto b = cur.find_first_not_of(" \t\r");
        const auto e = cur.find_last_not_of(" \t\r");
        out.push_back(b == std::string::npos ? "" : cur.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_number(const std::string& s, const std::filesystem::path& path, std::size_t line, const std::string& col) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size() || !std::isfinite(v))
        fail(ErrorCode::parse, path.string() + ":" + std::to_string(line) + ": column '" + col +
                                   "' is not a finite number: '" + s + "'");
    return v;
}

int parse_label(const std::string& s, const std::filesystem::path& path, std::size_t line) {
    const double v = parse_number(s, path, line, "label");
    if (v != std::floor(v) || std::abs(v) > 1e9)
        fail(ErrorCode::parse, path.string() + ":" + std::to_string(line) + ": label '" + s + "' is not an integer");
    return static_cast<int>(v);
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;  // (line number, cells)
};

CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::io, "cannot open " + path.string());
    CsvTable t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cells = split_csv(line);
        if (t.header.empty()) {
            t.header = std::move(cells);
            continue;
        }
        if (cells.size() != t.header.size())
            fail(ErrorCode::parse, path.string() + ":" + std::to_string(lineno) + ": expected " +
                                       std::to_string(t.header.size()) + " columns, found " +
                                       std::to_string(cells.size()));
        t.rows.emplace_back(lineno, std::move(cells));
    }
    if (t.header.empty()) fail(ErrorCode::parse, path.string() + ": empty file (no header row)");
    return t;
}

std::vector<Example> read_examples(const std::filesystem::path& path) {
    const CsvTable t = read_csv(path);
    if (t.header.empty() || t.header[0] != "label")
        fail(ErrorCode::parse, path.string() + ": first column must be 'label'");
    std::vector<Example> out;
    for (const auto& [lineno, cells] : t.rows) {
        Example ex;
        ex.label = parse_label(cells[0], path, lineno);
        for (std::size_t c = 1; c < cells.size(); ++c) ex.x.push_back(parse_number(cells[c], path, lineno, t.header[c]));
        out.push_back(std::move(ex));
    }
    return out;
}

void write_examples(const std::filesystem::path& path, std::span<const Example> xs) {
    std::ofstream out(path);
    if (!out) fail(ErrorCode::io, "cannot write " + path.string());
    out.precision(17);
    const std::size_t dim = xs.empty() ? 0 : xs.front().x.size();
    out << "label";
    for (std::size_t d = 0; d < dim; ++d) out << ",x" << d;
    out << '\n';
    for (const Example& ex : xs) {
        out << ex.label;
        for (double v : ex.x) out << ',' << v;
        out << '\n';
    }
    if (!out) fail(ErrorCode::io, "write failed for " + path.string());
}

}  // namespace

ClassPool load_csv_corpus(const std::filesystem::path& path, const std::string& label_column) {
    const CsvTable t = read_csv(path);
    const auto it = std::find(t.header.begin(), t.header.end(), label_column);
    if (it == t.header.end()) fail(ErrorCode::parse, path.string() + ": missing label column '" + label_column + "'");
    const std::size_t lc = static_cast<std::size_t>(it - t.header.begin());
    if (t.rows.empty()) fail(ErrorCode::parse, path.string() + ": no data rows");
    ClassPool pool;
    pool.dim = t.header.size() - 1;
    for (const auto& [lineno, cells] : t.rows) {
        Vector x;
        x.reserve(pool.dim);
        for (std::size_t c = 0; c < cells.size(); ++c)
            if (c != lc) x.push_back(parse_number(cells[c], path, lineno, t.header[c]));
        pool.by_class[parse_label(cells[lc], path, lineno)].push_back(std::move(x));
    }
    return pool;
}

void write_csv_corpus(const ClassPool& pool, const std::filesystem::path& path, const std::string& label_column) {
    std::ofstream out(path);
    if (!out) fail(ErrorCode::io, "cannot write " + path.string());
    out.precision(17);
    for (std::size_t d = 0; d < pool.dim; ++d) out << 'f' << d << ',';
    out << label_column << '\n';
    for (const auto& [label, xs] : pool.by_class)
        for (const Vector& x : xs) {
            for (double v : x) out << v << ',';
            out << label << '\n';
        }
    if (!out) fail(ErrorCode::io, "write failed for " + path.string());
}

std::vector<TaskData> make_episodes(const ClassPool& pool, const EpisodeSpec& spec, int first_id) {
    spec.validate();
    if (pool.by_class.size() < spec.n_way)
        fail(ErrorCode::invalid_argument, "make_episodes: pool has " + std::to_string(pool.by_class.size()) +
                                              " classes, need " + std::to_string(spec.n_way));
    std::vector<int> labels;
    for (const auto& [label, xs] : pool.by_class) {
        if (xs.size() < spec.k_shot + spec.k_query)
            fail(ErrorCode::invalid_argument, "make_episodes: class " + std::to_string(label) + " has " +
                                                  std::to_string(xs.size()) + " examples, need " +
                                                  std::to_string(spec.k_shot + spec.k_query));
        labels.push_back(label);
    }
    std::vector<TaskData> tasks(spec.num_tasks);
    for (std::size_t t = 0; t < spec.num_tasks; ++t) {
        Rng rng = Rng::stream(spec.seed, 50000 + t);
        TaskData& task = tasks[t];
        task.id = first_id + static_cast<int>(t);
        const std::vector<std::size_t> chosen = rng.sample_without_replacement(labels.size(), spec.n_way);
        std::vector<std::vector<std::size_t>> picks;
        for (std::size_t c = 0; c < spec.n_way; ++c) {
            const auto& xs = pool.by_class.at(labels[chosen[c]]);
            picks.push_back(rng.sample_without_replacement(xs.size(), spec.k_shot + spec.k_query));
        }
        for (std::size_t c = 0; c < spec.n_way; ++c) {
            const auto& xs = pool.by_class.at(labels[chosen[c]]);
            for (std::size_t k = 0; k < spec.k_shot; ++k)
                task.train.push_back({xs[picks[c][k]], static_cast<int>(c), {}});
        }
        for (std::size_t c = 0; c < spec.n_way; ++c) {
            const auto& xs = pool.by_class.at(labels[chosen[c]]);
            for (std::size_t k = spec.k_shot; k < spec.k_shot + spec.k_query; ++k)
                task.val.push_back({xs[picks[c][k]], static_cast<int>(c), {}});
        }
    }
    return tasks;
}

std::vector<TaskData> corrupt(std::span<const TaskData> tasks, const CorruptionSpec& spec) {
    spec.validate();
    std::vector<TaskData> out(tasks.begin(), tasks.end());
    const std::size_t n = out.size();
    const std::size_t k = static_cast<std::size_t>(std::llround(spec.task_fraction * static_cast<double>(n)));
    if (k == 0) return out;
    Rng pick_rng = Rng::stream(spec.seed, 7);
    std::vector<std::size_t> chosen = pick_rng.sample_without_replacement(n, k);
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t idx : chosen) {
        TaskData& t = out[idx];
        int classes = 0;
        for (const Example& ex : t.train) classes = std::max(classes, ex.label + 1);
        for (const Example& ex : t.val) classes = std::max(classes, ex.label + 1);
        if (classes < 2)
            fail(ErrorCode::invalid_argument, "corrupt: task " + std::to_string(t.id) + " has fewer than 2 classes");
        Rng rng = Rng::stream(spec.seed, 100 + static_cast<std::uint64_t>(t.id));
        const std::size_t m =
            static_cast<std::size_t>(std::llround(spec.sample_fraction * static_cast<double>(t.train.size())));
        for (std::size_t j : rng.sample_without_replacement(t.train.size(), m)) {
            const int old = t.train[j].label;
            int nl = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes - 1)));
            if (nl >= old) ++nl;
            t.train[j].label = nl;
        }
        t.corrupted = true;
    }
    return out;
}

void save_task_bundle(const std::filesystem::path& dir, std::span<const TaskData> tasks, const std::string& meta) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorCode::io, "cannot create " + dir.string() + ": " + ec.message());
    json manifest;
    manifest["format"] = "metaif-task-bundle";
    manifest["version"] = 1;
    manifest["meta"] = meta.empty() ? json::object() : json::parse(meta);
    json arr = json::array();
    for (const TaskData& t : tasks) {
        const std::string tr = "task_" + std::to_string(t.id) + "_train.csv";
        const std::string va = "task_" + std::to_string(t.id) + "_val.csv";
        write_examples(dir / tr, t.train);
        write_examples(dir / va, t.val);
        arr.push_back({{"id", t.id}, {"train", tr}, {"val", va}, {"corrupted", t.corrupted}});
    }
    manifest["tasks"] = std::move(arr);
    std::ofstream out(dir / "manifest.json");
    if (!out) fail(ErrorCode::io, "cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
}

std::vector<TaskData> load_task_bundle(const std::filesystem::path& dir, std::string* meta) {
    const auto mpath = dir / "manifest.json";
    std::ifstream in(mpath);
    if (!in) fail(ErrorCode::io, "cannot open " + mpath.string());
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        fail(ErrorCode::parse, mpath.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "metaif-task-bundle")
        fail(ErrorCode::parse, mpath.string() + ": not a task bundle manifest");
    if (meta) *meta = manifest.contains("meta") ? manifest["meta"].dump() : "{}";
    std::vector<TaskData> tasks;
    try {
        for (const json& j : manifest.at("tasks")) {
            TaskData t;
            t.id = j.at("id").get<int>();
            t.corrupted = j.value("corrupted", false);
            t.train = read_examples(dir / j.at("train").get<std::string>());
            t.val = read_examples(dir / j.at("val").get<std::string>());
            tasks.push_back(std::move(t));
        }
    } catch (const json::exception& e) {
        fail(ErrorCode::parse, mpath.string() + ": " + e.what());
    }
    return tasks;
}

}  // namespace metaif
