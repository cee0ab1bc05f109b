#include "metaif/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "metaif/error.hpp"
#include "metaif/json_util.hpp"
#include "metaif/parallel.hpp"
#include "metaif/random.hpp"
#include "metaif/serialize.hpp"

namespace metaif {

using json = nlohmann::json;
using jsonu::get_field;
using jsonu::reject_unknown;
using jsonu::require_object;
namespace fs = std::filesystem;

namespace {

constexpr int kHeldoutIdBase = 100000;
constexpr int kProbeIdBase = 200000;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <class Parse>
auto parse_enum(const json& j, const std::string& key, const std::string& where, const std::string& fallback,
                Parse parse) {
    const std::string s = get_field<std::string>(j, key, where, fallback);
    try {
        return parse(s);
    } catch (const Error& e) {
        fail(ErrorCode::config, where + "." + key + ": " + e.what());
    }
}

EpisodeSpec episodes_from_json(const json& j, const std::string& where) {
    require_object(j, where);
    reject_unknown(j, where, {"n_way", "k_shot", "k_query", "num_tasks"});
    EpisodeSpec e;
    e.n_way = get_field(j, "n_way", where, e.n_way);
    e.k_shot = get_field(j, "k_shot", where, e.k_shot);
    e.k_query = get_field(j, "k_query", where, e.k_query);
    e.num_tasks = get_field(j, "num_tasks", where, e.num_tasks);
    try {
        e.validate();
    } catch (const Error& err) {
        fail(ErrorCode::config, where + ": " + err.what());
    }
    return e;
}

}  // namespace

DataConfig data_config_from_json(const json& j, const std::string& where) {
    require_object(j, where);
    reject_unknown(j, where,
                   {"source", "episodes", "clusters", "dim", "noise", "separation", "path", "label_column",
                    "heldout_path", "probe_path", "corruption", "heldout_episodes", "probe_tasks"});
    DataConfig d;
    d.source = get_field<std::string>(j, "source", where, d.source);
    if (d.source != "synthetic" && d.source != "csv" && d.source != "bundle")
        fail(ErrorCode::config, where + ".source: expected synthetic, csv or bundle");
    if (j.contains("episodes")) d.episodes = episodes_from_json(j["episodes"], where + ".episodes");
    d.clusters = get_field(j, "clusters", where, d.clusters);
    d.dim = get_field(j, "dim", where, d.dim);
    d.noise = get_field(j, "noise", where, d.noise);
    d.separation = get_field(j, "separation", where, d.separation);
    d.path = get_field<std::string>(j, "path", where, "");
    d.label_column = get_field<std::string>(j, "label_column", where, d.label_column);
    d.heldout_path = get_field<std::string>(j, "heldout_path", where, "");
    d.probe_path = get_field<std::string>(j, "probe_path", where, "");
    if (j.contains("corruption")) {
        const json& c = j["corruption"];
        const std::string w = where + ".corruption";
        require_object(c, w);
        reject_unknown(c, w, {"task_fraction", "sample_fraction"});
        d.corruption.task_fraction = get_field(c, "task_fraction", w, 0.0);
        d.corruption.sample_fraction = get_field(c, "sample_fraction", w, 0.0);
        try {
            d.corruption.validate();
        } catch (const Error& e) {
            fail(ErrorCode::config, w + ": " + e.what());
        }
    }
    d.heldout_episodes = get_field(j, "heldout_episodes", where, d.heldout_episodes);
    d.probe_tasks = get_field(j, "probe_tasks", where, d.probe_tasks);
    if (d.source == "synthetic") {
        if (d.dim == 0) fail(ErrorCode::config, where + ".dim: must be > 0");
        if (d.clusters < d.episodes.n_way) fail(ErrorCode::config, where + ".clusters: fewer than n_way");
        if (!(d.noise >= 0.0)) fail(ErrorCode::config, where + ".noise: must be >= 0");
        if (!(d.separation > 0.0)) fail(ErrorCode::config, where + ".separation: must be > 0");
    } else if (d.path.empty()) {
        fail(ErrorCode::config, where + ".path: required for source '" + d.source + "'");
    }
    return d;
}

namespace {

json data_to_json(const DataConfig& d) {
    json j = {{"source", d.source},
              {"episodes",
               {{"n_way", d.episodes.n_way},
                {"k_shot", d.episodes.k_shot},
                {"k_query", d.episodes.k_query},
                {"num_tasks", d.episodes.num_tasks}}},
              {"clusters", d.clusters},
              {"dim", d.dim},
              {"noise", d.noise},
              {"separation", d.separation},
              {"corruption",
               {{"task_fraction", d.corruption.task_fraction}, {"sample_fraction", d.corruption.sample_fraction}}},
              {"heldout_episodes", d.heldout_episodes},
              {"probe_tasks", d.probe_tasks}};
    if (!d.path.empty()) j["path"] = d.path.string();
    if (d.source == "csv") j["label_column"] = d.label_column;
    if (!d.heldout_path.empty()) j["heldout_path"] = d.heldout_path.string();
    if (!d.probe_path.empty()) j["probe_path"] = d.probe_path.string();
    return j;
}

void renumber(std::vector<TaskData>& tasks, int base) {
    for (std::size_t i = 0; i < tasks.size(); ++i) tasks[i].id = base + static_cast<int>(i);
}

// ---- CSV output ----------------------------------------------------------

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

class CsvTable {
public:
    CsvTable(std::string schema, std::vector<std::string> columns)
        : schema_(std::move(schema)), columns_(std::move(columns)) {}

    void add(std::vector<std::string> row) {
        if (row.size() != columns_.size()) fail(ErrorCode::dimension, "csv row width mismatch in " + schema_);
        rows_.push_back(std::move(row));
    }
    std::size_t rows() const { return rows_.size(); }

    void write(const fs::path& path) const {
        if (path.empty()) return;
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        std::ofstream out(path);
        if (!out) fail(ErrorCode::io, "cannot write " + path.string());
        out << "#schema=" << schema_ << "\n";
        for (std::size_t c = 0; c < columns_.size(); ++c) out << (c ? "," : "") << columns_[c];
        out << "\n";
        for (const auto& r : rows_) {
            for (std::size_t c = 0; c < r.size(); ++c) out << (c ? "," : "") << r[c];
            out << "\n";
        }
        if (!out) fail(ErrorCode::io, "write failed for " + path.string());
    }

private:
    std::string schema_;
    std::vector<std::string> columns_;
    std::vector<std::vector<std::string>> rows_;
};

// Free-text cells: commas and newlines would break the format.
std::string sanitize(std::string s) {
    for (char& c : s)
        if (c == ',' || c == '\n' || c == '\r') c = ';';
    return s;
}

enum class ColKind { text, integer, real, unit, nonneg };

struct SchemaDef {
    const char* name;
    std::vector<std::pair<const char*, ColKind>> columns;
};

const std::vector<SchemaDef>& schemas() {
    static const std::vector<SchemaDef> defs = {
        {"metaif.attribute.v1",
         {{"task_id", ColKind::integer},
          {"example_index", ColKind::integer},
          {"method", ColKind::text},
          {"backend", ColKind::text},
          {"delta_norm", ColKind::nonneg},
          {"edit_sign", ColKind::integer},
          {"runtime_s", ColKind::nonneg},
          {"status", ColKind::text},
          {"file", ColKind::text},
          {"message", ColKind::text}}},
        {"metaif.compare.v1",
         {{"seed", ColKind::integer},
          {"removal", ColKind::text},
          {"method", ColKind::text},
          {"accuracy", ColKind::unit},
          {"runtime_s", ColKind::nonneg},
          {"l2_to_oracle", ColKind::nonneg},
          {"cosine_to_oracle", ColKind::real},
          {"l2_lambda_to_oracle", ColKind::nonneg},
          {"delta_norm", ColKind::nonneg},
          {"status", ColKind::text},
          {"message", ColKind::text}}},
        {"metaif.harmful.v1",
         {{"seed", ColKind::integer},
          {"arm", ColKind::text},
          {"fraction_checked", ColKind::unit},
          {"checked", ColKind::integer},
          {"corrupted_found", ColKind::nonneg},
          {"fraction_found", ColKind::unit},
          {"test_accuracy", ColKind::unit}}},
        {"metaif.effectiveness.v1",
         {{"seed", ColKind::integer},
          {"level", ColKind::text},
          {"arm", ColKind::text},
          {"fraction", ColKind::unit},
          {"removed", ColKind::integer},
          {"test_accuracy", ColKind::unit},
          {"runtime_s", ColKind::nonneg}}},
    };
    return defs;
}

CsvTable make_table(const std::string& schema) {
    for (const SchemaDef& d : schemas()) {
        if (schema == d.name) {
            std::vector<std::string> cols;
            for (const auto& [c, k] : d.columns) cols.emplace_back(c);
            return CsvTable(schema, std::move(cols));
        }
    }
    fail(ErrorCode::invalid_argument, "unknown schema " + schema);
}

// ---- helpers -------------------------------------------------------------

// Estimators only make sense for their own removal kind.
bool method_applies(const std::string& method, RemovalKind kind) {
    if (method == "task_if" || method == "direct_if") return kind == RemovalKind::task;
    if (method == "instance_train") return kind == RemovalKind::train_instance;
    if (method == "instance_val") return kind == RemovalKind::val_instance;
    return true;
}

Vector delta_for(const InfluenceAnalyzer& an, const std::string& method, const RemovalSpec& r) {
    InfluenceVector inf;
    if (method == "task_if") {
        if (r.kind != RemovalKind::task) fail(ErrorCode::invalid_argument, "task_if needs a task removal");
        inf = an.task_if(r.task_id);
    } else if (method == "direct_if") {
        if (r.kind != RemovalKind::task) fail(ErrorCode::invalid_argument, "direct_if needs a task removal");
        inf = an.direct_if(r.task_id);
    } else if (method == "instance_train") {
        if (r.kind != RemovalKind::train_instance)
            fail(ErrorCode::invalid_argument, "instance_train needs a train removal");
        inf = an.instance_if_train(r.task_id, r.example_index);
    } else if (method == "instance_val") {
        if (r.kind != RemovalKind::val_instance) fail(ErrorCode::invalid_argument, "instance_val needs a val removal");
        inf = an.instance_if_val(r.task_id, r.example_index);
    } else {
        fail(ErrorCode::config, "unknown method '" + method + "'");
    }
    // Edited model: λ* + sign·delta.
    return scaled(inf.delta, static_cast<double>(inf.edit_sign));
}

std::vector<std::size_t> top_k(const std::vector<double>& scores, std::size_t k, bool descending) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return descending ? scores[a] > scores[b] : scores[a] < scores[b];
    });
    order.resize(std::min(k, order.size()));
    return order;
}

std::size_t count_for(double fraction, std::size_t n) {
    return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
}

void check_fractions(const std::vector<double>& fr, const char* what) {
    for (double f : fr)
        if (!(f >= 0.0 && f <= 1.0)) fail(ErrorCode::config, std::string(what) + ": fractions must be in [0, 1]");
}

double accuracy_or_nan(const TrainRun& run, std::span<const double> lambda) {
    if (run.tasks.heldout.empty()) return std::nan("");
    return adapted_accuracy(run.problem, lambda, run.tasks.heldout, run.state.config);
}

json load_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) fail(ErrorCode::io, "cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        fail(ErrorCode::parse, p.string() + ": " + e.what());
    }
}

void write_json_file(const fs::path& p, const json& j) {
    std::ofstream out(p);
    if (!out) fail(ErrorCode::io, "cannot write " + p.string());
    out << j.dump(2) << "\n";
}

struct LoadedRun {
    ExperimentConfig config;
    Checkpoint checkpoint;
    std::vector<TaskData> tasks;
    Problem problem;
};

LoadedRun load_run(const fs::path& dir) {
    LoadedRun r;
    r.config = experiment_config_from_json(load_json_file(dir / "config.json"));
    r.checkpoint = load_checkpoint(dir / "checkpoint");
    if (!r.checkpoint.arch) fail(ErrorCode::parse, (dir / "checkpoint").string() + ": missing architecture");
    r.tasks = load_task_bundle(dir / "tasks");
    r.problem = Problem::mlp(*r.checkpoint.arch);
    return r;
}

}  // namespace

// ---- configuration -------------------------------------------------------

InfluenceOptions influence_options_from_json(const json& j, const std::string& where) {
    require_object(j, where);
    reject_unknown(j, where,
                   {"backend", "hessian_mode", "cross_term", "extra_damping", "fd_step", "neumann", "ekfac",
                    "task_fraction", "sample_seed", "materialize_outer", "train_edit_sign"});
    InfluenceOptions o;
    o.backend = parse_enum(j, "backend", where, backend_name(o.backend), parse_backend);
    o.hessian.mode = parse_enum(j, "hessian_mode", where, hessian_mode_name(o.hessian.mode), parse_hessian_mode);
    o.hessian.cross_term = get_field(j, "cross_term", where, o.hessian.cross_term);
    o.hessian.extra_damping = get_field(j, "extra_damping", where, o.hessian.extra_damping);
    if (!(o.hessian.extra_damping >= 0.0)) fail(ErrorCode::config, where + ".extra_damping: must be >= 0");
    o.hessian.fd_step = get_field(j, "fd_step", where, o.hessian.fd_step);
    if (!(o.hessian.fd_step > 0.0)) fail(ErrorCode::config, where + ".fd_step: must be > 0");
    if (j.contains("neumann")) {
        const json& n = j["neumann"];
        const std::string w = where + ".neumann";
        require_object(n, w);
        reject_unknown(n, w, {"scale", "max_terms", "stop_tol", "power_iters"});
        o.neumann.scale = get_field(n, "scale", w, o.neumann.scale);
        o.neumann.max_terms = get_field(n, "max_terms", w, o.neumann.max_terms);
        o.neumann.stop_tol = get_field(n, "stop_tol", w, o.neumann.stop_tol);
        o.neumann.power_iters = get_field(n, "power_iters", w, o.neumann.power_iters);
        try {
            o.neumann.validate();
        } catch (const Error& e) {
            fail(ErrorCode::config, w + ": " + e.what());
        }
    }
    if (j.contains("ekfac")) {
        const json& e = j["ekfac"];
        const std::string w = where + ".ekfac";
        require_object(e, w);
        reject_unknown(e, w, {"corrected"});
        o.ekfac.corrected = get_field(e, "corrected", w, o.ekfac.corrected);
    }
    o.task_fraction = get_field(j, "task_fraction", where, o.task_fraction);
    if (!(o.task_fraction > 0.0 && o.task_fraction <= 1.0))
        fail(ErrorCode::config, where + ".task_fraction: must be in (0, 1]");
    o.sample_seed = get_field(j, "sample_seed", where, o.sample_seed);
    o.materialize_outer = get_field(j, "materialize_outer", where, o.materialize_outer);
    o.train_edit_sign = get_field(j, "train_edit_sign", where, o.train_edit_sign);
    if (o.train_edit_sign < -1 || o.train_edit_sign > 1)
        fail(ErrorCode::config, where + ".train_edit_sign: must be -1, 0 or +1");
    return o;
}

json influence_options_to_json(const InfluenceOptions& o) {
    return {{"backend", backend_name(o.backend)},
            {"hessian_mode", hessian_mode_name(o.hessian.mode)},
            {"cross_term", o.hessian.cross_term},
            {"extra_damping", o.hessian.extra_damping},
            {"fd_step", o.hessian.fd_step},
            {"neumann",
             {{"scale", o.neumann.scale},
              {"max_terms", o.neumann.max_terms},
              {"stop_tol", o.neumann.stop_tol},
              {"power_iters", o.neumann.power_iters}}},
            {"ekfac", {{"corrected", o.ekfac.corrected}}},
            {"task_fraction", o.task_fraction},
            {"sample_seed", o.sample_seed},
            {"materialize_outer", o.materialize_outer},
            {"train_edit_sign", o.train_edit_sign}};
}

ExperimentConfig experiment_config_from_json(const json& j, const std::string& where) {
    require_object(j, where);
    reject_unknown(j, where, {"architecture", "bilevel", "data", "seed", "seeds", "influence"});
    ExperimentConfig c;
    if (j.contains("architecture")) {
        try {
            c.arch = architecture_from_json(j["architecture"], where + ".architecture");
        } catch (const Error& e) {
            if (e.code() == ErrorCode::config) throw;
            fail(ErrorCode::config, e.what());
        }
    }
    if (j.contains("bilevel")) c.bilevel = bilevel_config_from_json(j["bilevel"], where + ".bilevel");
    if (j.contains("data")) c.data = data_config_from_json(j["data"], where + ".data");
    c.seed = get_field(j, "seed", where, c.seed);
    c.seeds = get_field(j, "seeds", where, c.seeds);
    if (c.seeds.empty()) fail(ErrorCode::config, where + ".seeds: must not be empty");
    if (j.contains("influence")) c.influence = influence_options_from_json(j["influence"], where + ".influence");
    if (c.data.source == "synthetic" && c.arch.layer_sizes().front() != c.data.dim)
        fail(ErrorCode::config, where + ".architecture.layer_sizes: input size " +
                                    std::to_string(c.arch.layer_sizes().front()) + " does not match data.dim " +
                                    std::to_string(c.data.dim));
    if (c.arch.layer_sizes().back() != c.data.episodes.n_way)
        fail(ErrorCode::config, where + ".architecture.layer_sizes: output size must equal data.episodes.n_way");
    return c;
}

json experiment_config_to_json(const ExperimentConfig& c) {
    return {{"architecture", architecture_to_json(c.arch)},
            {"bilevel", bilevel_config_to_json(c.bilevel)},
            {"data", data_to_json(c.data)},
            {"seed", c.seed},
            {"seeds", c.seeds},
            {"influence", influence_options_to_json(c.influence)}};
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    return experiment_config_from_json(load_json_file(path));
}

// ---- data ----------------------------------------------------------------

TaskSets build_tasks(const DataConfig& d, std::uint64_t seed) {
    TaskSets out;
    const std::size_t n = d.episodes.num_tasks;
    if (d.source == "synthetic") {
        EpisodeSpec all = d.episodes;
        all.seed = seed;
        all.num_tasks = n + d.heldout_episodes + d.probe_tasks;
        std::vector<TaskData> tasks = gen_synthetic_tasks(all, d.clusters, d.dim, d.noise, d.separation);
        out.train.assign(tasks.begin(), tasks.begin() + static_cast<std::ptrdiff_t>(n));
        out.heldout.assign(tasks.begin() + static_cast<std::ptrdiff_t>(n),
                           tasks.begin() + static_cast<std::ptrdiff_t>(n + d.heldout_episodes));
        out.probe.assign(tasks.begin() + static_cast<std::ptrdiff_t>(n + d.heldout_episodes), tasks.end());
    } else if (d.source == "csv") {
        const ClassPool pool = load_csv_corpus(d.path, d.label_column);
        EpisodeSpec spec = d.episodes;
        spec.seed = seed;
        out.train = make_episodes(pool, spec);
        if (d.heldout_episodes > 0) {
            spec.num_tasks = d.heldout_episodes;
            spec.seed = Rng::stream(seed, 0x4E1D).below(1u << 30);
            out.heldout = make_episodes(pool, spec);
        }
        if (d.probe_tasks > 0) {
            spec.num_tasks = d.probe_tasks;
            spec.seed = Rng::stream(seed, 0x960B).below(1u << 30);
            out.probe = make_episodes(pool, spec);
        }
    } else {
        out.train = load_task_bundle(d.path);
        if (!d.heldout_path.empty()) out.heldout = load_task_bundle(d.heldout_path);
        if (!d.probe_path.empty()) out.probe = load_task_bundle(d.probe_path);
        // Bundles keep their ids and corruption flags.
        return out;
    }
    renumber(out.train, 0);
    renumber(out.heldout, kHeldoutIdBase);
    renumber(out.probe, kProbeIdBase);
    if (d.corruption.task_fraction > 0.0) {
        CorruptionSpec cs = d.corruption;
        cs.seed = seed;
        out.train = corrupt(out.train, cs);
    }
    return out;
}

TrainRun run_training(const ExperimentConfig& cfg, std::uint64_t seed) {
    TrainRun run;
    run.tasks = build_tasks(cfg.data, seed);
    run.problem = Problem::mlp(cfg.arch);
    run.lambda0 = init_params(cfg.arch, seed).values;
    const auto t0 = std::chrono::steady_clock::now();
    TrainOutcome out = train_meta(run.tasks.train, cfg.bilevel, run.problem, run.lambda0, seed);
    run.seconds = seconds_since(t0);
    if (!out.converged())
        throw NonConvergence("meta training did not converge (seed " + std::to_string(seed) + ", total gradient norm " +
                                 fmt(out.unconverged().outer_grad_norm) + ")",
                             out.unconverged().outer_grad_norm);
    run.state = out.take();
    return run;
}

RemovalSpec parse_removal(const std::string& s) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    auto num = [&](const std::string& t) -> long {
        try {
            std::size_t used = 0;
            const long v = std::stol(t, &used);
            if (used != t.size()) throw std::invalid_argument(t);
            return v;
        } catch (const std::exception&) {
            fail(ErrorCode::config, "removal '" + s + "': '" + t + "' is not an integer");
        }
    };
    RemovalSpec r;
    if (parts.size() == 2 && parts[0] == "task") {
        r.kind = RemovalKind::task;
        r.task_id = static_cast<int>(num(parts[1]));
        return r;
    }
    if (parts.size() == 3 && (parts[0] == "train" || parts[0] == "val")) {
        r.kind = parts[0] == "train" ? RemovalKind::train_instance : RemovalKind::val_instance;
        r.task_id = static_cast<int>(num(parts[1]));
        const long ex = num(parts[2]);
        if (ex < 0) fail(ErrorCode::config, "removal '" + s + "': negative example index");
        r.example_index = static_cast<std::size_t>(ex);
        return r;
    }
    fail(ErrorCode::config, "removal '" + s + "': expected task:<id>, train:<id>:<i> or val:<id>:<i>");
}

std::string removal_label(const RemovalSpec& r) {
    switch (r.kind) {
        case RemovalKind::task: return "task:" + std::to_string(r.task_id);
        case RemovalKind::train_instance:
            return "train:" + std::to_string(r.task_id) + ":" + std::to_string(r.example_index);
        case RemovalKind::val_instance:
            return "val:" + std::to_string(r.task_id) + ":" + std::to_string(r.example_index);
    }
    return "?";
}

std::vector<TaskData> remove_tasks(std::span<const TaskData> tasks, const std::vector<int>& ids) {
    const std::set<int> drop(ids.begin(), ids.end());
    std::vector<TaskData> out;
    for (const TaskData& t : tasks)
        if (!drop.count(t.id)) out.push_back(t);
    if (out.size() + drop.size() != tasks.size())
        fail(ErrorCode::invalid_argument, "remove_tasks: unknown or repeated task id");
    if (out.empty()) fail(ErrorCode::invalid_argument, "remove_tasks: at least one task must remain");
    return out;
}

std::vector<TaskData> remove_train_instances(std::span<const TaskData> tasks,
                                             const std::vector<std::pair<int, std::size_t>>& items) {
    std::vector<TaskData> out(tasks.begin(), tasks.end());
    std::map<int, std::set<std::size_t>> drop;
    for (const auto& [id, ex] : items) drop[id].insert(ex);
    for (auto& [id, set] : drop) {
        auto it = std::find_if(out.begin(), out.end(), [id](const TaskData& t) { return t.id == id; });
        if (it == out.end()) fail(ErrorCode::invalid_argument, "remove_train_instances: unknown task " + std::to_string(id));
        std::vector<Example> keep;
        for (std::size_t i = 0; i < it->train.size(); ++i)
            if (!set.count(i)) keep.push_back(it->train[i]);
        if (*set.rbegin() >= it->train.size())
            fail(ErrorCode::invalid_argument, "remove_train_instances: example index out of range");
        if (keep.empty())
            fail(ErrorCode::invalid_argument, "remove_train_instances: task " + std::to_string(id) + " would be empty");
        it->train = std::move(keep);
    }
    return out;
}

// ---- commands ------------------------------------------------------------

json cmd_train(const ExperimentConfig& cfg, const fs::path& out) {
    fs::create_directories(out);
    TaskSets tasks = build_tasks(cfg.data, cfg.seed);
    const Problem pb = Problem::mlp(cfg.arch);
    const auto t0 = std::chrono::steady_clock::now();
    TrainOutcome res = train_meta(tasks.train, cfg.bilevel, pb, init_params(cfg.arch, cfg.seed).values, cfg.seed);
    const double secs = seconds_since(t0);
    const MetaState& st = res.unconverged();

    const json meta = {{"seed", cfg.seed}};
    save_task_bundle(out / "tasks", tasks.train, meta.dump());
    if (!tasks.heldout.empty()) save_task_bundle(out / "heldout", tasks.heldout, meta.dump());
    if (!tasks.probe.empty()) save_task_bundle(out / "probe", tasks.probe, meta.dump());
    ExperimentConfig saved = cfg;
    // The run directory is self-contained: later commands read its bundles.
    saved.data.source = "bundle";
    saved.data.path = fs::absolute(out / "tasks");
    saved.data.heldout_path = tasks.heldout.empty() ? fs::path() : fs::absolute(out / "heldout");
    saved.data.probe_path = tasks.probe.empty() ? fs::path() : fs::absolute(out / "probe");
    write_json_file(out / "config.json", experiment_config_to_json(saved));
    save_checkpoint(out / "checkpoint", st, &cfg.arch, json{{"tasks", "../tasks"}});

    json summary = {{"converged", st.converged},
                    {"outer_grad_norm", st.outer_grad_norm},
                    {"outer_iterations", st.outer_iterations},
                    {"num_tasks", tasks.train.size()},
                    {"params", cfg.arch.param_count()},
                    {"train_seconds", secs},
                    {"checkpoint", (out / "checkpoint").string()}};
    if (!st.converged)
        throw NonConvergence("meta training did not converge (total gradient norm " + fmt(st.outer_grad_norm) +
                                 "); checkpoint written to " + (out / "checkpoint").string(),
                             st.outer_grad_norm);
    if (!tasks.heldout.empty()) summary["heldout_accuracy"] = adapted_accuracy(pb, st.lambda_star, tasks.heldout, st.config);
    return summary;
}

json cmd_attribute(const AttributeOptions& opt) {
    LoadedRun run = load_run(opt.run_dir);
    const InfluenceOptions io = opt.influence.value_or(run.config.influence);
    const bool instance = opt.method == "instance_train" || opt.method == "instance_val" || opt.method == "inner";
    if (!instance && opt.method != "task_if" && opt.method != "direct_if")
        fail(ErrorCode::config, "attribute.method: unknown method '" + opt.method + "'");

    // Targets.
    std::vector<std::pair<int, long>> targets;
    if (opt.targets == "all") {
        for (const TaskData& t : run.tasks) {
            if (!instance) {
                targets.emplace_back(t.id, -1);
                continue;
            }
            const std::size_t m = opt.method == "instance_val" ? t.val.size() : t.train.size();
            for (std::size_t i = 0; i < m; ++i) targets.emplace_back(t.id, static_cast<long>(i));
        }
    } else {
        std::stringstream ss(opt.targets);
        for (std::string item; std::getline(ss, item, ',');) {
            const auto colon = item.find(':');
            try {
                const int id = std::stoi(item.substr(0, colon));
                const long ex = colon == std::string::npos ? -1 : std::stol(item.substr(colon + 1));
                if (instance && ex < 0) fail(ErrorCode::config, "attribute.targets: '" + item + "' needs <task>:<index>");
                targets.emplace_back(id, ex);
            } catch (const std::logic_error&) {
                fail(ErrorCode::config, "attribute.targets: cannot parse '" + item + "'");
            }
        }
    }
    for (const auto& [id, ex] : targets) {
        if (std::none_of(run.tasks.begin(), run.tasks.end(), [id](const TaskData& t) { return t.id == id; }))
            fail(ErrorCode::invalid_argument, "attribute.targets: unknown task " + std::to_string(id));
    }

    fs::create_directories(opt.out);
    const auto t_setup = std::chrono::steady_clock::now();
    InfluenceAnalyzer an(run.checkpoint.state, run.problem, run.tasks, io);
    const double setup = seconds_since(t_setup);

    CsvTable table = make_table("metaif.attribute.v1");
    std::size_t failures = 0;
    for (const auto& [id, ex] : targets) {
        const auto t0 = std::chrono::steady_clock::now();
        std::string stem = opt.method + "_task" + std::to_string(id) + (ex >= 0 ? "_ex" + std::to_string(ex) : "");
        try {
            InfluenceVector inf;
            const auto idx = static_cast<std::size_t>(ex);
            if (opt.method == "task_if") inf = an.task_if(id);
            else if (opt.method == "direct_if") inf = an.direct_if(id);
            else if (opt.method == "instance_train") inf = an.instance_if_train(id, idx);
            else if (opt.method == "instance_val") inf = an.instance_if_val(id, idx);
            else inf = an.inner_if(id, idx);
            const double secs = seconds_since(t0);
            save_influence(opt.out / stem, inf);
            table.add({std::to_string(id), std::to_string(ex), opt.method, backend_name(io.backend), fmt(norm2(inf.delta)),
                       std::to_string(inf.edit_sign), fmt(secs), "ok", stem, ""});
        } catch (const Error& e) {
            ++failures;
            table.add({std::to_string(id), std::to_string(ex), opt.method, backend_name(io.backend), "nan", "0",
                       fmt(seconds_since(t0)), error_code_name(e.code()), "", sanitize(e.what())});
        }
    }
    table.write(opt.out / "summary.csv");
    return {{"rows", table.rows()},
            {"failures", failures},
            {"setup_seconds", setup},
            {"summary", (opt.out / "summary.csv").string()}};
}

json cmd_edit(const fs::path& run_dir, const std::vector<fs::path>& influences, const fs::path& out) {
    const Checkpoint cp = load_checkpoint(run_dir / "checkpoint");
    std::vector<InfluenceVector> infs;
    for (const fs::path& p : influences) infs.push_back(load_influence(p));
    const Vector edited = edit_model(cp.state, infs);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    if (cp.arch) write_param_vector(out, ParamVector(*cp.arch, edited));
    else write_vector(out, edited);
    return {{"applied", infs.size()},
            {"change_norm", norm2(sub(edited, cp.state.lambda_star))},
            {"out", out.string()}};
}

json cmd_compare_oracle(const CompareOptions& opt) {
    const ExperimentConfig& cfg = opt.config;
    std::vector<RemovalSpec> removals;
    for (const std::string& s : opt.removals) removals.push_back(parse_removal(s));
    for (const std::string& m : opt.methods) {
        static const std::set<std::string> known = {"retrain",   "original",       "task_if",
                                                    "direct_if", "instance_train", "instance_val"};
        if (!known.count(m)) fail(ErrorCode::config, "compare.methods: unknown method '" + m + "'");
    }

    struct SeedRows {
        std::vector<std::vector<std::string>> rows;
        std::vector<json> records;
    };
    std::vector<SeedRows> per_seed(cfg.seeds.size());
    // Seeds run one after another; per-task work inside each run is parallel.
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
        const std::uint64_t seed = cfg.seeds[s];
        const TrainRun run = run_training(cfg, seed);
        for (const RemovalSpec& r : removals) {
            const std::string label = removal_label(r);
            RetrainOptions ro;
            if (opt.warm_start_oracle) ro.warm_start = &run.state.lambda_star;
            RetrainResult oracle = retrain_without(run.tasks.train, r, cfg.bilevel, run.problem, run.lambda0, seed, ro);
            const bool oracle_ok = oracle.outcome.converged();
            const Vector& oracle_lambda = oracle.outcome.unconverged().lambda_star;
            const Vector oracle_delta = sub(oracle_lambda, run.state.lambda_star);
            const double l2_lambda = norm2(oracle_delta);
            for (const std::string& m : opt.methods) {
                if (!method_applies(m, r.kind)) continue;
                double runtime = 0.0, acc = std::nan(""), l2 = std::nan(""), cosv = std::nan(""), dnorm = std::nan("");
                std::string status = "ok", message;
                if (!oracle_ok) {
                    status = "oracle_non_convergence";
                    message = "oracle gradient norm " + fmt(oracle.outcome.unconverged().outer_grad_norm);
                }
                try {
                    Vector edited;
                    if (m == "retrain") {
                        edited = oracle_lambda;
                        runtime = oracle.seconds;
                    } else if (m == "original") {
                        edited = run.state.lambda_star;
                    } else {
                        const auto t0 = std::chrono::steady_clock::now();
                        // A fresh analyzer per removal: its setup is part of the cost.
                        InfluenceAnalyzer an(run.state, run.problem, run.tasks.train, cfg.influence);
                        const Vector d = delta_for(an, m, r);
                        runtime = seconds_since(t0);
                        edited = add(run.state.lambda_star, d);
                    }
                    const Vector moved = sub(edited, run.state.lambda_star);
                    dnorm = norm2(moved);
                    l2 = norm2(sub(edited, oracle_lambda));
                    const double denom = norm2(moved) * l2_lambda;
                    cosv = m == "retrain" ? 1.0 : (denom > 0.0 ? dot(moved, oracle_delta) / denom : 0.0);
                    if (opt.accuracy) acc = accuracy_or_nan(run, edited);
                } catch (const Error& e) {
                    status = error_code_name(e.code());
                    message = e.what();
                }
                per_seed[s].rows.push_back({std::to_string(seed), label, m, fmt(acc), fmt(runtime), fmt(l2), fmt(cosv),
                                            fmt(l2_lambda), fmt(dnorm), status, sanitize(message)});
                per_seed[s].records.push_back({{"seed", seed},
                                               {"removal", label},
                                               {"method", m},
                                               {"accuracy", acc},
                                               {"runtime_s", runtime},
                                               {"l2_to_oracle", l2},
                                               {"cosine_to_oracle", cosv},
                                               {"l2_lambda_to_oracle", l2_lambda},
                                               {"delta_norm", dnorm},
                                               {"status", status}});
            }
        }
    }
    CsvTable table = make_table("metaif.compare.v1");
    json records = json::array();
    for (auto& sr : per_seed) {
        for (auto& row : sr.rows) table.add(std::move(row));
        for (auto& rec : sr.records) records.push_back(std::move(rec));
    }
    table.write(opt.out);
    return {{"rows", records}};
}

json cmd_harmful_scan(const HarmfulOptions& opt) {
    const ExperimentConfig& cfg = opt.config;
    check_fractions(opt.fractions, "harmful.fractions");
    if (!(cfg.data.corruption.task_fraction > 0.0) && cfg.data.source != "bundle")
        fail(ErrorCode::config, "config.data.corruption.task_fraction: harmful-scan needs corrupted tasks");
    if (opt.random_draws < 1) fail(ErrorCode::config, "harmful.random_draws: must be >= 1");

    CsvTable table = make_table("metaif.harmful.v1");
    json seeds = json::array();
    for (const std::uint64_t seed : cfg.seeds) {
        const TrainRun run = run_training(cfg, seed);
        const std::vector<TaskData>& tr = run.tasks.train;
        const std::size_t n = tr.size();
        std::size_t total_bad = 0;
        for (const TaskData& t : tr) total_bad += t.corrupted ? 1 : 0;
        if (total_bad == 0) fail(ErrorCode::config, "harmful-scan: no corrupted tasks in the training set");
        if (run.tasks.probe.empty()) fail(ErrorCode::config, "config.data.probe_tasks: harmful-scan needs probe tasks");

        const auto t0 = std::chrono::steady_clock::now();
        InfluenceAnalyzer an(run.state, run.problem, tr, cfg.influence);
        const Vector probe = probe_gradient(run.problem, run.state.lambda_star, run.tasks.probe, run.state.config);
        std::vector<double> is(n);
        for (std::size_t i = 0; i < n; ++i) is[i] = influence_score(probe, an.task_if(tr[i].id));
        const double score_secs = seconds_since(t0);

        // Harmful first: removing them lowers the probe loss the most.
        const std::vector<std::size_t> ranked = top_k(is, n, true);
        Rng rng = Rng::stream(seed, 0xBAD5);
        std::vector<std::vector<std::size_t>> draws(static_cast<std::size_t>(opt.random_draws));
        for (auto& d : draws) {
            d.resize(n);
            std::iota(d.begin(), d.end(), std::size_t{0});
            rng.shuffle(d);
        }
        json curve = json::array();
        for (double f : opt.fractions) {
            const std::size_t k = count_for(f, n);
            auto found_in = [&](const std::vector<std::size_t>& order) {
                std::size_t c = 0;
                for (std::size_t j = 0; j < k; ++j) c += tr[order[j]].corrupted ? 1 : 0;
                return c;
            };
            auto accuracy_without = [&](const std::vector<std::size_t>& order) {
                if (!opt.retrain) return std::nan("");
                if (k == 0) return accuracy_or_nan(run, run.state.lambda_star);
                if (k >= n) return std::nan("");  // nothing left to train on
                std::vector<int> ids;
                for (std::size_t j = 0; j < k; ++j) ids.push_back(tr[order[j]].id);
                const std::vector<TaskData> reduced = remove_tasks(tr, ids);
                TrainOutcome res = train_meta(reduced, cfg.bilevel, run.problem, run.lambda0, seed);
                if (!res.converged()) return std::nan("");
                return accuracy_or_nan(run, res.unconverged().lambda_star);
            };
            const std::size_t is_found = found_in(ranked);
            double rnd_found = 0.0;
            for (const auto& d : draws) rnd_found += static_cast<double>(found_in(d));
            rnd_found /= static_cast<double>(draws.size());
            const double is_acc = accuracy_without(ranked);
            const double rnd_acc = accuracy_without(draws.front());
            const double tb = static_cast<double>(total_bad);
            table.add({std::to_string(seed), "is", fmt(f), std::to_string(k), fmt(static_cast<double>(is_found)),
                       fmt(is_found / tb), fmt(is_acc)});
            table.add({std::to_string(seed), "random", fmt(f), std::to_string(k), fmt(rnd_found), fmt(rnd_found / tb),
                       fmt(rnd_acc)});
            curve.push_back({{"fraction", f},
                             {"checked", k},
                             {"is_found", is_found / tb},
                             {"random_found", rnd_found / tb},
                             {"is_accuracy", is_acc},
                             {"random_accuracy", rnd_acc}});
        }
        seeds.push_back({{"seed", seed}, {"corrupted", total_bad}, {"score_seconds", score_secs}, {"curve", curve}});
    }
    table.write(opt.out);
    return {{"seeds", seeds}};
}

json cmd_effectiveness(const EffectivenessOptions& opt) {
    const ExperimentConfig& cfg = opt.config;
    check_fractions(opt.fractions, "effectiveness.fractions");
    if (opt.level != "task" && opt.level != "instance")
        fail(ErrorCode::config, "effectiveness.level: expected task or instance");

    CsvTable table = make_table("metaif.effectiveness.v1");
    json seeds = json::array();
    for (const std::uint64_t seed : cfg.seeds) {
        const TrainRun run = run_training(cfg, seed);
        const std::vector<TaskData>& tr = run.tasks.train;
        if (run.tasks.probe.empty()) fail(ErrorCode::config, "config.data.probe_tasks: effectiveness needs probe tasks");
        if (run.tasks.heldout.empty())
            fail(ErrorCode::config, "config.data.heldout_episodes: effectiveness needs held-out episodes");

        InfluenceAnalyzer an(run.state, run.problem, tr, cfg.influence);
        const Vector probe = probe_gradient(run.problem, run.state.lambda_star, run.tasks.probe, run.state.config);

        // Candidates and their scores. Most helpful first: removing them
        // raises the probe loss the most (lowest IS).
        std::vector<std::pair<int, std::size_t>> items;
        std::vector<double> is;
        if (opt.level == "task") {
            for (const TaskData& t : tr) {
                items.emplace_back(t.id, 0);
                is.push_back(influence_score(probe, an.task_if(t.id)));
            }
        } else {
            for (const TaskData& t : tr)
                for (std::size_t i = 0; i < t.train.size(); ++i) {
                    items.emplace_back(t.id, i);
                    is.push_back(influence_score(probe, an.instance_if_train(t.id, i)));
                }
        }
        const std::size_t n = items.size();
        const std::vector<std::size_t> ranked = top_k(is, n, false);
        std::vector<std::size_t> random_order(n);
        std::iota(random_order.begin(), random_order.end(), std::size_t{0});
        Rng rng = Rng::stream(seed, 0xEFF1);
        rng.shuffle(random_order);

        // Keeps the first k removable candidates of `order` (instances
        // leave at least one training example per task).
        auto pick = [&](const std::vector<std::size_t>& order, std::size_t k) {
            std::vector<std::size_t> chosen;
            std::map<int, std::size_t> left;
            for (const TaskData& t : tr) left[t.id] = t.train.size();
            for (std::size_t j = 0; j < order.size() && chosen.size() < k; ++j) {
                if (opt.level == "instance") {
                    std::size_t& l = left[items[order[j]].first];
                    if (l <= 1) continue;
                    --l;
                }
                chosen.push_back(order[j]);
            }
            return chosen;
        };
        auto run_arm = [&](const std::vector<std::size_t>& order, std::size_t k, double& secs) {
            secs = 0.0;
            if (k == 0) return accuracy_or_nan(run, run.state.lambda_star);
            const std::vector<std::size_t> chosen = pick(order, k);
            std::vector<TaskData> reduced;
            if (opt.level == "task") {
                std::vector<int> ids;
                for (std::size_t c : chosen) ids.push_back(items[c].first);
                if (ids.size() >= tr.size()) return std::nan("");
                reduced = remove_tasks(tr, ids);
            } else {
                std::vector<std::pair<int, std::size_t>> sel;
                for (std::size_t c : chosen) sel.push_back(items[c]);
                reduced = remove_train_instances(tr, sel);
            }
            const auto t0 = std::chrono::steady_clock::now();
            TrainOutcome res = train_meta(reduced, cfg.bilevel, run.problem, run.lambda0, seed);
            secs = seconds_since(t0);
            if (!res.converged()) return std::nan("");
            return accuracy_or_nan(run, res.unconverged().lambda_star);
        };
        json curve = json::array();
        for (double f : opt.fractions) {
            const std::size_t k = count_for(f, opt.level == "task" ? tr.size() : n);
            double s_is = 0.0, s_rnd = 0.0;
            const double a_is = run_arm(ranked, k, s_is);
            const double a_rnd = run_arm(random_order, k, s_rnd);
            table.add({std::to_string(seed), opt.level, "is", fmt(f), std::to_string(k), fmt(a_is), fmt(s_is)});
            table.add({std::to_string(seed), opt.level, "random", fmt(f), std::to_string(k), fmt(a_rnd), fmt(s_rnd)});
            curve.push_back({{"fraction", f}, {"removed", k}, {"is_accuracy", a_is}, {"random_accuracy", a_rnd}});
        }
        seeds.push_back({{"seed", seed}, {"curve", curve}});
    }
    table.write(opt.out);
    return {{"seeds", seeds}};
}

json cmd_schema_check(const fs::path& csv) {
    std::ifstream in(csv);
    if (!in) fail(ErrorCode::io, "cannot open " + csv.string());
    std::string line;
    const std::string where = csv.string();
    if (!std::getline(in, line) || line.rfind("#schema=", 0) != 0)
        fail(ErrorCode::parse, where + ":1: missing #schema= line");
    const std::string name = line.substr(8);
    const SchemaDef* def = nullptr;
    for (const SchemaDef& d : schemas())
        if (name == d.name) def = &d;
    if (!def) fail(ErrorCode::parse, where + ":1: unknown schema '" + name + "'");

    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : s) {
            if (c == ',') {
                out.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        out.push_back(cur);
        return out;
    };
    if (!std::getline(in, line)) fail(ErrorCode::parse, where + ":2: missing header");
    const std::vector<std::string> header = split(line);
    if (header.size() != def->columns.size()) fail(ErrorCode::parse, where + ":2: header has wrong column count");
    for (std::size_t c = 0; c < header.size(); ++c)
        if (header[c] != def->columns[c].first)
            fail(ErrorCode::parse, where + ":2: expected column '" + def->columns[c].first + "', got '" + header[c] + "'");

    std::size_t rows = 0;
    for (std::size_t ln = 3; std::getline(in, line); ++ln) {
        if (line.empty()) continue;
        const std::vector<std::string> cells = split(line);
        const std::string at = where + ":" + std::to_string(ln);
        if (cells.size() != header.size()) fail(ErrorCode::parse, at + ": expected " + std::to_string(header.size()) + " cells");
        for (std::size_t c = 0; c < cells.size(); ++c) {
            const ColKind kind = def->columns[c].second;
            if (kind == ColKind::text) continue;
            const std::string& cell = cells[c];
            if (cell == "nan") continue;  // not measured
            double v = 0.0;
            try {
                std::size_t used = 0;
                v = std::stod(cell, &used);
                if (used != cell.size()) throw std::invalid_argument(cell);
            } catch (const std::exception&) {
                fail(ErrorCode::parse, at + ": column " + header[c] + " is not numeric ('" + cell + "')");
            }
            if (kind == ColKind::integer && v != std::floor(v))
                fail(ErrorCode::parse, at + ": column " + header[c] + " must be an integer");
            if (kind == ColKind::unit && !(v >= 0.0 && v <= 1.0))
                fail(ErrorCode::parse, at + ": column " + header[c] + " must be in [0, 1]");
            if (kind == ColKind::nonneg && !(v >= 0.0))
                fail(ErrorCode::parse, at + ": column " + header[c] + " must be >= 0");
        }
        ++rows;
    }
    return {{"schema", name}, {"rows", rows}};
}

}  // namespace metaif
