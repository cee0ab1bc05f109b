#include "metaif/metaif.h"

#include <cstring>
#include <exception>
#include <new>
#include <string>

#include <json.hpp>

#include "metaif/error.hpp"
#include "metaif/experiments.hpp"
#include "metaif/json_util.hpp"
#include "metaif/serialize.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

struct mif_tasks {
    std::vector<metaif::TaskData> tasks;
};

struct mif_model {
    metaif::MetaState state;
    metaif::Architecture arch;
    metaif::Problem problem;
};

struct mif_analyzer {
    std::unique_ptr<metaif::InfluenceAnalyzer> impl;
};

struct mif_influence {
    metaif::InfluenceVector inf;
};

namespace {

thread_local std::string g_last_error;

mif_status set_error(mif_status s, const std::string& msg) {
    g_last_error = msg;
    return s;
}

mif_status status_of(metaif::ErrorCode c) {
    switch (c) {
        case metaif::ErrorCode::config: return MIF_ERR_CONFIG;
        case metaif::ErrorCode::numerical: return MIF_ERR_NUMERICAL;
        case metaif::ErrorCode::non_convergence: return MIF_ERR_NONCONVERGENCE;
        case metaif::ErrorCode::dimension: return MIF_ERR_DIMENSION;
        case metaif::ErrorCode::invalid_argument: return MIF_ERR_INVALID_ARGUMENT;
        case metaif::ErrorCode::io: return MIF_ERR_IO;
        case metaif::ErrorCode::parse: return MIF_ERR_PARSE;
    }
    return MIF_ERR_INTERNAL;
}

// Runs fn, translating exceptions into status codes.
template <class Fn>
mif_status guarded(Fn&& fn) {
    try {
        fn();
        return MIF_OK;
    } catch (const metaif::Error& e) {
        return set_error(status_of(e.code()), e.what());
    } catch (const json::exception& e) {
        return set_error(MIF_ERR_PARSE, e.what());
    } catch (const fs::filesystem_error& e) {
        return set_error(MIF_ERR_IO, e.what());
    } catch (const std::bad_alloc&) {
        return set_error(MIF_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return set_error(MIF_ERR_INTERNAL, e.what());
    } catch (...) {
        return set_error(MIF_ERR_INTERNAL, "unknown error");
    }
}

json parse_json_arg(const char* text, const char* what) {
    if (text == nullptr || *text == '\0') return json::object();
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        metaif::fail(metaif::ErrorCode::parse, std::string(what) + ": " + e.what());
    }
}

void need(const void* p, const char* what) {
    if (p == nullptr) metaif::fail(metaif::ErrorCode::invalid_argument, std::string(what) + " is NULL");
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void copy_out(const metaif::Vector& v, double* out, size_t len) {
    need(out, "output buffer");
    if (len != v.size())
        metaif::fail(metaif::ErrorCode::dimension,
                     "output buffer has " + std::to_string(len) + " slots, need " + std::to_string(v.size()));
    std::memcpy(out, v.data(), v.size() * sizeof(double));
}

// "config" may be inline JSON or a path string.
metaif::ExperimentConfig config_arg(const json& args) {
    if (!args.contains("config")) metaif::fail(metaif::ErrorCode::config, "args.config: required");
    const json& c = args["config"];
    if (c.is_string()) return metaif::load_experiment_config(c.get<std::string>());
    return metaif::experiment_config_from_json(c);
}

std::string str_arg(const json& args, const char* key, const std::string& fallback = "") {
    return metaif::jsonu::get_field<std::string>(args, key, "args", fallback);
}

json run_command(const std::string& cmd, const json& args) {
    using namespace metaif;
    if (cmd == "train") return cmd_train(config_arg(args), str_arg(args, "out", "run"));
    if (cmd == "attribute") {
        AttributeOptions o;
        o.run_dir = str_arg(args, "run");
        if (o.run_dir.empty()) fail(ErrorCode::config, "args.run: required");
        o.method = str_arg(args, "method", o.method);
        o.targets = str_arg(args, "targets", o.targets);
        if (args.contains("influence")) o.influence = influence_options_from_json(args["influence"], "args.influence");
        o.out = str_arg(args, "out", (o.run_dir / "attribution").string());
        return cmd_attribute(o);
    }
    if (cmd == "edit") {
        std::vector<fs::path> infs;
        for (const std::string& s : jsonu::get_field(args, "influences", "args", std::vector<std::string>{}))
            infs.emplace_back(s);
        const std::string run = str_arg(args, "run");
        if (run.empty()) fail(ErrorCode::config, "args.run: required");
        return cmd_edit(run, infs, str_arg(args, "out", (fs::path(run) / "edited.bin").string()));
    }
    if (cmd == "compare-oracle") {
        CompareOptions o;
        o.config = config_arg(args);
        o.removals = jsonu::get_field(args, "removals", "args", o.removals);
        o.methods = jsonu::get_field(args, "methods", "args", o.methods);
        o.accuracy = jsonu::get_field(args, "accuracy", "args", o.accuracy);
        o.warm_start_oracle = jsonu::get_field(args, "warm_start_oracle", "args", o.warm_start_oracle);
        o.out = str_arg(args, "out");
        return cmd_compare_oracle(o);
    }
    if (cmd == "harmful-scan") {
        HarmfulOptions o;
        o.config = config_arg(args);
        o.fractions = jsonu::get_field(args, "fractions", "args", o.fractions);
        o.random_draws = jsonu::get_field(args, "random_draws", "args", o.random_draws);
        o.retrain = jsonu::get_field(args, "retrain", "args", o.retrain);
        o.out = str_arg(args, "out");
        return cmd_harmful_scan(o);
    }
    if (cmd == "effectiveness") {
        EffectivenessOptions o;
        o.config = config_arg(args);
        o.level = str_arg(args, "level", o.level);
        o.fractions = jsonu::get_field(args, "fractions", "args", o.fractions);
        o.out = str_arg(args, "out");
        return cmd_effectiveness(o);
    }
    if (cmd == "schema-check") {
        const std::string f = str_arg(args, "file");
        if (f.empty()) fail(ErrorCode::config, "args.file: required");
        return cmd_schema_check(f);
    }
    fail(ErrorCode::invalid_argument, "unknown command '" + cmd + "'");
}

}  // namespace

extern "C" {

const char* mif_version(void) { return "1.0.0"; }

const char* mif_last_error(void) { return g_last_error.c_str(); }

const char* mif_status_name(mif_status status) {
    switch (status) {
        case MIF_OK: return "ok";
        case MIF_ERR_CONFIG: return "config";
        case MIF_ERR_NUMERICAL: return "numerical";
        case MIF_ERR_NONCONVERGENCE: return "non_convergence";
        case MIF_ERR_DIMENSION: return "dimension";
        case MIF_ERR_INVALID_ARGUMENT: return "invalid_argument";
        case MIF_ERR_IO: return "io";
        case MIF_ERR_PARSE: return "parse";
        case MIF_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

void mif_string_free(char* s) { std::free(s); }

// ---- task sets ----

mif_status mif_tasks_create(const char* data_json, uint64_t seed, mif_tasks** out) {
    return guarded([&] {
        need(out, "out");
        *out = nullptr;
        const json j = parse_json_arg(data_json, "data_json");
        const metaif::DataConfig cfg = metaif::data_config_from_json(j, "data_json");
        auto t = std::make_unique<mif_tasks>();
        t->tasks = metaif::build_tasks(cfg, seed).train;
        *out = t.release();
    });
}

mif_status mif_tasks_load_bundle(const char* dir, mif_tasks** out) {
    return guarded([&] {
        need(dir, "dir");
        need(out, "out");
        *out = nullptr;
        auto t = std::make_unique<mif_tasks>();
        t->tasks = metaif::load_task_bundle(dir);
        *out = t.release();
    });
}

mif_status mif_tasks_save_bundle(const mif_tasks* tasks, const char* dir) {
    return guarded([&] {
        need(tasks, "tasks");
        need(dir, "dir");
        metaif::save_task_bundle(dir, tasks->tasks);
    });
}

size_t mif_tasks_count(const mif_tasks* tasks) { return tasks ? tasks->tasks.size() : 0; }

int mif_tasks_id(const mif_tasks* tasks, size_t index) {
    if (!tasks || index >= tasks->tasks.size()) return -1;
    return tasks->tasks[index].id;
}

int mif_tasks_corrupted(const mif_tasks* tasks, size_t index) {
    if (!tasks || index >= tasks->tasks.size()) return -1;
    return tasks->tasks[index].corrupted ? 1 : 0;
}

void mif_tasks_free(mif_tasks* tasks) { delete tasks; }

// ---- training ----

mif_status mif_train(const mif_tasks* tasks, const char* config_json, mif_model** out) {
    mif_status converged_status = MIF_OK;
    const mif_status st = guarded([&] {
        need(tasks, "tasks");
        need(out, "out");
        *out = nullptr;
        json j = parse_json_arg(config_json, "config_json");
        metaif::jsonu::require_object(j, "config");
        metaif::jsonu::reject_unknown(j, "config", {"architecture", "bilevel", "seed"});
        auto m = std::make_unique<mif_model>();
        m->arch = j.contains("architecture") ? metaif::architecture_from_json(j["architecture"], "config.architecture")
                                             : metaif::ExperimentConfig{}.arch;
        const metaif::BilevelConfig cfg =
            j.contains("bilevel") ? metaif::bilevel_config_from_json(j["bilevel"], "config.bilevel") : metaif::BilevelConfig{};
        const auto seed = metaif::jsonu::get_field<std::uint64_t>(j, "seed", "config", 1);
        m->problem = metaif::Problem::mlp(m->arch);
        metaif::TrainOutcome res =
            metaif::train_meta(tasks->tasks, cfg, m->problem, metaif::init_params(m->arch, seed).values, seed);
        if (!res.converged()) {
            converged_status = set_error(MIF_ERR_NONCONVERGENCE, "meta training did not converge (total gradient norm " +
                                                                     std::to_string(res.unconverged().outer_grad_norm) + ")");
        }
        m->state = res.take();
        *out = m.release();
    });
    return st != MIF_OK ? st : converged_status;
}

mif_status mif_model_load(const char* checkpoint_dir, mif_model** out) {
    return guarded([&] {
        need(checkpoint_dir, "checkpoint_dir");
        need(out, "out");
        *out = nullptr;
        metaif::Checkpoint cp = metaif::load_checkpoint(checkpoint_dir);
        if (!cp.arch) metaif::fail(metaif::ErrorCode::parse, "checkpoint has no architecture");
        auto m = std::make_unique<mif_model>();
        m->arch = *cp.arch;
        m->state = std::move(cp.state);
        m->problem = metaif::Problem::mlp(m->arch);
        *out = m.release();
    });
}

mif_status mif_model_save(const mif_model* model, const char* checkpoint_dir) {
    return guarded([&] {
        need(model, "model");
        need(checkpoint_dir, "checkpoint_dir");
        metaif::save_checkpoint(checkpoint_dir, model->state, &model->arch);
    });
}

size_t mif_model_param_count(const mif_model* model) { return model ? model->arch.param_count() : 0; }

mif_status mif_model_lambda(const mif_model* model, double* out, size_t len) {
    return guarded([&] {
        need(model, "model");
        copy_out(model->state.lambda_star, out, len);
    });
}

int mif_model_converged(const mif_model* model) { return model && model->state.converged ? 1 : 0; }

double mif_model_grad_norm(const mif_model* model) { return model ? model->state.outer_grad_norm : 0.0; }

mif_status mif_model_accuracy(const mif_model* model, const mif_tasks* tasks, const double* lambda, size_t len,
                              double* accuracy) {
    return guarded([&] {
        need(model, "model");
        need(tasks, "tasks");
        need(accuracy, "accuracy");
        std::span<const double> l = model->state.lambda_star;
        if (lambda) {
            if (len != model->arch.param_count()) metaif::fail(metaif::ErrorCode::dimension, "lambda length mismatch");
            l = std::span<const double>(lambda, len);
        }
        *accuracy = metaif::adapted_accuracy(model->problem, l, tasks->tasks, model->state.config);
    });
}

void mif_model_free(mif_model* model) { delete model; }

// ---- influence ----

mif_status mif_analyzer_create(const mif_model* model, const mif_tasks* tasks, const char* options_json,
                               mif_analyzer** out) {
    return guarded([&] {
        need(model, "model");
        need(tasks, "tasks");
        need(out, "out");
        *out = nullptr;
        const metaif::InfluenceOptions opt =
            metaif::influence_options_from_json(parse_json_arg(options_json, "options_json"), "influence");
        auto a = std::make_unique<mif_analyzer>();
        a->impl = std::make_unique<metaif::InfluenceAnalyzer>(model->state, model->problem, tasks->tasks, opt);
        *out = a.release();
    });
}

void mif_analyzer_free(mif_analyzer* analyzer) { delete analyzer; }

mif_status mif_influence_compute(const mif_analyzer* analyzer, const char* kind, int task_id, size_t example_index,
                                 mif_influence** out) {
    return guarded([&] {
        need(analyzer, "analyzer");
        need(kind, "kind");
        need(out, "out");
        *out = nullptr;
        const metaif::InfluenceAnalyzer& an = *analyzer->impl;
        auto r = std::make_unique<mif_influence>();
        switch (metaif::parse_influence_kind(kind)) {
            case metaif::InfluenceKind::task: r->inf = an.task_if(task_id); break;
            case metaif::InfluenceKind::direct_baseline: r->inf = an.direct_if(task_id); break;
            case metaif::InfluenceKind::inner: r->inf = an.inner_if(task_id, example_index); break;
            case metaif::InfluenceKind::instance_train: r->inf = an.instance_if_train(task_id, example_index); break;
            case metaif::InfluenceKind::instance_val: r->inf = an.instance_if_val(task_id, example_index); break;
        }
        *out = r.release();
    });
}

size_t mif_influence_dim(const mif_influence* inf) { return inf ? inf->inf.delta.size() : 0; }

mif_status mif_influence_delta(const mif_influence* inf, double* out, size_t len) {
    return guarded([&] {
        need(inf, "influence");
        copy_out(inf->inf.delta, out, len);
    });
}

int mif_influence_edit_sign(const mif_influence* inf) { return inf ? inf->inf.edit_sign : 0; }

mif_status mif_influence_score(const mif_model* model, const mif_tasks* probe, const mif_influence* inf,
                               double* score) {
    return guarded([&] {
        need(model, "model");
        need(probe, "probe");
        need(inf, "influence");
        need(score, "score");
        const metaif::Vector g =
            metaif::probe_gradient(model->problem, model->state.lambda_star, probe->tasks, model->state.config);
        *score = metaif::influence_score(g, inf->inf);
    });
}

mif_status mif_influence_save(const mif_influence* inf, const char* stem) {
    return guarded([&] {
        need(inf, "influence");
        need(stem, "stem");
        metaif::save_influence(stem, inf->inf);
    });
}

mif_status mif_influence_load(const char* stem, mif_influence** out) {
    return guarded([&] {
        need(stem, "stem");
        need(out, "out");
        *out = nullptr;
        auto r = std::make_unique<mif_influence>();
        r->inf = metaif::load_influence(stem);
        *out = r.release();
    });
}

void mif_influence_free(mif_influence* inf) { delete inf; }

mif_status mif_edit(const mif_model* model, const mif_influence* const* influences, size_t count, double* out,
                    size_t len) {
    return guarded([&] {
        need(model, "model");
        if (count > 0) need(influences, "influences");
        std::vector<metaif::InfluenceVector> infs;
        for (size_t i = 0; i < count; ++i) {
            need(influences[i], "influence");
            infs.push_back(influences[i]->inf);
        }
        copy_out(metaif::edit_model(model->state, infs), out, len);
    });
}

// ---- batch commands ----

mif_status mif_run_command(const char* command, const char* args_json, char** report_json) {
    if (report_json) *report_json = nullptr;
    return guarded([&] {
        need(command, "command");
        const json args = parse_json_arg(args_json, "args_json");
        metaif::jsonu::require_object(args, "args");
        const json report = run_command(command, args);
        if (report_json) *report_json = dup_string(report.dump(2));
    });
}

}  // extern "C"
