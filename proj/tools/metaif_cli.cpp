// metaif: batch front end over the C API.
//
// Exit codes: 0 success, 1 internal error, 2 configuration or input error
// (including unreadable files and malformed JSON), 3 numerical failure,
// 4 trainer non-convergence.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "metaif/metaif.h"

using nlohmann::json;

namespace {

int exit_code(mif_status s) {
    switch (s) {
        case MIF_OK: return 0;
        case MIF_ERR_CONFIG:
        case MIF_ERR_PARSE:
        case MIF_ERR_INVALID_ARGUMENT:
        case MIF_ERR_IO: return 2;
        case MIF_ERR_NUMERICAL:
        case MIF_ERR_DIMENSION: return 3;
        case MIF_ERR_NONCONVERGENCE: return 4;
        case MIF_ERR_INTERNAL: return 1;
    }
    return 1;
}

struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw InputError(path + ": " + e.what());
    }
}

// Overrides shared by every command that takes an experiment config.
struct ConfigFlags {
    std::string config;
    std::optional<double> delta;
    std::optional<std::string> reg_form;
    std::optional<std::string> outer_method;
    std::optional<std::uint64_t> seed;
    std::vector<std::uint64_t> seeds;
    std::optional<std::size_t> num_tasks;
    std::optional<double> corrupt_tasks;
    std::optional<double> corrupt_samples;
    std::optional<std::string> backend;
    std::optional<int> threads;

    void add_to(CLI::App* app, bool config_required) {
        auto* c = app->add_option("--config", config, "experiment config (JSON)");
        if (config_required) c->required();
        c->check(CLI::ExistingFile);
        app->add_option("--delta", delta, "bilevel.delta");
        app->add_option("--outer-reg-form", reg_form, "bilevel.outer_reg_form (main_text|appendix_proximal)");
        app->add_option("--outer-method", outer_method, "bilevel.outer_method (newton|lbfgs)");
        app->add_option("--seed", seed, "seed");
        app->add_option("--seeds", seeds, "seeds")->delimiter(',');
        app->add_option("--tasks", num_tasks, "data.episodes.num_tasks");
        app->add_option("--corrupt-tasks", corrupt_tasks, "data.corruption.task_fraction");
        app->add_option("--corrupt-samples", corrupt_samples, "data.corruption.sample_fraction");
        app->add_option("--backend", backend, "influence.backend (exact|neumann|ekfac)")
            ->check(CLI::IsMember({"exact", "neumann", "ekfac"}));
        app->add_option("--threads", threads, "bilevel.threads (0 = hardware)");
    }

    json build() const {
        json j = config.empty() ? json::object() : read_json(config);
        if (!j.is_object()) throw InputError(config + ": top level must be an object");
        if (delta) j["bilevel"]["delta"] = *delta;
        if (reg_form) j["bilevel"]["outer_reg_form"] = *reg_form;
        if (outer_method) j["bilevel"]["outer_method"] = *outer_method;
        if (threads) j["bilevel"]["threads"] = *threads;
        if (seed) j["seed"] = *seed;
        if (!seeds.empty()) j["seeds"] = seeds;
        if (num_tasks) j["data"]["episodes"]["num_tasks"] = *num_tasks;
        if (corrupt_tasks) j["data"]["corruption"]["task_fraction"] = *corrupt_tasks;
        if (corrupt_samples) j["data"]["corruption"]["sample_fraction"] = *corrupt_samples;
        if (backend) j["influence"]["backend"] = *backend;
        return j;
    }
};

int run(const std::string& command, const json& args, bool quiet) {
    char* report = nullptr;
    const mif_status s = mif_run_command(command.c_str(), args.dump().c_str(), &report);
    if (report) {
        if (!quiet) std::cout << json::parse(report).dump(2) << "\n";
        mif_string_free(report);
    }
    if (s != MIF_OK) std::cerr << "error (" << mif_status_name(s) << "): " << mif_last_error() << "\n";
    return exit_code(s);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Influence functions for bilevel meta-learning"};
    app.set_version_flag("--version", std::string(mif_version()));
    app.require_subcommand(1);
    app.fallthrough();
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "do not print the JSON report");

    // train
    ConfigFlags train_cfg;
    std::string train_out = "run";
    auto* train = app.add_subcommand("train", "train λ* and write a run directory");
    train_cfg.add_to(train, false);
    train->add_option("--out", train_out, "run directory");

    // attribute
    std::string attr_run, attr_method = "task_if", attr_targets = "all", attr_out;
    std::optional<std::string> attr_backend;
    auto* attribute = app.add_subcommand("attribute", "influence vectors for tasks or instances");
    attribute->add_option("--run", attr_run, "run directory from 'train'")->required()->check(CLI::ExistingDirectory);
    attribute->add_option("--method", attr_method, "task_if|direct_if|instance_train|instance_val|inner")
        ->check(CLI::IsMember({"task_if", "direct_if", "instance_train", "instance_val", "inner"}));
    attribute->add_option("--targets", attr_targets, "'all' or comma list of <task> / <task>:<index>");
    attribute->add_option("--backend", attr_backend, "exact|neumann|ekfac")
        ->check(CLI::IsMember({"exact", "neumann", "ekfac"}));
    attribute->add_option("--out", attr_out, "output directory (default <run>/attribution)");

    // edit
    std::string edit_run, edit_out;
    std::vector<std::string> edit_infs;
    auto* edit = app.add_subcommand("edit", "apply influence files to λ*");
    edit->add_option("--run", edit_run, "run directory")->required()->check(CLI::ExistingDirectory);
    edit->add_option("--influence", edit_infs, "influence file stem (repeatable)")->required();
    edit->add_option("--out", edit_out, "edited parameter file (default <run>/edited.bin)");

    // compare-oracle
    ConfigFlags cmp_cfg;
    std::vector<std::string> cmp_removals{"task:0"};
    std::vector<std::string> cmp_methods;
    bool cmp_no_acc = false, cmp_warm = false;
    std::string cmp_out;
    auto* compare = app.add_subcommand("compare-oracle", "influence estimates against retraining");
    cmp_cfg.add_to(compare, false);
    compare->add_option("--remove", cmp_removals, "task:<id> | train:<id>:<i> | val:<id>:<i>")->delimiter(',');
    compare->add_option("--methods", cmp_methods, "retrain,original,task_if,direct_if,instance_train,instance_val")
        ->delimiter(',');
    compare->add_flag("--no-accuracy", cmp_no_acc, "skip held-out accuracy");
    compare->add_flag("--warm-start-oracle", cmp_warm, "start the oracle retrain from λ*");
    compare->add_option("--out", cmp_out, "CSV path");

    // harmful-scan
    ConfigFlags hs_cfg;
    std::vector<double> hs_fractions;
    int hs_draws = 20;
    bool hs_no_retrain = false;
    std::string hs_out;
    auto* harmful = app.add_subcommand("harmful-scan", "rank corrupted tasks by influence score");
    hs_cfg.add_to(harmful, false);
    harmful->add_option("--fractions", hs_fractions, "checked fractions")->delimiter(',');
    harmful->add_option("--random-draws", hs_draws, "random-order baseline draws")->check(CLI::PositiveNumber);
    harmful->add_flag("--no-retrain", hs_no_retrain, "skip retraining after removal");
    harmful->add_option("--out", hs_out, "CSV path");

    // effectiveness
    ConfigFlags ef_cfg;
    std::string ef_level = "task", ef_out;
    std::vector<double> ef_fractions;
    auto* effect = app.add_subcommand("effectiveness", "accuracy after IS-ranked vs random removal");
    ef_cfg.add_to(effect, false);
    effect->add_option("--level", ef_level, "task|instance")->check(CLI::IsMember({"task", "instance"}));
    effect->add_option("--fractions", ef_fractions, "removed fractions")->delimiter(',');
    effect->add_option("--out", ef_out, "CSV path");

    // schema-check
    std::string sc_file;
    auto* schema = app.add_subcommand("schema-check", "validate a CSV written by this tool");
    schema->add_option("file", sc_file, "CSV file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*train) return run("train", {{"config", train_cfg.build()}, {"out", train_out}}, quiet);
        if (*attribute) {
            json args = {{"run", attr_run}, {"method", attr_method}, {"targets", attr_targets}};
            if (!attr_out.empty()) args["out"] = attr_out;
            if (attr_backend) {
                json inf = read_json(attr_run + "/config.json").value("influence", json::object());
                inf["backend"] = *attr_backend;
                args["influence"] = inf;
            }
            return run("attribute", args, quiet);
        }
        if (*edit) {
            json args = {{"run", edit_run}, {"influences", edit_infs}};
            if (!edit_out.empty()) args["out"] = edit_out;
            return run("edit", args, quiet);
        }
        if (*compare) {
            json args = {{"config", cmp_cfg.build()},
                         {"removals", cmp_removals},
                         {"accuracy", !cmp_no_acc},
                         {"warm_start_oracle", cmp_warm},
                         {"out", cmp_out}};
            if (!cmp_methods.empty()) args["methods"] = cmp_methods;
            return run("compare-oracle", args, quiet);
        }
        if (*harmful) {
            json args = {{"config", hs_cfg.build()},
                         {"random_draws", hs_draws},
                         {"retrain", !hs_no_retrain},
                         {"out", hs_out}};
            if (!hs_fractions.empty()) args["fractions"] = hs_fractions;
            return run("harmful-scan", args, quiet);
        }
        if (*effect) {
            json args = {{"config", ef_cfg.build()}, {"level", ef_level}, {"out", ef_out}};
            if (!ef_fractions.empty()) args["fractions"] = ef_fractions;
            return run("effectiveness", args, quiet);
        }
        if (*schema) return run("schema-check", {{"file", sc_file}}, quiet);
    } catch (const InputError& e) {
        std::cerr << "error (config): " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
