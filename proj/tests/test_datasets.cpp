#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "metaif/datasets.hpp"
#include "metaif/error.hpp"
#include "support.hpp"

using namespace metaif;
using namespace testsupport;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("metaif_test_" + name);
    fs::remove_all(p);
    return p;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

bool same_examples(const std::vector<Example>& a, const std::vector<Example>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].x != b[i].x || a[i].label != b[i].label || a[i].target != b[i].target) return false;
    return true;
}

ClassPool small_pool(std::size_t classes, std::size_t per_class, std::size_t dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ClassPool pool;
    pool.dim = dim;
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t i = 0; i < per_class; ++i) pool.by_class[static_cast<int>(c) * 3].push_back(random_vector(rng, dim));
    return pool;
}

}  // namespace

TEST_CASE("synthetic tasks: shape, balance and determinism") {
    EpisodeSpec spec;
    spec.n_way = 3;
    spec.k_shot = 4;
    spec.k_query = 2;
    spec.num_tasks = 6;
    spec.seed = 11;
    const std::vector<TaskData> a = gen_synthetic_tasks(spec, 5, 7, 0.5);
    const std::vector<TaskData> b = gen_synthetic_tasks(spec, 5, 7, 0.5);
    REQUIRE(a.size() == 6);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].id == static_cast<int>(i));
        CHECK(a[i].train.size() == 12);
        CHECK(a[i].val.size() == 6);
        CHECK(same_examples(a[i].train, b[i].train));
        CHECK(same_examples(a[i].val, b[i].val));
        std::map<int, int> per;
        for (const Example& e : a[i].train) {
            CHECK(e.x.size() == 7);
            ++per[e.label];
        }
        CHECK(per.size() == 3);
        for (const auto& [label, n] : per) {
            CHECK(label >= 0);
            CHECK(label < 3);
            CHECK(n == 4);
        }
    }
    spec.seed = 12;
    CHECK_FALSE(same_examples(gen_synthetic_tasks(spec, 5, 7, 0.5)[0].train, a[0].train));
}

TEST_CASE("synthetic tasks: infeasible specs are rejected") {
    EpisodeSpec spec;
    spec.n_way = 6;
    CHECK_THROWS_AS(gen_synthetic_tasks(spec, 5, 4, 1.0), Error);
    spec.n_way = 2;
    spec.k_shot = 0;
    CHECK_THROWS_AS(gen_synthetic_tasks(spec, 5, 4, 1.0), Error);
    spec = {};
    CHECK_THROWS_AS(gen_synthetic_tasks(spec, 5, 0, 1.0), Error);
    CHECK_THROWS_AS(gen_synthetic_tasks(spec, 5, 4, -1.0), Error);
}

TEST_CASE("noise-free separated clusters are learned perfectly by a linear model") {
    EpisodeSpec spec;
    spec.n_way = 3;
    spec.k_shot = 2;
    spec.k_query = 2;
    spec.num_tasks = 4;
    spec.seed = 3;
    const std::vector<TaskData> tasks = gen_synthetic_tasks(spec, 4, 5, 0.0, 5.0);
    const Architecture arch({5, 3}, {});
    BilevelConfig cfg;
    cfg.threads = 1;
    const TrainOutcome out = train_meta(tasks, cfg, arch, 1);
    REQUIRE(out.converged());
    CHECK(adapted_accuracy(Problem::mlp(arch), out.state().lambda_star, tasks, cfg) == doctest::Approx(1.0));
}

TEST_CASE("csv corpus: small file, errors and round trip") {
    const fs::path dir = scratch("csv");
    fs::create_directories(dir);
    write_file(dir / "four.csv", "label,a,b\n0,1.0,2.0\n1,3,4\n# comment\n0,5,6\n1,7,8.5\n");
    const ClassPool pool = load_csv_corpus(dir / "four.csv", "label");
    CHECK(pool.dim == 2);
    CHECK(pool.size() == 4);
    REQUIRE(pool.by_class.size() == 2);
    CHECK(pool.by_class.at(0).size() == 2);
    CHECK(pool.by_class.at(1).size() == 2);
    CHECK(pool.by_class.at(1)[1] == Vector{7, 8.5});

    write_file(dir / "empty.csv", "");
    try {
        load_csv_corpus(dir / "empty.csv", "label");
        FAIL("expected parse error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::parse);
    }
    write_file(dir / "bad.csv", "label,a\n0,1\n1,abc\n");
    try {
        load_csv_corpus(dir / "bad.csv", "label");
        FAIL("expected parse error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::parse);
        CHECK(std::string(e.what()).find(":3") != std::string::npos);
    }
    write_file(dir / "nolabel.csv", "a,b\n1,2\n");
    CHECK_THROWS_AS(load_csv_corpus(dir / "nolabel.csv", "label"), Error);
    CHECK_THROWS_AS(load_csv_corpus(dir / "missing.csv", "label"), Error);

    const ClassPool big = small_pool(4, 5, 3, 2);
    write_csv_corpus(big, dir / "rt.csv");
    const ClassPool back = load_csv_corpus(dir / "rt.csv", "label");
    CHECK(back.dim == big.dim);
    CHECK(back.by_class == big.by_class);
    fs::remove_all(dir);
}

TEST_CASE("make_episodes: sizes, disjointness and relabeling") {
    const ClassPool pool = small_pool(5, 6, 2, 4);
    EpisodeSpec spec;
    spec.n_way = 2;
    spec.k_shot = 1;
    spec.k_query = 1;
    spec.num_tasks = 30;
    spec.seed = 5;
    const std::vector<TaskData> eps = make_episodes(pool, spec, 7);
    REQUIRE(eps.size() == 30);
    CHECK(eps[0].id == 7);
    for (const TaskData& t : eps) {
        CHECK(t.train.size() == 2);
        CHECK(t.val.size() == 2);
        std::set<Vector> tr, all;
        for (const Example& e : t.train) {
            CHECK((e.label == 0 || e.label == 1));
            tr.insert(e.x);
        }
        for (const Example& e : t.val) CHECK(tr.count(e.x) == 0);
    }
    spec.n_way = 6;
    CHECK_THROWS_AS(make_episodes(pool, spec), Error);
    spec.n_way = 2;
    spec.k_shot = 6;
    CHECK_THROWS_AS(make_episodes(pool, spec), Error);
}

TEST_CASE("make_episodes: class frequencies are uniform within 3 sigma") {
    const std::size_t C = 8, n_tasks = 1000, n_way = 3;
    const ClassPool pool = small_pool(C, 4, 2, 6);
    // Map each pool vector back to its class.
    std::map<Vector, int> owner;
    for (const auto& [label, xs] : pool.by_class)
        for (const Vector& x : xs) owner[x] = label;
    EpisodeSpec spec;
    spec.n_way = n_way;
    spec.k_shot = 1;
    spec.k_query = 1;
    spec.num_tasks = n_tasks;
    spec.seed = 8;
    std::map<int, int> count;
    for (const TaskData& t : make_episodes(pool, spec)) {
        std::set<int> seen;
        for (const Example& e : t.train) seen.insert(owner.at(e.x));
        CHECK(seen.size() == n_way);
        for (int c : seen) ++count[c];
    }
    const double p = static_cast<double>(n_way) / C;
    const double mean = n_tasks * p, sd = std::sqrt(n_tasks * p * (1 - p));
    CHECK(count.size() == C);
    for (const auto& [c, n] : count) CHECK(std::abs(n - mean) <= 3 * sd);
}

TEST_CASE("corrupt: counts, flags and untouched validation labels") {
    EpisodeSpec spec;
    spec.n_way = 4;
    spec.k_shot = 5;
    spec.k_query = 3;
    spec.num_tasks = 20;
    spec.seed = 9;
    const std::vector<TaskData> clean = gen_synthetic_tasks(spec, 6, 3, 1.0);

    const std::vector<TaskData> none = corrupt(clean, {0.0, 0.7, 1});
    for (std::size_t i = 0; i < clean.size(); ++i) {
        CHECK_FALSE(none[i].corrupted);
        CHECK(same_examples(none[i].train, clean[i].train));
    }

    const std::vector<TaskData> c = corrupt(clean, {0.8, 0.4, 2});
    int flagged = 0;
    for (std::size_t i = 0; i < clean.size(); ++i) {
        CHECK(same_examples(c[i].val, clean[i].val));
        int flips = 0;
        for (std::size_t j = 0; j < clean[i].train.size(); ++j) {
            CHECK(c[i].train[j].x == clean[i].train[j].x);
            if (c[i].train[j].label != clean[i].train[j].label) ++flips;
        }
        if (c[i].corrupted) {
            ++flagged;
            CHECK(flips == 8);  // round(0.4 · 20)
        } else {
            CHECK(flips == 0);
        }
    }
    CHECK(flagged == 16);
    const std::vector<TaskData> again = corrupt(clean, {0.8, 0.4, 2});
    for (std::size_t i = 0; i < clean.size(); ++i) CHECK(same_examples(again[i].train, c[i].train));

    spec.n_way = 2;
    const std::vector<TaskData> two = gen_synthetic_tasks(spec, 3, 3, 1.0);
    const std::vector<TaskData> all = corrupt(two, {1.0, 1.0, 3});
    for (std::size_t i = 0; i < two.size(); ++i)
        for (std::size_t j = 0; j < two[i].train.size(); ++j) CHECK(all[i].train[j].label == 1 - two[i].train[j].label);

    CHECK_THROWS_AS(corrupt(clean, {1.5, 0.0, 0}), Error);
}

TEST_CASE("task bundles round trip") {
    EpisodeSpec spec;
    spec.n_way = 2;
    spec.k_shot = 2;
    spec.k_query = 2;
    spec.num_tasks = 3;
    std::vector<TaskData> tasks = corrupt(gen_synthetic_tasks(spec, 3, 4, 1.0), {0.5, 0.5, 1});
    const fs::path dir = scratch("bundle");
    save_task_bundle(dir, tasks, R"({"note": "x"})");
    std::string meta;
    const std::vector<TaskData> back = load_task_bundle(dir, &meta);
    REQUIRE(back.size() == tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        CHECK(back[i].id == tasks[i].id);
        CHECK(back[i].corrupted == tasks[i].corrupted);
        CHECK(same_examples(back[i].train, tasks[i].train));
        CHECK(same_examples(back[i].val, tasks[i].val));
    }
    CHECK(meta.find("note") != std::string::npos);
    CHECK_THROWS_AS(load_task_bundle(dir / "nope"), Error);
    fs::remove_all(dir);
}
