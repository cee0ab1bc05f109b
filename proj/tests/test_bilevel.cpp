#include <doctest.h>

#include "metaif/bilevel.hpp"
#include "metaif/error.hpp"
#include "support.hpp"

using namespace metaif;
using namespace testsupport;

namespace {

TaskData linear_task(std::mt19937_64& rng, std::size_t dim, std::size_t classes, std::size_t per_class, double noise,
                     int id = 0) {
    std::vector<Vector> means;
    for (std::size_t c = 0; c < classes; ++c) means.push_back(random_vector(rng, dim, 3.0));
    TaskData t;
    t.id = id;
    t.train = blobs(rng, dim, classes, per_class, noise, means);
    t.val = blobs(rng, dim, classes, per_class, noise, means);
    return t;
}

// Independent inner objective for an MLP problem.
double reference_inner(const Architecture& arch, const Vector& lambda, const Vector& theta, const TaskData& t,
                       double delta) {
    double v = loss_value(arch, theta, t.train, LossKind::cross_entropy);
    for (std::size_t i = 0; i < theta.size(); ++i) v += 0.5 * delta * (theta[i] - lambda[i]) * (theta[i] - lambda[i]);
    return v;
}

}  // namespace

TEST_CASE("BilevelConfig validation names the field") {
    BilevelConfig c;
    c.delta = 0.0;
    try {
        c.validate();
        FAIL("expected config error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::config);
        CHECK(std::string(e.what()).find("delta") != std::string::npos);
    }
    c = {};
    c.inner_tol = -1;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("inner_loss: proximal term only and zero") {
    const Problem q = Problem::quadratic(DenseMatrix::zeros(3, 3), DenseMatrix::zeros(3, 3));
    const TaskData empty;
    BilevelConfig cfg;
    cfg.delta = 2.0;
    const Vector lam{1, 2, 3};
    CHECK(inner_loss(q, lam, lam, empty, cfg) == doctest::Approx(0.0));
    const Vector th{1.5, 2, 2};
    CHECK(inner_loss(q, lam, th, empty, cfg) == doctest::Approx(0.5 * 2.0 * (0.25 + 1.0)));
}

TEST_CASE("inner_loss matches an independent implementation") {
    std::mt19937_64 rng(21);
    const Architecture arch({4, 5, 3}, {Activation::tanh});
    const Problem pb = Problem::mlp(arch);
    const TaskData t = linear_task(rng, 4, 3, 3, 1.0);
    BilevelConfig cfg;
    cfg.delta = 0.7;
    const Vector lam = init_params(arch, 1).values, th = init_params(arch, 2).values;
    CHECK(inner_loss(pb, lam, th, t, cfg) == doctest::Approx(reference_inner(arch, lam, th, t, 0.7)).epsilon(1e-13));
}

TEST_CASE("outer_loss: zero for perfect predictions in both forms") {
    const Architecture arch({2, 2}, {});
    const Problem pb = Problem::mlp(arch, LossKind::mse);
    const Vector p{1, 0, 0, 0, 1, 0};
    TaskData t;
    t.val = {{{1, 2}, 0, {1, 2}}, {{3, -1}, 0, {3, -1}}};
    BilevelConfig cfg;
    CHECK(outer_loss(pb, p, p, t, cfg) == doctest::Approx(0.0));
    cfg.outer_reg_form = OuterRegForm::appendix_proximal;
    CHECK(outer_loss(pb, p, p, t, cfg) == doctest::Approx(0.0));
}

TEST_CASE("outer_partials agree with finite differences") {
    std::mt19937_64 rng(22);
    const Architecture arch({3, 4, 3}, {Activation::tanh});
    const Problem pb = Problem::mlp(arch);
    const TaskData t = linear_task(rng, 3, 3, 2, 1.0);
    for (OuterRegForm form : {OuterRegForm::main_text, OuterRegForm::appendix_proximal}) {
        BilevelConfig cfg;
        cfg.delta = 1.3;
        cfg.outer_reg_form = form;
        const Vector lam = init_params(arch, 3).values, th = init_params(arch, 4).values;
        const OuterPartials op = outer_partials(pb, lam, th, t, cfg);
        const double h = 1e-6;
        Vector fl(lam.size()), ft(th.size());
        for (std::size_t i = 0; i < lam.size(); ++i) {
            Vector a = lam, b = lam;
            a[i] += h;
            b[i] -= h;
            fl[i] = (outer_loss(pb, a, th, t, cfg) - outer_loss(pb, b, th, t, cfg)) / (2 * h);
            Vector c = th, d = th;
            c[i] += h;
            d[i] -= h;
            ft[i] = (outer_loss(pb, lam, c, t, cfg) - outer_loss(pb, lam, d, t, cfg)) / (2 * h);
        }
        CHECK(rel_l2(op.d_theta, ft) < 1e-6);
        if (form == OuterRegForm::main_text) {
            CHECK(norm2(op.d_lambda) == 0.0);
        } else {
            CHECK(rel_l2(op.d_lambda, fl) < 1e-6);
        }
    }
}

TEST_CASE("solve_inner: proximal dominance, closed form and idempotence") {
    std::mt19937_64 rng(23);
    const Architecture arch({3, 4, 2}, {Activation::tanh});
    const Problem pb = Problem::mlp(arch);
    const TaskData t = linear_task(rng, 3, 2, 4, 1.0);
    const Vector lam = init_params(arch, 5).values;
    BilevelConfig cfg;
    cfg.delta = 1e6;
    const InnerSolution big = solve_inner(pb, lam, t, cfg);
    CHECK(norm2(sub(big.theta, lam)) < 1e-3);
    CHECK(big.grad_norm <= cfg.inner_tol);

    cfg.delta = 0.5;
    const InnerSolution s = solve_inner(pb, lam, t, cfg);
    CHECK(s.grad_norm <= cfg.inner_tol);
    CHECK(norm2(inner_grad(pb, lam, s.theta, t, cfg)) <= cfg.inner_tol);
    const InnerSolution again = solve_inner(pb, lam, t, cfg, s.theta);
    CHECK(norm2(sub(again.theta, s.theta)) < 1e-10);

    const QuadSurrogate q = make_quad(31, 6, 1, 0.8, OuterRegForm::main_text);
    const Problem qp = Problem::quadratic(q.A, q.C);
    const Vector ql = random_vector(rng, 6);
    const InnerSolution qs = solve_inner(qp, ql, q.tasks[0], quad_config(q));
    CHECK(rel_l2(qs.theta, quad_theta(q, ql, q.tasks[0])) < 1e-8);
}

TEST_CASE("solve_inner reports non-convergence with the achieved norm") {
    std::mt19937_64 rng(24);
    const Architecture arch({3, 4, 2}, {Activation::tanh});
    const TaskData t = linear_task(rng, 3, 2, 4, 1.0);
    BilevelConfig cfg;
    cfg.inner_max_iters = 1;
    cfg.inner_tol = 1e-14;
    try {
        solve_inner(Problem::mlp(arch), init_params(arch, 1).values, t, cfg);
        FAIL("expected NonConvergence");
    } catch (const NonConvergence& e) {
        CHECK(e.achieved_norm() > 0.0);
        CHECK(e.code() == ErrorCode::non_convergence);
    }
}

TEST_CASE("outer total gradient matches finite differences of the value function") {
    std::mt19937_64 rng(25);
    const Architecture arch({3, 4, 3}, {Activation::tanh});
    const Problem pb = Problem::mlp(arch);
    std::vector<TaskData> tasks;
    for (int i = 0; i < 3; ++i) tasks.push_back(linear_task(rng, 3, 3, 2, 1.0, i));
    for (OuterRegForm form : {OuterRegForm::main_text, OuterRegForm::appendix_proximal}) {
        BilevelConfig cfg;
        cfg.delta = 1.0;
        cfg.outer_reg_form = form;
        cfg.inner_tol = 1e-11;
        cfg.threads = 1;
        const Vector lam = init_params(arch, 7).values;
        const ValueGrad vg = outer_value_grad(tasks, cfg, pb, lam);
        Vector fd(lam.size());
        const double h = 1e-5;
        for (std::size_t i = 0; i < lam.size(); ++i) {
            Vector a = lam, b = lam;
            a[i] += h;
            b[i] -= h;
            fd[i] = (outer_value_grad(tasks, cfg, pb, a).value - outer_value_grad(tasks, cfg, pb, b).value) / (2 * h);
        }
        CHECK(rel_l2(vg.grad, fd) < 1e-3);
    }
}

TEST_CASE("task_total_hessian matches finite differences of the task total gradient") {
    std::mt19937_64 rng(26);
    const Architecture arch({3, 3, 2}, {Activation::tanh});
    const Problem pb = Problem::mlp(arch);
    const std::vector<TaskData> task{linear_task(rng, 3, 2, 3, 1.0)};
    for (OuterRegForm form : {OuterRegForm::main_text, OuterRegForm::appendix_proximal}) {
        BilevelConfig cfg;
        cfg.delta = 1.5;
        cfg.outer_reg_form = form;
        cfg.inner_tol = 1e-12;
        cfg.threads = 1;
        const Vector lam = init_params(arch, 8).values;
        const ValueGrad vg = outer_value_grad(task, cfg, pb, lam, nullptr, true);
        const DenseMatrix h = task_total_hessian(pb, lam, vg.thetas[0], task[0], cfg, vg.inner_factors[0]);
        const std::size_t P = lam.size();
        const double eps = 1e-5;
        for (std::size_t j = 0; j < P; ++j) {
            Vector a = lam, b = lam;
            a[j] += eps;
            b[j] -= eps;
            Vector col = sub(outer_value_grad(task, cfg, pb, a).grad, outer_value_grad(task, cfg, pb, b).grad);
            scale(col, 1.0 / (2 * eps));
            col[j] -= cfg.delta;  // ridge on λ is not part of the task Hessian
            for (std::size_t i = 0; i < P; ++i) CHECK(std::abs(col[i] - h(i, j)) < 1e-4 * (1.0 + std::abs(h(i, j))));
        }
    }
}

TEST_CASE("train_meta: single separable task converges") {
    std::mt19937_64 rng(27);
    const Architecture arch({2, 2}, {});
    TaskData t;
    t.train = {{{2, 0}, 0, {}}, {{0, 2}, 1, {}}, {{2, 0.3}, 0, {}}, {{0.2, 2}, 1, {}}};
    t.val = {{{1.5, 0}, 0, {}}, {{0, 1.5}, 1, {}}};
    BilevelConfig cfg;
    const TrainOutcome out = train_meta(std::vector<TaskData>{t}, cfg, arch, 1);
    REQUIRE(out.converged());
    CHECK(out.state().outer_grad_norm <= cfg.outer_tol);
    CHECK(out.state().task_ids == std::vector<int>{0});
}

TEST_CASE("train_meta: quadratic surrogate matches the closed-form solution") {
    for (OuterRegForm form : {OuterRegForm::main_text, OuterRegForm::appendix_proximal}) {
        const QuadSurrogate q = make_quad(41, 5, 2, 1.0, form);
        const Problem pb = Problem::quadratic(q.A, q.C);
        const TrainOutcome out = train_meta(q.tasks, quad_config(q), pb, Vector(5, 0.0));
        REQUIRE(out.converged());
        CHECK(rel_l2(out.state().lambda_star, quad_solution(q)) < 1e-5);
    }
}

TEST_CASE("train_meta: lbfgs agrees with newton") {
    const QuadSurrogate q = make_quad(42, 5, 3, 1.0, OuterRegForm::main_text);
    const Problem pb = Problem::quadratic(q.A, q.C);
    BilevelConfig cfg = quad_config(q);
    cfg.outer_method = OuterMethod::lbfgs;
    cfg.outer_tol = 1e-9;
    const TrainOutcome out = train_meta(q.tasks, cfg, pb, Vector(5, 0.0));
    REQUIRE(out.converged());
    CHECK(rel_l2(out.state().lambda_star, quad_solution(q)) < 1e-6);
}

TEST_CASE("train_meta: duplicating a task keeps the problem well posed") {
    std::mt19937_64 rng(28);
    const Architecture arch({3, 3}, {});
    std::vector<TaskData> tasks;
    for (int i = 0; i < 3; ++i) tasks.push_back(linear_task(rng, 3, 3, 2, 1.0, i));
    BilevelConfig cfg;
    cfg.threads = 1;
    REQUIRE(train_meta(tasks, cfg, arch, 2).converged());
    TaskData dup = tasks[1];
    dup.id = 3;
    tasks.push_back(dup);
    const TrainOutcome out = train_meta(tasks, cfg, arch, 2);
    REQUIRE(out.converged());
    CHECK(out.state().outer_grad_norm <= cfg.outer_tol);
}

TEST_CASE("train_meta is deterministic and thread-count independent") {
    std::mt19937_64 rng(29);
    const Architecture arch({3, 4, 3}, {Activation::tanh});
    std::vector<TaskData> tasks;
    for (int i = 0; i < 4; ++i) tasks.push_back(linear_task(rng, 3, 3, 3, 1.0, i));
    BilevelConfig cfg;
    cfg.delta = 5.0;
    cfg.threads = 1;
    const TrainOutcome a = train_meta(tasks, cfg, arch, 3);
    const TrainOutcome b = train_meta(tasks, cfg, arch, 3);
    cfg.threads = 3;
    const TrainOutcome c = train_meta(tasks, cfg, arch, 3);
    REQUIRE(a.converged());
    CHECK(a.state().lambda_star == b.state().lambda_star);
    CHECK(a.state().lambda_star == c.state().lambda_star);
}

TEST_CASE("non-converged outcomes are not silently usable") {
    std::mt19937_64 rng(30);
    const Architecture arch({3, 4, 3}, {Activation::tanh});
    std::vector<TaskData> tasks;
    for (int i = 0; i < 3; ++i) tasks.push_back(linear_task(rng, 3, 3, 3, 1.0, i));
    BilevelConfig cfg;
    cfg.outer_max_iters = 1;
    cfg.outer_tol = 1e-14;
    TrainOutcome out = train_meta(tasks, cfg, arch, 1);
    CHECK_FALSE(out.converged());
    CHECK_THROWS_AS(out.state(), NonConvergence);
    CHECK(out.unconverged().outer_iterations == 1);
}
