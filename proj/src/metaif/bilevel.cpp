#include "metaif/bilevel.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include "metaif/error.hpp"
#include "metaif/parallel.hpp"

namespace metaif {

const char* reg_form_name(OuterRegForm f) {
    return f == OuterRegForm::main_text ? "main_text" : "appendix_proximal";
}

OuterRegForm parse_reg_form(const std::string& s) {
    if (s == "main_text") return OuterRegForm::main_text;
    if (s == "appendix_proximal") return OuterRegForm::appendix_proximal;
    fail(ErrorCode::config, "unknown outer_reg_form '" + s + "'");
}

const char* outer_method_name(OuterMethod m) { return m == OuterMethod::newton ? "newton" : "lbfgs"; }

OuterMethod parse_outer_method(const std::string& s) {
    if (s == "newton") return OuterMethod::newton;
    if (s == "lbfgs") return OuterMethod::lbfgs;
    fail(ErrorCode::config, "unknown outer_method '" + s + "'");
}

void BilevelConfig::validate() const {
    auto bad = [](const char* field, const char* why) {
        fail(ErrorCode::config, std::string("bilevel.") + field + ": " + why);
    };
    if (!(delta > 0.0) || !std::isfinite(delta)) bad("delta", "must be > 0");
    if (!(inner_tol > 0.0)) bad("inner_tol", "must be > 0");
    if (!(outer_tol > 0.0)) bad("outer_tol", "must be > 0");
    if (inner_max_iters <= 0) bad("inner_max_iters", "must be > 0");
    if (outer_max_iters < 0) bad("outer_max_iters", "must be >= 0");
    if (!(outer_step > 0.0)) bad("outer_step", "must be > 0");
    if (lbfgs_memory <= 0) bad("lbfgs_memory", "must be > 0");
}

namespace {

double proximal(std::span<const double> theta, std::span<const double> lambda, double delta) {
    double s = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double d = theta[i] - lambda[i];
        s += d * d;
    }
    return 0.5 * delta * s;
}

void check_shapes(const Problem& pb, std::span<const double> lambda, std::span<const double> theta) {
    require_dims(lambda.size() == pb.dim() && theta.size() == pb.dim(),
                 "bilevel: parameter length does not match the problem");
}

}  // namespace

double inner_loss(const Problem& pb, std::span<const double> lambda, std::span<const double> theta,
                  const TaskData& task, const BilevelConfig& cfg) {
    check_shapes(pb, lambda, theta);
    return pb.train_value_grad(theta, task.train, {}) + proximal(theta, lambda, cfg.delta);
}

Vector inner_grad(const Problem& pb, std::span<const double> lambda, std::span<const double> theta,
                  const TaskData& task, const BilevelConfig& cfg) {
    check_shapes(pb, lambda, theta);
    Vector g(pb.dim());
    pb.train_value_grad(theta, task.train, g);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += cfg.delta * (theta[i] - lambda[i]);
    return g;
}

double outer_loss(const Problem& pb, std::span<const double> lambda, std::span<const double> theta,
                  const TaskData& task, const BilevelConfig& cfg) {
    check_shapes(pb, lambda, theta);
    double v = pb.val_value_grad(theta, task.val, {});
    if (cfg.outer_reg_form == OuterRegForm::appendix_proximal) v += proximal(theta, lambda, cfg.delta);
    return v;
}

OuterPartials outer_partials(const Problem& pb, std::span<const double> lambda, std::span<const double> theta,
                             const TaskData& task, const BilevelConfig& cfg) {
    check_shapes(pb, lambda, theta);
    OuterPartials out;
    out.d_theta.assign(pb.dim(), 0.0);
    out.d_lambda.assign(pb.dim(), 0.0);
    out.value = pb.val_value_grad(theta, task.val, out.d_theta);
    if (cfg.outer_reg_form == OuterRegForm::appendix_proximal) {
        out.value += proximal(theta, lambda, cfg.delta);
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double d = cfg.delta * (theta[i] - lambda[i]);
            out.d_theta[i] += d;
            out.d_lambda[i] -= d;
        }
    }
    return out;
}

namespace {

InnerSolution newton_inner(const Problem& pb, std::span<const double> lambda, const TaskData& task,
                           const BilevelConfig& cfg, Vector theta) {
    const std::size_t P = pb.dim();
    double f = inner_loss(pb, lambda, theta, task, cfg);
    Vector g = inner_grad(pb, lambda, theta, task, cfg);
    double gn = norm2(g);
    int it = 0;
    while (gn > cfg.inner_tol && it < cfg.inner_max_iters) {
        ++it;
        const DenseMatrix H = pb.train_hessian(theta, task.train);
        // Levenberg-Marquardt shift when the Hessian is not positive definite.
        double mu = 0.0;
        Cholesky chol;
        for (int attempt = 0;; ++attempt) {
            try {
                chol = Cholesky(H, cfg.delta + mu);
                break;
            } catch (const Error&) {
                if (attempt > 60) throw;
                mu = mu == 0.0 ? 1e-3 * (1.0 + norm_inf(H.data())) : 4.0 * mu;
            }
        }
        Vector step = chol.solve(g);
        scale(step, -1.0);
        const double slope = dot(g, step);
        double t = 1.0;
        Vector trial(P);
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            for (std::size_t i = 0; i < P; ++i) trial[i] = theta[i] + t * step[i];
            double ft;
            try {
                ft = inner_loss(pb, lambda, trial, task, cfg);
            } catch (const Error&) {
                ft = std::numeric_limits<double>::infinity();
            }
            if (ft <= f + 1e-4 * t * slope) {
                f = ft;
                accepted = true;
                break;
            }
            if (t == 1.0 && std::isfinite(ft) && ft <= f + 1e-12 * (1.0 + std::abs(f))) {
                // Near the optimum the decrease drops below rounding of f;
                // accept the full step when it shrinks the gradient.
                const Vector gt = inner_grad(pb, lambda, trial, task, cfg);
                if (norm2(gt) < gn) {
                    f = ft;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if (!accepted) break;
        theta = trial;
        g = inner_grad(pb, lambda, theta, task, cfg);
        gn = norm2(g);
    }
    if (!(gn <= cfg.inner_tol))
        throw NonConvergence("solve_inner: task " + std::to_string(task.id) + " stopped at gradient norm " +
                                 std::to_string(gn) + " after " + std::to_string(it) + " iterations",
                             gn);
    return {std::move(theta), gn, it};
}

InnerSolution gradient_inner(const Problem& pb, std::span<const double> lambda, const TaskData& task,
                             const BilevelConfig& cfg, Vector theta) {
    const std::size_t P = pb.dim();
    double f = inner_loss(pb, lambda, theta, task, cfg);
    Vector g = inner_grad(pb, lambda, theta, task, cfg);
    double gn = norm2(g);
    double t = 1.0 / cfg.delta;
    int it = 0;
    Vector trial(P);
    while (gn > cfg.inner_tol && it < cfg.inner_max_iters) {
        ++it;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            for (std::size_t i = 0; i < P; ++i) trial[i] = theta[i] - t * g[i];
            const double ft = inner_loss(pb, lambda, trial, task, cfg);
            if (ft <= f - 1e-4 * t * gn * gn) {
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) break;
        theta = trial;
        g = inner_grad(pb, lambda, theta, task, cfg);
        gn = norm2(g);
        t *= 2.0;
    }
    if (!(gn <= cfg.inner_tol))
        throw NonConvergence("solve_inner (gradient descent): task " + std::to_string(task.id) +
                                 " stopped at gradient norm " + std::to_string(gn),
                             gn);
    return {std::move(theta), gn, it};
}

}  // namespace

InnerSolution solve_inner(const Problem& pb, std::span<const double> lambda, const TaskData& task,
                          const BilevelConfig& cfg, std::span<const double> init) {
    cfg.validate();
    require_dims(lambda.size() == pb.dim(), "solve_inner: lambda length does not match the problem");
    Vector theta = init.empty() ? Vector(lambda.begin(), lambda.end()) : Vector(init.begin(), init.end());
    require_dims(theta.size() == pb.dim(), "solve_inner: init length does not match the problem");
    if (pb.dim() <= cfg.newton_max_params) return newton_inner(pb, lambda, task, cfg, std::move(theta));
    return gradient_inner(pb, lambda, task, cfg, std::move(theta));
}

std::size_t MetaState::index_of(int task_id) const {
    for (std::size_t i = 0; i < task_ids.size(); ++i)
        if (task_ids[i] == task_id) return i;
    fail(ErrorCode::invalid_argument, "unknown task id " + std::to_string(task_id));
}

const MetaState& TrainOutcome::state() const {
    if (!state_.converged)
        throw NonConvergence("train_meta did not converge: total gradient norm " +
                                 std::to_string(state_.outer_grad_norm),
                             state_.outer_grad_norm);
    return state_;
}

MetaState TrainOutcome::take() {
    state();
    return std::move(state_);
}

ValueGrad outer_value_grad(std::span<const TaskData> tasks, const BilevelConfig& cfg, const Problem& pb,
                           std::span<const double> lambda, const std::vector<Vector>* warm, bool keep_factors) {
    const std::size_t P = pb.dim();
    require_dims(lambda.size() == P, "outer_value_grad: lambda length mismatch");
    const std::size_t n = tasks.size();
    std::vector<Vector> thetas(n), grads(n);
    std::vector<double> values(n), norms(n);
    std::vector<Cholesky> factors(keep_factors ? n : 0);
    parallel_for(n, cfg.threads, [&](std::size_t i) {
        const TaskData& task = tasks[i];
        std::span<const double> init;
        if (warm && i < warm->size()) init = (*warm)[i];
        InnerSolution sol = solve_inner(pb, lambda, task, cfg, init);
        OuterPartials part = outer_partials(pb, lambda, sol.theta, task, cfg);
        // D_λ L_O = ∂_λ L_O + (dθ/dλ)ᵀ ∂_θ L_O with dθ/dλ = δ H_in⁻¹.
        Cholesky chol(pb.train_hessian(sol.theta, task.train), cfg.delta);
        Vector g = chol.solve(part.d_theta);
        scale(g, cfg.delta);
        axpy(1.0, part.d_lambda, g);
        values[i] = part.value;
        grads[i] = std::move(g);
        thetas[i] = std::move(sol.theta);
        norms[i] = sol.grad_norm;
        if (keep_factors) factors[i] = std::move(chol);
    });
    ValueGrad out;
    out.grad.assign(lambda.begin(), lambda.end());
    scale(out.grad, cfg.delta);
    out.value = 0.5 * cfg.delta * dot(lambda, lambda);
    for (std::size_t i = 0; i < n; ++i) {
        out.value += values[i];
        axpy(1.0, grads[i], out.grad);
    }
    out.thetas = std::move(thetas);
    out.inner_norms = std::move(norms);
    out.inner_factors = std::move(factors);
    return out;
}

DenseMatrix task_total_hessian(const Problem& pb, std::span<const double> lambda, std::span<const double> theta,
                               const TaskData& task, const BilevelConfig& cfg, const Cholesky& inner_factor,
                               double fd_step) {
    const std::size_t P = pb.dim();
    const double delta = cfg.delta;
    const bool app = cfg.outer_reg_form == OuterRegForm::appendix_proximal;
    const OuterPartials part = outer_partials(pb, lambda, theta, task, cfg);
    DenseMatrix m = pb.val_hessian(theta, task.val);
    if (app)
        for (std::size_t i = 0; i < P; ++i) m(i, i) += delta;
    const Vector w = inner_factor.solve(part.d_theta);
    const double wn = norm2(w);
    if (wn > 0.0) {
        const double h = fd_step / wn;
        Vector plus(theta.begin(), theta.end()), minus(theta.begin(), theta.end());
        axpy(h, w, plus);
        axpy(-h, w, minus);
        const DenseMatrix hp = pb.train_hessian(plus, task.train);
        const DenseMatrix hm = pb.train_hessian(minus, task.train);
        const double inv = 1.0 / (2.0 * h);
        for (std::size_t i = 0; i < P; ++i)
            for (std::size_t j = 0; j < P; ++j) m(i, j) -= (hp(i, j) - hm(i, j)) * inv;
    }
    // δ² H⁻¹ M H⁻¹; M H⁻¹ = (H⁻¹ M)ᵀ since both are symmetric.
    const DenseMatrix x = inner_factor.solve_matrix(m).transpose();
    DenseMatrix out = inner_factor.solve_matrix(x);
    for (std::size_t i = 0; i < P; ++i)
        for (std::size_t j = i; j < P; ++j) {
            const double v = 0.5 * delta * delta * (out(i, j) + out(j, i));
            out(i, j) = v;
            out(j, i) = v;
        }
    if (app) {
        DenseMatrix hinv = inner_factor.solve_matrix(DenseMatrix::identity(P));
        for (std::size_t i = 0; i < P; ++i) {
            for (std::size_t j = 0; j < P; ++j) out(i, j) -= delta * delta * (hinv(i, j) + hinv(j, i));
            out(i, i) += delta;
        }
    }
    return out;
}

namespace {

MetaState finish(std::span<const TaskData> tasks, const BilevelConfig& cfg, Vector x, ValueGrad cur, double gn, int it,
                 std::uint64_t seed) {
    MetaState st;
    st.lambda_star = std::move(x);
    for (const TaskData& t : tasks) st.task_ids.push_back(t.id);
    st.thetas = std::move(cur.thetas);
    st.inner_grad_norms = std::move(cur.inner_norms);
    st.config = cfg;
    st.seed = seed;
    st.outer_grad_norm = gn;
    st.outer_iterations = it;
    st.converged = gn <= cfg.outer_tol;
    return st;
}

// Armijo backtracking along d from x. Inner problems are warm-started from
// the current solutions. Returns false when no acceptable step was found.
bool line_search(std::span<const TaskData> tasks, const BilevelConfig& cfg, const Problem& pb, const Vector& x,
                 const ValueGrad& cur, const Vector& d, bool keep_factors, Vector& trial, ValueGrad& next) {
    const double gn = norm2(cur.grad);
    const double slope = dot(cur.grad, d);
    double t = 1.0;
    trial.resize(x.size());
    for (int ls = 0; ls < 40; ++ls) {
        bool moved = false;
        for (std::size_t i = 0; i < x.size(); ++i) {
            trial[i] = x[i] + t * d[i];
            moved = moved || trial[i] != x[i];
        }
        if (!moved) return false;  // step fell below floating-point resolution
        bool ok = true;
        try {
            next = outer_value_grad(tasks, cfg, pb, trial, &cur.thetas, keep_factors);
        } catch (const Error&) {
            ok = false;
        }
        if (ok && next.value <= cur.value + 1e-4 * t * slope) return true;
        if (ok && t == 1.0 && norm2(next.grad) < 0.5 * gn &&
            next.value <= cur.value + 1e-10 * std::max(1.0, std::abs(cur.value)))
            return true;  // value changes are below rounding resolution
        t *= 0.5;
    }
    return false;
}

TrainOutcome train_newton(std::span<const TaskData> tasks, const BilevelConfig& cfg, const Problem& pb, Vector x,
                          std::uint64_t seed) {
    const std::size_t P = pb.dim();
    const std::size_t n = tasks.size();
    ValueGrad cur = outer_value_grad(tasks, cfg, pb, x, nullptr, true);
    double gn = norm2(cur.grad);
    int it = 0;
    while (gn > cfg.outer_tol && it < cfg.outer_max_iters) {
        ++it;
        std::vector<DenseMatrix> parts(n);
        parallel_for(n, cfg.threads, [&](std::size_t i) {
            parts[i] = task_total_hessian(pb, x, cur.thetas[i], tasks[i], cfg, cur.inner_factors[i]);
        });
        DenseMatrix hv(P, P);
        for (const DenseMatrix& h : parts) axpy(1.0, h.data(), hv.data());
        // Saddle-free Newton step: curvature |e_k + δ| along each eigenpair
        // of H_T, so negative directions are descended rather than ascended.
        const EigenDecomposition eig = eig_sym(hv);
        Vector d(P, 0.0);
        for (std::size_t k = 0; k < P; ++k) {
            double c = 0.0;
            for (std::size_t r = 0; r < P; ++r) c += eig.eigenvectors(r, k) * cur.grad[r];
            c /= std::max(std::abs(eig.eigenvalues[k] + cfg.delta), 1e-2 * cfg.delta);
            for (std::size_t r = 0; r < P; ++r) d[r] -= c * eig.eigenvectors(r, k);
        }
        Vector trial;
        ValueGrad next;
        if (!line_search(tasks, cfg, pb, x, cur, d, true, trial, next)) {
            // Fall back to a short gradient step before giving up.
            d = scaled(cur.grad, -cfg.outer_step / std::max(gn, 1e-300));
            if (!line_search(tasks, cfg, pb, x, cur, d, true, trial, next)) break;
        }
        x = std::move(trial);
        cur = std::move(next);
        gn = norm2(cur.grad);
    }
    cur.inner_factors.clear();
    return TrainOutcome(finish(tasks, cfg, std::move(x), std::move(cur), gn, it, seed));
}

TrainOutcome train_lbfgs(std::span<const TaskData> tasks, const BilevelConfig& cfg, const Problem& pb, Vector x,
                         std::uint64_t seed) {
    ValueGrad cur = outer_value_grad(tasks, cfg, pb, x);
    std::deque<std::pair<Vector, Vector>> memory;  // (s, y)
    int it = 0;
    double gn = norm2(cur.grad);
    while (gn > cfg.outer_tol && it < cfg.outer_max_iters) {
        ++it;
        // Two-loop recursion.
        Vector d = cur.grad;
        std::vector<double> alphas(memory.size());
        for (std::size_t k = memory.size(); k-- > 0;) {
            const auto& [s, y] = memory[k];
            alphas[k] = dot(s, d) / dot(y, s);
            axpy(-alphas[k], y, d);
        }
        double gamma;
        if (memory.empty()) {
            gamma = cfg.outer_step / std::max(gn, 1e-300);
        } else {
            const auto& [s, y] = memory.back();
            gamma = dot(s, y) / dot(y, y);
        }
        scale(d, gamma);
        for (std::size_t k = 0; k < memory.size(); ++k) {
            const auto& [s, y] = memory[k];
            const double beta = dot(y, d) / dot(y, s);
            axpy(alphas[k] - beta, s, d);
        }
        scale(d, -1.0);
        if (!(dot(cur.grad, d) < 0.0)) {
            memory.clear();
            d = scaled(cur.grad, -cfg.outer_step / std::max(gn, 1e-300));
        }
        Vector trial;
        ValueGrad next;
        if (!line_search(tasks, cfg, pb, x, cur, d, false, trial, next)) break;
        Vector s = sub(trial, x);
        Vector y = sub(next.grad, cur.grad);
        if (dot(s, y) > 1e-12 * norm2(s) * norm2(y)) {
            memory.emplace_back(std::move(s), std::move(y));
            if (memory.size() > static_cast<std::size_t>(cfg.lbfgs_memory)) memory.pop_front();
        }
        x = std::move(trial);
        cur = std::move(next);
        gn = norm2(cur.grad);
    }
    return TrainOutcome(finish(tasks, cfg, std::move(x), std::move(cur), gn, it, seed));
}

}  // namespace

TrainOutcome train_meta(std::span<const TaskData> tasks, const BilevelConfig& cfg, const Problem& pb,
                        Vector lambda0, std::uint64_t seed) {
    cfg.validate();
    if (tasks.empty()) fail(ErrorCode::invalid_argument, "train_meta: need at least one task");
    require_dims(lambda0.size() == pb.dim(), "train_meta: initial lambda length mismatch");
    if (cfg.outer_method == OuterMethod::newton && pb.dim() <= cfg.newton_max_params)
        return train_newton(tasks, cfg, pb, std::move(lambda0), seed);
    return train_lbfgs(tasks, cfg, pb, std::move(lambda0), seed);
}

TrainOutcome train_meta(std::span<const TaskData> tasks, const BilevelConfig& cfg, const Architecture& arch,
                        std::uint64_t seed) {
    const Problem pb = Problem::mlp(arch, LossKind::cross_entropy);
    return train_meta(tasks, cfg, pb, init_params(arch, seed).values, seed);
}

double adapted_accuracy(const Problem& pb, std::span<const double> lambda, std::span<const TaskData> tasks,
                        const BilevelConfig& cfg) {
    const Architecture* arch = pb.architecture();
    if (!arch) fail(ErrorCode::invalid_argument, "adapted_accuracy: needs an MLP problem");
    if (tasks.empty()) return 0.0;
    std::vector<double> acc(tasks.size());
    parallel_for(tasks.size(), cfg.threads, [&](std::size_t i) {
        const InnerSolution sol = solve_inner(pb, lambda, tasks[i], cfg);
        std::size_t correct = 0;
        for (const Example& ex : tasks[i].val)
            if (predict(*arch, sol.theta, ex.x) == ex.label) ++correct;
        acc[i] = tasks[i].val.empty() ? 0.0 : static_cast<double>(correct) / tasks[i].val.size();
    });
    double s = 0.0;
    for (double a : acc) s += a;
    return s / static_cast<double>(tasks.size());
}

}  // namespace metaif
