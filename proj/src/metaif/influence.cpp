#include "metaif/influence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "metaif/error.hpp"
#include "metaif/parallel.hpp"
#include "metaif/random.hpp"

namespace metaif {

const char* hessian_mode_name(HessianMode m) {
    switch (m) {
        case HessianMode::gamma_approx: return "gamma_approx";
        case HessianMode::implicit: return "implicit";
        case HessianMode::full_small: return "full_small";
    }
    return "unknown";
}

HessianMode parse_hessian_mode(const std::string& s) {
    if (s == "gamma_approx") return HessianMode::gamma_approx;
    if (s == "implicit") return HessianMode::implicit;
    if (s == "full_small") return HessianMode::full_small;
    fail(ErrorCode::config, "unknown total Hessian mode '" + s + "'");
}

const char* influence_kind_name(InfluenceKind k) {
    switch (k) {
        case InfluenceKind::task: return "task";
        case InfluenceKind::instance_train: return "instance_train";
        case InfluenceKind::instance_val: return "instance_val";
        case InfluenceKind::inner: return "inner";
        case InfluenceKind::direct_baseline: return "direct_baseline";
    }
    return "unknown";
}

InfluenceKind parse_influence_kind(const std::string& s) {
    if (s == "task") return InfluenceKind::task;
    if (s == "instance_train") return InfluenceKind::instance_train;
    if (s == "instance_val") return InfluenceKind::instance_val;
    if (s == "inner") return InfluenceKind::inner;
    if (s == "direct_baseline") return InfluenceKind::direct_baseline;
    fail(ErrorCode::parse, "unknown influence kind '" + s + "'");
}

int default_edit_sign(InfluenceKind k) { return k == InfluenceKind::instance_train ? +1 : -1; }

struct InfluenceAnalyzer::TaskCache {
    OuterPartials part;
    bool ekfac = false;
    Cholesky chol;
    EkfacState ek;
    double inv_n = 1.0;
    Vector r;  // H⁻¹ a
};

struct InfluenceAnalyzer::OuterCache {
    DenseMatrix matrix;  // H_T, when materialized
    bool has_matrix = false;
    Cholesky chol;
    bool has_chol = false;
};

namespace {

bool appendix(const BilevelConfig& cfg) { return cfg.outer_reg_form == OuterRegForm::appendix_proximal; }

}  // namespace

InfluenceAnalyzer::InfluenceAnalyzer(MetaState state, Problem pb, std::vector<TaskData> tasks, InfluenceOptions opt)
    : state_(std::move(state)), pb_(std::move(pb)), opt_(opt) {
    if (!state_.converged)
        throw NonConvergence("influence analysis needs a converged meta state (total gradient norm " +
                                 std::to_string(state_.outer_grad_norm) + ")",
                             state_.outer_grad_norm);
    require_dims(state_.lambda_star.size() == pb_.dim(), "influence: state does not match the problem");
    opt_.neumann.validate();
    if (!(opt_.task_fraction > 0.0 && opt_.task_fraction <= 1.0))
        fail(ErrorCode::config, "influence.task_fraction: must be in (0, 1]");
    if (!(opt_.hessian.extra_damping >= 0.0)) fail(ErrorCode::config, "influence.extra_damping: must be >= 0");
    if (!(opt_.hessian.fd_step > 0.0)) fail(ErrorCode::config, "influence.fd_step: must be > 0");
    if (opt_.backend == Backend::ekfac &&
        (pb_.architecture() == nullptr || pb_.loss->loss_kind() != LossKind::cross_entropy ||
         pb_.inner_quadratic.rows() != 0))
        fail(ErrorCode::config, "ekfac backend needs a cross-entropy MLP problem without extra quadratic terms");

    // Align the task list with the state's task order.
    tasks_.reserve(state_.task_ids.size());
    for (int id : state_.task_ids) {
        auto it = std::find_if(tasks.begin(), tasks.end(), [id](const TaskData& t) { return t.id == id; });
        if (it == tasks.end()) fail(ErrorCode::invalid_argument, "influence: task " + std::to_string(id) + " missing");
        tasks_.push_back(*it);
    }
    const std::size_t n = tasks_.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double norm = state_.inner_grad_norms.size() == n ? state_.inner_grad_norms[i] : 0.0;
        if (!(norm <= state_.config.inner_tol))
            throw NonConvergence("influence: inner problem of task " + std::to_string(tasks_[i].id) +
                                     " is not converged",
                                 norm);
    }

    if (opt_.task_fraction >= 1.0) {
        sampled_.resize(n);
        std::iota(sampled_.begin(), sampled_.end(), std::size_t{0});
    } else {
        const std::size_t k =
            std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(opt_.task_fraction * n)));
        Rng rng = Rng::stream(opt_.sample_seed, 0x5A3D);
        sampled_ = rng.sample_without_replacement(n, k);
        std::sort(sampled_.begin(), sampled_.end());
    }
    sample_scale_ = static_cast<double>(n) / static_cast<double>(sampled_.size());

    caches_.resize(n);
    cache_flags_ = std::make_unique<std::once_flag[]>(n);
}

InfluenceAnalyzer::~InfluenceAnalyzer() = default;

std::size_t InfluenceAnalyzer::index_of(int task_id) const { return state_.index_of(task_id); }

const TaskData& InfluenceAnalyzer::task(int task_id) const { return tasks_[index_of(task_id)]; }

InfluenceAnalyzer::TaskCache& InfluenceAnalyzer::cache(std::size_t idx) const {
    std::call_once(cache_flags_[idx], [&] {
        auto c = std::make_unique<TaskCache>();
        const TaskData& t = tasks_[idx];
        const Vector& theta = state_.thetas[idx];
        const BilevelConfig& cfg = state_.config;
        c->part = outer_partials(pb_, state_.lambda_star, theta, t, cfg);
        if (opt_.backend == Backend::ekfac) {
            // H ≈ n F̂ + δI = n (F̂ + (δ/n) I).
            const double n = static_cast<double>(t.train.size());
            EkfacConfig ec = opt_.ekfac;
            ec.damping = cfg.delta / n;
            c->ek = ekfac_fit(*pb_.architecture(), theta, t.train, LossKind::cross_entropy, ec);
            c->ekfac = true;
            c->inv_n = 1.0 / n;
        } else {
            c->chol = Cholesky(pb_.train_hessian(theta, t.train), cfg.delta);
        }
        if (c->ekfac) {
            c->r = ekfac_inverse_apply(c->ek, c->part.d_theta);
            scale(c->r, c->inv_n);
        } else {
            c->r = c->chol.solve(c->part.d_theta);
        }
        caches_[idx] = std::move(c);
    });
    return *caches_[idx];
}

Vector InfluenceAnalyzer::inner_inverse_apply(int task_id, std::span<const double> v) const {
    require_dims(v.size() == dim(), "inner_inverse_apply: vector length mismatch");
    const std::size_t idx = index_of(task_id);
    const TaskCache& c = cache(idx);
    if (c.ekfac) {
        Vector x = ekfac_inverse_apply(c.ek, v);
        scale(x, c.inv_n);
        return x;
    }
    return c.chol.solve(v);
}

Vector InfluenceAnalyzer::dtheta_dlambda_apply(int task_id, std::span<const double> v) const {
    // -∂λ∂θ L_I = δI for the proximal inner objective.
    Vector x = inner_inverse_apply(task_id, v);
    scale(x, state_.config.delta);
    return x;
}

const OuterPartials& InfluenceAnalyzer::partials(int task_id) const { return cache(index_of(task_id)).part; }

Vector InfluenceAnalyzer::total_gradient_task(int task_id) const {
    const OuterPartials& p = partials(task_id);
    Vector g = dtheta_dlambda_apply(task_id, p.d_theta);
    axpy(1.0, p.d_lambda, g);
    return g;
}

double InfluenceAnalyzer::gamma() const {
    double g = 0.0;
    for (std::size_t i : sampled_) g += norm1(cache(i).part.d_theta);
    return sample_scale_ * g;
}

// ∂θθ L_O^i v.
Vector InfluenceAnalyzer::outer_theta_hvp(std::size_t idx, std::span<const double> v) const {
    Vector out = pb_.val_hvp(state_.thetas[idx], tasks_[idx].val, v);
    if (appendix(state_.config)) axpy(state_.config.delta, v, out);
    return out;
}

Vector InfluenceAnalyzer::implicit_task_hvp(std::size_t idx, std::span<const double> v, double fd_step) const {
    const TaskCache& c = cache(idx);
    const TaskData& t = tasks_[idx];
    const Vector& theta = state_.thetas[idx];
    const double delta = state_.config.delta;
    const bool app = appendix(state_.config);

    const Vector u = dtheta_dlambda_apply(t.id, v);
    Vector inner = outer_theta_hvp(idx, u);
    if (app) axpy(-delta, v, inner);

    // Third-order inner term: (d/dε) ∇²L_I(θ + εu) H⁻¹a.
    const double un = norm2(u);
    if (un > 0.0 && norm2(c.r) > 0.0) {
        const double h = fd_step / un;
        Vector plus(theta), minus(theta);
        axpy(h, u, plus);
        axpy(-h, u, minus);
        const Vector hp = pb_.train_hvp(plus, t.train, c.r);
        const Vector hm = pb_.train_hvp(minus, t.train, c.r);
        for (std::size_t j = 0; j < inner.size(); ++j) inner[j] -= (hp[j] - hm[j]) / (2.0 * h);
    }
    Vector out = dtheta_dlambda_apply(t.id, inner);
    if (app) {
        axpy(delta, v, out);
        axpy(-delta, u, out);
    }
    return out;
}

Vector InfluenceAnalyzer::total_gradient_sum_at(std::span<const double> lambda) const {
    const BilevelConfig& cfg = state_.config;
    std::vector<Vector> grads(sampled_.size());
    for (std::size_t s = 0; s < sampled_.size(); ++s) {
        const std::size_t i = sampled_[s];
        const TaskData& t = tasks_[i];
        const InnerSolution sol = solve_inner(pb_, lambda, t, cfg, state_.thetas[i]);
        const OuterPartials p = outer_partials(pb_, lambda, sol.theta, t, cfg);
        Vector g = Cholesky(pb_.train_hessian(sol.theta, t.train), cfg.delta).solve(p.d_theta);
        scale(g, cfg.delta);
        axpy(1.0, p.d_lambda, g);
        grads[s] = std::move(g);
    }
    Vector sum(dim(), 0.0);
    for (const Vector& g : grads) axpy(sample_scale_, g, sum);
    return sum;
}

CurvatureOperator InfluenceAnalyzer::total_hessian_operator(const TotalHessianSpec& spec) const {
    const std::size_t P = dim();
    const double delta = state_.config.delta;
    const bool app = appendix(state_.config);
    CurvatureOperator op;
    op.dim = P;
    op.description = std::string("total Hessian (") + hessian_mode_name(spec.mode) + ")";
    switch (spec.mode) {
        case HessianMode::gamma_approx: {
            const double g = gamma();
            op.apply = [this, g, delta, app, spec](std::span<const double> v) {
                Vector out = scaled(v, g);
                if (!app) return out;  // ∂λλ and ∂θλ of L_O vanish
                for (std::size_t i : sampled_) {
                    Vector term = scaled(v, delta);
                    if (spec.cross_term) {
                        // 2 J (∂θλ L_O v) with ∂θλ L_O = -δI.
                        const Vector jv = dtheta_dlambda_apply(tasks_[i].id, v);
                        axpy(-2.0 * delta, jv, term);
                    }
                    axpy(sample_scale_, term, out);
                }
                return out;
            };
            break;
        }
        case HessianMode::implicit:
            op.apply = [this, P, spec](std::span<const double> v) {
                Vector out(P, 0.0);
                for (std::size_t i : sampled_) axpy(sample_scale_, implicit_task_hvp(i, v, spec.fd_step), out);
                return out;
            };
            break;
        case HessianMode::full_small:
            if (P > kExactGuard)
                fail(ErrorCode::invalid_argument, "full_small total Hessian needs at most " +
                                                      std::to_string(kExactGuard) + " parameters");
            op.apply = [this, P, spec](std::span<const double> v) {
                const double vn = norm2(v);
                if (vn == 0.0) return Vector(P, 0.0);
                const double h = spec.fd_step / vn;
                Vector lp(state_.lambda_star), lm(state_.lambda_star);
                axpy(h, v, lp);
                axpy(-h, v, lm);
                Vector out = total_gradient_sum_at(lp);
                axpy(-1.0, total_gradient_sum_at(lm), out);
                scale(out, 1.0 / (2.0 * h));
                return out;
            };
            break;
    }
    return op;
}

Vector InfluenceAnalyzer::solve_total(std::span<const double> v, std::map<std::string, double>* diag) const {
    require_dims(v.size() == dim(), "solve_total: vector length mismatch");
    const double damp = state_.config.delta + opt_.hessian.extra_damping;
    const bool materialize_it = opt_.materialize_outer && dim() <= kExactGuard;
    std::call_once(outer_flag_, [&] {
        auto c = std::make_unique<OuterCache>();
        if (materialize_it) {
            if (opt_.hessian.mode == HessianMode::implicit && opt_.backend != Backend::ekfac) {
                // Dense per-task blocks: P probes of the third-order term collapse
                // into two Hessian evaluations per task.
                const std::size_t P = dim();
                std::vector<DenseMatrix> parts(sampled_.size());
                parallel_for(sampled_.size(), state_.config.threads, [&](std::size_t s) {
                    const std::size_t i = sampled_[s];
                    parts[s] = task_total_hessian(pb_, state_.lambda_star, state_.thetas[i], tasks_[i], state_.config,
                                                  cache(i).chol, opt_.hessian.fd_step);
                });
                c->matrix = DenseMatrix(P, P);
                for (const DenseMatrix& h : parts) axpy(sample_scale_, h.data(), c->matrix.data());
            } else {
                c->matrix = materialize(total_hessian_operator());
            }
            c->has_matrix = true;
            if (opt_.backend == Backend::exact) {
                c->chol = Cholesky(c->matrix, damp);
                c->has_chol = true;
            }
        }
        outer_ = std::move(c);
    });
    if (diag) {
        (*diag)["damping"] = damp;
        if (opt_.hessian.extra_damping != 0.0) (*diag)["extra_damping"] = opt_.hessian.extra_damping;
        (*diag)["sampled_tasks"] = static_cast<double>(sampled_.size());
    }
    if (opt_.backend == Backend::exact) {
        if (outer_->has_chol) return outer_->chol.solve(v);
        return ihvp_exact(total_hessian_operator(), v, damp);
    }
    const CurvatureOperator op =
        outer_->has_matrix ? matrix_operator(outer_->matrix, "materialized total Hessian") : total_hessian_operator();
    NeumannResult res = ihvp_neumann(op, v, damp, opt_.neumann);
    if (diag) {
        (*diag)["neumann_iterations"] = res.iterations;
        (*diag)["neumann_final_change"] = res.final_change;
        (*diag)["neumann_scale"] = res.scale;
        (*diag)["neumann_converged"] = res.converged ? 1.0 : 0.0;
    }
    return std::move(res.x);
}

InfluenceVector InfluenceAnalyzer::make(InfluenceKind kind, int task_id, long ex, Vector delta) const {
    if (!all_finite(delta)) fail(ErrorCode::numerical, std::string(influence_kind_name(kind)) + ": non-finite delta");
    InfluenceVector out;
    out.delta = std::move(delta);
    out.kind = kind;
    out.task_id = task_id;
    out.example_index = ex;
    out.backend = opt_.backend;
    out.edit_sign = default_edit_sign(kind);
    if (kind == InfluenceKind::instance_train && opt_.train_edit_sign != 0) out.edit_sign = opt_.train_edit_sign;
    return out;
}

InfluenceVector InfluenceAnalyzer::direct_if(int task_id) const {
    const OuterPartials& p = partials(task_id);
    // Σ_i ∂λλ L_O^i is n·δI in the proximal form and zero otherwise.
    const double n = static_cast<double>(tasks_.size());
    const double denom = state_.config.delta * (1.0 + (appendix(state_.config) ? n : 0.0));
    InfluenceVector out = make(InfluenceKind::direct_baseline, task_id, -1, scaled(p.d_lambda, -1.0 / denom));
    out.diagnostics["denominator"] = denom;
    return out;
}

InfluenceVector InfluenceAnalyzer::task_if(int task_id) const {
    const Vector g = total_gradient_task(task_id);
    std::map<std::string, double> diag;
    Vector delta = solve_total(g, &diag);
    scale(delta, -1.0);
    InfluenceVector out = make(InfluenceKind::task, task_id, -1, std::move(delta));
    out.diagnostics = std::move(diag);
    out.diagnostics["total_gradient_norm"] = norm2(g);
    return out;
}

namespace {

const Example& pick(const std::vector<Example>& set, std::size_t idx, const char* what, int task_id) {
    if (idx >= set.size())
        fail(ErrorCode::invalid_argument, std::string(what) + " index " + std::to_string(idx) + " out of range for task " +
                                              std::to_string(task_id));
    return set[idx];
}

}  // namespace

InfluenceVector InfluenceAnalyzer::inner_if(int task_id, std::size_t example_index) const {
    const std::size_t idx = index_of(task_id);
    const Example& z = pick(tasks_[idx].train, example_index, "training example", task_id);
    const Vector b = pb_.loss->grad(state_.thetas[idx], Batch(&z, 1));
    Vector delta = inner_inverse_apply(task_id, b);
    scale(delta, -1.0);
    return make(InfluenceKind::inner, task_id, static_cast<long>(example_index), std::move(delta));
}

double InfluenceAnalyzer::p_term(int task_id, std::size_t example_index) const {
    const InfluenceVector in = inner_if(task_id, example_index);
    return -dot(partials(task_id).d_theta, in.delta);
}

Vector InfluenceAnalyzer::p_term_gradient(int task_id, std::size_t example_index) const {
    const std::size_t idx = index_of(task_id);
    const Example& z = pick(tasks_[idx].train, example_index, "training example", task_id);
    const Vector& theta = state_.thetas[idx];
    const TaskCache& c = cache(idx);
    const Vector b = pb_.loss->grad(theta, Batch(&z, 1));
    const Vector s = inner_inverse_apply(task_id, b);
    // D_λP = ∂λθL_O s + J [∂θθL_O s + ∇²ℓ(z̃) H⁻¹a]
    Vector inner = outer_theta_hvp(idx, s);
    axpy(1.0, pb_.loss->hvp(theta, Batch(&z, 1), c.r), inner);
    Vector out = dtheta_dlambda_apply(task_id, inner);
    if (appendix(state_.config)) axpy(-state_.config.delta, s, out);
    return out;
}

InfluenceVector InfluenceAnalyzer::instance_if_val(int task_id, std::size_t example_index) const {
    const std::size_t idx = index_of(task_id);
    const Example& z = pick(tasks_[idx].val, example_index, "validation example", task_id);
    // Total derivative of ℓ(z̃; θ_k(λ)); ℓ has no explicit λ term.
    const Vector t = dtheta_dlambda_apply(task_id, pb_.loss->grad(state_.thetas[idx], Batch(&z, 1)));
    std::map<std::string, double> diag;
    Vector delta = solve_total(t, &diag);
    scale(delta, -1.0);
    InfluenceVector out = make(InfluenceKind::instance_val, task_id, static_cast<long>(example_index), std::move(delta));
    out.diagnostics = std::move(diag);
    return out;
}

InfluenceVector InfluenceAnalyzer::instance_if_train(int task_id, std::size_t example_index) const {
    const Vector dp = p_term_gradient(task_id, example_index);
    std::map<std::string, double> diag;
    Vector delta = solve_total(dp, &diag);
    scale(delta, -1.0);
    InfluenceVector out =
        make(InfluenceKind::instance_train, task_id, static_cast<long>(example_index), std::move(delta));
    out.diagnostics = std::move(diag);
    out.diagnostics["p_value"] = p_term(task_id, example_index);
    // D_λP drops the λ-dependence of H_k⁻¹.
    out.diagnostics["approx_ignores_inner_hessian_derivative"] = 1.0;
    return out;
}

Vector probe_gradient(const Problem& pb, std::span<const double> lambda, std::span<const TaskData> probe,
                      const BilevelConfig& cfg) {
    std::vector<Vector> grads(probe.size());
    parallel_for(probe.size(), cfg.threads, [&](std::size_t i) {
        const InnerSolution sol = solve_inner(pb, lambda, probe[i], cfg);
        grads[i] = pb.loss->grad(sol.theta, probe[i].val);
    });
    Vector sum(pb.dim(), 0.0);
    for (const Vector& g : grads) axpy(1.0, g, sum);
    return sum;
}

double influence_score(std::span<const double> probe_grad, const InfluenceVector& inf) {
    require_dims(probe_grad.size() == inf.delta.size(), "influence_score: length mismatch");
    // λ* − edited = −edit_sign · delta.
    return -static_cast<double>(inf.edit_sign) * dot(probe_grad, inf.delta);
}

double influence_score(const Problem& pb, const MetaState& state, const InfluenceVector& inf,
                       const TaskData& new_task) {
    const Vector g = probe_gradient(pb, state.lambda_star, std::span<const TaskData>(&new_task, 1), state.config);
    return influence_score(g, inf);
}

Vector edit_model(const MetaState& state, std::span<const InfluenceVector> influences) {
    Vector out = state.lambda_star;
    for (const InfluenceVector& inf : influences) {
        if (inf.kind == InfluenceKind::inner)
            fail(ErrorCode::invalid_argument, "edit_model: inner influences act on θ, not on λ");
        require_dims(inf.delta.size() == out.size(), "edit_model: influence layout does not match λ*");
        axpy(static_cast<double>(inf.edit_sign), inf.delta, out);
    }
    return out;
}

}  // namespace metaif
