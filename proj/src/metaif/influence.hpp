#pragma once

// Influence estimators for the bilevel objective in bilevel.hpp.
//
// Notation used below, for task i at the converged state:
//   H_i  = ∇²_θ Σ_train ℓ + δI            inner Hessian
//   J_i  = dθ_i/dλ = δ H_i⁻¹               (symmetric)
//   a_i  = ∂_θ L_O^i,  g_i = ∂_λ L_O^i + J_i a_i   total gradient
//   H_T  = Σ_i d²L_O^i/dλ²                 total Hessian, without the ridge
//
// Editing conventions (edited = λ* + edit_sign · delta):
//   task, instance_val, direct_baseline:  edited = λ* − delta
//   instance_train:                       edited = λ* + delta
//   inner:                                θ⁻ = θ_k − delta

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "metaif/bilevel.hpp"
#include "metaif/ihvp.hpp"

namespace metaif {

enum class HessianMode {
    // Σ_i [∂λλ L_O v + 2 J (∂θλ L_O v)] + Γ v with Γ = Σ_i ‖a_i‖₁.
    gamma_approx,
    // Implicit-function Hessian including the third-order inner term (probed
    // by differencing inner HVPs along J v).
    implicit,
    // Central differences of Σ_i g_i(λ) with inner problems re-solved.
    full_small,
};

const char* hessian_mode_name(HessianMode m);
HessianMode parse_hessian_mode(const std::string& s);

struct TotalHessianSpec {
    HessianMode mode = HessianMode::implicit;
    // gamma_approx only: include the 2 J ∂θλL_O cross term.
    bool cross_term = true;
    // Added on top of δ when inverting δI + H_T. Reported when nonzero.
    double extra_damping = 0.0;
    // Probe length ε·‖v‖ for the finite-difference pieces.
    double fd_step = 1e-4;
};

enum class InfluenceKind { task, instance_train, instance_val, inner, direct_baseline };

const char* influence_kind_name(InfluenceKind k);
InfluenceKind parse_influence_kind(const std::string& s);
int default_edit_sign(InfluenceKind k);

struct InfluenceVector {
    Vector delta;
    InfluenceKind kind = InfluenceKind::task;
    int task_id = 0;
    long example_index = -1;
    Backend backend = Backend::exact;
    int edit_sign = -1;
    std::map<std::string, double> diagnostics;
};

struct InfluenceOptions {
    Backend backend = Backend::exact;
    TotalHessianSpec hessian;
    NeumannConfig neumann;
    // Inner EK-FAC factors; the damping is fixed to δ/n by the inner
    // Hessian's structure and this field's damping is ignored.
    EkfacConfig ekfac;
    // Uniform task subset for H_T, rescaled by n/|S|.
    double task_fraction = 1.0;
    std::uint64_t sample_seed = 0;
    // Materialize H_T once (dim ≤ kExactGuard) and reuse it for all solves.
    bool materialize_outer = true;
    // Override for the instance_train editing sign (0 keeps +1).
    int train_edit_sign = 0;
};

class InfluenceAnalyzer {
public:
    InfluenceAnalyzer(MetaState state, Problem pb, std::vector<TaskData> tasks, InfluenceOptions opt = {});
    ~InfluenceAnalyzer();
    InfluenceAnalyzer(const InfluenceAnalyzer&) = delete;
    InfluenceAnalyzer& operator=(const InfluenceAnalyzer&) = delete;

    const MetaState& state() const { return state_; }
    const Problem& problem() const { return pb_; }
    const std::vector<TaskData>& tasks() const { return tasks_; }
    const InfluenceOptions& options() const { return opt_; }
    std::size_t dim() const { return pb_.dim(); }
    const TaskData& task(int task_id) const;

    // H_k⁻¹ v by the inner backend.
    Vector inner_inverse_apply(int task_id, std::span<const double> v) const;
    // (dθ_k/dλ) v = δ H_k⁻¹ v.
    Vector dtheta_dlambda_apply(int task_id, std::span<const double> v) const;
    Vector total_gradient_task(int task_id) const;
    const OuterPartials& partials(int task_id) const;

    CurvatureOperator total_hessian_operator(const TotalHessianSpec& spec) const;
    CurvatureOperator total_hessian_operator() const { return total_hessian_operator(opt_.hessian); }
    double gamma() const;
    const std::vector<std::size_t>& sampled_tasks() const { return sampled_; }

    // (δ + extra)I + H_T solved against v with the configured backend.
    Vector solve_total(std::span<const double> v, std::map<std::string, double>* diag = nullptr) const;

    InfluenceVector direct_if(int task_id) const;
    InfluenceVector task_if(int task_id) const;
    InfluenceVector inner_if(int task_id, std::size_t example_index) const;
    // P = a_kᵀ H_k⁻¹ ∇ℓ(z̃), the first-order change of L_O^k when z̃ leaves
    // the training split.
    double p_term(int task_id, std::size_t example_index) const;
    // D_λ P, ignoring the λ-dependence of H_k.
    Vector p_term_gradient(int task_id, std::size_t example_index) const;
    InfluenceVector instance_if_val(int task_id, std::size_t example_index) const;
    InfluenceVector instance_if_train(int task_id, std::size_t example_index) const;

private:
    struct TaskCache;
    TaskCache& cache(std::size_t idx) const;
    std::size_t index_of(int task_id) const;
    Vector outer_theta_hvp(std::size_t idx, std::span<const double> v) const;
    Vector implicit_task_hvp(std::size_t idx, std::span<const double> v, double fd_step) const;
    Vector total_gradient_sum_at(std::span<const double> lambda) const;
    InfluenceVector make(InfluenceKind kind, int task_id, long ex, Vector delta) const;

    MetaState state_;
    Problem pb_;
    std::vector<TaskData> tasks_;
    InfluenceOptions opt_;
    std::vector<std::size_t> sampled_;
    double sample_scale_ = 1.0;

    mutable std::vector<std::unique_ptr<TaskCache>> caches_;
    mutable std::unique_ptr<std::once_flag[]> cache_flags_;

    struct OuterCache;
    mutable std::unique_ptr<OuterCache> outer_;
    mutable std::once_flag outer_flag_;
};

// Σ over probe tasks of ∇_θ Σ_val ℓ(z; θ′) with θ′ = solve_inner(λ, task).
Vector probe_gradient(const Problem& pb, std::span<const double> lambda, std::span<const TaskData> probe,
                      const BilevelConfig& cfg);
// IS = ∇ · (λ* − edited): the first-order decrease of the probe loss when the
// influence is applied. Positive means removing the target helps the probe.
double influence_score(std::span<const double> probe_grad, const InfluenceVector& inf);
double influence_score(const Problem& pb, const MetaState& state, const InfluenceVector& inf,
                       const TaskData& new_task);

// λ* with each influence applied by its edit sign. Inner influences are
// rejected (they live in θ space).
Vector edit_model(const MetaState& state, std::span<const InfluenceVector> influences);

}  // namespace metaif
