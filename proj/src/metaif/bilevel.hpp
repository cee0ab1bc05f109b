#pragma once

// Bilevel meta-learning objective with a proximal inner problem:
//
//   θ_i(λ) = argmin_θ  L_I(λ, θ) = Σ_{z∈train_i} ℓ(z; θ) + (δ/2)‖θ − λ‖²
//   λ*     = argmin_λ  Σ_i L_O(λ, θ_i(λ)) + (δ/2)‖λ‖²
//
// L_O is the summed validation loss (main_text form) or that plus the same
// proximal term (appendix_proximal form). The outer problem is solved on the
// total gradient with every inner problem re-solved to tolerance, so both
// optimality conditions hold at the returned state.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metaif/linalg.hpp"
#include "metaif/model.hpp"
#include "metaif/problem.hpp"

namespace metaif {

struct TaskData {
    int id = 0;
    std::vector<Example> train;
    std::vector<Example> val;
    bool corrupted = false;
};

enum class OuterRegForm { main_text, appendix_proximal };

const char* reg_form_name(OuterRegForm f);
OuterRegForm parse_reg_form(const std::string& s);

// Outer solver. newton uses the dense total Hessian and needs
// P ≤ newton_max_params; lbfgs only needs total gradients.
enum class OuterMethod { newton, lbfgs };

const char* outer_method_name(OuterMethod m);
OuterMethod parse_outer_method(const std::string& s);

struct BilevelConfig {
    double delta = 1.0;
    double inner_tol = 1e-8;
    int inner_max_iters = 500;
    double outer_tol = 1e-6;
    int outer_max_iters = 2000;
    // Length of the first L-BFGS step (and of gradient fallback steps) along
    // the negative total gradient.
    double outer_step = 0.05;
    OuterRegForm outer_reg_form = OuterRegForm::main_text;
    OuterMethod outer_method = OuterMethod::newton;
    // Inner problems (and the Newton outer solver) use damped Newton up to
    // this many parameters; above it inner problems fall back to gradient
    // descent with backtracking and the outer solver to L-BFGS.
    std::size_t newton_max_params = 1000;
    int lbfgs_memory = 10;
    // Worker threads for per-task work; 0 = hardware concurrency.
    unsigned threads = 0;

    // Throws ErrorCode::config naming the offending field.
    void validate() const;
};

struct InnerSolution {
    Vector theta;
    double grad_norm = 0.0;
    int iterations = 0;
};

double inner_loss(const Problem& pb, std::span<const double> lambda, std::span<const double> theta,
                  const TaskData& task, const BilevelConfig& cfg);
double outer_loss(const Problem& pb, std::span<const double> lambda, std::span<const double> theta,
                  const TaskData& task, const BilevelConfig& cfg);
// ∂_θ L_I.
Vector inner_grad(const Problem& pb, std::span<const double> lambda, std::span<const double> theta,
                  const TaskData& task, const BilevelConfig& cfg);

struct OuterPartials {
    double value = 0.0;
    Vector d_lambda;  // ∂_λ L_O (zero in main_text form)
    Vector d_theta;   // ∂_θ L_O
};

OuterPartials outer_partials(const Problem& pb, std::span<const double> lambda, std::span<const double> theta,
                             const TaskData& task, const BilevelConfig& cfg);

// Minimizes L_I(λ, ·) starting from `init` (λ when empty). Throws
// NonConvergence carrying the achieved gradient norm.
InnerSolution solve_inner(const Problem& pb, std::span<const double> lambda, const TaskData& task,
                          const BilevelConfig& cfg, std::span<const double> init = {});

struct MetaState {
    Vector lambda_star;
    std::vector<int> task_ids;
    std::vector<Vector> thetas;  // aligned with task_ids
    std::vector<double> inner_grad_norms;
    BilevelConfig config;
    std::uint64_t seed = 0;
    bool converged = false;
    double outer_grad_norm = 0.0;
    int outer_iterations = 0;

    std::size_t index_of(int task_id) const;
    const Vector& theta(int task_id) const { return thetas[index_of(task_id)]; }
};

// Result of train_meta. state() is the checked accessor; a non-converged run
// is only reachable through unconverged().
class TrainOutcome {
public:
    explicit TrainOutcome(MetaState s) : state_(std::move(s)) {}

    bool converged() const { return state_.converged; }
    const MetaState& state() const;
    MetaState take();
    const MetaState& unconverged() const { return state_; }

private:
    MetaState state_;
};

struct ValueGrad {
    double value = 0.0;
    Vector grad;  // D_λ of Σ_i L_O + (δ/2)‖λ‖²
    std::vector<Vector> thetas;
    std::vector<double> inner_norms;
    std::vector<Cholesky> inner_factors;  // of H_i, when requested
};

// Value function V(λ) = Σ_i L_O(λ, θ_i(λ)) + (δ/2)‖λ‖² and its total
// gradient. `warm` optionally seeds the inner solvers.
ValueGrad outer_value_grad(std::span<const TaskData> tasks, const BilevelConfig& cfg, const Problem& pb,
                           std::span<const double> lambda, const std::vector<Vector>* warm = nullptr,
                           bool keep_factors = false);

// d²/dλ² L_O(λ, θ_i(λ)) at an inner solution, densely:
//   J M J  (+ δI − 2δJ in the proximal form),  J = δ H_i⁻¹,
//   M = ∂θθ L_O − ∂θ(∇²L_I) · H_i⁻¹ ∂θL_O,
// the third-order factor taken by central differences of inner Hessians
// along H_i⁻¹ ∂θL_O with probe length `fd_step`.
DenseMatrix task_total_hessian(const Problem& pb, std::span<const double> lambda, std::span<const double> theta,
                               const TaskData& task, const BilevelConfig& cfg, const Cholesky& inner_factor,
                               double fd_step = 1e-4);

TrainOutcome train_meta(std::span<const TaskData> tasks, const BilevelConfig& cfg, const Problem& pb,
                        Vector lambda0, std::uint64_t seed = 0);
// MLP + cross-entropy convenience: λ initialized by init_params(arch, seed).
TrainOutcome train_meta(std::span<const TaskData> tasks, const BilevelConfig& cfg, const Architecture& arch,
                        std::uint64_t seed);

// Mean validation accuracy of the adapted models θ'(λ) over `tasks`.
double adapted_accuracy(const Problem& pb, std::span<const double> lambda, std::span<const TaskData> tasks,
                        const BilevelConfig& cfg);

}  // namespace metaif
