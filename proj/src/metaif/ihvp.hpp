#pragma once

// Inverse curvature-vector products (A + damping·I)⁻¹ v with three
// interchangeable backends: exact dense solve, truncated Neumann series and
// EK-FAC.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "metaif/linalg.hpp"
#include "metaif/model.hpp"

namespace metaif {

enum class Backend { exact, neumann, ekfac };

const char* backend_name(Backend b);
Backend parse_backend(const std::string& s);

struct CurvatureOperator {
    std::function<Vector(std::span<const double>)> apply;
    std::size_t dim = 0;
    std::string description;

    Vector operator()(std::span<const double> v) const { return apply(v); }
};

CurvatureOperator matrix_operator(DenseMatrix m, std::string description = "dense matrix");
// Column-by-column materialization through op.apply. Symmetrized.
DenseMatrix materialize(const CurvatureOperator& op);

inline constexpr std::size_t kExactGuard = 4000;

// Materializes A then solves with Cholesky. Relative residual is checked
// against 1e-9.
Vector ihvp_exact(const CurvatureOperator& op, std::span<const double> v, double damping);

struct NeumannConfig {
    double scale = 0.0;  // α; ≤ 0 means 0.9 / λ̂_max(A + damping·I)
    int max_terms = 10000;
    double stop_tol = 1e-10;  // on ‖x_{j+1} − x_j‖₁
    int power_iters = 30;

    void validate() const;
};

struct NeumannResult {
    Vector x;
    int iterations = 0;
    double final_change = 0.0;
    double scale = 0.0;
    double lambda_max = 0.0;  // power-iteration estimate for A + damping·I
    bool converged = false;   // false: max_terms reached with change > stop_tol
};

// Largest eigenvalue estimate of a symmetric PSD operator (power iteration
// from a fixed start vector).
double power_iteration(const CurvatureOperator& op, double damping, int iters);

// x₀ = αv, x_{j+1} = x_j − α((A + damping·I)x_j − v). Before iterating the
// contraction factor is checked: α·λ̂_max ≥ 2 raises a numerical error.
NeumannResult ihvp_neumann(const CurvatureOperator& op, std::span<const double> v, double damping,
                           const NeumannConfig& cfg);

// Eigenvalue-corrected Kronecker factors of the per-layer empirical Fisher.
// For a layer with weight block W (d_out × (d_in+1), row-major) the
// per-example gradient is g ⊗ h̃ with g = ∂ℓ/∂o and h̃ = (h, 1), so the
// block Fisher factors as Γ ⊗ Ω.
struct EkfacLayer {
    DenseMatrix omega;  // (d_in+1)², activation moment
    DenseMatrix gamma;  // d_out², pre-activation gradient moment
    EigenDecomposition omega_eig;
    EigenDecomposition gamma_eig;
    Vector lambda_star;  // corrected eigenvalues, length d_out·(d_in+1)
    double damping = 0.0;
};

struct EkfacState {
    Architecture arch;
    std::size_t num_examples = 0;
    std::vector<EkfacLayer> layers;
};

struct EkfacConfig {
    // Per-layer damping; < 0 selects max(0.1 · mean Λ*, 1e-8).
    double damping = -1.0;
    // When false Λ* is replaced by the plain K-FAC product Λ_Γ ⊗ Λ_Ω.
    bool corrected = true;
};

EkfacState ekfac_fit(const Architecture& arch, std::span<const double> params, Batch data, LossKind loss,
                     const EkfacConfig& cfg = {});

// Per layer: (Q_Γ ⊗ Q_Ω)(Λ* + λ_l)⁻¹(Q_Γ ⊗ Q_Ω)ᵀ v.
Vector ekfac_inverse_apply(const EkfacState& state, std::span<const double> v);
// (Q_Γ ⊗ Q_Ω) Λ* (Q_Γ ⊗ Q_Ω)ᵀ v, the approximated Fisher itself.
Vector ekfac_apply(const EkfacState& state, std::span<const double> v);

// Dense block of layer l: (Q_Γ⊗Q_Ω) diag(Λ*) (Q_Γ⊗Q_Ω)ᵀ, or with plain
// K-FAC eigenvalues when `corrected` is false. Test and diagnostic helper.
DenseMatrix ekfac_block(const EkfacState& state, std::size_t layer, bool corrected);
// Exact per-layer empirical Fisher n⁻¹ Σ_j g_j g_jᵀ restricted to layer l.
DenseMatrix exact_fisher_block(const Architecture& arch, std::span<const double> params, Batch data,
                               LossKind loss, std::size_t layer);

}  // namespace metaif
