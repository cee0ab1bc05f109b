#include "metaif/ihvp.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "metaif/error.hpp"

namespace metaif {

const char* backend_name(Backend b) {
    switch (b) {
        case Backend::exact: return "exact";
        case Backend::neumann: return "neumann";
        case Backend::ekfac: return "ekfac";
    }
    return "unknown";
}

Backend parse_backend(const std::string& s) {
    if (s == "exact") return Backend::exact;
    if (s == "neumann") return Backend::neumann;
    if (s == "ekfac") return Backend::ekfac;
    fail(ErrorCode::config, "unknown backend '" + s + "' (expected exact, neumann or ekfac)");
}

CurvatureOperator matrix_operator(DenseMatrix m, std::string description) {
    require_dims(m.square(), "matrix_operator: matrix must be square");
    const std::size_t n = m.rows();
    auto shared = std::make_shared<const DenseMatrix>(std::move(m));
    return {[shared](std::span<const double> v) { return matvec(*shared, v); }, n, std::move(description)};
}

DenseMatrix materialize(const CurvatureOperator& op) {
    if (op.dim > kExactGuard)
        fail(ErrorCode::invalid_argument, "operator dimension " + std::to_string(op.dim) +
                                              " exceeds the dense guard of " + std::to_string(kExactGuard));
    const std::size_t n = op.dim;
    DenseMatrix a(n, n);
    Vector e(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        e[j] = 1.0;
        const Vector col = op.apply(e);
        require_dims(col.size() == n, "materialize: operator returned a vector of the wrong length");
        for (std::size_t i = 0; i < n; ++i) a(i, j) = col[i];
        e[j] = 0.0;
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double s = 0.5 * (a(i, j) + a(j, i));
            a(i, j) = s;
            a(j, i) = s;
        }
    return a;
}

Vector ihvp_exact(const CurvatureOperator& op, std::span<const double> v, double damping) {
    require_dims(v.size() == op.dim, "ihvp_exact: vector length does not match the operator");
    const DenseMatrix a = materialize(op);
    const Vector x = Cholesky(a, damping).solve(v);
    Vector r = matvec(a, x);
    axpy(damping, x, r);
    const double vn = norm2(v);
    if (vn > 0.0) {
        axpy(-1.0, v, r);
        const double rel = norm2(r) / vn;
        if (!(rel <= 1e-9))
            fail(ErrorCode::numerical, "ihvp_exact: relative residual " + std::to_string(rel) + " above 1e-9");
    }
    return x;
}

void NeumannConfig::validate() const {
    if (!std::isfinite(scale)) fail(ErrorCode::config, "neumann.scale: must be finite");
    if (max_terms <= 0) fail(ErrorCode::config, "neumann.max_terms: must be > 0");
    if (!(stop_tol > 0.0)) fail(ErrorCode::config, "neumann.stop_tol: must be > 0");
    if (power_iters <= 0) fail(ErrorCode::config, "neumann.power_iters: must be > 0");
}

double power_iteration(const CurvatureOperator& op, double damping, int iters) {
    const std::size_t n = op.dim;
    if (n == 0) return 0.0;
    // Fixed, non-symmetric start so the result does not depend on an RNG and
    // is unlikely to be orthogonal to the top eigenvector.
    Vector x(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = 1.0 + 0.5 * std::sin(1.0 + static_cast<double>(i));
    scale(x, 1.0 / norm2(x));
    double est = 0.0;
    for (int k = 0; k < iters; ++k) {
        Vector y = op.apply(x);
        axpy(damping, x, y);
        est = dot(x, y);
        const double yn = norm2(y);
        if (!(yn > 0.0) || !std::isfinite(yn)) break;
        scale(y, 1.0 / yn);
        x = std::move(y);
    }
    return est;
}

NeumannResult ihvp_neumann(const CurvatureOperator& op, std::span<const double> v, double damping,
                           const NeumannConfig& cfg) {
    cfg.validate();
    require_dims(v.size() == op.dim, "ihvp_neumann: vector length does not match the operator");
    NeumannResult res;
    res.lambda_max = power_iteration(op, damping, cfg.power_iters);
    res.scale = cfg.scale > 0.0 ? cfg.scale : (res.lambda_max > 0.0 ? 0.9 / res.lambda_max : 1.0);
    if (res.scale * res.lambda_max >= 2.0)
        fail(ErrorCode::numerical, "ihvp_neumann: scale " + std::to_string(res.scale) +
                                       " times the estimated top eigenvalue " + std::to_string(res.lambda_max) +
                                       " is >= 2, the series diverges; use a smaller scale");
    const double alpha = res.scale;
    const std::size_t n = op.dim;
    res.x = scaled(v, alpha);
    const double v1 = std::max(norm1(v), 1e-300);
    for (int j = 0; j < cfg.max_terms; ++j) {
        Vector ax = op.apply(res.x);
        double change = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double step = alpha * (ax[i] + damping * res.x[i] - v[i]);
            res.x[i] -= step;
            change += std::abs(step);
        }
        res.iterations = j + 1;
        res.final_change = change;
        if (!std::isfinite(change) || change > 1e12 * alpha * v1)
            fail(ErrorCode::numerical, "ihvp_neumann: iteration diverged after " + std::to_string(j + 1) +
                                           " terms; use a smaller scale");
        if (change <= cfg.stop_tol) {
            res.converged = true;
            break;
        }
    }
    return res;
}

namespace {

// Q_Γᵀ ⊗ Q_Ωᵀ applied to a row-major (d_out × cols) block.
Vector project(const EkfacLayer& L, std::span<const double> v) {
    return kron_apply(L.gamma_eig.eigenvectors.transpose(), L.omega_eig.eigenvectors.transpose(), v);
}

Vector unproject(const EkfacLayer& L, std::span<const double> v) {
    return kron_apply(L.gamma_eig.eigenvectors, L.omega_eig.eigenvectors, v);
}

Vector plain_eigs(const EkfacLayer& L) {
    const Vector& lg = L.gamma_eig.eigenvalues;
    const Vector& lo = L.omega_eig.eigenvalues;
    Vector out(lg.size() * lo.size());
    for (std::size_t r = 0; r < lg.size(); ++r)
        for (std::size_t c = 0; c < lo.size(); ++c) out[r * lo.size() + c] = lg[r] * lo[c];
    return out;
}

}  // namespace

EkfacState ekfac_fit(const Architecture& arch, std::span<const double> params, Batch data, LossKind loss,
                     const EkfacConfig& cfg) {
    if (loss != LossKind::cross_entropy)
        fail(ErrorCode::invalid_argument, "ekfac_fit: the Fisher/Hessian match requires cross_entropy loss");
    if (data.empty()) fail(ErrorCode::invalid_argument, "ekfac_fit: empty data");
    require_dims(params.size() == arch.param_count(), "ekfac_fit: parameter length mismatch");
    const std::size_t L = arch.num_layers();
    const double inv_n = 1.0 / static_cast<double>(data.size());

    EkfacState st;
    st.arch = arch;
    st.num_examples = data.size();
    st.layers.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
        const LayerShape& s = arch.layers()[l];
        st.layers[l].omega = DenseMatrix(s.cols(), s.cols());
        st.layers[l].gamma = DenseMatrix(s.out, s.out);
    }

    std::vector<ExampleBackprop> bps;
    bps.reserve(data.size());
    for (const Example& ex : data) bps.push_back(backprop_example(arch, params, ex, loss));

    for (const ExampleBackprop& bp : bps) {
        for (std::size_t l = 0; l < L; ++l) {
            EkfacLayer& lay = st.layers[l];
            const Vector& h = bp.inputs[l];
            const Vector& g = bp.pre_grads[l];
            const std::size_t c = lay.omega.rows();
            for (std::size_t i = 0; i < c; ++i) {
                const double hi = i + 1 < c ? h[i] : 1.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double hj = j + 1 < c ? h[j] : 1.0;
                    lay.omega(i, j) += inv_n * hi * hj;
                }
            }
            for (std::size_t i = 0; i < g.size(); ++i)
                for (std::size_t j = 0; j < g.size(); ++j) lay.gamma(i, j) += inv_n * g[i] * g[j];
        }
    }

    for (std::size_t l = 0; l < L; ++l) {
        EkfacLayer& lay = st.layers[l];
        const LayerShape& s = arch.layers()[l];
        lay.omega_eig = eig_sym(lay.omega);
        lay.gamma_eig = eig_sym(lay.gamma);
        if (cfg.corrected) {
            lay.lambda_star.assign(s.size(), 0.0);
            for (const ExampleBackprop& bp : bps) {
                const Vector proj = project(lay, std::span<const double>(bp.grad).subspan(s.offset, s.size()));
                for (std::size_t i = 0; i < proj.size(); ++i) lay.lambda_star[i] += inv_n * proj[i] * proj[i];
            }
        } else {
            lay.lambda_star = plain_eigs(lay);
            for (double& x : lay.lambda_star) x = std::max(x, 0.0);
        }
        if (cfg.damping >= 0.0) {
            lay.damping = cfg.damping;
        } else {
            double mean = 0.0;
            for (double x : lay.lambda_star) mean += x;
            mean /= static_cast<double>(lay.lambda_star.size());
            lay.damping = std::max(0.1 * mean, 1e-8);
        }
    }
    return st;
}

namespace {

Vector ekfac_diag_apply(const EkfacState& state, std::span<const double> v, bool inverse) {
    require_dims(v.size() == state.arch.param_count(), "ekfac: vector layout does not match the fitted model");
    Vector out(v.size());
    for (std::size_t l = 0; l < state.layers.size(); ++l) {
        const EkfacLayer& lay = state.layers[l];
        const LayerShape& s = state.arch.layers()[l];
        if (inverse && !(lay.damping > 0.0) && std::any_of(lay.lambda_star.begin(), lay.lambda_star.end(),
                                                           [](double x) { return x <= 0.0; }))
            fail(ErrorCode::numerical, "ekfac_inverse_apply: layer " + std::to_string(l) +
                                           " has zero damping and a zero eigenvalue");
        Vector p = project(lay, v.subspan(s.offset, s.size()));
        for (std::size_t i = 0; i < p.size(); ++i)
            p[i] = inverse ? p[i] / (lay.lambda_star[i] + lay.damping) : p[i] * lay.lambda_star[i];
        const Vector back = unproject(lay, p);
        std::copy(back.begin(), back.end(), out.begin() + static_cast<std::ptrdiff_t>(s.offset));
    }
    return out;
}

}  // namespace

Vector ekfac_inverse_apply(const EkfacState& state, std::span<const double> v) {
    return ekfac_diag_apply(state, v, true);
}

Vector ekfac_apply(const EkfacState& state, std::span<const double> v) { return ekfac_diag_apply(state, v, false); }

DenseMatrix ekfac_block(const EkfacState& state, std::size_t layer, bool corrected) {
    if (layer >= state.layers.size()) fail(ErrorCode::invalid_argument, "ekfac_block: layer out of range");
    const EkfacLayer& lay = state.layers[layer];
    const Vector eigs = corrected ? lay.lambda_star : plain_eigs(lay);
    const DenseMatrix q = kron(lay.gamma_eig.eigenvectors, lay.omega_eig.eigenvectors);
    const std::size_t n = q.rows();
    DenseMatrix out(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            const double w = q(i, k) * eigs[k];
            if (w == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out(i, j) += w * q(j, k);
        }
    return out;
}

DenseMatrix exact_fisher_block(const Architecture& arch, std::span<const double> params, Batch data,
                               LossKind loss, std::size_t layer) {
    if (layer >= arch.num_layers()) fail(ErrorCode::invalid_argument, "exact_fisher_block: layer out of range");
    if (data.empty()) fail(ErrorCode::invalid_argument, "exact_fisher_block: empty data");
    const LayerShape& s = arch.layers()[layer];
    DenseMatrix f(s.size(), s.size());
    const double inv_n = 1.0 / static_cast<double>(data.size());
    for (const Example& ex : data) {
        const ExampleBackprop bp = backprop_example(arch, params, ex, loss);
        const double* g = bp.grad.data() + s.offset;
        for (std::size_t i = 0; i < s.size(); ++i)
            for (std::size_t j = 0; j < s.size(); ++j) f(i, j) += inv_n * g[i] * g[j];
    }
    return f;
}

}  // namespace metaif
