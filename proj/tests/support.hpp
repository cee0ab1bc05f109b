#pragma once

// Test-side helpers: random data and closed-form oracles written directly
// against Eigen so they share no code with the library.

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <vector>

#include "metaif/bilevel.hpp"
#include "metaif/linalg.hpp"
#include "metaif/model.hpp"
#include "metaif/problem.hpp"

namespace testsupport {

using metaif::DenseMatrix;
using metaif::Example;
using metaif::TaskData;
using metaif::Vector;

inline Vector random_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    Vector v(n);
    for (double& x : v) x = nd(rng);
    return v;
}

inline DenseMatrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    DenseMatrix m(r, c);
    std::normal_distribution<double> nd(0.0, scale);
    for (double& x : m.data()) x = nd(rng);
    return m;
}

// Q diag(eigs) Qᵀ with a random orthogonal Q.
inline DenseMatrix random_spd(std::mt19937_64& rng, const std::vector<double>& eigs) {
    const std::size_t n = eigs.size();
    Eigen::MatrixXd g(n, n);
    std::normal_distribution<double> nd;
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = nd(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    const Eigen::MatrixXd q = qr.householderQ();
    Eigen::VectorXd d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = eigs[i];
    const Eigen::MatrixXd m = q * d.asDiagonal() * q.transpose();
    DenseMatrix out(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) = 0.5 * (m(i, j) + m(j, i));
    return out;
}

inline DenseMatrix random_spd(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> e(n);
    for (double& x : e) x = u(rng);
    return random_spd(rng, e);
}

inline Eigen::MatrixXd to_eigen(const DenseMatrix& m) {
    Eigen::MatrixXd e(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
    return e;
}

inline Eigen::VectorXd to_eigen(const Vector& v) { return Eigen::Map<const Eigen::VectorXd>(v.data(), v.size()); }

inline Vector from_eigen(const Eigen::VectorXd& v) { return Vector(v.data(), v.data() + v.size()); }

inline double rel_l2(const Vector& a, const Vector& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

inline double l2(const Vector& a, const Vector& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

// ---- quadratic surrogate -------------------------------------------------
//
// Per-datum loss ℓ(z; θ) = -xᵀθ, inner adds ½θᵀAθ, outer adds ½θᵀCθ.
// For task i with b = Σ_train x and c = Σ_val x:
//   θ_i(λ) = M (b + δλ),  M = (A + δI)⁻¹
//   L_O    = -cᵀθ + ½θᵀCθ  (+ δ/2‖θ − λ‖² in the proximal form)
// The outer value function is quadratic in λ; its gradient is affine and is
// solved exactly.

struct QuadSurrogate {
    DenseMatrix A;
    DenseMatrix C;
    std::vector<TaskData> tasks;
    double delta = 1.0;
    metaif::OuterRegForm form = metaif::OuterRegForm::main_text;
    // Optional per-task weights on L_O (empty: all 1).
    std::vector<double> weights;
};

inline Eigen::VectorXd sum_x(const std::vector<Example>& xs, std::size_t p) {
    Eigen::VectorXd s = Eigen::VectorXd::Zero(p);
    for (const Example& e : xs) s += to_eigen(e.x);
    return s;
}

// D_λ V at λ, hand-derived.
inline Eigen::VectorXd quad_outer_grad(const QuadSurrogate& q, const Eigen::VectorXd& lam) {
    const std::size_t p = q.A.rows();
    const Eigen::MatrixXd A = to_eigen(q.A), C = to_eigen(q.C);
    const double d = q.delta;
    const Eigen::MatrixXd M = (A + d * Eigen::MatrixXd::Identity(p, p)).inverse();
    const Eigen::MatrixXd J = d * M;
    Eigen::VectorXd g = d * lam;
    for (std::size_t i = 0; i < q.tasks.size(); ++i) {
        const TaskData& t = q.tasks[i];
        const double w = q.weights.empty() ? 1.0 : q.weights[i];
        const Eigen::VectorXd b = sum_x(t.train, p), c = sum_x(t.val, p);
        const Eigen::VectorXd th = M * (b + d * lam);
        Eigen::VectorXd a = C * th - c;
        if (q.form == metaif::OuterRegForm::appendix_proximal) {
            a += d * (th - lam);
            g += w * (J.transpose() * a - d * (th - lam));
        } else {
            g += w * (J.transpose() * a);
        }
    }
    return g;
}

inline Vector quad_solution(const QuadSurrogate& q) {
    const std::size_t p = q.A.rows();
    const Eigen::VectorXd g0 = quad_outer_grad(q, Eigen::VectorXd::Zero(p));
    Eigen::MatrixXd K(p, p);
    for (std::size_t j = 0; j < p; ++j) K.col(j) = quad_outer_grad(q, Eigen::VectorXd::Unit(p, j)) - g0;
    return from_eigen(K.fullPivLu().solve(-g0));
}

inline Vector quad_theta(const QuadSurrogate& q, const Vector& lambda, const TaskData& t) {
    const std::size_t p = q.A.rows();
    const Eigen::MatrixXd M = (to_eigen(q.A) + q.delta * Eigen::MatrixXd::Identity(p, p)).inverse();
    return from_eigen(M * (sum_x(t.train, p) + q.delta * to_eigen(lambda)));
}

inline QuadSurrogate make_quad(std::uint64_t seed, std::size_t p, std::size_t n_tasks, double delta,
                               metaif::OuterRegForm form) {
    std::mt19937_64 rng(seed);
    QuadSurrogate q;
    q.A = random_spd(rng, p, 0.5, 3.0);
    q.C = random_spd(rng, p, 0.2, 2.0);
    q.delta = delta;
    q.form = form;
    for (std::size_t i = 0; i < n_tasks; ++i) {
        TaskData t;
        t.id = static_cast<int>(i);
        for (int k = 0; k < 3; ++k) t.train.push_back({random_vector(rng, p), 0, {}});
        for (int k = 0; k < 3; ++k) t.val.push_back({random_vector(rng, p), 0, {}});
        q.tasks.push_back(std::move(t));
    }
    return q;
}

inline metaif::BilevelConfig quad_config(const QuadSurrogate& q) {
    metaif::BilevelConfig cfg;
    cfg.delta = q.delta;
    cfg.outer_reg_form = q.form;
    cfg.inner_tol = 1e-11;
    cfg.outer_tol = 1e-10;
    cfg.threads = 1;
    return cfg;
}

// ---- small classification problems --------------------------------------

// Gaussian blobs, one per class, `per_class` points each.
inline std::vector<Example> blobs(std::mt19937_64& rng, std::size_t dim, std::size_t classes, std::size_t per_class,
                                  double noise, const std::vector<Vector>& means) {
    std::vector<Example> out;
    std::normal_distribution<double> nd;
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t k = 0; k < per_class; ++k) {
            Example e;
            e.x.resize(dim);
            for (std::size_t d = 0; d < dim; ++d) e.x[d] = means[c][d] + noise * nd(rng);
            e.label = static_cast<int>(c);
            out.push_back(std::move(e));
        }
    return out;
}

inline std::vector<Example> random_batch(std::mt19937_64& rng, std::size_t dim, std::size_t classes, std::size_t n) {
    std::vector<Example> out(n);
    std::uniform_int_distribution<int> lab(0, static_cast<int>(classes) - 1);
    for (Example& e : out) {
        e.x = random_vector(rng, dim);
        e.label = lab(rng);
    }
    return out;
}

}  // namespace testsupport
