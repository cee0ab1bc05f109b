#include "metaif/linalg.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>

#include "metaif/error.hpp"

namespace metaif {

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require_dims(data_.size() == rows * cols, "DenseMatrix: data length != rows*cols");
}

DenseMatrix::DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        require_dims(r.size() == cols_, "DenseMatrix: ragged initializer");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

DenseMatrix DenseMatrix::identity(std::size_t n, double s) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = s;
    return m;
}

DenseMatrix DenseMatrix::diagonal(std::span<const double> d) {
    DenseMatrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
}

DenseMatrix DenseMatrix::transpose() const {
    DenseMatrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

bool DenseMatrix::all_finite() const { return metaif::all_finite(data_); }

double DenseMatrix::asymmetry() const {
    require_dims(square(), "asymmetry: matrix is not square");
    double worst = 0.0;
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = i + 1; j < cols_; ++j)
            worst = std::max(worst, std::abs((*this)(i, j) - (*this)(j, i)));
    return worst;
}

double DenseMatrix::frobenius_norm() const { return norm2(data_); }

double dot(std::span<const double> a, std::span<const double> b) {
    require_dims(a.size() == b.size(), "dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double norm1(std::span<const double> a) {
    double s = 0.0;
    for (double x : a) s += std::abs(x);
    return s;
}

double norm_inf(std::span<const double> a) {
    double s = 0.0;
    for (double x : a) s = std::max(s, std::abs(x));
    return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    require_dims(x.size() == y.size(), "axpy: length mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void scale(std::span<double> x, double alpha) {
    for (double& v : x) v *= alpha;
}

Vector add(std::span<const double> a, std::span<const double> b) {
    require_dims(a.size() == b.size(), "add: length mismatch");
    Vector out(a.begin(), a.end());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] += b[i];
    return out;
}

Vector sub(std::span<const double> a, std::span<const double> b) {
    require_dims(a.size() == b.size(), "sub: length mismatch");
    Vector out(a.begin(), a.end());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] -= b[i];
    return out;
}

Vector scaled(std::span<const double> a, double alpha) {
    Vector out(a.begin(), a.end());
    scale(out, alpha);
    return out;
}

double relative_error(std::span<const double> a, std::span<const double> b) {
    const Vector d = sub(a, b);
    return norm2(d) / std::max(norm2(b), 1e-300);
}

double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = norm2(a), nb = norm2(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

bool all_finite(std::span<const double> a) {
    return std::all_of(a.begin(), a.end(), [](double x) { return std::isfinite(x); });
}

Vector matvec(const DenseMatrix& m, std::span<const double> v) {
    require_dims(v.size() == m.cols(),
                 "matvec: vector length " + std::to_string(v.size()) + " != cols " +
                     std::to_string(m.cols()));
    Vector out(m.rows(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        double s = 0.0;
        for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * v[c];
        out[r] = s;
    }
    return out;
}

Vector matvec_transposed(const DenseMatrix& m, std::span<const double> v) {
    require_dims(v.size() == m.rows(), "matvec_transposed: length mismatch");
    Vector out(m.cols(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        const double vr = v[r];
        for (std::size_t c = 0; c < row.size(); ++c) out[c] += row[c] * vr;
    }
    return out;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    require_dims(a.cols() == b.rows(), "matmul: inner dimension mismatch");
    using M = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const auto ar = static_cast<Eigen::Index>(a.rows()), ac = static_cast<Eigen::Index>(a.cols());
    const auto bc = static_cast<Eigen::Index>(b.cols());
    DenseMatrix out(a.rows(), b.cols());
    Eigen::Map<M>(out.data().data(), ar, bc).noalias() =
        Eigen::Map<const M>(a.data().data(), ar, ac) * Eigen::Map<const M>(b.data().data(), ac, bc);
    return out;
}

DenseMatrix kron(const DenseMatrix& a, const DenseMatrix& b) {
    DenseMatrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            for (std::size_t p = 0; p < b.rows(); ++p)
                for (std::size_t q = 0; q < b.cols(); ++q)
                    out(i * b.rows() + p, j * b.cols() + q) = a(i, j) * b(p, q);
    return out;
}

Vector kron_apply(const DenseMatrix& a, const DenseMatrix& b, std::span<const double> v) {
    require_dims(v.size() == a.cols() * b.cols(),
                 "kron_apply: vector length " + std::to_string(v.size()) + " != " +
                     std::to_string(a.cols() * b.cols()));
    // W = V Bᵀ : (a.cols × b.rows)
    const std::size_t n1 = a.cols(), n2 = b.cols(), m2 = b.rows();
    std::vector<double> w(n1 * m2, 0.0);
    for (std::size_t i = 0; i < n1; ++i) {
        const double* vi = v.data() + i * n2;
        for (std::size_t q = 0; q < m2; ++q) {
            const auto brow = b.row(q);
            double s = 0.0;
            for (std::size_t j = 0; j < n2; ++j) s += brow[j] * vi[j];
            w[i * m2 + q] = s;
        }
    }
    // out = A W : (a.rows × b.rows)
    Vector out(a.rows() * m2, 0.0);
    for (std::size_t p = 0; p < a.rows(); ++p) {
        double* op = out.data() + p * m2;
        for (std::size_t i = 0; i < n1; ++i) {
            const double api = a(p, i);
            if (api == 0.0) continue;
            const double* wi = w.data() + i * m2;
            for (std::size_t q = 0; q < m2; ++q) op[q] += api * wi[q];
        }
    }
    return out;
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

Cholesky::Cholesky(const DenseMatrix& m, double damping) : n_(m.rows()) {
    require_dims(m.square(), "cholesky: matrix is not square");
    if (!(damping >= 0.0)) fail(ErrorCode::invalid_argument, "cholesky: damping must be >= 0");
    if (m.asymmetry() > kSymmetryTol * std::max(1.0, norm_inf(m.data())))
        fail(ErrorCode::numerical, "cholesky: matrix is not symmetric");
    const auto n = static_cast<Eigen::Index>(n_);
    RowMat a = Eigen::Map<const RowMat>(m.data().data(), n, n);
    a.diagonal().array() += damping;
    Eigen::LLT<Eigen::Ref<RowMat>, Eigen::Lower> llt(a);
    if (llt.info() != Eigen::Success || !a.allFinite())
        fail(ErrorCode::numerical, "cholesky: matrix + damping is not positive definite");
    for (Eigen::Index i = 0; i < n; ++i)
        if (!(a(i, i) > 0.0)) fail(ErrorCode::numerical, "cholesky: matrix + damping is not positive definite");
    a.triangularView<Eigen::StrictlyUpper>().setZero();
    l_.assign(a.data(), a.data() + a.size());
}

void Cholesky::solve_in_place(std::span<double> x) const {
    require_dims(x.size() == n_, "cholesky solve: length mismatch");
    const auto n = static_cast<Eigen::Index>(n_);
    const Eigen::Map<const RowMat> l(l_.data(), n, n);
    Eigen::Map<Eigen::VectorXd> v(x.data(), n);
    l.triangularView<Eigen::Lower>().solveInPlace(v);
    l.transpose().triangularView<Eigen::Upper>().solveInPlace(v);
}

Vector Cholesky::solve(std::span<const double> b) const {
    Vector x(b.begin(), b.end());
    solve_in_place(x);
    return x;
}

DenseMatrix Cholesky::solve_matrix(const DenseMatrix& b) const {
    require_dims(b.rows() == n_, "cholesky solve: row count mismatch");
    const auto n = static_cast<Eigen::Index>(n_);
    const Eigen::Map<const RowMat> l(l_.data(), n, n);
    RowMat x = Eigen::Map<const RowMat>(b.data().data(), n, static_cast<Eigen::Index>(b.cols()));
    l.triangularView<Eigen::Lower>().solveInPlace(x);
    l.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
    return DenseMatrix(b.rows(), b.cols(), std::vector<double>(x.data(), x.data() + x.size()));
}

Vector solve_spd(const DenseMatrix& m, std::span<const double> v, double damping) {
    require_dims(m.square() && v.size() == m.rows(), "solve_spd: dimension mismatch");
    return Cholesky(m, damping).solve(v);
}

EigenDecomposition eig_sym(const DenseMatrix& m) {
    require_dims(m.square(), "eig_sym: matrix is not square");
    if (m.asymmetry() > kSymmetryTol * std::max(1.0, norm_inf(m.data())))
        fail(ErrorCode::numerical, "eig_sym: matrix is not symmetric");
    const auto n = static_cast<Eigen::Index>(m.rows());
    Eigen::MatrixXd a(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            a(i, j) = 0.5 * (m(i, j) + m(j, i));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
    if (es.info() != Eigen::Success) fail(ErrorCode::numerical, "eig_sym: decomposition failed");
    EigenDecomposition out{DenseMatrix(m.rows(), m.rows()), Vector(m.rows())};
    for (Eigen::Index j = 0; j < n; ++j) {
        out.eigenvalues[j] = es.eigenvalues()(j);
        for (Eigen::Index i = 0; i < n; ++i) out.eigenvectors(i, j) = es.eigenvectors()(i, j);
    }
    return out;
}

}  // namespace metaif
