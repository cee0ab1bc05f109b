#pragma once

// Dense float64 kernels shared by every other module. Reductions run in a
// fixed index order so results are reproducible bit for bit.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace metaif {

using Vector = std::vector<double>;

class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    DenseMatrix(std::initializer_list<std::initializer_list<double>> rows);

    static DenseMatrix identity(std::size_t n, double scale = 1.0);
    static DenseMatrix zeros(std::size_t rows, std::size_t cols) { return {rows, cols}; }
    static DenseMatrix diagonal(std::span<const double> d);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool square() const noexcept { return rows_ == cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    DenseMatrix transpose() const;
    bool all_finite() const;
    // Largest |m(i,j) - m(j,i)|.
    double asymmetry() const;
    double frobenius_norm() const;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// --- vector helpers -------------------------------------------------------

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double norm1(std::span<const double> a);
double norm_inf(std::span<const double> a);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
void scale(std::span<double> x, double alpha);
Vector add(std::span<const double> a, std::span<const double> b);
Vector sub(std::span<const double> a, std::span<const double> b);
Vector scaled(std::span<const double> a, double alpha);
// ||a - b|| / max(||b||, tiny)
double relative_error(std::span<const double> a, std::span<const double> b);
double cosine(std::span<const double> a, std::span<const double> b);
bool all_finite(std::span<const double> a);

// --- matrix kernels -------------------------------------------------------

Vector matvec(const DenseMatrix& m, std::span<const double> v);
Vector matvec_transposed(const DenseMatrix& m, std::span<const double> v);
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix kron(const DenseMatrix& a, const DenseMatrix& b);

// (a ⊗ b) v without materializing the Kronecker product. v is read as a
// row-major (a.cols × b.cols) matrix V and the result is vec(A V Bᵀ).
Vector kron_apply(const DenseMatrix& a, const DenseMatrix& b, std::span<const double> v);

// Symmetry tolerance used by solve_spd / eig_sym preconditions.
inline constexpr double kSymmetryTol = 1e-8;

// Lower-triangular Cholesky factor of (m + damping·I). Throws
// ErrorCode::numerical when the damped matrix is not positive definite.
class Cholesky {
public:
    Cholesky() = default;
    Cholesky(const DenseMatrix& m, double damping);

    std::size_t dim() const noexcept { return n_; }
    Vector solve(std::span<const double> b) const;
    void solve_in_place(std::span<double> b) const;
    // X with (m + damping·I) X = B.
    DenseMatrix solve_matrix(const DenseMatrix& b) const;

private:
    std::size_t n_ = 0;
    std::vector<double> l_;
};

// x with (m + damping·I) x = v.
Vector solve_spd(const DenseMatrix& m, std::span<const double> v, double damping);

struct EigenDecomposition {
    DenseMatrix eigenvectors;  // orthonormal columns
    Vector eigenvalues;        // ascending
};

EigenDecomposition eig_sym(const DenseMatrix& m);

}  // namespace metaif
