#include <doctest.h>

#include "metaif/error.hpp"
#include "metaif/linalg.hpp"
#include "support.hpp"

using namespace metaif;
using namespace testsupport;

TEST_CASE("matvec basic cases") {
    const Vector v{1, 2, 3};
    CHECK(matvec(DenseMatrix::identity(3), v) == v);
    CHECK(matvec(DenseMatrix::zeros(2, 2), Vector{5, 7}) == Vector{0, 0});
    CHECK(matvec(DenseMatrix{{1, 2}, {3, 4}}, Vector{1, 1}) == Vector{3, 7});
}

TEST_CASE("matvec rejects mismatched lengths") {
    CHECK_THROWS_AS(matvec(DenseMatrix::identity(3), Vector{1, 2}), Error);
}

TEST_CASE("solve_spd examples") {
    const Vector v{0.3, -1.2};
    const Vector x = solve_spd(DenseMatrix::identity(2), v, 0.0);
    CHECK(x[0] == doctest::Approx(0.3));
    CHECK(x[1] == doctest::Approx(-1.2));

    const Vector y = solve_spd(DenseMatrix::identity(2, 2.0), Vector{4, 6}, 0.0);
    CHECK(y[0] == doctest::Approx(2.0));
    CHECK(y[1] == doctest::Approx(3.0));

    const DenseMatrix m{{2, 1}, {1, 2}};
    const Vector z = solve_spd(m, Vector{3, 3}, 1.0);
    Vector r = matvec(m, z);
    axpy(1.0, z, r);
    CHECK(r[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(r[1] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("solve_spd residual property on random SPD systems") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 2 + trial % 9;
        const DenseMatrix m = random_spd(rng, n, 0.1, 5.0);
        const Vector v = random_vector(rng, n);
        const double d = 0.5 * (trial % 3);
        const Vector x = solve_spd(m, v, d);
        Vector r = matvec(m, x);
        axpy(d, x, r);
        CHECK(rel_l2(r, v) < 1e-9);
    }
}

TEST_CASE("solve_spd fails loudly on indefinite input") {
    const DenseMatrix m{{1, 0}, {0, -1}};
    try {
        solve_spd(m, Vector{1, 1}, 0.0);
        FAIL("expected a numerical error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::numerical);
    }
    CHECK_THROWS_AS(solve_spd(DenseMatrix{{1, 2}, {0, 1}}, Vector{1, 1}, 0.0), Error);
}

TEST_CASE("eig_sym examples") {
    const EigenDecomposition a = eig_sym(DenseMatrix::identity(2));
    CHECK(a.eigenvalues[0] == doctest::Approx(1.0));
    CHECK(a.eigenvalues[1] == doctest::Approx(1.0));
    const EigenDecomposition b = eig_sym(DenseMatrix{{5, 0}, {0, 2}});
    CHECK(b.eigenvalues[0] == doctest::Approx(2.0));
    CHECK(b.eigenvalues[1] == doctest::Approx(5.0));
}

TEST_CASE("eig_sym reconstructs random SPD matrices") {
    std::mt19937_64 rng(11);
    const DenseMatrix m = random_spd(rng, 5, 0.1, 4.0);
    const EigenDecomposition e = eig_sym(m);
    DenseMatrix rec(5, 5);
    for (std::size_t k = 0; k < 5; ++k)
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = 0; j < 5; ++j)
                rec(i, j) += e.eigenvalues[k] * e.eigenvectors(i, k) * e.eigenvectors(j, k);
    for (std::size_t i = 0; i < 25; ++i) CHECK(std::abs(rec.data()[i] - m.data()[i]) < 1e-8);
}

TEST_CASE("eig_sym 2x2 matches characteristic polynomial roots") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 50; ++trial) {
        const double a = nd(rng), b = nd(rng), c = nd(rng);
        const double mid = 0.5 * (a + c);
        const double rad = std::sqrt(0.25 * (a - c) * (a - c) + b * b);
        const EigenDecomposition e = eig_sym(DenseMatrix{{a, b}, {b, c}});
        CHECK(std::abs(e.eigenvalues[0] - (mid - rad)) < 1e-10);
        CHECK(std::abs(e.eigenvalues[1] - (mid + rad)) < 1e-10);
    }
}

TEST_CASE("kron_apply examples") {
    const Vector v{1, 2, 3, 4};
    CHECK(kron_apply(DenseMatrix::identity(2), DenseMatrix::identity(2), v) == v);
    const Vector s = kron_apply(DenseMatrix::identity(2, 2.0), DenseMatrix::identity(2, 3.0), v);
    for (std::size_t i = 0; i < 4; ++i) CHECK(s[i] == doctest::Approx(6.0 * v[i]));

    // Explicit Kronecker product written out by hand.
    const DenseMatrix a{{1, 1}, {0, 1}};
    const DenseMatrix explicit_kron{{1, 0, 1, 0}, {0, 1, 0, 1}, {0, 0, 1, 0}, {0, 0, 0, 1}};
    const Vector e1{1, 0, 0, 0};
    CHECK(kron_apply(a, DenseMatrix::identity(2), e1) == matvec(explicit_kron, e1));
}

TEST_CASE("kron_apply equals the explicit Kronecker matvec") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t ar = 1 + trial % 6, ac = 1 + (trial / 2) % 6;
        const std::size_t br = 1 + (trial / 3) % 6, bc = 1 + (trial / 5) % 6;
        const DenseMatrix a = random_matrix(rng, ar, ac), b = random_matrix(rng, br, bc);
        const Vector v = random_vector(rng, ac * bc);
        // Independent oracle: (a⊗b)(i·br+k, j·bc+l) = a(i,j) b(k,l).
        Vector want(ar * br, 0.0);
        for (std::size_t i = 0; i < ar; ++i)
            for (std::size_t k = 0; k < br; ++k)
                for (std::size_t j = 0; j < ac; ++j)
                    for (std::size_t l = 0; l < bc; ++l) want[i * br + k] += a(i, j) * b(k, l) * v[j * bc + l];
        const Vector got = kron_apply(a, b, v);
        for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);
        CHECK(rel_l2(matvec(kron(a, b), v), got) < 1e-12);
    }
}

TEST_CASE("reductions are bit-reproducible") {
    std::mt19937_64 rng(9);
    const DenseMatrix m = random_matrix(rng, 40, 40);
    const Vector v = random_vector(rng, 40);
    CHECK(matvec(m, v) == matvec(m, v));
    CHECK(dot(v, v) == dot(v, v));
}
