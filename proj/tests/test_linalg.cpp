#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "colin/error.hpp"
#include "colin/linalg.hpp"
#include "colin/matrix.hpp"
#include "colin/rng.hpp"
#include "oracles.hpp"

using colin::Matrix;
using colin::Rng;

namespace {

double orthonormality_error(const Matrix& cols) {
    const Matrix g = oracle::matmul(oracle::transpose(cols), cols);
    return oracle::max_abs_diff(g, Matrix::identity(g.rows()));
}

}  // namespace

TEST_SUITE("linalg") {

TEST_CASE("rng matches the reference splitmix64 stream") {
    // First output for seed 0 from the published reference implementation.
    Rng rng(0);
    CHECK(rng.next_u64() == 0xE220A8397B1DCDAFULL);

    std::uint64_t state = 12345;
    auto reference = [&state] {
        std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    };
    Rng other(12345);
    for (int i = 0; i < 1000; ++i) REQUIRE(other.next_u64() == reference());
}

TEST_CASE("rng uniform stays in [0, 1) and split streams differ") {
    Rng rng(3);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }
    Rng a(7);
    Rng child = a.split();
    CHECK(child.next_u64() != a.next_u64());
}

TEST_CASE("matmul family agrees with the triple-loop oracle") {
    Rng rng(1);
    const Matrix a = oracle::random_matrix(7, 5, rng);
    const Matrix b = oracle::random_matrix(5, 9, rng);
    const Matrix c = oracle::random_matrix(7, 9, rng);
    CHECK(oracle::max_abs_diff(colin::matmul(a, b), oracle::matmul(a, b)) < 1e-14);
    CHECK(oracle::max_abs_diff(colin::matmul_tn(a, c), oracle::matmul(oracle::transpose(a), c)) < 1e-14);
    CHECK(oracle::max_abs_diff(colin::matmul_nt(a, oracle::transpose(b)), oracle::matmul(a, b)) < 1e-14);

    Matrix out = c;
    colin::gemm(-0.5, a, colin::Trans::no, b, colin::Trans::no, 2.0, out);
    Matrix expect = oracle::matmul(a, b);
    for (std::size_t i = 0; i < expect.size(); ++i)
        expect.data()[i] = 2.0 * c.data()[i] - 0.5 * expect.data()[i];
    CHECK(oracle::max_abs_diff(out, expect) < 1e-14);

    Matrix fresh(5, 5, 123.0);
    colin::gemm(1.0, a, colin::Trans::yes, a, colin::Trans::no, 0.0, fresh);
    CHECK(oracle::max_abs_diff(fresh, oracle::matmul(oracle::transpose(a), a)) < 1e-14);
}

TEST_CASE("storage is 64-byte aligned and products do not depend on the buffer address") {
    Rng rng(12);
    const Matrix a = oracle::random_matrix(1, 37, rng);
    const Matrix b = oracle::random_matrix(37, 23, rng);
    const Matrix ref = colin::matmul(a, b);
    std::vector<Matrix> keep;
    for (int i = 0; i < 32; ++i) {
        keep.emplace_back(1, static_cast<std::size_t>(i) + 1);  // vary the heap layout
        const Matrix a2 = a, b2 = b;
        REQUIRE(reinterpret_cast<std::uintptr_t>(a2.data().data()) % 64 == 0);
        REQUIRE(reinterpret_cast<std::uintptr_t>(b2.data().data()) % 64 == 0);
        CHECK(colin::bit_identical(colin::matmul(a2, b2), ref));
    }
}

TEST_CASE("shape mismatches throw ShapeError") {
    const Matrix a(2, 3), b(2, 3);
    CHECK_THROWS_AS(colin::matmul(a, b), colin::ShapeError);
    CHECK_THROWS_AS(colin::add(a, Matrix(3, 2)), colin::ShapeError);
    CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>(3)), colin::ShapeError);
    Matrix wrong(3, 3);
    CHECK_THROWS_AS(colin::gemm(1.0, a, colin::Trans::no, b, colin::Trans::yes, 0.0, wrong),
                    colin::ShapeError);
}

TEST_CASE("elementwise helpers") {
    const Matrix a{{1, -2}, {3, 4}};
    CHECK(colin::frobenius_norm_sq(a) == 30.0);
    CHECK(colin::frobenius_norm(a) == doctest::Approx(std::sqrt(30.0)));
    CHECK(colin::trace(a) == 5.0);
    CHECK(colin::transpose(a) == Matrix{{1, 3}, {-2, 4}});
    CHECK(colin::column_sums(a) == Matrix{{4, 2}});
    CHECK(colin::hadamard(a, a) == Matrix{{1, 4}, {9, 16}});
    CHECK(colin::inner(a, a) == 30.0);
    Matrix y = a;
    colin::axpy(2.0, a, y);
    CHECK(y == Matrix{{3, -6}, {9, 12}});
    CHECK(colin::all_finite(a));
    Matrix bad = a;
    bad(0, 0) = std::nan("");
    CHECK_FALSE(colin::all_finite(bad));
}

TEST_CASE("svd small exact cases") {
    const auto id = colin::svd(Matrix::identity(4));
    for (double s : id.s) CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(oracle::max_abs_diff(oracle::matmul(id.u, oracle::transpose(id.v)), Matrix::identity(4)) < 1e-14);

    const auto dg = colin::svd(Matrix{{3, 0}, {0, 1}});
    CHECK(dg.s[0] == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(dg.s[1] == doctest::Approx(1.0).epsilon(1e-14));

    Rng rng(7);
    const Matrix a = oracle::random_matrix(6, 4, rng);
    const auto f = colin::svd(a);
    CHECK(oracle::max_abs_diff(colin::reconstruct(f), a) <= 1e-8);
}

TEST_CASE("svd invariants on 50 random matrices, tall, wide and rank deficient") {
    Rng rng(2024);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t m = 1 + rng.next_u64() % 12;
        const std::size_t n = 1 + rng.next_u64() % 12;
        Matrix a = oracle::random_matrix(m, n, rng, 3.0);
        if (trial % 5 == 0 && m > 1) {
            // Duplicate a row to force a zero singular value.
            for (std::size_t j = 0; j < n; ++j) a(m - 1, j) = a(0, j);
        }
        CAPTURE(trial);
        CAPTURE(m);
        CAPTURE(n);
        const auto f = colin::svd(a);
        const std::size_t r = std::min(m, n);
        REQUIRE(f.u.rows() == m);
        REQUIRE(f.u.cols() == r);
        REQUIRE(f.v.rows() == n);
        REQUIRE(f.v.cols() == r);
        REQUIRE(f.s.size() == r);
        CHECK(oracle::max_abs_diff(oracle::matmul(oracle::matmul(f.u, Matrix::diagonal(f.s)),
                                                  oracle::transpose(f.v)),
                                   a) <= 1e-8);
        CHECK(orthonormality_error(f.u) <= 1e-8);
        CHECK(orthonormality_error(f.v) <= 1e-8);
        for (std::size_t i = 0; i < r; ++i) {
            CHECK(f.s[i] >= 0.0);
            if (i > 0) CHECK(f.s[i] <= f.s[i - 1]);
        }
    }
}

TEST_CASE("svd of the zero matrix still returns orthonormal factors") {
    const auto f = colin::svd(Matrix(5, 3));
    for (double s : f.s) CHECK(s == 0.0);
    CHECK(orthonormality_error(f.u) <= 1e-12);
    CHECK(orthonormality_error(f.v) <= 1e-12);
}

TEST_CASE("svd reports non-convergence") {
    Rng rng(4);
    const Matrix a = oracle::random_matrix(8, 8, rng);
    try {
        (void)colin::svd(a, 1e-15, 1);
        FAIL("expected ConvergenceError");
    } catch (const colin::ConvergenceError& e) {
        CHECK(e.residual() > 1e-15);
    }
}

TEST_CASE("kaiming uniform bounds and statistics") {
    Rng small(0);
    const Matrix b = colin::kaiming_uniform(2, 6, small);
    for (double v : b.data()) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }

    Rng r1(5), r2(5);
    CHECK(colin::bit_identical(colin::kaiming_uniform(10, 10, r1), colin::kaiming_uniform(10, 10, r2)));

    // 2·100·768 = 153600 samples.
    Rng rng(11);
    const double bound = std::sqrt(6.0 / 768.0);
    double sum = 0.0, sum_sq = 0.0, max_abs = 0.0;
    std::size_t count = 0;
    for (int rep = 0; rep < 2; ++rep) {
        const Matrix w = colin::kaiming_uniform(100, 768, rng);
        for (double v : w.data()) {
            sum += v;
            sum_sq += v * v;
            max_abs = std::max(max_abs, std::abs(v));
            ++count;
        }
    }
    const double mean = sum / static_cast<double>(count);
    const double var = sum_sq / static_cast<double>(count) - mean * mean;
    CHECK(std::abs(mean) < 0.01);
    CHECK(max_abs <= bound);
    CHECK(var == doctest::Approx(bound * bound / 3.0).epsilon(0.02));
}

TEST_CASE("random_orthonormal has orthonormal rows or columns") {
    Rng rng(8);
    const Matrix wide = colin::random_orthonormal(3, 7, rng);
    CHECK(oracle::max_abs_diff(oracle::matmul(wide, oracle::transpose(wide)), Matrix::identity(3)) < 1e-12);
    const Matrix tall = colin::random_orthonormal(7, 3, rng);
    CHECK(orthonormality_error(tall) < 1e-12);
}

}  // TEST_SUITE
