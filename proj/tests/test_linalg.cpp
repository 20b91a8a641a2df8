#include <doctest.h>

#include <cmath>
#include <set>

#include "corereft/error.hpp"
#include "corereft/linalg.hpp"
#include "corereft/rng.hpp"
#include "oracles.hpp"

using namespace corereft;
using linalg::Matrix;
using linalg::Vector;

namespace {

Matrix random_matrix(SeededRng& rng, std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (auto& x : m.values()) x = rng.normal();
    return m;
}

}  // namespace

TEST_CASE("matmul examples") {
    const Matrix a{{1, 2}, {3, 4}};
    const Matrix swap{{0, 1}, {1, 0}};
    CHECK(linalg::matmul(a, swap) == Matrix{{2, 1}, {4, 3}});
    CHECK(linalg::matmul(Matrix::identity(2), a) == a);
    CHECK(linalg::matmul(a, Matrix(2, 2)) == Matrix(2, 2));
}

TEST_CASE("matmul rejects mismatched shapes and names both") {
    try {
        linalg::matmul(Matrix(2, 3), Matrix(2, 3));
        FAIL("expected a shape error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::shape);
        const std::string msg = e.what();
        CHECK(msg.find("2x3") != std::string::npos);
    }
}

TEST_CASE("matmul matches the triple-loop oracle") {
    SeededRng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng.below(9), k = 1 + rng.below(9), m = 1 + rng.below(9);
        const Matrix a = random_matrix(rng, n, k), b = random_matrix(rng, k, m);
        const auto ref = oracle::matmul(oracle::to_mat(a), oracle::to_mat(b));
        const Matrix got = linalg::matmul(a, b);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) CHECK(got(i, j) == doctest::Approx(ref[i][j]).epsilon(1e-12));
    }
}

TEST_CASE("gemm kernels match the oracle in every layout") {
    SeededRng rng(12);
    for (int trial = 0; trial < 15; ++trial) {
        const std::size_t m = 1 + rng.below(11), k = 1 + rng.below(11), n = 1 + rng.below(11);
        const Matrix a = random_matrix(rng, m, k), b = random_matrix(rng, k, n);
        const auto ref = oracle::matmul(oracle::to_mat(a), oracle::to_mat(b));
        const Matrix at = a.transposed(), bt = b.transposed();
        Matrix c1(m, n, 1.0), c2(m, n, 1.0), c3(m, n, 1.0);
        linalg::kernel::gemm(a.values().data(), b.values().data(), c1.values().data(), m, k, n, true);
        linalg::kernel::gemm_tn(at.values().data(), b.values().data(), c2.values().data(), m, k, n, true);
        linalg::kernel::gemm_nt(a.values().data(), bt.values().data(), c3.values().data(), m, k, n, true);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                CHECK(c1(i, j) == doctest::Approx(ref[i][j] + 1.0).epsilon(1e-12));
                CHECK(c2(i, j) == doctest::Approx(ref[i][j] + 1.0).epsilon(1e-12));
                CHECK(c3(i, j) == doctest::Approx(ref[i][j] + 1.0).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("matmul is associative within 1e-9 relative") {
    SeededRng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 2 + rng.below(6), k = 2 + rng.below(6), m = 2 + rng.below(6), p = 2 + rng.below(6);
        const Matrix a = random_matrix(rng, n, k), b = random_matrix(rng, k, m), c = random_matrix(rng, m, p);
        const Matrix l = linalg::matmul(linalg::matmul(a, b), c);
        const Matrix r = linalg::matmul(a, linalg::matmul(b, c));
        double diff = 0.0;
        for (std::size_t i = 0; i < l.size(); ++i) diff = std::max(diff, std::abs(l.values()[i] - r.values()[i]));
        CHECK(diff <= 1e-9 * std::max(1.0, linalg::frobenius(l)));
    }
}

TEST_CASE("matvec and matvec_t agree with matmul") {
    SeededRng rng(14);
    const Matrix a = random_matrix(rng, 4, 6);
    Vector x(6), y(4);
    for (auto& v : x.values()) v = rng.normal();
    for (auto& v : y.values()) v = rng.normal();
    const Vector ax = linalg::matvec(a, x);
    const Vector aty = linalg::matvec_t(a, y);
    for (std::size_t i = 0; i < 4; ++i) CHECK(ax[i] == doctest::Approx(linalg::dot(a.row(i), x.values())).epsilon(1e-14));
    for (std::size_t j = 0; j < 6; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < 4; ++i) s += a(i, j) * y[i];
        CHECK(aty[j] == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("frobenius examples") {
    CHECK(linalg::frobenius(Matrix(3, 3)) == 0.0);
    CHECK(linalg::frobenius(Matrix::identity(3)) == doctest::Approx(std::sqrt(3.0)).epsilon(1e-15));
    CHECK(linalg::frobenius(Matrix{{3, 4}}) == 5.0);
}

TEST_CASE("matrices reject non-finite entries") {
    CHECK_THROWS_AS(Matrix(1, 2, std::vector<double>{1.0, NAN}), Error);
    CHECK_THROWS_AS(Matrix(1, 2, std::vector<double>{INFINITY, 1.0}), Error);
    CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>{1.0, 2.0, 3.0}), Error);
}

TEST_CASE("sigma_max examples") {
    CHECK(linalg::sigma_max(Matrix{{3, 0}, {0, 1}}) == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(linalg::sigma_max(Matrix(3, 4)) == 0.0);
    SeededRng rng(15);
    for (int i = 0; i < 10; ++i) {
        const Matrix q = linalg::orthonormalize_rows(random_matrix(rng, 4, 9));
        CHECK(std::abs(linalg::sigma_max(q) - 1.0) < 1e-9);
    }
}

TEST_CASE("sigma_max matches the Jacobi SVD oracle") {
    SeededRng rng(16);
    for (int i = 0; i < 20; ++i) {
        const Matrix a = random_matrix(rng, 5, 3);
        const double ref = oracle::jacobi_singular_values(oracle::to_mat(a)).front();
        CHECK(std::abs(linalg::sigma_max(a, 500, 1e-14) - ref) < 1e-8);
    }
}

TEST_CASE("sigma_max is transpose invariant") {
    SeededRng rng(17);
    for (int i = 0; i < 20; ++i) {
        const Matrix a = random_matrix(rng, 2 + rng.below(8), 2 + rng.below(8));
        CHECK(std::abs(linalg::sigma_max(a, 500, 1e-14) - linalg::sigma_max(a.transposed(), 500, 1e-14)) < 1e-8);
    }
}

TEST_CASE("orthonormalize_rows gives orthonormal rows and rejects dependence") {
    SeededRng rng(18);
    const Matrix q = linalg::orthonormalize_rows(random_matrix(rng, 5, 12));
    const Matrix g = linalg::matmul(q, q.transposed());
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(g(i, j) - (i == j ? 1.0 : 0.0)) < 1e-13);
    CHECK_THROWS_AS(linalg::orthonormalize_rows(Matrix{{1, 2}, {2, 4}}), Error);
}

TEST_CASE("kmeans with k = 1 returns the mean") {
    SeededRng rng(19);
    std::vector<Vector> pts;
    Vector mean(3);
    for (int i = 0; i < 30; ++i) {
        Vector v(3);
        for (auto& x : v.values()) x = rng.normal();
        for (std::size_t c = 0; c < 3; ++c) mean[c] += v[c] / 30.0;
        pts.push_back(v);
    }
    const auto centers = linalg::kmeans(pts, 1, 5);
    REQUIRE(centers.size() == 1);
    for (std::size_t c = 0; c < 3; ++c) CHECK(centers[0][c] == doctest::Approx(mean[c]).epsilon(1e-12));
}

TEST_CASE("kmeans recovers two separated blobs") {
    SeededRng rng(20);
    const double mu[2][2] = {{-5.0, 0.0}, {5.0, 3.0}};
    std::vector<Vector> pts;
    for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 400; ++i) pts.push_back(Vector{mu[b][0] + 0.5 * rng.normal(), mu[b][1] + 0.5 * rng.normal()});
    auto centers = linalg::kmeans(pts, 2, 1993);
    std::sort(centers.begin(), centers.end(), [](const auto& a, const auto& b) { return a[0] < b[0]; });
    for (int b = 0; b < 2; ++b) {
        const double dist = std::hypot(centers[b][0] - mu[b][0], centers[b][1] - mu[b][1]);
        CHECK(dist < 0.1);
    }
}

TEST_CASE("kmeans with k = n returns the points") {
    std::vector<Vector> pts{Vector{0.0, 0.0}, Vector{1.0, 5.0}, Vector{-3.0, 2.0}, Vector{7.0, -1.0}};
    const auto centers = linalg::kmeans(pts, 4, 3);
    std::set<std::vector<double>> a, b;
    for (const auto& p : pts) a.insert(p.storage());
    for (const auto& c : centers) b.insert(c.storage());
    CHECK(a == b);
}

TEST_CASE("kmeans errors and determinism") {
    CHECK_THROWS_AS(linalg::kmeans({}, 1, 1), Error);
    std::vector<Vector> two{Vector{0.0}, Vector{1.0}};
    CHECK_THROWS_AS(linalg::kmeans(two, 3, 1), Error);
    SeededRng rng(21);
    std::vector<Vector> pts;
    for (int i = 0; i < 100; ++i) pts.push_back(Vector{rng.normal(), rng.normal(), rng.normal()});
    CHECK(linalg::kmeans(pts, 5, 9) == linalg::kmeans(pts, 5, 9));
}

TEST_CASE("kmeans objective is non-increasing") {
    SeededRng rng(22);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<Vector> pts;
        for (int i = 0; i < 200; ++i) pts.push_back(Vector{rng.normal() * 3, rng.normal(), rng.normal() * 2});
        const auto res = linalg::kmeans_fit(pts, 2 + rng.below(6), rng.next_u64());
        for (std::size_t i = 1; i < res.objective.size(); ++i) CHECK(res.objective[i] <= res.objective[i - 1] * (1 + 1e-12));
    }
}

TEST_CASE("SeededRng streams are reproducible") {
    SeededRng a(1993), b(1993), c(1994);
    bool differs = false;
    for (int i = 0; i < 10000; ++i) {
        const auto x = a.next_u64();
        CHECK(x == b.next_u64());
        differs = differs || x != c.next_u64();
    }
    CHECK(differs);
    SeededRng d(7), e(7);
    for (int i = 0; i < 1000; ++i) CHECK(d.normal() == e.normal());
}
