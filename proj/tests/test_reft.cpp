#include <doctest.h>

#include <cmath>

#include "corereft/error.hpp"
#include "corereft/reft.hpp"
#include "corereft/rng.hpp"
#include "oracles.hpp"

using namespace corereft;
using linalg::Matrix;
using linalg::Vector;
using reft::InterventionParams;

namespace {

Matrix random_matrix(SeededRng& rng, std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (auto& x : m.values()) x = rng.normal();
    return m;
}

Vector random_vector(SeededRng& rng, std::size_t n) {
    Vector v(n);
    for (auto& x : v.values()) x = rng.normal();
    return v;
}

InterventionParams random_params(SeededRng& rng, std::size_t rank, std::size_t dim) {
    return {random_matrix(rng, rank, dim), random_matrix(rng, rank, dim), random_vector(rng, rank), 0};
}

double max_abs_diff(const Vector& a, const Vector& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.len(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// h + R^T (W h + b - R h) by plain loops.
Vector loreft_oracle(const Vector& h, const InterventionParams& p) {
    const auto R = oracle::to_mat(p.R), W = oracle::to_mat(p.W);
    std::vector<double> u(p.rank());
    for (std::size_t r = 0; r < p.rank(); ++r) {
        u[r] = p.b[r];
        for (std::size_t c = 0; c < p.dim(); ++c) u[r] += (W[r][c] - R[r][c]) * h[c];
    }
    Vector out = h;
    for (std::size_t c = 0; c < p.dim(); ++c)
        for (std::size_t r = 0; r < p.rank(); ++r) out[c] += R[r][c] * u[r];
    return out;
}

}  // namespace

TEST_CASE("dii examples") {
    const Matrix R{{1, 0}};
    CHECK(reft::dii(Vector{1, 2}, Vector{3, 4}, R) == Vector{3, 2});
    SeededRng rng(1);
    const Vector h = random_vector(rng, 6);
    CHECK(reft::dii(h, h, random_matrix(rng, 3, 6)) == h);
    const Matrix Q = linalg::orthonormalize_rows(random_matrix(rng, 6, 6));
    const Vector hs = random_vector(rng, 6);
    CHECK(max_abs_diff(reft::dii(h, hs, Q), hs) < 1e-12);
    CHECK_THROWS_AS(reft::dii(Vector{1, 2}, Vector{1, 2, 3}, R), Error);
}

TEST_CASE("loreft examples") {
    const InterventionParams p{Matrix{{1, 0}}, Matrix{{0, 1}}, Vector{1.0}, 0};
    CHECK(reft::loreft(Vector{2, 3}, p) == Vector{4, 3});
    CHECK(reft::loreft(Vector{2, 3}, p) == loreft_oracle(Vector{2, 3}, p));
    CHECK_THROWS_AS(reft::loreft(Vector{1, 2, 3}, p), Error);
}

TEST_CASE("loreft matches the loop oracle on random draws") {
    SeededRng rng(2);
    for (int i = 0; i < 200; ++i) {
        const std::size_t dim = 2 + rng.below(20), rank = 1 + rng.below(dim);
        const auto p = random_params(rng, rank, dim);
        const Vector h = random_vector(rng, dim);
        CHECK(max_abs_diff(reft::loreft(h, p), loreft_oracle(h, p)) < 1e-10);
    }
}

TEST_CASE("identity edits are exact") {
    SeededRng rng(3);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t dim = 2 + rng.below(40), rank = 1 + rng.below(dim);
        const Matrix R = random_matrix(rng, rank, dim);
        const Vector h = random_vector(rng, dim);
        worst = std::max(worst, max_abs_diff(reft::dii(h, h, R), h));
        worst = std::max(worst, max_abs_diff(reft::loreft(h, {R, R, Vector(rank), 0}), h));
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("the edit stays inside the row space of R") {
    SeededRng rng(4);
    for (int i = 0; i < 200; ++i) {
        const std::size_t dim = 3 + rng.below(30), rank = 1 + rng.below(dim - 1);
        const auto p = random_params(rng, rank, dim);
        const Vector h = random_vector(rng, dim);
        const Vector e = reft::loreft(h, p);
        std::vector<double> delta(dim);
        for (std::size_t c = 0; c < dim; ++c) delta[c] = e[c] - h[c];
        // Project onto an orthonormal basis of the row space and look at the residual.
        const Matrix Q = linalg::orthonormalize_rows(p.R);
        std::vector<double> resid = delta;
        for (std::size_t r = 0; r < rank; ++r) {
            const double coef = linalg::dot(Q.row(r), delta);
            for (std::size_t c = 0; c < dim; ++c) resid[c] -= coef * Q(r, c);
        }
        CHECK(linalg::norm2(resid) < 1e-9);
    }
}

TEST_CASE("loreft reproduces dii for a matching W and b") {
    SeededRng rng(5);
    for (int i = 0; i < 100; ++i) {
        const std::size_t dim = 2 + rng.below(16), rank = 1 + rng.below(dim);
        const Matrix R = random_matrix(rng, rank, dim);
        const Vector h = random_vector(rng, dim), hs = random_vector(rng, dim);
        // W = R, b = R h_s - R h gives W h + b = R h_s.
        const Vector rhs = linalg::matvec(R, hs), rh = linalg::matvec(R, h);
        Vector b(rank);
        for (std::size_t r = 0; r < rank; ++r) b[r] = rhs[r] - rh[r];
        CHECK(max_abs_diff(reft::loreft(h, {R, R, b, 0}), reft::dii(h, hs, R)) < 1e-10);
    }
}

TEST_CASE("orth_penalty examples and scaling") {
    CHECK(reft::orth_penalty(Matrix{{2, 0}}) == 9.0);
    CHECK(reft::orth_penalty(Matrix::identity(4)) == 0.0);
    SeededRng rng(6);
    for (int i = 0; i < 50; ++i) {
        const std::size_t dim = 2 + rng.below(12), rank = 1 + rng.below(dim);
        const Matrix R = random_matrix(rng, rank, dim);
        const double c = rng.uniform(0.2, 3.0);
        Matrix cR = R;
        for (auto& v : cR.values()) v *= c;
        const auto G = oracle::matmul(oracle::to_mat(R), oracle::transpose(oracle::to_mat(R)));
        double ref = 0.0;
        for (std::size_t a = 0; a < rank; ++a)
            for (std::size_t b = 0; b < rank; ++b) {
                const double v = c * c * G[a][b] - (a == b ? 1.0 : 0.0);
                ref += v * v;
            }
        CHECK(reft::orth_penalty(cR) == doctest::Approx(ref).epsilon(1e-12));
    }
}

TEST_CASE("orth_penalty_grad matches central differences") {
    SeededRng rng(7);
    const Matrix R = random_matrix(rng, 3, 7);
    std::vector<double> g(R.size(), 0.0);
    reft::orth_penalty_grad(R, 1.0, g);
    for (std::size_t i = 0; i < R.size(); ++i) {
        Matrix p = R, m = R;
        p.values()[i] += 1e-6;
        m.values()[i] -= 1e-6;
        const double num = (reft::orth_penalty(p) - reft::orth_penalty(m)) / 2e-6;
        CHECK(g[i] == doctest::Approx(num).epsilon(1e-6));
    }
}

TEST_CASE("alignment_loss is the sum of its two terms") {
    SeededRng rng(8);
    for (int i = 0; i < 50; ++i) {
        const std::size_t dim = 2 + rng.below(12), rank = 1 + rng.below(dim);
        const auto p = random_params(rng, rank, dim);
        const Vector es = random_vector(rng, dim), eb = random_vector(rng, dim);
        const Vector edited = loreft_oracle(eb, p);
        double term1 = 0.0;
        for (std::size_t c = 0; c < dim; ++c) term1 += (es[c] - edited[c]) * (es[c] - edited[c]);
        const auto G = oracle::matmul(oracle::to_mat(p.R), oracle::transpose(oracle::to_mat(p.R)));
        double term2 = 0.0;
        for (std::size_t a = 0; a < rank; ++a)
            for (std::size_t b = 0; b < rank; ++b) term2 += std::pow(G[a][b] - (a == b ? 1.0 : 0.0), 2);
        CHECK(reft::alignment_loss(es, eb, p) == doctest::Approx(term1 + term2).epsilon(1e-12));
    }
    const Matrix Q = linalg::orthonormalize_rows(random_matrix(rng, 3, 8));
    const Vector e = random_vector(rng, 8);
    CHECK(reft::alignment_loss(e, e, {Q, Q, Vector(3), 0}) < 1e-24);
}

TEST_CASE("param_count examples") {
    reft::InterventionConfig cfg;
    cfg.rank = 0;
    cfg.layers = {0, 1, 2};
    CHECK(reft::param_count(cfg, 64) == 0);
    cfg.rank = 8;
    cfg.layers.clear();
    for (std::size_t l = 0; l < 12; ++l) cfg.layers.push_back(l);
    CHECK(reft::param_count(cfg, 768) == 147552);
    cfg.layers = {0};
    CHECK(reft::param_count(cfg, 64) == 1032);
}

TEST_CASE("init_interventions is deterministic, orthonormal and an identity edit") {
    reft::InterventionConfig cfg;
    cfg.layers = {0, 2, 3};
    cfg.rank = 6;
    cfg.init_seed = 77;
    const auto a = reft::init_interventions(cfg, 20);
    const auto b = reft::init_interventions(cfg, 20);
    CHECK(a == b);
    REQUIRE(a.size() == 3);
    SeededRng rng(9);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].layer == cfg.layers[i]);
        CHECK(reft::orth_penalty(a[i].R) < 1e-12);
        const Vector h = random_vector(rng, 20);
        CHECK(reft::loreft(h, a[i]) == h);
    }
    cfg.init_seed = 78;
    CHECK(reft::init_interventions(cfg, 20) != a);
    cfg.rank = 21;
    CHECK_THROWS_AS(reft::init_interventions(cfg, 20), Error);
}

TEST_CASE("intervention config validation") {
    reft::InterventionConfig cfg;
    cfg.layers = {0, 0};
    CHECK_THROWS_AS(cfg.validate(4, 16), Error);
    cfg.layers = {4};
    CHECK_THROWS_AS(cfg.validate(4, 16), Error);
    cfg.layers = {1, 3};
    CHECK_NOTHROW(cfg.validate(4, 16));
    cfg.rank = 0;
    CHECK_THROWS_AS(cfg.validate(4, 16), Error);
}

TEST_CASE("delta bound examples") {
    SeededRng rng(10);
    const auto p0 = InterventionParams{random_matrix(rng, 3, 8), random_matrix(rng, 3, 8), Vector(3), 0};
    const auto zero = reft::delta_bound_check(p0, Vector(8));
    CHECK(zero.delta_norm == 0.0);
    CHECK(zero.bound == 0.0);
    CHECK(zero.holds);
    CHECK_FALSE(zero.printed_bound.has_value());

    const Matrix Q = linalg::orthonormalize_rows(random_matrix(rng, 4, 12));
    const InterventionParams p{Q, random_matrix(rng, 4, 12), random_vector(rng, 4), 0};
    const Vector e = random_vector(rng, 12);
    const auto res = reft::delta_bound_check(p, e);
    std::vector<double> u(4);
    for (std::size_t r = 0; r < 4; ++r) u[r] = linalg::dot(p.W.row(r), e.values()) + p.b[r] - linalg::dot(Q.row(r), e.values());
    CHECK(std::abs(res.bound - linalg::norm2(u)) < 1e-9);
    CHECK(std::abs(res.delta_norm - linalg::norm2(u)) < 1e-9);
}

TEST_CASE("delta bound holds on random draws") {
    SeededRng rng(11);
    const std::pair<std::size_t, std::size_t> shapes[] = {{32, 4}, {64, 8}, {64, 64}};
    for (const auto& [dim, rank] : shapes) {
        for (int i = 0; i < 300; ++i) {
            const auto p = random_params(rng, rank, dim);
            const auto res = reft::delta_bound_check(p, random_vector(rng, dim));
            CHECK(res.holds);
            CHECK(res.printed_bound.has_value() == (rank == dim));
        }
    }
}
