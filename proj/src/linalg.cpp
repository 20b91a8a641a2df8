#include "corereft/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "corereft/error.hpp"
#include "corereft/rng.hpp"

namespace corereft::linalg {

bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

void require_finite(std::span<const double> values, const char* what) {
    if (!all_finite(values)) {
        throw Error(ErrorKind::argument, std::string(what) + " contains non-finite entries");
    }
}

// ---------------------------------------------------------------------------
// Matrix / Vector
// ---------------------------------------------------------------------------

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    require_finite(data_, "matrix fill");
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw Error(ErrorKind::shape, "matrix data length " + std::to_string(data_.size()) +
                                          " does not match " + shape());
    }
    require_finite(data_, "matrix");
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw Error(ErrorKind::shape, "ragged matrix literal");
        data_.insert(data_.end(), r.begin(), r.end());
    }
    require_finite(data_, "matrix");
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

std::string Matrix::shape() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

Vector::Vector(std::vector<double> data) : data_(std::move(data)) {
    require_finite(data_, "vector");
}

Vector::Vector(std::initializer_list<double> values) : data_(values) {
    require_finite(data_, "vector");
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------
namespace kernel {

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    std::size_t i = 0;
    // Four output rows per pass so each row of B is loaded once per block.
    for (; i + 4 <= m; i += 4) {
        double* __restrict c0 = c + i * n;
        double* __restrict c1 = c0 + n;
        double* __restrict c2 = c1 + n;
        double* __restrict c3 = c2 + n;
        const double* a0 = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double x0 = a0[p], x1 = a0[k + p], x2 = a0[2 * k + p], x3 = a0[3 * k + p];
            const double* __restrict bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double bv = bp[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        double* __restrict ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            const double* __restrict bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        double* __restrict c0 = c + i * n;
        double* __restrict c1 = c0 + n;
        double* __restrict c2 = c1 + n;
        double* __restrict c3 = c2 + n;
        for (std::size_t p = 0; p < k; ++p) {
            const double* ap = a + p * m + i;
            const double x0 = ap[0], x1 = ap[1], x2 = ap[2], x3 = ap[3];
            const double* __restrict bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double bv = bp[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        double* __restrict ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double api = a[p * m + i];
            const double* __restrict bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
    // Transpose B once so the inner loop streams contiguous memory.
    thread_local std::vector<double> bt;
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    gemm(a, bt.data(), c, m, k, n, accumulate);
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Exported operations
// ---------------------------------------------------------------------------

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw Error(ErrorKind::shape, "matmul of " + a.shape() + " by " + b.shape());
    }
    Matrix c(a.rows(), b.cols());
    kernel::gemm(a.values().data(), b.values().data(), c.values().data(), a.rows(), a.cols(),
                 b.cols(), false);
    require_finite(c.values(), "matmul result");
    return c;
}

Vector matvec(const Matrix& a, const Vector& x) {
    if (a.cols() != x.len()) {
        throw Error(ErrorKind::shape,
                    "matvec of " + a.shape() + " by vector of length " + std::to_string(x.len()));
    }
    Vector y(a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r) y[r] = dot(a.row(r), x.values());
    return y;
}

Vector matvec_t(const Matrix& a, const Vector& x) {
    if (a.rows() != x.len()) {
        throw Error(ErrorKind::shape, "transposed matvec of " + a.shape() +
                                          " by vector of length " + std::to_string(x.len()));
    }
    Vector y(a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double xr = x[r];
        const auto ar = a.row(r);
        for (std::size_t c = 0; c < a.cols(); ++c) y[c] += ar[c] * xr;
    }
    return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw Error(ErrorKind::shape, "dot of lengths " + std::to_string(a.size()) + " and " +
                                          std::to_string(b.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) {
    double s = 0.0;
    for (double v : a) s += v * v;
    return std::sqrt(s);
}

double frobenius(const Matrix& a) { return norm2(a.values()); }

double sigma_max(const Matrix& a, std::size_t max_iters, double tol) {
    if (a.empty()) throw Error(ErrorKind::argument, "sigma_max of empty matrix");
    if (max_iters < 1) throw Error(ErrorKind::argument, "sigma_max needs max_iters >= 1");
    if (!(tol > 0.0)) throw Error(ErrorKind::argument, "sigma_max needs tol > 0");

    // Iterate on the smaller of A^T A and A A^T; both share the nonzero spectrum.
    const bool use_rows = a.rows() < a.cols();
    const std::size_t n = use_rows ? a.rows() : a.cols();
    const std::size_t m = use_rows ? a.cols() : a.rows();

    auto apply = [&](const std::vector<double>& v, std::vector<double>& tmp,
                     std::vector<double>& out) {
        std::fill(tmp.begin(), tmp.end(), 0.0);
        std::fill(out.begin(), out.end(), 0.0);
        if (use_rows) {
            // tmp = A^T v, out = A tmp
            for (std::size_t r = 0; r < a.rows(); ++r)
                for (std::size_t c = 0; c < a.cols(); ++c) tmp[c] += a(r, c) * v[r];
            for (std::size_t r = 0; r < a.rows(); ++r)
                for (std::size_t c = 0; c < a.cols(); ++c) out[r] += a(r, c) * tmp[c];
        } else {
            // tmp = A v, out = A^T tmp
            for (std::size_t r = 0; r < a.rows(); ++r)
                for (std::size_t c = 0; c < a.cols(); ++c) tmp[r] += a(r, c) * v[c];
            for (std::size_t r = 0; r < a.rows(); ++r)
                for (std::size_t c = 0; c < a.cols(); ++c) out[c] += a(r, c) * tmp[r];
        }
    };

    // Fixed pseudo-random start keeps the result deterministic without
    // being orthogonal to the top singular vector in structured cases.
    SeededRng rng(0x5157A3ull);
    std::vector<double> v(n), tmp(m), w(n);
    for (auto& x : v) x = rng.uniform(0.5, 1.5);
    double vn = norm2(v);
    for (auto& x : v) x /= vn;

    double lambda = 0.0;
    for (std::size_t it = 0; it < max_iters; ++it) {
        apply(v, tmp, w);
        const double rq = dot(v, w);  // Rayleigh quotient, v is unit
        const double wn = norm2(w);
        if (wn == 0.0) return 0.0;
        for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / wn;
        const bool converged = it > 0 && std::abs(rq - lambda) <= tol * std::abs(rq);
        lambda = rq;
        if (converged) break;
    }
    // Final Rayleigh quotient with the last normalized iterate.
    apply(v, tmp, w);
    lambda = std::max(lambda, dot(v, w));
    return std::sqrt(std::max(lambda, 0.0));
}

Matrix orthonormalize_rows(const Matrix& a) {
    if (a.rows() > a.cols()) {
        throw Error(ErrorKind::shape, "cannot orthonormalize " + a.shape() + " rows (rows > cols)");
    }
    Matrix q = a;
    for (std::size_t i = 0; i < q.rows(); ++i) {
        auto qi = q.row(i);
        const double original = norm2(qi);
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t j = 0; j < i; ++j) {
                const auto qj = q.row(j);
                const double proj = dot(qi, qj);
                for (std::size_t c = 0; c < q.cols(); ++c) qi[c] -= proj * qj[c];
            }
        }
        const double nrm = norm2(qi);
        if (nrm <= 1e-12 * std::max(original, 1.0)) {
            throw Error(ErrorKind::argument, "rows are linearly dependent at row " + std::to_string(i));
        }
        for (auto& x : qi) x /= nrm;
    }
    return q;
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// Assign each point to its nearest center (lowest index on ties); returns the objective.
double assign(std::span<const Vector> points, const std::vector<Vector>& centers,
              std::vector<std::size_t>& assignment) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_c = 0;
        for (std::size_t c = 0; c < centers.size(); ++c) {
            const double d = squared_distance(points[i].values(), centers[c].values());
            if (d < best) {
                best = d;
                best_c = c;
            }
        }
        assignment[i] = best_c;
        total += best;
    }
    return total;
}

}  // namespace

KMeansResult kmeans_fit(std::span<const Vector> points, std::size_t k, std::uint64_t seed,
                        std::size_t max_iters) {
    if (points.empty()) throw Error(ErrorKind::argument, "kmeans on an empty point set");
    if (k < 1) throw Error(ErrorKind::argument, "kmeans needs k >= 1");
    if (k > points.size()) {
        throw Error(ErrorKind::argument, "kmeans with k=" + std::to_string(k) + " > n=" +
                                             std::to_string(points.size()));
    }
    const std::size_t dim = points[0].len();
    for (const auto& p : points) {
        if (p.len() != dim) throw Error(ErrorKind::shape, "kmeans points of differing dimension");
    }

    SeededRng rng(seed);
    const std::size_t n = points.size();
    KMeansResult res;
    res.assignment.assign(n, 0);

    // k-means++ seeding
    std::vector<bool> chosen(n, false);
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t first = static_cast<std::size_t>(rng.below(n));
    res.centers.push_back(points[first]);
    chosen[first] = true;
    while (res.centers.size() < k) {
        const auto& last = res.centers.back();
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], squared_distance(points[i].values(), last.values()));
            if (!chosen[i]) total += d2[i];
        }
        std::size_t pick = n;
        if (total > 0.0) {
            double target = rng.uniform() * total;
            for (std::size_t i = 0; i < n; ++i) {
                if (chosen[i] || d2[i] == 0.0) continue;
                pick = i;
                target -= d2[i];
                if (target < 0.0) break;
            }
        }
        if (pick == n) {
            // every remaining point coincides with a center
            for (std::size_t i = 0; i < n && pick == n; ++i)
                if (!chosen[i]) pick = i;
        }
        chosen[pick] = true;
        res.centers.push_back(points[pick]);
    }

    res.objective.push_back(assign(points, res.centers, res.assignment));

    std::vector<std::size_t> previous;
    for (std::size_t it = 0; it < max_iters; ++it) {
        std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            auto& s = sums[res.assignment[i]];
            const auto p = points[i].values();
            for (std::size_t c = 0; c < dim; ++c) s[c] += p[c];
            ++counts[res.assignment[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;  // empty cluster keeps its center
            for (auto& x : sums[c]) x /= static_cast<double>(counts[c]);
            res.centers[c] = Vector(std::move(sums[c]));
        }
        previous = res.assignment;
        res.objective.push_back(assign(points, res.centers, res.assignment));
        res.iterations = it + 1;
        if (previous == res.assignment) break;
    }
    return res;
}

std::vector<Vector> kmeans(std::span<const Vector> points, std::size_t k, std::uint64_t seed,
                           std::size_t max_iters) {
    return kmeans_fit(points, k, seed, max_iters).centers;
}

}  // namespace corereft::linalg
