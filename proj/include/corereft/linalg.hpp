#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace corereft::linalg {

// Dense row-major matrix of doubles. Entries are checked to be finite
// whenever a matrix is built from caller data or produced by an exported op.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    Matrix transposed() const;
    std::string shape() const;

    friend bool operator==(const Matrix& a, const Matrix& b) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

class Vector {
public:
    Vector() = default;
    explicit Vector(std::size_t len, double fill = 0.0) : data_(len, fill) {}
    explicit Vector(std::vector<double> data);
    Vector(std::initializer_list<double> values);

    std::size_t len() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    friend bool operator==(const Vector& a, const Vector& b) = default;

private:
    std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Exported operations
// ---------------------------------------------------------------------------

Matrix matmul(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, const Vector& x);
// a^T x
Vector matvec_t(const Matrix& a, const Vector& x);

double frobenius(const Matrix& a);
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

// Largest singular value by power iteration on the smaller Gram matrix.
double sigma_max(const Matrix& a, std::size_t max_iters = 50, double tol = 1e-10);

// Gram-Schmidt (two passes) over the rows; throws if rows are linearly dependent.
Matrix orthonormalize_rows(const Matrix& a);

bool all_finite(std::span<const double> values);
void require_finite(std::span<const double> values, const char* what);

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

struct KMeansResult {
    std::vector<Vector> centers;
    std::vector<std::size_t> assignment;
    // objective[0] is after seeding, then one entry per Lloyd iteration.
    std::vector<double> objective;
    std::size_t iterations = 0;
};

// k-means++ seeding followed by Lloyd iterations; deterministic in the seed.
KMeansResult kmeans_fit(std::span<const Vector> points, std::size_t k, std::uint64_t seed,
                        std::size_t max_iters = 100);

std::vector<Vector> kmeans(std::span<const Vector> points, std::size_t k, std::uint64_t seed,
                           std::size_t max_iters = 100);

// ---------------------------------------------------------------------------
// Raw row-major kernels used by the encoder hot paths. No shape checking.
// ---------------------------------------------------------------------------
namespace kernel {

// C[m,n] (+)= A[m,k] * B[k,n]
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate);
// C[m,n] (+)= A[k,m]^T * B[k,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
// C[m,n] (+)= A[m,k] * B[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);

}  // namespace kernel

}  // namespace corereft::linalg
