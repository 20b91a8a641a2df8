#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "corereft/linalg.hpp"

namespace corereft::reft {

using linalg::Matrix;
using linalg::Vector;

enum class Positions { all, cls };

const char* to_string(Positions p);
Positions positions_from_string(const std::string& s);

// Low-rank edit h -> h + R^T (W h + b - R h) attached to one encoder block.
//
// R and W are rank x dim. R's rows span the intervention subspace; the edit
// can only move h inside that row space.
struct InterventionParams {
    Matrix R;
    Matrix W;
    Vector b;
    std::size_t layer = 0;

    std::size_t rank() const noexcept { return R.rows(); }
    std::size_t dim() const noexcept { return R.cols(); }

    // Throws on inconsistent shapes or rank outside [1, dim].
    void validate() const;

    friend bool operator==(const InterventionParams&, const InterventionParams&) = default;
};

struct InterventionConfig {
    std::vector<std::size_t> layers;
    std::size_t rank = 8;
    Positions positions = Positions::all;
    double lambda_orth = 1.0;
    std::uint64_t init_seed = 1993;

    // Layer indices unique and below depth; rank within [1, dim].
    void validate(std::size_t depth, std::size_t dim) const;

    friend bool operator==(const InterventionConfig&, const InterventionConfig&) = default;
};

// h_b + R^T (R h_s - R h_b)
Vector dii(const Vector& h_b, const Vector& h_s, const Matrix& R);

// h + R^T (W h + b - R h)
Vector loreft(const Vector& h, const InterventionParams& p);

// ||R R^T - I_r||_F^2
double orth_penalty(const Matrix& R);

// d/dR of orth_penalty: 4 (R R^T - I) R, accumulated into grad (same shape as R).
void orth_penalty_grad(const Matrix& R, double scale, std::span<double> grad);

struct BoundCheck {
    double delta_norm = 0.0;  // ||R^T (W e + b - R e)||
    double bound = 0.0;       // sigma_max(R^T) * ||W e + b - R e||
    bool holds = false;
    // Only when rank == dim: the (W - I) e + b form, which is not a valid
    // bound in general and is reported for comparison.
    std::optional<double> printed_bound;
    std::optional<bool> printed_holds;
};

BoundCheck delta_bound_check(const InterventionParams& p, const Vector& e);

// ||e_s - loreft(e_b)||^2 + ||R R^T - I||_F^2
double alignment_loss(const Vector& e_s, const Vector& e_b, const InterventionParams& p);

// |layers| * (2 * rank * dim + rank)
std::size_t param_count(const InterventionConfig& cfg, std::size_t dim);

// R: orthonormal rows from a seeded Gaussian; W = R; b = 0. The initial edit is exactly zero.
std::vector<InterventionParams> init_interventions(const InterventionConfig& cfg, std::size_t dim);

}  // namespace corereft::reft
