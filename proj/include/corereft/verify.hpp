#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "corereft/linalg.hpp"
#include "corereft/nn.hpp"
#include "corereft/reft.hpp"

namespace corereft::verify {

// ---------------------------------------------------------------------------
// Finite-difference gradient check of intervention parameters
// ---------------------------------------------------------------------------

struct GradcheckOptions {
    std::size_t coordinates = 120;  // sampled (R, W, b) coordinates across all layers
    double step = 1e-5;             // central-difference step
    double tolerance = 1e-4;        // on |a - n| / max(|a|, |n|, floor)
    double floor = 1e-6;
    std::uint64_t seed = 1993;
    // Adds a perturbation to one analytic gradient entry before comparison.
    bool inject_fault = false;
};

struct GradcheckResult {
    std::size_t checked = 0;
    std::size_t failures = 0;
    double max_rel_error = 0.0;
    std::string worst;  // "layer L R[i,j]" style label of the worst coordinate
    bool passed() const noexcept { return checked > 0 && failures == 0; }
};

// Loss = sum(features * G) for a fixed random G, so every feature direction
// contributes to the gradient.
GradcheckResult gradcheck_interventions(const nn::FrozenEncoder& encoder,
                                        std::vector<reft::InterventionParams> interventions,
                                        const linalg::Matrix& inputs, reft::Positions positions,
                                        const GradcheckOptions& options = {});

// Two-block, width-16 encoder plus perturbed interventions on both blocks.
GradcheckResult tiny_encoder_gradcheck(const GradcheckOptions& options = {},
                                       reft::Positions positions = reft::Positions::all);

// ---------------------------------------------------------------------------
// Property suites
// ---------------------------------------------------------------------------

struct VerifyOptions {
    std::size_t bound_draws = 1000;  // per (dim, rank) pair
    std::uint64_t seed = 1993;
    bool inject_gradcheck_fault = false;
};

struct PropertyResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

struct BoundStats {
    std::size_t dim = 0, rank = 0;
    std::size_t draws = 0;
    std::size_t violations = 0;
    double max_tight_gap = 0.0;  // orthonormal R: |bound - ||We + b - Re|||
    std::size_t printed_draws = 0;
    std::size_t printed_violations = 0;
};

// Random (R, W, b, e) draws with Gaussian entries, plus the same number of
// draws with row-orthonormal R for the tightness check.
BoundStats delta_bound_stats(std::size_t dim, std::size_t rank, std::size_t draws, std::uint64_t seed);

struct VerifyReport {
    std::vector<PropertyResult> properties;
    std::vector<BoundStats> bounds;
    std::size_t bound_draws_total = 0;

    bool passed() const;
};

VerifyReport run_property_suites(const VerifyOptions& options = {});

std::string format_report(const VerifyReport& report, const VerifyOptions& options);

}  // namespace corereft::verify
