#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "corereft/linalg.hpp"

namespace corereft::data {

using linalg::Matrix;

struct Dataset {
    Matrix inputs;              // one row per sample
    std::vector<int> labels;    // in [0, num_classes)
    std::vector<int> domains;   // empty, or one domain id per sample
    std::size_t num_classes = 0;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t dim() const noexcept { return inputs.cols(); }

    void validate() const;
    // Rows in the given order (indices may repeat).
    Dataset subset(const std::vector<std::size_t>& rows) const;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

Dataset concat(const Dataset& a, const Dataset& b);

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

struct ClusterSpec {
    // Class means are drawn N(0, mean_scale^2) per coordinate; samples add N(0, noise^2).
    double mean_scale = 1.0;
    double noise = 1.0;
    // When 0 < subspace < dim, means are drawn inside a fixed random subspace of
    // that dimension (shared by base and downstream); noise stays isotropic.
    std::size_t subspace = 0;

    friend bool operator==(const ClusterSpec&, const ClusterSpec&) = default;
};

// base: Gaussian clusters for pretraining. downstream: a disjoint set of
// classes from the same generator, passed through domain_gap_map (with the
// class basis when clusters.subspace is set).
std::pair<Dataset, Dataset> make_synthetic_cil(std::size_t n_classes, std::size_t dim,
                                               std::size_t per_class, double gap_strength,
                                               std::uint64_t seed, ClusterSpec clusters = {});

// The affine map used for the downstream domain gap: x -> A x + c.
struct AffineMap {
    Matrix A;
    std::vector<double> shift;
};
// With a class basis (k x dim, orthonormal rows) the linear part scales two
// random directions orthogonal to the class subspace by 1 + 20 * gap, so only
// class-independent noise grows. Without one it stretches dim/4 random
// directions and blends in a random rotation. The shift is gap * N(0, 1) per
// coordinate. gap_strength = 0 gives the identity.
AffineMap domain_gap_map(std::size_t dim, double gap_strength, std::uint64_t seed,
                         const Matrix* class_basis = nullptr);

struct DilSpec {
    ClusterSpec clusters{};
    double shift_scale = 6.0;  // norm scale of per-domain offsets
};

// Shared class structure; each domain applies its own rotation + shift.
Dataset make_synthetic_dil(std::size_t n_domains, std::size_t n_classes, std::size_t per_class,
                           std::size_t dim, std::uint64_t seed, DilSpec spec = {});

// Linear parts of the per-domain transforms (for invertibility checks).
std::vector<AffineMap> dil_domain_maps(std::size_t n_domains, std::size_t dim, std::uint64_t seed,
                                       double shift_scale);

// ---------------------------------------------------------------------------
// Imbalance
// ---------------------------------------------------------------------------

struct ImbalanceSpec {
    double alpha = 1.0;          // in (0, 1]
    std::size_t base_count = 0;  // M

    void validate() const;
};

// n_i = max(1, round_half_up(M * alpha^(i/N))) for 1-based class index i.
std::size_t imbalance_count(const ImbalanceSpec& spec, std::size_t i, std::size_t n_classes);

// Class c (0-based id) keeps imbalance_count(spec, c + 1, num_classes) samples,
// drawn without replacement with a seeded shuffle.
Dataset imbalance_sample(const Dataset& ds, const ImbalanceSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Task streams
// ---------------------------------------------------------------------------

enum class Scenario { til, dil, cil };

const char* to_string(Scenario s);
Scenario scenario_from_string(const std::string& s);

struct Task {
    std::size_t task_id = 0;
    std::vector<int> classes;  // sorted ascending
    int domain_id = 0;
    Dataset train;
    Dataset test;
};

struct TaskStream {
    Scenario scenario = Scenario::cil;
    std::vector<Task> tasks;

    // CIL/TIL: class sets pairwise disjoint. DIL: one shared class set, distinct domains.
    void validate() const;
};

// Shuffle the class order with `seed`, cut it into consecutive groups of `inc`
// classes (the last task takes any remainder) and split every class 80/20
// into train/test. scenario must be CIL or TIL.
TaskStream split_tasks(const Dataset& ds, std::size_t inc, Scenario scenario = Scenario::cil,
                       std::uint64_t seed = 1993, double test_fraction = 0.2);

// One task per domain id (domain order shuffled with `seed`), all classes in every task.
TaskStream split_domains(const Dataset& ds, std::uint64_t seed = 1993, double test_fraction = 0.2);

// Subsample every task's training split. The formula's class index i is the
// 1-based position of the class in the stream's (post-shuffle) class order.
void apply_imbalance(TaskStream& stream, const ImbalanceSpec& spec, std::uint64_t seed);

// Per-class test counts: round_half_up(fraction * n); the rest is train.
std::pair<Dataset, Dataset> stratified_split(const Dataset& ds, double test_fraction,
                                             std::uint64_t seed);

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

// IDX image file (magic 0x00000803, u8 pixels scaled to [0, 1]).
Matrix load_idx_images(const std::string& path);
// IDX label file (magic 0x00000801).
std::vector<int> load_idx_labels(const std::string& path);
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

void write_idx_images(const std::string& path, const std::vector<std::uint8_t>& pixels,
                      std::size_t count, std::size_t rows, std::size_t cols);
void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels);

// CSV with header "label,f0,f1,...". num_classes = max label + 1.
Dataset load_csv(const std::string& path);
void write_csv(const std::string& path, const Dataset& ds);

// UTF-8 JSON manifest:
//   { "format": "csv" | "idx", "num_classes": N,
//     "files": [ {"path": ..., "labels": ... (idx only), "domain": d}, ... ] }
// Relative paths resolve against the manifest's directory. Each file entry
// may carry a domain id, which is recorded per sample.
Dataset load_manifest(const std::string& path);

}  // namespace corereft::data
