#pragma once

// Experiment configuration: the TOML schema read by the command-line runner.
//
//   out = "results"                 output directory
//   seeds = [1993]                  one run group per seed
//   alphas = [1.0]                  imbalance factors (1.0 = balanced)
//   methods = ["core"]              any of core, frozen, finetune
//
//   [data]     source ("synthetic" | "manifest"), scenario ("cil" | "til" | "dil"),
//              n_classes, dim, per_class, gap_strength, mean_scale, noise, subspace,
//              n_domains, shift_scale, inc, test_fraction, seed, imbalance_m,
//              manifest, base_manifest
//   [encoder]  checkpoint, depth, dim, heads, mlp_ratio, tokens, input ("features" |
//              "patches"), input_dim, image_size, patch_size, seed
//   [pretrain] lr, weight_decay, batch, epochs, momentum, seed, validation_fraction
//   [intervention] rank, layers (empty = every block), positions ("all" | "cls"), lambda_orth
//   [train]    lr, weight_decay, batch, epochs, momentum
//   [continual] similarity ("cosine" | "dot"), kmeans_k
//   [sweep]    axis ("rank" | "layers" | "alpha" | "seed"), values (empty = default grid)
//
// Every key is optional; unknown keys are rejected. The run seed drives the
// class-order shuffle, intervention init, batch order, k-means seeding and
// imbalance subsampling; data.seed and encoder.seed stay fixed across runs.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "corereft/continual.hpp"
#include "corereft/data.hpp"
#include "corereft/nn.hpp"
#include "corereft/reft.hpp"
#include "corereft/toml.hpp"

namespace corereft::config {

struct DataSpec {
    std::string source = "synthetic";
    data::Scenario scenario = data::Scenario::cil;
    std::size_t n_classes = 20;
    std::size_t dim = 64;
    std::size_t per_class = 100;
    double gap_strength = 1.0;
    data::ClusterSpec clusters{3.0, 0.333, 12};
    std::size_t n_domains = 3;
    double shift_scale = 6.0;
    std::size_t inc = 4;
    double test_fraction = 0.2;
    std::uint64_t seed = 1993;
    std::size_t imbalance_m = 0;  // 0: largest per-class training count in the stream
    std::string manifest;
    std::string base_manifest;

    friend bool operator==(const DataSpec&, const DataSpec&) = default;
};

struct SgdSpec {
    double lr = 0.05;
    double weight_decay = 5e-4;
    std::size_t batch = 48;
    std::size_t epochs = 20;
    double momentum = 0.9;

    friend bool operator==(const SgdSpec&, const SgdSpec&) = default;
};

struct PretrainSpec {
    SgdSpec sgd{0.05, 5e-4, 48, 10, 0.9};
    std::uint64_t seed = 1993;
    double validation_fraction = 0.2;

    friend bool operator==(const PretrainSpec&, const PretrainSpec&) = default;
};

enum class SweepAxis { rank, layers, alpha, seed };

const char* to_string(SweepAxis a);
SweepAxis sweep_axis_from_string(const std::string& s);

struct SweepSpec {
    SweepAxis axis = SweepAxis::rank;
    std::vector<double> values;

    friend bool operator==(const SweepSpec&, const SweepSpec&) = default;
};

struct ExperimentConfig {
    std::string out = "results";
    std::vector<std::uint64_t> seeds{1993};
    std::vector<double> alphas{1.0};
    std::vector<continual::Method> methods{continual::Method::core};

    DataSpec data;
    std::string encoder_checkpoint;
    nn::EncoderConfig encoder;
    PretrainSpec pretrain;
    reft::InterventionConfig intervention;
    SgdSpec train;
    continual::Similarity similarity = continual::Similarity::cosine;
    std::size_t kmeans_k = 5;
    SweepSpec sweep;

    // Cross-field checks; throws ConfigError naming the offending key.
    void validate() const;

    // Layers actually used: intervention.layers, or every block when empty.
    std::vector<std::size_t> resolved_layers() const;

    optim::TrainHyper pretrain_hyper() const;
    optim::TrainHyper train_hyper(std::uint64_t run_seed) const;
    reft::InterventionConfig intervention_for(std::uint64_t run_seed) const;

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// Throws ConfigError (key = dotted path) on unknown keys or wrongly typed values.
ExperimentConfig from_toml(const toml::Document& doc);
toml::Document to_toml(const ExperimentConfig& cfg);

ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::string& path);
std::string serialize_config(const ExperimentConfig& cfg);

// `count` block indices evenly spaced over `depth` and ending at the last block:
// depth - 1 - floor(j * depth / count) for j < count, returned ascending.
std::vector<std::size_t> evenly_spaced_layers(std::size_t depth, std::size_t count);

// Default sweep grids. Layer counts {1,3,6,9,12} are scaled by depth/12,
// rounded half up, clamped to [1, depth] and deduplicated.
std::vector<double> default_grid(SweepAxis axis, std::size_t depth);

}  // namespace corereft::config
