#pragma once

// Small pre-norm transformer encoder with hand-written reverse mode.
//
// Input rows are cut into (tokens - 1) patches, linearly embedded, prefixed
// with a learned class token and given learned positional embeddings. Each
// block is
//
//     x = x + MHSA(LN1(x))
//     x = x + MLP(LN2(x))          (GELU, hidden = dim * mlp_ratio)
//     x = loreft(x)                (only when an intervention targets the block)
//
// and the output feature is the layer-normed class-token row after the last block.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "corereft/data.hpp"
#include "corereft/linalg.hpp"
#include "corereft/optim.hpp"
#include "corereft/reft.hpp"

namespace corereft::nn {

using linalg::Matrix;
using linalg::Vector;

enum class InputMode { features, patches };

struct EncoderConfig {
    std::size_t depth = 4;
    std::size_t dim = 64;
    std::size_t heads = 4;
    double mlp_ratio = 4.0;
    std::size_t tokens = 17;  // patches + class token
    InputMode input = InputMode::features;
    // features: length of each input row, split evenly over the patch tokens.
    std::size_t input_dim = 64;
    // patches: square single-channel image of side image_size cut into patch_size tiles.
    std::size_t image_size = 16;
    std::size_t patch_size = 4;
    std::uint64_t seed = 1993;

    std::size_t num_patches() const noexcept { return tokens - 1; }
    std::size_t patch_dim() const noexcept;
    std::size_t input_len() const noexcept;
    std::size_t hidden() const noexcept;

    void validate() const;

    nlohmann::json to_json() const;
    static EncoderConfig from_json(const nlohmann::json& j);

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Named slice of the flat parameter vector.
struct ParamEntry {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t offset = 0;
    std::size_t size() const noexcept { return rows * cols; }
};

struct BlockOffsets {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2;
};

// Parameter order is the serialization order:
//   patch_w [patch_dim x dim], patch_b [dim], cls [dim], pos [tokens x dim],
//   then per block: ln1_g, ln1_b, w_qkv [dim x 3dim], b_qkv, w_o [dim x dim], b_o,
//                   ln2_g, ln2_b, w_1 [dim x hidden], b_1, w_2 [hidden x dim], b_2,
//   then lnf_g, lnf_b (final norm applied to the class-token row).
// Weight matrices are stored input-major, i.e. y = x W + b.
struct ParamLayout {
    std::vector<ParamEntry> entries;
    std::size_t patch_w = 0, patch_b = 0, cls = 0, pos = 0;
    std::vector<BlockOffsets> blocks;
    std::size_t lnf_g = 0, lnf_b = 0;
    std::size_t total = 0;

    static ParamLayout build(const EncoderConfig& cfg);
    const ParamEntry& find(const std::string& name) const;
};

class FrozenEncoder {
public:
    // Randomly initialized (seeded by cfg.seed), not yet frozen.
    explicit FrozenEncoder(EncoderConfig cfg);
    FrozenEncoder(EncoderConfig cfg, std::vector<double> params, bool frozen);
    // Copies get a fresh instance id so tapes never cross between them.
    FrozenEncoder(const FrozenEncoder& other);
    FrozenEncoder& operator=(const FrozenEncoder& other);
    FrozenEncoder(FrozenEncoder&&) noexcept = default;
    FrozenEncoder& operator=(FrozenEncoder&&) noexcept = default;

    const EncoderConfig& config() const noexcept { return cfg_; }
    const ParamLayout& layout() const noexcept { return layout_; }
    bool frozen() const noexcept { return frozen_; }
    void freeze() noexcept { frozen_ = true; }

    std::span<const double> params() const noexcept { return params_; }
    // Throws if frozen. Invalidates outstanding tapes.
    std::span<double> mutable_params();

    std::size_t param_count() const noexcept { return params_.size(); }
    // FNV-1a over the raw parameter bytes.
    std::uint64_t checksum() const;

    // Copy that may be trained again (used by the full-finetune baseline).
    FrozenEncoder thawed_copy() const;

    std::uint64_t instance_id() const noexcept { return id_; }
    std::uint64_t version() const noexcept { return version_; }

    friend bool operator==(const FrozenEncoder& a, const FrozenEncoder& b) {
        return a.cfg_ == b.cfg_ && a.frozen_ == b.frozen_ && a.params_ == b.params_;
    }

private:
    EncoderConfig cfg_;
    ParamLayout layout_;
    std::vector<double> params_;
    bool frozen_ = false;
    std::uint64_t id_ = 0;
    std::uint64_t version_ = 0;
};

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct BlockCache {
    std::vector<double> x_in, xhat1, rstd1, ln1, qkv, probs, ctx, x_mid, xhat2, rstd2, ln2, h_pre,
        h_act, x_out, edit_u;
    bool intervened = false;
    std::size_t intervention = 0;  // index into Tape::interventions
};

// Activations of one forward pass, consumed by backward. The encoder id and
// version identify the exact parameter state the pass ran against.
struct Tape {
    std::uint64_t encoder_id = 0;
    std::uint64_t encoder_version = 0;
    std::size_t batch = 0;
    reft::Positions positions = reft::Positions::all;
    std::vector<double> patches;  // [batch * num_patches, patch_dim]
    std::vector<BlockCache> blocks;
    std::vector<reft::InterventionParams> interventions;
    std::vector<double> final_xhat, final_rstd;  // final norm over the class-token rows

    std::size_t layer_count() const noexcept { return blocks.size(); }
};

struct ForwardResult {
    Matrix features;  // [batch, dim]
    Tape tape;
};

// interventions: at most one per block; each must match the encoder width.
// positions selects which token rows an intervention edits (parameters are
// shared across the edited rows).
ForwardResult forward(const FrozenEncoder& enc, const Matrix& batch,
                      std::span<const reft::InterventionParams> interventions = {},
                      reft::Positions positions = reft::Positions::all);

// Features only; same arithmetic as forward() without keeping the tape.
Matrix encode(const FrozenEncoder& enc, const Matrix& batch,
              std::span<const reft::InterventionParams> interventions = {},
              reft::Positions positions = reft::Positions::all);

// Gradient of one intervention's (R, W, b).
struct InterventionGrad {
    std::size_t layer = 0;
    std::vector<double> dR, dW, db;
};

struct Gradients {
    std::vector<InterventionGrad> interventions;  // one per selected layer, in layer order
    std::vector<double> backbone;                 // empty unless backbone gradients were requested
};

// Reverse pass for the selected intervention layers. Never produces backbone
// gradients. Throws ErrorKind::stale_tape if the tape does not belong to the
// current state of `enc`, and ErrorKind::shape on mismatched grad_features.
Gradients backward(const FrozenEncoder& enc, const Tape& tape, const Matrix& grad_features,
                   std::span<const std::size_t> trainable_layers);

// Reverse pass that also returns gradients for every backbone parameter
// (layout order). Requires an encoder that is not frozen.
Gradients backward_full(const FrozenEncoder& enc, const Tape& tape, const Matrix& grad_features,
                        std::span<const std::size_t> trainable_layers);

// ---------------------------------------------------------------------------
// Classification head and loss
// ---------------------------------------------------------------------------

struct LinearHead {
    Matrix weight;  // [classes, dim]
    Vector bias;    // [classes]

    static LinearHead init(std::size_t classes, std::size_t dim, std::uint64_t seed);
    Matrix logits(const Matrix& features) const;
};

struct HeadGrad {
    std::vector<double> d_weight, d_bias;
    Matrix d_features;
};

HeadGrad head_backward(const LinearHead& head, const Matrix& features, const Matrix& grad_logits);

struct LossResult {
    double loss = 0.0;     // mean cross-entropy
    Matrix grad_logits;    // d loss / d logits
    std::size_t correct = 0;
};

// targets are head-local indices in [0, classes).
LossResult softmax_cross_entropy(const Matrix& logits, std::span<const int> targets);

// ---------------------------------------------------------------------------
// Pretraining and checkpoints
// ---------------------------------------------------------------------------

struct PretrainResult {
    FrozenEncoder encoder;
    std::vector<double> epoch_loss;
    double train_accuracy = 0.0;                // percent, temporary head, last epoch
    std::optional<double> validation_accuracy;  // percent, temporary head
};

// Trains every encoder weight plus a temporary linear head by mini-batch SGD
// with cosine decay; the head is discarded and the encoder returned frozen.
PretrainResult pretrain(const EncoderConfig& cfg, const data::Dataset& base,
                        const optim::TrainHyper& hyper, const data::Dataset* validation = nullptr);

// "COREENC1" container: JSON config header, then the flat parameters.
std::string save_encoder(const FrozenEncoder& enc);
FrozenEncoder load_encoder(std::string_view bytes);

// Gather a batch of rows into [batch * num_patches, patch_dim] patch rows.
std::vector<double> extract_patches(const EncoderConfig& cfg, const Matrix& batch);

}  // namespace corereft::nn
