#include "corereft/nn.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numbers>
#include <numeric>
#include <set>

#include "corereft/binio.hpp"
#include "corereft/error.hpp"
#include "corereft/rng.hpp"

namespace corereft::nn {

using linalg::kernel::gemm;
using linalg::kernel::gemm_nt;
using linalg::kernel::gemm_tn;

namespace {

constexpr double kLnEps = 1e-6;

std::atomic<std::uint64_t> g_next_encoder_id{1};

}  // namespace

// ---------------------------------------------------------------------------
// EncoderConfig
// ---------------------------------------------------------------------------

std::size_t EncoderConfig::patch_dim() const noexcept {
    if (input == InputMode::patches) return patch_size * patch_size;
    return tokens > 1 ? input_dim / (tokens - 1) : 0;
}

std::size_t EncoderConfig::input_len() const noexcept {
    return input == InputMode::patches ? image_size * image_size : input_dim;
}

std::size_t EncoderConfig::hidden() const noexcept {
    return static_cast<std::size_t>(std::llround(static_cast<double>(dim) * mlp_ratio));
}

void EncoderConfig::validate() const {
    if (dim == 0) throw Error(ErrorKind::argument, "encoder dim must be > 0");
    if (heads == 0 || dim % heads != 0) {
        throw Error(ErrorKind::argument, "encoder dim " + std::to_string(dim) +
                                             " not divisible by heads " + std::to_string(heads));
    }
    if (tokens < 2) throw Error(ErrorKind::argument, "encoder needs tokens >= 2 (class token + patches)");
    if (!(mlp_ratio > 0.0) || hidden() == 0) throw Error(ErrorKind::argument, "mlp_ratio must be > 0");
    if (input == InputMode::features) {
        if (input_dim == 0 || input_dim % (tokens - 1) != 0) {
            throw Error(ErrorKind::argument, "input_dim " + std::to_string(input_dim) +
                                                 " not divisible by patch count " +
                                                 std::to_string(tokens - 1));
        }
    } else {
        if (patch_size == 0 || image_size % patch_size != 0) {
            throw Error(ErrorKind::argument, "image_size must be a multiple of patch_size");
        }
        const std::size_t grid = image_size / patch_size;
        if (grid * grid != tokens - 1) {
            throw Error(ErrorKind::argument, "patch grid " + std::to_string(grid) + "x" +
                                                 std::to_string(grid) + " does not match tokens - 1 = " +
                                                 std::to_string(tokens - 1));
        }
    }
}

nlohmann::json EncoderConfig::to_json() const {
    return {{"depth", depth},
            {"dim", dim},
            {"heads", heads},
            {"mlp_ratio", mlp_ratio},
            {"tokens", tokens},
            {"input", input == InputMode::features ? "features" : "patches"},
            {"input_dim", input_dim},
            {"image_size", image_size},
            {"patch_size", patch_size},
            {"seed", seed}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
    EncoderConfig c;
    try {
        c.depth = j.at("depth").get<std::size_t>();
        c.dim = j.at("dim").get<std::size_t>();
        c.heads = j.at("heads").get<std::size_t>();
        c.mlp_ratio = j.at("mlp_ratio").get<double>();
        c.tokens = j.at("tokens").get<std::size_t>();
        const auto mode = j.at("input").get<std::string>();
        if (mode == "features") c.input = InputMode::features;
        else if (mode == "patches") c.input = InputMode::patches;
        else throw Error(ErrorKind::format, "unknown input mode '" + mode + "'");
        c.input_dim = j.at("input_dim").get<std::size_t>();
        c.image_size = j.at("image_size").get<std::size_t>();
        c.patch_size = j.at("patch_size").get<std::size_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::format, std::string("bad encoder config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Layout / encoder
// ---------------------------------------------------------------------------

ParamLayout ParamLayout::build(const EncoderConfig& cfg) {
    ParamLayout l;
    auto add = [&](const std::string& name, std::size_t rows, std::size_t cols) {
        l.entries.push_back({name, rows, cols, l.total});
        l.total += rows * cols;
        return l.entries.back().offset;
    };
    const std::size_t d = cfg.dim, hid = cfg.hidden();
    l.patch_w = add("patch_w", cfg.patch_dim(), d);
    l.patch_b = add("patch_b", 1, d);
    l.cls = add("cls", 1, d);
    l.pos = add("pos", cfg.tokens, d);
    for (std::size_t b = 0; b < cfg.depth; ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        BlockOffsets o{};
        o.ln1_g = add(p + "ln1_g", 1, d);
        o.ln1_b = add(p + "ln1_b", 1, d);
        o.w_qkv = add(p + "w_qkv", d, 3 * d);
        o.b_qkv = add(p + "b_qkv", 1, 3 * d);
        o.w_o = add(p + "w_o", d, d);
        o.b_o = add(p + "b_o", 1, d);
        o.ln2_g = add(p + "ln2_g", 1, d);
        o.ln2_b = add(p + "ln2_b", 1, d);
        o.w_1 = add(p + "w_1", d, hid);
        o.b_1 = add(p + "b_1", 1, hid);
        o.w_2 = add(p + "w_2", hid, d);
        o.b_2 = add(p + "b_2", 1, d);
        l.blocks.push_back(o);
    }
    l.lnf_g = add("lnf_g", 1, d);
    l.lnf_b = add("lnf_b", 1, d);
    return l;
}

const ParamEntry& ParamLayout::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return e;
    throw Error(ErrorKind::argument, "no parameter named '" + name + "'");
}

FrozenEncoder::FrozenEncoder(EncoderConfig cfg)
    : cfg_(cfg), id_(g_next_encoder_id.fetch_add(1)) {
    cfg_.validate();
    layout_ = ParamLayout::build(cfg_);
    params_.assign(layout_.total, 0.0);

    SeededRng rng(cfg_.seed);
    auto xavier = [&](std::size_t off, std::size_t fan_in, std::size_t fan_out) {
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (std::size_t i = 0; i < fan_in * fan_out; ++i) params_[off + i] = rng.uniform(-a, a);
    };
    auto normal = [&](std::size_t off, std::size_t n, double std) {
        for (std::size_t i = 0; i < n; ++i) params_[off + i] = std * rng.normal();
    };
    auto ones = [&](std::size_t off, std::size_t n) { std::fill_n(params_.begin() + off, n, 1.0); };

    const std::size_t d = cfg_.dim, hid = cfg_.hidden();
    xavier(layout_.patch_w, cfg_.patch_dim(), d);
    normal(layout_.cls, d, 0.02);
    normal(layout_.pos, cfg_.tokens * d, 0.02);
    for (const auto& o : layout_.blocks) {
        ones(o.ln1_g, d);
        xavier(o.w_qkv, d, 3 * d);
        xavier(o.w_o, d, d);
        ones(o.ln2_g, d);
        xavier(o.w_1, d, hid);
        xavier(o.w_2, hid, d);
    }
    ones(layout_.lnf_g, d);
}

FrozenEncoder::FrozenEncoder(EncoderConfig cfg, std::vector<double> params, bool frozen)
    : cfg_(cfg), params_(std::move(params)), frozen_(frozen), id_(g_next_encoder_id.fetch_add(1)) {
    cfg_.validate();
    layout_ = ParamLayout::build(cfg_);
    if (params_.size() != layout_.total) {
        throw Error(ErrorKind::shape, "encoder expects " + std::to_string(layout_.total) +
                                          " parameters, got " + std::to_string(params_.size()));
    }
    linalg::require_finite(params_, "encoder parameters");
}

FrozenEncoder::FrozenEncoder(const FrozenEncoder& other)
    : cfg_(other.cfg_),
      layout_(other.layout_),
      params_(other.params_),
      frozen_(other.frozen_),
      id_(g_next_encoder_id.fetch_add(1)) {}

FrozenEncoder& FrozenEncoder::operator=(const FrozenEncoder& other) {
    if (this != &other) {
        cfg_ = other.cfg_;
        layout_ = other.layout_;
        params_ = other.params_;
        frozen_ = other.frozen_;
        id_ = g_next_encoder_id.fetch_add(1);
        version_ = 0;
    }
    return *this;
}

std::span<double> FrozenEncoder::mutable_params() {
    if (frozen_) throw Error(ErrorKind::argument, "encoder is frozen; parameters are immutable");
    ++version_;
    return params_;
}

std::uint64_t FrozenEncoder::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    const auto* bytes = reinterpret_cast<const unsigned char*>(params_.data());
    for (std::size_t i = 0; i < params_.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

FrozenEncoder FrozenEncoder::thawed_copy() const {
    FrozenEncoder copy(*this);
    copy.frozen_ = false;
    return copy;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

std::vector<double> extract_patches(const EncoderConfig& cfg, const Matrix& batch) {
    if (batch.cols() != cfg.input_len()) {
        throw Error(ErrorKind::shape, "batch is " + batch.shape() + " but encoder expects rows of length " +
                                          std::to_string(cfg.input_len()));
    }
    const std::size_t np = cfg.num_patches(), pd = cfg.patch_dim();
    std::vector<double> out(batch.rows() * np * pd);
    if (cfg.input == InputMode::features) {
        std::copy(batch.values().begin(), batch.values().end(), out.begin());
        return out;
    }
    const std::size_t side = cfg.image_size, ps = cfg.patch_size, grid = side / ps;
    for (std::size_t b = 0; b < batch.rows(); ++b) {
        const auto img = batch.row(b);
        for (std::size_t gy = 0; gy < grid; ++gy) {
            for (std::size_t gx = 0; gx < grid; ++gx) {
                double* dst = out.data() + ((b * np) + gy * grid + gx) * pd;
                for (std::size_t y = 0; y < ps; ++y)
                    for (std::size_t x = 0; x < ps; ++x)
                        dst[y * ps + x] = img[(gy * ps + y) * side + gx * ps + x];
            }
        }
    }
    return out;
}

namespace {

struct Dims {
    std::size_t B, T, d, H, dh, hid, np, pd, N;
    explicit Dims(const EncoderConfig& c, std::size_t batch)
        : B(batch), T(c.tokens), d(c.dim), H(c.heads), dh(c.dim / c.heads), hid(c.hidden()),
          np(c.num_patches()), pd(c.patch_dim()), N(batch * c.tokens) {}
};

void add_bias(double* y, const double* bias, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] += bias[c];
}

void col_sum_acc(const double* x, double* out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c] += x[r * cols + c];
}

void layer_norm(const std::vector<double>& x, const double* g, const double* b, std::size_t rows,
                std::size_t d, std::vector<double>& xhat, std::vector<double>& rstd,
                std::vector<double>& out) {
    xhat.resize(rows * d);
    rstd.resize(rows);
    out.resize(rows * d);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * d;
        double mean = 0.0;
        for (std::size_t c = 0; c < d; ++c) mean += xr[c];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        rstd[r] = rs;
        for (std::size_t c = 0; c < d; ++c) {
            const double xh = (xr[c] - mean) * rs;
            xhat[r * d + c] = xh;
            out[r * d + c] = xh * g[c] + b[c];
        }
    }
}

// dx += LN backward; optionally accumulates dgamma/dbeta.
void layer_norm_backward(const std::vector<double>& dout, const std::vector<double>& xhat,
                         const std::vector<double>& rstd, const double* g, std::size_t rows,
                         std::size_t d, std::vector<double>& dx, double* dg, double* db) {
    std::vector<double> dxh(d);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* dor = dout.data() + r * d;
        const double* xh = xhat.data() + r * d;
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            dxh[c] = dor[c] * g[c];
            m1 += dxh[c];
            m2 += dxh[c] * xh[c];
            if (dg) {
                dg[c] += dor[c] * xh[c];
                db[c] += dor[c];
            }
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        double* dxr = dx.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) dxr[c] += rstd[r] * (dxh[c] - m1 - xh[c] * m2);
    }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

std::vector<std::size_t> edited_rows(const Dims& dm, reft::Positions positions) {
    std::vector<std::size_t> rows;
    if (positions == reft::Positions::all) {
        rows.resize(dm.N);
        std::iota(rows.begin(), rows.end(), 0);
    } else {
        for (std::size_t b = 0; b < dm.B; ++b) rows.push_back(b * dm.T);
    }
    return rows;
}

// x[rows] += (x W^T + b - x R^T) R ; u is stored for backward.
void apply_intervention(const reft::InterventionParams& p, const Dims& dm,
                        const std::vector<std::size_t>& rows, std::vector<double>& x,
                        std::vector<double>& u) {
    const std::size_t n = rows.size(), d = dm.d, r = p.rank();
    std::vector<double> h(n * d);
    for (std::size_t i = 0; i < n; ++i) std::copy_n(x.data() + rows[i] * d, d, h.data() + i * d);
    std::vector<double> hw(n * r), hr(n * r);
    gemm_nt(h.data(), p.W.values().data(), hw.data(), n, d, r, false);
    gemm_nt(h.data(), p.R.values().data(), hr.data(), n, d, r, false);
    u.resize(n * r);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < r; ++k) u[i * r + k] = hw[i * r + k] + p.b[k] - hr[i * r + k];
    std::vector<double> delta(n * d);
    gemm(u.data(), p.R.values().data(), delta.data(), n, r, d, false);
    for (std::size_t i = 0; i < n; ++i) {
        double* xr = x.data() + rows[i] * d;
        for (std::size_t c = 0; c < d; ++c) xr[c] += delta[i * d + c];
    }
}

void check_interventions(const EncoderConfig& cfg, std::span<const reft::InterventionParams> ivs) {
    std::set<std::size_t> layers;
    for (const auto& p : ivs) {
        if (p.dim() != cfg.dim) {
            throw Error(ErrorKind::shape, "intervention width " + std::to_string(p.dim()) +
                                              " != encoder dim " + std::to_string(cfg.dim));
        }
        p.validate();
        if (p.layer >= cfg.depth) {
            throw Error(ErrorKind::argument, "intervention on block " + std::to_string(p.layer) +
                                                 " but encoder depth is " + std::to_string(cfg.depth));
        }
        if (!layers.insert(p.layer).second) {
            throw Error(ErrorKind::argument, "two interventions on block " + std::to_string(p.layer));
        }
    }
}

void block_forward(const double* P, const BlockOffsets& o, const Dims& dm, std::vector<double>& x,
                   BlockCache& c) {
    const std::size_t N = dm.N, d = dm.d, T = dm.T, H = dm.H, dh = dm.dh, hid = dm.hid;
    c.x_in = x;

    // attention
    layer_norm(x, P + o.ln1_g, P + o.ln1_b, N, d, c.xhat1, c.rstd1, c.ln1);
    c.qkv.resize(N * 3 * d);
    gemm(c.ln1.data(), P + o.w_qkv, c.qkv.data(), N, d, 3 * d, false);
    add_bias(c.qkv.data(), P + o.b_qkv, N, 3 * d);

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    c.probs.resize(dm.B * H * T * T);
    c.ctx.assign(N * d, 0.0);
    const std::size_t s3 = 3 * d;
    for (std::size_t b = 0; b < dm.B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            double* prob = c.probs.data() + (b * H + h) * T * T;
            for (std::size_t i = 0; i < T; ++i) {
                const double* qi = c.qkv.data() + (b * T + i) * s3 + h * dh;
                double mx = -INFINITY;
                for (std::size_t j = 0; j < T; ++j) {
                    const double* kj = c.qkv.data() + (b * T + j) * s3 + d + h * dh;
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
                    s *= scale;
                    prob[i * T + j] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < T; ++j) {
                    prob[i * T + j] = std::exp(prob[i * T + j] - mx);
                    z += prob[i * T + j];
                }
                double* ci = c.ctx.data() + (b * T + i) * d + h * dh;
                for (std::size_t j = 0; j < T; ++j) {
                    prob[i * T + j] /= z;
                    const double pij = prob[i * T + j];
                    const double* vj = c.qkv.data() + (b * T + j) * s3 + 2 * d + h * dh;
                    for (std::size_t e = 0; e < dh; ++e) ci[e] += pij * vj[e];
                }
            }
        }
    }
    std::vector<double> attn(N * d);
    gemm(c.ctx.data(), P + o.w_o, attn.data(), N, d, d, false);
    add_bias(attn.data(), P + o.b_o, N, d);
    for (std::size_t i = 0; i < N * d; ++i) x[i] += attn[i];
    c.x_mid = x;

    // MLP
    layer_norm(x, P + o.ln2_g, P + o.ln2_b, N, d, c.xhat2, c.rstd2, c.ln2);
    c.h_pre.resize(N * hid);
    gemm(c.ln2.data(), P + o.w_1, c.h_pre.data(), N, d, hid, false);
    add_bias(c.h_pre.data(), P + o.b_1, N, hid);
    c.h_act.resize(N * hid);
    for (std::size_t i = 0; i < N * hid; ++i) c.h_act[i] = gelu(c.h_pre[i]);
    std::vector<double> mlp(N * d);
    gemm(c.h_act.data(), P + o.w_2, mlp.data(), N, hid, d, false);
    add_bias(mlp.data(), P + o.b_2, N, d);
    for (std::size_t i = 0; i < N * d; ++i) x[i] += mlp[i];
    c.x_out = x;
}

Matrix run_forward(const FrozenEncoder& enc, const Matrix& batch,
                   std::span<const reft::InterventionParams> ivs, reft::Positions positions,
                   Tape* tape) {
    const auto& cfg = enc.config();
    check_interventions(cfg, ivs);
    linalg::require_finite(batch.values(), "encoder input");
    const Dims dm(cfg, batch.rows());
    const auto& L = enc.layout();
    const double* P = enc.params().data();

    std::vector<double> patches = extract_patches(cfg, batch);
    std::vector<double> emb(dm.B * dm.np * dm.d);
    gemm(patches.data(), P + L.patch_w, emb.data(), dm.B * dm.np, dm.pd, dm.d, false);
    add_bias(emb.data(), P + L.patch_b, dm.B * dm.np, dm.d);

    std::vector<double> x(dm.N * dm.d);
    for (std::size_t b = 0; b < dm.B; ++b) {
        for (std::size_t t = 0; t < dm.T; ++t) {
            double* xr = x.data() + (b * dm.T + t) * dm.d;
            const double* pos = P + L.pos + t * dm.d;
            const double* src = t == 0 ? P + L.cls : emb.data() + (b * dm.np + t - 1) * dm.d;
            for (std::size_t c = 0; c < dm.d; ++c) xr[c] = src[c] + pos[c];
        }
    }

    std::vector<int> by_layer(cfg.depth, -1);
    for (std::size_t i = 0; i < ivs.size(); ++i) by_layer[ivs[i].layer] = static_cast<int>(i);
    const auto rows = edited_rows(dm, positions);

    if (tape) {
        tape->encoder_id = enc.instance_id();
        tape->encoder_version = enc.version();
        tape->batch = dm.B;
        tape->positions = positions;
        tape->interventions.assign(ivs.begin(), ivs.end());
        tape->patches = std::move(patches);
        tape->blocks.clear();
        tape->blocks.reserve(cfg.depth);
    }

    BlockCache scratch;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        BlockCache& c = tape ? tape->blocks.emplace_back() : scratch;
        block_forward(P, L.blocks[l], dm, x, c);
        if (by_layer[l] >= 0) {
            c.intervened = true;
            c.intervention = static_cast<std::size_t>(by_layer[l]);
            apply_intervention(ivs[c.intervention], dm, rows, x, c.edit_u);
        } else {
            c.intervened = false;
        }
    }

    std::vector<double> cls_rows(dm.B * dm.d), xhat, rstd, normed;
    for (std::size_t b = 0; b < dm.B; ++b)
        std::copy_n(x.data() + b * dm.T * dm.d, dm.d, cls_rows.data() + b * dm.d);
    layer_norm(cls_rows, P + L.lnf_g, P + L.lnf_b, dm.B, dm.d, xhat, rstd, normed);
    if (tape) {
        tape->final_xhat = std::move(xhat);
        tape->final_rstd = std::move(rstd);
    }
    if (!linalg::all_finite(normed)) throw Error(ErrorKind::divergence, "encoder features are non-finite");
    return Matrix(dm.B, dm.d, std::move(normed));
}

}  // namespace

ForwardResult forward(const FrozenEncoder& enc, const Matrix& batch,
                      std::span<const reft::InterventionParams> interventions,
                      reft::Positions positions) {
    ForwardResult out;
    out.features = run_forward(enc, batch, interventions, positions, &out.tape);
    return out;
}

Matrix encode(const FrozenEncoder& enc, const Matrix& batch,
              std::span<const reft::InterventionParams> interventions, reft::Positions positions) {
    return run_forward(enc, batch, interventions, positions, nullptr);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {

Gradients run_backward(const FrozenEncoder& enc, const Tape& tape, const Matrix& grad_features,
                       std::span<const std::size_t> trainable_layers, bool want_backbone) {
    const auto& cfg = enc.config();
    if (tape.encoder_id != enc.instance_id() || tape.encoder_version != enc.version() ||
        tape.layer_count() != cfg.depth) {
        throw Error(ErrorKind::stale_tape, "tape was recorded against a different encoder state");
    }
    if (grad_features.rows() != tape.batch || grad_features.cols() != cfg.dim) {
        throw Error(ErrorKind::shape, "grad_features is " + grad_features.shape() + ", expected " +
                                          std::to_string(tape.batch) + "x" + std::to_string(cfg.dim));
    }

    const Dims dm(cfg, tape.batch);
    const auto& L = enc.layout();
    const double* P = enc.params().data();
    const std::size_t N = dm.N, d = dm.d, T = dm.T, H = dm.H, dh = dm.dh, hid = dm.hid;

    // Map selected layers to tape interventions.
    std::vector<int> slot_of_iv(tape.interventions.size(), -1);
    Gradients out;
    std::vector<std::size_t> sorted(trainable_layers.begin(), trainable_layers.end());
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw Error(ErrorKind::argument, "duplicate trainable layer");
    }
    std::size_t lowest = cfg.depth;
    for (auto layer : sorted) {
        auto it = std::find_if(tape.interventions.begin(), tape.interventions.end(),
                               [&](const auto& p) { return p.layer == layer; });
        if (it == tape.interventions.end()) {
            throw Error(ErrorKind::argument,
                        "no intervention on block " + std::to_string(layer) + " in this tape");
        }
        const auto idx = static_cast<std::size_t>(it - tape.interventions.begin());
        slot_of_iv[idx] = static_cast<int>(out.interventions.size());
        InterventionGrad g;
        g.layer = layer;
        g.dR.assign(it->R.size(), 0.0);
        g.dW.assign(it->W.size(), 0.0);
        g.db.assign(it->rank(), 0.0);
        out.interventions.push_back(std::move(g));
        lowest = std::min(lowest, layer);
    }
    if (want_backbone) out.backbone.assign(L.total, 0.0);
    double* G = want_backbone ? out.backbone.data() : nullptr;

    if (!want_backbone && out.interventions.empty()) return out;

    std::vector<double> dx(N * d, 0.0);
    {
        const std::vector<double> gf(grad_features.values().begin(), grad_features.values().end());
        std::vector<double> dcls(dm.B * d, 0.0);
        layer_norm_backward(gf, tape.final_xhat, tape.final_rstd, P + L.lnf_g, dm.B, d, dcls,
                            G ? G + L.lnf_g : nullptr, G ? G + L.lnf_b : nullptr);
        for (std::size_t b = 0; b < dm.B; ++b) std::copy_n(dcls.data() + b * d, d, dx.data() + b * T * d);
    }

    const auto rows = edited_rows(dm, tape.positions);
    std::vector<double> tmp_nd(N * d), dh_buf(N * hid), dqkv(N * 3 * d), dctx(N * d);

    for (std::size_t li = cfg.depth; li-- > 0;) {
        const BlockCache& c = tape.blocks[li];
        const BlockOffsets& o = L.blocks[li];

        if (c.intervened) {
            const auto& p = tape.interventions[c.intervention];
            const std::size_t n = rows.size(), r = p.rank();
            std::vector<double> g(n * d), h(n * d);
            for (std::size_t i = 0; i < n; ++i) {
                std::copy_n(dx.data() + rows[i] * d, d, g.data() + i * d);
                std::copy_n(c.x_out.data() + rows[i] * d, d, h.data() + i * d);
            }
            std::vector<double> du(n * r);
            gemm_nt(g.data(), p.R.values().data(), du.data(), n, d, r, false);
            const int slot = slot_of_iv[c.intervention];
            if (slot >= 0) {
                auto& ig = out.interventions[static_cast<std::size_t>(slot)];
                std::vector<double> dut_h(r * d);
                gemm_tn(du.data(), h.data(), dut_h.data(), r, n, d, false);
                gemm_tn(c.edit_u.data(), g.data(), ig.dR.data(), r, n, d, true);
                for (std::size_t i = 0; i < r * d; ++i) {
                    ig.dR[i] -= dut_h[i];
                    ig.dW[i] += dut_h[i];
                }
                col_sum_acc(du.data(), ig.db.data(), n, r);
            }
            // dh = g + du W - du R
            std::vector<double> duw(n * d), dur(n * d);
            gemm(du.data(), p.W.values().data(), duw.data(), n, r, d, false);
            gemm(du.data(), p.R.values().data(), dur.data(), n, r, d, false);
            for (std::size_t i = 0; i < n; ++i) {
                double* dxr = dx.data() + rows[i] * d;
                for (std::size_t e = 0; e < d; ++e) dxr[e] += duw[i * d + e] - dur[i * d + e];
            }
        }
        if (!want_backbone && li <= lowest) break;

        // MLP branch: x_out = x_mid + W2 gelu(W1 LN2(x_mid))
        gemm_nt(dx.data(), P + o.w_2, dh_buf.data(), N, d, hid, false);
        if (G) {
            gemm_tn(c.h_act.data(), dx.data(), G + o.w_2, hid, N, d, true);
            col_sum_acc(dx.data(), G + o.b_2, N, d);
        }
        for (std::size_t i = 0; i < N * hid; ++i) dh_buf[i] *= gelu_grad(c.h_pre[i]);
        gemm_nt(dh_buf.data(), P + o.w_1, tmp_nd.data(), N, hid, d, false);
        if (G) {
            gemm_tn(c.ln2.data(), dh_buf.data(), G + o.w_1, d, N, hid, true);
            col_sum_acc(dh_buf.data(), G + o.b_1, N, hid);
        }
        layer_norm_backward(tmp_nd, c.xhat2, c.rstd2, P + o.ln2_g, N, d, dx,
                            G ? G + o.ln2_g : nullptr, G ? G + o.ln2_b : nullptr);

        // attention branch: x_mid = x_in + Wo attn(LN1(x_in))
        gemm_nt(dx.data(), P + o.w_o, dctx.data(), N, d, d, false);
        if (G) {
            gemm_tn(c.ctx.data(), dx.data(), G + o.w_o, d, N, d, true);
            col_sum_acc(dx.data(), G + o.b_o, N, d);
        }
        std::fill(dqkv.begin(), dqkv.end(), 0.0);
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        const std::size_t s3 = 3 * d;
        std::vector<double> dp(T), ds(T);
        for (std::size_t b = 0; b < dm.B; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
                const double* prob = c.probs.data() + (b * H + h) * T * T;
                for (std::size_t i = 0; i < T; ++i) {
                    const double* dci = dctx.data() + (b * T + i) * d + h * dh;
                    double dot_pp = 0.0;
                    for (std::size_t j = 0; j < T; ++j) {
                        const double* vj = c.qkv.data() + (b * T + j) * s3 + 2 * d + h * dh;
                        double* dvj = dqkv.data() + (b * T + j) * s3 + 2 * d + h * dh;
                        const double pij = prob[i * T + j];
                        double s = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) {
                            s += dci[e] * vj[e];
                            dvj[e] += pij * dci[e];
                        }
                        dp[j] = s;
                        dot_pp += pij * s;
                    }
                    const double* qi = c.qkv.data() + (b * T + i) * s3 + h * dh;
                    double* dqi = dqkv.data() + (b * T + i) * s3 + h * dh;
                    for (std::size_t j = 0; j < T; ++j) {
                        const double dsij = prob[i * T + j] * (dp[j] - dot_pp) * scale;
                        const double* kj = c.qkv.data() + (b * T + j) * s3 + d + h * dh;
                        double* dkj = dqkv.data() + (b * T + j) * s3 + d + h * dh;
                        for (std::size_t e = 0; e < dh; ++e) {
                            dqi[e] += dsij * kj[e];
                            dkj[e] += dsij * qi[e];
                        }
                    }
                }
            }
        }
        gemm_nt(dqkv.data(), P + o.w_qkv, tmp_nd.data(), N, 3 * d, d, false);
        if (G) {
            gemm_tn(c.ln1.data(), dqkv.data(), G + o.w_qkv, d, N, 3 * d, true);
            col_sum_acc(dqkv.data(), G + o.b_qkv, N, 3 * d);
        }
        layer_norm_backward(tmp_nd, c.xhat1, c.rstd1, P + o.ln1_g, N, d, dx,
                            G ? G + o.ln1_g : nullptr, G ? G + o.ln1_b : nullptr);
    }

    if (G) {
        std::vector<double> demb(dm.B * dm.np * d);
        for (std::size_t b = 0; b < dm.B; ++b) {
            for (std::size_t t = 0; t < T; ++t) {
                const double* g = dx.data() + (b * T + t) * d;
                double* gp = G + L.pos + t * d;
                for (std::size_t e = 0; e < d; ++e) gp[e] += g[e];
                if (t == 0) {
                    for (std::size_t e = 0; e < d; ++e) G[L.cls + e] += g[e];
                } else {
                    std::copy_n(g, d, demb.data() + (b * dm.np + t - 1) * d);
                }
            }
        }
        gemm_tn(tape.patches.data(), demb.data(), G + L.patch_w, dm.pd, dm.B * dm.np, d, true);
        col_sum_acc(demb.data(), G + L.patch_b, dm.B * dm.np, d);
    }
    return out;
}

}  // namespace

Gradients backward(const FrozenEncoder& enc, const Tape& tape, const Matrix& grad_features,
                   std::span<const std::size_t> trainable_layers) {
    return run_backward(enc, tape, grad_features, trainable_layers, false);
}

Gradients backward_full(const FrozenEncoder& enc, const Tape& tape, const Matrix& grad_features,
                        std::span<const std::size_t> trainable_layers) {
    if (enc.frozen()) {
        throw Error(ErrorKind::argument, "backbone gradients requested for a frozen encoder");
    }
    return run_backward(enc, tape, grad_features, trainable_layers, true);
}

// ---------------------------------------------------------------------------
// Head / loss
// ---------------------------------------------------------------------------

LinearHead LinearHead::init(std::size_t classes, std::size_t dim, std::uint64_t seed) {
    SeededRng rng(seed);
    LinearHead h;
    h.weight = Matrix(classes, dim);
    const double std = 1.0 / std::sqrt(static_cast<double>(dim));
    for (auto& w : h.weight.values()) w = std * rng.normal();
    h.bias = Vector(classes);
    return h;
}

Matrix LinearHead::logits(const Matrix& features) const {
    if (features.cols() != weight.cols()) {
        throw Error(ErrorKind::shape, "features " + features.shape() + " vs head " + weight.shape());
    }
    Matrix out(features.rows(), weight.rows());
    gemm_nt(features.values().data(), weight.values().data(), out.values().data(), features.rows(),
            features.cols(), weight.rows(), false);
    add_bias(out.values().data(), bias.values().data(), features.rows(), weight.rows());
    return out;
}

HeadGrad head_backward(const LinearHead& head, const Matrix& features, const Matrix& grad_logits) {
    const std::size_t B = features.rows(), d = features.cols(), C = head.weight.rows();
    if (grad_logits.rows() != B || grad_logits.cols() != C) {
        throw Error(ErrorKind::shape, "grad_logits " + grad_logits.shape());
    }
    HeadGrad g;
    g.d_weight.assign(C * d, 0.0);
    g.d_bias.assign(C, 0.0);
    gemm_tn(grad_logits.values().data(), features.values().data(), g.d_weight.data(), C, B, d, false);
    col_sum_acc(grad_logits.values().data(), g.d_bias.data(), B, C);
    g.d_features = Matrix(B, d);
    gemm(grad_logits.values().data(), head.weight.values().data(), g.d_features.values().data(), B, C,
         d, false);
    return g;
}

LossResult softmax_cross_entropy(const Matrix& logits, std::span<const int> targets) {
    const std::size_t B = logits.rows(), C = logits.cols();
    if (targets.size() != B) throw Error(ErrorKind::shape, "target count differs from batch");
    LossResult out;
    out.grad_logits = Matrix(B, C);
    double total = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        const auto row = logits.row(i);
        const int t = targets[i];
        if (t < 0 || static_cast<std::size_t>(t) >= C) {
            throw Error(ErrorKind::argument, "target " + std::to_string(t) + " outside head");
        }
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        const double logz = mx + std::log(z);
        total += logz - row[static_cast<std::size_t>(t)];
        std::size_t arg = 0;
        for (std::size_t c = 0; c < C; ++c) {
            out.grad_logits(i, c) = std::exp(row[c] - logz) / static_cast<double>(B);
            if (row[c] > row[arg]) arg = c;
        }
        out.grad_logits(i, static_cast<std::size_t>(t)) -= 1.0 / static_cast<double>(B);
        if (arg == static_cast<std::size_t>(t)) ++out.correct;
    }
    out.loss = total / static_cast<double>(B);
    return out;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

namespace {

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
    std::vector<double> buf;
    buf.reserve(idx.size() * m.cols());
    for (auto i : idx) buf.insert(buf.end(), m.row(i).begin(), m.row(i).end());
    return Matrix(idx.size(), m.cols(), std::move(buf));
}

double head_accuracy(const FrozenEncoder& enc, const LinearHead& head, const data::Dataset& ds) {
    std::size_t correct = 0;
    const std::size_t chunk = 256;
    for (std::size_t s = 0; s < ds.size(); s += chunk) {
        std::vector<std::size_t> idx(std::min(chunk, ds.size() - s));
        std::iota(idx.begin(), idx.end(), s);
        const Matrix logits = head.logits(encode(enc, gather_rows(ds.inputs, idx)));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto row = logits.row(i);
            const auto arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            if (arg == ds.labels[idx[i]]) ++correct;
        }
    }
    return ds.size() == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace

PretrainResult pretrain(const EncoderConfig& cfg, const data::Dataset& base,
                        const optim::TrainHyper& hyper, const data::Dataset* validation) {
    hyper.validate();
    base.validate();
    if (base.size() == 0) throw Error(ErrorKind::argument, "pretraining set is empty");

    SeededRng rng(hyper.seed);
    PretrainResult res{FrozenEncoder(cfg), {}, 0.0, std::nullopt};
    FrozenEncoder& enc = res.encoder;
    LinearHead head = LinearHead::init(base.num_classes, cfg.dim, rng.fork());

    optim::Sgd enc_opt(enc.param_count(), hyper.momentum, hyper.weight_decay);
    optim::Sgd w_opt(head.weight.size(), hyper.momentum, hyper.weight_decay);
    optim::Sgd b_opt(head.bias.len(), hyper.momentum, hyper.weight_decay);

    const std::size_t n = base.size();
    const std::size_t steps_per_epoch = (n + hyper.batch - 1) / hyper.batch;
    const std::size_t total_steps = steps_per_epoch * hyper.epochs;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t s = 0; s < n; s += hyper.batch, ++step) {
            const std::span<const std::size_t> idx(order.data() + s, std::min(hyper.batch, n - s));
            std::vector<int> targets;
            for (auto i : idx) targets.push_back(base.labels[i]);

            auto fwd = at_step(step, [&] { return forward(enc, gather_rows(base.inputs, idx)); });
            const Matrix logits = head.logits(fwd.features);
            const auto loss = softmax_cross_entropy(logits, targets);
            if (!std::isfinite(loss.loss)) throw DivergenceError(step, "pretraining loss is not finite");
            loss_sum += loss.loss * static_cast<double>(idx.size());
            correct += loss.correct;

            const auto hg = head_backward(head, fwd.features, loss.grad_logits);
            const auto grads = backward_full(enc, fwd.tape, hg.d_features, {});
            const double lr = optim::cosine_lr(hyper.lr, step, total_steps);
            enc_opt.step(enc.mutable_params(), grads.backbone, lr);
            w_opt.step(head.weight.values(), hg.d_weight, lr);
            b_opt.step(head.bias.values(), hg.d_bias, lr);
            if (!linalg::all_finite(enc.params())) {
                throw DivergenceError(step, "encoder parameters became non-finite");
            }
        }
        res.epoch_loss.push_back(loss_sum / static_cast<double>(n));
        res.train_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(n);
    }
    if (validation) res.validation_accuracy = head_accuracy(enc, head, *validation);
    enc.freeze();
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

std::string save_encoder(const FrozenEncoder& enc) {
    io::BinaryWriter w("COREENC1");
    nlohmann::json header = enc.config().to_json();
    header["frozen"] = enc.frozen();
    header["param_count"] = enc.param_count();
    w.json(header);
    w.doubles(enc.params());
    return w.take();
}

FrozenEncoder load_encoder(std::string_view bytes) {
    io::BinaryReader r(bytes, "COREENC1");
    const auto header = r.json();
    const EncoderConfig cfg = EncoderConfig::from_json(header);
    bool frozen = true;
    try {
        frozen = header.at("frozen").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::format, std::string("bad encoder header: ") + e.what());
    }
    auto params = r.doubles();
    if (!r.at_end()) throw Error(ErrorKind::format, "trailing bytes after encoder parameters");
    if (params.size() != ParamLayout::build(cfg).total) {
        throw Error(ErrorKind::format, "parameter count does not match encoder config");
    }
    return FrozenEncoder(cfg, std::move(params), frozen);
}

}  // namespace corereft::nn
