#include <doctest.h>

#include <cmath>

#include "corereft/data.hpp"
#include "corereft/error.hpp"
#include "corereft/nn.hpp"
#include "corereft/verify.hpp"
#include "oracles.hpp"

using namespace corereft;
using linalg::Matrix;
using linalg::Vector;

namespace {

nn::EncoderConfig tiny_config() {
    nn::EncoderConfig cfg;
    cfg.depth = 2;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.tokens = 5;
    cfg.input_dim = 16;
    cfg.seed = 1993;
    return cfg;
}

// Seeded encoder whose norm gains and biases are also random, so every
// parameter group affects the output.
nn::FrozenEncoder perturbed_encoder(const nn::EncoderConfig& cfg) {
    nn::FrozenEncoder base(cfg);
    std::vector<double> p(base.params().begin(), base.params().end());
    SeededRng rng(cfg.seed + 1);
    for (double& v : p) v += 0.05 * rng.normal();
    return nn::FrozenEncoder(cfg, std::move(p), true);
}

Matrix tiny_batch(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    SeededRng rng(seed);
    Matrix m(rows, cols);
    for (auto& v : m.values()) v = rng.normal();
    return m;
}

std::vector<reft::InterventionParams> random_interventions(std::size_t dim, std::vector<std::size_t> layers,
                                                           std::size_t rank, std::uint64_t seed) {
    SeededRng rng(seed);
    std::vector<reft::InterventionParams> out;
    for (std::size_t l : layers) {
        reft::InterventionParams p{Matrix(rank, dim), Matrix(rank, dim), Vector(rank), l};
        for (auto& v : p.R.values()) v = 0.3 * rng.normal();
        for (auto& v : p.W.values()) v = 0.3 * rng.normal();
        for (auto& v : p.b.values()) v = 0.3 * rng.normal();
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace

TEST_CASE("forward matches the straight-line oracle") {
    const auto enc = perturbed_encoder(tiny_config());
    const Matrix x = tiny_batch(6, 16, 5);
    const auto ivs = random_interventions(16, {0, 1}, 3, 6);
    for (bool cls_only : {false, true}) {
        const auto pos = cls_only ? reft::Positions::cls : reft::Positions::all;
        for (const auto& iv_set : {std::vector<reft::InterventionParams>{}, ivs}) {
            const Matrix f = nn::encode(enc, x, iv_set, pos);
            for (std::size_t r = 0; r < x.rows(); ++r) {
                const auto ref = oracle::encoder_features(enc, x.row(r), iv_set, cls_only);
                for (std::size_t c = 0; c < 16; ++c) CHECK(std::abs(f(r, c) - ref[c]) < 1e-10);
            }
        }
    }
}

TEST_CASE("tiny encoder feature checksum matches the oracle reference") {
    // Frozen from the straight-line oracle on this exact configuration.
    constexpr double reference = -45.187356783119171;
    nn::FrozenEncoder enc(tiny_config());
    const Matrix x = tiny_batch(4, 16, 1993);
    double oracle_sum = 0.0, oracle_abs = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; const double v : oracle::encoder_features(enc, x.row(r))) {
            oracle_sum += v * static_cast<double>(c + 1);
            oracle_abs += std::abs(v);
            ++c;
        }
    }
    const Matrix f = nn::encode(enc, x);
    double lib_sum = 0.0;
    for (std::size_t r = 0; r < f.rows(); ++r)
        for (std::size_t c = 0; c < f.cols(); ++c) lib_sum += f(r, c) * static_cast<double>(c + 1);
    CHECK(oracle_abs > 1.0);
    CHECK(std::abs(oracle_sum - reference) < 1e-9);
    CHECK(std::abs(lib_sum - reference) < 1e-9);
}

TEST_CASE("depth-0 features are the normed class token") {
    auto cfg = tiny_config();
    cfg.depth = 0;
    const auto enc = perturbed_encoder(cfg);
    const Matrix x = tiny_batch(3, 16, 7);
    const Matrix f = nn::encode(enc, x);
    const auto& L = enc.layout();
    const double* P = enc.params().data();
    std::vector<double> cls(16);
    for (std::size_t c = 0; c < 16; ++c) cls[c] = P[L.cls + c] + P[L.pos + c];
    const auto ref = oracle::layer_norm_row(cls, P + L.lnf_g, P + L.lnf_b);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 16; ++c) CHECK(std::abs(f(r, c) - ref[c]) < 1e-12);
}

TEST_CASE("identity interventions leave features bitwise unchanged") {
    const auto enc = perturbed_encoder(tiny_config());
    const Matrix x = tiny_batch(5, 16, 8);
    reft::InterventionConfig icfg;
    icfg.layers = {0, 1};
    icfg.rank = 4;
    const auto ivs = reft::init_interventions(icfg, 16);
    CHECK(nn::encode(enc, x, ivs) == nn::encode(enc, x));
    CHECK(nn::encode(enc, x, ivs, reft::Positions::cls) == nn::encode(enc, x));
    CHECK(nn::forward(enc, x, ivs).features == nn::encode(enc, x));
}

TEST_CASE("forward is deterministic and checks shapes") {
    const auto enc = perturbed_encoder(tiny_config());
    const Matrix x = tiny_batch(5, 16, 9);
    CHECK(nn::encode(enc, x) == nn::encode(enc, x));
    CHECK_THROWS_AS(nn::encode(enc, tiny_batch(2, 15, 1)), Error);
    auto bad = random_interventions(16, {2}, 3, 1);
    CHECK_THROWS_AS(nn::encode(enc, x, bad), Error);
    auto wide = random_interventions(8, {0}, 3, 1);
    CHECK_THROWS_AS(nn::encode(enc, x, wide), Error);
}

TEST_CASE("intervention gradients match finite differences") {
    for (auto pos : {reft::Positions::all, reft::Positions::cls}) {
        const auto res = verify::tiny_encoder_gradcheck({}, pos);
        CHECK(res.checked >= 100);
        CHECK(res.failures == 0);
        CHECK(res.max_rel_error < 1e-4);
    }
    verify::GradcheckOptions faulty;
    faulty.inject_fault = true;
    CHECK_FALSE(verify::tiny_encoder_gradcheck(faulty).passed());
}

TEST_CASE("backward contract") {
    const auto enc = perturbed_encoder(tiny_config());
    const Matrix x = tiny_batch(4, 16, 10);
    const auto ivs = random_interventions(16, {0, 1}, 3, 11);
    const auto fw = nn::forward(enc, x, ivs);
    const std::vector<std::size_t> layers{0, 1};

    SUBCASE("zero upstream gradient gives zero gradients") {
        const auto g = nn::backward(enc, fw.tape, Matrix(4, 16), layers);
        REQUIRE(g.interventions.size() == 2);
        for (const auto& ig : g.interventions) {
            for (double v : ig.dR) CHECK(v == 0.0);
            for (double v : ig.dW) CHECK(v == 0.0);
            for (double v : ig.db) CHECK(v == 0.0);
        }
        CHECK(g.backbone.empty());
    }
    SUBCASE("only selected layers are returned") {
        const std::vector<std::size_t> one{1};
        const auto g = nn::backward(enc, fw.tape, tiny_batch(4, 16, 12), one);
        REQUIRE(g.interventions.size() == 1);
        CHECK(g.interventions[0].layer == 1);
        CHECK(g.interventions[0].dR.size() == 3 * 16);
    }
    SUBCASE("mismatched upstream shape is rejected") {
        CHECK_THROWS_AS(nn::backward(enc, fw.tape, Matrix(3, 16), layers), Error);
    }
    SUBCASE("tape from another encoder is stale") {
        const auto other = perturbed_encoder(tiny_config());
        try {
            nn::backward(other, fw.tape, Matrix(4, 16), layers);
            FAIL("expected stale tape");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::stale_tape);
        }
    }
    SUBCASE("tape goes stale after a parameter change") {
        auto live = enc.thawed_copy();
        const auto fw2 = nn::forward(live, x, ivs);
        live.mutable_params()[0] += 1.0;
        CHECK_THROWS_AS(nn::backward(live, fw2.tape, Matrix(4, 16), layers), Error);
    }
    CHECK(fw.tape.layer_count() == 2);
}

TEST_CASE("frozen encoders refuse mutation and keep their checksum") {
    auto enc = perturbed_encoder(tiny_config());
    const auto before = enc.checksum();
    CHECK_THROWS_AS(enc.mutable_params(), Error);
    const Matrix x = tiny_batch(4, 16, 13);
    const auto ivs = random_interventions(16, {0, 1}, 3, 14);
    const auto fw = nn::forward(enc, x, ivs);
    (void)nn::backward(enc, fw.tape, tiny_batch(4, 16, 15), std::vector<std::size_t>{0, 1});
    CHECK(enc.checksum() == before);
    CHECK_THROWS_AS(nn::backward_full(enc, fw.tape, tiny_batch(4, 16, 15), std::vector<std::size_t>{}), Error);
}

TEST_CASE("backbone gradients match finite differences on sampled coordinates") {
    auto cfg = tiny_config();
    auto live = perturbed_encoder(cfg).thawed_copy();
    const Matrix x = tiny_batch(3, 16, 16);
    const Matrix G = tiny_batch(3, 16, 17);
    auto loss = [&](const nn::FrozenEncoder& e) {
        const Matrix f = nn::encode(e, x);
        double s = 0.0;
        for (std::size_t i = 0; i < f.size(); ++i) s += f.values()[i] * G.values()[i];
        return s;
    };
    const auto fw = nn::forward(live, x);
    const auto g = nn::backward_full(live, fw.tape, G, std::vector<std::size_t>{});
    REQUIRE(g.backbone.size() == live.param_count());
    SeededRng rng(18);
    for (int i = 0; i < 60; ++i) {
        const std::size_t k = rng.below(live.param_count());
        auto plus = live.thawed_copy(), minus = live.thawed_copy();
        plus.mutable_params()[k] += 1e-5;
        minus.mutable_params()[k] -= 1e-5;
        const double num = (loss(plus) - loss(minus)) / 2e-5;
        const double denom = std::max({std::abs(num), std::abs(g.backbone[k]), 1e-6});
        CHECK(std::abs(num - g.backbone[k]) / denom < 1e-4);
    }
}

TEST_CASE("encoder checkpoints round-trip bitwise") {
    const auto enc = perturbed_encoder(tiny_config());
    const std::string bytes = nn::save_encoder(enc);
    const auto back = nn::load_encoder(bytes);
    CHECK(back == enc);
    CHECK(back.checksum() == enc.checksum());
    CHECK(bytes.size() <= 2 * enc.param_count() * 8);
    CHECK(bytes.size() >= enc.param_count() * 8);

    std::string bad = bytes;
    bad[0] = 'X';
    try {
        nn::load_encoder(bad);
        FAIL("expected version error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::version);
    }
    CHECK_THROWS_AS(nn::load_encoder(bytes.substr(0, bytes.size() - 5)), Error);
    CHECK_THROWS_AS(nn::load_encoder(bytes.substr(0, 6)), Error);
}

TEST_CASE("encoder config validation") {
    auto cfg = tiny_config();
    cfg.heads = 3;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = tiny_config();
    cfg.tokens = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = tiny_config();
    CHECK(nn::EncoderConfig::from_json(cfg.to_json()) == cfg);
}

TEST_CASE("parameter layout covers the flat vector exactly") {
    const auto cfg = tiny_config();
    const auto L = nn::ParamLayout::build(cfg);
    std::size_t next = 0;
    for (const auto& e : L.entries) {
        CHECK(e.offset == next);
        next += e.size();
    }
    CHECK(next == L.total);
    const std::size_t d = 16, h = cfg.hidden(), pd = cfg.patch_dim();
    const std::size_t per_block = 4 * d + d * 3 * d + 3 * d + d * d + d + d * h + h + h * d + d;
    CHECK(L.total == pd * d + d + d + cfg.tokens * d + cfg.depth * per_block + 2 * d);
}

TEST_CASE("pretraining learns, generalizes and is deterministic") {
    const auto [base, downstream] = data::make_synthetic_cil(20, 16, 40, 0.0, 21, {3.0, 0.5, 0});
    (void)downstream;
    const auto [train, val] = data::stratified_split(base, 0.2, 22);
    auto cfg = tiny_config();
    optim::TrainHyper hyper;
    hyper.epochs = 4;
    hyper.batch = 32;
    hyper.seed = 23;
    const auto a = nn::pretrain(cfg, train, hyper, &val);
    const auto b = nn::pretrain(cfg, train, hyper, &val);
    CHECK(a.encoder.frozen());
    CHECK(a.encoder == b.encoder);
    REQUIRE(a.epoch_loss.size() == 4);
    CHECK(a.epoch_loss.back() < a.epoch_loss.front());
    REQUIRE(a.validation_accuracy.has_value());
    const double chance = 100.0 / static_cast<double>(train.num_classes);
    CHECK(*a.validation_accuracy >= 2.0 * chance);
}
