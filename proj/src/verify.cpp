#include "corereft/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>

#include "corereft/continual.hpp"
#include "corereft/data.hpp"
#include "corereft/error.hpp"
#include "corereft/rng.hpp"

namespace corereft::verify {

using linalg::Matrix;
using linalg::Vector;

namespace {

Matrix gaussian(SeededRng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    Matrix m(r, c);
    for (auto& x : m.values()) x = scale * rng.normal();
    return m;
}

Vector gaussian_vec(SeededRng& rng, std::size_t n, double scale = 1.0) {
    Vector v(n);
    for (auto& x : v.values()) x = scale * rng.normal();
    return v;
}

double weighted_sum(const Matrix& f, const Matrix& g) {
    double s = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) s += f.values()[i] * g.values()[i];
    return s;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

GradcheckResult gradcheck_interventions(const nn::FrozenEncoder& encoder,
                                        std::vector<reft::InterventionParams> ivs, const Matrix& inputs,
                                        reft::Positions positions, const GradcheckOptions& options) {
    if (ivs.empty()) throw Error(ErrorKind::argument, "gradcheck needs at least one intervention");
    std::sort(ivs.begin(), ivs.end(), [](const auto& a, const auto& b) { return a.layer < b.layer; });
    SeededRng rng(options.seed);
    const std::size_t dim = encoder.config().dim;
    const Matrix G = gaussian(rng, inputs.rows(), dim);

    auto fwd = nn::forward(encoder, inputs, ivs, positions);
    std::vector<std::size_t> layers;
    for (const auto& p : ivs) layers.push_back(p.layer);
    auto grads = nn::backward(encoder, fwd.tape, G, layers);

    struct Slot {
        std::size_t iv;
        int which;  // 0 = R, 1 = W, 2 = b
        std::size_t index;
    };
    std::vector<Slot> all;
    for (std::size_t i = 0; i < ivs.size(); ++i) {
        for (std::size_t k = 0; k < ivs[i].R.size(); ++k) all.push_back({i, 0, k});
        for (std::size_t k = 0; k < ivs[i].W.size(); ++k) all.push_back({i, 1, k});
        for (std::size_t k = 0; k < ivs[i].b.len(); ++k) all.push_back({i, 2, k});
    }
    std::span<Slot> span(all);
    rng.shuffle(span);
    const std::size_t n = std::min(options.coordinates, all.size());

    auto param_ref = [&](std::vector<reft::InterventionParams>& ps, const Slot& s) -> double& {
        auto& p = ps[s.iv];
        if (s.which == 0) return p.R.values()[s.index];
        if (s.which == 1) return p.W.values()[s.index];
        return p.b.values()[s.index];
    };
    auto grad_ref = [&](const Slot& s) -> double& {
        auto& g = grads.interventions[s.iv];
        if (s.which == 0) return g.dR[s.index];
        if (s.which == 1) return g.dW[s.index];
        return g.db[s.index];
    };
    if (options.inject_fault && n > 0) {
        double& g = grad_ref(all[0]);
        g += 1e-2 * (std::abs(g) + 1.0);
    }

    GradcheckResult res;
    for (std::size_t c = 0; c < n; ++c) {
        const Slot& s = all[c];
        auto plus = ivs;
        auto minus = ivs;
        param_ref(plus, s) += options.step;
        param_ref(minus, s) -= options.step;
        const double lp = weighted_sum(nn::encode(encoder, inputs, plus, positions), G);
        const double lm = weighted_sum(nn::encode(encoder, inputs, minus, positions), G);
        const double numeric = (lp - lm) / (2.0 * options.step);
        const double analytic = grad_ref(s);
        const double denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
        const double rel = std::abs(analytic - numeric) / denom;
        ++res.checked;
        if (!(rel < options.tolerance)) ++res.failures;
        if (!(rel <= res.max_rel_error)) {
            res.max_rel_error = rel;
            const char* names[] = {"R", "W", "b"};
            res.worst = "layer " + std::to_string(ivs[s.iv].layer) + " " + names[s.which] + "[" +
                        std::to_string(s.index) + "]";
        }
    }
    return res;
}

GradcheckResult tiny_encoder_gradcheck(const GradcheckOptions& options, reft::Positions positions) {
    nn::EncoderConfig cfg;
    cfg.depth = 2;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.tokens = 5;
    cfg.input_dim = 16;
    cfg.seed = options.seed;
    nn::FrozenEncoder enc(cfg);
    enc.freeze();

    reft::InterventionConfig ic;
    ic.layers = {0, 1};
    ic.rank = 4;
    ic.init_seed = options.seed + 1;
    auto ivs = reft::init_interventions(ic, cfg.dim);
    SeededRng rng(options.seed + 2);
    for (auto& p : ivs) {
        for (auto& x : p.R.values()) x += 0.1 * rng.normal();
        for (auto& x : p.W.values()) x += 0.3 * rng.normal();
        for (auto& x : p.b.values()) x = 0.3 * rng.normal();
    }
    const Matrix inputs = gaussian(rng, 6, cfg.input_len());
    return gradcheck_interventions(enc, std::move(ivs), inputs, positions, options);
}

// ---------------------------------------------------------------------------
// Delta bound
// ---------------------------------------------------------------------------

BoundStats delta_bound_stats(std::size_t dim, std::size_t rank, std::size_t draws, std::uint64_t seed) {
    SeededRng rng(seed);
    BoundStats st;
    st.dim = dim;
    st.rank = rank;
    for (std::size_t i = 0; i < draws; ++i) {
        reft::InterventionParams p;
        p.R = gaussian(rng, rank, dim);
        p.W = gaussian(rng, rank, dim);
        p.b = gaussian_vec(rng, rank);
        const Vector e = gaussian_vec(rng, dim);
        const auto chk = reft::delta_bound_check(p, e);
        ++st.draws;
        if (!chk.holds) ++st.violations;
        if (chk.printed_holds) {
            ++st.printed_draws;
            if (!*chk.printed_holds) ++st.printed_violations;
        }

        p.R = linalg::orthonormalize_rows(gaussian(rng, rank, dim));
        const auto tight = reft::delta_bound_check(p, e);
        double u2 = 0.0;
        for (std::size_t k = 0; k < rank; ++k) {
            const double u = linalg::dot(p.W.row(k), e.values()) + p.b[k] - linalg::dot(p.R.row(k), e.values());
            u2 += u * u;
        }
        if (!tight.holds) ++st.violations;
        st.max_tight_gap = std::max(st.max_tight_gap, std::abs(tight.bound - std::sqrt(u2)));
    }
    return st;
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

bool VerifyReport::passed() const {
    return !properties.empty() &&
           std::all_of(properties.begin(), properties.end(), [](const auto& p) { return p.passed; });
}

VerifyReport run_property_suites(const VerifyOptions& options) {
    VerifyReport rep;
    auto run = [&](const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
        const auto t0 = std::chrono::steady_clock::now();
        PropertyResult r;
        r.name = name;
        try {
            auto [ok, detail] = body();
            r.passed = ok;
            r.detail = std::move(detail);
        } catch (const std::exception& e) {
            r.passed = false;
            r.detail = std::string("exception: ") + e.what();
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rep.properties.push_back(std::move(r));
    };

    run("edit_identities", [&] {
        SeededRng rng(options.seed);
        double worst = 0.0;
        const std::size_t draws = 1000;
        for (std::size_t i = 0; i < draws; ++i) {
            const std::size_t dim = 2 + rng.below(63);
            const std::size_t rank = 1 + rng.below(dim);
            const Vector h = gaussian_vec(rng, dim, 3.0);
            reft::InterventionParams p;
            p.R = gaussian(rng, rank, dim);
            p.W = p.R;
            p.b = Vector(rank);
            const Vector a = reft::dii(h, h, p.R);
            const Vector b = reft::loreft(h, p);
            for (std::size_t c = 0; c < dim; ++c)
                worst = std::max({worst, std::abs(a[c] - h[c]), std::abs(b[c] - h[c])});
        }
        return std::pair{worst < 1e-12, "max |deviation| = " + fmt("%.3g", worst) + " over " +
                                            std::to_string(draws) + " draws"};
    });

    run("delta_bound", [&] {
        bool ok = true;
        std::string detail;
        std::uint64_t s = options.seed;
        for (auto [d, r] : {std::pair<std::size_t, std::size_t>{32, 4}, {64, 8}, {64, 64}}) {
            auto st = delta_bound_stats(d, r, options.bound_draws, s++);
            rep.bounds.push_back(st);
            rep.bound_draws_total += st.draws;
            ok = ok && st.violations == 0 && st.max_tight_gap < 1e-9;
            detail += "(" + std::to_string(d) + "," + std::to_string(r) + "): " + std::to_string(st.draws) +
                      " draws, " + std::to_string(st.violations) + " violations, tight gap " +
                      fmt("%.2g", st.max_tight_gap) + "; ";
        }
        return std::pair{ok, detail};
    });

    run("subspace_locality", [&] {
        SeededRng rng(options.seed + 10);
        double worst = 0.0;
        for (std::size_t i = 0; i < 200; ++i) {
            const std::size_t dim = 4 + rng.below(29);
            const std::size_t rank = 1 + rng.below(dim - 1);
            reft::InterventionParams p;
            p.R = linalg::orthonormalize_rows(gaussian(rng, rank, dim));
            p.W = gaussian(rng, rank, dim);
            p.b = gaussian_vec(rng, rank);
            const Vector h = gaussian_vec(rng, dim);
            const Vector out = reft::loreft(h, p);
            std::vector<double> delta(dim);
            for (std::size_t c = 0; c < dim; ++c) delta[c] = out[c] - h[c];
            // Remove the row-space component; what is left must vanish.
            std::vector<double> rest = delta;
            for (std::size_t k = 0; k < rank; ++k) {
                const double coef = linalg::dot(p.R.row(k), delta);
                for (std::size_t c = 0; c < dim; ++c) rest[c] -= coef * p.R(k, c);
            }
            worst = std::max(worst, linalg::norm2(rest) / std::max(1.0, linalg::norm2(delta)));
        }
        return std::pair{worst < 1e-10, "max off-subspace residual " + fmt("%.3g", worst)};
    });

    run("orth_penalty", [&] {
        SeededRng rng(options.seed + 20);
        const Matrix Q = linalg::orthonormalize_rows(gaussian(rng, 6, 20));
        const double at_q = reft::orth_penalty(Q);
        const Matrix R = gaussian(rng, 5, 12, 0.5);
        std::vector<double> g(R.size(), 0.0);
        reft::orth_penalty_grad(R, 1.0, g);
        double worst = 0.0;
        for (std::size_t i = 0; i < R.size(); ++i) {
            Matrix p = R, m = R;
            p.values()[i] += 1e-6;
            m.values()[i] -= 1e-6;
            const double num = (reft::orth_penalty(p) - reft::orth_penalty(m)) / 2e-6;
            worst = std::max(worst, std::abs(num - g[i]) / std::max({std::abs(num), std::abs(g[i]), 1e-6}));
        }
        const bool ok = at_q < 1e-24 && worst < 1e-6;
        return std::pair{ok, "penalty at orthonormal R " + fmt("%.3g", at_q) + ", gradient rel error " +
                                 fmt("%.3g", worst)};
    });

    run("intervention_gradcheck", [&] {
        GradcheckOptions go;
        go.seed = options.seed;
        go.inject_fault = options.inject_gradcheck_fault;
        const auto all = tiny_encoder_gradcheck(go, reft::Positions::all);
        go.inject_fault = false;
        go.seed = options.seed + 1;
        const auto cls = tiny_encoder_gradcheck(go, reft::Positions::cls);
        const bool ok = all.passed() && cls.passed() && all.checked >= 100;
        return std::pair{ok, "positions=all: " + std::to_string(all.checked) + " coords, " +
                                 std::to_string(all.failures) + " failures, max rel " +
                                 fmt("%.3g", all.max_rel_error) + " at " + all.worst + "; positions=cls: " +
                                 std::to_string(cls.checked) + " coords, " + std::to_string(cls.failures) +
                                 " failures, max rel " + fmt("%.3g", cls.max_rel_error)};
    });

    run("identity_at_init", [&] {
        nn::EncoderConfig cfg;
        cfg.depth = 3;
        cfg.dim = 16;
        cfg.heads = 4;
        cfg.tokens = 5;
        cfg.input_dim = 16;
        nn::FrozenEncoder enc(cfg);
        enc.freeze();
        reft::InterventionConfig ic;
        ic.layers = {0, 1, 2};
        ic.rank = 5;
        SeededRng rng(options.seed + 30);
        const Matrix x = gaussian(rng, 7, 16);
        const auto ivs = reft::init_interventions(ic, cfg.dim);
        const bool ok = nn::encode(enc, x) == nn::encode(enc, x, ivs) &&
                        nn::encode(enc, x) == nn::encode(enc, x, ivs, reft::Positions::cls);
        return std::pair{ok, std::string(ok ? "features identical bit for bit" : "features differ")};
    });

    run("frozen_backbone", [&] {
        nn::EncoderConfig cfg;
        cfg.depth = 2;
        cfg.dim = 16;
        cfg.heads = 2;
        cfg.tokens = 5;
        cfg.input_dim = 16;
        nn::FrozenEncoder enc(cfg);
        enc.freeze();
        const auto before = enc.checksum();
        auto [base, down] = data::make_synthetic_cil(6, 16, 10, 0.5, options.seed, {});
        auto stream = data::split_tasks(down, 3);
        reft::InterventionConfig ic;
        ic.layers = {1};
        ic.rank = 4;
        optim::TrainHyper h;
        h.epochs = 2;
        h.batch = 8;
        continual::train_first_task(enc, ic, stream.tasks.front().train, h);
        bool threw = false;
        try {
            enc.mutable_params();
        } catch (const Error&) {
            threw = true;
        }
        const bool ok = enc.checksum() == before && threw;
        return std::pair{ok, std::string("checksum ") + (enc.checksum() == before ? "unchanged" : "CHANGED") +
                                 ", mutable access " + (threw ? "refused" : "allowed")};
    });

    run("metric_identity", [&] {
        SeededRng rng(options.seed + 40);
        std::size_t rows = 0;
        bool ok = true;
        for (std::size_t run = 0; run < 50; ++run) {
            continual::MetricsTable m;
            const std::size_t stages = 1 + rng.below(20);
            for (std::size_t t = 0; t < stages; ++t) {
                const std::size_t total = 1 + rng.below(500);
                m.push({static_cast<std::size_t>(rng.below(total + 1)), total}, {});
            }
            double s = 0.0;
            for (std::size_t t = 0; t < stages; ++t) {
                s += m.last[t];
                ok = ok && m.avg[t] == s / static_cast<double>(t + 1);
                ++rows;
            }
            ok = ok && m.consistent();
        }
        return std::pair{ok, "Avg_t == (1/t) sum Last_i on " + std::to_string(rows) + " rows"};
    });

    run("imbalance_counts", [&] {
        std::size_t cells = 0;
        bool ok = true;
        for (double alpha : {1.0, 0.5, 0.1, 0.05, 0.01}) {
            for (std::size_t n : {1, 10, 100}) {
                for (std::size_t m : {1, 20, 500}) {
                    std::size_t prev = SIZE_MAX;
                    for (std::size_t i = 1; i <= n; ++i) {
                        const double v = std::floor(static_cast<double>(m) *
                                                        std::pow(alpha, static_cast<double>(i) / static_cast<double>(n)) +
                                                    0.5);
                        const auto expected = std::max<std::size_t>(1, static_cast<std::size_t>(v));
                        const auto got = data::imbalance_count({alpha, m}, i, n);
                        ok = ok && got == expected && got <= prev;
                        prev = got;
                        ++cells;
                    }
                }
            }
        }
        ok = ok && data::imbalance_count({0.01, 500}, 100, 100) == 5;
        return std::pair{ok, std::to_string(cells) + " (alpha, N, M, i) cells match the closed form"};
    });

    run("param_count", [&] {
        reft::InterventionConfig a;
        a.rank = 8;
        for (std::size_t l = 0; l < 12; ++l) a.layers.push_back(l);
        reft::InterventionConfig b;
        b.rank = 8;
        b.layers = {0};
        const auto pa = reft::param_count(a, 768);
        const auto pb = reft::param_count(b, 64);
        return std::pair{pa == 147552 && pb == 1032,
                         "rank 8 x 12 layers at 768: " + std::to_string(pa) + "; one layer at 64: " +
                             std::to_string(pb)};
    });

    run("prototype_and_routing", [&] {
        SeededRng rng(options.seed + 50);
        continual::PrototypeClassifier clf;
        std::vector<Vector> means;
        for (int c = 0; c < 7; ++c) {
            means.push_back(gaussian_vec(rng, 10));
            clf.set(c, means.back());
        }
        continual::DomainRouter router;
        std::vector<std::vector<Vector>> centers(3);
        for (int d = 0; d < 3; ++d) {
            for (int k = 0; k < 4; ++k) centers[d].push_back(gaussian_vec(rng, 10, 2.0));
            router.add_domain(d, centers[d], clf);
        }
        std::size_t mismatches = 0;
        for (std::size_t i = 0; i < 500; ++i) {
            const Vector f = gaussian_vec(rng, 10);
            int best = 0;
            double best_cos = -2.0;
            for (int c = 0; c < 7; ++c) {
                const double cs = linalg::dot(f.values(), means[c].values()) /
                                  (linalg::norm2(f.values()) * linalg::norm2(means[c].values()));
                if (cs > best_cos) {
                    best_cos = cs;
                    best = c;
                }
            }
            int best_d = 0;
            double best_dist = INFINITY;
            for (int d = 0; d < 3; ++d) {
                for (const auto& ctr : centers[d]) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < 10; ++j) s += (f[j] - ctr[j]) * (f[j] - ctr[j]);
                    if (s < best_dist) {
                        best_dist = s;
                        best_d = d;
                    }
                }
            }
            if (clf.classify(f.values()) != best || router.route(f.values()) != best_d) ++mismatches;
        }
        return std::pair{mismatches == 0, std::to_string(mismatches) + " mismatches against brute force over 500 queries"};
    });

    run("kmeans_objective", [&] {
        SeededRng rng(options.seed + 60);
        std::vector<Vector> pts;
        for (std::size_t i = 0; i < 300; ++i) {
            Vector v = gaussian_vec(rng, 8);
            v[i % 4] += 6.0;
            pts.push_back(std::move(v));
        }
        const auto res = linalg::kmeans_fit(pts, 5, options.seed);
        bool ok = !res.objective.empty();
        for (std::size_t i = 1; i < res.objective.size(); ++i)
            ok = ok && res.objective[i] <= res.objective[i - 1] * (1.0 + 1e-12);
        return std::pair{ok, std::to_string(res.objective.size()) + " objective values, non-increasing: " +
                                 (ok ? "yes" : "no")};
    });

    return rep;
}

std::string format_report(const VerifyReport& report, const VerifyOptions& options) {
    std::string out;
    out += "core-reft verify report\n";
    out += "seed: " + std::to_string(options.seed) + "\n";
    out += "delta-bound draws: " + std::to_string(report.bound_draws_total) + " randomized (R, W, b, e) draws (" +
           std::to_string(options.bound_draws) + " per (dim, rank) pair, each also repeated with row-orthonormal R)\n\n";
    std::size_t passed = 0;
    for (const auto& p : report.properties) {
        if (p.passed) ++passed;
        out += std::string(p.passed ? "[PASS] " : "[FAIL] ") + p.name + " (" + fmt("%.2f", p.seconds) + " s)\n";
        out += "       " + p.detail + "\n";
    }
    out += "\nNote on the printed form of the delta bound:\n";
    out += "  The checked bound is ||delta|| <= sigma_max(R^T) * ||W e + b - R e||, which holds for\n";
    out += "  every draw. The form sigma_max(R^T) * ||(W - I) e + b|| only type-checks when rank == dim\n";
    out += "  and drops the R e term; it is evaluated for comparison only.\n";
    for (const auto& b : report.bounds) {
        if (b.printed_draws == 0) continue;
        out += "  (dim " + std::to_string(b.dim) + ", rank " + std::to_string(b.rank) + "): printed form violated in " +
               std::to_string(b.printed_violations) + " of " + std::to_string(b.printed_draws) + " draws\n";
    }
    out += "\n" + std::to_string(passed) + "/" + std::to_string(report.properties.size()) + " properties passed\n";
    for (const auto& p : report.properties)
        if (!p.passed) out += "failing property: " + p.name + "\n";
    return out;
}

}  // namespace corereft::verify
