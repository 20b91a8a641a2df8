#include "corereft/reft.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "corereft/error.hpp"
#include "corereft/rng.hpp"

namespace corereft::reft {

using linalg::dot;
using linalg::norm2;

const char* to_string(Positions p) { return p == Positions::all ? "all" : "cls"; }

Positions positions_from_string(const std::string& s) {
    if (s == "all") return Positions::all;
    if (s == "cls") return Positions::cls;
    throw Error(ErrorKind::argument, "positions must be 'all' or 'cls', got '" + s + "'");
}

void InterventionParams::validate() const {
    if (R.rows() < 1 || R.rows() > R.cols()) {
        throw Error(ErrorKind::argument, "intervention rank " + std::to_string(R.rows()) +
                                             " outside [1, " + std::to_string(R.cols()) + "]");
    }
    if (W.rows() != R.rows() || W.cols() != R.cols()) {
        throw Error(ErrorKind::shape, "W is " + W.shape() + " but R is " + R.shape());
    }
    if (b.len() != R.rows()) {
        throw Error(ErrorKind::shape, "b has length " + std::to_string(b.len()) + " but rank is " +
                                          std::to_string(R.rows()));
    }
}

void InterventionConfig::validate(std::size_t depth, std::size_t dim) const {
    if (rank < 1 || rank > dim) {
        throw Error(ErrorKind::argument, "rank " + std::to_string(rank) + " outside [1, " +
                                             std::to_string(dim) + "]");
    }
    std::set<std::size_t> seen;
    for (auto l : layers) {
        if (l >= depth) {
            throw Error(ErrorKind::argument, "intervention layer " + std::to_string(l) +
                                                 " >= encoder depth " + std::to_string(depth));
        }
        if (!seen.insert(l).second) {
            throw Error(ErrorKind::argument, "duplicate intervention layer " + std::to_string(l));
        }
    }
    if (!(lambda_orth >= 0.0) || !std::isfinite(lambda_orth)) {
        throw Error(ErrorKind::argument, "lambda_orth must be finite and >= 0");
    }
}

namespace {

void check_len(const Vector& v, std::size_t d, const char* name) {
    if (v.len() != d) {
        throw Error(ErrorKind::shape, std::string(name) + " has length " + std::to_string(v.len()) +
                                          ", expected " + std::to_string(d));
    }
}

// W e + b - R e, computed as two separate products so that W == R gives exactly b.
std::vector<double> edit_source(const InterventionParams& p, const Vector& e) {
    std::vector<double> u(p.rank());
    for (std::size_t k = 0; k < p.rank(); ++k) {
        u[k] = dot(p.W.row(k), e.values()) + p.b[k] - dot(p.R.row(k), e.values());
    }
    return u;
}

std::vector<double> project_back(const Matrix& R, std::span<const double> u) {
    std::vector<double> out(R.cols(), 0.0);
    for (std::size_t k = 0; k < R.rows(); ++k) {
        const auto rk = R.row(k);
        for (std::size_t c = 0; c < R.cols(); ++c) out[c] += rk[c] * u[k];
    }
    return out;
}

}  // namespace

Vector dii(const Vector& h_b, const Vector& h_s, const Matrix& R) {
    check_len(h_b, R.cols(), "h_b");
    check_len(h_s, R.cols(), "h_s");
    std::vector<double> u(R.rows());
    for (std::size_t k = 0; k < R.rows(); ++k) {
        u[k] = dot(R.row(k), h_s.values()) - dot(R.row(k), h_b.values());
    }
    auto delta = project_back(R, u);
    std::vector<double> out(h_b.storage());
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += delta[c];
    return Vector(std::move(out));
}

Vector loreft(const Vector& h, const InterventionParams& p) {
    p.validate();
    check_len(h, p.dim(), "h");
    auto delta = project_back(p.R, edit_source(p, h));
    std::vector<double> out(h.storage());
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += delta[c];
    return Vector(std::move(out));
}

double orth_penalty(const Matrix& R) {
    double s = 0.0;
    for (std::size_t i = 0; i < R.rows(); ++i) {
        for (std::size_t j = 0; j < R.rows(); ++j) {
            const double g = dot(R.row(i), R.row(j)) - (i == j ? 1.0 : 0.0);
            s += g * g;
        }
    }
    return s;
}

void orth_penalty_grad(const Matrix& R, double scale, std::span<double> grad) {
    const std::size_t r = R.rows(), d = R.cols();
    if (grad.size() != r * d) throw Error(ErrorKind::shape, "orth_penalty_grad buffer size");
    std::vector<double> gram(r * r);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j)
            gram[i * r + j] = dot(R.row(i), R.row(j)) - (i == j ? 1.0 : 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < r; ++j) {
            const double g = 4.0 * scale * gram[i * r + j];
            const auto rj = R.row(j);
            for (std::size_t c = 0; c < d; ++c) grad[i * d + c] += g * rj[c];
        }
    }
}

BoundCheck delta_bound_check(const InterventionParams& p, const Vector& e) {
    p.validate();
    check_len(e, p.dim(), "e");
    const auto u = edit_source(p, e);
    const auto delta = project_back(p.R, u);

    BoundCheck out;
    out.delta_norm = norm2(delta);
    // sigma_max(R^T) == sigma_max(R); iterate tighter than the default since
    // an underestimate would make the bound look violated.
    const double smax = linalg::sigma_max(p.R, 500, 1e-14);
    out.bound = smax * norm2(u);
    out.holds = out.delta_norm <= out.bound + 1e-9;

    if (p.rank() == p.dim()) {
        std::vector<double> v(p.dim());
        for (std::size_t k = 0; k < p.rank(); ++k) {
            v[k] = dot(p.W.row(k), e.values()) - e[k] + p.b[k];
        }
        out.printed_bound = smax * norm2(v);
        out.printed_holds = out.delta_norm <= *out.printed_bound + 1e-9;
    }
    return out;
}

double alignment_loss(const Vector& e_s, const Vector& e_b, const InterventionParams& p) {
    check_len(e_s, p.dim(), "e_s");
    const Vector edited = loreft(e_b, p);
    double s = 0.0;
    for (std::size_t c = 0; c < edited.len(); ++c) {
        const double d = e_s[c] - edited[c];
        s += d * d;
    }
    return s + orth_penalty(p.R);
}

std::size_t param_count(const InterventionConfig& cfg, std::size_t dim) {
    return cfg.layers.size() * (2 * cfg.rank * dim + cfg.rank);
}

std::vector<InterventionParams> init_interventions(const InterventionConfig& cfg, std::size_t dim) {
    if (cfg.rank < 1 || cfg.rank > dim) {
        throw Error(ErrorKind::argument, "rank " + std::to_string(cfg.rank) + " outside [1, " +
                                             std::to_string(dim) + "]");
    }
    SeededRng rng(cfg.init_seed);
    std::vector<InterventionParams> out;
    out.reserve(cfg.layers.size());
    for (auto layer : cfg.layers) {
        Matrix g(cfg.rank, dim);
        for (auto& x : g.values()) x = rng.normal();
        InterventionParams p;
        p.R = linalg::orthonormalize_rows(g);
        p.W = p.R;
        p.b = Vector(cfg.rank);
        p.layer = layer;
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace corereft::reft
