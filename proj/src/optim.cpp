#include "corereft/optim.hpp"

#include <cmath>
#include <numbers>

#include "corereft/error.hpp"

namespace corereft::optim {

void TrainHyper::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr", "must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be >= 0");
    if (batch < 1) throw ConfigError("batch", "must be >= 1");
    if (epochs < 1) throw ConfigError("epochs", "must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum", "must be in [0, 1)");
    if (!(lambda_orth >= 0.0)) throw ConfigError("lambda_orth", "must be >= 0");
}

double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
    if (total_steps == 0) return base_lr;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

void Sgd::step(std::span<double> params, std::span<const double> grads, double lr) {
    if (params.size() != velocity_.size() || grads.size() != velocity_.size()) {
        throw Error(ErrorKind::shape, "optimizer state size mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i] + weight_decay_ * params[i];
        velocity_[i] = momentum_ * velocity_[i] + g;
        params[i] -= lr * velocity_[i];
    }
}

}  // namespace corereft::optim
