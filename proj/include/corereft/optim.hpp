#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace corereft::optim {

// Mini-batch SGD settings shared by pretraining and intervention training.
struct TrainHyper {
    double lr = 0.05;
    double weight_decay = 5e-4;
    std::size_t batch = 48;
    std::size_t epochs = 20;
    double momentum = 0.9;
    double lambda_orth = 1.0;
    std::uint64_t seed = 1993;
    // Only cosine decay is implemented; kept as a field so configs can name it.
    bool cosine = true;

    void validate() const;

    friend bool operator==(const TrainHyper&, const TrainHyper&) = default;
};

// Cosine decay from base_lr at step 0 towards 0 at total_steps.
double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps);

// SGD with heavy-ball momentum and coupled L2 weight decay (torch.optim.SGD semantics).
class Sgd {
public:
    Sgd(std::size_t n, double momentum, double weight_decay)
        : velocity_(n, 0.0), momentum_(momentum), weight_decay_(weight_decay) {}

    void step(std::span<double> params, std::span<const double> grads, double lr);

private:
    std::vector<double> velocity_;
    double momentum_;
    double weight_decay_;
};

}  // namespace corereft::optim
