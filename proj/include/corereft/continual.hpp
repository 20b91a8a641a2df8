#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "corereft/data.hpp"
#include "corereft/linalg.hpp"
#include "corereft/nn.hpp"
#include "corereft/optim.hpp"
#include "corereft/reft.hpp"

namespace corereft::continual {

using linalg::Matrix;
using linalg::Vector;

enum class Similarity { cosine, dot };

const char* to_string(Similarity s);
Similarity similarity_from_string(const std::string& s);

// Class-mean classifier. With cosine similarity prototypes are stored
// unit-normalized; with dot similarity the raw class means are kept.
class PrototypeClassifier {
public:
    PrototypeClassifier() = default;
    explicit PrototypeClassifier(Similarity similarity) : similarity_(similarity) {}

    // Inserts or replaces the prototype for `class_id` from a class-mean feature.
    void set(int class_id, const Vector& mean);
    // Stores an already-processed prototype verbatim (checkpoint loading).
    void restore(int class_id, Vector stored);

    // Highest similarity over all stored classes; ties go to the lowest class id.
    int classify(std::span<const double> feature) const;
    // Same rule restricted to `classes` (every id must be stored).
    int classify(std::span<const double> feature, std::span<const int> classes) const;

    double score(std::span<const double> feature, int class_id) const;

    bool empty() const noexcept { return prototypes_.empty(); }
    std::size_t size() const noexcept { return prototypes_.size(); }
    bool contains(int class_id) const { return prototypes_.count(class_id) != 0; }
    std::set<int> classes() const;
    const std::map<int, Vector>& prototypes() const noexcept { return prototypes_; }
    Similarity similarity() const noexcept { return similarity_; }

    friend bool operator==(const PrototypeClassifier&, const PrototypeClassifier&) = default;

private:
    Similarity similarity_ = Similarity::cosine;
    std::map<int, Vector> prototypes_;
};

// Unit-normalized (or raw, for dot similarity) class means of `features`
// grouped by `labels`, written into `clf`.
void build_prototypes(const Matrix& features, std::span<const int> labels,
                      PrototypeClassifier& clf);

int classify_cil(std::span<const double> feature, const PrototypeClassifier& clf);

// Per-task classifiers keyed by task id.
using TaskClassifiers = std::map<std::size_t, PrototypeClassifier>;
int classify_til(std::span<const double> feature, std::size_t task_id,
                 const TaskClassifiers& classifiers);

struct DomainEntry {
    std::vector<Vector> centers;
    PrototypeClassifier classifier;

    friend bool operator==(const DomainEntry&, const DomainEntry&) = default;
};

class DomainRouter {
public:
    void add_domain(int domain_id, std::vector<Vector> centers, PrototypeClassifier classifier);

    // Domain whose nearest center is closest (Euclidean); ties go to the lowest domain id.
    int route(std::span<const double> feature) const;

    bool empty() const noexcept { return domains_.empty(); }
    std::size_t size() const noexcept { return domains_.size(); }
    const std::map<int, DomainEntry>& domains() const noexcept { return domains_; }
    const DomainEntry& at(int domain_id) const;

    friend bool operator==(const DomainRouter&, const DomainRouter&) = default;

private:
    std::map<int, DomainEntry> domains_;
};

struct Routed {
    int domain_id = 0;
    int class_id = 0;
};

Routed route_and_classify_dil(std::span<const double> feature, const DomainRouter& router);

// ---------------------------------------------------------------------------
// Models and training
// ---------------------------------------------------------------------------

// Encoder plus (possibly empty) interventions: the function that maps inputs
// to features during continual evaluation.
struct FeatureModel {
    const nn::FrozenEncoder* encoder = nullptr;
    std::vector<reft::InterventionParams> interventions;
    reft::Positions positions = reft::Positions::all;

    Matrix features(const Matrix& inputs) const;
};

struct TrainLog {
    std::vector<double> epoch_loss;
    double orth_start = 0.0;  // mean orth_penalty over layers before the first step
    double orth_end = 0.0;    // ... after the last step
    std::size_t steps = 0;
};

struct TrainedInterventions {
    std::vector<reft::InterventionParams> params;
    TrainLog log;
};

// Trains the interventions described by `cfg` together with a temporary
// linear head over the classes present in `task1`; the head is discarded.
// Loss: cross-entropy + lambda_orth * sum over layers of orth_penalty(R).
TrainedInterventions train_first_task(const nn::FrozenEncoder& encoder,
                                      const reft::InterventionConfig& cfg,
                                      const data::Dataset& task1, const optim::TrainHyper& hyper);

// Full-finetune baseline: every encoder weight plus a temporary head trained on
// task 1. Returns a frozen encoder.
nn::FrozenEncoder finetune_first_task(const nn::FrozenEncoder& encoder, const data::Dataset& task1,
                                      const optim::TrainHyper& hyper, TrainLog* log = nullptr);

// ---------------------------------------------------------------------------
// Metrics and scenario runs
// ---------------------------------------------------------------------------

struct StageCount {
    std::size_t correct = 0;
    std::size_t total = 0;
};

struct MetricsTable {
    std::vector<double> last;  // percent, cumulative over seen tasks
    std::vector<double> avg;   // avg[t-1] = (last[0] + ... + last[t-1]) / t
    std::vector<StageCount> counts;
    // per_task[t][i]: accuracy (percent) on task i's test split after stage t+1.
    std::vector<std::vector<double>> per_task;

    void push(StageCount stage, std::vector<double> task_accuracy);
    // Recomputes every avg entry and compares exactly.
    bool consistent() const;
};

double running_avg(std::span<const double> last, std::size_t t);

enum class Method { core, frozen, finetune };

const char* to_string(Method m);
Method method_from_string(const std::string& s);

struct RunOptions {
    Method method = Method::core;
    Similarity similarity = Similarity::cosine;
    std::size_t kmeans_k = 5;
    std::uint64_t kmeans_seed = 1993;
};

// Everything a stage evaluation needs.
struct ContinualState {
    data::Scenario scenario = data::Scenario::cil;
    PrototypeClassifier global;     // CIL
    TaskClassifiers per_task;       // TIL
    DomainRouter router;            // DIL
    std::map<int, int> task_domain; // task id -> domain id (DIL)
};

// Top-1 accuracy over the test splits of tasks [0, stage] given precomputed
// test features per task.
StageCount evaluate_stage(const data::TaskStream& stream, std::size_t stage,
                          std::span<const Matrix> test_features, const ContinualState& state,
                          std::vector<double>* per_task_accuracy = nullptr);

struct ScenarioResult {
    MetricsTable metrics;
    std::vector<reft::InterventionParams> interventions;
    ContinualState state;
    TrainLog train_log;
    std::optional<nn::FrozenEncoder> finetuned;  // finetune method only
    // DIL: fraction (percent) of test samples routed to their own domain at the last stage.
    std::optional<double> routing_accuracy;
    std::size_t trainable_params = 0;
};

ScenarioResult run_scenario(const nn::FrozenEncoder& encoder, const reft::InterventionConfig& cfg,
                            const data::TaskStream& stream, const optim::TrainHyper& hyper,
                            const RunOptions& options = {});

// "CORERUN1" container: encoder, interventions and classifiers of one run.
std::string save_run(const nn::FrozenEncoder& encoder, const ScenarioResult& result,
                     const nlohmann::json& meta);

struct LoadedRun {
    nn::FrozenEncoder encoder;
    std::vector<reft::InterventionParams> interventions;
    ContinualState state;
    nlohmann::json meta;
};
LoadedRun load_run(std::string_view bytes);

// "COREINT1" container holding only intervention parameters.
std::string save_interventions(std::span<const reft::InterventionParams> params);
std::vector<reft::InterventionParams> load_interventions(std::string_view bytes);

}  // namespace corereft::continual
