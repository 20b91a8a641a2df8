#include "corereft/continual.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "corereft/binio.hpp"
#include "corereft/error.hpp"
#include "corereft/rng.hpp"

namespace corereft::continual {

const char* to_string(Similarity s) { return s == Similarity::cosine ? "cosine" : "dot"; }

Similarity similarity_from_string(const std::string& s) {
    if (s == "cosine") return Similarity::cosine;
    if (s == "dot") return Similarity::dot;
    throw Error(ErrorKind::argument, "unknown similarity '" + s + "' (expected cosine|dot)");
}

const char* to_string(Method m) {
    switch (m) {
        case Method::core: return "core";
        case Method::frozen: return "frozen";
        case Method::finetune: return "finetune";
    }
    return "?";
}

Method method_from_string(const std::string& s) {
    if (s == "core") return Method::core;
    if (s == "frozen") return Method::frozen;
    if (s == "finetune") return Method::finetune;
    throw Error(ErrorKind::argument, "unknown method '" + s + "' (expected core|frozen|finetune)");
}

// ---------------------------------------------------------------------------
// Prototype classifier
// ---------------------------------------------------------------------------

void PrototypeClassifier::set(int class_id, const Vector& mean) {
    if (!prototypes_.empty() && prototypes_.begin()->second.len() != mean.len()) {
        throw Error(ErrorKind::shape, "prototype length " + std::to_string(mean.len()) +
                                          " differs from stored prototypes");
    }
    if (similarity_ == Similarity::dot) {
        prototypes_[class_id] = mean;
        return;
    }
    const double n = linalg::norm2(mean.values());
    if (!(n > 0.0)) {
        throw Error(ErrorKind::argument,
                    "class " + std::to_string(class_id) + " has a zero mean feature");
    }
    std::vector<double> unit(mean.values().begin(), mean.values().end());
    for (auto& v : unit) v /= n;
    prototypes_[class_id] = Vector(std::move(unit));
}

void PrototypeClassifier::restore(int class_id, Vector stored) {
    if (!prototypes_.empty() && prototypes_.begin()->second.len() != stored.len()) {
        throw Error(ErrorKind::shape, "prototype length mismatch on restore");
    }
    prototypes_[class_id] = std::move(stored);
}

double PrototypeClassifier::score(std::span<const double> feature, int class_id) const {
    const auto it = prototypes_.find(class_id);
    if (it == prototypes_.end()) {
        throw Error(ErrorKind::argument, "class " + std::to_string(class_id) + " not in classifier");
    }
    const double d = linalg::dot(feature, it->second.values());
    if (similarity_ == Similarity::dot) return d;
    const double n = linalg::norm2(feature);
    return n > 0.0 ? d / n : 0.0;
}

int PrototypeClassifier::classify(std::span<const double> feature) const {
    if (prototypes_.empty()) throw Error(ErrorKind::argument, "classifier has no prototypes");
    int best = prototypes_.begin()->first;
    double best_score = -std::numeric_limits<double>::infinity();
    // std::map iterates in ascending class id, so strict '>' keeps the lowest id on ties.
    for (const auto& [c, _] : prototypes_) {
        const double s = score(feature, c);
        if (s > best_score) {
            best_score = s;
            best = c;
        }
    }
    return best;
}

int PrototypeClassifier::classify(std::span<const double> feature,
                                  std::span<const int> classes) const {
    if (classes.empty()) throw Error(ErrorKind::argument, "empty class restriction");
    std::vector<int> sorted(classes.begin(), classes.end());
    std::sort(sorted.begin(), sorted.end());
    int best = sorted.front();
    double best_score = -std::numeric_limits<double>::infinity();
    for (int c : sorted) {
        const double s = score(feature, c);
        if (s > best_score) {
            best_score = s;
            best = c;
        }
    }
    return best;
}

std::set<int> PrototypeClassifier::classes() const {
    std::set<int> out;
    for (const auto& [c, _] : prototypes_) out.insert(c);
    return out;
}

void build_prototypes(const Matrix& features, std::span<const int> labels,
                      PrototypeClassifier& clf) {
    if (features.rows() != labels.size()) {
        throw Error(ErrorKind::shape, "features " + features.shape() + " vs " +
                                          std::to_string(labels.size()) + " labels");
    }
    if (labels.empty()) throw Error(ErrorKind::argument, "cannot build prototypes from no samples");
    std::map<int, std::pair<std::vector<double>, std::size_t>> sums;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& [sum, count] = sums[labels[i]];
        if (sum.empty()) sum.assign(features.cols(), 0.0);
        const auto row = features.row(i);
        for (std::size_t c = 0; c < row.size(); ++c) sum[c] += row[c];
        ++count;
    }
    for (auto& [cls, entry] : sums) {
        auto& [sum, count] = entry;
        for (auto& v : sum) v /= static_cast<double>(count);
        clf.set(cls, Vector(std::move(sum)));
    }
}

int classify_cil(std::span<const double> feature, const PrototypeClassifier& clf) {
    return clf.classify(feature);
}

int classify_til(std::span<const double> feature, std::size_t task_id,
                 const TaskClassifiers& classifiers) {
    const auto it = classifiers.find(task_id);
    if (it == classifiers.end()) {
        throw Error(ErrorKind::argument, "unknown task id " + std::to_string(task_id));
    }
    return it->second.classify(feature);
}

// ---------------------------------------------------------------------------
// Domain router
// ---------------------------------------------------------------------------

void DomainRouter::add_domain(int domain_id, std::vector<Vector> centers,
                              PrototypeClassifier classifier) {
    if (centers.empty()) {
        throw Error(ErrorKind::argument, "domain " + std::to_string(domain_id) + " has no centers");
    }
    if (classifier.empty()) {
        throw Error(ErrorKind::argument,
                    "domain " + std::to_string(domain_id) + " has an empty classifier");
    }
    domains_[domain_id] = DomainEntry{std::move(centers), std::move(classifier)};
}

const DomainEntry& DomainRouter::at(int domain_id) const {
    const auto it = domains_.find(domain_id);
    if (it == domains_.end()) throw Error(ErrorKind::argument, "unknown domain " + std::to_string(domain_id));
    return it->second;
}

int DomainRouter::route(std::span<const double> feature) const {
    if (domains_.empty()) throw Error(ErrorKind::argument, "router has no domains");
    int best = domains_.begin()->first;
    double best_dist = std::numeric_limits<double>::infinity();
    for (const auto& [id, entry] : domains_) {
        for (const auto& c : entry.centers) {
            if (c.len() != feature.size()) {
                throw Error(ErrorKind::shape, "feature length " + std::to_string(feature.size()) +
                                                  " vs center length " + std::to_string(c.len()));
            }
            double d2 = 0.0;
            for (std::size_t i = 0; i < feature.size(); ++i) {
                const double diff = feature[i] - c[i];
                d2 += diff * diff;
            }
            if (d2 < best_dist) {
                best_dist = d2;
                best = id;
            }
        }
    }
    return best;
}

Routed route_and_classify_dil(std::span<const double> feature, const DomainRouter& router) {
    const int domain = router.route(feature);
    return {domain, router.at(domain).classifier.classify(feature)};
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

Matrix FeatureModel::features(const Matrix& inputs) const {
    if (!encoder) throw Error(ErrorKind::argument, "feature model has no encoder");
    const std::size_t chunk = 256;
    Matrix out(inputs.rows(), encoder->config().dim);
    for (std::size_t s = 0; s < inputs.rows(); s += chunk) {
        const std::size_t n = std::min(chunk, inputs.rows() - s);
        std::vector<double> buf(inputs.values().begin() + static_cast<std::ptrdiff_t>(s * inputs.cols()),
                                inputs.values().begin() +
                                    static_cast<std::ptrdiff_t>((s + n) * inputs.cols()));
        const Matrix f = nn::encode(*encoder, Matrix(n, inputs.cols(), std::move(buf)),
                                    interventions, positions);
        std::copy(f.values().begin(), f.values().end(),
                  out.values().begin() + static_cast<std::ptrdiff_t>(s * f.cols()));
    }
    return out;
}

namespace {

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
    std::vector<double> buf;
    buf.reserve(idx.size() * m.cols());
    for (auto i : idx) buf.insert(buf.end(), m.row(i).begin(), m.row(i).end());
    return Matrix(idx.size(), m.cols(), std::move(buf));
}

double mean_orth(std::span<const reft::InterventionParams> ps) {
    if (ps.empty()) return 0.0;
    double s = 0.0;
    for (const auto& p : ps) s += reft::orth_penalty(p.R);
    return s / static_cast<double>(ps.size());
}

// Maps global class ids of `ds` onto head indices 0..k-1 in ascending id order.
std::vector<int> local_targets(const data::Dataset& ds, std::size_t& n_local) {
    std::set<int> present(ds.labels.begin(), ds.labels.end());
    std::map<int, int> index;
    for (int c : present) index.emplace(c, static_cast<int>(index.size()));
    n_local = index.size();
    std::vector<int> out;
    out.reserve(ds.size());
    for (int c : ds.labels) out.push_back(index.at(c));
    return out;
}

struct BatchPlan {
    std::size_t steps_per_epoch;
    std::size_t total_steps;
};

BatchPlan plan(std::size_t n, const optim::TrainHyper& hyper) {
    const std::size_t per = (n + hyper.batch - 1) / hyper.batch;
    return {per, per * hyper.epochs};
}

}  // namespace

TrainedInterventions train_first_task(const nn::FrozenEncoder& encoder,
                                      const reft::InterventionConfig& cfg,
                                      const data::Dataset& task1, const optim::TrainHyper& hyper) {
    hyper.validate();
    task1.validate();
    if (!encoder.frozen()) throw Error(ErrorKind::argument, "intervention training needs a frozen encoder");
    if (task1.size() == 0) throw Error(ErrorKind::argument, "first task has no training samples");
    const auto& ecfg = encoder.config();
    cfg.validate(ecfg.depth, ecfg.dim);

    TrainedInterventions out;
    out.params = reft::init_interventions(cfg, ecfg.dim);
    auto& ivs = out.params;
    out.log.orth_start = mean_orth(ivs);
    if (ivs.empty()) return out;

    std::size_t n_local = 0;
    const auto targets = local_targets(task1, n_local);

    SeededRng rng(hyper.seed);
    nn::LinearHead head = nn::LinearHead::init(n_local, ecfg.dim, rng.fork());
    optim::Sgd w_opt(head.weight.size(), hyper.momentum, hyper.weight_decay);
    optim::Sgd b_opt(head.bias.len(), hyper.momentum, hyper.weight_decay);

    // Layer order in the gradient output is ascending; keep optimizers aligned to it.
    std::vector<std::size_t> layers = cfg.layers;
    std::sort(layers.begin(), layers.end());
    std::vector<std::size_t> slot(ivs.size());
    for (std::size_t i = 0; i < ivs.size(); ++i)
        slot[i] = static_cast<std::size_t>(std::find(layers.begin(), layers.end(), ivs[i].layer) -
                                           layers.begin());
    struct IvOpt {
        optim::Sgd R, W, b;
    };
    std::vector<IvOpt> opts;
    for (const auto& p : ivs) {
        opts.push_back({optim::Sgd(p.R.size(), hyper.momentum, hyper.weight_decay),
                        optim::Sgd(p.W.size(), hyper.momentum, hyper.weight_decay),
                        optim::Sgd(p.b.len(), hyper.momentum, hyper.weight_decay)});
    }

    const std::size_t n = task1.size();
    const auto bp = plan(n, hyper);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        double loss_sum = 0.0;
        for (std::size_t s = 0; s < n; s += hyper.batch, ++step) {
            const std::span<const std::size_t> idx(order.data() + s, std::min(hyper.batch, n - s));
            std::vector<int> y;
            y.reserve(idx.size());
            for (auto i : idx) y.push_back(targets[i]);

            auto fwd = at_step(step, [&] {
                return nn::forward(encoder, gather_rows(task1.inputs, idx), ivs, cfg.positions);
            });
            const auto ce = nn::softmax_cross_entropy(head.logits(fwd.features), y);
            double orth = 0.0;
            for (const auto& p : ivs) orth += reft::orth_penalty(p.R);
            const double loss = ce.loss + cfg.lambda_orth * orth;
            if (!std::isfinite(loss)) throw DivergenceError(step, "intervention training loss is not finite");
            loss_sum += loss * static_cast<double>(idx.size());

            const auto hg = nn::head_backward(head, fwd.features, ce.grad_logits);
            auto grads = nn::backward(encoder, fwd.tape, hg.d_features, layers);
            const double lr = optim::cosine_lr(hyper.lr, step, bp.total_steps);
            for (std::size_t i = 0; i < ivs.size(); ++i) {
                auto& g = grads.interventions[slot[i]];
                if (cfg.lambda_orth != 0.0) reft::orth_penalty_grad(ivs[i].R, cfg.lambda_orth, g.dR);
                opts[i].R.step(ivs[i].R.values(), g.dR, lr);
                opts[i].W.step(ivs[i].W.values(), g.dW, lr);
                opts[i].b.step(ivs[i].b.values(), g.db, lr);
                if (!linalg::all_finite(ivs[i].R.values()) || !linalg::all_finite(ivs[i].W.values()) ||
                    !linalg::all_finite(ivs[i].b.values())) {
                    throw DivergenceError(step, "intervention parameters became non-finite");
                }
            }
            w_opt.step(head.weight.values(), hg.d_weight, lr);
            b_opt.step(head.bias.values(), hg.d_bias, lr);
        }
        out.log.epoch_loss.push_back(loss_sum / static_cast<double>(n));
    }
    out.log.steps = step;
    out.log.orth_end = mean_orth(ivs);
    return out;
}

nn::FrozenEncoder finetune_first_task(const nn::FrozenEncoder& encoder, const data::Dataset& task1,
                                      const optim::TrainHyper& hyper, TrainLog* log) {
    hyper.validate();
    task1.validate();
    if (task1.size() == 0) throw Error(ErrorKind::argument, "first task has no training samples");
    nn::FrozenEncoder enc = encoder.thawed_copy();
    const auto& ecfg = enc.config();

    std::size_t n_local = 0;
    const auto targets = local_targets(task1, n_local);
    SeededRng rng(hyper.seed);
    nn::LinearHead head = nn::LinearHead::init(n_local, ecfg.dim, rng.fork());
    optim::Sgd enc_opt(enc.param_count(), hyper.momentum, hyper.weight_decay);
    optim::Sgd w_opt(head.weight.size(), hyper.momentum, hyper.weight_decay);
    optim::Sgd b_opt(head.bias.len(), hyper.momentum, hyper.weight_decay);

    const std::size_t n = task1.size();
    const auto bp = plan(n, hyper);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    TrainLog local;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        double loss_sum = 0.0;
        for (std::size_t s = 0; s < n; s += hyper.batch, ++step) {
            const std::span<const std::size_t> idx(order.data() + s, std::min(hyper.batch, n - s));
            std::vector<int> y;
            for (auto i : idx) y.push_back(targets[i]);
            auto fwd = at_step(step, [&] { return nn::forward(enc, gather_rows(task1.inputs, idx)); });
            const auto ce = nn::softmax_cross_entropy(head.logits(fwd.features), y);
            if (!std::isfinite(ce.loss)) throw DivergenceError(step, "finetune loss is not finite");
            loss_sum += ce.loss * static_cast<double>(idx.size());
            const auto hg = nn::head_backward(head, fwd.features, ce.grad_logits);
            const auto grads = nn::backward_full(enc, fwd.tape, hg.d_features, {});
            const double lr = optim::cosine_lr(hyper.lr, step, bp.total_steps);
            enc_opt.step(enc.mutable_params(), grads.backbone, lr);
            w_opt.step(head.weight.values(), hg.d_weight, lr);
            b_opt.step(head.bias.values(), hg.d_bias, lr);
            if (!linalg::all_finite(enc.params())) {
                throw DivergenceError(step, "encoder parameters became non-finite");
            }
        }
        local.epoch_loss.push_back(loss_sum / static_cast<double>(n));
    }
    local.steps = step;
    if (log) *log = std::move(local);
    enc.freeze();
    return enc;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

double running_avg(std::span<const double> last, std::size_t t) {
    if (t == 0 || t > last.size()) throw Error(ErrorKind::argument, "stage out of range");
    double s = 0.0;
    for (std::size_t i = 0; i < t; ++i) s += last[i];
    return s / static_cast<double>(t);
}

void MetricsTable::push(StageCount stage, std::vector<double> task_accuracy) {
    if (stage.total == 0) throw Error(ErrorKind::argument, "stage has no test samples");
    counts.push_back(stage);
    last.push_back(100.0 * static_cast<double>(stage.correct) / static_cast<double>(stage.total));
    avg.push_back(running_avg(last, last.size()));
    per_task.push_back(std::move(task_accuracy));
}

bool MetricsTable::consistent() const {
    if (last.size() != avg.size()) return false;
    for (std::size_t t = 1; t <= last.size(); ++t) {
        if (avg[t - 1] != running_avg(last, t)) return false;
        if (last[t - 1] < 0.0 || last[t - 1] > 100.0) return false;
    }
    return true;
}

StageCount evaluate_stage(const data::TaskStream& stream, std::size_t stage,
                          std::span<const Matrix> test_features, const ContinualState& state,
                          std::vector<double>* per_task_accuracy) {
    if (stage >= stream.tasks.size()) throw Error(ErrorKind::argument, "stage beyond stream length");
    if (test_features.size() <= stage) throw Error(ErrorKind::argument, "missing test features");
    StageCount total;
    if (per_task_accuracy) per_task_accuracy->clear();
    for (std::size_t i = 0; i <= stage; ++i) {
        const auto& task = stream.tasks[i];
        const Matrix& f = test_features[i];
        if (f.rows() != task.test.size()) throw Error(ErrorKind::shape, "test features do not match split");
        std::size_t correct = 0;
        for (std::size_t r = 0; r < f.rows(); ++r) {
            int pred = 0;
            switch (state.scenario) {
                case data::Scenario::cil: pred = classify_cil(f.row(r), state.global); break;
                case data::Scenario::til: pred = classify_til(f.row(r), task.task_id, state.per_task); break;
                case data::Scenario::dil: pred = route_and_classify_dil(f.row(r), state.router).class_id; break;
            }
            if (pred == task.test.labels[r]) ++correct;
        }
        total.correct += correct;
        total.total += f.rows();
        if (per_task_accuracy) {
            per_task_accuracy->push_back(
                f.rows() == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(f.rows()));
        }
    }
    if (total.total == 0) throw Error(ErrorKind::argument, "no test samples in seen tasks");
    return total;
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

ScenarioResult run_scenario(const nn::FrozenEncoder& encoder, const reft::InterventionConfig& cfg,
                            const data::TaskStream& stream, const optim::TrainHyper& hyper,
                            const RunOptions& options) {
    stream.validate();
    if (stream.tasks.empty()) throw Error(ErrorKind::argument, "task stream is empty");
    if (!encoder.frozen()) throw Error(ErrorKind::argument, "run_scenario needs a frozen encoder");

    ScenarioResult res;
    res.state.scenario = stream.scenario;
    res.state.global = PrototypeClassifier(options.similarity);
    FeatureModel model;
    model.encoder = &encoder;

    const auto& first = stream.tasks.front().train;
    switch (options.method) {
        case Method::core: {
            cfg.validate(encoder.config().depth, encoder.config().dim);
            auto trained = train_first_task(encoder, cfg, first, hyper);
            res.interventions = std::move(trained.params);
            res.train_log = std::move(trained.log);
            res.trainable_params = reft::param_count(cfg, encoder.config().dim);
            model.interventions = res.interventions;
            model.positions = cfg.positions;
            break;
        }
        case Method::frozen:
            break;
        case Method::finetune: {
            res.finetuned = finetune_first_task(encoder, first, hyper, &res.train_log);
            res.trainable_params = encoder.param_count();
            model.encoder = &*res.finetuned;
            break;
        }
    }

    std::vector<Matrix> test_features;
    for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
        const auto& task = stream.tasks[t];
        const Matrix train_f = model.features(task.train.inputs);
        test_features.push_back(model.features(task.test.inputs));

        switch (stream.scenario) {
            case data::Scenario::cil:
                build_prototypes(train_f, task.train.labels, res.state.global);
                break;
            case data::Scenario::til: {
                PrototypeClassifier clf(options.similarity);
                build_prototypes(train_f, task.train.labels, clf);
                res.state.per_task.emplace(task.task_id, std::move(clf));
                break;
            }
            case data::Scenario::dil: {
                PrototypeClassifier clf(options.similarity);
                build_prototypes(train_f, task.train.labels, clf);
                std::vector<Vector> points;
                points.reserve(train_f.rows());
                for (std::size_t r = 0; r < train_f.rows(); ++r)
                    points.emplace_back(std::vector<double>(train_f.row(r).begin(), train_f.row(r).end()));
                const std::size_t k = std::min(options.kmeans_k, points.size());
                auto centers = linalg::kmeans(points, k, options.kmeans_seed);
                res.state.router.add_domain(task.domain_id, std::move(centers), std::move(clf));
                res.state.task_domain[static_cast<int>(task.task_id)] = task.domain_id;
                break;
            }
        }
        std::vector<double> per_task;
        const StageCount sc = evaluate_stage(stream, t, test_features, res.state, &per_task);
        res.metrics.push(sc, std::move(per_task));
    }

    if (stream.scenario == data::Scenario::dil) {
        std::size_t hit = 0, total = 0;
        for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
            const Matrix& f = test_features[t];
            for (std::size_t r = 0; r < f.rows(); ++r) {
                if (res.state.router.route(f.row(r)) == stream.tasks[t].domain_id) ++hit;
                ++total;
            }
        }
        res.routing_accuracy =
            total == 0 ? 0.0 : 100.0 * static_cast<double>(hit) / static_cast<double>(total);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

nlohmann::json intervention_header(std::span<const reft::InterventionParams> ps) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : ps) arr.push_back({{"layer", p.layer}, {"rank", p.rank()}, {"dim", p.dim()}});
    return arr;
}

void write_interventions(io::BinaryWriter& w, std::span<const reft::InterventionParams> ps) {
    for (const auto& p : ps) {
        w.doubles(p.R.values());
        w.doubles(p.W.values());
        w.doubles(p.b.values());
    }
}

std::vector<reft::InterventionParams> read_interventions(io::BinaryReader& r, const nlohmann::json& hdr) {
    std::vector<reft::InterventionParams> out;
    try {
        for (const auto& e : hdr) {
            const auto rank = e.at("rank").get<std::size_t>();
            const auto dim = e.at("dim").get<std::size_t>();
            reft::InterventionParams p;
            p.layer = e.at("layer").get<std::size_t>();
            auto R = r.doubles();
            auto W = r.doubles();
            auto b = r.doubles();
            if (R.size() != rank * dim || W.size() != rank * dim || b.size() != rank) {
                throw Error(ErrorKind::format, "intervention block sizes do not match header");
            }
            p.R = Matrix(rank, dim, std::move(R));
            p.W = Matrix(rank, dim, std::move(W));
            p.b = Vector(std::move(b));
            p.validate();
            out.push_back(std::move(p));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::format, std::string("bad intervention header: ") + e.what());
    }
    return out;
}

void write_classifier(io::BinaryWriter& w, nlohmann::json& hdr, const PrototypeClassifier& clf) {
    hdr["similarity"] = to_string(clf.similarity());
    hdr["classes"] = nlohmann::json::array();
    for (const auto& [c, v] : clf.prototypes()) {
        hdr["classes"].push_back(c);
        w.doubles(v.values());
    }
}

PrototypeClassifier read_classifier(io::BinaryReader& r, const nlohmann::json& hdr) {
    PrototypeClassifier clf(similarity_from_string(hdr.at("similarity").get<std::string>()));
    for (const auto& c : hdr.at("classes")) clf.restore(c.get<int>(), Vector(r.doubles()));
    return clf;
}

}  // namespace

std::string save_interventions(std::span<const reft::InterventionParams> params) {
    io::BinaryWriter w("COREINT1");
    w.json({{"interventions", intervention_header(params)}});
    write_interventions(w, params);
    return w.take();
}

std::vector<reft::InterventionParams> load_interventions(std::string_view bytes) {
    io::BinaryReader r(bytes, "COREINT1");
    const auto hdr = r.json();
    if (!hdr.contains("interventions")) throw Error(ErrorKind::format, "missing intervention header");
    auto out = read_interventions(r, hdr.at("interventions"));
    if (!r.at_end()) throw Error(ErrorKind::format, "trailing bytes after interventions");
    return out;
}

std::string save_run(const nn::FrozenEncoder& encoder, const ScenarioResult& result,
                     const nlohmann::json& meta) {
    // Classifier vectors are written first into a side buffer so the header can describe them.
    io::BinaryWriter body("CORERUN1");
    nlohmann::json hdr;
    hdr["meta"] = meta;
    hdr["scenario"] = data::to_string(result.state.scenario);
    hdr["interventions"] = intervention_header(result.interventions);

    io::BinaryWriter cls("CORERUN1");
    nlohmann::json chdr;
    const auto& st = result.state;
    switch (st.scenario) {
        case data::Scenario::cil: write_classifier(cls, chdr["global"], st.global); break;
        case data::Scenario::til:
            chdr["tasks"] = nlohmann::json::array();
            for (const auto& [t, clf] : st.per_task) {
                nlohmann::json e;
                e["task"] = t;
                write_classifier(cls, e, clf);
                chdr["tasks"].push_back(e);
            }
            break;
        case data::Scenario::dil:
            chdr["domains"] = nlohmann::json::array();
            for (const auto& [d, entry] : st.router.domains()) {
                nlohmann::json e;
                e["domain"] = d;
                e["centers"] = entry.centers.size();
                for (const auto& c : entry.centers) cls.doubles(c.values());
                write_classifier(cls, e, entry.classifier);
                chdr["domains"].push_back(e);
            }
            chdr["task_domain"] = nlohmann::json::array();
            for (const auto& [t, d] : st.task_domain) chdr["task_domain"].push_back({t, d});
            break;
    }
    hdr["classifiers"] = chdr;

    const nn::FrozenEncoder& enc = result.finetuned ? *result.finetuned : encoder;
    body.json(hdr);
    body.blob(nn::save_encoder(enc));
    write_interventions(body, result.interventions);
    body.blob(cls.take().substr(8));
    return body.take();
}

LoadedRun load_run(std::string_view bytes) {
    io::BinaryReader r(bytes, "CORERUN1");
    const auto hdr = r.json();
    try {
        const std::string enc_bytes = r.blob();
        LoadedRun out{nn::load_encoder(enc_bytes), {}, ContinualState{}, hdr.at("meta")};
        out.interventions = read_interventions(r, hdr.at("interventions"));
        const std::string cls_bytes = "CORERUN1" + r.blob();
        if (!r.at_end()) throw Error(ErrorKind::format, "trailing bytes after run checkpoint");
        io::BinaryReader cr(cls_bytes, "CORERUN1");
        const auto& chdr = hdr.at("classifiers");
        auto& st = out.state;
        st.scenario = data::scenario_from_string(hdr.at("scenario").get<std::string>());
        switch (st.scenario) {
            case data::Scenario::cil: st.global = read_classifier(cr, chdr.at("global")); break;
            case data::Scenario::til:
                for (const auto& e : chdr.at("tasks"))
                    st.per_task.emplace(e.at("task").get<std::size_t>(), read_classifier(cr, e));
                break;
            case data::Scenario::dil:
                for (const auto& e : chdr.at("domains")) {
                    std::vector<Vector> centers;
                    for (std::size_t i = 0; i < e.at("centers").get<std::size_t>(); ++i)
                        centers.emplace_back(cr.doubles());
                    st.router.add_domain(e.at("domain").get<int>(), std::move(centers), read_classifier(cr, e));
                }
                for (const auto& td : chdr.at("task_domain")) st.task_domain[td.at(0).get<int>()] = td.at(1).get<int>();
                break;
        }
        if (!cr.at_end()) throw Error(ErrorKind::format, "trailing classifier bytes");
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::format, std::string("bad run header: ") + e.what());
    }
}

}  // namespace corereft::continual
