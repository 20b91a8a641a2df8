#include "corereft/config.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "corereft/binio.hpp"
#include "corereft/error.hpp"

namespace corereft::config {

const char* to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::rank: return "rank";
        case SweepAxis::layers: return "layers";
        case SweepAxis::alpha: return "alpha";
        case SweepAxis::seed: return "seed";
    }
    return "rank";
}

SweepAxis sweep_axis_from_string(const std::string& s) {
    if (s == "rank") return SweepAxis::rank;
    if (s == "layers") return SweepAxis::layers;
    if (s == "alpha") return SweepAxis::alpha;
    if (s == "seed") return SweepAxis::seed;
    throw ConfigError("sweep.axis", "expected rank, layers, alpha or seed, got '" + s + "'");
}

namespace {

using Doc = toml::Document;

// Reads typed values out of one table and remembers which keys were used, so
// leftovers can be reported as unknown.
class Table {
public:
    Table(const Doc* doc, std::string prefix) : doc_(doc), prefix_(std::move(prefix)) {
        if (doc_ && !doc_->is_object()) throw ConfigError(prefix_, "expected a table");
    }

    std::string path(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

    const Doc* get(const std::string& key) {
        used_.insert(key);
        if (!doc_ || !doc_->contains(key)) return nullptr;
        return &(*doc_)[key];
    }

    Table sub(const std::string& key) {
        const Doc* v = get(key);
        if (v && !v->is_object()) throw ConfigError(path(key), "expected a table");
        return Table(v, path(key));
    }

    void read(const std::string& key, std::string& out) {
        if (const Doc* v = get(key)) {
            if (!v->is_string()) throw ConfigError(path(key), "expected a string");
            out = v->get<std::string>();
        }
    }

    void read(const std::string& key, double& out) {
        if (const Doc* v = get(key)) out = number(*v, path(key));
    }

    template <class U>
        requires std::is_unsigned_v<U>
    void read(const std::string& key, U& out) {
        if (const Doc* v = get(key)) out = static_cast<U>(unsigned_int(*v, path(key)));
    }

    template <class T, class F>
    void read_array(const std::string& key, std::vector<T>& out, F&& convert) {
        if (const Doc* v = get(key)) {
            if (!v->is_array()) throw ConfigError(path(key), "expected an array");
            std::vector<T> items;
            for (const auto& item : *v) items.push_back(convert(item, path(key)));
            out = std::move(items);
        }
    }

    // Every key present in the table must have been requested.
    void finish() const {
        if (!doc_) return;
        for (auto it = doc_->begin(); it != doc_->end(); ++it)
            if (!used_.count(it.key())) throw ConfigError(path(it.key()), "unknown key");
    }

    static double number(const Doc& v, const std::string& where) {
        if (v.is_number_float()) return v.get<double>();
        if (v.is_number_integer()) return static_cast<double>(v.get<std::int64_t>());
        throw ConfigError(where, "expected a number");
    }

    static std::uint64_t unsigned_int(const Doc& v, const std::string& where) {
        if (!v.is_number_integer()) throw ConfigError(where, "expected an integer");
        const auto x = v.get<std::int64_t>();
        if (x < 0) throw ConfigError(where, "must be >= 0");
        return static_cast<std::uint64_t>(x);
    }

    static std::string string(const Doc& v, const std::string& where) {
        if (!v.is_string()) throw ConfigError(where, "expected a string");
        return v.get<std::string>();
    }

private:
    const Doc* doc_;
    std::string prefix_;
    std::set<std::string> used_;
};

template <class F>
auto keyed(const std::string& key, F&& f) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(key, e.detail());
    }
}

void read_sgd(Table& t, SgdSpec& s) {
    t.read("lr", s.lr);
    t.read("weight_decay", s.weight_decay);
    t.read("batch", s.batch);
    t.read("epochs", s.epochs);
    t.read("momentum", s.momentum);
}

Doc sgd_doc(const SgdSpec& s) {
    Doc d = Doc::object();
    d["lr"] = s.lr;
    d["weight_decay"] = s.weight_decay;
    d["batch"] = static_cast<std::int64_t>(s.batch);
    d["epochs"] = static_cast<std::int64_t>(s.epochs);
    d["momentum"] = s.momentum;
    return d;
}

std::int64_t as_int(std::uint64_t v) { return static_cast<std::int64_t>(v); }

void check_sgd(const SgdSpec& s, const std::string& table) {
    if (!(s.lr > 0.0) || !std::isfinite(s.lr)) throw ConfigError(table + ".lr", "must be > 0");
    if (!(s.weight_decay >= 0.0) || !std::isfinite(s.weight_decay))
        throw ConfigError(table + ".weight_decay", "must be >= 0");
    if (s.batch == 0) throw ConfigError(table + ".batch", "must be >= 1");
    if (s.epochs == 0) throw ConfigError(table + ".epochs", "must be >= 1");
    if (!(s.momentum >= 0.0 && s.momentum < 1.0)) throw ConfigError(table + ".momentum", "must be in [0, 1)");
}

}  // namespace

// ---------------------------------------------------------------------------
// Parsing / serialization
// ---------------------------------------------------------------------------

ExperimentConfig from_toml(const toml::Document& doc) {
    ExperimentConfig c;
    Table root(&doc, "");
    root.read("out", c.out);
    root.read_array("seeds", c.seeds, Table::unsigned_int);
    root.read_array("alphas", c.alphas, Table::number);
    root.read_array("methods", c.methods, [](const Doc& v, const std::string& where) {
        return keyed(where, [&] { return continual::method_from_string(Table::string(v, where)); });
    });

    {
        Table t = root.sub("data");
        auto& d = c.data;
        t.read("source", d.source);
        if (const Doc* v = t.get("scenario")) {
            d.scenario = keyed(t.path("scenario"),
                               [&] { return data::scenario_from_string(Table::string(*v, t.path("scenario"))); });
        }
        t.read("n_classes", d.n_classes);
        t.read("dim", d.dim);
        t.read("per_class", d.per_class);
        t.read("gap_strength", d.gap_strength);
        t.read("mean_scale", d.clusters.mean_scale);
        t.read("noise", d.clusters.noise);
        t.read("subspace", d.clusters.subspace);
        t.read("n_domains", d.n_domains);
        t.read("shift_scale", d.shift_scale);
        t.read("inc", d.inc);
        t.read("test_fraction", d.test_fraction);
        t.read("seed", d.seed);
        t.read("imbalance_m", d.imbalance_m);
        t.read("manifest", d.manifest);
        t.read("base_manifest", d.base_manifest);
        t.finish();
    }
    {
        Table t = root.sub("encoder");
        auto& e = c.encoder;
        t.read("checkpoint", c.encoder_checkpoint);
        t.read("depth", e.depth);
        t.read("dim", e.dim);
        t.read("heads", e.heads);
        t.read("mlp_ratio", e.mlp_ratio);
        t.read("tokens", e.tokens);
        if (const Doc* v = t.get("input")) {
            const std::string s = Table::string(*v, t.path("input"));
            if (s == "features") e.input = nn::InputMode::features;
            else if (s == "patches") e.input = nn::InputMode::patches;
            else throw ConfigError(t.path("input"), "expected features or patches, got '" + s + "'");
        }
        t.read("input_dim", e.input_dim);
        t.read("image_size", e.image_size);
        t.read("patch_size", e.patch_size);
        t.read("seed", e.seed);
        t.finish();
    }
    {
        Table t = root.sub("pretrain");
        read_sgd(t, c.pretrain.sgd);
        t.read("seed", c.pretrain.seed);
        t.read("validation_fraction", c.pretrain.validation_fraction);
        t.finish();
    }
    {
        Table t = root.sub("intervention");
        auto& iv = c.intervention;
        t.read("rank", iv.rank);
        t.read_array("layers", iv.layers, [](const Doc& v, const std::string& where) {
            return static_cast<std::size_t>(Table::unsigned_int(v, where));
        });
        if (const Doc* v = t.get("positions")) {
            iv.positions = keyed(t.path("positions"),
                                 [&] { return reft::positions_from_string(Table::string(*v, t.path("positions"))); });
        }
        t.read("lambda_orth", iv.lambda_orth);
        t.finish();
    }
    {
        Table t = root.sub("train");
        read_sgd(t, c.train);
        t.finish();
    }
    {
        Table t = root.sub("continual");
        if (const Doc* v = t.get("similarity")) {
            c.similarity = keyed(t.path("similarity"), [&] {
                return continual::similarity_from_string(Table::string(*v, t.path("similarity")));
            });
        }
        t.read("kmeans_k", c.kmeans_k);
        t.finish();
    }
    {
        Table t = root.sub("sweep");
        if (const Doc* v = t.get("axis")) c.sweep.axis = sweep_axis_from_string(Table::string(*v, t.path("axis")));
        t.read_array("values", c.sweep.values, Table::number);
        t.finish();
    }
    root.finish();
    return c;
}

toml::Document to_toml(const ExperimentConfig& c) {
    Doc doc = Doc::object();
    doc["out"] = c.out;
    doc["seeds"] = Doc::array();
    for (auto s : c.seeds) doc["seeds"].push_back(as_int(s));
    doc["alphas"] = Doc::array();
    for (double a : c.alphas) doc["alphas"].push_back(a);
    doc["methods"] = Doc::array();
    for (auto m : c.methods) doc["methods"].push_back(continual::to_string(m));

    Doc& d = doc["data"];
    d["source"] = c.data.source;
    d["scenario"] = data::to_string(c.data.scenario);
    d["n_classes"] = as_int(c.data.n_classes);
    d["dim"] = as_int(c.data.dim);
    d["per_class"] = as_int(c.data.per_class);
    d["gap_strength"] = c.data.gap_strength;
    d["mean_scale"] = c.data.clusters.mean_scale;
    d["noise"] = c.data.clusters.noise;
    d["subspace"] = as_int(c.data.clusters.subspace);
    d["n_domains"] = as_int(c.data.n_domains);
    d["shift_scale"] = c.data.shift_scale;
    d["inc"] = as_int(c.data.inc);
    d["test_fraction"] = c.data.test_fraction;
    d["seed"] = as_int(c.data.seed);
    d["imbalance_m"] = as_int(c.data.imbalance_m);
    d["manifest"] = c.data.manifest;
    d["base_manifest"] = c.data.base_manifest;

    Doc& e = doc["encoder"];
    e["checkpoint"] = c.encoder_checkpoint;
    e["depth"] = as_int(c.encoder.depth);
    e["dim"] = as_int(c.encoder.dim);
    e["heads"] = as_int(c.encoder.heads);
    e["mlp_ratio"] = c.encoder.mlp_ratio;
    e["tokens"] = as_int(c.encoder.tokens);
    e["input"] = c.encoder.input == nn::InputMode::features ? "features" : "patches";
    e["input_dim"] = as_int(c.encoder.input_dim);
    e["image_size"] = as_int(c.encoder.image_size);
    e["patch_size"] = as_int(c.encoder.patch_size);
    e["seed"] = as_int(c.encoder.seed);

    Doc p = sgd_doc(c.pretrain.sgd);
    p["seed"] = as_int(c.pretrain.seed);
    p["validation_fraction"] = c.pretrain.validation_fraction;
    doc["pretrain"] = p;

    Doc& iv = doc["intervention"];
    iv["rank"] = as_int(c.intervention.rank);
    iv["layers"] = Doc::array();
    for (auto l : c.intervention.layers) iv["layers"].push_back(as_int(l));
    iv["positions"] = reft::to_string(c.intervention.positions);
    iv["lambda_orth"] = c.intervention.lambda_orth;

    doc["train"] = sgd_doc(c.train);

    Doc& ct = doc["continual"];
    ct["similarity"] = continual::to_string(c.similarity);
    ct["kmeans_k"] = as_int(c.kmeans_k);

    Doc& sw = doc["sweep"];
    sw["axis"] = to_string(c.sweep.axis);
    sw["values"] = Doc::array();
    for (double v : c.sweep.values) sw["values"].push_back(v);
    return doc;
}

ExperimentConfig parse_config(std::string_view text) {
    ExperimentConfig c = from_toml(toml::parse(text));
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::string text;
    try {
        text = io::read_file(path);
    } catch (const Error& e) {
        throw ConfigError("", "cannot read config " + path + ": " + e.detail());
    }
    return parse_config(text);
}

std::string serialize_config(const ExperimentConfig& cfg) { return toml::dump(to_toml(cfg)); }

// ---------------------------------------------------------------------------
// Validation and derived settings
// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
    if (out.empty()) throw ConfigError("out", "must not be empty");
    if (seeds.empty()) throw ConfigError("seeds", "must list at least one seed");
    if (alphas.empty()) throw ConfigError("alphas", "must list at least one value");
    for (double a : alphas)
        if (!(a > 0.0 && a <= 1.0)) throw ConfigError("alphas", "every alpha must be in (0, 1]");
    if (methods.empty()) throw ConfigError("methods", "must list at least one method");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
        throw ConfigError("seeds", "duplicate seed");
    if (std::set<double>(alphas.begin(), alphas.end()).size() != alphas.size())
        throw ConfigError("alphas", "duplicate alpha");
    if (std::set<continual::Method>(methods.begin(), methods.end()).size() != methods.size())
        throw ConfigError("methods", "duplicate method");

    const auto& d = data;
    if (d.source != "synthetic" && d.source != "manifest")
        throw ConfigError("data.source", "expected synthetic or manifest, got '" + d.source + "'");
    if (d.source == "manifest" && d.manifest.empty())
        throw ConfigError("data.manifest", "required when data.source = \"manifest\"");
    if (d.source == "manifest" && encoder_checkpoint.empty() && d.base_manifest.empty())
        throw ConfigError("data.base_manifest", "required for pretraining when no encoder.checkpoint is given");
    if (!(d.test_fraction > 0.0 && d.test_fraction < 1.0))
        throw ConfigError("data.test_fraction", "must be in (0, 1)");
    if (d.source == "synthetic") {
        if (d.n_classes == 0) throw ConfigError("data.n_classes", "must be >= 1");
        if (d.per_class < 2) throw ConfigError("data.per_class", "must be >= 2");
        if (d.dim == 0) throw ConfigError("data.dim", "must be >= 1");
        if (!(d.gap_strength >= 0.0) || !std::isfinite(d.gap_strength))
            throw ConfigError("data.gap_strength", "must be >= 0");
        if (!(d.clusters.mean_scale > 0.0)) throw ConfigError("data.mean_scale", "must be > 0");
        if (!(d.clusters.noise >= 0.0)) throw ConfigError("data.noise", "must be >= 0");
        if (d.clusters.subspace > d.dim) throw ConfigError("data.subspace", "must be <= data.dim");
        if (d.scenario == data::Scenario::dil && d.n_domains == 0)
            throw ConfigError("data.n_domains", "must be >= 1");
        if (!(d.shift_scale >= 0.0)) throw ConfigError("data.shift_scale", "must be >= 0");
        if (d.scenario != data::Scenario::dil && d.inc > d.n_classes)
            throw ConfigError("data.inc", "must not exceed data.n_classes");
        if (encoder_checkpoint.empty() && d.dim != encoder.input_len())
            throw ConfigError("data.dim", "must equal the encoder input length (" +
                                              std::to_string(encoder.input_len()) + ")");
    }
    if (d.scenario != data::Scenario::dil && d.inc == 0) throw ConfigError("data.inc", "must be >= 1");

    if (encoder_checkpoint.empty()) keyed("encoder", [&] { encoder.validate(); return 0; });
    check_sgd(pretrain.sgd, "pretrain");
    if (!(pretrain.validation_fraction >= 0.0 && pretrain.validation_fraction < 1.0))
        throw ConfigError("pretrain.validation_fraction", "must be in [0, 1)");
    check_sgd(train, "train");

    const auto& iv = intervention;
    if (iv.rank == 0) throw ConfigError("intervention.rank", "must be >= 1");
    if (!(iv.lambda_orth >= 0.0) || !std::isfinite(iv.lambda_orth))
        throw ConfigError("intervention.lambda_orth", "must be >= 0");
    if (std::set<std::size_t>(iv.layers.begin(), iv.layers.end()).size() != iv.layers.size())
        throw ConfigError("intervention.layers", "duplicate layer index");
    if (encoder_checkpoint.empty()) {
        if (iv.rank > encoder.dim) throw ConfigError("intervention.rank", "must not exceed encoder.dim");
        for (auto l : iv.layers)
            if (l >= encoder.depth) throw ConfigError("intervention.layers", "index " + std::to_string(l) +
                                                                                 " is not below encoder.depth");
    }
    if (kmeans_k == 0) throw ConfigError("continual.kmeans_k", "must be >= 1");
    for (double v : sweep.values) {
        if (!std::isfinite(v)) throw ConfigError("sweep.values", "must be finite");
        if (sweep.axis != SweepAxis::alpha && (v < 1.0 || v != std::floor(v)))
            throw ConfigError("sweep.values", "must be positive integers for this axis");
        if (sweep.axis == SweepAxis::alpha && !(v > 0.0 && v <= 1.0))
            throw ConfigError("sweep.values", "alpha values must be in (0, 1]");
    }
}

std::vector<std::size_t> ExperimentConfig::resolved_layers() const {
    if (!intervention.layers.empty()) {
        auto out = intervention.layers;
        std::sort(out.begin(), out.end());
        return out;
    }
    std::vector<std::size_t> all(encoder.depth);
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
}

optim::TrainHyper ExperimentConfig::pretrain_hyper() const {
    optim::TrainHyper h;
    h.lr = pretrain.sgd.lr;
    h.weight_decay = pretrain.sgd.weight_decay;
    h.batch = pretrain.sgd.batch;
    h.epochs = pretrain.sgd.epochs;
    h.momentum = pretrain.sgd.momentum;
    h.seed = pretrain.seed;
    return h;
}

optim::TrainHyper ExperimentConfig::train_hyper(std::uint64_t run_seed) const {
    optim::TrainHyper h;
    h.lr = train.lr;
    h.weight_decay = train.weight_decay;
    h.batch = train.batch;
    h.epochs = train.epochs;
    h.momentum = train.momentum;
    h.lambda_orth = intervention.lambda_orth;
    h.seed = run_seed;
    return h;
}

reft::InterventionConfig ExperimentConfig::intervention_for(std::uint64_t run_seed) const {
    reft::InterventionConfig iv = intervention;
    iv.layers = resolved_layers();
    iv.init_seed = run_seed;
    return iv;
}

std::vector<std::size_t> evenly_spaced_layers(std::size_t depth, std::size_t count) {
    if (depth == 0 || count == 0 || count > depth)
        throw Error(ErrorKind::argument, "layer count must be in [1, depth]");
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < count; ++j) out.push_back(depth - 1 - (j * depth) / count);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<double> default_grid(SweepAxis axis, std::size_t depth) {
    switch (axis) {
        case SweepAxis::rank: return {4, 8, 16, 32, 64};
        case SweepAxis::alpha: return {1.0, 0.5, 0.1, 0.05, 0.01};
        case SweepAxis::seed: return {1991, 1992, 1993, 1994, 1995};
        case SweepAxis::layers: {
            std::vector<double> out;
            for (double c : {1.0, 3.0, 6.0, 9.0, 12.0}) {
                double n = std::floor(c * static_cast<double>(depth) / 12.0 + 0.5);
                n = std::clamp(n, 1.0, static_cast<double>(std::max<std::size_t>(depth, 1)));
                if (out.empty() || out.back() != n) out.push_back(n);
            }
            return out;
        }
    }
    return {};
}

}  // namespace corereft::config
