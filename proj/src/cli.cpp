#include "corereft/cli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <thread>
#include <tuple>

#include <CLI11.hpp>

#include "corereft/binio.hpp"
#include "corereft/continual.hpp"
#include "corereft/error.hpp"
#include "corereft/verify.hpp"

namespace corereft::cli {

namespace fs = std::filesystem;
using config::ExperimentConfig;
using config::SweepAxis;
using nlohmann::json;

namespace {

std::mutex log_mutex;

void log_line(const std::string& s) {
    std::lock_guard<std::mutex> lock(log_mutex);
    std::cout << s << std::endl;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void make_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::io, "cannot create directory " + dir + ": " + ec.message());
}

std::string join_layers(const std::vector<std::size_t>& layers, char sep) {
    std::string out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (i) out += sep;
        out += std::to_string(layers[i]);
    }
    return out;
}

std::size_t to_size(std::string_view s, const char* what) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty())
        throw Error(ErrorKind::format, std::string("bad ") + what + " '" + std::string(s) + "'");
    return v;
}

double to_double(std::string_view s, const char* what) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty())
        throw Error(ErrorKind::format, std::string("bad ") + what + " '" + std::string(s) + "'");
    return v;
}

json to_plain(const toml::Document& d) { return json::parse(d.dump()); }

// ---------------------------------------------------------------------------
// Data and encoder preparation
// ---------------------------------------------------------------------------

data::Dataset base_dataset(const ExperimentConfig& cfg) {
    const auto& d = cfg.data;
    if (d.source == "manifest") return data::load_manifest(d.base_manifest);
    return data::make_synthetic_cil(d.n_classes, d.dim, d.per_class, d.gap_strength, d.seed, d.clusters).first;
}

data::Dataset downstream_dataset(const ExperimentConfig& cfg) {
    const auto& d = cfg.data;
    if (d.source == "manifest") return data::load_manifest(d.manifest);
    if (d.scenario == data::Scenario::dil) {
        data::DilSpec spec;
        spec.clusters = d.clusters;
        spec.shift_scale = d.shift_scale;
        return data::make_synthetic_dil(d.n_domains, d.n_classes, d.per_class, d.dim, d.seed, spec);
    }
    return data::make_synthetic_cil(d.n_classes, d.dim, d.per_class, d.gap_strength, d.seed, d.clusters).second;
}

data::TaskStream make_stream(const ExperimentConfig& cfg, const data::Dataset& ds, std::uint64_t seed) {
    if (cfg.data.scenario == data::Scenario::dil) return data::split_domains(ds, seed, cfg.data.test_fraction);
    return data::split_tasks(ds, cfg.data.inc, cfg.data.scenario, seed, cfg.data.test_fraction);
}

std::size_t largest_class_count(const data::TaskStream& stream) {
    std::map<int, std::size_t> counts;
    for (const auto& t : stream.tasks)
        for (int l : t.train.labels) ++counts[l];
    std::size_t m = 0;
    for (const auto& [c, n] : counts) m = std::max(m, n);
    return m;
}

struct Pretrained {
    nn::FrozenEncoder encoder;
    json summary;
};

Pretrained pretrain_encoder(const ExperimentConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    const data::Dataset base = base_dataset(cfg);
    const auto hyper = cfg.pretrain_hyper();
    nn::PretrainResult pr = [&] {
        if (cfg.pretrain.validation_fraction > 0.0) {
            auto [train, val] = data::stratified_split(base, cfg.pretrain.validation_fraction, cfg.pretrain.seed);
            return nn::pretrain(cfg.encoder, train, hyper, &val);
        }
        return nn::pretrain(cfg.encoder, base, hyper);
    }();
    json s;
    s["num_classes"] = base.num_classes;
    s["samples"] = base.size();
    s["chance_accuracy"] = 100.0 / static_cast<double>(std::max<std::size_t>(base.num_classes, 1));
    s["train_accuracy"] = pr.train_accuracy;
    s["validation_accuracy"] = pr.validation_accuracy ? json(*pr.validation_accuracy) : json(nullptr);
    s["epoch_loss"] = pr.epoch_loss;
    s["encoder_params"] = pr.encoder.param_count();
    s["encoder_checksum"] = pr.encoder.checksum();
    s["encoder"] = cfg.encoder.to_json();
    s["wall_time_s"] = seconds_since(t0);
    return {std::move(pr.encoder), std::move(s)};
}

// Loads encoder.checkpoint, or pretrains and writes encoder.bin and
// pretrain_summary.json into the output directory.
nn::FrozenEncoder obtain_encoder(const ExperimentConfig& cfg) {
    if (!cfg.encoder_checkpoint.empty()) {
        std::string bytes;
        try {
            bytes = io::read_file(cfg.encoder_checkpoint);
        } catch (const Error& e) {
            throw ConfigError("encoder.checkpoint", e.detail());
        }
        return nn::load_encoder(bytes);
    }
    auto p = pretrain_encoder(cfg);
    make_dir(cfg.out);
    io::write_file((fs::path(cfg.out) / "encoder.bin").string(), nn::save_encoder(p.encoder));
    io::write_file((fs::path(cfg.out) / "pretrain_summary.json").string(), p.summary.dump(2) + "\n");
    return std::move(p.encoder);
}

void check_compatible(const ExperimentConfig& cfg, const nn::FrozenEncoder& enc, const data::Dataset& ds) {
    const auto& ec = enc.config();
    if (ds.dim() != ec.input_len()) {
        throw ConfigError("data.dim", "downstream rows have length " + std::to_string(ds.dim()) +
                                          " but the encoder expects " + std::to_string(ec.input_len()));
    }
    if (cfg.intervention.rank > ec.dim) throw ConfigError("intervention.rank", "must not exceed the encoder width");
    for (auto l : cfg.intervention.layers)
        if (l >= ec.depth) throw ConfigError("intervention.layers", "index beyond encoder depth");
}

std::string run_id(continual::Method m, data::Scenario s, std::size_t rank, const std::vector<std::size_t>& layers,
                   double alpha, std::uint64_t seed) {
    return std::string(continual::to_string(m)) + "-" + data::to_string(s) + "-r" + std::to_string(rank) + "-l" +
           (layers.empty() ? std::string("none") : join_layers(layers, '.')) + "-a" + format_double(alpha) + "-s" +
           std::to_string(seed);
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1); 0 for a single value.
double stddev(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string axis_value_text(SweepAxis axis, double v) {
    if (axis == SweepAxis::alpha) return format_double(v);
    return std::to_string(static_cast<std::uint64_t>(v));
}

}  // namespace

// ---------------------------------------------------------------------------
// Overrides
// ---------------------------------------------------------------------------

std::vector<std::size_t> parse_layer_list(const std::string& text) {
    std::vector<std::size_t> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const auto comma = text.find(',', start);
        const auto piece = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        try {
            out.push_back(to_size(piece, "layer index"));
        } catch (const Error&) {
            throw ConfigError("layers", "expected a comma-separated list of block indices, got '" + text + "'");
        }
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

void apply_overrides(ExperimentConfig& cfg, const Overrides& o) {
    if (o.out) cfg.out = *o.out;
    if (o.seed) cfg.seeds = {*o.seed};
    if (o.rank) cfg.intervention.rank = *o.rank;
    if (o.layers) cfg.intervention.layers = *o.layers;
    if (o.alpha) cfg.alphas = {*o.alpha};
    if (o.axis) cfg.sweep.axis = *o.axis;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw Error(ErrorKind::argument, "cannot format number");
    return std::string(buf, p);
}

std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string format_row(const ResultRow& r) {
    std::string out;
    out += csv_field(r.run_id) + ",";
    out += std::to_string(r.seed) + ",";
    out += csv_field(r.scenario) + ",";
    out += std::to_string(r.rank) + ",";
    out += csv_field(join_layers(r.layers, ',')) + ",";
    out += format_double(r.alpha) + ",";
    out += std::to_string(r.stage) + ",";
    out += format_double(r.last) + ",";
    out += format_double(r.avg) + ",";
    out += std::to_string(r.params) + ",";
    out += format_double(r.wall_time_s);
    return out;
}

std::string format_results(const std::vector<ResultRow>& rows) {
    std::map<std::string, std::vector<const ResultRow*>> runs;
    for (const auto& r : rows) runs[r.run_id].push_back(&r);
    for (auto& [id, rs] : runs) {
        std::sort(rs.begin(), rs.end(), [](auto* a, auto* b) { return a->stage < b->stage; });
        double s = 0.0;
        for (std::size_t t = 0; t < rs.size(); ++t) {
            if (rs[t]->stage != t + 1) throw Error(ErrorKind::argument, "run " + id + " has a gap in its stages");
            s += rs[t]->last;
            if (rs[t]->avg != s / static_cast<double>(t + 1))
                throw Error(ErrorKind::argument, "run " + id + ": Avg is not the running mean of Last");
        }
    }
    std::string out(results_header);
    out += "\r\n";
    for (const auto& r : rows) out += format_row(r) + "\r\n";
    return out;
}

std::vector<ResultRow> parse_results(std::string_view text) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> rec;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            rec.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\r' || c == '\n') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            if (any || !field.empty()) {
                rec.push_back(std::move(field));
                records.push_back(std::move(rec));
            }
            rec.clear();
            field.clear();
            any = false;
        } else {
            field += c;
            any = true;
        }
    }
    if (quoted) throw Error(ErrorKind::format, "unterminated quoted field in results");
    if (any || !field.empty()) {
        rec.push_back(std::move(field));
        records.push_back(std::move(rec));
    }
    if (records.empty()) throw Error(ErrorKind::format, "results file is empty");
    std::string header;
    for (std::size_t i = 0; i < records[0].size(); ++i) header += (i ? "," : "") + records[0][i];
    if (header != results_header) throw Error(ErrorKind::format, "unexpected results header '" + header + "'");

    std::vector<ResultRow> rows;
    for (std::size_t k = 1; k < records.size(); ++k) {
        const auto& f = records[k];
        if (f.size() != 11) throw Error(ErrorKind::format, "results row " + std::to_string(k) + " has " +
                                                               std::to_string(f.size()) + " fields");
        ResultRow r;
        r.run_id = f[0];
        r.seed = to_size(f[1], "seed");
        r.scenario = f[2];
        r.rank = to_size(f[3], "rank");
        if (!f[4].empty()) {
            std::size_t start = 0;
            while (true) {
                const auto comma = f[4].find(',', start);
                r.layers.push_back(to_size(std::string_view(f[4]).substr(start, comma - start), "layer"));
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
        }
        r.alpha = to_double(f[5], "alpha");
        r.stage = to_size(f[6], "stage");
        r.last = to_double(f[7], "last");
        r.avg = to_double(f[8], "avg");
        r.params = to_size(f[9], "params");
        r.wall_time_s = to_double(f[10], "wall_time_s");
        rows.push_back(std::move(r));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

PretrainOutput cmd_pretrain(const ExperimentConfig& cfg) {
    cfg.validate();
    make_dir(cfg.out);
    auto p = pretrain_encoder(cfg);
    PretrainOutput out;
    out.checkpoint_path = (fs::path(cfg.out) / "encoder.bin").string();
    io::write_file(out.checkpoint_path, nn::save_encoder(p.encoder));
    io::write_file((fs::path(cfg.out) / "pretrain_summary.json").string(), p.summary.dump(2) + "\n");
    out.summary = std::move(p.summary);
    log_line("pretrained encoder: " + std::to_string(p.encoder.param_count()) + " parameters, validation accuracy " +
             (out.summary["validation_accuracy"].is_null()
                  ? std::string("n/a")
                  : format_double(out.summary["validation_accuracy"].get<double>())) +
             "%, wrote " + out.checkpoint_path);
    return out;
}

RunOutput cmd_run(const ExperimentConfig& cfg) {
    cfg.validate();
    make_dir(cfg.out);
    make_dir((fs::path(cfg.out) / "checkpoints").string());

    const nn::FrozenEncoder encoder = obtain_encoder(cfg);
    const data::Dataset downstream = downstream_dataset(cfg);
    check_compatible(cfg, encoder, downstream);

    RunOutput out;
    json runs = json::array();
    std::string per_task = "run_id,stage,task,accuracy\r\n";
    struct GroupKey {
        std::string method;
        double alpha;
        std::size_t rank;
        std::vector<std::size_t> layers;
        auto operator<=>(const GroupKey&) const = default;
    };
    std::map<GroupKey, std::pair<std::vector<double>, std::vector<double>>> groups;

    for (const auto seed : cfg.seeds) {
        for (const double alpha : cfg.alphas) {
            for (const auto method : cfg.methods) {
                const auto t0 = std::chrono::steady_clock::now();
                data::TaskStream stream = make_stream(cfg, downstream, seed);
                std::size_t m_used = 0;
                if (alpha < 1.0) {
                    m_used = cfg.data.imbalance_m ? cfg.data.imbalance_m : largest_class_count(stream);
                    data::apply_imbalance(stream, data::ImbalanceSpec{alpha, m_used}, seed);
                }
                const bool core = method == continual::Method::core;
                reft::InterventionConfig ic = cfg.intervention_for(seed);
                if (cfg.intervention.layers.empty()) {
                    ic.layers.clear();
                    for (std::size_t l = 0; l < encoder.config().depth; ++l) ic.layers.push_back(l);
                }
                continual::RunOptions opts;
                opts.method = method;
                opts.similarity = cfg.similarity;
                opts.kmeans_k = cfg.kmeans_k;
                opts.kmeans_seed = seed;
                const auto res = at_step(0, [&] {
                    return continual::run_scenario(encoder, ic, stream, cfg.train_hyper(seed), opts);
                });
                const double wall = seconds_since(t0);
                const std::size_t rank = core ? ic.rank : 0;
                const auto layers = core ? ic.layers : std::vector<std::size_t>{};
                const std::string id = run_id(method, cfg.data.scenario, rank, layers, alpha, seed);
                if (!res.metrics.consistent()) throw Error(ErrorKind::argument, "inconsistent metrics in run " + id);

                for (std::size_t t = 0; t < res.metrics.last.size(); ++t) {
                    ResultRow r;
                    r.run_id = id;
                    r.seed = seed;
                    r.scenario = data::to_string(cfg.data.scenario);
                    r.rank = rank;
                    r.layers = layers;
                    r.alpha = alpha;
                    r.stage = t + 1;
                    r.last = res.metrics.last[t];
                    r.avg = res.metrics.avg[t];
                    r.params = res.trainable_params;
                    r.wall_time_s = wall;
                    out.rows.push_back(std::move(r));
                    for (std::size_t i = 0; i < res.metrics.per_task[t].size(); ++i) {
                        per_task += csv_field(id) + "," + std::to_string(t + 1) + "," + std::to_string(i + 1) + "," +
                                    format_double(res.metrics.per_task[t][i]) + "\r\n";
                    }
                }

                json meta;
                meta["run_id"] = id;
                meta["method"] = continual::to_string(method);
                meta["seed"] = seed;
                meta["alpha"] = alpha;
                meta["rank"] = rank;
                meta["layers"] = layers;
                meta["positions"] = reft::to_string(ic.positions);
                meta["lambda_orth"] = ic.lambda_orth;
                meta["imbalance_m"] = m_used;
                const std::string ckpt = (fs::path(cfg.out) / "checkpoints" / (id + ".bin")).string();
                io::write_file(ckpt, continual::save_run(encoder, res, meta));

                json run = meta;
                run["scenario"] = data::to_string(cfg.data.scenario);
                run["tasks"] = res.metrics.last.size();
                run["final_last"] = res.metrics.last.back();
                run["final_avg"] = res.metrics.avg.back();
                run["last"] = res.metrics.last;
                run["avg"] = res.metrics.avg;
                run["params"] = res.trainable_params;
                run["checkpoint"] = ckpt;
                run["wall_time_s"] = wall;
                if (core) {
                    run["orth_start"] = res.train_log.orth_start;
                    run["orth_end"] = res.train_log.orth_end;
                }
                if (res.routing_accuracy) run["routing_accuracy"] = *res.routing_accuracy;
                runs.push_back(run);

                auto& g = groups[{continual::to_string(method), alpha, rank, layers}];
                g.first.push_back(res.metrics.avg.back());
                g.second.push_back(res.metrics.last.back());
                log_line("run " + id + ": avg " + format_double(res.metrics.avg.back()) + " last " +
                         format_double(res.metrics.last.back()) + " (" + format_double(std::round(wall * 10) / 10) +
                         " s)");
            }
        }
    }

    io::write_file((fs::path(cfg.out) / "results.csv").string(), format_results(out.rows));
    io::write_file((fs::path(cfg.out) / "per_task.csv").string(), per_task);

    json gs = json::array();
    for (const auto& [k, v] : groups) {
        json g;
        g["method"] = k.method;
        g["alpha"] = k.alpha;
        g["rank"] = k.rank;
        g["layers"] = k.layers;
        g["runs"] = v.first.size();
        g["avg_mean"] = mean(v.first);
        g["avg_stddev"] = stddev(v.first);
        g["last_mean"] = mean(v.second);
        g["last_stddev"] = stddev(v.second);
        gs.push_back(g);
    }
    out.summary["config"] = to_plain(config::to_toml(cfg));
    out.summary["encoder"] = {{"params", encoder.param_count()},
                              {"checksum", encoder.checksum()},
                              {"config", encoder.config().to_json()}};
    out.summary["runs"] = runs;
    out.summary["groups"] = gs;
    io::write_file((fs::path(cfg.out) / "summary.json").string(), out.summary.dump(2) + "\n");
    return out;
}

bool SweepOutput::all_ok() const {
    return std::all_of(cells.begin(), cells.end(), [](const auto& c) { return c.ok; });
}

std::size_t sweep_threads() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("CORE_REFT_THREADS")) {
        try {
            n = to_size(env, "thread count");
        } catch (const Error&) {
            throw ConfigError("CORE_REFT_THREADS", "expected a positive integer, got '" + std::string(env) + "'");
        }
        if (n == 0) throw ConfigError("CORE_REFT_THREADS", "must be >= 1");
    }
    return n;
}

SweepOutput cmd_sweep(const ExperimentConfig& cfg) {
    cfg.validate();
    make_dir(cfg.out);
    const std::size_t threads = sweep_threads();

    ExperimentConfig shared = cfg;
    if (shared.encoder_checkpoint.empty()) {
        auto p = pretrain_encoder(cfg);
        shared.encoder_checkpoint = (fs::path(cfg.out) / "encoder.bin").string();
        io::write_file(shared.encoder_checkpoint, nn::save_encoder(p.encoder));
        io::write_file((fs::path(cfg.out) / "pretrain_summary.json").string(), p.summary.dump(2) + "\n");
    }
    const std::size_t depth = nn::load_encoder(io::read_file(shared.encoder_checkpoint)).config().depth;
    const SweepAxis axis = cfg.sweep.axis;
    const auto values = cfg.sweep.values.empty() ? config::default_grid(axis, depth) : cfg.sweep.values;
    if (values.empty()) throw ConfigError("sweep.values", "no values to sweep");

    SweepOutput out;
    out.cells.resize(values.size());
    std::vector<RunOutput> results(values.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < values.size(); i = next++) {
            SweepCell& cell = out.cells[i];
            cell.value = values[i];
            cell.out_dir = (fs::path(cfg.out) / (std::string(config::to_string(axis)) + "-" +
                                                 axis_value_text(axis, values[i])))
                               .string();
            try {
                ExperimentConfig c = shared;
                c.out = cell.out_dir;
                const auto n = static_cast<std::size_t>(values[i]);
                switch (axis) {
                    case SweepAxis::rank: c.intervention.rank = n; break;
                    case SweepAxis::layers: c.intervention.layers = config::evenly_spaced_layers(depth, n); break;
                    case SweepAxis::alpha: c.alphas = {values[i]}; break;
                    case SweepAxis::seed: c.seeds = {static_cast<std::uint64_t>(values[i])}; break;
                }
                results[i] = cmd_run(c);
                cell.ok = true;
                cell.message = "ok";
            } catch (const std::exception& e) {
                cell.ok = false;
                cell.message = e.what();
                log_line(std::string("sweep cell ") + config::to_string(axis) + "=" + axis_value_text(axis, values[i]) +
                         " failed: " + e.what());
            }
        }
    };
    std::vector<std::thread> pool;
    const std::size_t n_threads = std::min(threads, values.size());
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();

    std::vector<std::pair<double, ResultRow>> tagged;
    for (std::size_t i = 0; i < values.size(); ++i)
        for (const auto& r : results[i].rows) tagged.emplace_back(values[i], r);
    std::sort(tagged.begin(), tagged.end(), [](const auto& a, const auto& b) {
        return std::tie(a.first, a.second.seed, a.second.run_id, a.second.stage) <
               std::tie(b.first, b.second.seed, b.second.run_id, b.second.stage);
    });
    for (auto& [v, r] : tagged) out.rows.push_back(std::move(r));

    std::string status = "axis,value,status,message,out_dir\r\n";
    json cells = json::array();
    for (std::size_t i = 0; i < out.cells.size(); ++i) {
        const auto& c = out.cells[i];
        status += std::string(config::to_string(axis)) + "," + axis_value_text(axis, c.value) + "," +
                  (c.ok ? "ok" : "failed") + "," + csv_field(c.message) + "," + csv_field(c.out_dir) + "\r\n";
        json j;
        j["value"] = c.value;
        j["status"] = c.ok ? "ok" : "failed";
        j["message"] = c.message;
        j["out_dir"] = c.out_dir;
        j["groups"] = c.ok ? results[i].summary["groups"] : json::array();
        cells.push_back(j);
    }
    io::write_file((fs::path(cfg.out) / "results.csv").string(), format_results(out.rows));
    io::write_file((fs::path(cfg.out) / "sweep_status.csv").string(), status);
    json summary;
    summary["axis"] = config::to_string(axis);
    summary["values"] = values;
    summary["threads"] = n_threads;
    summary["cells"] = cells;
    io::write_file((fs::path(cfg.out) / "summary.json").string(), summary.dump(2) + "\n");
    return out;
}

int cmd_verify(const std::string& out_dir, bool inject_gradcheck_fault) {
    verify::VerifyOptions opts;
    opts.inject_gradcheck_fault = inject_gradcheck_fault;
    const auto report = verify::run_property_suites(opts);
    const std::string text = verify::format_report(report, opts);
    make_dir(out_dir);
    io::write_file((fs::path(out_dir) / "report.txt").string(), text);
    std::cout << text;
    return report.passed() ? exit_ok : exit_verify;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

int run_main(int argc, char** argv) {
    CLI::App app{"Continual learning with low-rank representation edits on a frozen encoder", "core-reft"};
    app.require_subcommand(1);

    std::string config_path, out_dir, layers_text, axis_text, fault;
    std::uint64_t seed = 0;
    std::size_t rank = 0;
    double alpha = 0.0;

    auto add_run_options = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "TOML experiment config")->required();
        sub->add_option("--out", out_dir, "output directory (overrides `out`)");
        sub->add_option("--seed", seed, "run a single seed (overrides `seeds`)");
        sub->add_option("--rank", rank, "intervention rank");
        sub->add_option("--layers", layers_text, "comma-separated block indices, e.g. 0,1,2");
        sub->add_option("--alpha", alpha, "single imbalance factor (overrides `alphas`)");
    };
    auto* pretrain = app.add_subcommand("pretrain", "pretrain the encoder and write a checkpoint");
    add_run_options(pretrain);
    auto* run = app.add_subcommand("run", "run every (seed, alpha, method) of a config");
    add_run_options(run);
    auto* sweep = app.add_subcommand("sweep", "repeat `run` over one axis");
    add_run_options(sweep);
    sweep->add_option("--axis", axis_text, "rank, layers, alpha or seed (overrides sweep.axis)");
    auto* verify_cmd = app.add_subcommand("verify", "run the property suites and write report.txt");
    verify_cmd->add_option("--out", out_dir, "directory for report.txt")->default_val(".");
    verify_cmd->add_option("--inject-fault", fault)->group("")->check(CLI::IsMember({"gradcheck"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_config;
    }

    try {
        if (verify_cmd->parsed()) return cmd_verify(out_dir.empty() ? "." : out_dir, fault == "gradcheck");

        CLI::App* active = app.get_subcommands().front();
        ExperimentConfig cfg = config::load_config(config_path);
        Overrides o;
        if (active->count("--out")) o.out = out_dir;
        if (active->count("--seed")) o.seed = seed;
        if (active->count("--rank")) o.rank = rank;
        if (active->count("--layers")) o.layers = parse_layer_list(layers_text);
        if (active->count("--alpha")) o.alpha = alpha;
        if (active == sweep && sweep->count("--axis")) o.axis = config::sweep_axis_from_string(axis_text);
        apply_overrides(cfg, o);
        cfg.validate();

        if (active == pretrain) {
            cmd_pretrain(cfg);
            return exit_ok;
        }
        if (active == run) {
            cmd_run(cfg);
            return exit_ok;
        }
        const auto res = cmd_sweep(cfg);
        return res.all_ok() ? exit_ok : exit_runtime;
    } catch (const ConfigError& e) {
        std::cerr << "core-reft: " << e.what() << "\n";
        return exit_config;
    } catch (const std::exception& e) {
        std::cerr << "core-reft: " << e.what() << "\n";
        return exit_runtime;
    }
}

}  // namespace corereft::cli
