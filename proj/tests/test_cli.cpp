#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "corereft/binio.hpp"
#include "corereft/cli.hpp"
#include "corereft/config.hpp"
#include "corereft/error.hpp"
#include "corereft/rng.hpp"
#include "corereft/toml.hpp"

using namespace corereft;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("corereft_test_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "core-reft");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    return cli::run_main(static_cast<int>(argv.size()), argv.data());
}

std::string tiny_config_text(const fs::path& out) {
    return "out = \"" + out.generic_string() + "\"\n" + R"(seeds = [7]
alphas = [1.0]
methods = ["frozen", "core"]

[data]
scenario = "cil"
n_classes = 6
dim = 16
per_class = 20
subspace = 4
inc = 2

[encoder]
depth = 1
dim = 16
heads = 2
tokens = 5
input_dim = 16

[pretrain]
epochs = 2
batch = 16

[intervention]
rank = 2
layers = [0]

[train]
epochs = 2
batch = 16
)";
}

config::ExperimentConfig tiny_config(const fs::path& out) { return config::parse_config(tiny_config_text(out)); }

std::string strip_wall_time(const std::string& csv) {
    std::istringstream in(csv);
    std::string line, out;
    while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
    return out;
}

}  // namespace

// ---- config ------------------------------------------------------------------

TEST_CASE("toml subset parses the documented forms") {
    const auto doc = toml::parse(R"(# comment
a = 1
b = -2.5e-3   # trailing comment
c = "x \"y\" \\ z"
d = 'lit\eral'
e = [1, 2,
     3,]
f = true
[t]
g = ["p", "q"]
[t.u]
h = 0.5
)");
    CHECK(doc["a"] == 1);
    CHECK(doc["b"].get<double>() == -2.5e-3);
    CHECK(doc["c"] == "x \"y\" \\ z");
    CHECK(doc["d"] == "lit\\eral");
    CHECK(doc["e"] == nlohmann::json::array({1, 2, 3}));
    CHECK(doc["f"] == true);
    CHECK(doc["t"]["g"][1] == "q");
    CHECK(doc["t"]["u"]["h"].get<double>() == 0.5);
    CHECK(toml::parse(toml::dump(doc)) == doc);

    CHECK_THROWS_AS(toml::parse("a = 1\na = 2\n"), ConfigError);
    CHECK_THROWS_AS(toml::parse("[t]\n[t]\n"), ConfigError);
    CHECK_THROWS_AS(toml::parse("a = \n"), ConfigError);
    CHECK_THROWS_AS(toml::parse("a = [1, 2\n"), ConfigError);
    try {
        toml::parse("a = 1\nb = @\n");
        FAIL("expected a parse error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("config round trips through toml for random configs") {
    SeededRng rng(1);
    for (int i = 0; i < 50; ++i) {
        config::ExperimentConfig cfg;
        cfg.out = "out dir/\"q\"" + std::to_string(i);
        cfg.seeds = {rng.next_u64() >> 12, 1993};
        cfg.alphas = {1.0, rng.uniform(0.001, 1.0)};
        cfg.methods = {continual::Method::frozen, continual::Method::finetune};
        cfg.data.scenario = static_cast<data::Scenario>(rng.below(3));
        cfg.data.gap_strength = rng.uniform(0.0, 3.0);
        cfg.data.clusters.noise = rng.uniform(0.01, 2.0);
        cfg.data.seed = rng.below(100000);
        cfg.encoder.depth = 1 + rng.below(6);
        cfg.encoder.mlp_ratio = rng.uniform(1.0, 4.0);
        cfg.pretrain.sgd.lr = rng.uniform(1e-4, 1.0);
        cfg.intervention.rank = 1 + rng.below(8);
        cfg.intervention.layers = {0};
        cfg.intervention.positions = rng.below(2) ? reft::Positions::cls : reft::Positions::all;
        cfg.intervention.lambda_orth = rng.uniform(0.0, 2.0);
        cfg.train.weight_decay = rng.uniform(0.0, 1e-2);
        cfg.similarity = rng.below(2) ? continual::Similarity::dot : continual::Similarity::cosine;
        cfg.kmeans_k = 1 + rng.below(9);
        cfg.sweep.axis = static_cast<config::SweepAxis>(rng.below(4));
        cfg.sweep.values = cfg.sweep.axis == config::SweepAxis::alpha
                               ? std::vector<double>{rng.uniform(0.01, 1.0), 1.0}
                               : std::vector<double>{static_cast<double>(1 + rng.below(4))};
        const auto back = config::parse_config(config::serialize_config(cfg));
        CHECK(back == cfg);
    }
    CHECK(config::parse_config("") == config::ExperimentConfig{});
}

TEST_CASE("unknown or mistyped keys are config errors naming the key") {
    try {
        config::parse_config("[train]\nlearning_rate = 0.1\n");
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(e.key() == "train.learning_rate");
    }
    try {
        config::parse_config("[data]\nn_classes = \"many\"\n");
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(e.key() == "data.n_classes");
    }
    CHECK_THROWS_AS(config::parse_config("methods = [\"prompt\"]\n"), ConfigError);
    try {
        config::parse_config("[intervention]\nlayers = [0, 9]\n");
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(e.key() == "intervention.layers");
    }
}

TEST_CASE("evenly spaced layers end at the final block") {
    CHECK(config::evenly_spaced_layers(12, 12) == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
    CHECK(config::evenly_spaced_layers(12, 1) == std::vector<std::size_t>{11});
    CHECK(config::evenly_spaced_layers(12, 3) == std::vector<std::size_t>{3, 7, 11});
    CHECK(config::evenly_spaced_layers(12, 6) == std::vector<std::size_t>{1, 3, 5, 7, 9, 11});
    CHECK(config::evenly_spaced_layers(4, 2) == std::vector<std::size_t>{1, 3});
    for (std::size_t depth = 1; depth <= 16; ++depth) {
        for (std::size_t count = 1; count <= depth; ++count) {
            const auto l = config::evenly_spaced_layers(depth, count);
            CHECK(l.size() == count);
            CHECK(l.back() == depth - 1);
            CHECK(std::is_sorted(l.begin(), l.end()));
            CHECK(std::adjacent_find(l.begin(), l.end()) == l.end());
        }
    }
}

TEST_CASE("default sweep grids") {
    using config::SweepAxis;
    CHECK(config::default_grid(SweepAxis::rank, 4) == std::vector<double>{4, 8, 16, 32, 64});
    CHECK(config::default_grid(SweepAxis::alpha, 4) == std::vector<double>{1, 0.5, 0.1, 0.05, 0.01});
    CHECK(config::default_grid(SweepAxis::seed, 4) == std::vector<double>{1991, 1992, 1993, 1994, 1995});
    CHECK(config::default_grid(SweepAxis::layers, 12) == std::vector<double>{1, 3, 6, 9, 12});
    CHECK(config::default_grid(SweepAxis::layers, 4) == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("layer lists and overrides") {
    CHECK(cli::parse_layer_list("0,1,3") == std::vector<std::size_t>{0, 1, 3});
    CHECK(cli::parse_layer_list("2") == std::vector<std::size_t>{2});
    CHECK_THROWS_AS(cli::parse_layer_list("0,,1"), ConfigError);
    CHECK_THROWS_AS(cli::parse_layer_list("a"), ConfigError);
    config::ExperimentConfig cfg;
    cli::Overrides o;
    o.out = "elsewhere";
    o.seed = 5;
    o.rank = 3;
    o.layers = std::vector<std::size_t>{1};
    o.alpha = 0.1;
    cli::apply_overrides(cfg, o);
    CHECK(cfg.out == "elsewhere");
    CHECK(cfg.seeds == std::vector<std::uint64_t>{5});
    CHECK(cfg.intervention.rank == 3);
    CHECK(cfg.intervention.layers == std::vector<std::size_t>{1});
    CHECK(cfg.alphas == std::vector<double>{0.1});
}

// ---- results.csv -----------------------------------------------------------------

TEST_CASE("csv quoting") {
    CHECK(cli::csv_field("plain") == "plain");
    CHECK(cli::csv_field("a,b") == "\"a,b\"");
    CHECK(cli::csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
    CHECK(cli::csv_field("line\nbreak") == "\"line\nbreak\"");
}

TEST_CASE("results rows round trip exactly") {
    SeededRng rng(2);
    std::vector<cli::ResultRow> rows;
    for (int run = 0; run < 4; ++run) {
        double sum = 0.0;
        for (std::size_t t = 1; t <= 5; ++t) {
            cli::ResultRow r;
            r.run_id = "core-cil-r8-l0.1-a" + std::to_string(run) + ",\"odd\"";
            r.seed = rng.next_u64();
            r.scenario = "cil";
            r.rank = 8;
            r.layers = {0, 1, 2, 3};
            r.alpha = rng.uniform(0.0, 1.0);
            r.stage = t;
            r.last = rng.uniform(0.0, 100.0);
            sum += r.last;
            r.avg = sum / static_cast<double>(t);
            r.params = 1032;
            r.wall_time_s = rng.uniform(0.0, 10.0);
            rows.push_back(r);
        }
    }
    const std::string text = cli::format_results(rows);
    CHECK(text.rfind(std::string(cli::results_header) + "\r\n", 0) == 0);
    CHECK(text.find("\"0,1,2,3\"") != std::string::npos);
    CHECK(cli::parse_results(text) == rows);

    rows[2].avg += 1e-9;
    CHECK_THROWS_AS(cli::format_results(rows), Error);
}

TEST_CASE("format_double reads back exactly") {
    SeededRng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const double v = rng.normal() * std::pow(10.0, static_cast<double>(rng.below(20)) - 10.0);
        CHECK(std::stod(cli::format_double(v)) == v);
    }
    CHECK(cli::format_double(70.0) == "70");
    CHECK(cli::format_double(0.1) == "0.1");
}

// ---- commands ------------------------------------------------------------------

TEST_CASE("command line exit codes") {
    const auto dir = scratch_dir("exit");
    {
        std::ofstream(dir / "bad.toml") << "[train]\nlearning_rate = 0.1\n";
        std::ofstream(dir / "broken.toml") << "a = \n";
    }
    CHECK(invoke({}) == cli::exit_config);
    CHECK(invoke({"run"}) == cli::exit_config);
    CHECK(invoke({"frobnicate"}) == cli::exit_config);
    CHECK(invoke({"run", "--config", (dir / "bad.toml").string()}) == cli::exit_config);
    CHECK(invoke({"run", "--config", (dir / "broken.toml").string()}) == cli::exit_config);
    CHECK(invoke({"run", "--config", (dir / "missing.toml").string()}) != cli::exit_ok);
    CHECK(invoke({"run", "--config", (dir / "bad.toml").string(), "--layers", "x"}) == cli::exit_config);
}

TEST_CASE("tiny run is deterministic and self-consistent") {
    const auto dir = scratch_dir("run");
    const auto cfg_path = dir / "tiny.toml";
    std::ofstream(cfg_path) << tiny_config_text(dir / "a");

    REQUIRE(invoke({"run", "--config", cfg_path.string()}) == cli::exit_ok);
    REQUIRE(invoke({"run", "--config", cfg_path.string(), "--out", (dir / "b").string()}) == cli::exit_ok);
    const std::string a = io::read_file((dir / "a" / "results.csv").string());
    const std::string b = io::read_file((dir / "b" / "results.csv").string());
    CHECK(strip_wall_time(a) == strip_wall_time(b));
    CHECK(io::read_file((dir / "a" / "encoder.bin").string()) == io::read_file((dir / "b" / "encoder.bin").string()));

    const auto rows = cli::parse_results(a);
    REQUIRE(rows.size() == 6);
    CHECK(rows[0].run_id == "frozen-cil-r0-lnone-a1-s7");
    CHECK(rows[3].run_id == "core-cil-r2-l0-a1-s7");
    CHECK(rows[3].params == 2 * 2 * 16 + 2);
    CHECK(rows[0].params == 0);
    for (const auto& r : rows) CHECK(r.seed == 7);

    const auto summary = nlohmann::json::parse(io::read_file((dir / "a" / "summary.json").string()));
    CHECK(summary["runs"].size() == 2);
    CHECK(summary["config"]["seeds"][0] == 7);
    CHECK(fs::exists(dir / "a" / "per_task.csv"));
    CHECK(fs::exists(dir / "a" / "checkpoints" / "core-cil-r2-l0-a1-s7.bin"));

    REQUIRE(invoke({"run", "--config", cfg_path.string(), "--out", (dir / "c").string(), "--seed", "8"}) ==
            cli::exit_ok);
    CHECK(strip_wall_time(io::read_file((dir / "c" / "results.csv").string())) != strip_wall_time(a));
}

TEST_CASE("pretrain writes a reusable checkpoint") {
    const auto dir = scratch_dir("pretrain");
    auto cfg = tiny_config(dir / "p");
    const auto out = cli::cmd_pretrain(cfg);
    REQUIRE(fs::exists(out.checkpoint_path));
    CHECK(out.summary.contains("epoch_loss"));
    cfg.encoder_checkpoint = out.checkpoint_path;
    cfg.out = (dir / "r").string();
    cfg.methods = {continual::Method::frozen};
    const auto run = cli::cmd_run(cfg);
    CHECK(run.rows.size() == 3);
    CHECK_FALSE(fs::exists(dir / "r" / "encoder.bin"));
}

TEST_CASE("tiny sweep over rank") {
    const auto dir = scratch_dir("sweep");
    auto cfg = tiny_config(dir / "s");
    cfg.methods = {continual::Method::core};
    cfg.sweep.axis = config::SweepAxis::rank;
    cfg.sweep.values = {1, 2, 64};
    const auto res = cli::cmd_sweep(cfg);
    REQUIRE(res.cells.size() == 3);
    CHECK(res.cells[0].ok);
    CHECK(res.cells[1].ok);
    CHECK_FALSE(res.cells[2].ok);  // rank above the encoder width
    CHECK_FALSE(res.all_ok());
    CHECK(res.rows.size() == 6);
    CHECK(res.rows.front().rank == 1);
    CHECK(res.rows.back().rank == 2);
    CHECK(fs::exists(dir / "s" / "sweep_status.csv"));
    CHECK(cli::parse_results(io::read_file((dir / "s" / "results.csv").string())) == res.rows);
}

TEST_CASE("verify reports an injected gradient fault") {
    const auto dir = scratch_dir("verify");
    CHECK(invoke({"verify", "--out", dir.string(), "--inject-fault", "gradcheck"}) == cli::exit_verify);
    const std::string report = io::read_file((dir / "report.txt").string());
    CHECK(report.find("FAIL") != std::string::npos);
    CHECK(invoke({"verify", "--inject-fault", "other"}) == cli::exit_config);
}
