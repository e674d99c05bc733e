#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dfba/experiment.hpp"
#include "dfba/report.hpp"
#include "support/fixtures.hpp"

using namespace dfba;

namespace {

// Small enough to train in well under a second.
const char* kSmallConfig = R"(# tiny sweep
seed = 4
data.source = synthetic
data.classes = 4
data.train_per_class = 40
data.test_per_class = 15
data.shape = 1x14x14
data.seed = 9
arch = flatten,dense:12,relu,dense:4
train.epochs = 4
train.lr = 0.05
attack.lambda = 0.1
attack.trigger = 2x2
defense = fine-prune fraction=0.25
defense = lipschitz-prune u=1
grid.lambda = 0.01, 0.1, 1
grid.trigger = 2x2,3x3
)";

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("config parses, round-trips through canonical text and hashes stably")
{
    const auto c = ExperimentConfig::parse(kSmallConfig);
    CHECK(c.seed == 4);
    CHECK(c.data.image_shape == Shape{1, 14, 14});
    CHECK(c.grid_lambda.size() == 3);
    CHECK(c.grid_trigger.size() == 2);
    CHECK(c.defenses.size() == 2);
    CHECK(c.defenses[0].params.at("fraction") == "0.25");
    CHECK_FALSE(c.attack.gamma.has_value());
    const auto again = ExperimentConfig::parse(c.canonical());
    CHECK(again.canonical() == c.canonical());
    CHECK(again.hash() == c.hash());

    auto moved = c;
    moved.output = "elsewhere";
    moved.workers = 3;
    CHECK(moved.hash() == c.hash());
    auto other = c;
    other.attack.lambda = 0.2f;
    CHECK(other.hash() != c.hash());
    CHECK(c.hash_hex().size() == 16);
}

TEST_CASE("fnv1a matches published vectors")
{
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("config errors name the line")
{
    CHECK_THROWS_WITH_AS(ExperimentConfig::parse("seed = 1\nbogus = 2\n"), doctest::Contains("line 2"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("attack.lambda = -1\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("grid.lambda = 0.1, 0\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("attack.trigger = 4\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("no equals sign\n"), ConfigError);
    CHECK_THROWS_AS(build_architecture("dense:3", {1, 4, 4}, 3, 0), ConfigError);
    CHECK_THROWS_AS(build_architecture("flatten,dense:3,relu,dense:5", {1, 4, 4}, 3, 0), ConfigError);
}

TEST_CASE("layer list builds the expected network")
{
    const Model m = build_architecture("conv:3:3,relu,pool,flatten,dense:5,relu,dense:4", {1, 10, 10}, 4, 2);
    REQUIRE(m.layers.size() == 7);
    CHECK(m.output_shapes()[2] == Shape{3, 4, 4});
    CHECK(std::get<Dense>(m.layers[4]).in_dim == 48);
    CHECK(build_architecture("fcn", {1, 28, 28}, 10, 0).parametric_layers().size() == 2);
}

TEST_CASE("unknown defense and parameters are rejected")
{
    const auto& d = fixture::digits();
    const DataSplit split{d.train, d.test};
    CHECK_THROWS_AS(run_defense(fixture::fcn(), parse_defense("strip"), split, Probe{&d.test}, nullptr, 0),
                    ConfigError);
    CHECK_THROWS_AS(run_defense(fixture::fcn(), parse_defense("lipschitz-prune k=3"), split, Probe{&d.test}, nullptr,
                                0),
                    ConfigError);
    const auto r = run_defense(fixture::fcn(), parse_defense("lipschitz-prune u=2"), split, Probe{&d.test}, nullptr, 0);
    CHECK(r.params.at("u") == "2");
}

TEST_CASE("ablation report is byte-identical across runs and worker counts")
{
    auto cfg = ExperimentConfig::parse(kSmallConfig);
    const auto a = run_ablation(cfg);
    REQUIRE(a.runs.size() == 5);
    CHECK(a.runs[0].run_id == "lambda=0.01");
    CHECK(a.runs[4].run_id == "trigger=3x3");
    cfg.workers = 3;
    const auto b = run_ablation(cfg);
    const auto csv_a = make_report(a, false).to_csv();
    CHECK(csv_a == make_report(b, false).to_csv());
    CHECK(csv_a.find("# config " + cfg.hash_hex()) != std::string::npos);
    // one attack row plus one row per defense
    CHECK(make_report(a, false).rows.size() == 15);
    for (const auto& run : a.runs) CHECK(run.asr == 1.0);
}

TEST_CASE("csv parse, merge and summary")
{
    const auto cfg = ExperimentConfig::parse(kSmallConfig);
    const auto rep = make_report(run_ablation(cfg), true);
    const auto back = CsvReport::parse(rep.to_csv());
    CHECK(back.to_csv() == rep.to_csv());
    CHECK(back.rows[0].surgery_ms.has_value());
    CHECK_FALSE(back.rows[0].acc_after.has_value());
    CHECK(back.rows[1].acc_after.has_value());

    CsvReport other = back;
    other.config_hashes = {"feedfacefeedface"};
    const auto merged = merge_reports({back, other, back});
    CHECK(merged.rows.size() == 3 * back.rows.size());
    CHECK(merged.config_hashes == std::vector<std::string>{cfg.hash_hex(), "feedfacefeedface"});
    const auto text = summarize(merged);
    CHECK(text.find("lowest ASR 100.00%") != std::string::npos);

    CHECK_THROWS(CsvReport::parse("run_id,seed\n"));
    CHECK_THROWS(CsvReport::parse("# dfba-report/9\n"));
}

TEST_CASE("write_outputs lays out the run directory")
{
    auto cfg = ExperimentConfig::parse(kSmallConfig);
    cfg.grid_lambda.clear();
    cfg.grid_trigger.clear();
    cfg.output = std::filesystem::temp_directory_path() / "dfba_harness_test";
    std::filesystem::remove_all(cfg.output);
    const auto r = run_experiment(cfg);
    REQUIRE(r.runs.size() == 1);
    write_outputs(r, cfg);
    CHECK(std::filesystem::exists(cfg.output / "results.csv"));
    CHECK(std::filesystem::exists(cfg.output / "summary.txt"));
    const auto back = ExperimentConfig::parse(slurp(cfg.output / "config.txt"));
    CHECK(back.hash() == cfg.hash());
    const auto fp = DefenseReport::from_text(slurp(cfg.output / "main.fine-prune.txt"));
    CHECK(fp.params.at("config_hash") == cfg.hash_hex());
    CHECK(fp.pruned_units.size() == 3);
    std::filesystem::remove_all(cfg.output);
}
