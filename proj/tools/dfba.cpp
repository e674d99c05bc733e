#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dfba/attack.hpp"
#include "dfba/checks.hpp"
#include "dfba/dataset.hpp"
#include "dfba/defenses.hpp"
#include "dfba/experiment.hpp"
#include "dfba/metrics.hpp"
#include "dfba/montecarlo.hpp"
#include "dfba/report.hpp"
#include "dfba/serialize.hpp"
#include "dfba/trainer.hpp"

using namespace dfba;
using json = nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

Shape parse_dims(const std::string& s)
{
    Shape out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const auto next = std::min(s.find('x', pos), s.size());
        std::size_t v = 0;
        const auto [p, ec] = std::from_chars(s.data() + pos, s.data() + next, v);
        if (ec != std::errc{} || p != s.data() + next || v == 0) throw UsageError("bad dimensions '" + s + "'");
        out.push_back(v);
        pos = next + 1;
    }
    return out;
}

struct DataOpts {
    std::string kind = "synthetic";
    std::string idx_dir;
    std::size_t train_per_class = 300;
    std::size_t test_per_class = 100;
    std::string shape = "1x28x28";
    std::uint64_t seed = 11;

    void add(CLI::App* app)
    {
        app->add_option("--data", kind, "synthetic or idx")->check(CLI::IsMember({"synthetic", "idx"}));
        app->add_option("--idx-dir", idx_dir, "directory holding the four MNIST-style IDX files");
        app->add_option("--train-per-class", train_per_class);
        app->add_option("--test-per-class", test_per_class);
        app->add_option("--shape", shape, "synthetic image shape, CxHxW");
        app->add_option("--data-seed", seed);
    }

    DataSplit load() const
    {
        DataSource src;
        src.kind = kind;
        src.train_per_class = train_per_class;
        src.test_per_class = test_per_class;
        src.image_shape = parse_dims(shape);
        src.seed = seed;
        if (kind == "idx") {
            if (idx_dir.empty()) throw UsageError("--data idx needs --idx-dir");
            const std::filesystem::path d = idx_dir;
            src.train_images = d / "train-images-idx3-ubyte";
            src.train_labels = d / "train-labels-idx1-ubyte";
            src.test_images = d / "t10k-images-idx3-ubyte";
            src.test_labels = d / "t10k-labels-idx1-ubyte";
        }
        return load_data(src);
    }
};

AttackRecord record_of(const Model& m)
{
    auto r = load_attack_record(m);
    if (!r) throw UsageError("model carries no attack record; run inject first");
    return *r;
}

json census_json(const Census& c)
{
    return {{"clean_activations", c.clean_activations},
            {"clean_total", c.clean_total},
            {"backdoored_activations", c.backdoored_activations},
            {"backdoored_total", c.backdoored_total}};
}

json oracle_json(const OracleResult& r)
{
    return {{"consistent", r.consistent},
            {"checked", r.checked},
            {"mismatches", r.mismatches},
            {"max_deviation", r.max_deviation}};
}

json report_json(const DefenseReport& d)
{
    json j{{"defense", d.defense}, {"verdict", d.verdict}, {"params", d.params}, {"metrics", json::object()}};
    for (const auto& [k, v] : d.metrics) j["metrics"][k] = v;
    if (!d.notes.empty()) j["notes"] = d.notes;
    return j;
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string error_kind(const std::exception& e)
{
    if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ConfigError*>(&e)) return "usage";
    if (dynamic_cast<const DataError*>(&e)) return "data";
    if (dynamic_cast<const FormatError*>(&e)) return "format";
    if (dynamic_cast<const ModelError*>(&e)) return "model";
    if (dynamic_cast<const AttackError*>(&e)) return "attack";
    if (dynamic_cast<const TrainError*>(&e)) return "train";
    if (dynamic_cast<const MetricError*>(&e)) return "metric";
    return "runtime";
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Data-free backdoor injection lab"};
    app.require_subcommand(1);
    std::uint64_t seed = 0;
    app.add_option("--seed", seed, "seed for init (seed), shuffling (seed+1) and the attack (seed+2)");
    std::function<json()> run;

    // train
    DataOpts train_data;
    std::string arch = "fcn", model_out = "clean.bin";
    TrainConfig tc;
    tc.epochs = 5;
    tc.learning_rate = 0.05f;
    auto* train_cmd = app.add_subcommand("train", "train a clean baseline");
    train_data.add(train_cmd);
    train_cmd->add_option("--arch", arch, "fcn, cnn or a layer list");
    train_cmd->add_option("--epochs", tc.epochs);
    train_cmd->add_option("--batch-size", tc.batch_size);
    train_cmd->add_option("--lr", tc.learning_rate);
    train_cmd->add_option("--momentum", tc.momentum);
    train_cmd->add_option("-o,--out", model_out);
    train_cmd->callback([&] {
        run = [&] {
            const auto data = train_data.load();
            const Model init = build_architecture(arch, data.train.image_shape, data.train.num_classes, seed);
            tc.seed = seed + 1;
            const auto t0 = std::chrono::steady_clock::now();
            const auto r = train(init, data.train, tc);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            save_model(r.model, model_out);
            return json{{"model", model_out},
                        {"ca", accuracy(r.model, data.test)},
                        {"train_accuracy", accuracy(r.model, data.train)},
                        {"initial_loss", r.initial_loss},
                        {"loss_curve", r.loss_curve},
                        {"train_seconds", secs}};
        };
    });

    // inject
    std::string inject_in, inject_out = "backdoored.bin", variant = "standard", trigger = "4x4";
    AttackConfig ac;
    std::optional<float> gamma;
    auto* inject_cmd = app.add_subcommand("inject", "install a backdoor into a trained model");
    inject_cmd->add_option("-m,--model", inject_in)->required();
    inject_cmd->add_option("-o,--out", inject_out);
    inject_cmd->add_option("--variant", variant)
        ->check(CLI::IsMember({"standard", "fineprune-evasion", "lipschitz-evasion", "zero-weight-obfuscation"}));
    inject_cmd->add_option("--lambda", ac.lambda);
    inject_cmd->add_option("--gamma", gamma, "default: lambda * gamma^(L-1) = 100");
    inject_cmd->add_option("--target", ac.target);
    inject_cmd->add_option("--trigger", trigger, "HxW");
    inject_cmd->add_option("--placement", ac.placement);
    inject_cmd->add_option("--sigma-g", ac.sigma_g);
    inject_cmd->add_option("--sigma-n", ac.sigma_n);
    inject_cmd->callback([&] {
        run = [&] {
            const Model clean = load_model(inject_in);
            const auto hw = parse_dims(trigger);
            if (hw.size() != 2) throw UsageError("--trigger expects HxW");
            ac.trigger_h = hw[0];
            ac.trigger_w = hw[1];
            ac.gamma = gamma;
            ac.seed = seed + 2;
            ac.variant = variant_from_string(variant);
            auto r = inject(clean, ac);
            store_attack_record(r.model, r);
            save_model(r.model, inject_out);
            return json{{"model", inject_out},
                        {"variant", to_string(ac.variant)},
                        {"lambda", r.lambda},
                        {"gamma", r.gamma},
                        {"path", r.path.encode()},
                        {"changed_parameters", r.changed_parameters},
                        {"expected_changes", r.expected_changes},
                        {"surgery_ms", r.surgery_ms},
                        {"warnings", r.warnings}};
        };
    });

    // eval
    DataOpts eval_data;
    std::string eval_clean, eval_bd;
    auto* eval_cmd = app.add_subcommand("eval", "CA, BA, ASR and activation census");
    eval_data.add(eval_cmd);
    eval_cmd->add_option("--clean", eval_clean)->required();
    eval_cmd->add_option("--backdoored", eval_bd)->required();
    eval_cmd->callback([&] {
        run = [&] {
            const auto data = eval_data.load();
            const Model clean = load_model(eval_clean), bd = load_model(eval_bd);
            const auto rec = record_of(bd);
            const auto cb = metric_ca_ba(clean, bd, data.test);
            return json{{"ca", cb.ca},
                        {"ba", cb.ba},
                        {"gap", cb.gap},
                        {"asr", metric_asr(bd, data.test, rec.trigger, rec.target)},
                        {"census", census_json(activation_census(bd, rec.path, data.test, &rec.trigger))}};
        };
    });

    // defend
    DataOpts defend_data;
    std::string defend_model, defense, defend_report;
    auto* defend_cmd = app.add_subcommand("defend", "run one defense against a model");
    defend_data.add(defend_cmd);
    defend_cmd->add_option("-m,--model", defend_model)->required();
    defend_cmd->add_option("-d,--defense", defense, "name and k=v params, e.g. \"fine-prune fraction=0.2\"")
        ->required();
    defend_cmd->add_option("--report", defend_report, "write the structured report here");
    defend_cmd->callback([&] {
        run = [&] {
            const auto data = defend_data.load();
            const Model m = load_model(defend_model);
            const auto rec = load_attack_record(m);
            Probe probe{&data.test};
            if (rec) probe.trigger = &rec->trigger, probe.target = rec->target;
            const auto r = run_defense(m, parse_defense(defense), data, probe, rec ? &rec->path : nullptr, seed);
            if (!defend_report.empty()) {
                std::ofstream out(defend_report, std::ios::binary);
                out << r.to_text();
            }
            return report_json(r);
        };
    });

    // oracle
    DataOpts oracle_data;
    std::string oracle_model;
    bool switch_grid = false, closed_form = false, gradcheck = false;
    std::size_t checks = 10, finetune_epochs = 0;
    auto* oracle_cmd = app.add_subcommand("oracle", "pruned-model equivalence and brute-force checks");
    oracle_data.add(oracle_cmd);
    oracle_cmd->add_option("-m,--model", oracle_model, "backdoored model for the equivalence oracles");
    oracle_cmd->add_option("--finetune-epochs", finetune_epochs, "also fine-tune and measure the path delta");
    oracle_cmd->add_flag("--switch-grid", switch_grid, "two-pixel switch predicate over a 101x101 grid");
    oracle_cmd->add_flag("--closed-form", closed_form, "optimal pattern against an 11-point grid, e=3");
    oracle_cmd->add_flag("--gradcheck", gradcheck, "backward against central differences");
    oracle_cmd->add_option("--checks", checks, "seeds per brute-force check");
    oracle_cmd->callback([&] {
        run = [&] {
            json out = json::object();
            if (!oracle_model.empty()) {
                const auto data = oracle_data.load();
                const Model bd = load_model(oracle_model);
                const auto rec = record_of(bd);
                const Model pruned = build_pruned(bd, rec.path);
                out["census"] = census_json(activation_census(bd, rec.path, data.test));
                out["output_consistency"] = oracle_json(oracle_output_consistency(bd, pruned, data.test));
                out["gradient_consistency"] = oracle_json(oracle_gradient_consistency(bd, pruned, data.test));
                if (finetune_epochs) {
                    const Probe probe{&data.test, &rec.trigger, rec.target};
                    out["fine_tune"] =
                        report_json(defense_fine_tune(bd, data.train, finetune_epochs, 0.01f, probe, &rec.path, seed));
                }
            }
            if (switch_grid) {
                std::size_t points = 0, mismatches = 0;
                for (std::uint64_t s = seed; s < seed + checks; ++s) {
                    const auto g = switch_grid_check(s);
                    points += g.points;
                    mismatches += g.mismatches;
                }
                out["switch_grid"] = {{"points", points}, {"mismatches", mismatches}};
            }
            if (closed_form) {
                std::size_t points = 0, mismatches = 0;
                for (std::uint64_t s = seed; s < seed + checks; ++s) {
                    const auto g = closed_form_grid_check(s);
                    points += g.points;
                    mismatches += g.mismatches;
                }
                out["closed_form"] = {{"points", points}, {"mismatches", mismatches}};
            }
            if (gradcheck) {
                const auto g = gradient_check_sweep(seed, checks);
                out["gradcheck"] = {{"worst_rel_err", g.worst}, {"checked", g.checked}, {"skipped", g.skipped}};
            }
            if (out.empty()) throw UsageError("oracle needs --model or one of --switch-grid, --closed-form, --gradcheck");
            return out;
        };
    });

    // mc
    std::size_t e = 16, samples = 1000000;
    float mc_lambda = 1.0f;
    double alpha = 1.0;
    unsigned workers = 1;
    auto* mc_cmd = app.add_subcommand("mc", "switch activation frequency on uniform inputs");
    mc_cmd->add_option("-e", e, "trigger pixels");
    mc_cmd->add_option("--lambda", mc_lambda);
    mc_cmd->add_option("--alpha", alpha, "magnitude of every switch weight");
    mc_cmd->add_option("--samples", samples);
    mc_cmd->add_option("--workers", workers);
    mc_cmd->callback([&] {
        run = [&] {
            if (e == 0) throw UsageError("-e must be positive");
            auto t = make_trigger({1, 1, e}, Rect{0, 0, 1, e}, "full");
            for (auto n : t.support) t.pattern[n] = 1.0f;
            const std::vector<float> w(e, static_cast<float>(alpha));
            const auto r = monte_carlo_activation(t, mc_lambda, w, alpha, samples, seed, workers);
            return json{{"samples", r.samples},     {"activations", r.activations}, {"frequency", r.frequency},
                        {"std_error", r.std_error}, {"bound", r.bound},             {"raw_bound", r.raw_bound}};
        };
    });

    // ablate
    std::string config_path, ablate_out;
    std::optional<unsigned> ablate_workers;
    bool timing = false;
    auto* ablate_cmd = app.add_subcommand("ablate", "run a config file's grid and write the run directory");
    ablate_cmd->add_option("config", config_path)->required();
    ablate_cmd->add_option("-o,--out", ablate_out, "overrides the config's output directory");
    ablate_cmd->add_option("--workers", ablate_workers);
    ablate_cmd->add_flag("--timing", timing, "record surgery time in the CSV");
    ablate_cmd->callback([&] {
        run = [&] {
            auto cfg = ExperimentConfig::load(config_path);
            if (app.count("--seed")) cfg.seed = seed;
            if (!ablate_out.empty()) cfg.output = ablate_out;
            if (ablate_workers) cfg.workers = *ablate_workers;
            if (timing) cfg.record_timing = true;
            const auto r = run_ablation(cfg);
            write_outputs(r, cfg);
            double lowest = 1.0;
            for (const auto& run : r.runs) lowest = std::min(lowest, run.asr);
            return json{{"output", cfg.output.string()},
                        {"config_hash", r.config_hash},
                        {"points", r.runs.size()},
                        {"lowest_asr", lowest}};
        };
    });

    // report
    std::vector<std::string> csvs;
    std::string report_out;
    auto* report_cmd = app.add_subcommand("report", "merge result CSVs and summarize");
    report_cmd->add_option("csv", csvs)->required()->check(CLI::ExistingFile);
    report_cmd->add_option("-o,--out", report_out, "write the merged CSV here");
    report_cmd->callback([&] {
        run = [&] {
            std::vector<CsvReport> parts;
            for (const auto& p : csvs) parts.push_back(CsvReport::parse(slurp(p)));
            const auto merged = merge_reports(parts);
            if (!report_out.empty()) {
                std::ofstream out(report_out, std::ios::binary);
                out << merged.to_csv();
            }
            return json{{"rows", merged.rows.size()}, {"configs", merged.config_hashes}, {"summary", summarize(merged)}};
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << json{{"error", e.what()}, {"kind", "usage"}}.dump() << '\n';
        return 2;
    }
    try {
        std::cout << run().dump(2) << '\n';
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}, {"kind", error_kind(e)}}.dump() << '\n';
        return 1;
    }
    return 0;
}
