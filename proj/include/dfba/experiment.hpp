#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfba/attack.hpp"
#include "dfba/dataset.hpp"
#include "dfba/defenses.hpp"
#include "dfba/model.hpp"
#include "dfba/trainer.hpp"

namespace dfba {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DataSource {
    /// "synthetic" or "idx"
    std::string kind = "synthetic";
    std::filesystem::path train_images, train_labels, test_images, test_labels;
    std::size_t classes = 10;
    std::size_t train_per_class = 300;
    std::size_t test_per_class = 100;
    Shape image_shape{1, 28, 28};
    std::uint64_t seed = 11;
};

/// One defense to run after injection, e.g. "fine-prune" with {"fraction": "0.2"}.
struct DefenseSpec {
    std::string name;
    std::map<std::string, std::string> params;
};

struct ExperimentConfig {
    DataSource data;
    /// "fcn", "cnn" or a layer list such as "conv:16:5,relu,pool,flatten,dense:32,relu,dense:10".
    std::string arch = "fcn";
    TrainConfig train;
    AttackConfig attack;
    std::vector<DefenseSpec> defenses;
    std::vector<float> grid_lambda;
    std::vector<float> grid_gamma;
    /// {h, w} pairs
    std::vector<std::pair<std::size_t, std::size_t>> grid_trigger;
    std::vector<std::string> grid_placement;
    std::uint64_t seed = 0;
    std::filesystem::path output = "out";
    unsigned workers = 1;
    /// Write wall-clock surgery time into the CSV. Off by default so that
    /// reports replay byte for byte.
    bool record_timing = false;

    void validate() const;
    /// Canonical `key = value` text: every key, fixed order. Parsing it gives back the same config.
    std::string canonical() const;
    /// FNV-1a 64 over canonical().
    std::uint64_t hash() const;
    std::string hash_hex() const;

    static ExperimentConfig parse(const std::string& text);
    static ExperimentConfig load(const std::filesystem::path& path);
};

DefenseSpec parse_defense(const std::string& text);
std::string to_string(const DefenseSpec& d);

std::uint64_t fnv1a64(std::string_view bytes);

DataSplit load_data(const DataSource& src);
Model build_architecture(const std::string& arch, const Shape& image_shape, std::size_t classes, std::uint64_t seed);

DefenseReport run_defense(const Model& model, const DefenseSpec& spec, const DataSplit& data, const Probe& probe,
                          const BackdoorPath* path, std::uint64_t seed);

/// One CSV row.
struct ReportRow {
    std::string run_id;
    std::uint64_t seed = 0;
    double lambda = 0.0;
    double gamma = 0.0;
    std::size_t trigger_h = 0;
    std::size_t trigger_w = 0;
    double ca = 0.0;
    double ba = 0.0;
    double asr = 0.0;
    std::size_t clean_activations = 0;
    std::size_t backdoored_activations = 0;
    /// Empty when timing is not recorded.
    std::optional<double> surgery_ms;
    std::string defense = "none";
    std::string defense_param;
    std::optional<double> acc_after;
    std::optional<double> asr_after;
};

struct EvalReport {
    std::string run_id;
    double ca = 0.0, ba = 0.0, asr = 0.0;
    Census census;
    double surgery_ms = 0.0;
    InjectionResult injection;
    std::vector<DefenseReport> defenses;
    std::string config_hash;
    std::uint64_t seed = 0;

    std::vector<ReportRow> rows(bool record_timing) const;
};

/// Evaluates a clean model and one injection with the given attack config, then runs the defenses.
EvalReport evaluate_attack(const std::string& run_id, const Model& clean, const DataSplit& data,
                           const AttackConfig& attack, const std::vector<DefenseSpec>& defenses,
                           const std::string& config_hash);

struct ExperimentResult {
    Model clean;
    std::vector<EvalReport> runs;
    std::string config_hash;
};

/// Trains the clean model and evaluates the configured attack and defenses.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

/// Sweeps every non-empty grid axis with the other parameters at their configured
/// values. Points run on `cfg.workers` threads; results keep grid order.
ExperimentResult run_ablation(const ExperimentConfig& cfg);

/// Same, reusing an already trained clean model.
ExperimentResult run_ablation(const ExperimentConfig& cfg, const Model& clean, const DataSplit& data);

} // namespace dfba
