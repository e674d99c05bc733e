#pragma once

#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dfba/attack.hpp"
#include "dfba/dataset.hpp"
#include "dfba/model.hpp"
#include "dfba/trainer.hpp"
#include "dfba/trigger.hpp"

namespace dfba {

/// What a defense is scored against: clean test data and, when known, the trigger.
struct Probe {
    const Dataset* test = nullptr;
    const TriggerSpec* trigger = nullptr;
    std::size_t target = 0;
};

struct SweepPoint {
    double param = 0.0;
    double acc = 0.0;
    /// NaN when no trigger is known.
    double asr = std::numeric_limits<double>::quiet_NaN();
    std::size_t pruned = 0;
};

struct DefenseReport {
    std::string defense;
    std::map<std::string, std::string> params;
    /// "detected", "not-detected", "pruned-model" or "fine-tuned-model".
    std::string verdict;
    /// Name of the metric the verdict rests on (a key of `metrics`).
    std::string verdict_metric;
    std::map<std::string, double> metrics;
    std::vector<double> class_norms;
    std::vector<double> anomaly_indices;
    std::vector<NeuronRef> pruned_units;
    std::vector<SweepPoint> sweep;
    std::vector<std::string> notes;
    /// The defended model; not part of the text form.
    std::optional<Model> model;

    /// `key = value` lines, one record per file.
    std::string to_text() const;
    static DefenseReport from_text(const std::string& text);
};

/// Fine-tunes on clean data with plain SGD, recording ACC/ASR after every epoch
/// and, if a path is given, the largest change and gradient seen on its parameters.
DefenseReport defense_fine_tune(const Model& model, const Dataset& train, std::size_t epochs, float lr,
                                const Probe& probe, const BackdoorPath* path = nullptr, std::uint64_t seed = 0,
                                std::size_t batch_size = 32);

/// Last Dense/Conv2D layer before the output layer.
std::size_t last_hidden_layer(const Model& model);

/// Mean post-activation of every unit of a layer over a dataset (conv: over all sites).
std::vector<double> mean_activations(const Model& model, std::size_t layer, const Dataset& data);

/// Units of `layer` sorted by mean activation ascending, index breaking ties.
std::vector<std::size_t> activation_order(const Model& model, std::size_t layer, const Dataset& data);

/// Prunes the ceil(fraction * units) least active units of `layer`, optionally fine-tuning after.
DefenseReport defense_fine_prune(const Model& model, const Dataset& clean, double fraction,
                                 std::optional<std::size_t> layer, const Probe& probe,
                                 const Dataset* finetune_data = nullptr, std::size_t finetune_epochs = 0,
                                 float lr = 0.01f);

/// Prunes units one at a time in ascending activation order while ACC stays
/// within `budget` of the unpruned ACC; every evaluated point goes into the sweep.
DefenseReport fine_prune_sweep(const Model& model, const Dataset& clean, std::optional<std::size_t> layer,
                               const Probe& probe, double budget = 0.05, std::size_t step = 1);

/// Prunes, in every hidden parametric layer, units whose Lipschitz surrogate
/// exceeds mu_k + u sigma_k. The output layer is never pruned.
DefenseReport defense_lipschitz_prune(const Model& model, double u, const Probe& probe);

struct NcConfig {
    std::size_t steps = 300;
    /// Initial weight of the mask L1 term.
    double beta = 1e-2;
    double learning_rate = 0.1;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    /// Attack success on the held-out batch needed to call a mask converged.
    double success = 0.99;
    /// Success is checked every `check_every` steps; with `adaptive` the L1 weight
    /// grows by 1.5 after `patience` passing checks and shrinks by 1.5^1.5 after as many failing ones.
    std::size_t check_every = 10;
    std::size_t patience = 3;
    bool adaptive = true;
};

struct ReversedTrigger {
    std::size_t target = 0;
    /// HxW mask shared across channels, values in [0,1].
    std::vector<float> mask;
    /// CxHxW pattern within the feature bounds.
    std::vector<float> pattern;
    double l1 = 0.0;
    double loss = 0.0;
    double success = 0.0;
    bool converged = false;
};

ReversedTrigger reverse_engineer_trigger(const Model& model, const Dataset& data, std::size_t target,
                                         const NcConfig& cfg = {});

struct AnomalyResult {
    std::vector<double> indices;
    std::size_t min_class = 0;
    double min_class_index = 0.0;
    bool detected = false;
};

/// |n_c - median| / (1.4826 MAD); detected iff the smallest-norm class scores above 2.
/// With MAD = 0 an index is 0 for norms at the median and +inf otherwise.
AnomalyResult anomaly_index(const std::vector<double>& norms);

/// Reverse-engineers a trigger for every class and scores the mask norms.
DefenseReport neural_cleanse(const Model& model, const Dataset& data, const NcConfig& cfg = {});

struct OracleResult {
    bool consistent = false;
    double max_deviation = 0.0;
    std::size_t checked = 0;
    std::size_t mismatches = 0;
};

/// Logits of the two models are bitwise identical on every input.
OracleResult oracle_output_consistency(const Model& backdoored, const Model& pruned, const Dataset& data);

/// Input gradients of the cross-entropy loss are equal on every input.
OracleResult oracle_gradient_consistency(const Model& backdoored, const Model& pruned, const Dataset& data);

/// Units of `layer` whose activation is zero on every input of the clean set.
std::vector<NeuronRef> activation_anomaly_scan(const Model& model, const Dataset& clean,
                                               std::optional<std::size_t> layer = std::nullopt);

} // namespace dfba
