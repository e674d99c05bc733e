#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfba/dataset.hpp"
#include "dfba/model.hpp"
#include "dfba/nn.hpp"
#include "dfba/trigger.hpp"

namespace dfba {

class AttackError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Variant { standard, fineprune_evasion, lipschitz_evasion, zero_weight_obfuscation };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct AttackConfig {
    float lambda = 0.1f;
    /// Amplification factor; derived from lambda * gamma^(L-1) = 100 when empty.
    std::optional<float> gamma;
    std::size_t target = 0;
    std::size_t trigger_h = 4;
    std::size_t trigger_w = 4;
    std::string placement = "bottom-right";
    std::uint64_t seed = 0;
    Variant variant = Variant::standard;
    /// Fine-pruning evasion: std of the resampled switch weights on the trigger support.
    double sigma_g = 4000.0;
    /// Lipschitz evasion: per-layer weight, default min(1, 0.5 * mu_k).
    std::optional<float> gamma_mid;
    /// Lipschitz evasion: target output weight, default margin / (lambda * prod(gamma_mid)).
    std::optional<float> out_gain;
    double margin = 200.0;
    /// Zero-weight obfuscation noise std.
    double sigma_n = 0.001;

    void validate() const;
};

/// Number of Dense/Conv2D layers, output layer included.
std::size_t parametric_depth(const Model& model);

/// gamma with lambda * gamma^(depth-1) = 100.
float auto_gamma(float lambda, std::size_t depth);

/// One neuron per parametric layer except the output layer; conv neurons carry a site.
struct BackdoorPath {
    std::vector<NeuronRef> neurons;

    const NeuronRef& switch_neuron() const { return neurons.front(); }
    std::string encode() const;
    static BackdoorPath decode(const std::string& s);
    friend bool operator==(const BackdoorPath&, const BackdoorPath&) = default;
};

BackdoorPath select_path(const Model& model, const TriggerSpec& trigger, std::uint64_t seed);

/// The switch's current weights w_n for n in Gamma(m), in support order.
std::vector<float> switch_weights(const Model& model, const BackdoorPath& path, const TriggerSpec& trigger);

/// delta_n = lower_n if w_n <= 0 else upper_n, over the support.
std::vector<float> closed_form_pattern(std::span<const float> w, std::span<const float> lower,
                                       std::span<const float> upper);

/// Trigger with the pattern set from the switch's current weights.
TriggerSpec optimize_trigger(const Model& model, const BackdoorPath& path, TriggerSpec trigger);

/// Zeroes the switch weights off Gamma(m) and sets its bias so that every
/// triggered input gives pre-activation lambda (to float rounding).
Model install_switch(const Model& model, const BackdoorPath& path, const TriggerSpec& trigger, float lambda);

/// sum_{n in Gamma} |w_n (x_n - delta_n)| < lambda, with w in support order.
bool switch_activates(const TriggerSpec& trigger, float lambda, std::span<const float> w, std::span<const float> x);

/// gammas[l] is the weight from path neuron l to path neuron l+1.
Model install_amplifiers(const Model& model, const BackdoorPath& path, std::span<const float> gammas);
Model install_amplifiers(const Model& model, const BackdoorPath& path, float gamma);

/// +target_gain to y_tc and -other_gain to every other class from the last path neuron.
Model install_output_wiring(const Model& model, const BackdoorPath& path, float target_gain, float other_gain,
                            std::size_t target);
Model install_output_wiring(const Model& model, const BackdoorPath& path, float gamma, std::size_t target);

struct InjectionResult {
    Model model;
    TriggerSpec trigger;
    BackdoorPath path;
    AttackConfig config;
    float lambda = 0.0f;
    float gamma = 0.0f;
    /// Weight between consecutive path neurons, one per middle layer.
    std::vector<float> gammas;
    float out_gain = 0.0f;
    float out_other = 0.0f;
    std::size_t changed_parameters = 0;
    std::size_t expected_changes = 0;
    double surgery_ms = 0.0;
    std::vector<std::string> warnings;
};

InjectionResult inject(const Model& model, const AttackConfig& cfg);
InjectionResult inject_fineprune_evasion(const Model& model, AttackConfig cfg);
InjectionResult inject_lipschitz_evasion(const Model& model, AttackConfig cfg);

/// Weights the surgery forced to zero: switch weights off Gamma(m) and
/// amplifier weights other than the path link.
ParamSlots surgical_slots(const Model& model, const BackdoorPath& path, const TriggerSpec& trigger);

/// Replaces every surgical weight that is exactly 0 with N(0, sigma^2).
Model obfuscate_zero_weights(const Model& model, const BackdoorPath& path, const TriggerSpec& trigger, double sigma,
                             std::uint64_t seed);

Model build_pruned(const Model& model, const BackdoorPath& path);

/// Switch pre-activation per sample; for a conv switch the maximum over its channel.
std::vector<float> switch_preactivations(const Model& model, const BackdoorPath& path, const Dataset& data);

struct Census {
    std::size_t clean_activations = 0;
    std::size_t clean_total = 0;
    std::size_t backdoored_activations = 0;
    std::size_t backdoored_total = 0;
};

Census activation_census(const Model& model, const BackdoorPath& path, const Dataset& data,
                         const TriggerSpec* trigger = nullptr);

/// Trigger, path and attack constants stored in the model metadata.
struct AttackRecord {
    TriggerSpec trigger;
    BackdoorPath path;
    float lambda = 0.0f;
    float gamma = 0.0f;
    std::size_t target = 0;
    std::string variant;
};

void store_attack_record(Model& model, const InjectionResult& r);
std::optional<AttackRecord> load_attack_record(const Model& model);

} // namespace dfba
