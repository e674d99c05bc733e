#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "dfba/dataset.hpp"
#include "dfba/model.hpp"
#include "dfba/nn.hpp"

namespace dfba {

struct TrainConfig {
    std::size_t epochs = 1;
    std::size_t batch_size = 32;
    float learning_rate = 0.01f;
    /// Heavy-ball momentum; 0 gives plain SGD.
    float momentum = 0.0f;
    std::uint64_t seed = 0;
    bool shuffle = true;

    void validate() const;
};

class TrainError : public std::runtime_error {
public:
    TrainError(const std::string& what, std::size_t epoch) : std::runtime_error(what), epoch_(epoch) {}
    std::size_t epoch() const { return epoch_; }

private:
    std::size_t epoch_;
};

/// Called after each mini-batch gradient is computed and before the update.
using StepObserver = std::function<void(std::size_t epoch, std::size_t step, const Gradients& grads)>;

struct TrainResult {
    Model model;
    /// Full-dataset loss before the first update.
    double initial_loss = 0.0;
    /// Mean mini-batch loss of each epoch.
    std::vector<double> loss_curve;
};

TrainResult train(const Model& model, const Dataset& data, const TrainConfig& cfg, const StepObserver& observer = {});

/// Absolute per-parameter change between two models of identical architecture.
struct ParamDelta {
    std::vector<std::vector<float>> weight;
    std::vector<std::vector<float>> bias;

    static ParamDelta between(const Model& before, const Model& after);
    double max_abs() const;
    double max_abs(const ParamSlots& slots) const;
    std::size_t changed() const;
};

struct FineTuneResult {
    Model model;
    ParamDelta delta;
    std::vector<double> loss_curve;
    double initial_loss = 0.0;
};

FineTuneResult fine_tune(const Model& model, const Dataset& data, const TrainConfig& cfg,
                         const StepObserver& observer = {});

/// Predictions over the dataset (argmax, lowest index on ties).
std::vector<std::size_t> predictions(const Model& model, const Dataset& data);

/// Fraction of correctly classified samples; 0 for an empty dataset.
double accuracy(const Model& model, const Dataset& data);

double dataset_loss(const Model& model, const Dataset& data);

} // namespace dfba
