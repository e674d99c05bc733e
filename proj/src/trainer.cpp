#include <algorithm>
#include <cmath>
#include <numeric>

#include "dfba/rng.hpp"
#include "dfba/trainer.hpp"

namespace dfba {

namespace {

constexpr std::size_t kEvalChunk = 256;

std::vector<float>* weights_of(Layer& l)
{
    if (auto* d = std::get_if<Dense>(&l)) return &d->weight;
    if (auto* c = std::get_if<Conv2D>(&l)) return &c->weight;
    return nullptr;
}

std::vector<float>* biases_of(Layer& l)
{
    if (auto* d = std::get_if<Dense>(&l)) return &d->bias;
    if (auto* c = std::get_if<Conv2D>(&l)) return &c->bias;
    return nullptr;
}

const std::vector<float>* weights_of(const Layer& l) { return weights_of(const_cast<Layer&>(l)); }
const std::vector<float>* biases_of(const Layer& l) { return biases_of(const_cast<Layer&>(l)); }

void check_compatible(const Model& model, const Dataset& data)
{
    if (data.image_shape != model.input_shape)
        throw DataError("dataset image shape " + shape_to_string(data.image_shape) + " does not match model input " +
                        shape_to_string(model.input_shape));
    if (data.num_classes > model.num_classes)
        throw DataError("dataset has " + std::to_string(data.num_classes) + " classes but model outputs " +
                        std::to_string(model.num_classes));
}

} // namespace

void TrainConfig::validate() const
{
    if (epochs == 0) throw std::invalid_argument("epochs must be positive");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (!(learning_rate > 0.0f) || !std::isfinite(learning_rate))
        throw std::invalid_argument("learning_rate must be a positive finite number");
    if (!(momentum >= 0.0f && momentum < 1.0f)) throw std::invalid_argument("momentum must lie in [0, 1)");
}

TrainResult train(const Model& model, const Dataset& data, const TrainConfig& cfg, const StepObserver& observer)
{
    cfg.validate();
    model.validate();
    check_compatible(model, data);
    if (data.size() == 0) throw DataError("cannot train on an empty dataset");

    TrainResult out{model, dataset_loss(model, data), {}};
    Model& m = out.model;

    std::vector<LayerGrad> velocity(m.layers.size());
    for (std::size_t i = 0; i < m.layers.size(); ++i)
        if (const auto* w = weights_of(m.layers[i])) {
            velocity[i].weight.assign(w->size(), 0.0f);
            velocity[i].bias.assign(biases_of(m.layers[i])->size(), 0.0f);
        }

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.shuffle) rng.shuffle(order.begin(), order.end());
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
            const std::span<const std::size_t> idx(order.data() + begin, end - begin);
            const Tensor x = data.batch(idx);
            const auto y = data.batch_labels(idx);
            const Gradients g = backward(m, x, y);
            if (!std::isfinite(g.loss))
                throw TrainError("training diverged: non-finite loss in epoch " + std::to_string(epoch), epoch);
            if (observer) observer(epoch, step, g);
            for (std::size_t i = 0; i < m.layers.size(); ++i) {
                auto* w = weights_of(m.layers[i]);
                if (!w) continue;
                auto* b = biases_of(m.layers[i]);
                auto update = [&](std::vector<float>& p, std::vector<float>& v, const std::vector<float>& gr) {
                    for (std::size_t k = 0; k < p.size(); ++k) {
                        if (cfg.momentum > 0.0f) {
                            v[k] = cfg.momentum * v[k] + gr[k];
                            p[k] -= cfg.learning_rate * v[k];
                        } else {
                            p[k] -= cfg.learning_rate * gr[k];
                        }
                    }
                };
                update(*w, velocity[i].weight, g.layers[i].weight);
                update(*b, velocity[i].bias, g.layers[i].bias);
            }
            sum += g.loss;
            ++batches;
            ++step;
        }
        const double mean = sum / static_cast<double>(batches);
        bool finite = std::isfinite(mean);
        for (const auto& l : m.layers)
            if (const auto* w = weights_of(l))
                finite = finite && std::all_of(w->begin(), w->end(), [](float v) { return std::isfinite(v); });
        if (!finite) throw TrainError("training diverged: non-finite parameters after epoch " + std::to_string(epoch), epoch);
        out.loss_curve.push_back(mean);
    }
    return out;
}

ParamDelta ParamDelta::between(const Model& before, const Model& after)
{
    if (before.layers.size() != after.layers.size()) throw ModelError("models differ in layer count");
    ParamDelta d;
    d.weight.resize(before.layers.size());
    d.bias.resize(before.layers.size());
    for (std::size_t i = 0; i < before.layers.size(); ++i) {
        const auto* wa = weights_of(before.layers[i]);
        const auto* wb = weights_of(after.layers[i]);
        if (!wa && !wb) continue;
        if (!wa || !wb || wa->size() != wb->size())
            throw ModelError("models differ in parameter shape at layer " + std::to_string(i));
        const auto* ba = biases_of(before.layers[i]);
        const auto* bb = biases_of(after.layers[i]);
        d.weight[i].resize(wa->size());
        d.bias[i].resize(ba->size());
        for (std::size_t k = 0; k < wa->size(); ++k) d.weight[i][k] = std::fabs((*wb)[k] - (*wa)[k]);
        for (std::size_t k = 0; k < ba->size(); ++k) d.bias[i][k] = std::fabs((*bb)[k] - (*ba)[k]);
    }
    return d;
}

double ParamDelta::max_abs() const
{
    double m = 0.0;
    for (const auto& v : weight)
        for (float x : v) m = std::max(m, static_cast<double>(x));
    for (const auto& v : bias)
        for (float x : v) m = std::max(m, static_cast<double>(x));
    return m;
}

double ParamDelta::max_abs(const ParamSlots& slots) const
{
    double m = 0.0;
    for (std::size_t i = 0; i < weight.size() && i < slots.weight.size(); ++i) {
        for (std::size_t k = 0; k < slots.weight[i].size(); ++k)
            if (slots.weight[i][k]) m = std::max(m, static_cast<double>(weight[i][k]));
        for (std::size_t k = 0; k < slots.bias[i].size(); ++k)
            if (slots.bias[i][k]) m = std::max(m, static_cast<double>(bias[i][k]));
    }
    return m;
}

std::size_t ParamDelta::changed() const
{
    std::size_t n = 0;
    for (const auto& v : weight) n += static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](float x) { return x != 0.0f; }));
    for (const auto& v : bias) n += static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](float x) { return x != 0.0f; }));
    return n;
}

FineTuneResult fine_tune(const Model& model, const Dataset& data, const TrainConfig& cfg, const StepObserver& observer)
{
    TrainResult r = train(model, data, cfg, observer);
    FineTuneResult out{std::move(r.model), {}, std::move(r.loss_curve), r.initial_loss};
    out.delta = ParamDelta::between(model, out.model);
    return out;
}

std::vector<std::size_t> predictions(const Model& model, const Dataset& data)
{
    check_compatible(model, data);
    std::vector<std::size_t> out;
    out.reserve(data.size());
    for (std::size_t begin = 0; begin < data.size(); begin += kEvalChunk) {
        const auto p = predict(model, data.batch(begin, std::min(data.size(), begin + kEvalChunk)));
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

double accuracy(const Model& model, const Dataset& data)
{
    if (data.size() == 0) return 0.0;
    const auto p = predictions(model, data);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < p.size(); ++i) hits += p[i] == data.labels[i];
    return static_cast<double>(hits) / static_cast<double>(p.size());
}

double dataset_loss(const Model& model, const Dataset& data)
{
    check_compatible(model, data);
    if (data.size() == 0) return 0.0;
    double sum = 0.0;
    for (std::size_t begin = 0; begin < data.size(); begin += kEvalChunk) {
        const std::size_t end = std::min(data.size(), begin + kEvalChunk);
        const std::span<const std::size_t> y(data.labels.data() + begin, end - begin);
        sum += loss(model, data.batch(begin, end), y) * static_cast<double>(end - begin);
    }
    return sum / static_cast<double>(data.size());
}

} // namespace dfba
