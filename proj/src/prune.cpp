#include <algorithm>
#include <cmath>

#include "dfba/nn.hpp"

namespace dfba {

std::optional<Fanout> fanout(const Model& model, std::size_t layer_index, std::size_t unit)
{
    check_ref(model, NeuronRef{layer_index, unit, std::nullopt});
    const auto shapes = model.output_shapes();
    // Track which output elements carry this unit through non-parametric layers.
    bool spatial = std::holds_alternative<Conv2D>(model.layers[layer_index]);
    std::size_t channel = unit;
    std::vector<std::size_t> flat;
    if (!spatial) flat = {unit};
    for (std::size_t i = layer_index + 1; i < model.layers.size(); ++i) {
        const Layer& l = model.layers[i];
        if (std::holds_alternative<Dense>(l)) {
            if (spatial) throw ModelError("dense layer " + std::to_string(i) + " reads a spatial map without flatten");
            return Fanout{i, flat, std::nullopt};
        }
        if (std::holds_alternative<Conv2D>(l)) {
            if (!spatial) throw ModelError("conv layer " + std::to_string(i) + " after flatten is not supported");
            return Fanout{i, {}, channel};
        }
        if (std::holds_alternative<Flatten>(l) && spatial) {
            const Shape& s = shapes[i - 1];
            const std::size_t plane = s[1] * s[2];
            flat.resize(plane);
            for (std::size_t p = 0; p < plane; ++p) flat[p] = channel * plane + p;
            spatial = false;
        }
    }
    return std::nullopt;
}

void prune_neurons_in_place(Model& model, std::span<const NeuronRef> refs)
{
    for (const auto& ref : refs) {
        check_ref(model, ref);
        if (auto* d = std::get_if<Dense>(&model.layers[ref.layer])) {
            std::fill_n(d->weight.begin() + static_cast<std::ptrdiff_t>(ref.unit * d->in_dim), d->in_dim, 0.0f);
            d->bias[ref.unit] = 0.0f;
        } else {
            auto& c = std::get<Conv2D>(model.layers[ref.layer]);
            const std::size_t k = c.filter_size();
            std::fill_n(c.weight.begin() + static_cast<std::ptrdiff_t>(ref.unit * k), k, 0.0f);
            c.bias[ref.unit] = 0.0f;
        }
        const auto fo = fanout(model, ref.layer, ref.unit);
        if (!fo) continue;
        if (auto* d = std::get_if<Dense>(&model.layers[fo->layer])) {
            for (std::size_t j = 0; j < d->out_dim; ++j)
                for (auto col : fo->columns) d->w(j, col) = 0.0f;
        } else {
            auto& c = std::get<Conv2D>(model.layers[fo->layer]);
            for (std::size_t oc = 0; oc < c.out_channels; ++oc)
                for (std::size_t i = 0; i < c.kernel_h; ++i)
                    for (std::size_t j = 0; j < c.kernel_w; ++j) c.w(oc, *fo->channel, i, j) = 0.0f;
        }
    }
}

Model prune_neurons(const Model& model, std::span<const NeuronRef> refs)
{
    Model out = model;
    prune_neurons_in_place(out, refs);
    return out;
}

LipschitzStats lipschitz_stats(const Model& model, std::size_t layer_index)
{
    const std::size_t units = unit_count(model, layer_index);
    const Layer& l = model.layers[layer_index];
    const std::vector<float>& w = std::holds_alternative<Dense>(l) ? std::get<Dense>(l).weight : std::get<Conv2D>(l).weight;
    const std::size_t fan_in = w.size() / units;
    LipschitzStats st;
    st.constants.resize(units);
    for (std::size_t u = 0; u < units; ++u) {
        double sq = 0.0;
        for (std::size_t k = 0; k < fan_in; ++k) {
            const double v = w[u * fan_in + k];
            sq += v * v;
        }
        st.constants[u] = std::sqrt(sq);
    }
    for (double c : st.constants) st.mean += c;
    st.mean /= static_cast<double>(units);
    double var = 0.0;
    for (double c : st.constants) var += (c - st.mean) * (c - st.mean);
    st.stddev = std::sqrt(var / static_cast<double>(units));
    return st;
}

} // namespace dfba

namespace dfba {

ParamSlots ParamSlots::empty_for(const Model& model)
{
    ParamSlots s;
    s.weight.resize(model.layers.size());
    s.bias.resize(model.layers.size());
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        if (const auto* d = std::get_if<Dense>(&model.layers[i])) {
            s.weight[i].assign(d->weight.size(), 0);
            s.bias[i].assign(d->bias.size(), 0);
        } else if (const auto* c = std::get_if<Conv2D>(&model.layers[i])) {
            s.weight[i].assign(c->weight.size(), 0);
            s.bias[i].assign(c->bias.size(), 0);
        }
    }
    return s;
}

std::size_t ParamSlots::count() const
{
    std::size_t n = 0;
    for (const auto& v : weight)
        for (auto b : v) n += b;
    for (const auto& v : bias)
        for (auto b : v) n += b;
    return n;
}

ParamSlots neuron_parameters(const Model& model, std::span<const NeuronRef> refs)
{
    ParamSlots s = ParamSlots::empty_for(model);
    for (const auto& ref : refs) {
        check_ref(model, ref);
        const std::size_t units = unit_count(model, ref.layer);
        auto& w = s.weight[ref.layer];
        const std::size_t fan_in = w.size() / units;
        std::fill_n(w.begin() + static_cast<std::ptrdiff_t>(ref.unit * fan_in), fan_in, 1);
        s.bias[ref.layer][ref.unit] = 1;
        const auto fo = fanout(model, ref.layer, ref.unit);
        if (!fo) continue;
        if (const auto* d = std::get_if<Dense>(&model.layers[fo->layer])) {
            for (std::size_t j = 0; j < d->out_dim; ++j)
                for (auto col : fo->columns) s.weight[fo->layer][j * d->in_dim + col] = 1;
        } else {
            const auto& c = std::get<Conv2D>(model.layers[fo->layer]);
            const std::size_t kk = c.kernel_h * c.kernel_w;
            for (std::size_t oc = 0; oc < c.out_channels; ++oc)
                std::fill_n(s.weight[fo->layer].begin() +
                                static_cast<std::ptrdiff_t>((oc * c.in_channels + *fo->channel) * kk),
                            kk, 1);
        }
    }
    return s;
}

} // namespace dfba
