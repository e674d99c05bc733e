#include "dfba/model.hpp"

#include <cmath>
#include <cstring>

#include "dfba/rng.hpp"

namespace dfba {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

bool same_bits(const std::vector<float>& a, const std::vector<float>& b)
{
    return bitwise_equal(a, b);
}

} // namespace

bool is_parametric(const Layer& layer)
{
    return std::holds_alternative<Dense>(layer) || std::holds_alternative<Conv2D>(layer);
}

std::string layer_kind(const Layer& layer)
{
    return std::visit(overloaded{[](const Dense&) { return std::string("dense"); },
                                 [](const Conv2D&) { return std::string("conv2d"); },
                                 [](const ReLU&) { return std::string("relu"); },
                                 [](const MaxPool2D&) { return std::string("maxpool2d"); },
                                 [](const Flatten&) { return std::string("flatten"); }},
                      layer);
}

Shape layer_output_shape(const Layer& layer, const Shape& in)
{
    return std::visit(
        overloaded{
            [&](const Dense& d) -> Shape {
                if (in.size() != 1 || in[0] != d.in_dim)
                    throw ModelError("dense layer expects [" + std::to_string(d.in_dim) + "], got " +
                                     shape_to_string(in));
                return {d.out_dim};
            },
            [&](const Conv2D& c) -> Shape {
                if (in.size() != 3 || in[0] != c.in_channels)
                    throw ModelError("conv2d expects [" + std::to_string(c.in_channels) + "xHxW], got " +
                                     shape_to_string(in));
                if (in[1] < c.kernel_h || in[2] < c.kernel_w)
                    throw ModelError("conv2d kernel larger than input " + shape_to_string(in));
                return {c.out_channels, in[1] - c.kernel_h + 1, in[2] - c.kernel_w + 1};
            },
            [&](const ReLU&) -> Shape { return in; },
            [&](const MaxPool2D&) -> Shape {
                if (in.size() != 3 || in[1] < 2 || in[2] < 2)
                    throw ModelError("maxpool2d expects [CxHxW] with H,W >= 2, got " + shape_to_string(in));
                return {in[0], in[1] / 2, in[2] / 2};
            },
            [&](const Flatten&) -> Shape { return {shape_size(in)}; }},
        layer);
}

std::string to_string(Provenance p)
{
    switch (p) {
    case Provenance::clean: return "clean";
    case Provenance::backdoored: return "backdoored";
    case Provenance::pruned: return "pruned";
    case Provenance::defended: return "defended";
    }
    return "clean";
}

Provenance provenance_from_string(const std::string& s)
{
    if (s == "clean") return Provenance::clean;
    if (s == "backdoored") return Provenance::backdoored;
    if (s == "pruned") return Provenance::pruned;
    if (s == "defended") return Provenance::defended;
    throw ModelError("unknown provenance tag '" + s + "'");
}

std::vector<Shape> Model::output_shapes() const
{
    std::vector<Shape> shapes;
    shapes.reserve(layers.size());
    Shape cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        try {
            cur = layer_output_shape(layers[i], cur);
        } catch (const ModelError& e) {
            throw ModelError("layer " + std::to_string(i) + " (" + layer_kind(layers[i]) + "): " + e.what());
        }
        shapes.push_back(cur);
    }
    return shapes;
}

void Model::validate() const
{
    if (layers.empty()) throw ModelError("model has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (const auto* d = std::get_if<Dense>(&layers[i])) {
            if (d->weight.size() != d->in_dim * d->out_dim || d->bias.size() != d->out_dim)
                throw ModelError("layer " + std::to_string(i) + ": dense parameter size mismatch");
        } else if (const auto* c = std::get_if<Conv2D>(&layers[i])) {
            if (c->weight.size() != c->out_channels * c->filter_size() || c->bias.size() != c->out_channels)
                throw ModelError("layer " + std::to_string(i) + ": conv2d parameter size mismatch");
        }
    }
    const auto shapes = output_shapes();
    if (shapes.back() != Shape{num_classes})
        throw ModelError("model output " + shape_to_string(shapes.back()) + " does not match " +
                         std::to_string(num_classes) + " classes");
    const auto params = parametric_layers();
    if (params.empty() || params.back() != layers.size() - 1)
        throw ModelError("last layer must be the parametric output layer");
}

std::vector<std::size_t> Model::parametric_layers() const
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (is_parametric(layers[i])) out.push_back(i);
    return out;
}

std::size_t Model::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& l : layers) {
        if (const auto* d = std::get_if<Dense>(&l)) n += d->weight.size() + d->bias.size();
        if (const auto* c = std::get_if<Conv2D>(&l)) n += c->weight.size() + c->bias.size();
    }
    return n;
}

Dense& Model::dense(std::size_t i)
{
    if (i >= layers.size() || !std::holds_alternative<Dense>(layers[i]))
        throw ModelError("layer " + std::to_string(i) + " is not dense");
    return std::get<Dense>(layers[i]);
}

const Dense& Model::dense(std::size_t i) const
{
    return const_cast<Model*>(this)->dense(i);
}

Conv2D& Model::conv(std::size_t i)
{
    if (i >= layers.size() || !std::holds_alternative<Conv2D>(layers[i]))
        throw ModelError("layer " + std::to_string(i) + " is not conv2d");
    return std::get<Conv2D>(layers[i]);
}

const Conv2D& Model::conv(std::size_t i) const
{
    return const_cast<Model*>(this)->conv(i);
}

bool operator==(const Dense& a, const Dense& b)
{
    return a.in_dim == b.in_dim && a.out_dim == b.out_dim && same_bits(a.weight, b.weight) &&
           same_bits(a.bias, b.bias);
}

bool operator==(const Conv2D& a, const Conv2D& b)
{
    return a.out_channels == b.out_channels && a.in_channels == b.in_channels && a.kernel_h == b.kernel_h &&
           a.kernel_w == b.kernel_w && same_bits(a.weight, b.weight) && same_bits(a.bias, b.bias);
}

bool operator==(const Model& a, const Model& b)
{
    return a.num_classes == b.num_classes && a.input_shape == b.input_shape && a.info == b.info &&
           a.layers == b.layers;
}

std::size_t unit_count(const Model& model, std::size_t layer_index)
{
    if (layer_index >= model.layers.size()) throw ModelError("layer index " + std::to_string(layer_index) + " out of range");
    const auto& l = model.layers[layer_index];
    if (const auto* d = std::get_if<Dense>(&l)) return d->out_dim;
    if (const auto* c = std::get_if<Conv2D>(&l)) return c->out_channels;
    throw ModelError("layer " + std::to_string(layer_index) + " (" + layer_kind(l) + ") has no units");
}

void check_ref(const Model& model, const NeuronRef& ref)
{
    const std::size_t units = unit_count(model, ref.layer);
    if (ref.unit >= units)
        throw ModelError("unit " + std::to_string(ref.unit) + " out of range for layer " + std::to_string(ref.layer));
    if (ref.site) {
        if (!std::holds_alternative<Conv2D>(model.layers[ref.layer]))
            throw ModelError("spatial site given for non-conv layer " + std::to_string(ref.layer));
        const auto shape = model.output_shapes()[ref.layer];
        if (ref.site->row >= shape[1] || ref.site->col >= shape[2])
            throw ModelError("site out of range for layer " + std::to_string(ref.layer));
    }
}

Dense make_dense(std::size_t in, std::size_t out, Rng& rng)
{
    Dense d{in, out, std::vector<float>(in * out), std::vector<float>(out, 0.0f)};
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    for (auto& w : d.weight) w = static_cast<float>(rng.uniform(-bound, bound));
    return d;
}

Conv2D make_conv(std::size_t out_ch, std::size_t in_ch, std::size_t kh, std::size_t kw, Rng& rng)
{
    Conv2D c{out_ch, in_ch, kh, kw, std::vector<float>(out_ch * in_ch * kh * kw), std::vector<float>(out_ch, 0.0f)};
    const double bound = std::sqrt(6.0 / static_cast<double>(in_ch * kh * kw));
    for (auto& w : c.weight) w = static_cast<float>(rng.uniform(-bound, bound));
    return c;
}

Model make_mlp(const std::vector<std::size_t>& dims, std::uint64_t seed)
{
    if (dims.size() < 2) throw ModelError("an MLP needs at least input and output sizes");
    Rng rng(seed);
    Model m;
    m.input_shape = {dims.front()};
    m.num_classes = dims.back();
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        m.layers.emplace_back(make_dense(dims[i], dims[i + 1], rng));
        if (i + 2 < dims.size()) m.layers.emplace_back(ReLU{});
    }
    m.info.name = "mlp";
    m.info.seed = seed;
    m.validate();
    return m;
}

Model make_fcn(std::size_t input_dim, std::size_t hidden, std::size_t classes, std::uint64_t seed)
{
    Model m = make_mlp({input_dim, hidden, classes}, seed);
    m.info.name = "fcn";
    return m;
}

Model make_fcn(const Shape& image_shape, std::size_t hidden, std::size_t classes, std::uint64_t seed)
{
    Model m = make_fcn(shape_size(image_shape), hidden, classes, seed);
    m.input_shape = image_shape;
    m.layers.insert(m.layers.begin(), Flatten{});
    return m;
}

Model make_small_cnn(const Shape& input_shape, std::size_t classes, std::uint64_t seed, std::size_t conv1,
                     std::size_t conv2, std::size_t kernel, std::size_t dense_units)
{
    if (input_shape.size() != 3) throw ModelError("cnn input must be CxHxW");
    Rng rng(seed);
    Model m;
    m.input_shape = input_shape;
    m.num_classes = classes;
    m.layers.emplace_back(make_conv(conv1, input_shape[0], kernel, kernel, rng));
    m.layers.emplace_back(ReLU{});
    m.layers.emplace_back(make_conv(conv2, conv1, kernel, kernel, rng));
    m.layers.emplace_back(ReLU{});
    m.layers.emplace_back(MaxPool2D{});
    m.layers.emplace_back(Flatten{});
    const std::size_t flat = m.output_shapes().back()[0];
    m.layers.emplace_back(make_dense(flat, dense_units, rng));
    m.layers.emplace_back(ReLU{});
    m.layers.emplace_back(make_dense(dense_units, classes, rng));
    m.info.name = "cnn";
    m.info.seed = seed;
    m.validate();
    return m;
}

} // namespace dfba
