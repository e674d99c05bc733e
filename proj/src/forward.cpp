#include <algorithm>
#include <cmath>
#include <limits>

#include "dfba/nn.hpp"
#include "kernels.hpp"

namespace dfba {

namespace {

struct Batch {
    std::size_t count = 0;
    bool single = false;
};

Batch batch_of(const Model& model, const Tensor& input)
{
    const Shape& s = input.shape();
    if (s == model.input_shape) return {1, true};
    if (s.size() == model.input_shape.size() + 1 && std::equal(s.begin() + 1, s.end(), model.input_shape.begin()))
        return {s[0], false};
    throw ModelError("input shape " + shape_to_string(s) + " does not match model input " +
                     shape_to_string(model.input_shape) + " (or a batch of it)");
}

Shape batched(const Shape& shape, const Batch& b)
{
    if (b.single) return shape;
    Shape out{b.count};
    out.insert(out.end(), shape.begin(), shape.end());
    return out;
}

void dense_forward(const Dense& d, const float* x, std::size_t n, float* y)
{
    for (std::size_t j = 0; j < d.out_dim; ++j) {
        const float* row = d.weight.data() + j * d.in_dim;
        for (std::size_t s = 0; s < n; ++s) y[s * d.out_dim + j] = kernels::dot(row, x + s * d.in_dim, d.in_dim) + d.bias[j];
    }
}

void conv_forward(const Conv2D& c, const Shape& in, const float* x, std::size_t n, float* y, std::vector<float>& col)
{
    const std::size_t oh = in[1] - c.kernel_h + 1;
    const std::size_t ow = in[2] - c.kernel_w + 1;
    const std::size_t plane = oh * ow;
    const std::size_t k_total = c.filter_size();
    col.resize(k_total * plane);
    const std::size_t in_size = shape_size(in);
    const std::size_t out_size = c.out_channels * plane;
    for (std::size_t s = 0; s < n; ++s) {
        kernels::im2col(x + s * in_size, in[0], in[1], in[2], c.kernel_h, c.kernel_w, col.data());
        float* out = y + s * out_size;
        std::fill(out, out + out_size, 0.0f);
        for (std::size_t k = 0; k < k_total; ++k) {
            const float* crow = col.data() + k * plane;
            for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
                const float wv = c.weight[oc * k_total + k];
                if (wv != 0.0f) kernels::axpy(wv, crow, out + oc * plane, plane);
            }
        }
        for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
            float* o = out + oc * plane;
            const float b = c.bias[oc];
            for (std::size_t p = 0; p < plane; ++p) o[p] += b;
        }
    }
}

void relu_forward(const float* x, std::size_t total, float* y)
{
    for (std::size_t i = 0; i < total; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

// Index of the window maximum; the first maximum in row-major scan order wins.
std::size_t pool_argmax(const float* plane, std::size_t w, std::size_t r, std::size_t q)
{
    std::size_t best = (2 * r) * w + 2 * q;
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            const std::size_t idx = (2 * r + i) * w + 2 * q + j;
            if (plane[idx] > plane[best]) best = idx;
        }
    return best;
}

void pool_forward(const Shape& in, const float* x, std::size_t n, float* y)
{
    const std::size_t c = in[0], h = in[1], w = in[2];
    const std::size_t ph = h / 2, pw = w / 2;
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const float* plane = x + (s * c + ch) * h * w;
            float* out = y + (s * c + ch) * ph * pw;
            for (std::size_t r = 0; r < ph; ++r)
                for (std::size_t q = 0; q < pw; ++q) out[r * pw + q] = plane[pool_argmax(plane, w, r, q)];
        }
}

// Runs every layer; outputs[i] holds layer i's output for the whole batch.
// With keep_all false only the final output is retained.
std::vector<std::vector<float>> run_layers(const Model& model, const float* input, std::size_t n, bool keep_all,
                                           std::size_t last = std::numeric_limits<std::size_t>::max())
{
    const auto shapes = model.output_shapes();
    std::vector<std::vector<float>> outputs(model.layers.size());
    std::vector<float> col;
    const float* cur = input;
    Shape cur_shape = model.input_shape;
    for (std::size_t i = 0; i < model.layers.size() && i <= last; ++i) {
        const std::size_t total = n * shape_size(shapes[i]);
        auto& out = outputs[i];
        out.resize(total);
        const Layer& layer = model.layers[i];
        if (const auto* d = std::get_if<Dense>(&layer)) {
            dense_forward(*d, cur, n, out.data());
        } else if (const auto* c = std::get_if<Conv2D>(&layer)) {
            conv_forward(*c, cur_shape, cur, n, out.data(), col);
        } else if (std::holds_alternative<ReLU>(layer)) {
            relu_forward(cur, total, out.data());
        } else if (std::holds_alternative<MaxPool2D>(layer)) {
            pool_forward(cur_shape, cur, n, out.data());
        } else {
            std::copy(cur, cur + total, out.data());
        }
        if (!keep_all && i > 0) outputs[i - 1] = {};
        cur = out.data();
        cur_shape = shapes[i];
    }
    return outputs;
}

void check_labels(const Model& model, std::span<const std::size_t> labels, std::size_t n)
{
    if (labels.size() != n)
        throw ModelError("got " + std::to_string(labels.size()) + " labels for a batch of " + std::to_string(n));
    for (auto y : labels)
        if (y >= model.num_classes)
            throw ModelError("label " + std::to_string(y) + " out of range for " + std::to_string(model.num_classes) +
                             " classes");
}

// Mean softmax cross-entropy; fills dlogits (already divided by n) when non-null.
double softmax_xent(const float* logits, std::span<const std::size_t> labels, std::size_t n, std::size_t classes,
                    float* dlogits)
{
    double total = 0.0;
    std::vector<double> p(classes);
    for (std::size_t s = 0; s < n; ++s) {
        const float* z = logits + s * classes;
        double m = z[0];
        for (std::size_t c = 1; c < classes; ++c) m = std::max(m, static_cast<double>(z[c]));
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            p[c] = std::exp(static_cast<double>(z[c]) - m);
            sum += p[c];
        }
        total += std::log(sum) + m - static_cast<double>(z[labels[s]]);
        if (dlogits) {
            for (std::size_t c = 0; c < classes; ++c) {
                const double g = p[c] / sum - (c == labels[s] ? 1.0 : 0.0);
                dlogits[s * classes + c] = static_cast<float>(g / static_cast<double>(n));
            }
        }
    }
    return total / static_cast<double>(n);
}

} // namespace

ForwardResult forward(const Model& model, const Tensor& input, bool record)
{
    const Batch b = batch_of(model, input);
    auto outputs = run_layers(model, input.data(), b.count, record);
    const auto shapes = model.output_shapes();
    ForwardResult result;
    result.logits = Tensor(batched({model.num_classes}, b), outputs.back());
    if (record) {
        result.activations.reserve(outputs.size());
        for (std::size_t i = 0; i < outputs.size(); ++i)
            result.activations.emplace_back(batched(shapes[i], b), std::move(outputs[i]));
    }
    return result;
}

Tensor forward_to(const Model& model, const Tensor& input, std::size_t last_layer)
{
    if (last_layer >= model.layers.size())
        throw ModelError("layer index " + std::to_string(last_layer) + " out of range");
    const Batch b = batch_of(model, input);
    auto outputs = run_layers(model, input.data(), b.count, false, last_layer);
    return Tensor(batched(model.output_shapes()[last_layer], b), std::move(outputs[last_layer]));
}

std::size_t argmax(std::span<const float> values)
{
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[best]) best = i;
    return best;
}

std::vector<std::size_t> predict(const Model& model, const Tensor& input)
{
    const Batch b = batch_of(model, input);
    const auto logits = forward(model, input).logits;
    std::vector<std::size_t> out(b.count);
    for (std::size_t s = 0; s < b.count; ++s)
        out[s] = argmax(logits.values().subspan(s * model.num_classes, model.num_classes));
    return out;
}

double loss(const Model& model, const Tensor& input, std::span<const std::size_t> labels)
{
    const Batch b = batch_of(model, input);
    check_labels(model, labels, b.count);
    const auto logits = forward(model, input).logits;
    return softmax_xent(logits.data(), labels, b.count, model.num_classes, nullptr);
}

Gradients backward(const Model& model, const Tensor& input, std::size_t label)
{
    const std::size_t labels[1] = {label};
    return backward(model, input, labels);
}

Gradients backward(const Model& model, const Tensor& input, std::span<const std::size_t> labels)
{
    const Batch b = batch_of(model, input);
    const std::size_t n = b.count;
    check_labels(model, labels, n);
    const auto shapes = model.output_shapes();
    const auto outputs = run_layers(model, input.data(), n, true);

    Gradients g;
    g.layers.resize(model.layers.size());
    std::vector<float> grad(n * model.num_classes);
    g.loss = softmax_xent(outputs.back().data(), labels, n, model.num_classes, grad.data());

    std::vector<float> col, dcol, next;
    for (std::size_t i = model.layers.size(); i-- > 0;) {
        const Shape& in_shape = i == 0 ? model.input_shape : shapes[i - 1];
        const float* x = i == 0 ? input.data() : outputs[i - 1].data();
        const std::size_t in_size = shape_size(in_shape);
        const std::size_t out_size = shape_size(shapes[i]);
        next.assign(n * in_size, 0.0f);
        const Layer& layer = model.layers[i];

        if (const auto* d = std::get_if<Dense>(&layer)) {
            auto& lg = g.layers[i];
            lg.weight.assign(d->weight.size(), 0.0f);
            lg.bias.assign(d->out_dim, 0.0f);
            for (std::size_t j = 0; j < d->out_dim; ++j) {
                const float* row = d->weight.data() + j * d->in_dim;
                float* grow = lg.weight.data() + j * d->in_dim;
                float db = 0.0f;
                for (std::size_t s = 0; s < n; ++s) {
                    const float gy = grad[s * out_size + j];
                    if (gy == 0.0f) continue;
                    db += gy;
                    kernels::axpy(gy, x + s * in_size, grow, d->in_dim);
                    kernels::axpy(gy, row, next.data() + s * in_size, d->in_dim);
                }
                lg.bias[j] = db;
            }
        } else if (const auto* c = std::get_if<Conv2D>(&layer)) {
            auto& lg = g.layers[i];
            lg.weight.assign(c->weight.size(), 0.0f);
            lg.bias.assign(c->out_channels, 0.0f);
            const std::size_t plane = shapes[i][1] * shapes[i][2];
            const std::size_t k_total = c->filter_size();
            col.resize(k_total * plane);
            dcol.resize(k_total * plane);
            for (std::size_t s = 0; s < n; ++s) {
                const float* gy = grad.data() + s * out_size;
                kernels::im2col(x + s * in_size, in_shape[0], in_shape[1], in_shape[2], c->kernel_h, c->kernel_w,
                                col.data());
                std::fill(dcol.begin(), dcol.end(), 0.0f);
                for (std::size_t oc = 0; oc < c->out_channels; ++oc) {
                    const float* go = gy + oc * plane;
                    float sum = 0.0f;
                    for (std::size_t p = 0; p < plane; ++p) sum += go[p];
                    lg.bias[oc] += sum;
                    for (std::size_t k = 0; k < k_total; ++k) {
                        lg.weight[oc * k_total + k] += kernels::dot(go, col.data() + k * plane, plane);
                        const float wv = c->weight[oc * k_total + k];
                        if (wv != 0.0f) kernels::axpy(wv, go, dcol.data() + k * plane, plane);
                    }
                }
                kernels::col2im(dcol.data(), in_shape[0], in_shape[1], in_shape[2], c->kernel_h, c->kernel_w,
                                next.data() + s * in_size);
            }
        } else if (std::holds_alternative<ReLU>(layer)) {
            const float* y = outputs[i].data();
            for (std::size_t k = 0; k < n * in_size; ++k) next[k] = y[k] > 0.0f ? grad[k] : 0.0f;
        } else if (std::holds_alternative<MaxPool2D>(layer)) {
            const std::size_t ch = in_shape[0], h = in_shape[1], w = in_shape[2];
            const std::size_t ph = h / 2, pw = w / 2;
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t c2 = 0; c2 < ch; ++c2) {
                    const float* plane = x + (s * ch + c2) * h * w;
                    float* dplane = next.data() + (s * ch + c2) * h * w;
                    const float* gp = grad.data() + (s * ch + c2) * ph * pw;
                    for (std::size_t r = 0; r < ph; ++r)
                        for (std::size_t q = 0; q < pw; ++q) dplane[pool_argmax(plane, w, r, q)] += gp[r * pw + q];
                }
        } else {
            next = grad;
        }
        grad.swap(next);
    }
    g.input_grad = Tensor(input.shape(), std::move(grad));
    return g;
}

} // namespace dfba
