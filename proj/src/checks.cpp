#include <algorithm>
#include <cmath>

#include "dfba/attack.hpp"
#include "dfba/checks.hpp"
#include "dfba/nn.hpp"
#include "dfba/rng.hpp"

namespace dfba {

namespace {

// Plain double-precision forward pass. Shares nothing with the float kernels.
struct RefEval {
    std::vector<double> logits;
    std::vector<std::uint32_t> kinks;
};

RefEval ref_run(const Model& m, const std::vector<std::vector<double>>& w, const std::vector<std::vector<double>>& b,
                const std::vector<double>& input)
{
    RefEval e;
    std::vector<double> x = input;
    Shape shape = m.input_shape;
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        const auto& l = m.layers[li];
        if (const auto* d = std::get_if<Dense>(&l)) {
            std::vector<double> y(d->out_dim);
            for (std::size_t j = 0; j < d->out_dim; ++j) {
                double s = b[li][j];
                for (std::size_t i = 0; i < d->in_dim; ++i) s += w[li][j * d->in_dim + i] * x[i];
                y[j] = s;
            }
            x = std::move(y);
            shape = {d->out_dim};
        } else if (const auto* c = std::get_if<Conv2D>(&l)) {
            const std::size_t H = shape[1], W = shape[2];
            const std::size_t oh = H - c->kernel_h + 1, ow = W - c->kernel_w + 1;
            std::vector<double> y(c->out_channels * oh * ow);
            for (std::size_t o = 0; o < c->out_channels; ++o)
                for (std::size_t r = 0; r < oh; ++r)
                    for (std::size_t q = 0; q < ow; ++q) {
                        double s = b[li][o];
                        for (std::size_t ic = 0; ic < c->in_channels; ++ic)
                            for (std::size_t i = 0; i < c->kernel_h; ++i)
                                for (std::size_t j = 0; j < c->kernel_w; ++j)
                                    s += w[li][((o * c->in_channels + ic) * c->kernel_h + i) * c->kernel_w + j] *
                                         x[(ic * H + r + i) * W + q + j];
                        y[(o * oh + r) * ow + q] = s;
                    }
            x = std::move(y);
            shape = {c->out_channels, oh, ow};
        } else if (std::holds_alternative<ReLU>(l)) {
            for (auto& v : x) {
                e.kinks.push_back(v > 0.0);
                v = std::max(v, 0.0);
            }
        } else if (std::holds_alternative<MaxPool2D>(l)) {
            const std::size_t C = shape[0], H = shape[1], W = shape[2], oh = H / 2, ow = W / 2;
            std::vector<double> y(C * oh * ow);
            for (std::size_t ch = 0; ch < C; ++ch)
                for (std::size_t r = 0; r < oh; ++r)
                    for (std::size_t q = 0; q < ow; ++q) {
                        double best = x[(ch * H + 2 * r) * W + 2 * q];
                        std::uint32_t arg = 0;
                        for (std::uint32_t k = 1; k < 4; ++k) {
                            const double v = x[(ch * H + 2 * r + k / 2) * W + 2 * q + k % 2];
                            if (v > best) best = v, arg = k;
                        }
                        e.kinks.push_back(arg);
                        y[(ch * oh + r) * ow + q] = best;
                    }
            x = std::move(y);
            shape = {C, oh, ow};
        } else {
            shape = {x.size()};
        }
    }
    e.logits = std::move(x);
    return e;
}

double xent(const std::vector<double>& logits, std::size_t label)
{
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    return std::log(z) + mx - logits[label];
}

Tensor uniform_tensor(const Shape& shape, Rng& rng)
{
    Tensor t(shape);
    for (auto& v : t.values()) v = static_cast<float>(rng.uniform());
    return t;
}

} // namespace

GradCheck gradient_check(const Model& model, const Tensor& x, std::size_t label, double h)
{
    const Gradients g = backward(model, x, label);
    std::vector<std::vector<double>> w, b;
    for (const auto& l : model.layers) {
        if (const auto* d = std::get_if<Dense>(&l)) {
            w.emplace_back(d->weight.begin(), d->weight.end());
            b.emplace_back(d->bias.begin(), d->bias.end());
        } else if (const auto* c = std::get_if<Conv2D>(&l)) {
            w.emplace_back(c->weight.begin(), c->weight.end());
            b.emplace_back(c->bias.begin(), c->bias.end());
        } else {
            w.emplace_back();
            b.emplace_back();
        }
    }
    std::vector<double> xin(x.values().begin(), x.values().end());
    const auto base = ref_run(model, w, b, xin).kinks;
    GradCheck out;
    auto probe = [&](double& slot, double analytic, const std::vector<double>& input) {
        const double keep = slot;
        slot = keep + h;
        const auto ep = ref_run(model, w, b, input);
        slot = keep - h;
        const auto em = ref_run(model, w, b, input);
        slot = keep;
        if (ep.kinks != base || em.kinks != base) {
            ++out.skipped;
            return;
        }
        const double fd = (xent(ep.logits, label) - xent(em.logits, label)) / (2 * h);
        out.worst = std::max(out.worst, std::fabs(analytic - fd) / std::max({std::fabs(analytic), std::fabs(fd), 1e-2}));
        ++out.checked;
    };
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        for (std::size_t k = 0; k < w[li].size(); ++k) probe(w[li][k], g.layers[li].weight[k], xin);
        for (std::size_t k = 0; k < b[li].size(); ++k) probe(b[li][k], g.layers[li].bias[k], xin);
    }
    for (std::size_t k = 0; k < xin.size(); ++k) {
        std::vector<double> moved = xin;
        double& slot = moved[k];
        const double keep = slot;
        slot = keep + h;
        const auto ep = ref_run(model, w, b, moved);
        slot = keep - h;
        const auto em = ref_run(model, w, b, moved);
        if (ep.kinks != base || em.kinks != base) {
            ++out.skipped;
            continue;
        }
        const double an = g.input_grad.values()[k];
        const double fd = (xent(ep.logits, label) - xent(em.logits, label)) / (2 * h);
        out.worst = std::max(out.worst, std::fabs(an - fd) / std::max({std::fabs(an), std::fabs(fd), 1e-2}));
        ++out.checked;
    }
    return out;
}

Model random_check_net(std::uint64_t seed)
{
    Rng rng(seed);
    Model m;
    m.input_shape = {1, 8, 8};
    m.num_classes = 3;
    m.layers = {make_conv(2, 1, 3, 3, rng), ReLU{}, make_conv(3, 2, 2, 2, rng), ReLU{}, MaxPool2D{}, Flatten{},
                make_dense(12, 5, rng), ReLU{}, make_dense(5, 3, rng)};
    for (auto& l : m.layers) {
        if (auto* d = std::get_if<Dense>(&l))
            for (auto& v : d->bias) v = static_cast<float>(rng.uniform(-0.1, 0.1));
        if (auto* c = std::get_if<Conv2D>(&l))
            for (auto& v : c->bias) v = static_cast<float>(rng.uniform(-0.1, 0.1));
    }
    m.validate();
    return m;
}

GradCheck gradient_check_sweep(std::uint64_t first, std::size_t count)
{
    GradCheck total;
    for (std::uint64_t seed = first; seed < first + count; ++seed) {
        Rng rng(seed + 100);
        for (const auto& r : {gradient_check(random_check_net(seed), uniform_tensor({1, 8, 8}, rng), seed % 3),
                              gradient_check(make_mlp({7, 6, 5, 4}, seed), uniform_tensor({7}, rng), seed % 4)}) {
            total.worst = std::max(total.worst, r.worst);
            total.checked += r.checked;
            total.skipped += r.skipped;
        }
    }
    return total;
}

GridCheck switch_grid_check(std::uint64_t seed, float lambda, std::size_t steps)
{
    Rng rng(seed);
    Model m;
    m.input_shape = {1, 1, 2};
    m.num_classes = 2;
    const float w0 = static_cast<float>(rng.uniform(-1, 1)), w1 = static_cast<float>(rng.uniform(-1, 1));
    m.layers = {Flatten{}, Dense{2, 1, {w0, w1}, {0.3f}}, ReLU{}, Dense{1, 2, {0.5f, -0.5f}, {0.0f, 0.0f}}};
    const auto t0 = make_trigger(m.input_shape, Rect{0, 0, 1, 2}, "full");
    const auto path = select_path(m, t0, seed);
    const auto t = optimize_trigger(m, path, t0);
    const Model s = install_switch(m, path, t, lambda);
    const auto w = switch_weights(s, path, t);
    GridCheck out;
    const double denom = static_cast<double>(steps - 1);
    for (std::size_t i = 0; i < steps; ++i)
        for (std::size_t j = 0; j < steps; ++j) {
            const std::vector<float> x{static_cast<float>(i / denom), static_cast<float>(j / denom)};
            const bool fired = forward_to(s, Tensor(m.input_shape, x), 2).values()[0] > 0.0f;
            out.activating += fired;
            out.mismatches += fired != switch_activates(t, lambda, w, x);
            ++out.points;
        }
    return out;
}

GridCheck closed_form_grid_check(std::uint64_t seed, std::size_t e, std::size_t points)
{
    Rng rng(seed);
    std::vector<float> w(e), lo(e, 0.0f), hi(e, 1.0f);
    for (auto& v : w) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    const auto delta = closed_form_pattern(w, lo, hi);
    double best = 0.0;
    for (std::size_t n = 0; n < e; ++n) best += double(w[n]) * delta[n];
    GridCheck out;
    std::vector<std::size_t> idx(e, 0);
    for (;;) {
        double s = 0.0;
        for (std::size_t n = 0; n < e; ++n) s += double(w[n]) * (static_cast<double>(idx[n]) / double(points - 1));
        out.mismatches += s > best;
        ++out.points;
        std::size_t n = 0;
        while (n < e && ++idx[n] == points) idx[n++] = 0;
        if (n == e) break;
    }
    return out;
}

} // namespace dfba
