#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <set>

#include "dfba/attack.hpp"
#include "dfba/rng.hpp"
#include "dfba/trainer.hpp"
#include "text.hpp"

namespace dfba {

namespace {

constexpr std::size_t kChunk = 256;

std::vector<std::size_t> parametric_indices(const Model& model)
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < model.layers.size(); ++i)
        if (is_parametric(model.layers[i])) out.push_back(i);
    return out;
}

Shape input_shape_of(const Model& model, const std::vector<Shape>& shapes, std::size_t layer)
{
    return layer == 0 ? model.input_shape : shapes[layer - 1];
}

std::vector<float>& weights_of(Model& m, std::size_t layer)
{
    if (auto* d = std::get_if<Dense>(&m.layers[layer])) return d->weight;
    return std::get<Conv2D>(m.layers[layer]).weight;
}

std::vector<float>& biases_of(Model& m, std::size_t layer)
{
    if (auto* d = std::get_if<Dense>(&m.layers[layer])) return d->bias;
    return std::get<Conv2D>(m.layers[layer]).bias;
}

std::size_t fan_in(const Model& m, std::size_t layer)
{
    if (const auto* d = std::get_if<Dense>(&m.layers[layer])) return d->in_dim;
    return std::get<Conv2D>(m.layers[layer]).filter_size();
}

// Where the previous path neuron's value sits in the current tensor.
struct Loc {
    bool spatial = false;
    std::size_t ch = 0, row = 0, col = 0;
    std::size_t flat = 0;
};

// Moves loc through the non-parametric layers strictly between `from` and `to`.
// Returns false if a pooling layer drops the location.
bool pass_through(const Model& m, const std::vector<Shape>& shapes, std::size_t from, std::size_t to, Loc& loc)
{
    for (std::size_t i = from + 1; i < to; ++i) {
        const Shape& in = input_shape_of(m, shapes, i);
        if (std::holds_alternative<MaxPool2D>(m.layers[i])) {
            const std::size_t r = loc.row / 2, c = loc.col / 2;
            if (r >= in[1] / 2 || c >= in[2] / 2) return false;
            loc.row = r;
            loc.col = c;
        } else if (std::holds_alternative<Flatten>(m.layers[i]) && loc.spatial) {
            loc.flat = (loc.ch * in[1] + loc.row) * in[2] + loc.col;
            loc.spatial = false;
        }
    }
    return true;
}

// Weight index in the switch filter/row for every support element.
std::vector<std::size_t> support_weight_index(const Model& m, const BackdoorPath& path, const TriggerSpec& t)
{
    const NeuronRef& s = path.switch_neuron();
    std::vector<std::size_t> idx;
    idx.reserve(t.support.size());
    if (const auto* d = std::get_if<Dense>(&m.layers[s.layer])) {
        if (d->in_dim != shape_size(t.image_shape))
            throw AttackError("switch layer reads " + std::to_string(d->in_dim) + " features but the trigger covers " +
                              std::to_string(shape_size(t.image_shape)));
        for (auto n : t.support) idx.push_back(s.unit * d->in_dim + n);
        return idx;
    }
    const auto& c = std::get<Conv2D>(m.layers[s.layer]);
    if (!s.site) throw AttackError("conv switch needs a spatial site");
    const std::size_t H = t.image_shape[1], W = t.image_shape[2];
    for (auto n : t.support) {
        const std::size_t ch = n / (H * W), r = (n / W) % H, q = n % W;
        if (r < s.site->row || q < s.site->col || r - s.site->row >= c.kernel_h || q - s.site->col >= c.kernel_w)
            throw AttackError("trigger pixel (" + std::to_string(r) + "," + std::to_string(q) +
                              ") lies outside the switch receptive field");
        idx.push_back(((s.unit * c.in_channels + ch) * c.kernel_h + (r - s.site->row)) * c.kernel_w +
                      (q - s.site->col));
    }
    return idx;
}

struct Wiring {
    // Weight index of the link from path neuron k-1 into path neuron k (k >= 1).
    std::vector<std::size_t> links;
    std::size_t output_layer = 0;
    std::size_t output_column = 0;
};

Wiring wiring(const Model& m, const BackdoorPath& path)
{
    const auto ps = parametric_indices(m);
    if (ps.size() < 2) throw AttackError("the model needs at least one hidden parametric layer");
    if (path.neurons.size() != ps.size() - 1)
        throw AttackError("path has " + std::to_string(path.neurons.size()) + " neurons, expected " +
                          std::to_string(ps.size() - 1));
    for (std::size_t k = 0; k < path.neurons.size(); ++k) {
        if (path.neurons[k].layer != ps[k])
            throw AttackError("path neuron " + std::to_string(k) + " is not on parametric layer " + std::to_string(ps[k]));
        check_ref(m, path.neurons[k]);
    }
    const auto shapes = m.output_shapes();
    Wiring w;
    w.links.assign(path.neurons.size(), 0);
    Loc loc;
    const NeuronRef& s = path.switch_neuron();
    if (std::holds_alternative<Conv2D>(m.layers[s.layer])) {
        if (!s.site) throw AttackError("conv switch needs a spatial site");
        loc = Loc{true, s.unit, s.site->row, s.site->col, 0};
    } else {
        loc.flat = s.unit;
    }
    for (std::size_t k = 1; k < ps.size(); ++k) {
        if (!pass_through(m, shapes, ps[k - 1], ps[k], loc))
            throw AttackError("pooling before layer " + std::to_string(ps[k]) + " drops the path site");
        const Layer& l = m.layers[ps[k]];
        const bool output = k + 1 == ps.size();
        if (const auto* d = std::get_if<Dense>(&l)) {
            if (loc.spatial) throw AttackError("dense layer " + std::to_string(ps[k]) + " reads a spatial map");
            if (output) {
                w.output_layer = ps[k];
                w.output_column = loc.flat;
                break;
            }
            w.links[k] = path.neurons[k].unit * d->in_dim + loc.flat;
            loc = Loc{false, 0, 0, 0, path.neurons[k].unit};
            continue;
        }
        if (output) throw AttackError("the output layer must be dense");
        const auto& c = std::get<Conv2D>(l);
        const auto& site = path.neurons[k].site;
        if (!loc.spatial || !site) throw AttackError("conv path neuron " + std::to_string(k) + " needs a spatial site");
        if (loc.row < site->row || loc.col < site->col || loc.row - site->row >= c.kernel_h ||
            loc.col - site->col >= c.kernel_w)
            throw AttackError("path site of layer " + std::to_string(ps[k]) + " does not see the previous path neuron");
        w.links[k] = ((path.neurons[k].unit * c.in_channels + loc.ch) * c.kernel_h + (loc.row - site->row)) * c.kernel_w +
                     (loc.col - site->col);
        loc = Loc{true, path.neurons[k].unit, site->row, site->col, 0};
    }
    return w;
}

// Places path neurons k.. given the location of neuron k-1; backtracks over conv sites.
bool complete_path(const Model& m, const std::vector<Shape>& shapes, const std::vector<std::size_t>& ps,
                   const std::vector<std::size_t>& units, std::size_t k, Loc loc, BackdoorPath& path)
{
    if (!pass_through(m, shapes, ps[k - 1], ps[k], loc)) return false;
    const Layer& l = m.layers[ps[k]];
    if (k + 1 == ps.size()) {
        if (!std::holds_alternative<Dense>(l)) throw AttackError("the output layer must be dense");
        return !loc.spatial;
    }
    if (std::holds_alternative<Dense>(l)) {
        if (loc.spatial) return false;
        path.neurons.push_back({ps[k], units[k], std::nullopt});
        if (complete_path(m, shapes, ps, units, k + 1, Loc{false, 0, 0, 0, units[k]}, path)) return true;
        path.neurons.pop_back();
        return false;
    }
    const auto& c = std::get<Conv2D>(l);
    const Shape& out = shapes[ps[k]];
    if (!loc.spatial) return false;
    const std::size_t r_hi = std::min(loc.row, out[1] - 1), c_hi = std::min(loc.col, out[2] - 1);
    const std::size_t r_lo = loc.row + 1 >= c.kernel_h ? loc.row + 1 - c.kernel_h : 0;
    const std::size_t c_lo = loc.col + 1 >= c.kernel_w ? loc.col + 1 - c.kernel_w : 0;
    for (std::size_t r = r_hi + 1; r-- > r_lo;)
        for (std::size_t q = c_hi + 1; q-- > c_lo;) {
            path.neurons.push_back({ps[k], units[k], Site{r, q}});
            if (complete_path(m, shapes, ps, units, k + 1, Loc{true, units[k], r, q, 0}, path)) return true;
            path.neurons.pop_back();
        }
    return false;
}

// Bias that puts the switch pre-activation on a triggered input as close to
// lambda as float arithmetic allows, given the installed weights.
float solve_switch_bias(Model& m, const BackdoorPath& path, const TriggerSpec& t, float lambda)
{
    const NeuronRef& s = path.switch_neuron();
    std::vector<float> probe = t.bounds.lower;
    apply_trigger_in_place(probe, t);
    auto& bias = biases_of(m, s.layer)[s.unit];
    auto measure = [&](float b) {
        bias = b;
        const Tensor out = forward_to(m, Tensor(m.input_shape, probe), s.layer);
        if (!s.site) return out.values()[s.unit];
        const Shape& sh = out.shape();
        return out.values()[(s.unit * sh[1] + s.site->row) * sh[2] + s.site->col];
    };
    const float sum = measure(0.0f);
    float best = lambda - sum;
    float err = std::fabs(measure(best) - lambda);
    for (int step = 0; step < 8 && err > 0.0f; ++step) {
        bool moved = false;
        for (float dir : {std::numeric_limits<float>::infinity(), -std::numeric_limits<float>::infinity()}) {
            const float cand = std::nextafter(best, dir);
            const float e = std::fabs(measure(cand) - lambda);
            if (e < err) {
                err = e;
                best = cand;
                moved = true;
            }
        }
        if (!moved) break;
    }
    bias = best;
    return best;
}

std::size_t count_changes(const Model& a, const Model& b) { return ParamDelta::between(a, b).changed(); }

} // namespace

std::string to_string(Variant v)
{
    switch (v) {
    case Variant::standard: return "standard";
    case Variant::fineprune_evasion: return "fineprune-evasion";
    case Variant::lipschitz_evasion: return "lipschitz-evasion";
    case Variant::zero_weight_obfuscation: return "zero-weight-obfuscation";
    }
    return "?";
}

Variant variant_from_string(const std::string& s)
{
    for (Variant v : {Variant::standard, Variant::fineprune_evasion, Variant::lipschitz_evasion,
                      Variant::zero_weight_obfuscation})
        if (to_string(v) == s) return v;
    throw AttackError("unknown attack variant '" + s +
                      "' (expected standard, fineprune-evasion, lipschitz-evasion or zero-weight-obfuscation)");
}

void AttackConfig::validate() const
{
    if (!(lambda > 0.0f) || !std::isfinite(lambda)) throw AttackError("lambda must be a positive finite number");
    if (gamma && (!(*gamma > 0.0f) || !std::isfinite(*gamma))) throw AttackError("gamma must be a positive finite number");
    if (trigger_h == 0 || trigger_w == 0) throw AttackError("trigger size must be positive");
    if (variant == Variant::fineprune_evasion && !(sigma_g > 0.0))
        throw AttackError("fine-pruning evasion needs sigma_g > 0 (zero std leaves all trigger weights at 0)");
    if (gamma_mid && !(*gamma_mid > 0.0f)) throw AttackError("gamma_mid must be positive");
    if (out_gain && !(*out_gain > 0.0f)) throw AttackError("out_gain must be positive");
    if (!(margin > 0.0)) throw AttackError("margin must be positive");
    if (sigma_n < 0.0) throw AttackError("sigma_n must be non-negative");
}

std::size_t parametric_depth(const Model& model) { return parametric_indices(model).size(); }

float auto_gamma(float lambda, std::size_t depth)
{
    if (depth < 2) throw AttackError("amplification needs at least two parametric layers");
    if (!(lambda > 0.0f)) throw AttackError("lambda must be positive");
    return static_cast<float>(std::pow(100.0 / static_cast<double>(lambda), 1.0 / static_cast<double>(depth - 1)));
}

std::string BackdoorPath::encode() const
{
    std::string out;
    for (std::size_t k = 0; k < neurons.size(); ++k) {
        if (k) out += ';';
        out += std::to_string(neurons[k].layer) + ':' + std::to_string(neurons[k].unit);
        if (neurons[k].site)
            out += '@' + std::to_string(neurons[k].site->row) + ',' + std::to_string(neurons[k].site->col);
    }
    return out;
}

BackdoorPath BackdoorPath::decode(const std::string& s)
{
    BackdoorPath p;
    if (s.empty()) return p;
    try {
        for (const auto& item : text::split(s, ';')) {
            const auto at = item.find('@');
            const auto head = text::split(item.substr(0, at), ':');
            if (head.size() != 2) throw std::invalid_argument(item);
            NeuronRef r{text::parse_size(head[0]), text::parse_size(head[1]), std::nullopt};
            if (at != std::string::npos) {
                const auto rc = text::split(item.substr(at + 1), ',');
                if (rc.size() != 2) throw std::invalid_argument(item);
                r.site = Site{text::parse_size(rc[0]), text::parse_size(rc[1])};
            }
            p.neurons.push_back(r);
        }
    } catch (const std::invalid_argument&) {
        throw AttackError("malformed backdoor path '" + s + "'");
    }
    return p;
}

BackdoorPath select_path(const Model& model, const TriggerSpec& trigger, std::uint64_t seed)
{
    model.validate();
    trigger.validate();
    if (trigger.support.empty()) throw AttackError("trigger mask is empty");
    if (trigger.image_shape != model.input_shape)
        throw AttackError("trigger shape " + shape_to_string(trigger.image_shape) + " does not match model input " +
                          shape_to_string(model.input_shape));
    const auto ps = parametric_indices(model);
    if (ps.size() < 2) throw AttackError("the model needs at least one hidden parametric layer");
    for (std::size_t i = 0; i < ps[0]; ++i)
        if (!std::holds_alternative<Flatten>(model.layers[i]))
            throw AttackError("only Flatten may precede the first parametric layer");

    Rng rng(seed);
    std::vector<std::size_t> units(ps.size() - 1);
    for (std::size_t k = 0; k < units.size(); ++k) units[k] = rng.index(unit_count(model, ps[k]));

    const auto shapes = model.output_shapes();
    BackdoorPath path;
    const Layer& first = model.layers[ps[0]];
    if (std::holds_alternative<Dense>(first)) {
        path.neurons.push_back({ps[0], units[0], std::nullopt});
        if (!complete_path(model, shapes, ps, units, 1, Loc{false, 0, 0, 0, units[0]}, path))
            throw AttackError("no backdoor path reaches the output layer");
        return path;
    }

    const auto& c = std::get<Conv2D>(first);
    const Rect& g = trigger.geometry;
    const std::size_t H = model.input_shape[1], W = model.input_shape[2];
    if (g.height > c.kernel_h || g.width > c.kernel_w)
        throw AttackError("trigger " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                          " cannot be covered by one receptive field of layer " + std::to_string(ps[0]) + " (kernel " +
                          std::to_string(c.kernel_h) + "x" + std::to_string(c.kernel_w) + "); a kernel of at least " +
                          std::to_string(g.height) + "x" + std::to_string(g.width) + " is required");
    const std::size_t r_lo = g.top + g.height > c.kernel_h ? g.top + g.height - c.kernel_h : 0;
    const std::size_t c_lo = g.left + g.width > c.kernel_w ? g.left + g.width - c.kernel_w : 0;
    const std::size_t r_hi = std::min(g.top, H - c.kernel_h), c_hi = std::min(g.left, W - c.kernel_w);
    for (std::size_t r = r_lo; r <= r_hi; ++r)
        for (std::size_t q = c_lo; q <= c_hi; ++q) {
            path.neurons = {{ps[0], units[0], Site{r, q}}};
            if (complete_path(model, shapes, ps, units, 1, Loc{true, units[0], r, q, 0}, path)) return path;
        }
    throw AttackError("no switch site covering the trigger leads to a valid path through the pooling layers");
}

std::vector<float> switch_weights(const Model& model, const BackdoorPath& path, const TriggerSpec& trigger)
{
    const auto idx = support_weight_index(model, path, trigger);
    const auto& w = weights_of(const_cast<Model&>(model), path.switch_neuron().layer);
    std::vector<float> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(w[i]);
    return out;
}

std::vector<float> closed_form_pattern(std::span<const float> w, std::span<const float> lower,
                                       std::span<const float> upper)
{
    if (w.size() != lower.size() || w.size() != upper.size()) throw AttackError("pattern inputs differ in length");
    std::vector<float> d(w.size());
    for (std::size_t k = 0; k < w.size(); ++k) d[k] = w[k] <= 0.0f ? lower[k] : upper[k];
    return d;
}

TriggerSpec optimize_trigger(const Model& model, const BackdoorPath& path, TriggerSpec trigger)
{
    const auto w = switch_weights(model, path, trigger);
    std::vector<float> lo, hi;
    for (auto n : trigger.support) {
        lo.push_back(trigger.bounds.lower[n]);
        hi.push_back(trigger.bounds.upper[n]);
    }
    const auto d = closed_form_pattern(w, lo, hi);
    for (std::size_t k = 0; k < d.size(); ++k) trigger.pattern[trigger.support[k]] = d[k];
    return trigger;
}

Model install_switch(const Model& model, const BackdoorPath& path, const TriggerSpec& trigger, float lambda)
{
    if (!(lambda > 0.0f)) throw AttackError("lambda must be positive");
    Model m = model;
    const NeuronRef& s = path.switch_neuron();
    const auto keep = support_weight_index(m, path, trigger);
    const std::set<std::size_t> kept(keep.begin(), keep.end());
    auto& w = weights_of(m, s.layer);
    const std::size_t fi = fan_in(m, s.layer);
    for (std::size_t i = s.unit * fi; i < (s.unit + 1) * fi; ++i)
        if (!kept.count(i)) w[i] = 0.0f;
    solve_switch_bias(m, path, trigger, lambda);
    return m;
}

bool switch_activates(const TriggerSpec& trigger, float lambda, std::span<const float> w, std::span<const float> x)
{
    if (w.size() != trigger.support.size()) throw AttackError("switch weights do not match the trigger support");
    if (x.size() != trigger.mask.size()) throw AttackError("input size does not match the trigger");
    double dev = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
        const std::size_t n = trigger.support[k];
        dev += std::fabs(static_cast<double>(w[k]) * (static_cast<double>(x[n]) - trigger.pattern[n]));
    }
    return dev < static_cast<double>(lambda);
}

Model install_amplifiers(const Model& model, const BackdoorPath& path, std::span<const float> gammas)
{
    const Wiring wr = wiring(model, path);
    if (gammas.size() + 1 != path.neurons.size())
        throw AttackError("need " + std::to_string(path.neurons.size() - 1) + " amplification factors, got " +
                          std::to_string(gammas.size()));
    Model m = model;
    for (std::size_t k = 1; k < path.neurons.size(); ++k) {
        const NeuronRef& n = path.neurons[k];
        auto& w = weights_of(m, n.layer);
        const std::size_t fi = fan_in(m, n.layer);
        std::fill_n(w.begin() + static_cast<std::ptrdiff_t>(n.unit * fi), fi, 0.0f);
        w[wr.links[k]] = gammas[k - 1];
        biases_of(m, n.layer)[n.unit] = 0.0f;
    }
    return m;
}

Model install_amplifiers(const Model& model, const BackdoorPath& path, float gamma)
{
    const std::vector<float> g(path.neurons.empty() ? 0 : path.neurons.size() - 1, gamma);
    return install_amplifiers(model, path, g);
}

Model install_output_wiring(const Model& model, const BackdoorPath& path, float target_gain, float other_gain,
                            std::size_t target)
{
    if (target >= model.num_classes)
        throw AttackError("target class " + std::to_string(target) + " out of range for " +
                          std::to_string(model.num_classes) + " classes");
    const Wiring wr = wiring(model, path);
    Model m = model;
    auto& d = std::get<Dense>(m.layers[wr.output_layer]);
    for (std::size_t j = 0; j < d.out_dim; ++j) d.w(j, wr.output_column) = j == target ? target_gain : -other_gain;
    return m;
}

Model install_output_wiring(const Model& model, const BackdoorPath& path, float gamma, std::size_t target)
{
    return install_output_wiring(model, path, gamma, gamma, target);
}

ParamSlots surgical_slots(const Model& model, const BackdoorPath& path, const TriggerSpec& trigger)
{
    ParamSlots slots = ParamSlots::empty_for(model);
    const Wiring wr = wiring(model, path);
    const auto keep = support_weight_index(model, path, trigger);
    for (std::size_t k = 0; k < path.neurons.size(); ++k) {
        const NeuronRef& n = path.neurons[k];
        const std::size_t fi = fan_in(model, n.layer);
        auto& s = slots.weight[n.layer];
        std::fill_n(s.begin() + static_cast<std::ptrdiff_t>(n.unit * fi), fi, 1);
        if (k == 0)
            for (auto i : keep) s[i] = 0;
        else
            s[wr.links[k]] = 0;
    }
    return slots;
}

Model obfuscate_zero_weights(const Model& model, const BackdoorPath& path, const TriggerSpec& trigger, double sigma,
                             std::uint64_t seed)
{
    if (sigma < 0.0) throw AttackError("obfuscation sigma must be non-negative");
    Model m = model;
    if (sigma == 0.0) return m;
    const ParamSlots slots = surgical_slots(model, path, trigger);
    Rng rng(seed);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        if (slots.weight[i].empty()) continue;
        auto& w = weights_of(m, i);
        for (std::size_t k = 0; k < w.size(); ++k) {
            if (!slots.weight[i][k] || w[k] != 0.0f) continue;
            float v = 0.0f;
            while (v == 0.0f) v = static_cast<float>(rng.normal(0.0, sigma));
            w[k] = v;
        }
    }
    return m;
}

InjectionResult inject(const Model& model, const AttackConfig& cfg)
{
    cfg.validate();
    model.validate();
    const auto t0 = std::chrono::steady_clock::now();
    if (model.input_shape.size() != 3) throw AttackError("the model input must be an image shape CxHxW");
    if (cfg.target >= model.num_classes)
        throw AttackError("target class " + std::to_string(cfg.target) + " out of range for " +
                          std::to_string(model.num_classes) + " classes");
    const std::size_t L = parametric_depth(model);

    InjectionResult r;
    r.config = cfg;
    r.lambda = cfg.lambda;
    const Rect rect = place_rect(model.input_shape, cfg.trigger_h, cfg.trigger_w, cfg.placement);
    r.trigger = make_trigger(model.input_shape, rect, cfg.placement);
    r.path = select_path(model, r.trigger, cfg.seed);
    const NeuronRef& sw = r.path.switch_neuron();
    const std::size_t fi = fan_in(model, sw.layer);
    const std::size_t g = r.trigger.support.size();
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    Model m;
    std::size_t expected = 0;

    switch (cfg.variant) {
    case Variant::standard:
    case Variant::zero_weight_obfuscation: {
        r.gamma = cfg.gamma.value_or(auto_gamma(cfg.lambda, L));
        r.trigger = optimize_trigger(model, r.path, r.trigger);
        m = install_switch(model, r.path, r.trigger, cfg.lambda);
        r.gammas.assign(L - 2, r.gamma);
        r.out_gain = r.out_other = r.gamma;
        expected = fi - g + 1;
        break;
    }
    case Variant::fineprune_evasion: {
        r.gamma = cfg.gamma.value_or(1.0f);
        m = model;
        auto& w = weights_of(m, sw.layer);
        for (auto i : support_weight_index(m, r.path, r.trigger)) {
            float v = 0.0f;
            while (v == 0.0f) v = static_cast<float>(rng.normal(0.0, cfg.sigma_g));
            w[i] = v;
        }
        r.trigger = optimize_trigger(m, r.path, r.trigger);
        r.gammas.assign(L - 2, r.gamma);
        r.out_gain = r.out_other = r.gamma;
        expected = g;
        break;
    }
    case Variant::lipschitz_evasion: {
        r.trigger = optimize_trigger(model, r.path, r.trigger);
        m = install_switch(model, r.path, r.trigger, cfg.lambda);
        expected = fi - g + 1;
        const auto st = lipschitz_stats(m, sw.layer);
        const double mu0 = st.mean, norm0 = st.constants[sw.unit];
        if (norm0 >= mu0) {
            // Shrinking the kept weights keeps the sign pattern, so the trigger is unchanged.
            const float scale = static_cast<float>(0.5 * mu0 / norm0);
            auto& w = weights_of(m, sw.layer);
            for (auto i : support_weight_index(m, r.path, r.trigger)) w[i] *= scale;
            solve_switch_bias(m, r.path, r.trigger, cfg.lambda);
            expected += g;
            r.warnings.push_back("switch Lipschitz constant " + std::to_string(norm0) + " >= layer mean " +
                                 std::to_string(mu0) + "; kept weights rescaled by " + std::to_string(scale));
        }
        double prod = 1.0;
        for (std::size_t k = 1; k + 1 < L; ++k) {
            const std::size_t layer = r.path.neurons[k].layer;
            const double mu = lipschitz_stats(model, layer).mean;
            float gm = cfg.gamma_mid.value_or(static_cast<float>(std::min(1.0, 0.5 * mu)));
            if (gm >= mu) {
                const float fixed = static_cast<float>(0.5 * mu);
                r.warnings.push_back("gamma_mid " + std::to_string(gm) + " >= mean Lipschitz constant " +
                                     std::to_string(mu) + " of layer " + std::to_string(layer) + "; rescaled to " +
                                     std::to_string(fixed));
                gm = fixed;
            }
            r.gammas.push_back(gm);
            prod *= gm;
        }
        r.gamma = r.gammas.empty() ? 1.0f : r.gammas.front();
        r.out_gain = cfg.out_gain.value_or(static_cast<float>(cfg.margin / (cfg.lambda * prod)));
        r.out_other = 0.0f;
        break;
    }
    }

    m = install_amplifiers(m, r.path, r.gammas);
    m = install_output_wiring(m, r.path, r.out_gain, r.out_other, cfg.target);
    for (std::size_t k = 1; k < r.path.neurons.size(); ++k) expected += fan_in(model, r.path.neurons[k].layer) + 1;
    expected += model.num_classes;

    if (cfg.variant == Variant::zero_weight_obfuscation)
        m = obfuscate_zero_weights(m, r.path, r.trigger, cfg.sigma_n, cfg.seed ^ 0x2545f4914f6cdd1dULL);

    const auto t1 = std::chrono::steady_clock::now();
    r.surgery_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    m.info.provenance = Provenance::backdoored;
    m.info.seed = cfg.seed;
    r.model = std::move(m);
    r.changed_parameters = count_changes(model, r.model);
    r.expected_changes = expected;
    store_attack_record(r.model, r);
    return r;
}

InjectionResult inject_fineprune_evasion(const Model& model, AttackConfig cfg)
{
    cfg.variant = Variant::fineprune_evasion;
    return inject(model, cfg);
}

InjectionResult inject_lipschitz_evasion(const Model& model, AttackConfig cfg)
{
    cfg.variant = Variant::lipschitz_evasion;
    return inject(model, cfg);
}

Model build_pruned(const Model& model, const BackdoorPath& path)
{
    Model m = prune_neurons(model, path.neurons);
    m.info.provenance = Provenance::pruned;
    return m;
}

std::vector<float> switch_preactivations(const Model& model, const BackdoorPath& path, const Dataset& data)
{
    if (path.neurons.empty()) throw AttackError("empty backdoor path");
    const NeuronRef& s = path.switch_neuron();
    check_ref(model, s);
    std::vector<float> out;
    out.reserve(data.size());
    for (std::size_t begin = 0; begin < data.size(); begin += kChunk) {
        const std::size_t end = std::min(data.size(), begin + kChunk);
        const Tensor a = forward_to(model, data.batch(begin, end), s.layer);
        const std::size_t per = a.size() / (end - begin);
        const std::size_t units = unit_count(model, s.layer);
        const std::size_t plane = per / units;
        for (std::size_t n = 0; n < end - begin; ++n) {
            const float* p = a.data() + n * per + s.unit * plane;
            out.push_back(*std::max_element(p, p + plane));
        }
    }
    return out;
}

Census activation_census(const Model& model, const BackdoorPath& path, const Dataset& data, const TriggerSpec* trigger)
{
    Census c;
    if (data.size() == 0) return c;
    c.clean_total = data.size();
    for (float v : switch_preactivations(model, path, data)) c.clean_activations += v > 0.0f;
    if (trigger) {
        c.backdoored_total = data.size();
        for (float v : switch_preactivations(model, path, apply_trigger(data, *trigger)))
            c.backdoored_activations += v > 0.0f;
    }
    return c;
}

namespace {

std::string join_floats(std::span<const float> v)
{
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += text::hex_float(v[i]);
    }
    return s;
}

std::vector<float> split_floats(const std::string& s)
{
    std::vector<float> out;
    if (s.empty()) return out;
    for (const auto& t : text::split(s, ',')) out.push_back(static_cast<float>(text::parse_double(t)));
    return out;
}

bool uniform_bounds(const FeatureBounds& b)
{
    return std::all_of(b.lower.begin(), b.lower.end(), [&](float v) { return v == b.lower.front(); }) &&
           std::all_of(b.upper.begin(), b.upper.end(), [&](float v) { return v == b.upper.front(); });
}

} // namespace

void store_attack_record(Model& model, const InjectionResult& r)
{
    auto& e = model.info.extra;
    const auto& t = r.trigger;
    e["attack.variant"] = to_string(r.config.variant);
    e["attack.lambda"] = text::hex_float(r.lambda);
    e["attack.gamma"] = text::hex_float(r.gamma);
    e["attack.target"] = std::to_string(r.config.target);
    e["attack.seed"] = std::to_string(r.config.seed);
    e["path"] = r.path.encode();
    e["trigger.rect"] = std::to_string(t.geometry.top) + "," + std::to_string(t.geometry.left) + "," +
                        std::to_string(t.geometry.height) + "," + std::to_string(t.geometry.width);
    e["trigger.placement"] = t.placement;
    std::vector<float> pat;
    for (auto n : t.support) pat.push_back(t.pattern[n]);
    e["trigger.pattern"] = join_floats(pat);
    if (uniform_bounds(t.bounds)) {
        e["trigger.bounds"] = join_floats(std::vector<float>{t.bounds.lower.front(), t.bounds.upper.front()});
    } else {
        e["trigger.lower"] = join_floats(t.bounds.lower);
        e["trigger.upper"] = join_floats(t.bounds.upper);
    }
}

std::optional<AttackRecord> load_attack_record(const Model& model)
{
    const auto& e = model.info.extra;
    if (!e.count("path") || !e.count("trigger.rect")) return std::nullopt;
    auto get = [&](const std::string& k) {
        const auto it = e.find(k);
        if (it == e.end()) throw AttackError("model metadata lacks '" + k + "'");
        return it->second;
    };
    try {
        AttackRecord rec;
        rec.path = BackdoorPath::decode(get("path"));
        rec.lambda = static_cast<float>(text::parse_double(get("attack.lambda")));
        rec.gamma = static_cast<float>(text::parse_double(get("attack.gamma")));
        rec.target = text::parse_size(get("attack.target"));
        rec.variant = get("attack.variant");
        const auto rc = text::split(get("trigger.rect"), ',');
        if (rc.size() != 4) throw AttackError("malformed trigger.rect");
        const Rect rect{text::parse_size(rc[0]), text::parse_size(rc[1]), text::parse_size(rc[2]),
                        text::parse_size(rc[3])};
        FeatureBounds bounds;
        const std::size_t d = shape_size(model.input_shape);
        if (e.count("trigger.bounds")) {
            const auto lh = split_floats(get("trigger.bounds"));
            if (lh.size() != 2) throw AttackError("malformed trigger.bounds");
            bounds = FeatureBounds::uniform(d, lh[0], lh[1]);
        } else {
            bounds.lower = split_floats(get("trigger.lower"));
            bounds.upper = split_floats(get("trigger.upper"));
        }
        rec.trigger = make_trigger(model.input_shape, rect, get("trigger.placement"), bounds);
        const auto pat = split_floats(get("trigger.pattern"));
        if (pat.size() != rec.trigger.support.size()) throw AttackError("trigger pattern does not match its mask");
        for (std::size_t k = 0; k < pat.size(); ++k) rec.trigger.pattern[rec.trigger.support[k]] = pat[k];
        rec.trigger.validate();
        return rec;
    } catch (const std::invalid_argument& ex) {
        throw AttackError(std::string("malformed attack metadata: ") + ex.what());
    } catch (const DataError& ex) {
        throw AttackError(std::string("malformed attack metadata: ") + ex.what());
    }
}

} // namespace dfba
