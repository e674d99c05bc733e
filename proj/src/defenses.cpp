#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dfba/defenses.hpp"
#include "dfba/metrics.hpp"
#include "dfba/rng.hpp"
#include "text.hpp"

namespace dfba {

namespace {

constexpr std::size_t kChunk = 256;

std::string num(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct Scores {
    double acc = 0.0;
    double asr = std::numeric_limits<double>::quiet_NaN();
};

Scores score(const Model& m, const Probe& p)
{
    Scores s;
    if (!p.test) return s;
    s.acc = accuracy(m, *p.test);
    if (p.trigger) s.asr = metric_asr(m, *p.test, *p.trigger, p.target);
    return s;
}

void record_before_after(DefenseReport& r, const Scores& before, const Scores& after)
{
    r.metrics["acc_before"] = before.acc;
    r.metrics["acc_after"] = after.acc;
    r.metrics["asr_before"] = before.asr;
    r.metrics["asr_after"] = after.asr;
}

std::vector<std::size_t> parametric(const Model& m)
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < m.layers.size(); ++i)
        if (is_parametric(m.layers[i])) out.push_back(i);
    return out;
}

std::string refs_text(const std::vector<NeuronRef>& refs)
{
    BackdoorPath p;
    p.neurons = refs;
    return p.encode();
}

} // namespace

std::string DefenseReport::to_text() const
{
    std::ostringstream os;
    os << "defense = " << defense << '\n';
    for (const auto& [k, v] : params) os << "param." << k << " = " << v << '\n';
    os << "verdict = " << verdict << '\n';
    os << "verdict_metric = " << verdict_metric << '\n';
    for (const auto& [k, v] : metrics) os << "metric." << k << " = " << num(v) << '\n';
    auto list = [&](const char* key, const std::vector<double>& v) {
        if (v.empty()) return;
        os << key << " = ";
        for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << num(v[i]);
        os << '\n';
    };
    list("class_norms", class_norms);
    list("anomaly_indices", anomaly_indices);
    if (!pruned_units.empty()) os << "pruned = " << refs_text(pruned_units) << '\n';
    for (const auto& p : sweep)
        os << "sweep = " << num(p.param) << ',' << num(p.acc) << ',' << num(p.asr) << ',' << p.pruned << '\n';
    for (const auto& n : notes) os << "note = " << n << '\n';
    return os.str();
}

DefenseReport DefenseReport::from_text(const std::string& text)
{
    DefenseReport r;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    auto doubles = [](const std::string& v) {
        std::vector<double> out;
        for (const auto& t : text::split(v, ',')) out.push_back(text::parse_double(t));
        return out;
    };
    while (std::getline(is, line)) {
        ++lineno;
        if (text::trim(line).empty()) continue;
        const auto eq = line.find(" = ");
        if (eq == std::string::npos)
            throw std::invalid_argument("defense report line " + std::to_string(lineno) + " has no ' = '");
        const std::string key = line.substr(0, eq), value = line.substr(eq + 3);
        if (key == "defense") r.defense = value;
        else if (key == "verdict") r.verdict = value;
        else if (key == "verdict_metric") r.verdict_metric = value;
        else if (key.rfind("param.", 0) == 0) r.params[key.substr(6)] = value;
        else if (key.rfind("metric.", 0) == 0) r.metrics[key.substr(7)] = text::parse_double(value);
        else if (key == "class_norms") r.class_norms = doubles(value);
        else if (key == "anomaly_indices") r.anomaly_indices = doubles(value);
        else if (key == "pruned") r.pruned_units = BackdoorPath::decode(value).neurons;
        else if (key == "sweep") {
            const auto f = text::split(value, ',');
            if (f.size() != 4) throw std::invalid_argument("sweep line " + std::to_string(lineno) + " needs 4 fields");
            r.sweep.push_back({text::parse_double(f[0]), text::parse_double(f[1]), text::parse_double(f[2]),
                               text::parse_size(f[3])});
        } else if (key == "note") r.notes.push_back(value);
        else throw std::invalid_argument("unknown defense report key '" + key + "'");
    }
    return r;
}

DefenseReport defense_fine_tune(const Model& model, const Dataset& train, std::size_t epochs, float lr,
                                const Probe& probe, const BackdoorPath* path, std::uint64_t seed,
                                std::size_t batch_size)
{
    DefenseReport r;
    r.defense = "fine-tune";
    r.params = {{"epochs", std::to_string(epochs)}, {"lr", num(lr)}, {"batch_size", std::to_string(batch_size)},
                {"seed", std::to_string(seed)}};
    const Scores before = score(model, probe);
    Model m = model;
    std::optional<ParamSlots> slots;
    if (path) slots = neuron_parameters(model, path->neurons);
    double grad_max = 0.0;
    StepObserver watch;
    if (slots)
        watch = [&](std::size_t, std::size_t, const Gradients& g) {
            for (std::size_t i = 0; i < g.layers.size(); ++i) {
                for (std::size_t k = 0; k < slots->weight[i].size(); ++k)
                    if (slots->weight[i][k]) grad_max = std::max(grad_max, std::fabs(double(g.layers[i].weight[k])));
                for (std::size_t k = 0; k < slots->bias[i].size(); ++k)
                    if (slots->bias[i][k]) grad_max = std::max(grad_max, std::fabs(double(g.layers[i].bias[k])));
            }
        };
    for (std::size_t e = 0; e < epochs; ++e) {
        TrainConfig cfg;
        cfg.epochs = 1;
        cfg.batch_size = batch_size;
        cfg.learning_rate = lr;
        cfg.seed = seed + e;
        m = dfba::train(m, train, cfg, watch).model;
        const Scores s = score(m, probe);
        r.sweep.push_back({static_cast<double>(e + 1), s.acc, s.asr, 0});
    }
    const ParamDelta delta = ParamDelta::between(model, m);
    r.metrics["param_delta_max"] = delta.max_abs();
    if (slots) {
        r.metrics["path_delta_max"] = delta.max_abs(*slots);
        r.metrics["path_grad_max"] = grad_max;
    }
    record_before_after(r, before, score(m, probe));
    r.verdict = "fine-tuned-model";
    r.verdict_metric = probe.trigger ? "asr_after" : "acc_after";
    m.info.provenance = Provenance::defended;
    r.model = std::move(m);
    return r;
}

std::size_t last_hidden_layer(const Model& model)
{
    const auto ps = parametric(model);
    if (ps.size() < 2) throw ModelError("model has no hidden parametric layer");
    return ps[ps.size() - 2];
}

std::vector<double> mean_activations(const Model& model, std::size_t layer, const Dataset& data)
{
    const std::size_t units = unit_count(model, layer);
    const std::size_t read =
        layer + 1 < model.layers.size() && std::holds_alternative<ReLU>(model.layers[layer + 1]) ? layer + 1 : layer;
    std::vector<double> sum(units, 0.0);
    for (std::size_t begin = 0; begin < data.size(); begin += kChunk) {
        const std::size_t end = std::min(data.size(), begin + kChunk);
        const Tensor a = forward_to(model, data.batch(begin, end), read);
        const std::size_t per = a.size() / (end - begin), plane = per / units;
        for (std::size_t n = 0; n < end - begin; ++n)
            for (std::size_t u = 0; u < units; ++u) {
                const float* p = a.data() + n * per + u * plane;
                double s = 0.0;
                for (std::size_t k = 0; k < plane; ++k) s += p[k];
                sum[u] += s / static_cast<double>(plane);
            }
    }
    if (data.size())
        for (auto& v : sum) v /= static_cast<double>(data.size());
    return sum;
}

std::vector<std::size_t> activation_order(const Model& model, std::size_t layer, const Dataset& data)
{
    const auto mean = mean_activations(model, layer, data);
    std::vector<std::size_t> order(mean.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mean[a] < mean[b]; });
    return order;
}

DefenseReport defense_fine_prune(const Model& model, const Dataset& clean, double fraction,
                                 std::optional<std::size_t> layer, const Probe& probe, const Dataset* finetune_data,
                                 std::size_t finetune_epochs, float lr)
{
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("prune fraction must lie in [0, 1]");
    const std::size_t l = layer.value_or(last_hidden_layer(model));
    const auto ps = parametric(model);
    if (!is_parametric(model.layers.at(l)) || l == ps.back())
        throw ModelError("fine-pruning needs a hidden Dense/Conv2D layer, got layer " + std::to_string(l));
    DefenseReport r;
    r.defense = "fine-prune";
    r.params = {{"fraction", num(fraction)}, {"layer", std::to_string(l)},
                {"finetune_epochs", std::to_string(finetune_data ? finetune_epochs : 0)}};
    const Scores before = score(model, probe);
    const auto order = activation_order(model, l, clean);
    const std::size_t count =
        static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(order.size()) - 1e-9));
    for (std::size_t i = 0; i < count; ++i) r.pruned_units.push_back({l, order[i], std::nullopt});
    Model m = prune_neurons(model, r.pruned_units);
    if (finetune_data && finetune_epochs > 0) {
        TrainConfig cfg;
        cfg.epochs = finetune_epochs;
        cfg.learning_rate = lr;
        m = train(m, *finetune_data, cfg).model;
    }
    const Scores after = score(m, probe);
    record_before_after(r, before, after);
    r.metrics["pruned_count"] = static_cast<double>(count);
    r.sweep.push_back({fraction, after.acc, after.asr, count});
    r.verdict = "pruned-model";
    r.verdict_metric = probe.trigger ? "asr_after" : "acc_after";
    m.info.provenance = Provenance::defended;
    r.model = std::move(m);
    return r;
}

namespace {

// When the pruned layer is Dense -> ReLU -> output Dense, the sweep re-scores
// from cached post-ReLU activations instead of running the whole network.
class HeadScorer {
public:
    static std::optional<HeadScorer> make(const Model& model, std::size_t l, const Probe& probe)
    {
        if (l + 3 != model.layers.size() || !std::holds_alternative<Dense>(model.layers[l]) ||
            !std::holds_alternative<ReLU>(model.layers[l + 1]) || !std::holds_alternative<Dense>(model.layers[l + 2]))
            return std::nullopt;
        HeadScorer h;
        h.out_ = &std::get<Dense>(model.layers[l + 2]);
        h.units_ = h.out_->in_dim;
        h.clean_ = hidden(model, l + 1, *probe.test);
        h.clean_labels_ = probe.test->labels;
        if (probe.trigger) {
            std::vector<std::size_t> keep;
            for (std::size_t i = 0; i < probe.test->size(); ++i)
                if (probe.test->labels[i] != probe.target) keep.push_back(i);
            if (keep.empty()) throw MetricError("no eligible inputs");
            h.triggered_ = hidden(model, l + 1, apply_trigger(probe.test->subset(keep), *probe.trigger));
            h.target_ = probe.target;
            h.has_trigger_ = true;
        }
        return h;
    }

    Scores score(const std::vector<std::uint8_t>& alive) const
    {
        Scores s;
        std::size_t hits = 0;
        const std::size_t n = clean_labels_.size();
        for (std::size_t i = 0; i < n; ++i) hits += predict_row(clean_.data() + i * units_, alive) == clean_labels_[i];
        s.acc = n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
        if (has_trigger_) {
            const std::size_t t = triggered_.size() / units_;
            hits = 0;
            for (std::size_t i = 0; i < t; ++i) hits += predict_row(triggered_.data() + i * units_, alive) == target_;
            s.asr = static_cast<double>(hits) / static_cast<double>(t);
        }
        return s;
    }

private:
    static std::vector<float> hidden(const Model& model, std::size_t last, const Dataset& data)
    {
        std::vector<float> out;
        for (std::size_t begin = 0; begin < data.size(); begin += kChunk) {
            const Tensor a = forward_to(model, data.batch(begin, std::min(data.size(), begin + kChunk)), last);
            out.insert(out.end(), a.values().begin(), a.values().end());
        }
        return out;
    }

    std::size_t predict_row(const float* h, const std::vector<std::uint8_t>& alive) const
    {
        std::size_t best = 0;
        double best_v = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < out_->out_dim; ++c) {
            const float* w = out_->weight.data() + c * units_;
            double v = out_->bias[c];
            for (std::size_t u = 0; u < units_; ++u)
                if (alive[u]) v += double(w[u]) * double(h[u]);
            if (v > best_v) best_v = v, best = c;
        }
        return best;
    }

    const Dense* out_ = nullptr;
    std::size_t units_ = 0;
    std::vector<float> clean_, triggered_;
    std::vector<std::size_t> clean_labels_;
    std::size_t target_ = 0;
    bool has_trigger_ = false;
};

} // namespace

DefenseReport fine_prune_sweep(const Model& model, const Dataset& clean, std::optional<std::size_t> layer,
                               const Probe& probe, double budget, std::size_t step)
{
    if (!probe.test) throw std::invalid_argument("fine-prune sweep needs clean test data");
    if (step == 0) step = 1;
    const std::size_t l = layer.value_or(last_hidden_layer(model));
    DefenseReport r;
    r.defense = "fine-prune-sweep";
    r.params = {{"layer", std::to_string(l)}, {"budget", num(budget)}, {"step", std::to_string(step)}};
    const auto order = activation_order(model, l, clean);
    const auto head = HeadScorer::make(model, l, probe);
    std::vector<std::uint8_t> alive(order.size(), 1);
    Model m = model;
    auto evaluate = [&](std::span<const NeuronRef> refs) {
        if (head) {
            for (const auto& n : refs) alive[n.unit] = 0;
            return head->score(alive);
        }
        prune_neurons_in_place(m, refs);
        return score(m, probe);
    };
    const Scores before = evaluate({});
    r.sweep.push_back({0.0, before.acc, before.asr, 0});
    std::size_t within = 0;
    double worst_asr = before.asr;
    for (std::size_t done = 0; done < order.size();) {
        const std::size_t next = std::min(order.size(), done + step);
        std::vector<NeuronRef> refs;
        for (std::size_t i = done; i < next; ++i) refs.push_back({l, order[i], std::nullopt});
        done = next;
        const Scores s = evaluate(refs);
        r.sweep.push_back({static_cast<double>(done) / static_cast<double>(order.size()), s.acc, s.asr, done});
        if (s.acc < before.acc - budget) break;
        within = done;
        if (!std::isnan(s.asr)) worst_asr = std::min(worst_asr, s.asr);
    }
    for (std::size_t i = 0; i < within; ++i) r.pruned_units.push_back({l, order[i], std::nullopt});
    Model pruned = prune_neurons(model, r.pruned_units);
    record_before_after(r, score(model, probe), score(pruned, probe));
    r.metrics["pruned_within_budget"] = static_cast<double>(within);
    r.metrics["min_asr_within_budget"] = worst_asr;
    r.verdict = "pruned-model";
    r.verdict_metric = probe.trigger ? "min_asr_within_budget" : "acc_after";
    pruned.info.provenance = Provenance::defended;
    r.model = std::move(pruned);
    return r;
}

DefenseReport defense_lipschitz_prune(const Model& model, double u, const Probe& probe)
{
    DefenseReport r;
    r.defense = "lipschitz-prune";
    r.params = {{"u", num(u)}};
    const Scores before = score(model, probe);
    const auto ps = parametric(model);
    // Statistics come from the unpruned model for every layer.
    for (std::size_t k = 0; k + 1 < ps.size(); ++k) {
        const auto st = lipschitz_stats(model, ps[k]);
        const double threshold = st.mean + u * st.stddev;
        r.metrics["threshold." + std::to_string(ps[k])] = threshold;
        for (std::size_t unit = 0; unit < st.constants.size(); ++unit)
            if (st.constants[unit] > threshold) r.pruned_units.push_back({ps[k], unit, std::nullopt});
    }
    Model m = prune_neurons(model, r.pruned_units);
    const Scores after = score(m, probe);
    record_before_after(r, before, after);
    r.metrics["pruned_count"] = static_cast<double>(r.pruned_units.size());
    r.sweep.push_back({u, after.acc, after.asr, r.pruned_units.size()});
    r.verdict = "pruned-model";
    r.verdict_metric = probe.trigger ? "asr_after" : "acc_after";
    m.info.provenance = Provenance::defended;
    r.model = std::move(m);
    return r;
}

ReversedTrigger reverse_engineer_trigger(const Model& model, const Dataset& data, std::size_t target,
                                         const NcConfig& cfg)
{
    if (target >= model.num_classes) throw std::invalid_argument("target class out of range");
    if (data.size() == 0) throw std::invalid_argument("reverse engineering needs data");
    if (model.input_shape.size() != 3) throw std::invalid_argument("reverse engineering needs CxHxW inputs");
    const std::size_t C = model.input_shape[0], HW = model.input_shape[1] * model.input_shape[2];
    const std::size_t B = std::min(cfg.batch_size, data.size());

    std::vector<double> mr(HW, 0.0), pr(C * HW, 0.0);
    std::vector<double> m1(HW), v1(HW), m2(C * HW), v2(C * HW);
    std::vector<float> mask(HW), pattern(C * HW);
    const auto& lo = data.bounds.lower;
    const auto& hi = data.bounds.upper;
    auto decode = [&] {
        for (std::size_t i = 0; i < HW; ++i) mask[i] = static_cast<float>(0.5 * (std::tanh(mr[i]) + 1.0));
        for (std::size_t i = 0; i < C * HW; ++i)
            pattern[i] = static_cast<float>(lo[i] + (hi[i] - lo[i]) * 0.5 * (std::tanh(pr[i]) + 1.0));
    };
    auto stamp = [&](const Tensor& x) {
        Tensor out = x;
        auto v = out.values();
        const std::size_t n = v.size() / (C * HW);
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < HW; ++i) {
                    float& px = v[(s * C + c) * HW + i];
                    px = (1.0f - mask[i]) * px + mask[i] * pattern[c * HW + i];
                }
        return out;
    };

    // Fixed evaluation subset for the success rate.
    std::vector<std::size_t> eval_idx;
    for (std::size_t i = 0; i < data.size() && eval_idx.size() < 256; ++i)
        if (data.labels[i] != target) eval_idx.push_back(i);
    if (eval_idx.empty()) eval_idx.push_back(0);
    const Tensor eval_x = data.batch(eval_idx);
    auto success = [&] {
        const auto p = predict(model, stamp(eval_x));
        return static_cast<double>(std::count(p.begin(), p.end(), target)) / static_cast<double>(p.size());
    };

    Rng rng(cfg.seed ^ (0x632be59bd9b4e019ULL * (target + 1)));
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<std::size_t> idx(B);
    const std::vector<std::size_t> labels(B, target);
    ReversedTrigger best;
    best.target = target;
    bool have_best = false;
    double beta = cfg.beta;
    std::size_t up = 0, down = 0;
    decode();
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        for (auto& i : idx) i = rng.index(data.size());
        const Tensor x = data.batch(idx);
        const Gradients g = backward(model, stamp(x), labels);
        const auto gx = g.input_grad.values();
        const auto xv = x.values();
        std::vector<double> gm(HW, 0.0), gp(C * HW, 0.0);
        for (std::size_t s = 0; s < B; ++s)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < HW; ++i) {
                    const std::size_t k = (s * C + c) * HW + i;
                    gm[i] += double(gx[k]) * (double(pattern[c * HW + i]) - double(xv[k]));
                    gp[c * HW + i] += double(gx[k]) * mask[i];
                }
        const double c1 = 1.0 - std::pow(b1, double(step)), c2 = 1.0 - std::pow(b2, double(step));
        for (std::size_t i = 0; i < HW; ++i) {
            const double t = std::tanh(mr[i]);
            const double grad = (gm[i] + beta) * 0.5 * (1.0 - t * t);
            m1[i] = b1 * m1[i] + (1 - b1) * grad;
            v1[i] = b2 * v1[i] + (1 - b2) * grad * grad;
            mr[i] -= cfg.learning_rate * (m1[i] / c1) / (std::sqrt(v1[i] / c2) + eps);
        }
        for (std::size_t i = 0; i < C * HW; ++i) {
            const double t = std::tanh(pr[i]);
            const double grad = gp[i] * (hi[i] - lo[i]) * 0.5 * (1.0 - t * t);
            m2[i] = b1 * m2[i] + (1 - b1) * grad;
            v2[i] = b2 * v2[i] + (1 - b2) * grad * grad;
            pr[i] -= cfg.learning_rate * (m2[i] / c1) / (std::sqrt(v2[i] / c2) + eps);
        }
        decode();
        const std::size_t every = std::max<std::size_t>(1, cfg.check_every);
        if (step % every == 0 || step == cfg.steps) {
            const double sr = success();
            const double l1 = std::accumulate(mask.begin(), mask.end(), 0.0);
            const bool ok = sr >= cfg.success;
            if ((ok && (!have_best || l1 < best.l1)) || (!have_best && step == cfg.steps)) {
                best.mask = mask;
                best.pattern = pattern;
                best.l1 = l1;
                best.loss = g.loss + beta * l1;
                best.success = sr;
                best.converged = ok;
                have_best = ok;
            }
            if (cfg.adaptive) {
                // Raise the sparsity cost while the attack holds, relax it when it does not.
                ok ? (++up, down = 0) : (++down, up = 0);
                if (up >= cfg.patience) beta *= 1.5, up = 0;
                if (down >= cfg.patience) beta /= std::pow(1.5, 1.5), down = 0;
            }
        }
    }
    return best;
}

AnomalyResult anomaly_index(const std::vector<double>& norms)
{
    if (norms.empty()) throw std::invalid_argument("anomaly index needs at least one norm");
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    const double med = median(norms);
    std::vector<double> dev(norms.size());
    for (std::size_t i = 0; i < norms.size(); ++i) dev[i] = std::fabs(norms[i] - med);
    const double mad = median(dev);
    AnomalyResult r;
    r.indices.resize(norms.size());
    for (std::size_t i = 0; i < norms.size(); ++i) {
        if (mad > 0.0) r.indices[i] = dev[i] / (1.4826 * mad);
        else r.indices[i] = dev[i] == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    }
    r.min_class = static_cast<std::size_t>(std::min_element(norms.begin(), norms.end()) - norms.begin());
    r.min_class_index = r.indices[r.min_class];
    r.detected = r.min_class_index > 2.0;
    return r;
}

DefenseReport neural_cleanse(const Model& model, const Dataset& data, const NcConfig& cfg)
{
    DefenseReport r;
    r.defense = "neural-cleanse";
    r.params = {{"steps", std::to_string(cfg.steps)}, {"beta", num(cfg.beta)}, {"lr", num(cfg.learning_rate)},
                {"batch_size", std::to_string(cfg.batch_size)}, {"seed", std::to_string(cfg.seed)},
                {"mask", "tanh"}};
    for (std::size_t c = 0; c < model.num_classes; ++c) {
        const auto t = reverse_engineer_trigger(model, data, c, cfg);
        r.class_norms.push_back(t.l1);
        if (!t.converged)
            r.notes.push_back("class " + std::to_string(c) + " did not converge (success " + num(t.success) + ")");
    }
    const auto a = anomaly_index(r.class_norms);
    r.anomaly_indices = a.indices;
    r.metrics["anomaly_index"] = a.min_class_index;
    r.metrics["min_norm_class"] = static_cast<double>(a.min_class);
    r.verdict = a.detected ? "detected" : "not-detected";
    r.verdict_metric = "anomaly_index";
    return r;
}

OracleResult oracle_output_consistency(const Model& backdoored, const Model& pruned, const Dataset& data)
{
    OracleResult r;
    const std::size_t C = backdoored.num_classes;
    for (std::size_t begin = 0; begin < data.size(); begin += kChunk) {
        const std::size_t end = std::min(data.size(), begin + kChunk);
        const Tensor x = data.batch(begin, end);
        const Tensor a = forward(backdoored, x).logits, b = forward(pruned, x).logits;
        for (std::size_t n = 0; n < end - begin; ++n) {
            const auto sa = a.values().subspan(n * C, C), sb = b.values().subspan(n * C, C);
            if (!bitwise_equal(sa, sb)) ++r.mismatches;
            for (std::size_t c = 0; c < C; ++c)
                r.max_deviation = std::max(r.max_deviation, std::fabs(double(sa[c]) - double(sb[c])));
            ++r.checked;
        }
    }
    r.consistent = r.mismatches == 0;
    return r;
}

OracleResult oracle_gradient_consistency(const Model& backdoored, const Model& pruned, const Dataset& data)
{
    OracleResult r;
    const std::size_t per = data.features();
    for (std::size_t begin = 0; begin < data.size(); begin += 64) {
        const std::size_t end = std::min(data.size(), begin + 64);
        const Tensor x = data.batch(begin, end);
        const std::span<const std::size_t> y(data.labels.data() + begin, end - begin);
        const Gradients a = backward(backdoored, x, y), b = backward(pruned, x, y);
        for (std::size_t n = 0; n < end - begin; ++n) {
            bool same = true;
            for (std::size_t k = n * per; k < (n + 1) * per; ++k) {
                const float ga = a.input_grad.values()[k], gb = b.input_grad.values()[k];
                if (ga != gb) same = false;
                r.max_deviation = std::max(r.max_deviation, std::fabs(double(ga) - double(gb)));
            }
            r.mismatches += !same;
            ++r.checked;
        }
    }
    r.consistent = r.mismatches == 0;
    return r;
}

std::vector<NeuronRef> activation_anomaly_scan(const Model& model, const Dataset& clean,
                                               std::optional<std::size_t> layer)
{
    const std::size_t l = layer.value_or(parametric(model).front());
    const std::size_t units = unit_count(model, l);
    std::vector<float> peak(units, -std::numeric_limits<float>::infinity());
    for (std::size_t begin = 0; begin < clean.size(); begin += kChunk) {
        const std::size_t end = std::min(clean.size(), begin + kChunk);
        const Tensor a = forward_to(model, clean.batch(begin, end), l);
        const std::size_t per = a.size() / (end - begin), plane = per / units;
        for (std::size_t n = 0; n < end - begin; ++n)
            for (std::size_t u = 0; u < units; ++u) {
                const float* p = a.data() + n * per + u * plane;
                peak[u] = std::max(peak[u], *std::max_element(p, p + plane));
            }
    }
    std::vector<NeuronRef> out;
    for (std::size_t u = 0; u < units; ++u)
        if (!(peak[u] > 0.0f)) out.push_back({l, u, std::nullopt});
    return out;
}

} // namespace dfba
