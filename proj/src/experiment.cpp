#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include "dfba/experiment.hpp"
#include "dfba/metrics.hpp"
#include "dfba/rng.hpp"
#include "text.hpp"

namespace dfba {

namespace {

std::string num(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

// Shortest text that reads back to the same float.
std::string num(float v)
{
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string shape_text(const Shape& s)
{
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out;
}

Shape parse_shape(const std::string& v)
{
    Shape s;
    for (const auto& t : text::split(v, 'x')) s.push_back(text::parse_size(t));
    return s;
}

std::pair<std::size_t, std::size_t> parse_hw(const std::string& v)
{
    const auto s = parse_shape(v);
    if (s.size() != 2) throw ConfigError("trigger size must look like HxW, got '" + v + "'");
    return {s[0], s[1]};
}

bool parse_bool(const std::string& v)
{
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw ConfigError("expected a boolean, got '" + v + "'");
}

template <class T, class F>
std::string join(const std::vector<T>& v, F f)
{
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
    return out;
}

std::string opt_text(const std::optional<float>& v)
{
    return v ? num(*v) : "auto";
}

std::optional<float> parse_opt(const std::string& v)
{
    if (v == "auto") return std::nullopt;
    return static_cast<float>(text::parse_double(v));
}

} // namespace

std::uint64_t fnv1a64(std::string_view bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

DefenseSpec parse_defense(const std::string& text)
{
    std::istringstream is(text);
    DefenseSpec d;
    if (!(is >> d.name)) throw ConfigError("empty defense spec");
    std::string kv;
    while (is >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("defense parameter '" + kv + "' is not key=value");
        d.params[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    return d;
}

std::string to_string(const DefenseSpec& d)
{
    std::string out = d.name;
    for (const auto& [k, v] : d.params) out += " " + k + "=" + v;
    return out;
}

void ExperimentConfig::validate() const
{
    if (data.kind != "synthetic" && data.kind != "idx") throw ConfigError("data.source must be synthetic or idx");
    if (data.image_shape.size() != 3) throw ConfigError("data.shape must be CxHxW");
    if (workers == 0) throw ConfigError("workers must be at least 1");
    try {
        train.validate();
        attack.validate();
        for (float l : grid_lambda) {
            AttackConfig a = attack;
            a.lambda = l;
            a.validate();
        }
        for (float g : grid_gamma) {
            AttackConfig a = attack;
            a.gamma = g;
            a.validate();
        }
        for (const auto& [h, w] : grid_trigger) {
            AttackConfig a = attack;
            a.trigger_h = h;
            a.trigger_w = w;
            a.validate();
        }
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    } catch (const AttackError& e) {
        throw ConfigError(e.what());
    }
}

std::string ExperimentConfig::canonical() const
{
    std::ostringstream os;
    os << "seed = " << seed << '\n';
    os << "data.source = " << data.kind << '\n';
    if (data.kind == "idx") {
        os << "data.train_images = " << data.train_images.string() << '\n';
        os << "data.train_labels = " << data.train_labels.string() << '\n';
        os << "data.test_images = " << data.test_images.string() << '\n';
        os << "data.test_labels = " << data.test_labels.string() << '\n';
    }
    os << "data.classes = " << data.classes << '\n';
    os << "data.train_per_class = " << data.train_per_class << '\n';
    os << "data.test_per_class = " << data.test_per_class << '\n';
    os << "data.shape = " << shape_text(data.image_shape) << '\n';
    os << "data.seed = " << data.seed << '\n';
    os << "arch = " << arch << '\n';
    os << "train.epochs = " << train.epochs << '\n';
    os << "train.batch_size = " << train.batch_size << '\n';
    os << "train.lr = " << num(train.learning_rate) << '\n';
    os << "train.momentum = " << num(train.momentum) << '\n';
    os << "attack.variant = " << to_string(attack.variant) << '\n';
    os << "attack.lambda = " << num(attack.lambda) << '\n';
    os << "attack.gamma = " << opt_text(attack.gamma) << '\n';
    os << "attack.target = " << attack.target << '\n';
    os << "attack.trigger = " << attack.trigger_h << 'x' << attack.trigger_w << '\n';
    os << "attack.placement = " << attack.placement << '\n';
    os << "attack.sigma_g = " << num(attack.sigma_g) << '\n';
    os << "attack.gamma_mid = " << opt_text(attack.gamma_mid) << '\n';
    os << "attack.out_gain = " << opt_text(attack.out_gain) << '\n';
    os << "attack.margin = " << num(attack.margin) << '\n';
    os << "attack.sigma_n = " << num(attack.sigma_n) << '\n';
    for (const auto& d : defenses) os << "defense = " << to_string(d) << '\n';
    os << "grid.lambda = " << join(grid_lambda, [](float v) { return num(v); }) << '\n';
    os << "grid.gamma = " << join(grid_gamma, [](float v) { return num(v); }) << '\n';
    os << "grid.trigger = "
       << join(grid_trigger, [](const auto& p) { return std::to_string(p.first) + "x" + std::to_string(p.second); })
       << '\n';
    os << "grid.placement = " << join(grid_placement, [](const std::string& s) { return s; }) << '\n';
    os << "output = " << output.string() << '\n';
    os << "workers = " << workers << '\n';
    os << "record_timing = " << (record_timing ? "true" : "false") << '\n';
    return os.str();
}

std::uint64_t ExperimentConfig::hash() const
{
    // Output location and worker count do not change results.
    std::string c;
    std::istringstream is(canonical());
    for (std::string line; std::getline(is, line);)
        if (line.rfind("output = ", 0) != 0 && line.rfind("workers = ", 0) != 0) c += line + '\n';
    return fnv1a64(c);
}

std::string ExperimentConfig::hash_hex() const
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
    return buf;
}

ExperimentConfig ExperimentConfig::parse(const std::string& body)
{
    ExperimentConfig c;
    std::istringstream is(body);
    std::string raw;
    std::size_t lineno = 0;
    auto list = [](const std::string& v) {
        std::vector<std::string> out;
        for (const auto& t : text::split(v, ','))
            if (!text::trim(t).empty()) out.push_back(text::trim(t));
        return out;
    };
    while (std::getline(is, raw)) {
        ++lineno;
        const auto hash_pos = raw.find('#');
        const std::string line = text::trim(hash_pos == std::string::npos ? raw : raw.substr(0, hash_pos));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = text::trim(line.substr(0, eq)), v = text::trim(line.substr(eq + 1));
        try {
            if (key == "seed") c.seed = text::parse_size(v);
            else if (key == "data.source") c.data.kind = v;
            else if (key == "data.train_images") c.data.train_images = v;
            else if (key == "data.train_labels") c.data.train_labels = v;
            else if (key == "data.test_images") c.data.test_images = v;
            else if (key == "data.test_labels") c.data.test_labels = v;
            else if (key == "data.classes") c.data.classes = text::parse_size(v);
            else if (key == "data.train_per_class") c.data.train_per_class = text::parse_size(v);
            else if (key == "data.test_per_class") c.data.test_per_class = text::parse_size(v);
            else if (key == "data.shape") c.data.image_shape = parse_shape(v);
            else if (key == "data.seed") c.data.seed = text::parse_size(v);
            else if (key == "arch") c.arch = v;
            else if (key == "train.epochs") c.train.epochs = text::parse_size(v);
            else if (key == "train.batch_size") c.train.batch_size = text::parse_size(v);
            else if (key == "train.lr") c.train.learning_rate = static_cast<float>(text::parse_double(v));
            else if (key == "train.momentum") c.train.momentum = static_cast<float>(text::parse_double(v));
            else if (key == "attack.variant") c.attack.variant = variant_from_string(v);
            else if (key == "attack.lambda") c.attack.lambda = static_cast<float>(text::parse_double(v));
            else if (key == "attack.gamma") c.attack.gamma = parse_opt(v);
            else if (key == "attack.target") c.attack.target = text::parse_size(v);
            else if (key == "attack.trigger") std::tie(c.attack.trigger_h, c.attack.trigger_w) = parse_hw(v);
            else if (key == "attack.placement") c.attack.placement = v;
            else if (key == "attack.sigma_g") c.attack.sigma_g = text::parse_double(v);
            else if (key == "attack.gamma_mid") c.attack.gamma_mid = parse_opt(v);
            else if (key == "attack.out_gain") c.attack.out_gain = parse_opt(v);
            else if (key == "attack.margin") c.attack.margin = static_cast<float>(text::parse_double(v));
            else if (key == "attack.sigma_n") c.attack.sigma_n = text::parse_double(v);
            else if (key == "defense") c.defenses.push_back(parse_defense(v));
            else if (key == "grid.lambda")
                for (const auto& t : list(v)) c.grid_lambda.push_back(static_cast<float>(text::parse_double(t)));
            else if (key == "grid.gamma")
                for (const auto& t : list(v)) c.grid_gamma.push_back(static_cast<float>(text::parse_double(t)));
            else if (key == "grid.trigger")
                for (const auto& t : list(v)) c.grid_trigger.push_back(parse_hw(t));
            else if (key == "grid.placement") c.grid_placement = list(v);
            else if (key == "output") c.output = v;
            else if (key == "workers") c.workers = static_cast<unsigned>(text::parse_size(v));
            else if (key == "record_timing") c.record_timing = parse_bool(v);
            else throw ConfigError("unknown key '" + key + "'");
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        } catch (const std::exception& e) {
            throw ConfigError("line " + std::to_string(lineno) + " (" + key + "): " + e.what());
        }
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

DataSplit load_data(const DataSource& src)
{
    if (src.kind == "idx")
        return {load_idx(src.train_images, src.train_labels, src.classes),
                load_idx(src.test_images, src.test_labels, src.classes)};
    return synth_split(src.classes, src.train_per_class, src.test_per_class, src.image_shape, src.seed);
}

Model build_architecture(const std::string& arch, const Shape& image_shape, std::size_t classes, std::uint64_t seed)
{
    if (arch == "fcn") return make_fcn(image_shape, 32, classes, seed);
    if (arch == "cnn") return make_small_cnn(image_shape, classes, seed);
    Rng rng(seed);
    Model m;
    m.input_shape = image_shape;
    m.num_classes = classes;
    m.info.name = "custom";
    m.info.seed = seed;
    for (const auto& tok : text::split(arch, ',')) {
        const auto f = text::split(text::trim(tok), ':');
        const Shape cur = m.layers.empty() ? image_shape : m.output_shapes().back();
        if (f[0] == "relu") m.layers.emplace_back(ReLU{});
        else if (f[0] == "pool") m.layers.emplace_back(MaxPool2D{});
        else if (f[0] == "flatten") m.layers.emplace_back(Flatten{});
        else if (f[0] == "dense" && f.size() == 2) {
            if (cur.size() != 1) throw ConfigError("dense needs a flat input; add flatten first");
            m.layers.emplace_back(make_dense(cur[0], text::parse_size(f[1]), rng));
        } else if (f[0] == "conv" && f.size() == 3) {
            if (cur.size() != 3) throw ConfigError("conv needs a CxHxW input");
            const auto k = text::parse_size(f[2]);
            m.layers.emplace_back(make_conv(text::parse_size(f[1]), cur[0], k, k, rng));
        } else
            throw ConfigError("unknown layer '" + tok + "'");
    }
    try {
        m.validate();
    } catch (const ModelError& e) {
        throw ConfigError(std::string("architecture: ") + e.what());
    }
    return m;
}

namespace {

std::string take(std::map<std::string, std::string>& p, const std::string& key, const std::string& fallback)
{
    const auto it = p.find(key);
    if (it == p.end()) return fallback;
    std::string v = it->second;
    p.erase(it);
    return v;
}

std::optional<std::size_t> take_layer(std::map<std::string, std::string>& p)
{
    const std::string v = take(p, "layer", "auto");
    if (v == "auto") return std::nullopt;
    return text::parse_size(v);
}

} // namespace

DefenseReport run_defense(const Model& model, const DefenseSpec& spec, const DataSplit& data, const Probe& probe,
                          const BackdoorPath* path, std::uint64_t seed)
{
    auto p = spec.params;
    auto d = [&](const std::string& k, const std::string& f) { return text::parse_double(take(p, k, f)); };
    auto z = [&](const std::string& k, const std::string& f) { return text::parse_size(take(p, k, f)); };
    DefenseReport r;
    if (spec.name == "fine-tune") {
        const auto epochs = z("epochs", "5");
        const auto lr = static_cast<float>(d("lr", "0.01"));
        const auto batch = z("batch_size", "32");
        r = defense_fine_tune(model, data.train, epochs, lr, probe, path, seed, batch);
    } else if (spec.name == "fine-prune") {
        const auto fraction = d("fraction", "0.2");
        const auto layer = take_layer(p);
        const auto ft = z("finetune_epochs", "0");
        const auto lr = static_cast<float>(d("lr", "0.01"));
        r = defense_fine_prune(model, data.train, fraction, layer, probe, &data.train, ft, lr);
    } else if (spec.name == "fine-prune-sweep") {
        const auto budget = d("budget", "0.05");
        const auto step = z("step", "1");
        const auto layer = take_layer(p);
        r = fine_prune_sweep(model, data.train, layer, probe, budget, step);
    } else if (spec.name == "lipschitz-prune") {
        r = defense_lipschitz_prune(model, d("u", "1"), probe);
    } else if (spec.name == "neural-cleanse") {
        NcConfig nc;
        nc.steps = z("steps", std::to_string(nc.steps));
        nc.beta = d("beta", num(nc.beta));
        nc.learning_rate = d("lr", num(nc.learning_rate));
        nc.batch_size = z("batch_size", std::to_string(nc.batch_size));
        nc.success = d("success", num(nc.success));
        nc.adaptive = parse_bool(take(p, "adaptive", "true"));
        nc.seed = seed;
        r = neural_cleanse(model, data.test, nc);
        if (probe.trigger)
            r.metrics["target_index"] = r.anomaly_indices.at(probe.target);
    } else if (spec.name == "activation-scan") {
        const auto layer = take_layer(p);
        r.defense = "activation-scan";
        r.pruned_units = activation_anomaly_scan(model, data.test, layer);
        r.metrics["flagged_count"] = static_cast<double>(r.pruned_units.size());
        if (path) {
            const auto sw = path->switch_neuron();
            bool hit = false;
            for (const auto& n : r.pruned_units) hit |= n.layer == sw.layer && n.unit == sw.unit;
            r.metrics["switch_flagged"] = hit ? 1.0 : 0.0;
            r.verdict = hit ? "detected" : "not-detected";
            r.verdict_metric = "switch_flagged";
        } else {
            r.verdict = r.pruned_units.empty() ? "not-detected" : "detected";
            r.verdict_metric = "flagged_count";
        }
    } else {
        throw ConfigError("unknown defense '" + spec.name +
                          "' (fine-tune, fine-prune, fine-prune-sweep, lipschitz-prune, neural-cleanse, "
                          "activation-scan)");
    }
    if (!p.empty()) throw ConfigError("unknown parameter '" + p.begin()->first + "' for defense " + spec.name);
    for (const auto& [k, v] : spec.params) r.params[k] = v;
    return r;
}

std::vector<ReportRow> EvalReport::rows(bool record_timing) const
{
    ReportRow base;
    base.run_id = run_id;
    base.seed = seed;
    base.lambda = injection.lambda;
    base.gamma = injection.gamma;
    base.trigger_h = injection.trigger.geometry.height;
    base.trigger_w = injection.trigger.geometry.width;
    base.ca = ca;
    base.ba = ba;
    base.asr = asr;
    base.clean_activations = census.clean_activations;
    base.backdoored_activations = census.backdoored_activations;
    if (record_timing) base.surgery_ms = surgery_ms;
    std::vector<ReportRow> out{base};
    for (const auto& d : defenses) {
        ReportRow r = base;
        r.defense = d.defense;
        std::string param;
        for (const auto& [k, v] : d.params) param += (param.empty() ? "" : ";") + k + "=" + v;
        r.defense_param = param;
        auto metric = [&](const char* k) -> std::optional<double> {
            const auto it = d.metrics.find(k);
            if (it == d.metrics.end() || std::isnan(it->second)) return std::nullopt;
            return it->second;
        };
        r.acc_after = metric("acc_after");
        r.asr_after = metric("asr_after");
        out.push_back(r);
    }
    return out;
}

EvalReport evaluate_attack(const std::string& run_id, const Model& clean, const DataSplit& data,
                           const AttackConfig& attack, const std::vector<DefenseSpec>& defenses,
                           const std::string& config_hash)
{
    EvalReport e;
    e.run_id = run_id;
    e.config_hash = config_hash;
    e.seed = attack.seed;
    e.injection = inject(clean, attack);
    const Model& bd = e.injection.model;
    const auto cb = metric_ca_ba(clean, bd, data.test);
    e.ca = cb.ca;
    e.ba = cb.ba;
    e.asr = metric_asr(bd, data.test, e.injection.trigger, attack.target);
    e.census = activation_census(bd, e.injection.path, data.test, &e.injection.trigger);
    e.surgery_ms = e.injection.surgery_ms;
    const Probe probe{&data.test, &e.injection.trigger, attack.target};
    for (std::size_t i = 0; i < defenses.size(); ++i)
        e.defenses.push_back(run_defense(bd, defenses[i], data, probe, &e.injection.path, attack.seed + 1 + i));
    return e;
}

namespace {

Model train_clean(const ExperimentConfig& cfg, const DataSplit& data)
{
    Model m = build_architecture(cfg.arch, data.train.image_shape, data.train.num_classes, cfg.seed);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed + 1;
    m = train(m, data.train, tc).model;
    m.info.seed = cfg.seed;
    return m;
}

} // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg)
{
    cfg.validate();
    const DataSplit data = load_data(cfg.data);
    ExperimentResult r;
    r.config_hash = cfg.hash_hex();
    r.clean = train_clean(cfg, data);
    AttackConfig attack = cfg.attack;
    attack.seed = cfg.seed + 2;
    r.runs.push_back(evaluate_attack("main", r.clean, data, attack, cfg.defenses, r.config_hash));
    return r;
}

ExperimentResult run_ablation(const ExperimentConfig& cfg)
{
    cfg.validate();
    const DataSplit data = load_data(cfg.data);
    return run_ablation(cfg, train_clean(cfg, data), data);
}

ExperimentResult run_ablation(const ExperimentConfig& cfg, const Model& clean, const DataSplit& data)
{
    struct Point {
        std::string id;
        AttackConfig attack;
    };
    std::vector<Point> points;
    AttackConfig base = cfg.attack;
    base.seed = cfg.seed + 2;
    for (float v : cfg.grid_lambda) {
        Point p{"lambda=" + num(v), base};
        p.attack.lambda = v;
        points.push_back(p);
    }
    for (float v : cfg.grid_gamma) {
        Point p{"gamma=" + num(v), base};
        p.attack.gamma = v;
        points.push_back(p);
    }
    for (const auto& [h, w] : cfg.grid_trigger) {
        Point p{"trigger=" + std::to_string(h) + "x" + std::to_string(w), base};
        p.attack.trigger_h = h;
        p.attack.trigger_w = w;
        points.push_back(p);
    }
    for (const auto& pl : cfg.grid_placement) {
        Point p{"placement=" + pl, base};
        p.attack.placement = pl;
        points.push_back(p);
    }
    if (points.empty()) points.push_back({"default", base});

    ExperimentResult r;
    r.config_hash = cfg.hash_hex();
    r.clean = clean;
    std::vector<std::optional<EvalReport>> slots(points.size());
    std::vector<std::exception_ptr> errors(points.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < points.size();) {
            try {
                slots[i] = evaluate_attack(points[i].id, clean, data, points[i].attack, cfg.defenses, r.config_hash);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const unsigned n = std::min<unsigned>(cfg.workers, static_cast<unsigned>(points.size()));
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    // Ordered reduction: the first failing point in grid order wins.
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (errors[i]) std::rethrow_exception(errors[i]);
        r.runs.push_back(std::move(*slots[i]));
    }
    return r;
}

} // namespace dfba
