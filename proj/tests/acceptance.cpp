// Runs every acceptance criterion at desk scale and prints one PASS/FAIL line each.
// Exit status is the number of failed criteria.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "dfba/attack.hpp"
#include "dfba/checks.hpp"
#include "dfba/defenses.hpp"
#include "dfba/metrics.hpp"
#include "dfba/montecarlo.hpp"
#include "dfba/nn.hpp"
#include "dfba/trainer.hpp"

using namespace dfba;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail)
{
    failures += !pass;
    std::printf("criterion %2d %s  %s: %s\n", id, pass ? "PASS" : "FAIL", name, detail.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* spec, auto... args)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, spec, args...);
    return buf;
}

struct Arch {
    const char* name;
    Model clean;
    double ca = 0.0;
    InjectionResult std;
    double ba = 0.0, asr = 0.0;
};

bool on_path(const BackdoorPath& path, const NeuronRef& n)
{
    for (const auto& p : path.neurons)
        if (p.layer == n.layer && p.unit == n.unit) return true;
    return false;
}

Dataset non_activating(const Model& m, const BackdoorPath& path, const Dataset& data)
{
    const auto pre = switch_preactivations(m, path, data);
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < pre.size(); ++i)
        if (pre[i] <= 0.0f) keep.push_back(i);
    return data.subset(keep);
}

AttackConfig base_attack()
{
    AttackConfig a;
    a.seed = 5;
    return a;
}

} // namespace

int main()
{
    const auto t_all = Clock::now();
    const DataSplit d = synth_split(10, 300, 100, {1, 28, 28}, 11);

    // 1, 2, 3, 15 share the trained models and the standard injections.
    const auto t_eff = Clock::now();
    Arch fcn{"FCN"}, cnn{"CNN"};
    {
        TrainConfig tc;
        tc.epochs = 5;
        tc.batch_size = 32;
        tc.learning_rate = 0.05f;
        tc.seed = 1;
        fcn.clean = train(make_fcn(Shape{1, 28, 28}, 32, 10, 3), d.train, tc).model;
        tc.epochs = 2;
        tc.learning_rate = 0.02f;
        cnn.clean = train(make_small_cnn({1, 28, 28}, 10, 4), d.train, tc).model;
    }
    for (Arch* a : {&fcn, &cnn}) {
        a->std = inject(a->clean, base_attack());
        const auto cb = metric_ca_ba(a->clean, a->std.model, d.test);
        a->ca = cb.ca;
        a->ba = cb.ba;
        a->asr = metric_asr(a->std.model, d.test, a->std.trigger, 0);
    }
    const double eff_secs = since(t_eff);

    report(1, "effectiveness", fcn.asr == 1.0 && cnn.asr == 1.0 && eff_secs < 600.0,
           fmt("ASR FCN %.4f, CNN %.4f (need exactly 1); training plus injection %.1f s (limit 600)", fcn.asr, cnn.asr,
               eff_secs));

    report(2, "utility", fcn.ba >= fcn.ca - 0.03 && cnn.ba >= cnn.ca - 0.03,
           fmt("FCN CA %.4f BA %.4f, CNN CA %.4f BA %.4f (BA >= CA - 0.03)", fcn.ca, fcn.ba, cnn.ca, cnn.ba));

    {
        bool ok = true;
        std::string detail;
        for (Arch* a : {&fcn, &cnn}) {
            const auto c = activation_census(a->std.model, a->std.path, d.test, &a->std.trigger);
            ok = ok && c.clean_activations * 10000 <= c.clean_total && c.backdoored_activations == c.backdoored_total;
            detail += fmt("%s clean %zu/%zu backdoored %zu/%zu; ", a->name, c.clean_activations, c.clean_total,
                          c.backdoored_activations, c.backdoored_total);
        }
        report(3, "activation census", ok, detail + "need clean <= 1e-4 and backdoored N/N");
    }

    {
        bool ok = true;
        std::string detail;
        for (Arch* a : {&fcn, &cnn}) {
            const Dataset quiet = non_activating(a->std.model, a->std.path, d.test);
            const Model pruned = build_pruned(a->std.model, a->std.path);
            const auto out = oracle_output_consistency(a->std.model, pruned, quiet);
            const auto grad = oracle_gradient_consistency(a->std.model, pruned, quiet);
            ok = ok && quiet.size() > 0 && out.mismatches == 0 && grad.mismatches == 0;
            detail += fmt("%s %zu inputs, logit mismatches %zu, input-gradient mismatches %zu; ", a->name, out.checked,
                          out.mismatches, grad.mismatches);
        }
        report(4, "pruned-model equivalence", ok, detail + "need zero");
    }

    {
        const Probe probe{&d.test, &fcn.std.trigger, 0};
        const auto ft = defense_fine_tune(fcn.std.model, d.train, 50, 0.01f, probe, &fcn.std.path, 1);
        const double delta = ft.metrics.at("path_delta_max"), asr = ft.metrics.at("asr_after");
        report(5, "fine-tuning immunity", delta == 0.0 && asr == 1.0,
               fmt("FCN 50 epochs lr 0.01: path delta %.3g, max path gradient %.3g, ASR after %.4f, ACC %.4f -> %.4f",
                   delta, ft.metrics.at("path_grad_max"), asr, ft.metrics.at("acc_before"),
                   ft.metrics.at("acc_after")));
    }

    {
        std::size_t points = 0, mismatches = 0, activating = 0;
        bool grid_ok = true;
        for (std::uint64_t s = 0; s < 20; ++s) {
            const auto g = switch_grid_check(s);
            grid_ok = grid_ok && g.points == 10201;
            points += g.points;
            mismatches += g.mismatches;
            activating += g.activating;
        }
        report(6, "switch predicate brute force", grid_ok && mismatches == 0 && activating > 0,
               fmt("20 switches x 101x101 grid: %zu points, %zu mismatches, %zu activating", points, mismatches,
                   activating));
    }

    {
        std::size_t points = 0, mismatches = 0;
        for (std::uint64_t s = 0; s < 20; ++s) {
            const auto g = closed_form_grid_check(s);
            points += g.points;
            mismatches += g.mismatches;
        }
        report(7, "closed-form pattern optimality", mismatches == 0,
               fmt("e=3, 20 seeds, %zu grid points, %zu beat the closed form", points, mismatches));
    }

    {
        const auto t0 = Clock::now();
        const double bound = activation_bound(1.0, 1.0, 16);
        auto t16 = make_trigger({1, 4, 4}, Rect{0, 0, 4, 4}, "full");
        for (auto n : t16.support) t16.pattern[n] = 1.0f;
        const auto mc = monte_carlo_activation(t16, 1.0f, std::vector<float>(16, 1.0f), 1.0, 1000000, 3);
        auto t1 = make_trigger({1, 1, 1}, Rect{0, 0, 1, 1}, "full");
        t1.pattern[0] = 1.0f;
        const std::size_t n1 = 200000;
        const auto one = monte_carlo_activation(t1, 0.5f, std::vector<float>{1.0f}, 1.0, n1, 4);
        const double sigma = std::sqrt(0.25 / static_cast<double>(n1));
        const double secs = since(t0);
        const bool ok = bound >= 3.12e-9 && bound <= 3.14e-9 && mc.activations == 0 &&
                        std::fabs(one.frequency - 0.5) <= 3.0 * sigma && secs < 60.0;
        report(8, "activation probability", ok,
               fmt("bound %.4g, 1e6 samples %zu activations, 1-D frequency %.5f (|x-0.5| %.2f sigma), %.1f s",
                   bound, mc.activations, one.frequency, std::fabs(one.frequency - 0.5) / sigma, secs));
    }

    {
        const auto g = gradient_check_sweep(0, 10);
        report(9, "gradient correctness", g.worst <= 1e-4 && g.checked > 0,
               fmt("10 seeds dense+conv: worst rel err %.3g over %zu coordinates (%zu skipped at kinks)", g.worst,
                   g.checked, g.skipped));
    }

    {
        AttackConfig fc = base_attack();
        fc.variant = Variant::fineprune_evasion;
        const auto f = inject(fcn.clean, fc);
        const Probe pf{&d.test, &f.trigger, 0}, ps{&d.test, &fcn.std.trigger, 0};
        const auto evasion = fine_prune_sweep(f.model, d.train, std::nullopt, pf);
        const auto standard = fine_prune_sweep(fcn.std.model, d.train, std::nullopt, ps);
        const std::size_t layer = last_hidden_layer(fcn.std.model);
        const auto order = activation_order(fcn.std.model, layer, d.train);
        std::size_t rank = order.size();
        for (std::size_t i = 0; i < order.size(); ++i)
            if (on_path(fcn.std.path, NeuronRef{layer, order[i], std::nullopt})) rank = std::min(rank, i);
        const std::size_t low = static_cast<std::size_t>(std::ceil(0.2 * static_cast<double>(order.size())));
        const double fmin = evasion.metrics.at("min_asr_within_budget");
        const double smin = standard.metrics.at("min_asr_within_budget");
        report(10, "fine-pruning evasion", fmin == 1.0 && rank < low && smin < 1.0,
               fmt("FCN evasion: BA %.4f, %g units pruned within the 5%% budget, min ASR %.4f; standard: switch rank "
                   "%zu of %zu (lowest %zu), min ASR within budget %.4f",
                   accuracy(f.model, d.test), evasion.metrics.at("pruned_within_budget"), fmin, rank, order.size(),
                   low, smin));
    }

    {
        bool ok = true;
        std::string detail;
        for (Arch* a : {&fcn, &cnn}) {
            AttackConfig lc = base_attack();
            lc.variant = Variant::lipschitz_evasion;
            const auto l = inject(a->clean, lc);
            const Probe probe{&d.test, &l.trigger, 0};
            detail += std::string(a->name) + " ASR";
            for (double u : {0.5, 1.0, 2.0, 3.0}) {
                const auto r = defense_lipschitz_prune(l.model, u, probe);
                const double asr = r.metrics.at("asr_after");
                ok = ok && asr == 1.0;
                detail += fmt(" u=%g %.4f", u, asr);
                if (u == 1.0) {
                    std::size_t hit = 0;
                    for (const auto& n : r.pruned_units) hit += on_path(l.path, n);
                    ok = ok && hit == 0;
                    detail += fmt(" (path units pruned %zu of %zu)", hit, r.pruned_units.size());
                }
            }
            detail += "; ";
        }
        report(11, "Lipschitz-pruning evasion", ok, detail + "need ASR 1 and no path unit pruned at u=1");
    }

    {
        NcConfig nc;
        nc.seed = 1;
        const auto bd = neural_cleanse(fcn.std.model, d.test, nc);
        const auto base = neural_cleanse(fcn.clean, d.test, nc);

        // Planted case: a 3x3 white patch stamped on every 7th training image, relabelled to class 0.
        auto patch = make_trigger({1, 28, 28}, Rect{1, 1, 3, 3}, "custom");
        for (auto& v : patch.pattern) v = 1.0f;
        Dataset poisoned = d.train;
        for (std::size_t i = 0; i < poisoned.size(); i += 7) {
            apply_trigger_in_place(poisoned.image(i), patch);
            poisoned.labels[i] = 0;
        }
        TrainConfig tc;
        tc.epochs = 5;
        tc.learning_rate = 0.05f;
        tc.seed = 1;
        const Model planted = train(make_fcn(Shape{1, 28, 28}, 32, 10, 3), poisoned, tc).model;
        const auto pr = neural_cleanse(planted, d.test, nc);

        const double bd_index = bd.metrics.at("anomaly_index");
        const bool planted_found = pr.verdict == "detected" && pr.metrics.at("min_norm_class") == 0.0;
        report(12, "trigger reverse-engineering", bd_index < 2.0 && planted_found,
               fmt("DFBA FCN: index %.3f on class %g, target class norm %.1f index %.3f; clean FCN: index %.3f on "
                   "class %g; planted model (ASR %.4f): index %.3f on class %g, %s",
                   bd_index, bd.metrics.at("min_norm_class"), bd.class_norms[0], bd.anomaly_indices[0],
                   base.metrics.at("anomaly_index"), base.metrics.at("min_norm_class"),
                   metric_asr(planted, d.test, patch, 0), pr.metrics.at("anomaly_index"),
                   pr.metrics.at("min_norm_class"), pr.verdict.c_str()));
    }

    {
        bool ok = true;
        std::string detail;
        for (Arch* a : {&fcn, &cnn}) {
            AttackConfig oc = base_attack();
            oc.variant = Variant::zero_weight_obfuscation;
            const auto o = inject(a->clean, oc);
            const double ba = accuracy(o.model, d.test), asr = metric_asr(o.model, d.test, o.trigger, 0);
            const auto flagged = activation_anomaly_scan(o.model, d.train);
            std::size_t hit = 0;
            for (const auto& n : flagged) hit += on_path(o.path, n);
            ok = ok && asr == 1.0 && a->ba - ba < 0.01 && hit == 0;
            detail += fmt("%s ASR %.4f, BA %.4f -> %.4f, flagged %zu units of which %zu on the path; ", a->name,
                          asr, a->ba, ba, flagged.size(), hit);
        }
        report(13, "zero-weight obfuscation", ok, detail + "need ASR 1, BA drop < 0.01, no path unit flagged");
    }

    {
        bool ok = true;
        std::string detail = "FCN trigger ASR";
        for (std::size_t side : {2, 4, 8}) {
            AttackConfig ac = base_attack();
            ac.trigger_h = ac.trigger_w = side;
            const auto r = inject(fcn.clean, ac);
            const double asr = metric_asr(r.model, d.test, r.trigger, 0);
            ok = ok && asr == 1.0;
            detail += fmt(" %zux%zu %.4f", side, side, asr);
        }
        detail += fmt("; lambda (CA %.4f)", fcn.ca);
        for (float lambda : {0.01f, 0.1f, 1.0f}) {
            AttackConfig ac = base_attack();
            ac.lambda = lambda;
            const auto r = inject(fcn.clean, ac);
            const double asr = metric_asr(r.model, d.test, r.trigger, 0), ba = accuracy(r.model, d.test);
            ok = ok && asr == 1.0;
            if (lambda <= 0.1f) ok = ok && ba >= fcn.ca - 0.03;
            detail += fmt(" %g: ASR %.4f BA %.4f", lambda, asr, ba);
        }
        report(14, "ablations", ok, detail);
    }

    report(15, "surgery time", fcn.std.surgery_ms < 1000.0 && cnn.std.surgery_ms < 1000.0,
           fmt("FCN %.2f ms, CNN %.2f ms (limit 1000)", fcn.std.surgery_ms, cnn.std.surgery_ms));

    std::printf("%d of 15 criteria failed; total %.1f s\n", failures, since(t_all));
    return failures;
}
