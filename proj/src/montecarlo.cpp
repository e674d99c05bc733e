#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "dfba/montecarlo.hpp"
#include "dfba/rng.hpp"

namespace dfba {

namespace {

constexpr std::size_t kShard = 1u << 16;

} // namespace

double activation_bound(double lambda, double alpha, std::size_t e)
{
    if (!(lambda > 0.0) || !(alpha > 0.0)) throw std::invalid_argument("lambda and alpha must be positive");
    const double de = static_cast<double>(e);
    return std::exp(de * std::log(2.0 * lambda / alpha) - std::lgamma(de + 1.0));
}

McResult monte_carlo_activation(const TriggerSpec& trigger, float lambda, std::span<const float> w, double alpha,
                                std::size_t samples, std::uint64_t seed, unsigned workers)
{
    if (w.size() != trigger.support.size()) throw std::invalid_argument("switch weights do not match the trigger support");
    if (samples == 0) throw std::invalid_argument("need at least one sample");
    const std::size_t e = w.size();
    std::vector<double> lo(e), hi(e), delta(e);
    for (std::size_t k = 0; k < e; ++k) {
        const std::size_t n = trigger.support[k];
        lo[k] = trigger.bounds.lower[n];
        hi[k] = trigger.bounds.upper[n];
        delta[k] = trigger.pattern[n];
    }
    // Fixed shards with their own streams; workers only decide who runs which shard.
    const std::size_t shards = (samples + kShard - 1) / kShard;
    std::vector<std::size_t> counts(shards, 0);
    auto run = [&](std::size_t s) {
        Rng rng(seed + 0x9e3779b97f4a7c15ULL * (s + 1));
        const std::size_t n = std::min(kShard, samples - s * kShard);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double dev = 0.0;
            for (std::size_t k = 0; k < e; ++k) {
                const double x = static_cast<double>(static_cast<float>(rng.uniform(lo[k], hi[k])));
                dev += std::fabs(static_cast<double>(w[k]) * (x - delta[k]));
            }
            hits += dev < static_cast<double>(lambda);
        }
        counts[s] = hits;
    };
    workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(shards)));
    if (workers == 1) {
        for (std::size_t s = 0; s < shards; ++s) run(s);
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < workers; ++t)
            pool.emplace_back([&, t] {
                for (std::size_t s = t; s < shards; s += workers) run(s);
            });
        for (auto& th : pool) th.join();
    }
    McResult r;
    r.samples = samples;
    for (auto c : counts) r.activations += c;
    r.frequency = static_cast<double>(r.activations) / static_cast<double>(samples);
    r.raw_bound = activation_bound(lambda, alpha, e);
    r.bound = std::min(r.raw_bound, 1.0);
    r.std_error = std::sqrt(r.frequency * (1.0 - r.frequency) / static_cast<double>(samples));
    return r;
}

} // namespace dfba
