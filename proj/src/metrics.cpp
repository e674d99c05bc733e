#include "dfba/metrics.hpp"
#include "dfba/trainer.hpp"

namespace dfba {

double metric_asr(const Model& model, const Dataset& data, const TriggerSpec& trigger, std::size_t target)
{
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < data.size(); ++i)
        if (data.labels[i] != target) eligible.push_back(i);
    if (eligible.empty()) throw MetricError("no eligible inputs");
    const auto pred = predictions(model, apply_trigger(data.subset(eligible), trigger));
    std::size_t hits = 0;
    for (auto p : pred) hits += p == target;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

CaBa metric_ca_ba(const Model& clean, const Model& backdoored, const Dataset& test)
{
    CaBa r;
    r.ca = accuracy(clean, test);
    r.ba = accuracy(backdoored, test);
    r.gap = r.ca - r.ba;
    return r;
}

} // namespace dfba
