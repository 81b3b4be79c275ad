// Drop every other unit of every maskable site of a randomly initialised
// conformer, slice the network down, and check that the small model computes
// the same embeddings as the masked large one.

#include <cstdio>

#include "trimlab/trimlab.hpp"

using namespace trimlab;

int main() {
    const auto model = build_backbone<double>(default_spec(Backbone::conformer_t), 3);

    auto masks = all_active(model.spec);
    for (auto& [site, gates] : masks)
        for (std::size_t i = 0; i < gates.size(); ++i) gates[i] = i % 2 == 0;

    const auto plan = plan_trim(model, masks);
    const auto [trimmed, report] = apply_trim(model, plan);

    Rng rng(5);
    Tensor<double> x(Shape{4, 30, model.spec.input_dim});
    for (auto& v : x.values()) v = rng.uniform(0.0, 3.0);
    const auto dev = verify_equivalence(model, masks, trimmed, plan, x);

    const Shape one{30, model.spec.input_dim};
    const auto before = count_costs(model.spec, one), after = count_costs(trimmed.spec, one);
    std::printf("encoder params  %zu -> %zu  (trim ratio %.3f)\n", report.params_before, report.params_after,
                report.trimming_ratio);
    std::printf("MACs per clip   %llu -> %llu\n", static_cast<unsigned long long>(before.macs),
                static_cast<unsigned long long>(after.macs));
    for (const auto& [site, n] : report.removed_units) std::printf("  %-21s -%zu units\n", site.c_str(), n);
    std::printf("max |masked - trimmed| = %.3g\n", dev.max());
    return dev.max() < 1e-9 ? 0 : 1;
}
