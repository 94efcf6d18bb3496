// Train a blob MLP, look at one channel's fidelity curve, then prune and
// unlearn it. Usage: pipeline_demo [seed]
#include <cstdio>
#include <cstdlib>

#include "modhifi/modhifi.hpp"

using namespace modhifi;

int main(int argc, char** argv) {
    const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 0;
    const auto source = make_blob_source(3, {Layout::Image, {8, 1, 1}}, 5.0, 1.0, seed);
    const auto train_set = sample(source, 200, {}, seed);
    const auto test_set = sample(source, 200, {}, seed + 1);

    TrainConfig tc;
    tc.seed = seed;
    const ModelGraph model = train(make_mlp(8, {32, 32}, 3, seed), train_set, tc);
    std::printf("accuracy %.3f  params %zu\n", accuracy(model, test_set), evaluate(model, test_set).params);

    const auto csms = estimate_csms(model, 2, sample(source, 100, {}, seed + 2).x);
    std::printf("layer 2 channel 0 top-k fidelity by k:");
    for (std::size_t k = 1; k <= 6; ++k) std::printf(" %.3f", *naive_topk(csms[0], k).fidelity);
    std::printf("\n");

    for (bool compensate : {false, true}) {
        PrunePlan plan;
        plan.targets = {{2, 0.5}};
        plan.exact_budget = true;
        plan.compensate = compensate;
        plan.seed = seed;
        const auto pruned = compact(modhifi_prune(model, plan, source).model).model;
        const auto m = evaluate(pruned, test_set);
        std::printf("prune keep 0.5 %-14s accuracy %.3f  params %zu\n", compensate ? "compensated" : "uncompensated",
                    m.accuracy, m.params);
    }

    UnlearnPlan up;
    up.forget_class = 1;
    up.layers = {2, 4};
    up.k_fraction = 0.2;
    const auto before = unlearn_metrics(model, test_set, 1);
    const auto after = unlearn_metrics(modhifi_unlearn(model, up, sample(source, 200, {1}, seed)).model, test_set, 1);
    std::printf("unlearn class 1  forget %.3f -> %.3f  retain %.3f -> %.3f\n", before.forget_accuracy,
                after.forget_accuracy, before.retain_accuracy, after.retain_accuracy);
}
