#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "generators.hpp"
#include "oracle.hpp"

using namespace modhifi;

namespace {

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

double relative_csm_change(const ModelGraph& before, const ModelGraph& after, std::size_t layer, const Tensor& x) {
    const auto a = estimate_csms(before, layer, x);
    const auto b = estimate_csms(after, layer, x);
    double diff = 0.0, base = 0.0;
    for (std::size_t c = 0; c < a.size(); ++c)
        for (std::size_t i = 0; i < a[c].dim(); ++i)
            for (std::size_t j = 0; j < a[c].dim(); ++j) {
                diff += std::pow(a[c].q(i, j) - b[c].q(i, j), 2);
                base += std::pow(a[c].q(i, j), 2);
            }
    return std::sqrt(diff / base);
}

}  // namespace

// ---------------------------------------------------------------- masks

TEST(Mask, AllKeptIsIdentity) {
    const auto t = fixtures::blob_mlp(1);
    const auto m = apply_mask(t.model, ModificationMask::all_kept(0, component_dims(t.model.layers[0]), MaskMode::Prune));
    EXPECT_EQ(model_to_json(m), model_to_json(t.model));
}

TEST(Mask, ColumnMaskZeroesInputs) {
    const auto t = fixtures::blob_mlp(1);
    const auto dims = component_dims(t.model.layers[2]);
    const auto m = apply_mask(t.model, ModificationMask::from_columns(2, dims, {0, 3}));
    for (std::size_t i = 0; i < dims.inputs; ++i) EXPECT_EQ(input_column_is_zero(m.layers[2], i), i != 0 && i != 3);
}

TEST(Mask, Errors) {
    const auto t = fixtures::blob_mlp(1);
    const auto dims = component_dims(t.model.layers[2]);
    auto entry = ModificationMask::all_kept(2, dims, MaskMode::Prune);
    entry.at(0, 1) = 0;
    EXPECT_THROW(apply_mask(t.model, entry), InvalidArgument);
    entry.mode = MaskMode::UnlearnZero;
    EXPECT_NO_THROW(apply_mask(t.model, entry));
    entry.mode = MaskMode::UnlearnNegate;
    EXPECT_THROW(apply_mask(t.model, entry), InvalidArgument);
    EXPECT_THROW(apply_mask(t.model, ModificationMask::all_kept(0, dims, MaskMode::Prune)), ShapeMismatch);
    EXPECT_THROW(component_dims(t.model.layers[1]), InvalidArgument);
}

// ---------------------------------------------------------------- pruning

TEST(Prune, KeepAllIsANoOp) {
    for (const auto& t : {fixtures::blob_mlp(2), fixtures::blob_cnn(2)}) {
        PrunePlan plan;
        for (std::size_t l = 0; l < t.model.layers.size(); ++l)
            if (is_tappable(t.model.layers[l])) plan.targets.push_back({l, 1.0});
        const auto r = modhifi_prune(t.model, plan, t.test.x);
        EXPECT_EQ(model_to_json(r.model), model_to_json(t.model));
        EXPECT_EQ(accuracy(r.model, t.test), accuracy(t.model, t.test));
        for (const auto& rep : r.per_layer) {
            EXPECT_FALSE(rep.changed);
            EXPECT_EQ(rep.removed, 0u);
        }
    }
}

TEST(Prune, CompensationNeverIncreasesLayerError) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto t = fixtures::blob_mlp(seed, 3, 8, {24, 24});
        for (std::size_t layer : {2u, 4u}) {
            PrunePlan plan;
            plan.targets = {{layer, 0.5}};
            plan.lambda = 0.0;
            plan.exact_budget = true;
            const auto r = modhifi_prune(t.model, plan, t.test.x);
            const auto& rep = r.per_layer[0];
            ASSERT_TRUE(rep.changed) << "seed " << seed << " layer " << layer << " kept " << rep.kept << " removed " << rep.removed;
            EXPECT_LE(rep.mse_modified, rep.mse_masked * (1 + 1e-9) + 1e-15) << "layer " << layer;
        }
    }
}

TEST(Prune, CompensatedWeightsMatchLeastSquares) {
    // Head contributions are W_ci h_i, so the compensated row is the
    // no-intercept regression of the pre-activation on the kept hidden units.
    const auto t = fixtures::blob_mlp(3);
    const auto x = t.test.x;
    PrunePlan plan;
    plan.targets = {{2, 0.5}};
    plan.lambda = 0.0;
    plan.exact_budget = true;
    const auto r = modhifi_prune(t.model, plan, x);
    ASSERT_TRUE(r.per_layer[0].changed);
    const auto& kept = r.per_layer[0].kept_inputs;
    const auto& orig = std::get<Dense>(t.model.layers[2]);
    const auto& comp = std::get<Dense>(r.model.layers[2]);
    const auto h = forward_all(t.model, x)[2];

    Eigen::MatrixXd a(x.batch(), kept.size());
    for (std::size_t n = 0; n < x.batch(); ++n)
        for (std::size_t j = 0; j < kept.size(); ++j) a(n, j) = h.at(n, kept[j], 0);
    for (std::size_t c = 0; c < orig.out; ++c) {
        Eigen::VectorXd y(x.batch());
        for (std::size_t n = 0; n < x.batch(); ++n) {
            double s = 0.0;
            for (std::size_t i = 0; i < orig.in; ++i) s += orig.w(c, i) * h.at(n, i, 0);
            y(n) = s;
        }
        const Eigen::VectorXd beta = a.colPivHouseholderQr().solve(y);
        for (std::size_t j = 0; j < kept.size(); ++j)
            EXPECT_NEAR(comp.w(c, kept[j]), beta(j), 1e-8 * std::max(1.0, std::abs(beta(j))));
    }
}

TEST(Prune, ExactBudgetBoundsTheKeptCount) {
    const auto t = fixtures::blob_mlp(4, 4, 8, {32});
    PrunePlan plan;
    plan.targets = {{2, 0.5}};
    plan.exact_budget = true;
    const auto r = modhifi_prune(t.model, plan, t.test.x);
    EXPECT_LE(r.per_layer[0].kept, 16u);
    EXPECT_GE(r.per_layer[0].kept, 1u);
}

TEST(Prune, RecalibratedBatchNormMatchesCalibrationStatistics) {
    const auto t = fixtures::blob_cnn(5);
    PrunePlan plan;
    plan.targets = {{3, 0.5}};
    plan.exact_budget = true;
    const auto x = t.test.x;
    const auto r = modhifi_prune(t.model, plan, x);
    ASSERT_TRUE(r.per_layer[0].changed);
    const auto acts = forward_all(r.model, x);
    const auto& bn = std::get<BatchNorm2D>(r.model.layers[4]);
    const auto& bn0 = std::get<BatchNorm2D>(r.model.layers[1]);
    EXPECT_EQ(bn0.running_mean, std::get<BatchNorm2D>(t.model.layers[1]).running_mean);   // upstream untouched
    const std::size_t sp = acts[4].shape().spatial();
    const double count = static_cast<double>(x.batch() * sp);
    for (std::size_t c = 0; c < bn.channels; ++c) {
        double mean = 0.0;
        for (std::size_t n = 0; n < x.batch(); ++n)
            for (double v : acts[4].channel(n, c)) mean += v / count;
        double var = 0.0;
        for (std::size_t n = 0; n < x.batch(); ++n)
            for (double v : acts[4].channel(n, c)) var += (v - mean) * (v - mean) / (count - 1);
        EXPECT_NEAR(bn.running_mean[c], mean, 1e-10 * (1 + std::abs(mean)));
        EXPECT_NEAR(bn.running_var[c], std::max(var, kMinRunningVar), 1e-10 * (1 + var));
    }
}

TEST(Prune, Errors) {
    const auto t = fixtures::blob_mlp(6);
    PrunePlan plan;
    EXPECT_THROW(modhifi_prune(t.model, plan, t.test.x), InvalidArgument);
    plan.targets = {{1, 0.5}};
    EXPECT_THROW(modhifi_prune(t.model, plan, t.test.x), InvalidArgument);
    plan.targets = {{0, 0.0}};
    EXPECT_THROW(modhifi_prune(t.model, plan, t.test.x), InvalidArgument);
    plan.targets = {{0, 0.5}};
    EXPECT_THROW(modhifi_prune(t.model, plan, Tensor(10, t.model.input.shape)), DegenerateLayer);
}

TEST(Prune, SyntheticSourceUsesPlanSeed) {
    const auto t = fixtures::blob_mlp(7);
    PrunePlan plan;
    plan.targets = {{2, 0.5}};
    plan.samples_per_class = 50;
    plan.seed = 3;
    const auto a = modhifi_prune(t.model, plan, t.source);
    const auto b = modhifi_prune(t.model, plan, sample(t.source, 50, {}, 3).x);
    EXPECT_EQ(model_to_json(a.model), model_to_json(b.model));
}

// ---------------------------------------------------------------- unlearning

TEST(Unlearn, ZeroKIsIdentity) {
    const auto t = fixtures::blob_mlp(8, 3);
    UnlearnPlan plan;
    plan.forget_class = 1;
    plan.layers = {0, 2};
    plan.k = 0;
    const auto forget = sample(t.source, 20, {1}, 1);
    EXPECT_EQ(model_to_json(modhifi_unlearn(t.model, plan, forget).model), model_to_json(t.model));
}

TEST(Unlearn, Errors) {
    const auto t = fixtures::blob_mlp(8, 3);
    UnlearnPlan plan;
    plan.forget_class = 1;
    plan.layers = {0};
    EXPECT_THROW(modhifi_unlearn(t.model, plan, sample(t.source, 5, {0, 1}, 1)), WrongClassData);
    plan.forget_class = 3;
    EXPECT_THROW(modhifi_unlearn(t.model, plan, sample(t.source, 5, {2}, 1)), UnknownClass);
    plan.forget_class = 1;
    plan.k_fraction = 0.5;
    EXPECT_THROW(modhifi_unlearn(t.model, plan, sample(t.source, 5, {1}, 1)), InvalidArgument);
    plan.k_fraction = 0.1;
    plan.variant = MaskMode::UnlearnNegate;
    EXPECT_THROW(modhifi_unlearn(t.model, plan, sample(t.source, 5, {1}, 1)), InvalidArgument);
}

TEST(Unlearn, ZeroVariantRemovesTheTopComponents) {
    const auto t = fixtures::blob_mlp(9, 3, 8, {32, 32});
    UnlearnPlan plan;
    plan.forget_class = 0;
    plan.layers = {2};
    plan.k = 3;
    const auto forget = sample(t.source, 100, {0}, 4);
    const auto r = modhifi_unlearn(t.model, plan, forget);
    const auto csms = estimate_csms(t.model, 2, forget.x);
    const auto& before = std::get<Dense>(t.model.layers[2]);
    const auto& after = std::get<Dense>(r.model.layers[2]);
    for (const auto& csm : csms) {
        if (csm.dead()) continue;
        const auto top = topk_indices(singleton_scores(csm).s, 3);
        for (std::size_t i = 0; i < before.in; ++i) {
            const bool removed = std::find(top.begin(), top.end(), i) != top.end();
            EXPECT_EQ(after.w(csm.channel, i), removed ? 0.0 : before.w(csm.channel, i));
        }
    }
}

TEST(Unlearn, NegationSubtractsTheHiFiContribution) {
    const auto t = fixtures::blob_ffn(10);
    UnlearnPlan plan;
    plan.forget_class = 2;
    plan.layers = {1};
    plan.k = 2;
    plan.variant = MaskMode::UnlearnNegate;
    const auto forget = sample(t.source, 30, {2}, 5);
    const auto r = modhifi_unlearn(t.model, plan, forget);
    const auto& before = std::get<FFNBlock>(t.model.layers[1]).down;
    const auto& after = std::get<FFNBlock>(r.model.layers[1]).down;

    const auto x = forget.x.slice(0, 5);
    const std::vector<std::size_t> tap{1};
    const auto taps = forward(t.model, x, tap).taps[0];
    const auto in = forward_all(t.model, x)[1];
    const auto out = forward_all(r.model, x)[2];
    for (std::size_t n = 0; n < 5; ++n)
        for (std::size_t c = 0; c < before.out; ++c)
            for (std::size_t p = 0; p < taps.positions; ++p) {
                double ref = in.at(n, c, p) + after.bias[c];
                for (std::size_t i = 0; i < before.in; ++i) {
                    const bool negated = after.w(c, i) != before.w(c, i);
                    ref += (negated ? -1.0 : 1.0) * taps(n, c, i)[p];
                }
                EXPECT_NEAR(out.at(n, c, p), ref, 1e-10 * std::max(1.0, std::abs(ref)));
            }
    std::size_t negated = 0;
    for (std::size_t i = 0; i < before.weight.size(); ++i) {
        if (after.weight[i] != before.weight[i]) {
            EXPECT_EQ(after.weight[i], -before.weight[i]);
            ++negated;
        }
    }
    EXPECT_GT(negated, 0u);
    EXPECT_LE(negated, 2 * before.out);
}

TEST(UnlearnProperty, ForgetClassCsmsChangeMoreThanRetain) {
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto t = fixtures::blob_mlp(seed, 3, 8, {32, 32});
        const int fc = static_cast<int>(seed % 3);
        UnlearnPlan plan;
        plan.forget_class = fc;
        plan.layers = {4};
        plan.k_fraction = 0.1;
        const auto forget = sample(t.source, 100, {fc}, seed + 20);
        std::set<int> others;
        for (int k = 0; k < 3; ++k)
            if (k != fc) others.insert(k);
        const auto retain = sample(t.source, 50, others, seed + 21);
        const auto r = modhifi_unlearn(t.model, plan, forget);
        const double df = relative_csm_change(t.model, r.model, 4, forget.x);
        const double dr = relative_csm_change(t.model, r.model, 4, retain.x);
        wins += df > dr;
    }
    EXPECT_GE(wins, 4);
}

// ---------------------------------------------------------------- accounting

TEST(Cost, ClosedFormCounts) {
    const auto mlp = make_mlp(8, {24}, 2, 0);
    const auto r = flop_param_report(mlp);
    EXPECT_EQ(r.total_params, 8u * 24 + 24 + 24 * 2 + 2);
    EXPECT_EQ(r.total_macs, 8u * 24 + 24 * 2);

    const auto cnn = make_cnn({3, 6, 6}, {4, 5}, 3, 0);
    const auto c = flop_param_report(cnn);
    EXPECT_EQ(c.layers[0].params, 4u * 3 * 9 + 4);
    EXPECT_EQ(c.layers[0].macs, 4u * 3 * 9 * 36);
    EXPECT_EQ(c.layers[1].params, 2u * 4);
    EXPECT_EQ(c.layers[3].macs, 5u * 4 * 9 * 36);
    EXPECT_EQ(c.total_params, (4u * 27 + 4) + 8 + (5 * 36 + 5) + 10 + (5 * 3 + 3));
    EXPECT_EQ(c.total_macs, 4u * 27 * 36 + 5 * 36 * 36 + 5 * 3);

    const auto ffn = make_ffn_model(4, 3, 6, 1, 2, NormType::LayerNorm, 0);
    EXPECT_EQ(flop_param_report(ffn).layers[0].macs, (4u * 6 + 6 * 4) * 3);
}

// ---------------------------------------------------------------- compaction

TEST(Compact, NoZeroChannelsIsIdentity) {
    const auto t = fixtures::blob_cnn(11);
    const auto r = compact(t.model);
    EXPECT_TRUE(r.removed.empty());
    EXPECT_EQ(model_to_json(r.model), model_to_json(t.model));
}

TEST(Compact, ZeroHiddenUnitShrinksTheMlp) {
    auto m = make_mlp(5, {4}, 2, 1);
    auto& head = std::get<Dense>(m.layers[2]);
    for (std::size_t c = 0; c < head.out; ++c) head.w(c, 1) = 0.0;
    const auto r = compact(m);
    ASSERT_EQ(r.removed.size(), 1u);
    EXPECT_EQ(std::get<Dense>(r.model.layers[0]).out, 3u);
    EXPECT_EQ(std::get<Dense>(r.model.layers[2]).in, 3u);
    gen::Rng rng(1);
    const auto x = gen::random_tensor(rng, 10, {5, 1, 1});
    EXPECT_LE(max_abs_diff(forward(r.model, x).logits, forward(m, x).logits), 1e-12);
    EXPECT_EQ(flop_param_report(r.model).total_params, flop_param_report(m).total_params - 5 - 1 - 2);
}

TEST(CompactProperty, PrunedModelsAreEquivalentAfterCompaction) {
    gen::Rng rng(12);
    const std::vector<std::pair<fixtures::Task, std::vector<std::size_t>>> cases{
        {fixtures::blob_mlp(12, 3, 8, {24, 16}), {2, 4}},
        {fixtures::blob_cnn(12), {3, 7}},
        {fixtures::blob_ffn(12), {0, 1}},   // the head sits behind a norm layer
    };
    for (const auto& [t, layers] : cases) {
        PrunePlan plan;
        for (auto l : layers) plan.targets.push_back({l, 0.5});
        plan.exact_budget = true;
        const auto pruned = modhifi_prune(t.model, plan, t.test.x).model;
        const auto c = compact(pruned);
        EXPECT_FALSE(c.removed.empty());
        EXPECT_LT(flop_param_report(c.model).total_params, flop_param_report(pruned).total_params);
        const auto x = gen::random_tensor(rng, 100, t.model.input.shape);
        EXPECT_LE(max_abs_diff(forward(c.model, x).logits, forward(pruned, x).logits), 1e-12);
    }
}

TEST(Compact, HalfPrunedConvHalvesItsParameters) {
    auto m = make_cnn({2, 4, 4}, {4, 6}, 2, 3);
    const auto dims = component_dims(m.layers[3]);
    m = apply_mask(m, ModificationMask::from_columns(3, dims, {0, 2}));
    const auto c = compact(m);
    const auto before = flop_param_report(m);
    const auto after = flop_param_report(c.model);
    EXPECT_EQ(after.layers[0].params * 2, before.layers[0].params);
    EXPECT_EQ(after.layers[3].params, 6u * 2 * 9 + 6);
    EXPECT_EQ(after.layers[0].macs * 2, before.layers[0].macs);
    EXPECT_EQ(after.layers[3].macs * 2, before.layers[3].macs);
}

TEST(Compact, ResidualAndNormCouplingIsRejected) {
    auto ffn = make_ffn_model(4, 3, 6, 1, 2, NormType::LayerNorm, 0);
    auto& head = std::get<Dense>(ffn.layers[3]);
    for (std::size_t c = 0; c < head.out; ++c) head.w(c, 0) = 0.0;
    EXPECT_THROW(compact(ffn), InconsistentCoupling);

    ModelGraph r{{Layout::Image, {4, 1, 1}}, {make_dense(4, 4), ReLU{}, ResidualAdd{}, make_dense(4, 2)}, {{0, 2}}, 2};
    initialize(r, 1);
    infer_shapes(r);
    auto& d = std::get<Dense>(r.layers[3]);
    for (std::size_t c = 0; c < d.out; ++c) d.w(c, 2) = 0.0;
    EXPECT_THROW(compact(r), InconsistentCoupling);
}

TEST(Compact, FfnHiddenUnitsAreRemoved) {
    auto ffn = make_ffn_model(4, 3, 6, 1, 2, NormType::RMSNorm, 0);
    auto& down = std::get<FFNBlock>(ffn.layers[0]).down;
    for (std::size_t c = 0; c < down.out; ++c) down.w(c, 4) = 0.0;
    const auto r = compact(ffn);
    ASSERT_EQ(r.removed.size(), 1u);
    EXPECT_TRUE(r.removed[0].ffn_hidden);
    EXPECT_EQ(std::get<FFNBlock>(r.model.layers[0]).up.out, 5u);
    gen::Rng rng(2);
    const auto x = gen::random_tensor(rng, 20, ffn.input.shape);
    EXPECT_LE(max_abs_diff(forward(r.model, x).logits, forward(ffn, x).logits), 1e-12);
}
