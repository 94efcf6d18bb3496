#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "generators.hpp"
#include "oracle.hpp"

using namespace modhifi;

namespace {

/// Every parameter and BN buffer drawn at random (variances kept positive).
void randomize(ModelGraph& m, gen::Rng& rng) {
    std::normal_distribution<double> g(0.0, 0.5);
    for (auto& layer : m.layers) {
        for_each_param(layer, [&](std::vector<double>& p) {
            for (double& v : p) v = g(rng);
        });
        if (auto* bn = std::get_if<BatchNorm2D>(&layer)) {
            for (double& v : bn->running_mean) v = g(rng);
            for (double& v : bn->running_var) v = gen::uniform(rng, 0.3, 2.0);
        }
    }
}

ModelGraph chain(InputLayout input, std::vector<LayerSpec> layers, std::size_t classes,
                 std::vector<ResidualEdge> edges = {}) {
    ModelGraph m{input, std::move(layers), std::move(edges), classes};
    initialize(m, 1);
    infer_shapes(m);
    return m;
}

/// Layer output minus bias, i.e. what the taps must sum to.
Tensor pre_activation(const ModelGraph& m, std::size_t l, const Tensor& x) {
    const auto acts = forward_all(m, x);
    Tensor y = acts[l + 1];
    std::visit(
        [&](const auto& layer) {
            using T = std::remove_cvref_t<decltype(layer)>;
            const std::vector<double>* bias = nullptr;
            if constexpr (std::is_same_v<T, Dense> || std::is_same_v<T, Conv2D>) bias = &layer.bias;
            if constexpr (std::is_same_v<T, FFNBlock>) bias = &layer.down.bias;
            for (std::size_t n = 0; n < y.batch(); ++n)
                for (std::size_t c = 0; c < y.shape().c; ++c)
                    for (auto& v : y.channel(n, c)) v -= (*bias)[c];
            if constexpr (std::is_same_v<T, FFNBlock>) {
                auto yd = y.data();
                auto xd = acts[l].data();
                for (std::size_t i = 0; i < yd.size(); ++i) yd[i] -= xd[i];
            }
        },
        m.layers[l]);
    return y;
}

void expect_taps_complete(const ModelGraph& m, std::size_t l, const Tensor& x, double tol) {
    const std::vector<std::size_t> taps{l};
    const auto r = forward(m, x, taps);
    ASSERT_EQ(r.taps.size(), 1u);
    const auto& t = r.taps[0];
    const Tensor y = pre_activation(m, l, x);
    ASSERT_EQ(t.outputs, y.shape().c);
    for (std::size_t n = 0; n < t.samples; ++n)
        for (std::size_t c = 0; c < t.outputs; ++c)
            for (std::size_t p = 0; p < t.positions; ++p) {
                double s = 0.0;
                for (std::size_t i = 0; i < t.inputs; ++i) s += t(n, c, i)[p];
                const double ref = y.at(n, c, p);
                EXPECT_LE(std::abs(s - ref), tol * std::max(1.0, std::abs(ref)));
            }
}

}  // namespace

// ---------------------------------------------------------------- forward

TEST(Forward, IdentityDenseAndItsTaps) {
    Dense d = make_dense(3, 3);
    d.weight = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    d.bias = {0, 0, 0};
    ModelGraph m{{Layout::Image, {3, 1, 1}}, {d}, {}, 3};
    const Tensor x(1, {3, 1, 1}, Vector{0.5, -2.0, 4.0});
    const std::vector<std::size_t> tap{0};
    const auto r = forward(m, x, tap);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(r.logits(0, c), x.at(0, c, 0));
    const auto& t = r.taps[0];
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(t(0, c, i)[0], c == i ? x.at(0, i, 0) : 0.0);
}

TEST(Forward, OneByOneSummingConvTapsAreInputChannels) {
    Conv2D c = make_conv(3, 1, 1);
    c.weight = {1, 1, 1};
    c.bias = {0};
    ModelGraph m{{Layout::Image, {3, 2, 2}}, {c, AvgPool2D{0}}, {}, 1};
    gen::Rng rng(1);
    const Tensor x = gen::random_tensor(rng, 2, {3, 2, 2});
    const std::vector<std::size_t> tap{0};
    const auto acts = forward_all(m, x);
    const auto r = forward(m, x, tap);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t p = 0; p < 4; ++p) {
            EXPECT_DOUBLE_EQ(acts[1].at(n, 0, p), x.at(n, 0, p) + x.at(n, 1, p) + x.at(n, 2, p));
            for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(r.taps[0](n, 0, i)[p], x.at(n, i, p));
        }
}

TEST(Forward, ConvMatchesDirectLoop) {
    gen::Rng rng(2);
    for (std::size_t k : {1u, 3u, 5u}) {
        auto m = chain({Layout::Image, {2, 5, 4}}, {make_conv(2, 3, k), AvgPool2D{0}}, 3);
        randomize(m, rng);
        const Tensor x = gen::random_tensor(rng, 3, {2, 5, 4});
        const auto acts = forward_all(m, x);
        const auto& conv = std::get<Conv2D>(m.layers[0]);
        for (std::size_t n = 0; n < 3; ++n) {
            const auto ref = oracle::conv_direct(conv, x.sample(n), 5, 4);
            const auto got = acts[1].sample(n);
            for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-13);
        }
    }
}

TEST(Forward, BatchNormInferenceIsPerChannelAffine) {
    gen::Rng rng(3);
    auto m = chain({Layout::Image, {4, 3, 3}}, {make_batchnorm(4), AvgPool2D{0}}, 4);
    randomize(m, rng);
    const auto& bn = std::get<BatchNorm2D>(m.layers[0]);
    const Tensor x = gen::random_tensor(rng, 5, {4, 3, 3}, 2.0);
    const auto y = forward_all(m, x)[1];
    for (std::size_t n = 0; n < 5; ++n)
        for (std::size_t c = 0; c < 4; ++c)
            for (std::size_t p = 0; p < 9; ++p) {
                const double ref = (x.at(n, c, p) - bn.running_mean[c]) / std::sqrt(bn.running_var[c] + bn.eps) *
                                       bn.gamma[c] +
                                   bn.beta[c];
                EXPECT_NEAR(y.at(n, c, p), ref, 1e-13);
            }
}

TEST(Forward, NormLayersFollowUnitNormalization) {
    gen::Rng rng(4);
    for (auto type : {NormType::LayerNorm, NormType::RMSNorm}) {
        auto m = chain({Layout::Tokens, {5, 3, 1}}, {make_norm(type, 5), AvgPool2D{0}}, 5);
        randomize(m, rng);
        const auto& nl = std::get<Norm>(m.layers[0]);
        const Tensor x = gen::random_tensor(rng, 2, {5, 3, 1});
        const auto y = forward_all(m, x)[1];
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t t = 0; t < 3; ++t) {
                Eigen::VectorXd z(5);
                for (std::size_t c = 0; c < 5; ++c) z(static_cast<Eigen::Index>(c)) = x.at(n, c, t);
                if (type == NormType::LayerNorm) z.array() -= z.mean();
                z /= z.norm();
                for (std::size_t c = 0; c < 5; ++c)
                    EXPECT_NEAR(y.at(n, c, t), nl.gamma[c] * z(static_cast<Eigen::Index>(c)) + nl.beta[c], 1e-13);
            }
    }
}

TEST(Forward, PureAndDeterministic) {
    gen::Rng rng(5);
    auto m = make_cnn({2, 4, 4}, {3, 3}, 3, 7);
    randomize(m, rng);
    const Tensor x = gen::random_tensor(rng, 4, {2, 4, 4});
    EXPECT_EQ(forward(m, x).logits, forward(m, x).logits);
}

TEST(Forward, Errors) {
    const auto m = make_mlp(4, {3}, 2, 1);
    EXPECT_THROW(forward(m, Tensor(2, {5, 1, 1})), ShapeMismatch);
    auto bad = m;
    std::get<Dense>(bad.layers[0]).weight[0] = 1e308;
    EXPECT_THROW(forward(bad, Tensor(1, {4, 1, 1}, 1e308)), NonFiniteActivation);
    const std::vector<std::size_t> relu{1};
    EXPECT_THROW(forward(m, Tensor(1, {4, 1, 1}), relu), ShapeMismatch);
}

TEST(Forward, ResidualEdgeAddsSourceActivation) {
    gen::Rng rng(6);
    auto m = chain({Layout::Image, {4, 1, 1}}, {make_dense(4, 4), ReLU{}, ResidualAdd{}, make_dense(4, 2)}, 2, {{0, 2}});
    randomize(m, rng);
    const Tensor x = gen::random_tensor(rng, 3, {4, 1, 1});
    const auto acts = forward_all(m, x);
    for (std::size_t i = 0; i < acts[3].size(); ++i) EXPECT_EQ(acts[3].data()[i], acts[2].data()[i] + acts[1].data()[i]);
}

TEST(Graph, ShapeChecks) {
    ModelGraph m{{Layout::Image, {4, 1, 1}}, {make_dense(5, 2)}, {}, 2};
    initialize(m, 0);
    EXPECT_THROW(infer_shapes(m), ShapeMismatch);
    ModelGraph r{{Layout::Image, {4, 1, 1}}, {make_dense(4, 3), ResidualAdd{}}, {{-1, 1}}, 3};
    initialize(r, 0);
    EXPECT_THROW(infer_shapes(r), ShapeMismatch);
}

// ---------------------------------------------------------------- taps

TEST(TapsProperty, CompletenessOnRandomModels) {
    gen::Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        const int kind = trial % 4;
        if (kind == 0) {
            auto m = make_mlp(gen::uniform_size(rng, 1, 6), {gen::uniform_size(rng, 1, 6)}, 3, trial);
            randomize(m, rng);
            const Tensor x = gen::random_tensor(rng, 4, m.input.shape);
            expect_taps_complete(m, 0, x, 1e-9);
            expect_taps_complete(m, 2, x, 1e-9);
        } else if (kind == 1) {
            const Shape in{gen::uniform_size(rng, 1, 3), gen::uniform_size(rng, 1, 5), gen::uniform_size(rng, 1, 5)};
            auto m = make_cnn(in, {gen::uniform_size(rng, 1, 4), 2}, 2, trial, trial % 8 < 4 ? 3 : 1);
            randomize(m, rng);
            const Tensor x = gen::random_tensor(rng, 3, in);
            expect_taps_complete(m, 0, x, 1e-9);
            expect_taps_complete(m, 3, x, 1e-9);
        } else {
            auto m = make_ffn_model(gen::uniform_size(rng, 2, 5), gen::uniform_size(rng, 1, 4), gen::uniform_size(rng, 2, 7),
                                    1, 2, kind == 2 ? NormType::LayerNorm : NormType::RMSNorm, trial);
            randomize(m, rng);
            const Tensor x = gen::random_tensor(rng, 3, m.input.shape);
            expect_taps_complete(m, 0, x, 1e-9);
        }
    }
}

// ---------------------------------------------------------------- gradients

namespace {

/// Central differences of the loss against analytic gradients for every
/// parameter entry.
void gradient_check(const ModelGraph& m, const Tensor& x, const std::vector<int>& y, Mode mode) {
    const auto analytic = loss_and_gradients(m, x, y, mode);
    const double h = 1e-6;
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        std::vector<const std::vector<double>*> grads;
        for_each_param(analytic.gradients[l], [&](const std::vector<double>& g) { grads.push_back(&g); });
        std::size_t a = 0;
        ModelGraph probe = m;
        for_each_param(probe.layers[l], [&](std::vector<double>& p) {
            for (std::size_t e = 0; e < p.size(); ++e) {
                const double orig = p[e];
                p[e] = orig + h;
                const double up = loss_and_gradients(probe, x, y, mode).loss;
                p[e] = orig - h;
                const double down = loss_and_gradients(probe, x, y, mode).loss;
                p[e] = orig;
                const double numeric = (up - down) / (2 * h);
                const double got = (*grads[a])[e];
                EXPECT_LE(std::abs(got - numeric), 1e-4 * std::max({std::abs(got), std::abs(numeric), 1e-2}))
                    << "layer " << l << " (" << to_string(kind_of(m.layers[l])) << ") array " << a << " entry " << e;
            }
            ++a;
        });
    }
}

}  // namespace

TEST(GradientCheck, DenseReluGelu) {
    gen::Rng rng(8);
    auto m = chain({Layout::Image, {4, 1, 1}}, {make_dense(4, 5), ReLU{}, make_dense(5, 4), GELU{}, make_dense(4, 3)}, 3);
    randomize(m, rng);
    gradient_check(m, gen::random_tensor(rng, 6, {4, 1, 1}), {0, 1, 2, 0, 1, 2}, Mode::Inference);
}

TEST(GradientCheck, ConvBatchNormPool) {
    gen::Rng rng(9);
    auto m = chain({Layout::Image, {2, 4, 4}},
                   {make_conv(2, 3, 3), make_batchnorm(3), ReLU{}, AvgPool2D{2}, make_conv(3, 2, 1), AvgPool2D{0},
                    make_dense(2, 3)},
                   3);
    randomize(m, rng);
    const Tensor x = gen::random_tensor(rng, 4, {2, 4, 4});
    gradient_check(m, x, {0, 1, 2, 1}, Mode::Inference);
    gradient_check(m, x, {0, 1, 2, 1}, Mode::Train);
}

TEST(GradientCheck, NormsFfnAndResidual) {
    gen::Rng rng(10);
    for (auto type : {NormType::LayerNorm, NormType::RMSNorm}) {
        auto m = chain({Layout::Tokens, {4, 3, 1}},
                       {FFNBlock{make_norm(type, 4), make_dense(4, 6), make_dense(6, 4)}, make_dense(4, 4), GELU{},
                        ResidualAdd{}, make_norm(type, 4), AvgPool2D{0}, make_dense(4, 2)},
                       2, {{0, 3}});
        randomize(m, rng);
        gradient_check(m, gen::random_tensor(rng, 3, {4, 3, 1}), {0, 1, 1}, Mode::Inference);
    }
}

// ---------------------------------------------------------------- training

TEST(Train, SeparableBlobsReachHighAccuracy) {
    auto t = fixtures::blob_mlp(1);
    EXPECT_GE(accuracy(t.model, t.train), 0.99);
}

TEST(Train, LossDecreases) {
    auto t = fixtures::blob_mlp(2, 3);
    TrainConfig cfg;
    cfg.seed = 2;
    const auto h = train_with_history(make_mlp(8, {24}, 3, 102), t.train, cfg);
    EXPECT_LT(h.epoch_loss.back(), h.epoch_loss.front());
}

TEST(Train, ZeroEpochsIsIdentity) {
    auto t = fixtures::blob_mlp(3);
    TrainConfig cfg;
    cfg.epochs = 0;
    const auto m = make_mlp(8, {24}, 2, 5);
    EXPECT_EQ(model_to_json(train(m, t.train, cfg)), model_to_json(m));
}

TEST(Train, DeterministicGivenSeed) {
    const auto a = fixtures::blob_mlp(4);
    const auto b = fixtures::blob_mlp(4);
    EXPECT_EQ(model_to_json(a.model), model_to_json(b.model));
}

TEST(Train, Errors) {
    auto t = fixtures::blob_mlp(5);
    TrainConfig cfg;
    EXPECT_THROW(train(make_mlp(8, {4}, 3, 0), t.train, cfg), ShapeMismatch);
    cfg.momentum = 1.0;
    EXPECT_THROW(train(make_mlp(8, {4}, 2, 0), t.train, cfg), InvalidArgument);
    cfg = {};
    cfg.learning_rate = 1e6;
    cfg.weight_decay = 0.0;
    cfg.momentum = 0.0;
    cfg.cosine_schedule = false;
    EXPECT_THROW(train(make_mlp(8, {24}, 2, 0), t.train, cfg), Error);
}

// ---------------------------------------------------------------- accuracy

TEST(Accuracy, OneHotOracleModelIsPerfect) {
    // Dense identity on one-hot inputs: logits are the labels' one-hots.
    Dense d = make_dense(3, 3);
    d.weight = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    d.bias = {0, 0, 0};
    ModelGraph m{{Layout::Image, {3, 1, 1}}, {d}, {}, 3};
    LabeledDataset data{m.input, 3, Tensor(3, {3, 1, 1}, Vector{1, 0, 0, 0, 1, 0, 0, 0, 1}), {0, 1, 2}};
    EXPECT_EQ(accuracy(m, data), 1.0);
}

TEST(Accuracy, ConstantLogitsPickClassZero) {
    Dense d = make_dense(2, 10);
    d.weight.assign(20, 0.0);
    d.bias.assign(10, 0.5);
    ModelGraph m{{Layout::Image, {2, 1, 1}}, {d}, {}, 10};
    LabeledDataset data{m.input, 10, Tensor(20, {2, 1, 1}), {}};
    for (int k = 0; k < 20; ++k) data.y.push_back(k % 10);
    EXPECT_DOUBLE_EQ(accuracy(m, data), 0.1);
}

TEST(Accuracy, MatchesHandRolledLoop) {
    const auto t = fixtures::blob_mlp(6, 4);
    const auto acts = forward_all(t.model, t.test.x);
    const auto& logits = acts.back();
    std::size_t hit = 0;
    for (std::size_t n = 0; n < t.test.size(); ++n) {
        int best = 0;
        for (std::size_t c = 1; c < 4; ++c)
            if (logits.at(n, c, 0) > logits.at(n, static_cast<std::size_t>(best), 0)) best = static_cast<int>(c);
        hit += best == t.test.y[n];
    }
    EXPECT_EQ(accuracy(t.model, t.test), static_cast<double>(hit) / static_cast<double>(t.test.size()));
}

// ---------------------------------------------------------------- io

class ModelIo : public ::testing::Test {
protected:
    std::filesystem::path dir = std::filesystem::temp_directory_path() / "modhifi_model_io";
    void SetUp() override { std::filesystem::create_directories(dir); }
    void TearDown() override { std::filesystem::remove_all(dir); }
};

TEST_F(ModelIo, RoundTripIsExactForEveryLayerKind) {
    gen::Rng rng(11);
    std::vector<ModelGraph> models{make_mlp(5, {4, 3}, 2, 1), make_cnn({2, 4, 4}, {3}, 2, 2),
                                   make_ffn_model(4, 3, 6, 2, 2, NormType::RMSNorm, 3),
                                   chain({Layout::Tokens, {4, 2, 1}},
                                         {make_dense(4, 4), GELU{}, ResidualAdd{}, make_norm(NormType::LayerNorm, 4),
                                          AvgPool2D{0}, make_dense(4, 2)},
                                         2, {{-1, 2}})};
    for (auto& m : models) {
        randomize(m, rng);
        const auto path = (dir / "m.json").string();
        save_model(m, path);
        const auto back = load_model(path);
        EXPECT_EQ(model_to_json(back), model_to_json(m));
        ASSERT_EQ(back.layers.size(), m.layers.size());
        EXPECT_EQ(back.residual_edges, m.residual_edges);
        const Tensor x = gen::random_tensor(rng, 2, m.input.shape);
        EXPECT_EQ(forward(back, x).logits, forward(m, x).logits);
    }
}

TEST_F(ModelIo, TruncatedFileIsFormatError) {
    const auto path = (dir / "t.json").string();
    save_model(make_mlp(3, {2}, 2, 0), path);
    std::string text;
    {
        std::ifstream in(path);
        text.assign(std::istreambuf_iterator<char>(in), {});
    }
    std::ofstream(path) << text.substr(0, text.size() / 2);
    EXPECT_THROW(load_model(path), FormatError);
}

TEST_F(ModelIo, LengthMismatchNamesTheLayer) {
    auto j = model_to_json(make_mlp(3, {2}, 2, 0));
    j["layers"][2]["arrays"]["weight"].push_back(1.0);
    try {
        model_from_json(j);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("layers[2]"), std::string::npos) << e.what();
    }
}

TEST_F(ModelIo, MissingFileAndBadVersion) {
    EXPECT_THROW(load_model((dir / "absent.json").string()), FormatError);
    auto j = model_to_json(make_mlp(3, {2}, 2, 0));
    j["version"] = 99;
    EXPECT_THROW(model_from_json(j), FormatError);
    j = model_to_json(make_mlp(3, {2}, 2, 0));
    j["layers"][0]["kind"] = "Attention";
    EXPECT_THROW(model_from_json(j), FormatError);
}
