#pragma once

// Trained desk-scale fixtures shared by the unit tests and the acceptance
// suite. Every fixture is a pure function of its seed.

#include <cstdint>
#include <vector>

#include "modhifi/modhifi.hpp"

namespace fixtures {

using namespace modhifi;

struct Task {
    SyntheticSource source;
    LabeledDataset train;
    LabeledDataset test;
    ModelGraph model;
};

struct TaskSpec {
    std::size_t classes = 2;
    InputLayout layout{Layout::Image, {8, 1, 1}};
    double separation = 3.0;
    double scale = 1.0;
    std::size_t train_per_class = 200;
    std::size_t test_per_class = 200;
    TrainConfig train;
};

inline Task make_task(const TaskSpec& ts, ModelGraph untrained, std::uint64_t seed) {
    Task t;
    t.source = make_blob_source(ts.classes, ts.layout, ts.separation, ts.scale, seed);
    t.train = sample(t.source, ts.train_per_class, {}, seed * 2 + 1);
    t.test = sample(t.source, ts.test_per_class, {}, seed * 2 + 2);
    TrainConfig cfg = ts.train;
    cfg.seed = seed;
    t.model = train(untrained, t.train, cfg);
    return t;
}

/// Multi-class Gaussian blobs with a one-hidden-layer ReLU MLP.
inline Task blob_mlp(std::uint64_t seed, std::size_t classes = 2, std::size_t in = 8,
                     std::vector<std::size_t> hidden = {24}, double separation = 3.0, std::size_t test_per_class = 200) {
    TaskSpec ts;
    ts.classes = classes;
    ts.layout = {Layout::Image, {in, 1, 1}};
    ts.separation = separation;
    ts.test_per_class = test_per_class;
    return make_task(ts, make_mlp(in, hidden, classes, seed + 100), seed);
}

/// Blobs whose class means are constant over space within each channel,
/// so that globally pooled features still separate the classes.
inline SyntheticSource channel_blob_source(std::size_t classes, Shape shape, double separation, std::uint64_t seed) {
    auto flat = make_blob_source(classes, {Layout::Image, {shape.c, 1, 1}}, separation, 1.0, seed);
    SyntheticSource src{{Layout::Image, shape}, {}, seed};
    for (const auto& cs : flat.classes) {
        std::vector<double> mean;
        for (double v : cs.components[0].mean) mean.insert(mean.end(), shape.spatial(), v);
        src.classes.push_back({{{1.0, std::move(mean), 1.0}}});
    }
    return src;
}

/// [Conv, BN, ReLU] x channels.size(), global pooling, Dense head.
inline Task blob_cnn(std::uint64_t seed, std::size_t classes = 3, Shape input = {3, 6, 6},
                     std::vector<std::size_t> channels = {6, 6}, double separation = 2.0) {
    Task t;
    t.source = channel_blob_source(classes, input, separation, seed);
    t.train = sample(t.source, 100, {}, seed * 2 + 1);
    t.test = sample(t.source, 100, {}, seed * 2 + 2);
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.seed = seed;
    t.model = train(make_cnn(input, channels, classes, seed + 100), t.train, cfg);
    return t;
}

/// Pre-norm FFN blocks over token matrices.
inline Task blob_ffn(std::uint64_t seed, NormType norm = NormType::LayerNorm, std::size_t classes = 3,
                     std::size_t d = 6, std::size_t tokens = 4, std::size_t d_ff = 12, std::size_t blocks = 2) {
    TaskSpec ts;
    ts.classes = classes;
    ts.layout = {Layout::Tokens, {d, tokens, 1}};
    ts.separation = 6.0;
    ts.train_per_class = 150;
    ts.test_per_class = 100;
    ts.train.epochs = 30;
    ts.train.learning_rate = 0.02;
    return make_task(ts, make_ffn_model(d, tokens, d_ff, blocks, classes, norm, seed + 100), seed);
}

}  // namespace fixtures
