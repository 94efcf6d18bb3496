#pragma once

// Small architectures used as fixtures, demos and CLI defaults. Weights are
// He-initialized from `seed`.

#include <vector>

#include "modhifi/model/train.hpp"

namespace modhifi {

inline Dense make_dense(std::size_t in, std::size_t out) {
    return Dense{in, out, std::vector<double>(in * out, 0.0), std::vector<double>(out, 0.0)};
}

inline Conv2D make_conv(std::size_t in, std::size_t out, std::size_t kernel) {
    return Conv2D{in, out, kernel, std::vector<double>(in * out * kernel * kernel, 0.0), std::vector<double>(out, 0.0)};
}

inline BatchNorm2D make_batchnorm(std::size_t channels) {
    return BatchNorm2D{channels, std::vector<double>(channels, 1.0), std::vector<double>(channels, 0.0),
                       std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0), kBatchNormEps};
}

inline Norm make_norm(NormType type, std::size_t dim) {
    return Norm{type, dim, std::vector<double>(dim, 1.0), std::vector<double>(dim, 0.0)};
}

/// Dense -> ReLU -> ... -> Dense over a flat input of `in` features.
inline ModelGraph make_mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t classes,
                           std::uint64_t seed) {
    ModelGraph m;
    m.input = {Layout::Image, {in, 1, 1}};
    m.class_count = classes;
    std::size_t prev = in;
    for (std::size_t h : hidden) {
        m.layers.push_back(make_dense(prev, h));
        m.layers.push_back(ReLU{});
        prev = h;
    }
    m.layers.push_back(make_dense(prev, classes));
    initialize(m, seed);
    infer_shapes(m);
    return m;
}

/// [Conv(k) -> BatchNorm -> ReLU] per entry of `channels`, then global
/// average pooling and a Dense head.
inline ModelGraph make_cnn(const Shape& input, const std::vector<std::size_t>& channels, std::size_t classes,
                           std::uint64_t seed, std::size_t kernel = 3) {
    ModelGraph m;
    m.input = {Layout::Image, input};
    m.class_count = classes;
    std::size_t prev = input.c;
    for (std::size_t c : channels) {
        m.layers.push_back(make_conv(prev, c, kernel));
        m.layers.push_back(make_batchnorm(c));
        m.layers.push_back(ReLU{});
        prev = c;
    }
    m.layers.push_back(AvgPool2D{0});
    m.layers.push_back(make_dense(prev, classes));
    initialize(m, seed);
    infer_shapes(m);
    return m;
}

/// Token model: `blocks` pre-norm FFN blocks over T x d tokens, a final
/// norm, mean pooling over tokens and a Dense head.
inline ModelGraph make_ffn_model(std::size_t d, std::size_t tokens, std::size_t d_ff, std::size_t blocks,
                                 std::size_t classes, NormType norm, std::uint64_t seed) {
    ModelGraph m;
    m.input = {Layout::Tokens, {d, tokens, 1}};
    m.class_count = classes;
    for (std::size_t b = 0; b < blocks; ++b)
        m.layers.push_back(FFNBlock{make_norm(norm, d), make_dense(d, d_ff), make_dense(d_ff, d)});
    m.layers.push_back(make_norm(norm, d));
    m.layers.push_back(AvgPool2D{0});
    m.layers.push_back(make_dense(d, classes));
    initialize(m, seed);
    infer_shapes(m);
    return m;
}

} // namespace modhifi
