#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "modhifi/model/graph.hpp"
#include "modhifi/model/kernels.hpp"
#include "modhifi/numerics.hpp"

namespace modhifi {

/// Input contributions A_ci of one layer for a batch, laid out
/// [sample][output c][input i][position]. Bias is not part of any
/// contribution, so the sum over i equals the layer output minus its bias.
struct ContributionTaps {
    std::size_t layer = 0;
    std::size_t samples = 0;
    std::size_t outputs = 0;
    std::size_t inputs = 0;
    std::size_t positions = 0;
    std::vector<double> values;

    std::span<const double> operator()(std::size_t n, std::size_t c, std::size_t i) const {
        return {values.data() + ((n * outputs + c) * inputs + i) * positions, positions};
    }
    std::span<double> operator()(std::size_t n, std::size_t c, std::size_t i) {
        return {values.data() + ((n * outputs + c) * inputs + i) * positions, positions};
    }
};

/// Output of layer `index` given activations 0..index (residual adds read
/// earlier activations).
inline Tensor apply_layer(const ModelGraph& model, std::size_t index, std::span<const Tensor> acts) {
    const Tensor& x = acts[index];
    const LayerSpec& layer = model.layers[index];
    return std::visit(
        [&](const auto& l) -> Tensor {
            using T = std::remove_cvref_t<decltype(l)>;
            if constexpr (std::is_same_v<T, Dense>) return kernels::dense_forward(l, x);
            else if constexpr (std::is_same_v<T, Conv2D>) return kernels::conv_forward(l, x);
            else if constexpr (std::is_same_v<T, BatchNorm2D>) return kernels::batchnorm_forward(l, x);
            else if constexpr (std::is_same_v<T, Norm>) return kernels::norm_forward(l, x);
            else if constexpr (std::is_same_v<T, ReLU>) return kernels::relu_forward(x);
            else if constexpr (std::is_same_v<T, GELU>) return kernels::gelu_forward(x);
            else if constexpr (std::is_same_v<T, AvgPool2D>) return kernels::avgpool_forward(l, x);
            else if constexpr (std::is_same_v<T, ResidualAdd>) {
                const auto src = model.residual_source(index);
                if (!src) throw ShapeMismatch("ResidualAdd layer " + std::to_string(index) + " has no residual edge");
                return kernels::add(x, acts[*src]);
            } else return kernels::ffn_forward(l, x);
        },
        layer);
}

namespace detail {
inline void check_finite(const Tensor& t, std::size_t layer) {
    if (!t.all_finite())
        throw NonFiniteActivation("non-finite activation at the output of layer " + std::to_string(layer));
}
} // namespace detail

/// Runs layers [first, L) given activations 0..first; returns all
/// activations 0..L.
inline std::vector<Tensor> forward_from(const ModelGraph& model, std::size_t first, std::vector<Tensor> acts) {
    acts.resize(first + 1);
    acts.reserve(model.layers.size() + 1);
    for (std::size_t i = first; i < model.layers.size(); ++i) {
        acts.push_back(apply_layer(model, i, acts));
        detail::check_finite(acts.back(), i);
    }
    return acts;
}

/// All activations 0..L in inference mode.
inline std::vector<Tensor> forward_all(const ModelGraph& model, const Tensor& input) {
    if (input.shape() != model.input.shape)
        throw ShapeMismatch("batch shape " + input.shape().str() + " does not match model input " +
                            model.input.shape.str());
    if (!input.all_finite()) throw NonFiniteActivation("input batch contains non-finite values");
    return forward_from(model, 0, {input});
}

inline DenseMatrix logits_of(const Tensor& last) {
    DenseMatrix out(last.batch(), last.shape().c);
    for (std::size_t n = 0; n < last.batch(); ++n)
        for (std::size_t c = 0; c < last.shape().c; ++c) out(n, c) = last.at(n, c, 0);
    return out;
}

/// Contributions of the tappable layer `index` for the batch `x` entering it.
inline ContributionTaps compute_taps(const ModelGraph& model, std::size_t index, const Tensor& x) {
    const LayerSpec& layer = model.layers.at(index);
    ContributionTaps t;
    t.layer = index;
    t.samples = x.batch();
    t.positions = x.shape().spatial();
    const auto fill_linear = [&](const Dense& d, const Tensor& in) {
        t.outputs = d.out;
        t.inputs = d.in;
        t.values.assign(t.samples * t.outputs * t.inputs * t.positions, 0.0);
        for (std::size_t n = 0; n < t.samples; ++n)
            for (std::size_t c = 0; c < d.out; ++c)
                for (std::size_t i = 0; i < d.in; ++i) {
                    auto a = t(n, c, i);
                    auto xi = in.channel(n, i);
                    const double wv = d.w(c, i);
                    for (std::size_t p = 0; p < t.positions; ++p) a[p] = wv * xi[p];
                }
    };
    std::visit(
        [&](const auto& l) {
            using T = std::remove_cvref_t<decltype(l)>;
            if constexpr (std::is_same_v<T, Dense>) {
                fill_linear(l, x);
            } else if constexpr (std::is_same_v<T, Conv2D>) {
                t.outputs = l.out;
                t.inputs = l.in;
                t.values.assign(t.samples * t.outputs * t.inputs * t.positions, 0.0);
                for (std::size_t n = 0; n < t.samples; ++n)
                    for (std::size_t c = 0; c < l.out; ++c)
                        for (std::size_t i = 0; i < l.in; ++i)
                            kernels::correlate_add(x.channel(n, i), l.filter(c, i), x.shape().h, x.shape().w, l.kernel,
                                                   t(n, c, i));
            } else if constexpr (std::is_same_v<T, FFNBlock>) {
                fill_linear(l.down, kernels::ffn_intermediate(l, x));
            } else {
                throw ShapeMismatch("layer " + std::to_string(index) + " (" + to_string(kind_of(layer)) +
                                    ") has no input contributions to tap");
            }
        },
        layer);
    return t;
}

struct ForwardResult {
    DenseMatrix logits;
    std::vector<ContributionTaps> taps;
};

inline ForwardResult forward(const ModelGraph& model, const Tensor& batch, std::span<const std::size_t> tap_layers = {}) {
    const auto acts = forward_all(model, batch);
    ForwardResult r{logits_of(acts.back()), {}};
    for (std::size_t l : tap_layers) {
        if (l >= model.layers.size()) throw ShapeMismatch("tap layer " + std::to_string(l) + " out of range");
        r.taps.push_back(compute_taps(model, l, acts[l]));
    }
    return r;
}

/// Index of the largest logit, lowest index on ties.
inline std::size_t argmax_row(const DenseMatrix& m, std::size_t row) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < m.cols(); ++c)
        if (m(row, c) > m(row, best)) best = c;
    return best;
}

} // namespace modhifi
