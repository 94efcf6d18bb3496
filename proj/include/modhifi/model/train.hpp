#pragma once

// Cross-entropy trainer used only to manufacture well-trained fixtures.
// Nothing in the modification pipeline calls into this file.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <variant>

#include "modhifi/data.hpp"
#include "modhifi/model/forward.hpp"

namespace modhifi {

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    bool cosine_schedule = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size == 0) throw InvalidArgument("batch size must be positive");
        if (!(learning_rate > 0.0)) throw InvalidArgument("learning rate must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must be in [0, 1)");
        if (!(weight_decay >= 0.0)) throw InvalidArgument("weight decay must be non-negative");
    }
};

enum class Mode { Inference, Train };

inline constexpr double kBatchNormMomentum = 0.1;

/// He-normal weights, zero biases, identity normalization parameters.
inline void initialize(ModelGraph& model, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss;
    const auto fill = [&](std::vector<double>& w, std::size_t fan_in, double gain) {
        const double sd = std::sqrt(gain / static_cast<double>(fan_in));
        for (double& v : w) v = sd * gauss(rng);
    };
    for (auto& layer : model.layers) {
        std::visit(
            [&](auto& l) {
                using T = std::remove_cvref_t<decltype(l)>;
                if constexpr (std::is_same_v<T, Dense>) {
                    l.weight.assign(l.in * l.out, 0.0);
                    fill(l.weight, l.in, 2.0);
                    l.bias.assign(l.out, 0.0);
                } else if constexpr (std::is_same_v<T, Conv2D>) {
                    l.weight.assign(l.out * l.in * l.kernel_area(), 0.0);
                    fill(l.weight, l.in * l.kernel_area(), 2.0);
                    l.bias.assign(l.out, 0.0);
                } else if constexpr (std::is_same_v<T, BatchNorm2D>) {
                    l.gamma.assign(l.channels, 1.0);
                    l.beta.assign(l.channels, 0.0);
                    l.running_mean.assign(l.channels, 0.0);
                    l.running_var.assign(l.channels, 1.0);
                } else if constexpr (std::is_same_v<T, Norm>) {
                    l.gamma.assign(l.dim, 1.0);
                    l.beta.assign(l.dim, 0.0);
                } else if constexpr (std::is_same_v<T, FFNBlock>) {
                    l.norm.gamma.assign(l.norm.dim, 1.0);
                    l.norm.beta.assign(l.norm.dim, 0.0);
                    l.up.weight.assign(l.up.in * l.up.out, 0.0);
                    fill(l.up.weight, l.up.in, 2.0);
                    l.up.bias.assign(l.up.out, 0.0);
                    l.down.weight.assign(l.down.in * l.down.out, 0.0);
                    fill(l.down.weight, l.down.in, 1.0);
                    l.down.bias.assign(l.down.out, 0.0);
                }
            },
            layer);
    }
}

namespace detail {
using LayerCache = std::variant<std::monostate, kernels::BatchNormCache, kernels::NormCache, kernels::FFNCache>;

inline LayerSpec zero_like(const LayerSpec& layer) {
    LayerSpec g = layer;
    for_each_param(g, [](std::vector<double>& p) { std::fill(p.begin(), p.end(), 0.0); });
    return g;
}

inline void accumulate_into(Tensor& dst, const Tensor& src) {
    if (dst.size() == 0) {
        dst = src;
        return;
    }
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}
} // namespace detail

struct LossAndGradients {
    double loss = 0.0;
    std::vector<LayerSpec> gradients;                   // same structure as model.layers
    std::vector<kernels::BatchNormCache> batch_stats;   // per BatchNorm layer, Train mode only
};

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to every trainable parameter. In Train mode BatchNorm uses batch statistics.
inline LossAndGradients loss_and_gradients(const ModelGraph& model, const Tensor& x, std::span<const int> labels,
                                           Mode mode) {
    const std::size_t L = model.layers.size();
    std::vector<Tensor> acts{x};
    std::vector<detail::LayerCache> caches(L);
    for (std::size_t i = 0; i < L; ++i) {
        const LayerSpec& layer = model.layers[i];
        Tensor out;
        if (const auto* bn = std::get_if<BatchNorm2D>(&layer); bn && mode == Mode::Train) {
            kernels::BatchNormCache c;
            out = kernels::batchnorm_forward_train(*bn, acts[i], c);
            caches[i] = std::move(c);
        } else if (const auto* nl = std::get_if<Norm>(&layer)) {
            kernels::NormCache c;
            out = kernels::norm_forward(*nl, acts[i], &c);
            caches[i] = std::move(c);
        } else if (const auto* ffn = std::get_if<FFNBlock>(&layer)) {
            kernels::FFNCache c;
            out = kernels::ffn_forward(*ffn, acts[i], &c);
            caches[i] = std::move(c);
        } else {
            out = apply_layer(model, i, acts);
        }
        acts.push_back(std::move(out));
    }

    const Tensor& logits = acts.back();
    const std::size_t N = x.batch();
    const std::size_t K = logits.shape().c;
    LossAndGradients result;
    Tensor dlogits(N, logits.shape());
    for (std::size_t n = 0; n < N; ++n) {
        double mx = logits.at(n, 0, 0);
        for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits.at(n, k, 0));
        double z = 0.0;
        for (std::size_t k = 0; k < K; ++k) z += std::exp(logits.at(n, k, 0) - mx);
        const auto y = static_cast<std::size_t>(labels[n]);
        result.loss += (std::log(z) + mx - logits.at(n, y, 0)) / static_cast<double>(N);
        for (std::size_t k = 0; k < K; ++k) {
            const double p = std::exp(logits.at(n, k, 0) - mx) / z;
            dlogits.at(n, k, 0) = (p - (k == y ? 1.0 : 0.0)) / static_cast<double>(N);
        }
    }

    for (const auto& layer : model.layers) result.gradients.push_back(detail::zero_like(layer));
    std::vector<Tensor> dacts(L + 1);
    dacts[L] = std::move(dlogits);
    for (std::size_t i = L; i-- > 0;) {
        const Tensor& dy = dacts[i + 1];
        if (dy.size() == 0) continue;
        const Tensor& in = acts[i];
        LayerSpec& grad = result.gradients[i];
        Tensor dx = std::visit(
            [&](const auto& l) -> Tensor {
                using T = std::remove_cvref_t<decltype(l)>;
                if constexpr (std::is_same_v<T, Dense>) return kernels::dense_backward(l, in, dy, std::get<Dense>(grad));
                else if constexpr (std::is_same_v<T, Conv2D>)
                    return kernels::conv_backward(l, in, dy, std::get<Conv2D>(grad));
                else if constexpr (std::is_same_v<T, BatchNorm2D>) {
                    if (mode == Mode::Train)
                        return kernels::batchnorm_backward_train(l, std::get<kernels::BatchNormCache>(caches[i]), dy,
                                                                 std::get<BatchNorm2D>(grad));
                    return kernels::batchnorm_backward_infer(l, in, dy, std::get<BatchNorm2D>(grad));
                } else if constexpr (std::is_same_v<T, Norm>)
                    return kernels::norm_backward(l, std::get<kernels::NormCache>(caches[i]), dy, std::get<Norm>(grad));
                else if constexpr (std::is_same_v<T, ReLU>) return kernels::relu_backward(in, dy);
                else if constexpr (std::is_same_v<T, GELU>) return kernels::gelu_backward(in, dy);
                else if constexpr (std::is_same_v<T, AvgPool2D>) return kernels::avgpool_backward(l, in.shape(), dy);
                else if constexpr (std::is_same_v<T, ResidualAdd>) {
                    detail::accumulate_into(dacts[*model.residual_source(i)], dy);
                    return dy;
                } else
                    return kernels::ffn_backward(l, std::get<kernels::FFNCache>(caches[i]), dy, std::get<FFNBlock>(grad));
            },
            model.layers[i]);
        detail::accumulate_into(dacts[i], dx);
    }

    if (mode == Mode::Train)
        for (auto& c : caches)
            if (auto* bc = std::get_if<kernels::BatchNormCache>(&c)) result.batch_stats.push_back(std::move(*bc));
    return result;
}

struct TrainResult {
    ModelGraph model;
    std::vector<double> epoch_loss;
};

/// Momentum SGD (PyTorch convention: g += wd * p; v = m * v + g; p -= lr * v)
/// over shuffled mini-batches; deterministic given config.seed.
inline TrainResult train_with_history(const ModelGraph& model, const LabeledDataset& data, const TrainConfig& config) {
    config.validate();
    data.validate();
    if (data.class_count != model.class_count)
        throw ShapeMismatch("dataset has " + std::to_string(data.class_count) + " classes, model head has " +
                            std::to_string(model.class_count));
    infer_shapes(model);
    if (data.layout.shape != model.input.shape) throw ShapeMismatch("dataset layout does not match model input");

    TrainResult result{model, {}};
    ModelGraph& m = result.model;
    std::vector<LayerSpec> velocity;
    for (const auto& l : m.layers) velocity.push_back(detail::zero_like(l));

    std::mt19937_64 rng(config.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t per_epoch = (data.size() + config.batch_size - 1) / config.batch_size;
    const double total_steps = static_cast<double>(per_epoch * config.epochs);
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, order.size() - start);
            Tensor xb(count, data.layout.shape);
            std::vector<int> yb(count);
            for (std::size_t j = 0; j < count; ++j) {
                auto src = data.x.sample(order[start + j]);
                std::copy(src.begin(), src.end(), xb.sample(j).begin());
                yb[j] = data.y[order[start + j]];
            }
            auto lg = loss_and_gradients(m, xb, yb, Mode::Train);
            if (!std::isfinite(lg.loss))
                throw Divergence("loss became non-finite at epoch " + std::to_string(epoch));
            epoch_loss += lg.loss * static_cast<double>(count);

            const double lr = config.cosine_schedule
                                  ? 0.5 * config.learning_rate *
                                        (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps))
                                  : config.learning_rate;
            ++step;
            for (std::size_t i = 0; i < m.layers.size(); ++i) {
                std::vector<std::vector<double>*> p, g, v;
                for_each_param(m.layers[i], [&](std::vector<double>& a) { p.push_back(&a); });
                for_each_param(lg.gradients[i], [&](std::vector<double>& a) { g.push_back(&a); });
                for_each_param(velocity[i], [&](std::vector<double>& a) { v.push_back(&a); });
                for (std::size_t a = 0; a < p.size(); ++a)
                    for (std::size_t e = 0; e < p[a]->size(); ++e) {
                        const double grad = (*g[a])[e] + config.weight_decay * (*p[a])[e];
                        (*v[a])[e] = config.momentum * (*v[a])[e] + grad;
                        (*p[a])[e] -= lr * (*v[a])[e];
                    }
            }
            std::size_t b = 0;
            for (auto& layer : m.layers)
                if (auto* bn = std::get_if<BatchNorm2D>(&layer)) {
                    const auto& st = lg.batch_stats[b++];
                    const double cnt = static_cast<double>(count * xb.shape().spatial());
                    const double unbias = cnt > 1.0 ? cnt / (cnt - 1.0) : 1.0;
                    for (std::size_t c = 0; c < bn->channels; ++c) {
                        bn->running_mean[c] =
                            (1.0 - kBatchNormMomentum) * bn->running_mean[c] + kBatchNormMomentum * st.mean[c];
                        bn->running_var[c] =
                            (1.0 - kBatchNormMomentum) * bn->running_var[c] + kBatchNormMomentum * st.var[c] * unbias;
                    }
                }
        }
        epoch_loss /= static_cast<double>(data.size());
        if (!std::isfinite(epoch_loss)) throw Divergence("epoch loss is non-finite");
        result.epoch_loss.push_back(epoch_loss);
    }
    return result;
}

inline ModelGraph train(const ModelGraph& model, const LabeledDataset& data, const TrainConfig& config) {
    return train_with_history(model, data, config).model;
}

/// Argmax predictions, lowest class index on ties.
inline std::vector<int> predict(const ModelGraph& model, const Tensor& x, std::size_t batch = 256) {
    std::vector<int> out;
    out.reserve(x.batch());
    for (std::size_t start = 0; start < x.batch(); start += batch) {
        const std::size_t count = std::min(batch, x.batch() - start);
        const auto r = forward(model, x.slice(start, count));
        for (std::size_t n = 0; n < count; ++n) out.push_back(static_cast<int>(argmax_row(r.logits, n)));
    }
    return out;
}

inline double accuracy(const ModelGraph& model, const LabeledDataset& data) {
    if (data.size() == 0) return 0.0;
    const auto pred = predict(model, data.x);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.y[i];
    return static_cast<double>(hit) / static_cast<double>(data.size());
}

/// Accuracy per class; classes absent from the data report 0.
inline std::vector<double> per_class_accuracy(const ModelGraph& model, const LabeledDataset& data) {
    std::vector<double> hit(data.class_count, 0.0), total(data.class_count, 0.0);
    const auto pred = predict(model, data.x);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        total[static_cast<std::size_t>(data.y[i])] += 1.0;
        hit[static_cast<std::size_t>(data.y[i])] += pred[i] == data.y[i];
    }
    for (std::size_t k = 0; k < hit.size(); ++k) hit[k] = total[k] > 0.0 ? hit[k] / total[k] : 0.0;
    return hit;
}

} // namespace modhifi
