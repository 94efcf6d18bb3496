#pragma once

// Layer specifications and the ordered layer graph.
//
// Activations are indexed from 0: activation 0 is the model input and
// activation i + 1 is the output of layer i. A residual edge (s, t) makes the
// ResidualAdd layer t add the output of layer s (s = -1 is the model input).

#include <optional>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "modhifi/error.hpp"
#include "modhifi/tensor.hpp"

namespace modhifi {

enum class LayerKind { Dense, Conv2D, BatchNorm2D, LayerNorm, RMSNorm, ReLU, GELU, AvgPool2D, ResidualAdd, FFNBlock };

inline const char* to_string(LayerKind k) {
    switch (k) {
    case LayerKind::Dense: return "Dense";
    case LayerKind::Conv2D: return "Conv2D";
    case LayerKind::BatchNorm2D: return "BatchNorm2D";
    case LayerKind::LayerNorm: return "LayerNorm";
    case LayerKind::RMSNorm: return "RMSNorm";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::GELU: return "GELU";
    case LayerKind::AvgPool2D: return "AvgPool2D";
    case LayerKind::ResidualAdd: return "ResidualAdd";
    case LayerKind::FFNBlock: return "FFNBlock";
    }
    return "?";
}

/// Per-position affine map over channels; weight is out x in.
struct Dense {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<double> weight;
    std::vector<double> bias;

    double& w(std::size_t o, std::size_t i) { return weight[o * in + i]; }
    double w(std::size_t o, std::size_t i) const { return weight[o * in + i]; }
};

/// Stride 1, zero padding k/2 (odd k keeps the spatial size). Weight is
/// out x in x k x k.
struct Conv2D {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t kernel = 1;
    std::vector<double> weight;
    std::vector<double> bias;

    std::size_t kernel_area() const noexcept { return kernel * kernel; }
    std::span<double> filter(std::size_t o, std::size_t i) {
        return {weight.data() + (o * in + i) * kernel_area(), kernel_area()};
    }
    std::span<const double> filter(std::size_t o, std::size_t i) const {
        return {weight.data() + (o * in + i) * kernel_area(), kernel_area()};
    }
};

inline constexpr double kBatchNormEps = 1e-5;

struct BatchNorm2D {
    std::size_t channels = 0;
    std::vector<double> gamma;
    std::vector<double> beta;
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double eps = kBatchNormEps;
};

enum class NormType { LayerNorm, RMSNorm };

/// gamma * Mx / ||Mx|| + beta over the channel axis at every position, with
/// M the centering matrix (LayerNorm) or the identity (RMSNorm).
struct Norm {
    NormType type = NormType::LayerNorm;
    std::size_t dim = 0;
    std::vector<double> gamma;
    std::vector<double> beta;
};

struct ReLU {};
struct GELU {};

/// Non-overlapping average pooling with a square window; kernel 0 pools
/// the whole spatial extent.
struct AvgPool2D {
    std::size_t kernel = 0;
};

struct ResidualAdd {};

/// Pre-norm feed-forward block: y = x + down(gelu(up(norm(x)))).
/// `up` is d_ff x d and `down` is d x d_ff.
struct FFNBlock {
    Norm norm;
    Dense up;
    Dense down;
};

using LayerSpec = std::variant<Dense, Conv2D, BatchNorm2D, Norm, ReLU, GELU, AvgPool2D, ResidualAdd, FFNBlock>;

inline LayerKind kind_of(const LayerSpec& layer) {
    struct {
        LayerKind operator()(const Dense&) const { return LayerKind::Dense; }
        LayerKind operator()(const Conv2D&) const { return LayerKind::Conv2D; }
        LayerKind operator()(const BatchNorm2D&) const { return LayerKind::BatchNorm2D; }
        LayerKind operator()(const Norm& n) const {
            return n.type == NormType::LayerNorm ? LayerKind::LayerNorm : LayerKind::RMSNorm;
        }
        LayerKind operator()(const ReLU&) const { return LayerKind::ReLU; }
        LayerKind operator()(const GELU&) const { return LayerKind::GELU; }
        LayerKind operator()(const AvgPool2D&) const { return LayerKind::AvgPool2D; }
        LayerKind operator()(const ResidualAdd&) const { return LayerKind::ResidualAdd; }
        LayerKind operator()(const FFNBlock&) const { return LayerKind::FFNBlock; }
    } v;
    return std::visit(v, layer);
}

/// Layers whose input contributions can be tapped.
inline bool is_tappable(const LayerSpec& layer) {
    const auto k = kind_of(layer);
    return k == LayerKind::Dense || k == LayerKind::Conv2D || k == LayerKind::FFNBlock;
}

struct ResidualEdge {
    int source = -1;
    std::size_t target = 0;
    bool operator==(const ResidualEdge&) const = default;
};

struct ModelGraph {
    InputLayout input;
    std::vector<LayerSpec> layers;
    std::vector<ResidualEdge> residual_edges;
    std::size_t class_count = 0;

    /// Activation index added by the ResidualAdd at `target`, if any.
    std::optional<std::size_t> residual_source(std::size_t target) const {
        for (const auto& e : residual_edges)
            if (e.target == target) return static_cast<std::size_t>(e.source + 1);
        return std::nullopt;
    }

    /// True if activation `act` (0 = input) is read by a residual edge.
    bool is_residual_source(std::size_t act) const {
        for (const auto& e : residual_edges)
            if (static_cast<std::size_t>(e.source + 1) == act) return true;
        return false;
    }
};

/// Calls f(std::vector<double>&) on every trainable parameter array of a
/// layer, in a fixed order. BatchNorm running statistics are buffers, not
/// parameters, and are skipped.
template <class Layer, class F>
void for_each_param(Layer& layer, F&& f) {
    std::visit(
        [&](auto& l) {
            using T = std::remove_cvref_t<decltype(l)>;
            if constexpr (std::is_same_v<T, Dense> || std::is_same_v<T, Conv2D>) {
                f(l.weight);
                f(l.bias);
            } else if constexpr (std::is_same_v<T, BatchNorm2D> || std::is_same_v<T, Norm>) {
                f(l.gamma);
                f(l.beta);
            } else if constexpr (std::is_same_v<T, FFNBlock>) {
                f(l.norm.gamma);
                f(l.norm.beta);
                f(l.up.weight);
                f(l.up.bias);
                f(l.down.weight);
                f(l.down.bias);
            }
        },
        layer);
}

namespace detail {
inline void expect_size(const std::vector<double>& v, std::size_t n, const std::string& what) {
    if (v.size() != n)
        throw ShapeMismatch(what + " has " + std::to_string(v.size()) + " values, expected " + std::to_string(n));
}

inline void check_dense(const Dense& d, const std::string& where) {
    expect_size(d.weight, d.in * d.out, where + ".weight");
    expect_size(d.bias, d.out, where + ".bias");
}

inline void check_norm(const Norm& n, const std::string& where) {
    expect_size(n.gamma, n.dim, where + ".gamma");
    expect_size(n.beta, n.dim, where + ".beta");
}
} // namespace detail

/// Output shape of one layer given its input shape; checks parameter sizes.
inline Shape output_shape(const LayerSpec& layer, const Shape& in, std::size_t index) {
    const std::string where = "layer " + std::to_string(index) + " (" + to_string(kind_of(layer)) + ")";
    return std::visit(
        [&](const auto& l) -> Shape {
            using T = std::remove_cvref_t<decltype(l)>;
            if constexpr (std::is_same_v<T, Dense>) {
                detail::check_dense(l, where);
                if (in.c != l.in) throw ShapeMismatch(where + ": input has " + std::to_string(in.c) + " channels");
                return {l.out, in.h, in.w};
            } else if constexpr (std::is_same_v<T, Conv2D>) {
                detail::expect_size(l.weight, l.out * l.in * l.kernel * l.kernel, where + ".weight");
                detail::expect_size(l.bias, l.out, where + ".bias");
                if (l.kernel % 2 == 0) throw ShapeMismatch(where + ": kernel size must be odd");
                if (in.c != l.in) throw ShapeMismatch(where + ": input has " + std::to_string(in.c) + " channels");
                return {l.out, in.h, in.w};
            } else if constexpr (std::is_same_v<T, BatchNorm2D>) {
                detail::expect_size(l.gamma, l.channels, where + ".gamma");
                detail::expect_size(l.beta, l.channels, where + ".beta");
                detail::expect_size(l.running_mean, l.channels, where + ".running_mean");
                detail::expect_size(l.running_var, l.channels, where + ".running_var");
                for (double v : l.running_var)
                    if (!(v > 0.0)) throw ShapeMismatch(where + ": running variance must be positive");
                if (in.c != l.channels) throw ShapeMismatch(where + ": channel count mismatch");
                return in;
            } else if constexpr (std::is_same_v<T, Norm>) {
                detail::check_norm(l, where);
                if (in.c != l.dim) throw ShapeMismatch(where + ": feature dim mismatch");
                return in;
            } else if constexpr (std::is_same_v<T, AvgPool2D>) {
                if (l.kernel == 0) return {in.c, 1, 1};
                if (in.h % l.kernel != 0 || in.w % l.kernel != 0)
                    throw ShapeMismatch(where + ": pooling window does not tile the input");
                return {in.c, in.h / l.kernel, in.w / l.kernel};
            } else if constexpr (std::is_same_v<T, FFNBlock>) {
                detail::check_norm(l.norm, where + ".norm");
                detail::check_dense(l.up, where + ".up");
                detail::check_dense(l.down, where + ".down");
                if (in.c != l.norm.dim || l.up.in != l.norm.dim || l.down.in != l.up.out || l.down.out != l.norm.dim)
                    throw ShapeMismatch(where + ": block dimensions do not chain");
                return in;
            } else {
                return in;
            }
        },
        layer);
}

/// Shapes of activations 0..L; validates the whole graph.
inline std::vector<Shape> infer_shapes(const ModelGraph& model) {
    std::vector<Shape> shapes{model.input.shape};
    if (model.input.shape.size() == 0) throw ShapeMismatch("model input shape is empty");
    for (const auto& e : model.residual_edges) {
        if (e.target >= model.layers.size() || kind_of(model.layers[e.target]) != LayerKind::ResidualAdd)
            throw ShapeMismatch("residual edge target " + std::to_string(e.target) + " is not a ResidualAdd layer");
        if (e.source < -1 || e.source >= static_cast<int>(e.target))
            throw ShapeMismatch("residual edge source must precede its target");
    }
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& layer = model.layers[i];
        if (kind_of(layer) == LayerKind::ResidualAdd) {
            std::size_t count = 0;
            for (const auto& e : model.residual_edges) count += (e.target == i);
            if (count != 1)
                throw ShapeMismatch("ResidualAdd layer " + std::to_string(i) + " needs exactly one residual edge");
            const auto src = *model.residual_source(i);
            if (shapes[src] != shapes[i])
                throw ShapeMismatch("residual edge into layer " + std::to_string(i) + " joins " + shapes[src].str() +
                                    " with " + shapes[i].str());
        }
        shapes.push_back(output_shape(layer, shapes[i], i));
    }
    const Shape& last = shapes.back();
    if (last.c != model.class_count || last.spatial() != 1)
        throw ShapeMismatch("final activation " + last.str() + " does not match class count " +
                            std::to_string(model.class_count));
    return shapes;
}

/// Number of trainable parameters.
inline std::size_t parameter_count(const LayerSpec& layer) {
    std::size_t n = 0;
    for_each_param(layer, [&](const std::vector<double>& p) { n += p.size(); });
    return n;
}

} // namespace modhifi
