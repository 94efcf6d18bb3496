#pragma once

// Lipschitz constants, the local-to-global error bound, pre-norm radii and
// the noising / counterfactual studies over HiFi components.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modhifi/fidelity.hpp"
#include "modhifi/model/forward.hpp"
#include "modhifi/model/train.hpp"
#include "modhifi/modify.hpp"
#include "modhifi/numerics.hpp"
#include "modhifi/selection.hpp"

namespace modhifi {

/// Upper bound on |GELU'|; the supremum is Phi(sqrt2) + sqrt2 phi(sqrt2) = 1.12890...
inline constexpr double kGeluLipschitz = 1.13;
inline constexpr double kZeroRadius = 1e-12;

/// Pre-norm radius per layer index (Norm layers and FFN blocks).
using RadiusMap = std::map<std::size_t, double>;

struct LayerLipschitz {
    double value = 0.0;
    std::string provenance;
};

/// Explicit (c_out * H * W) x (c_in * H * W) matrix of a same-padded
/// convolution.
inline DenseMatrix unrolled_conv(const Conv2D& c, std::size_t h, std::size_t w) {
    const std::size_t sp = h * w;
    DenseMatrix m(c.out * sp, c.in * sp);
    std::vector<double> basis(sp, 0.0), out(sp);
    for (std::size_t i = 0; i < c.in; ++i)
        for (std::size_t q = 0; q < sp; ++q) {
            basis[q] = 1.0;
            for (std::size_t o = 0; o < c.out; ++o) {
                std::fill(out.begin(), out.end(), 0.0);
                kernels::correlate_add(basis, c.filter(o, i), h, w, c.kernel, out);
                for (std::size_t p = 0; p < sp; ++p) m(o * sp + p, i * sp + q) = out[p];
            }
            basis[q] = 0.0;
        }
    return m;
}

inline DenseMatrix dense_matrix(const Dense& d) {
    DenseMatrix m(d.out, d.in);
    for (std::size_t o = 0; o < d.out; ++o)
        for (std::size_t i = 0; i < d.in; ++i) m(o, i) = d.w(o, i);
    return m;
}

namespace detail {
inline double norm_constant(const Norm& n, std::optional<double> r, const std::string& where) {
    if (!r) throw MissingRadius(where + " needs a pre-norm radius");
    if (!(*r > 0.0)) throw ZeroRadius(where + " has non-positive radius");
    double g = 0.0;
    for (double v : n.gamma) g = std::max(g, std::abs(v));
    return g / *r;
}
} // namespace detail

/// Lipschitz constant of one layer acting on inputs of shape `in`.
/// ResidualAdd reports the constant of its identity branch (1); the sum
/// is handled by worst_case_Cl.
inline LayerLipschitz layer_lipschitz(const LayerSpec& layer, const Shape& in, std::optional<double> r = std::nullopt) {
    const std::string where = to_string(kind_of(layer));
    return std::visit(
        [&](const auto& l) -> LayerLipschitz {
            using T = std::remove_cvref_t<decltype(l)>;
            if constexpr (std::is_same_v<T, Dense>) {
                return {spectral_norm(dense_matrix(l)), "spectral norm"};
            } else if constexpr (std::is_same_v<T, Conv2D>) {
                return {spectral_norm(unrolled_conv(l, in.h, in.w)), "spectral norm of unrolled convolution"};
            } else if constexpr (std::is_same_v<T, BatchNorm2D>) {
                double m = 0.0;
                for (std::size_t c = 0; c < l.channels; ++c)
                    m = std::max(m, std::abs(l.gamma[c]) / std::sqrt(l.running_var[c] + l.eps));
                return {m, "max |gamma| / sigma"};
            } else if constexpr (std::is_same_v<T, Norm>) {
                return {detail::norm_constant(l, r, where), "max |gamma| / r"};
            } else if constexpr (std::is_same_v<T, ReLU>) {
                return {1.0, "activation"};
            } else if constexpr (std::is_same_v<T, GELU>) {
                return {kGeluLipschitz, "activation"};
            } else if constexpr (std::is_same_v<T, AvgPool2D>) {
                const double area = l.kernel == 0 ? static_cast<double>(in.spatial()) : static_cast<double>(l.kernel * l.kernel);
                return {1.0 / std::sqrt(area), "1 / sqrt(window)"};
            } else if constexpr (std::is_same_v<T, ResidualAdd>) {
                return {1.0, "identity branch"};
            } else {
                const double branch = detail::norm_constant(l.norm, r, where) * spectral_norm(dense_matrix(l.up)) *
                                      kGeluLipschitz * spectral_norm(dense_matrix(l.down));
                return {1.0 + branch, "1 + (max |gamma| / r) ||W_U|| eta ||W_D||"};
            }
        },
        layer);
}

/// Worst-case amplification of a perturbation at the output of layer `l`
/// up to the model output. For chains this is the product of the later
/// layers' constants; at a ResidualAdd the constants of both incoming paths
/// add. l = L-1 gives 1.
inline double worst_case_Cl(const ModelGraph& model, std::size_t l, const RadiusMap& radii) {
    if (l >= model.layers.size()) throw InvalidArgument("layer index out of range");
    const auto shapes = infer_shapes(model);
    std::vector<double> k(model.layers.size() + 1, 0.0);
    k[l + 1] = 1.0;
    for (std::size_t i = l + 1; i < model.layers.size(); ++i) {
        const auto& layer = model.layers[i];
        if (kind_of(layer) == LayerKind::ResidualAdd) {
            const std::size_t src = *model.residual_source(i);
            k[i + 1] = k[i] + k[src];
            continue;
        }
        std::optional<double> r;
        if (auto it = radii.find(i); it != radii.end()) r = it->second;
        k[i + 1] = layer_lipschitz(layer, shapes[i], r).value * k[i];
    }
    return k.back();
}

// ---------------------------------------------------------------- radii

struct RadiusSummary {
    double min = 0.0;
    double median = 0.0;
    double max = 0.0;
    std::size_t count = 0;
};

namespace detail {
inline const Norm* norm_of(const LayerSpec& layer) {
    if (const auto* n = std::get_if<Norm>(&layer)) return n;
    if (const auto* f = std::get_if<FFNBlock>(&layer)) return &f->norm;
    return nullptr;
}

inline RadiusSummary summarize(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    RadiusSummary s{v.front(), 0.0, v.back(), v.size()};
    const std::size_t m = v.size() / 2;
    s.median = v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
    return s;
}
} // namespace detail

/// For every layer with a normalization (Norm, FFN block), the distribution
/// of ||M phi|| over samples and positions of its input.
inline std::map<std::size_t, RadiusSummary> min_prenorm_radius(const ModelGraph& model, const Tensor& x) {
    if (x.batch() == 0) throw InvalidArgument("radius estimation needs data");
    const auto acts = forward_all(model, x);
    std::map<std::size_t, RadiusSummary> out;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const Norm* nl = detail::norm_of(model.layers[l]);
        if (!nl) continue;
        const Tensor& in = acts[l];
        const std::size_t sp = in.shape().spatial();
        std::vector<double> norms, z(in.shape().c);
        for (std::size_t n = 0; n < in.batch(); ++n)
            for (std::size_t p = 0; p < sp; ++p) {
                for (std::size_t c = 0; c < z.size(); ++c) z[c] = in.at(n, c, p);
                kernels::apply_norm_projection(nl->type, z);
                const double r = norm2(z);
                if (r < kZeroRadius)
                    throw ZeroRadius("layer " + std::to_string(l) + ": sample " + std::to_string(n) + " position " +
                                     std::to_string(p) + " has ||M phi|| = " + std::to_string(r));
                norms.push_back(r);
            }
        out[l] = detail::summarize(std::move(norms));
    }
    return out;
}

inline RadiusMap radius_minima(const std::map<std::size_t, RadiusSummary>& s) {
    RadiusMap r;
    for (const auto& [l, v] : s) r[l] = v.min;
    return r;
}

// ---------------------------------------------------------------- report

struct LipschitzReport {
    std::vector<LayerLipschitz> layers;
    std::vector<double> worst_case;   // C_l for every layer l
    std::map<std::size_t, RadiusSummary> radii;
};

inline LipschitzReport lipschitz_report(const ModelGraph& model, const Tensor& x) {
    LipschitzReport rep;
    rep.radii = min_prenorm_radius(model, x);
    const RadiusMap r = radius_minima(rep.radii);
    const auto shapes = infer_shapes(model);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        std::optional<double> rl;
        if (auto it = r.find(l); it != r.end()) rl = it->second;
        rep.layers.push_back(layer_lipschitz(model.layers[l], shapes[l], rl));
        rep.worst_case.push_back(worst_case_Cl(model, l, r));
    }
    return rep;
}

inline nlohmann::json to_json(const LipschitzReport& rep, const ModelGraph& model) {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < rep.layers.size(); ++l)
        layers.push_back({{"layer", l},
                          {"kind", to_string(kind_of(model.layers[l]))},
                          {"constant", rep.layers[l].value},
                          {"provenance", rep.layers[l].provenance},
                          {"worst_case_C", rep.worst_case[l]}});
    nlohmann::json radii = nlohmann::json::array();
    for (const auto& [l, s] : rep.radii)
        radii.push_back({{"layer", l}, {"min", s.min}, {"median", s.median}, {"max", s.max}, {"count", s.count}});
    return {{"layers", std::move(layers)}, {"radii", std::move(radii)}};
}

// ---------------------------------------------------------------- bound check

struct BoundCheckResult {
    std::size_t layer = 0;
    std::string mask;            // short description
    double global_error = 0.0;   // E ||N(X) - N_masked(X)||^2
    double local_form = 0.0;     // sum_c (1 - m_c)^T Q_c (1 - m_c)
    double ratio = 0.0;          // global / local (0 when local is 0)
    double worst_case_C = 0.0;
    bool satisfied = false;
};

inline constexpr double kBoundSlack = 1e-9;

inline std::string describe(const ModificationMask& m) {
    std::size_t removed = 0;
    for (auto v : m.keep) removed += v == 0;
    return std::string(to_string(m.mode)) + " " + std::to_string(removed) + "/" + std::to_string(m.keep.size());
}

/// Checks E||N - N_masked||^2 <= C_l^2 sum_c u_c^T Q_c u_c for each mask, with
/// Plain CSMs and the global error estimated on the same samples. Radii are
/// the minima over both the clean and the masked forward passes.
inline std::vector<BoundCheckResult> bound_check(const ModelGraph& model, std::size_t l,
                                                 std::span<const ModificationMask> masks, const Tensor& x) {
    if (l >= model.layers.size() || !is_tappable(model.layers[l]))
        throw InvalidArgument("bound check layer " + std::to_string(l) + " has no input components");
    const auto csms = estimate_csms(model, l, x, CSMVariant::Plain);
    const DenseMatrix clean = forward(model, x).logits;
    const RadiusMap clean_r = radius_minima(min_prenorm_radius(model, x));
    std::vector<BoundCheckResult> out;
    for (const auto& mask : masks) {
        if (mask.layer != l) throw InvalidArgument("mask targets layer " + std::to_string(mask.layer) + ", expected " + std::to_string(l));
        const ModelGraph masked = apply_mask(model, mask);
        const DenseMatrix noisy = forward(masked, x).logits;
        BoundCheckResult r;
        r.layer = l;
        r.mask = describe(mask);
        for (std::size_t n = 0; n < clean.rows(); ++n)
            for (std::size_t c = 0; c < clean.cols(); ++c) r.global_error += std::pow(clean(n, c) - noisy(n, c), 2);
        r.global_error /= static_cast<double>(clean.rows());

        const double weight = mask.mode == MaskMode::UnlearnNegate ? 2.0 : 1.0;
        for (const auto& csm : csms) {
            Vector u(mask.inputs);
            for (std::size_t i = 0; i < mask.inputs; ++i) u[i] = mask.at(csm.channel, i) ? 0.0 : weight;
            r.local_form += std::max(quadratic_form(csm.q, u), 0.0);
        }
        RadiusMap radii = clean_r;
        for (const auto& [layer, rv] : radius_minima(min_prenorm_radius(masked, x)))
            radii[layer] = std::min(radii[layer], rv);
        r.worst_case_C = worst_case_Cl(model, l, radii);
        r.ratio = r.local_form > 0.0 ? r.global_error / r.local_form : 0.0;
        r.satisfied = r.global_error <= r.worst_case_C * r.worst_case_C * r.local_form * (1.0 + kBoundSlack);
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------- studies

/// A weight group W_ci of one layer.
struct Component {
    std::size_t channel = 0;
    std::size_t input = 0;
    auto operator<=>(const Component&) const = default;
};

/// Top-k HiFi set of every output channel of `layer`, scored on `x`.
inline std::vector<HiFiSet> layer_hifi_sets(const ModelGraph& model, std::size_t layer, const Tensor& x, std::size_t k) {
    std::vector<HiFiSet> sets;
    for (const auto& csm : estimate_csms(model, layer, x)) {
        if (csm.dead()) continue;
        auto h = naive_topk(singleton_scores(csm), k);
        h.layer = layer;
        h.channel = csm.channel;
        sets.push_back(std::move(h));
    }
    return sets;
}

/// Splits all (c, i) pairs of a layer into HiFi and non-HiFi pools, each
/// in (channel, input) order.
inline std::pair<std::vector<Component>, std::vector<Component>> split_components(const LayerSpec& layer,
                                                                                  std::span<const HiFiSet> hifi) {
    const auto dims = component_dims(layer);
    std::set<Component> in_hifi;
    for (const auto& h : hifi)
        for (auto i : h.indices) in_hifi.insert({h.channel, i});
    std::vector<Component> yes, no;
    for (std::size_t c = 0; c < dims.outputs; ++c)
        for (std::size_t i = 0; i < dims.inputs; ++i) (in_hifi.contains({c, i}) ? yes : no).push_back({c, i});
    return {yes, no};
}

enum class ComponentPool { HiFi, NonHiFi, Random };

inline const char* to_string(ComponentPool p) {
    switch (p) {
    case ComponentPool::HiFi: return "hifi";
    case ComponentPool::NonHiFi: return "non_hifi";
    case ComponentPool::Random: return "random";
    }
    return "?";
}

namespace detail {
inline std::vector<Component> draw(std::vector<Component> pool, std::size_t count, std::mt19937_64& rng) {
    if (count > pool.size())
        throw InvalidArgument("requested " + std::to_string(count) + " components from a pool of " +
                              std::to_string(pool.size()));
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(count);
    return pool;
}

inline std::vector<Component> pick_pool(const LayerSpec& layer, std::span<const HiFiSet> hifi, ComponentPool kind) {
    auto [yes, no] = split_components(layer, hifi);
    if (kind == ComponentPool::HiFi) return yes;
    if (kind == ComponentPool::NonHiFi) return no;
    yes.insert(yes.end(), no.begin(), no.end());
    return yes;
}
} // namespace detail

/// Adds N(0, sigma^2) noise to every weight of round(fraction * m) randomly
/// chosen components of the target pool, where m is the size of the smaller
/// of the HiFi and non-HiFi pools (so both targets perturb equally many
/// components). Returns accuracy(after) - accuracy(before).
inline double noise_experiment(const ModelGraph& model, std::size_t layer, std::span<const HiFiSet> hifi, double sigma,
                               double fraction, ComponentPool target, std::uint64_t seed, const LabeledDataset& data) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw InvalidArgument("fraction must lie in [0, 1]");
    if (!(sigma >= 0.0)) throw InvalidArgument("sigma must be non-negative");
    const auto [yes, no] = split_components(model.layers.at(layer), hifi);
    const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(std::min(yes.size(), no.size()))));
    if (sigma == 0.0 || count == 0) return 0.0;
    std::mt19937_64 rng(seed);
    const auto chosen = detail::draw(detail::pick_pool(model.layers[layer], hifi, target), count, rng);
    ModelGraph noisy = model;
    std::normal_distribution<double> gauss(0.0, sigma);
    for (const auto& c : chosen)
        for (double& w : component_weights(noisy.layers[layer], c.channel, c.input)) w += gauss(rng);
    return accuracy(noisy, data) - accuracy(model, data);
}

/// Zeroes `size` components drawn from the chosen pool and returns
/// accuracy(after) - accuracy(before).
inline double counterfactual_removal(const ModelGraph& model, std::size_t layer, std::span<const HiFiSet> hifi,
                                     ComponentPool kind, std::size_t size, std::uint64_t seed, const LabeledDataset& data) {
    if (size == 0) return 0.0;
    std::mt19937_64 rng(seed);
    const auto chosen = detail::draw(detail::pick_pool(model.layers.at(layer), hifi, kind), size, rng);
    ModelGraph edited = model;
    for (const auto& c : chosen) scale_component(edited.layers[layer], c.channel, c.input, 0.0);
    return accuracy(edited, data) - accuracy(model, data);
}

} // namespace modhifi
