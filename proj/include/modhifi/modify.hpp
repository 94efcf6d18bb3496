#pragma once

// Model modification from HiFi sets: structured pruning with closed-form
// compensation and BatchNorm recalibration, class unlearning by zeroing or
// negating forget-class HiFi components, physical compaction of zeroed
// channels, and FLOP/parameter accounting.

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modhifi/data.hpp"
#include "modhifi/fidelity.hpp"
#include "modhifi/model/forward.hpp"
#include "modhifi/model/train.hpp"
#include "modhifi/selection.hpp"

namespace modhifi {

// ---------------------------------------------------------------- components

/// Output/input component counts of a tappable layer (for an FFN block the
/// inputs are the d_ff hidden units feeding the down projection).
struct ComponentDims {
    std::size_t outputs = 0;
    std::size_t inputs = 0;
};

inline ComponentDims component_dims(const LayerSpec& layer) {
    if (const auto* d = std::get_if<Dense>(&layer)) return {d->out, d->in};
    if (const auto* c = std::get_if<Conv2D>(&layer)) return {c->out, c->in};
    if (const auto* f = std::get_if<FFNBlock>(&layer)) return {f->down.out, f->down.in};
    throw InvalidArgument(std::string(to_string(kind_of(layer))) + " layer has no input components");
}

/// The weights W_ci realizing contribution A_ci (one scalar, or a k x k
/// filter for convolutions).
inline std::span<double> component_weights(LayerSpec& layer, std::size_t c, std::size_t i) {
    if (auto* d = std::get_if<Dense>(&layer)) return {&d->w(c, i), 1};
    if (auto* cv = std::get_if<Conv2D>(&layer)) return cv->filter(c, i);
    if (auto* f = std::get_if<FFNBlock>(&layer)) return {&f->down.w(c, i), 1};
    throw InvalidArgument(std::string(to_string(kind_of(layer))) + " layer has no input components");
}

inline std::span<const double> component_weights(const LayerSpec& layer, std::size_t c, std::size_t i) {
    return component_weights(const_cast<LayerSpec&>(layer), c, i);
}

inline void scale_component(LayerSpec& layer, std::size_t c, std::size_t i, double factor) {
    for (double& w : component_weights(layer, c, i)) w *= factor;
}

inline bool component_is_zero(const LayerSpec& layer, std::size_t c, std::size_t i) {
    const auto w = component_weights(layer, c, i);
    return std::all_of(w.begin(), w.end(), [](double v) { return v == 0.0; });
}

/// True when input component i is zero for every output.
inline bool input_column_is_zero(const LayerSpec& layer, std::size_t i) {
    const auto dims = component_dims(layer);
    for (std::size_t c = 0; c < dims.outputs; ++c)
        if (!component_is_zero(layer, c, i)) return false;
    return true;
}

/// Negation only cancels a component when a residual path carries the
/// block input around it.
inline bool has_residual_path(const ModelGraph& model, std::size_t layer) {
    if (kind_of(model.layers.at(layer)) == LayerKind::FFNBlock) return true;
    return layer + 1 < model.layers.size() && kind_of(model.layers[layer + 1]) == LayerKind::ResidualAdd;
}

// ---------------------------------------------------------------- masks

enum class MaskMode { Prune, UnlearnZero, UnlearnNegate };

inline const char* to_string(MaskMode m) {
    switch (m) {
    case MaskMode::Prune: return "prune";
    case MaskMode::UnlearnZero: return "zero";
    case MaskMode::UnlearnNegate: return "negate";
    }
    return "?";
}

/// keep(c, i) = 1 leaves W_ci alone; 0 zeroes it (Prune, UnlearnZero) or
/// negates it (UnlearnNegate).
struct ModificationMask {
    std::size_t layer = 0;
    std::size_t outputs = 0;
    std::size_t inputs = 0;
    std::vector<std::uint8_t> keep;
    MaskMode mode = MaskMode::Prune;

    static ModificationMask all_kept(std::size_t layer, ComponentDims dims, MaskMode mode) {
        return {layer, dims.outputs, dims.inputs, std::vector<std::uint8_t>(dims.outputs * dims.inputs, 1), mode};
    }

    /// Column-structured mask keeping exactly the inputs in `kept`.
    static ModificationMask from_columns(std::size_t layer, ComponentDims dims, const std::set<std::size_t>& kept) {
        auto m = all_kept(layer, dims, MaskMode::Prune);
        for (std::size_t c = 0; c < dims.outputs; ++c)
            for (std::size_t i = 0; i < dims.inputs; ++i) m.at(c, i) = kept.contains(i);
        return m;
    }

    std::uint8_t& at(std::size_t c, std::size_t i) { return keep[c * inputs + i]; }
    std::uint8_t at(std::size_t c, std::size_t i) const { return keep[c * inputs + i]; }

    bool column_structured() const {
        for (std::size_t i = 0; i < inputs; ++i)
            for (std::size_t c = 1; c < outputs; ++c)
                if (at(c, i) != at(0, i)) return false;
        return true;
    }
};

inline ModelGraph apply_mask(const ModelGraph& model, const ModificationMask& mask) {
    if (mask.layer >= model.layers.size()) throw InvalidArgument("mask layer out of range");
    const auto dims = component_dims(model.layers[mask.layer]);
    if (dims.outputs != mask.outputs || dims.inputs != mask.inputs || mask.keep.size() != dims.outputs * dims.inputs)
        throw ShapeMismatch("mask shape does not match layer " + std::to_string(mask.layer));
    if (mask.mode == MaskMode::Prune && !mask.column_structured())
        throw InvalidArgument("prune masks must keep or drop whole input channels");
    if (mask.mode == MaskMode::UnlearnNegate && !has_residual_path(model, mask.layer))
        throw InvalidArgument("negation needs a residual path around layer " + std::to_string(mask.layer));
    ModelGraph out = model;
    const double factor = mask.mode == MaskMode::UnlearnNegate ? -1.0 : 0.0;
    for (std::size_t c = 0; c < mask.outputs; ++c)
        for (std::size_t i = 0; i < mask.inputs; ++i)
            if (!mask.at(c, i)) scale_component(out.layers[mask.layer], c, i, factor);
    return out;
}

// ---------------------------------------------------------------- metrics

struct LayerCost {
    std::size_t layer = 0;
    LayerKind kind = LayerKind::Dense;
    std::size_t params = 0;
    std::size_t macs = 0;   // per sample
};

struct CostReport {
    std::vector<LayerCost> layers;
    std::size_t total_params = 0;
    std::size_t total_macs = 0;
};

/// Parameter and multiply-accumulate counts from shapes alone. Only Dense,
/// Conv2D and FFN projections perform multiply-accumulates.
inline CostReport flop_param_report(const ModelGraph& model) {
    const auto shapes = infer_shapes(model);
    CostReport r;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const auto& layer = model.layers[l];
        const std::size_t sp = shapes[l].spatial();
        LayerCost cost{l, kind_of(layer), parameter_count(layer), 0};
        if (const auto* d = std::get_if<Dense>(&layer)) cost.macs = d->in * d->out * sp;
        else if (const auto* c = std::get_if<Conv2D>(&layer)) cost.macs = c->out * c->in * c->kernel_area() * sp;
        else if (const auto* f = std::get_if<FFNBlock>(&layer))
            cost.macs = (f->up.in * f->up.out + f->down.in * f->down.out) * sp;
        r.total_params += cost.params;
        r.total_macs += cost.macs;
        r.layers.push_back(cost);
    }
    return r;
}

struct ModelMetrics {
    double accuracy = 0.0;
    std::vector<double> per_class_accuracy;
    std::size_t flops = 0;   // multiply-accumulates per sample
    std::size_t params = 0;
};

inline ModelMetrics evaluate(const ModelGraph& model, const LabeledDataset& data) {
    const auto cost = flop_param_report(model);
    return {accuracy(model, data), per_class_accuracy(model, data), cost.total_macs, cost.total_params};
}

inline nlohmann::json to_json(const ModelMetrics& m) {
    return {{"accuracy", m.accuracy}, {"per_class_accuracy", m.per_class_accuracy}, {"flops", m.flops}, {"params", m.params}};
}

// ---------------------------------------------------------------- recalibration

/// Unbiased variance floor keeping running_var > 0 for channels that became
/// constant.
inline constexpr double kMinRunningVar = 1e-12;

/// Replaces the running statistics of every BatchNorm layer at index
/// >= `from` with the exact mean and unbiased variance over `x`.
inline ModelGraph recalibrate_batchnorm(const ModelGraph& model, const Tensor& x, std::size_t from = 0) {
    ModelGraph out = model;
    if (x.batch() == 0) throw InvalidArgument("recalibration needs data");
    std::vector<Tensor> acts{x};
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
        if (auto* bn = std::get_if<BatchNorm2D>(&out.layers[l]); bn && l >= from) {
            const Tensor& in = acts[l];
            const std::size_t sp = in.shape().spatial();
            const double count = static_cast<double>(in.batch() * sp);
            for (std::size_t c = 0; c < bn->channels; ++c) {
                double sum = 0.0;
                for (std::size_t n = 0; n < in.batch(); ++n)
                    for (double v : in.channel(n, c)) sum += v;
                const double mean = sum / count;
                double ss = 0.0;
                for (std::size_t n = 0; n < in.batch(); ++n)
                    for (double v : in.channel(n, c)) ss += (v - mean) * (v - mean);
                bn->running_mean[c] = mean;
                bn->running_var[c] = std::max(count > 1.0 ? ss / (count - 1.0) : 0.0, kMinRunningVar);
            }
        }
        acts.push_back(apply_layer(out, l, acts));
        detail::check_finite(acts.back(), l);
    }
    return out;
}

// ---------------------------------------------------------------- pruning

struct PruneTarget {
    std::size_t layer = 0;
    double keep_fraction = 0.5;
};

struct PrunePlan {
    std::vector<PruneTarget> targets;
    double lambda = kDefaultLambda;
    bool compensate = true;
    bool recalibrate = true;
    std::size_t rounds = 1;       // passes over the targets
    bool exact_budget = false;    // largest per-channel k whose union fits round(keep_fraction * alive)
    std::size_t samples_per_class = kDefaultSamplesPerClass;
    std::uint64_t seed = 0;
    std::size_t batch = kDefaultScoringBatch;

    void validate(const ModelGraph& model) const {
        if (targets.empty()) throw InvalidArgument("prune plan has no target layers");
        if (rounds == 0) throw InvalidArgument("prune plan needs at least one round");
        detail::check_lambda(lambda);
        for (const auto& t : targets) {
            if (t.layer >= model.layers.size() || !is_tappable(model.layers[t.layer]))
                throw InvalidArgument("prune target " + std::to_string(t.layer) + " is not a Dense, Conv2D or FFN layer");
            if (!(t.keep_fraction > 0.0 && t.keep_fraction <= 1.0))
                throw InvalidArgument("keep fraction must lie in (0, 1]");
        }
    }
};

struct FidelityStats {
    double min = 1.0;
    double mean = 1.0;
    double max = 1.0;
};

inline FidelityStats fidelity_stats(std::span<const double> fs) {
    if (fs.empty()) return {};
    FidelityStats s{fs[0], 0.0, fs[0]};
    for (double v : fs) {
        s.min = std::min(s.min, v);
        s.max = std::max(s.max, v);
        s.mean += v;
    }
    s.mean /= static_cast<double>(fs.size());
    return s;
}

struct LayerModification {
    std::size_t layer = 0;
    std::size_t kept = 0;
    std::size_t removed = 0;
    std::vector<std::size_t> kept_inputs;   // prune: surviving input channels
    std::size_t dead_channels = 0;
    FidelityStats fs;
    double mse_masked = 0.0;        // layer output MSE vs. unmodified, mask only
    double mse_modified = 0.0;      // after compensation (prune) or editing (unlearn)
    bool changed = false;
};

inline nlohmann::json to_json(const LayerModification& m) {
    return {{"layer", m.layer},
            {"kept", m.kept},
            {"removed", m.removed},
            {"kept_inputs", m.kept_inputs},
            {"dead_channels", m.dead_channels},
            {"fs_stats", {{"min", m.fs.min}, {"mean", m.fs.mean}, {"max", m.fs.max}}},
            {"mse_masked", m.mse_masked},
            {"mse_modified", m.mse_modified}};
}

struct ModificationResult {
    ModelGraph model;
    std::vector<LayerModification> per_layer;
};

namespace detail {
inline double mean_squared_difference(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) s += (da[i] - db[i]) * (da[i] - db[i]);
    return da.empty() ? 0.0 : s / static_cast<double>(da.size());
}

/// Activations 0..layer (inclusive) of `model` on `x`.
inline std::vector<Tensor> activations_until(const ModelGraph& model, const Tensor& x, std::size_t layer) {
    std::vector<Tensor> acts{x};
    for (std::size_t l = 0; l < layer; ++l) {
        acts.push_back(apply_layer(model, l, acts));
        check_finite(acts.back(), l);
    }
    return acts;
}

inline std::size_t keep_count(double fraction, std::size_t alive) {
    const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(alive)));
    return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(alive, 1));
}

/// One pruning pass over one layer of `model` (modified in place).
inline LayerModification prune_layer(ModelGraph& model, const PruneTarget& target, const PrunePlan& plan, const Tensor& x) {
    const std::size_t l = target.layer;
    const auto dims = component_dims(model.layers[l]);
    std::vector<std::size_t> alive;
    for (std::size_t i = 0; i < dims.inputs; ++i)
        if (!input_column_is_zero(model.layers[l], i)) alive.push_back(i);

    LayerModification rep;
    rep.layer = l;
    if (alive.empty()) {
        rep.removed = dims.inputs;
        return rep;
    }
    const auto csms = estimate_csms(model, l, x, std::nullopt, plan.batch);
    std::vector<std::vector<double>> scores;   // per live channel, restricted to alive inputs
    for (const auto& csm : csms) {
        if (csm.dead()) {
            ++rep.dead_channels;
            continue;
        }
        const auto s = singleton_scores(csm).s;
        auto& row = scores.emplace_back();
        for (auto i : alive) row.push_back(s[i]);
    }
    if (scores.empty())
        throw DegenerateLayer("every output channel of layer " + std::to_string(l) + " is dead on the calibration data");

    const auto union_of = [&](std::size_t k) {
        std::set<std::size_t> u;
        for (const auto& row : scores)
            for (auto j : topk_indices(row, k)) u.insert(alive[j]);
        return u;
    };
    const std::size_t goal = keep_count(target.keep_fraction, alive.size());
    std::size_t k = goal;
    std::set<std::size_t> kept = union_of(k);
    while (plan.exact_budget && kept.size() > goal && k > 1) kept = union_of(--k);

    rep.kept_inputs.assign(kept.begin(), kept.end());
    rep.kept = kept.size();
    rep.removed = dims.inputs - kept.size();
    if (rep.kept == alive.size()) {
        std::vector<double> fs;
        for (const auto& csm : csms)
            if (!csm.dead()) fs.push_back(subset_fidelity(csm, rep.kept_inputs, plan.lambda).fidelity);
        rep.fs = fidelity_stats(fs);
        return rep;
    }

    rep.changed = true;
    auto acts = activations_until(model, x, l);
    const Tensor reference = apply_layer(model, l, acts);

    model = apply_mask(model, ModificationMask::from_columns(l, dims, kept));
    rep.mse_masked = mean_squared_difference(reference, apply_layer(model, l, acts));

    std::vector<double> fs;
    for (const auto& csm : csms) {
        if (csm.dead()) continue;
        const auto r = subset_fidelity(csm, rep.kept_inputs, plan.lambda);
        fs.push_back(r.fidelity);
        if (plan.compensate)
            for (auto i : rep.kept_inputs) scale_component(model.layers[l], csm.channel, i, r.delta[i]);
    }
    rep.fs = fidelity_stats(fs);
    rep.mse_modified = mean_squared_difference(reference, apply_layer(model, l, acts));
    return rep;
}
} // namespace detail

/// Prunes with calibration samples `x`: per output channel top-k singleton
/// scores, union across channels, zero the rest, compensate with delta*,
/// then optionally recalibrate BatchNorm. Layers are processed in plan order
/// on the progressively modified model.
inline ModificationResult modhifi_prune(const ModelGraph& model, const PrunePlan& plan, const Tensor& x) {
    plan.validate(model);
    if (x.batch() == 0) throw InvalidArgument("pruning needs calibration samples");
    ModificationResult res{model, {}};
    std::optional<std::size_t> first_changed;
    for (std::size_t round = 0; round < plan.rounds; ++round) {
        for (const auto& t : plan.targets) {
            auto rep = detail::prune_layer(res.model, t, plan, x);
            if (rep.changed) first_changed = std::min(first_changed.value_or(t.layer), t.layer);
            auto same = std::find_if(res.per_layer.begin(), res.per_layer.end(),
                                     [&](const LayerModification& r) { return r.layer == t.layer; });
            if (same == res.per_layer.end()) res.per_layer.push_back(std::move(rep));
            else if (rep.changed) *same = std::move(rep);
        }
    }
    if (plan.recalibrate && first_changed) res.model = recalibrate_batchnorm(res.model, x, *first_changed);
    return res;
}

inline ModificationResult modhifi_prune(const ModelGraph& model, const PrunePlan& plan, const SyntheticSource& source) {
    return modhifi_prune(model, plan, sample(source, plan.samples_per_class, {}, plan.seed).x);
}

// ---------------------------------------------------------------- unlearning

struct UnlearnPlan {
    int forget_class = 0;
    std::vector<std::size_t> layers;
    double k_fraction = 0.05;           // per-channel fraction of c_in, in [0.01, 0.2]
    std::optional<std::size_t> k;       // explicit per-channel count, overrides k_fraction
    MaskMode variant = MaskMode::UnlearnZero;
    std::size_t batch = kDefaultScoringBatch;

    std::size_t k_for(std::size_t c_in) const {
        if (k) {
            if (*k > c_in) throw InvalidArgument("k exceeds the component count");
            return *k;
        }
        return detail::keep_count(k_fraction, c_in);
    }

    void validate(const ModelGraph& model) const {
        if (forget_class < 0 || static_cast<std::size_t>(forget_class) >= model.class_count)
            throw UnknownClass("forget class " + std::to_string(forget_class) + " not in model with " +
                               std::to_string(model.class_count) + " classes");
        if (layers.empty()) throw InvalidArgument("unlearn plan has no target layers");
        if (variant == MaskMode::Prune) throw InvalidArgument("unlearn variant must be zero or negate");
        if (!k && !(k_fraction >= 0.01 && k_fraction <= 0.2))
            throw InvalidArgument("unlearning fraction must lie in [0.01, 0.2]");
        for (auto l : layers) {
            if (l >= model.layers.size() || !is_tappable(model.layers[l]))
                throw InvalidArgument("unlearn target " + std::to_string(l) + " is not a Dense, Conv2D or FFN layer");
            if (variant == MaskMode::UnlearnNegate && !has_residual_path(model, l))
                throw InvalidArgument("negation needs a residual path around layer " + std::to_string(l));
        }
    }
};

struct UnlearnMetrics {
    double forget_accuracy = 0.0;
    double retain_accuracy = 0.0;
};

inline UnlearnMetrics unlearn_metrics(const ModelGraph& model, const LabeledDataset& data, int forget_class) {
    const auto pred = predict(model, data.x);
    double fh = 0, ft = 0, rh = 0, rt = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool hit = pred[i] == data.y[i];
        if (data.y[i] == forget_class) {
            ft += 1;
            fh += hit;
        } else {
            rt += 1;
            rh += hit;
        }
    }
    return {ft > 0 ? fh / ft : 0.0, rt > 0 ? rh / rt : 0.0};
}

/// HiFi sets from forget-class samples only; their weights are zeroed or
/// negated. No compensation and no recalibration. All sets are computed on
/// the unmodified model before any edit.
inline ModificationResult modhifi_unlearn(const ModelGraph& model, const UnlearnPlan& plan, const LabeledDataset& forget) {
    plan.validate(model);
    if (forget.size() == 0) throw InvalidArgument("unlearning needs forget-class samples");
    for (int y : forget.y)
        if (y != plan.forget_class)
            throw WrongClassData("forget data contains label " + std::to_string(y) + ", expected only " +
                                 std::to_string(plan.forget_class));

    ModificationResult res{model, {}};
    std::vector<ModificationMask> masks;
    for (auto l : plan.layers) {
        const auto dims = component_dims(model.layers[l]);
        const std::size_t k = plan.k_for(dims.inputs);
        auto mask = ModificationMask::all_kept(l, dims, plan.variant);
        LayerModification rep;
        rep.layer = l;
        std::vector<double> fs;
        if (k > 0) {
            for (const auto& csm : estimate_csms(model, l, forget.x, std::nullopt, plan.batch)) {
                if (csm.dead()) {
                    ++rep.dead_channels;
                    continue;
                }
                const auto h = naive_topk(singleton_scores(csm), k);
                for (auto i : h.indices) mask.at(csm.channel, i) = 0;
                fs.push_back(subset_fidelity(csm, h.indices, kDefaultLambda).fidelity);
            }
        }
        for (auto v : mask.keep) rep.removed += v == 0;
        rep.kept = mask.keep.size() - rep.removed;
        rep.fs = fidelity_stats(fs);
        masks.push_back(std::move(mask));
        res.per_layer.push_back(std::move(rep));
    }
    for (std::size_t m = 0; m < masks.size(); ++m) {
        const auto acts = detail::activations_until(res.model, forget.x, masks[m].layer);
        const Tensor reference = apply_layer(res.model, masks[m].layer, acts);
        res.model = apply_mask(res.model, masks[m]);
        res.per_layer[m].mse_modified =
            detail::mean_squared_difference(reference, apply_layer(res.model, masks[m].layer, acts));
        res.per_layer[m].mse_masked = res.per_layer[m].mse_modified;
    }
    return res;
}

// ---------------------------------------------------------------- compaction

struct CompactionStep {
    std::size_t producer = 0;   // layer whose output channel (or FFN hidden unit) was removed
    std::size_t channel = 0;
    bool ffn_hidden = false;
};

struct CompactResult {
    ModelGraph model;
    std::vector<CompactionStep> removed;
};

namespace detail {
template <class T>
void erase_at(std::vector<T>& v, std::size_t i) {
    v.erase(v.begin() + static_cast<std::ptrdiff_t>(i));
}

inline void remove_dense_output(Dense& d, std::size_t o) {
    d.weight.erase(d.weight.begin() + static_cast<std::ptrdiff_t>(o * d.in),
                   d.weight.begin() + static_cast<std::ptrdiff_t>((o + 1) * d.in));
    erase_at(d.bias, o);
    --d.out;
}

inline void remove_dense_input(Dense& d, std::size_t i) {
    std::vector<double> w;
    w.reserve(d.out * (d.in - 1));
    for (std::size_t o = 0; o < d.out; ++o)
        for (std::size_t j = 0; j < d.in; ++j)
            if (j != i) w.push_back(d.w(o, j));
    d.weight = std::move(w);
    --d.in;
}

inline void remove_conv_output(Conv2D& c, std::size_t o) {
    const std::size_t block = c.in * c.kernel_area();
    c.weight.erase(c.weight.begin() + static_cast<std::ptrdiff_t>(o * block),
                   c.weight.begin() + static_cast<std::ptrdiff_t>((o + 1) * block));
    erase_at(c.bias, o);
    --c.out;
}

inline void remove_conv_input(Conv2D& c, std::size_t i) {
    std::vector<double> w;
    w.reserve(c.out * (c.in - 1) * c.kernel_area());
    for (std::size_t o = 0; o < c.out; ++o)
        for (std::size_t j = 0; j < c.in; ++j)
            if (j != i) {
                const auto f = c.filter(o, j);
                w.insert(w.end(), f.begin(), f.end());
            }
    c.weight = std::move(w);
    --c.in;
}

inline void remove_input(LayerSpec& layer, std::size_t i) {
    if (auto* d = std::get_if<Dense>(&layer)) remove_dense_input(*d, i);
    else if (auto* c = std::get_if<Conv2D>(&layer)) remove_conv_input(*c, i);
    else throw InvalidArgument("layer kind has no removable inputs");
}

/// Finds the layer producing channel `i` of activation `act` through
/// channelwise layers; returns the producer index and the channelwise
/// layers in between. nullopt when the channel is a model input feature.
inline std::optional<std::pair<std::size_t, std::vector<std::size_t>>> trace_producer(const ModelGraph& model,
                                                                                       std::size_t act) {
    std::vector<std::size_t> between;
    while (act > 0) {
        if (model.is_residual_source(act))
            throw InconsistentCoupling("activation " + std::to_string(act) +
                                       " feeds a residual edge; removing one of its channels would break the sum");
        const std::size_t l = act - 1;
        switch (kind_of(model.layers[l])) {
        case LayerKind::Dense:
        case LayerKind::Conv2D: return std::make_pair(l, between);
        case LayerKind::ReLU:
        case LayerKind::GELU:
        case LayerKind::BatchNorm2D:
        case LayerKind::AvgPool2D:
            between.push_back(l);
            act = l;
            break;
        default:
            throw InconsistentCoupling("channel of activation " + std::to_string(act) + " is coupled through layer " +
                                       std::to_string(l) + " (" + to_string(kind_of(model.layers[l])) + ")");
        }
    }
    return std::nullopt;
}

/// Performs one removal if any is available; returns false otherwise.
inline bool compact_once(ModelGraph& m, std::vector<CompactionStep>& log) {
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        if (auto* f = std::get_if<FFNBlock>(&m.layers[l])) {
            for (std::size_t u = 0; u < f->down.in; ++u) {
                if (f->down.in == 1 || !input_column_is_zero(m.layers[l], u)) continue;
                remove_dense_output(f->up, u);
                remove_dense_input(f->down, u);
                log.push_back({l, u, true});
                return true;
            }
            continue;
        }
        if (!is_tappable(m.layers[l])) continue;
        const auto dims = component_dims(m.layers[l]);
        if (dims.inputs <= 1) continue;
        for (std::size_t i = 0; i < dims.inputs; ++i) {
            if (!input_column_is_zero(m.layers[l], i)) continue;
            const auto producer = trace_producer(m, l);
            if (!producer) break;   // model input features stay
            const auto [p, between] = *producer;
            if (component_dims(m.layers[p]).outputs <= 1) break;
            if (auto* d = std::get_if<Dense>(&m.layers[p])) remove_dense_output(*d, i);
            else remove_conv_output(std::get<Conv2D>(m.layers[p]), i);
            for (auto b : between)
                if (auto* bn = std::get_if<BatchNorm2D>(&m.layers[b])) {
                    erase_at(bn->gamma, i);
                    erase_at(bn->beta, i);
                    erase_at(bn->running_mean, i);
                    erase_at(bn->running_var, i);
                    --bn->channels;
                }
            remove_input(m.layers[l], i);
            log.push_back({p, i, false});
            return true;
        }
    }
    return false;
}
} // namespace detail

/// Physically removes every input channel that is zero for all outputs of
/// its consumer, together with the producing channel (and any BatchNorm
/// channel in between), and every FFN hidden unit whose down-projection
/// column is zero. Remaining terms are summed in the same order, so outputs
/// are unchanged.
inline CompactResult compact(const ModelGraph& model) {
    CompactResult r{model, {}};
    while (detail::compact_once(r.model, r.removed)) {
    }
    infer_shapes(r.model);
    return r;
}

} // namespace modhifi
