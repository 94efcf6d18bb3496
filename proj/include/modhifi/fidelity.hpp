#pragma once

// Component similarity matrices (CSMs) and the fidelity quantities derived
// from them: subset fidelity with optimal compensation, singleton scores,
// the saliency proxy and the Cholesky row-norm heuristic.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modhifi/data.hpp"
#include "modhifi/model/forward.hpp"
#include "modhifi/numerics.hpp"

namespace modhifi {

inline constexpr double kDefaultLambda = 1e-4;

/// Channels whose output energy is at most this fraction of the CSM trace
/// are treated as dead (Y_c = 0 almost surely).
inline constexpr double kDeadEnergyRatio = 1e-12;

enum class CSMVariant { Plain, Centered };

inline const char* to_string(CSMVariant v) { return v == CSMVariant::Plain ? "plain" : "centered"; }

struct CSM {
    std::size_t layer = 0;
    std::size_t channel = 0;
    CSMVariant variant = CSMVariant::Plain;
    std::size_t n_samples = 0;
    SymmetricMatrix q;
    double total_energy = 0.0;   // 1^T Q 1

    std::size_t dim() const noexcept { return q.dim(); }
    bool dead() const {
        double trace = 0.0;
        for (std::size_t i = 0; i < dim(); ++i) trace += std::max(q(i, i), 0.0);
        return !(total_energy > kDeadEnergyRatio * trace);
    }
};

inline double grand_sum(const SymmetricMatrix& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < q.dim(); ++i)
        for (std::size_t j = 0; j < q.dim(); ++j) s += q(i, j);
    return s;
}

/// Wraps a matrix as a CSM (used by tests, the CLI and analyses that build
/// Q directly).
inline CSM make_csm(SymmetricMatrix q, CSMVariant variant = CSMVariant::Plain, std::size_t layer = 0,
                    std::size_t channel = 0, std::size_t n_samples = 0) {
    for (std::size_t i = 0; i < q.dim(); ++i)
        for (std::size_t j = 0; j < q.dim(); ++j)
            if (!std::isfinite(q(i, j))) throw NonFiniteActivation("CSM has non-finite entries");
    CSM c{layer, channel, variant, n_samples, std::move(q), 0.0};
    c.total_energy = grand_sum(c.q);
    return c;
}

/// Running sums for one (layer, output channel): sum_n <A_i, A_j> over
/// samples and sum_n A_i for the centered variant.
class CSMAccumulator {
public:
    CSMAccumulator() = default;
    CSMAccumulator(std::size_t layer, std::size_t channel, std::size_t dim, std::size_t positions)
        : layer_(layer), channel_(channel), dim_(dim), positions_(positions), sums_(dim, std::vector<double>(dim, 0.0)),
          mean_sums_(dim, std::vector<double>(positions, 0.0)) {}

    std::size_t layer() const noexcept { return layer_; }
    std::size_t channel() const noexcept { return channel_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t positions() const noexcept { return positions_; }
    std::size_t count() const noexcept { return count_; }
    double sum(std::size_t i, std::size_t j) const { return i <= j ? sums_[i][j] : sums_[j][i]; }
    double mean_sum(std::size_t i, std::size_t s) const { return mean_sums_[i][s]; }

    /// Adds every sample of `taps` for this accumulator's output channel.
    CSMAccumulator& accumulate(const ContributionTaps& taps) {
        if (taps.layer != layer_ || taps.inputs != dim_ || taps.positions != positions_ || channel_ >= taps.outputs)
            throw TapMismatch("taps for layer " + std::to_string(taps.layer) + " (" + std::to_string(taps.outputs) +
                              "x" + std::to_string(taps.inputs) + "x" + std::to_string(taps.positions) +
                              ") do not fit accumulator for layer " + std::to_string(layer_) + " channel " +
                              std::to_string(channel_));
        for (std::size_t n = 0; n < taps.samples; ++n) {
            for (std::size_t i = 0; i < dim_; ++i) {
                const auto ai = taps(n, channel_, i);
                for (std::size_t j = i; j < dim_; ++j) sums_[i][j] += dot(ai, taps(n, channel_, j));
                auto& m = mean_sums_[i];
                for (std::size_t s = 0; s < positions_; ++s) m[s] += ai[s];
            }
            ++count_;
        }
        return *this;
    }

    CSMAccumulator& merge(const CSMAccumulator& other) {
        if (other.layer_ != layer_ || other.channel_ != channel_ || other.dim_ != dim_ || other.positions_ != positions_)
            throw TapMismatch("cannot merge accumulators for different (layer, channel) or shapes");
        for (std::size_t i = 0; i < dim_; ++i) {
            for (std::size_t j = i; j < dim_; ++j) sums_[i][j] += other.sums_[i][j];
            for (std::size_t s = 0; s < positions_; ++s) mean_sums_[i][s] += other.mean_sums_[i][s];
        }
        count_ += other.count_;
        return *this;
    }

    CSM finalize(CSMVariant variant) const {
        if (count_ == 0) throw EmptyAccumulator("accumulator for layer " + std::to_string(layer_) + " channel " +
                                                std::to_string(channel_) + " has no samples");
        const double n = static_cast<double>(count_);
        SymmetricMatrix q(dim_);
        for (std::size_t i = 0; i < dim_; ++i)
            for (std::size_t j = i; j < dim_; ++j) {
                double v = sums_[i][j] / n;
                if (variant == CSMVariant::Centered) {
                    double mm = 0.0;
                    for (std::size_t s = 0; s < positions_; ++s) mm += (mean_sums_[i][s] / n) * (mean_sums_[j][s] / n);
                    v -= mm;
                }
                q.set(i, j, v);
            }
        return make_csm(std::move(q), variant, layer_, channel_, count_);
    }

private:
    std::size_t layer_ = 0;
    std::size_t channel_ = 0;
    std::size_t dim_ = 0;
    std::size_t positions_ = 0;
    std::size_t count_ = 0;
    std::vector<std::vector<double>> sums_;        // upper triangle used
    std::vector<std::vector<double>> mean_sums_;   // dim x positions
};

inline CSMAccumulator merge(CSMAccumulator a, const CSMAccumulator& b) { return a.merge(b); }

// ---------------------------------------------------------------- subsets

struct SubsetFidelityResult {
    std::vector<std::size_t> subset;   // sorted
    double fidelity = 0.0;
    Vector delta;                      // length dim, zero outside the subset
    double residual = 0.0;
    bool dead = false;
    bool clamped = false;
};

namespace detail {
inline std::vector<std::size_t> normalize_subset(std::span<const std::size_t> subset, std::size_t dim) {
    std::vector<std::size_t> c(subset.begin(), subset.end());
    std::sort(c.begin(), c.end());
    if (c.empty()) throw InvalidArgument("subset must be nonempty");
    if (std::adjacent_find(c.begin(), c.end()) != c.end()) throw InvalidArgument("subset has repeated indices");
    if (c.back() >= dim)
        throw InvalidArgument("subset index " + std::to_string(c.back()) + " out of range for dimension " +
                              std::to_string(dim));
    return c;
}

inline void check_lambda(double lambda) {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidArgument("lambda must be a finite non-negative number");
}
} // namespace detail

/// Fidelity of `subset` after optimal compensation
/// delta_C = 1_C + (Q_CC + lambda I)^-1 Q_{C,C̄} 1.
inline SubsetFidelityResult subset_fidelity(const CSM& csm, std::span<const std::size_t> subset,
                                            double lambda = kDefaultLambda) {
    detail::check_lambda(lambda);
    const std::size_t n = csm.dim();
    SubsetFidelityResult r;
    r.subset = detail::normalize_subset(subset, n);
    r.delta.assign(n, 0.0);
    if (csm.dead()) {
        for (auto i : r.subset) r.delta[i] = 1.0;
        r.fidelity = 1.0;
        r.dead = true;
        return r;
    }
    std::vector<bool> in(n, false);
    for (auto i : r.subset) in[i] = true;
    Vector rhs(r.subset.size(), 0.0);
    for (std::size_t a = 0; a < r.subset.size(); ++a)
        for (std::size_t j = 0; j < n; ++j)
            if (!in[j]) rhs[a] += csm.q(r.subset[a], j);
    const Vector sol = solve_spd(csm.q.submatrix(r.subset), rhs, lambda);
    Vector u(n, 1.0);
    for (std::size_t a = 0; a < r.subset.size(); ++a) {
        r.delta[r.subset[a]] = 1.0 + sol[a];
        u[r.subset[a]] = -sol[a];
    }
    r.residual = std::max(quadratic_form(csm.q, u), 0.0);
    if (r.residual > csm.total_energy) {
        std::fill(r.delta.begin(), r.delta.end(), 0.0);
        r.residual = csm.total_energy;
        r.clamped = true;
    }
    r.fidelity = std::clamp(1.0 - r.residual / csm.total_energy, 0.0, 1.0);
    return r;
}

inline SubsetFidelityResult subset_fidelity(const CSM& csm, std::initializer_list<std::size_t> subset,
                                            double lambda = kDefaultLambda) {
    return subset_fidelity(csm, std::span<const std::size_t>(subset.begin(), subset.size()), lambda);
}

// ---------------------------------------------------------------- scores

struct SingletonScores {
    Vector s;
    Vector alpha;
    bool dead = false;
};

/// s_i = FS({i}) = (Q1)_i^2 / (Q_ii 1^T Q 1) and alpha_i = (Q1)_i / Q_ii.
inline SingletonScores singleton_scores(const CSM& csm) {
    const std::size_t n = csm.dim();
    SingletonScores out{Vector(n, 0.0), Vector(n, 0.0), csm.dead()};
    if (out.dead) return out;
    const Vector q1 = matvec(csm.q, Vector(n, 1.0));
    for (std::size_t i = 0; i < n; ++i) {
        const double qii = csm.q(i, i);
        if (!(qii > 0.0)) continue;
        out.alpha[i] = q1[i] / qii;
        out.s[i] = std::clamp(q1[i] * q1[i] / (qii * csm.total_energy), 0.0, 1.0);
    }
    return out;
}

/// Q 1, i.e. E<Y_c, A_ci>.
inline Vector saliency(const CSM& csm) { return matvec(csm.q, Vector(csm.dim(), 1.0)); }

/// Squared row norms of L with L L^T = Q + lambda I. These equal the
/// diagonal of Q + lambda I.
inline Vector cholesky_heuristic(const CSM& csm, double lambda = kDefaultLambda) {
    detail::check_lambda(lambda);
    return cholesky_regularized(csm.q, lambda).row_norms_squared();
}

// ---------------------------------------------------------------- estimation

/// Centered when the layer feeds straight into BatchNorm, Plain otherwise.
inline CSMVariant default_variant(const ModelGraph& model, std::size_t layer) {
    if (layer + 1 < model.layers.size() && kind_of(model.layers[layer + 1]) == LayerKind::BatchNorm2D)
        return CSMVariant::Centered;
    return CSMVariant::Plain;
}

inline constexpr std::size_t kDefaultScoringBatch = 64;

/// One accumulator per output channel of `layer`, filled from `x`.
inline std::vector<CSMAccumulator> accumulate_layer(const ModelGraph& model, std::size_t layer, const Tensor& x,
                                                    std::size_t batch = kDefaultScoringBatch) {
    if (layer >= model.layers.size() || !is_tappable(model.layers[layer]))
        throw InvalidArgument("layer " + std::to_string(layer) + " has no input contributions to score");
    if (batch == 0) throw InvalidArgument("batch size must be positive");
    std::vector<CSMAccumulator> accs;
    for (std::size_t first = 0; first < x.batch(); first += batch) {
        const Tensor chunk = x.slice(first, std::min(batch, x.batch() - first));
        const auto fwd = forward(model, chunk, std::array{layer});
        const ContributionTaps& taps = fwd.taps.front();
        if (accs.empty())
            for (std::size_t c = 0; c < taps.outputs; ++c) accs.emplace_back(layer, c, taps.inputs, taps.positions);
        for (auto& a : accs) a.accumulate(taps);
    }
    if (accs.empty()) throw EmptyAccumulator("no samples supplied for layer " + std::to_string(layer));
    return accs;
}

/// CSMs of every output channel of `layer`.
inline std::vector<CSM> estimate_csms(const ModelGraph& model, std::size_t layer, const Tensor& x,
                                      std::optional<CSMVariant> variant = std::nullopt,
                                      std::size_t batch = kDefaultScoringBatch) {
    const CSMVariant v = variant.value_or(default_variant(model, layer));
    std::vector<CSM> out;
    for (const auto& a : accumulate_layer(model, layer, x, batch)) out.push_back(a.finalize(v));
    return out;
}

// ---------------------------------------------------------------- files

inline nlohmann::json csm_to_json(const CSM& c) {
    std::vector<double> upper;
    for (std::size_t i = 0; i < c.dim(); ++i)
        for (std::size_t j = i; j < c.dim(); ++j) upper.push_back(c.q(i, j));
    return {{"layer", c.layer},         {"channel", c.channel}, {"variant", to_string(c.variant)},
            {"dim", c.dim()},           {"q", std::move(upper)}, {"n_samples", c.n_samples}};
}

inline CSM csm_from_json(const nlohmann::json& j, const std::string& path = "csm") {
    using detail::get_field;
    const auto dim = get_field<std::size_t>(j, "dim", path);
    const auto variant = get_field<std::string>(j, "variant", path);
    if (variant != "plain" && variant != "centered") throw FormatError(path + ".variant: unknown variant '" + variant + "'");
    const auto upper = get_field<std::vector<double>>(j, "q", path);
    if (upper.size() != dim * (dim + 1) / 2)
        throw FormatError(path + ".q: expected " + std::to_string(dim * (dim + 1) / 2) + " upper-triangle values, found " +
                          std::to_string(upper.size()));
    SymmetricMatrix q(dim);
    std::size_t k = 0;
    for (std::size_t a = 0; a < dim; ++a)
        for (std::size_t b = a; b < dim; ++b) q.set(a, b, upper[k++]);
    try {
        return make_csm(std::move(q), variant == "plain" ? CSMVariant::Plain : CSMVariant::Centered,
                        get_field<std::size_t>(j, "layer", path), get_field<std::size_t>(j, "channel", path),
                        get_field<std::size_t>(j, "n_samples", path));
    } catch (const NonFiniteActivation&) {
        throw FormatError(path + ".q: non-finite entries");
    }
}

} // namespace modhifi
