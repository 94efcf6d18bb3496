#pragma once

// Choosing component subsets: top-k by singleton score, exhaustive and
// Monte-Carlo maximum-fidelity search, and the (k, eta) existence check.

#include <algorithm>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "modhifi/fidelity.hpp"

namespace modhifi {

enum class SelectionMethod { NaiveTopK, Exhaustive, MonteCarlo };

inline const char* to_string(SelectionMethod m) {
    switch (m) {
    case SelectionMethod::NaiveTopK: return "naive";
    case SelectionMethod::Exhaustive: return "exhaustive";
    case SelectionMethod::MonteCarlo: return "monte_carlo";
    }
    return "?";
}

inline SelectionMethod selection_method_from_string(const std::string& s) {
    if (s == "naive") return SelectionMethod::NaiveTopK;
    if (s == "exhaustive") return SelectionMethod::Exhaustive;
    if (s == "monte_carlo") return SelectionMethod::MonteCarlo;
    throw InvalidArgument("unknown selection method '" + s + "' (naive, exhaustive, monte_carlo)");
}

struct HiFiSet {
    std::size_t layer = 0;
    std::size_t channel = 0;
    std::vector<std::size_t> indices;   // sorted
    std::size_t k = 0;
    std::optional<double> fidelity;     // absent when selected from scores alone
    SelectionMethod method = SelectionMethod::NaiveTopK;
};

inline constexpr std::uint64_t kDefaultEnumerationBudget = 2'000'000;
inline constexpr std::size_t kDefaultMonteCarloSamples = 1000;
inline constexpr std::size_t kLargeMonteCarloSamples = 100;
inline constexpr std::size_t kLargeComponentCount = 512;

/// 1000 random subsets, or 100 once c_in reaches kLargeComponentCount.
inline std::size_t default_monte_carlo_samples(std::size_t c_in) {
    return c_in >= kLargeComponentCount ? kLargeMonteCarloSamples : kDefaultMonteCarloSamples;
}

namespace detail {
inline void check_k(std::size_t k, std::size_t dim) {
    if (k < 1 || k > dim)
        throw InvalidArgument("k = " + std::to_string(k) + " must lie in [1, " + std::to_string(dim) + "]");
}

/// C(n, k), saturating at uint64 max.
inline std::uint64_t binomial(std::size_t n, std::size_t k) {
    k = std::min(k, n - k);
    constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
    std::uint64_t r = 1;
    for (std::size_t i = 1; i <= k; ++i) {
        const std::uint64_t f = n - k + i;
        if (r > kMax / f) return kMax;
        r = r * f / i;
    }
    return r;
}

/// Advances a sorted combination of {0..n-1} in lexicographic order.
inline bool next_combination(std::vector<std::size_t>& c, std::size_t n) {
    const std::size_t k = c.size();
    std::size_t i = k;
    while (i > 0 && c[i - 1] == n - k + i - 1) --i;
    if (i == 0) return false;
    ++c[i - 1];
    for (std::size_t j = i; j < k; ++j) c[j] = c[j - 1] + 1;
    return true;
}
} // namespace detail

/// Indices of the k largest values, lower index first on ties; sorted.
inline std::vector<std::size_t> topk_indices(std::span<const double> values, std::size_t k) {
    detail::check_k(k, values.size());
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

inline HiFiSet naive_topk(const SingletonScores& scores, std::size_t k) {
    HiFiSet h;
    h.indices = topk_indices(scores.s, k);
    h.k = k;
    h.method = SelectionMethod::NaiveTopK;
    return h;
}

/// Top-k by singleton score, with the subset's fidelity filled in.
inline HiFiSet naive_topk(const CSM& csm, std::size_t k, double lambda = kDefaultLambda) {
    HiFiSet h = naive_topk(singleton_scores(csm), k);
    h.layer = csm.layer;
    h.channel = csm.channel;
    h.fidelity = subset_fidelity(csm, h.indices, lambda).fidelity;
    return h;
}

/// Best size-k subset by full enumeration; the lexicographically first
/// subset wins ties.
inline HiFiSet exhaustive_mfs(const CSM& csm, std::size_t k, double lambda = kDefaultLambda,
                              std::uint64_t budget = kDefaultEnumerationBudget) {
    const std::size_t n = csm.dim();
    detail::check_k(k, n);
    const auto count = detail::binomial(n, k);
    if (count > budget)
        throw BudgetExceeded("C(" + std::to_string(n) + ", " + std::to_string(k) + ") = " + std::to_string(count) +
                             " subsets exceeds the enumeration budget of " + std::to_string(budget));
    std::vector<std::size_t> c(k);
    std::iota(c.begin(), c.end(), 0);
    HiFiSet best{csm.layer, csm.channel, c, k, -1.0, SelectionMethod::Exhaustive};
    do {
        const double fs = subset_fidelity(csm, c, lambda).fidelity;
        if (fs > *best.fidelity) {
            best.fidelity = fs;
            best.indices = c;
        }
    } while (detail::next_combination(c, n));
    return best;
}

/// Best of `samples` uniformly random size-k subsets. Equal fidelities are
/// resolved towards the lexicographically smaller subset.
inline HiFiSet monte_carlo_mfs(const CSM& csm, std::size_t k, std::size_t samples, std::uint64_t seed,
                               double lambda = kDefaultLambda) {
    const std::size_t n = csm.dim();
    detail::check_k(k, n);
    if (samples == 0) throw InvalidArgument("Monte-Carlo search needs at least one sample");
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> pool(n);
    HiFiSet best{csm.layer, csm.channel, {}, k, std::nullopt, SelectionMethod::MonteCarlo};
    for (std::size_t t = 0; t < samples; ++t) {
        std::iota(pool.begin(), pool.end(), 0);
        for (std::size_t i = 0; i < k; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, n - 1);
            std::swap(pool[i], pool[pick(rng)]);
        }
        std::vector<std::size_t> c(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
        std::sort(c.begin(), c.end());
        const double fs = subset_fidelity(csm, c, lambda).fidelity;
        if (!best.fidelity || fs > *best.fidelity || (fs == *best.fidelity && c < best.indices)) {
            best.fidelity = fs;
            best.indices = std::move(c);
        }
    }
    return best;
}

struct SearchOptions {
    double lambda = kDefaultLambda;
    std::optional<std::size_t> monte_carlo_samples;   // default_monte_carlo_samples(c_in) when absent
    std::uint64_t seed = 0;
    std::uint64_t budget = kDefaultEnumerationBudget;
};

inline HiFiSet best_subset(const CSM& csm, std::size_t k, SelectionMethod method, const SearchOptions& opt = {}) {
    switch (method) {
    case SelectionMethod::NaiveTopK: return naive_topk(csm, k, opt.lambda);
    case SelectionMethod::Exhaustive: return exhaustive_mfs(csm, k, opt.lambda, opt.budget);
    case SelectionMethod::MonteCarlo:
        return monte_carlo_mfs(csm, k, opt.monte_carlo_samples.value_or(default_monte_carlo_samples(csm.dim())), opt.seed,
                               opt.lambda);
    }
    throw InvalidArgument("unknown selection method");
}

/// The method's best size-k set if its fidelity reaches eta.
inline std::optional<HiFiSet> hifi_check(const CSM& csm, std::size_t k, double eta, SelectionMethod method,
                                         const SearchOptions& opt = {}) {
    if (!(eta > 0.0 && eta < 1.0)) throw InvalidArgument("eta must lie in (0, 1)");
    HiFiSet h = best_subset(csm, k, method, opt);
    if (*h.fidelity >= eta) return h;
    return std::nullopt;
}

/// CSV rows (layer, channel, k, method, fidelity, indices); indices are
/// space-separated.
inline std::string mfs_csv(std::span<const HiFiSet> sets) {
    std::ostringstream out;
    out.precision(17);
    out << "layer,channel,k,method,fidelity,indices\n";
    for (const auto& h : sets) {
        out << h.layer << ',' << h.channel << ',' << h.k << ',' << to_string(h.method) << ',';
        if (h.fidelity) out << *h.fidelity;
        out << ',';
        for (std::size_t i = 0; i < h.indices.size(); ++i) out << (i ? " " : "") << h.indices[i];
        out << '\n';
    }
    return out.str();
}

} // namespace modhifi
