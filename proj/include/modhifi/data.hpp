#pragma once

// Class-conditional Gaussian-mixture sources that stand in for synthetic
// calibration data, and the labeled dataset container they produce.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modhifi/error.hpp"
#include "modhifi/tensor.hpp"

namespace modhifi {

/// Per-class sample budget used when a caller does not choose one.
inline constexpr std::size_t kDefaultSamplesPerClass = 200;

struct MixtureComponent {
    double weight = 1.0;
    std::vector<double> mean;   // channel-major, length = layout.shape.size()
    double scale = 1.0;         // isotropic covariance scale * I
};

struct ClassSpec {
    std::vector<MixtureComponent> components;
};

struct SyntheticSource {
    InputLayout layout;
    std::vector<ClassSpec> classes;
    std::uint64_t seed = 0;

    std::size_t class_count() const noexcept { return classes.size(); }

    void validate() const {
        if (classes.empty()) throw InvalidArgument("source has no classes");
        const std::size_t dim = layout.shape.size();
        for (std::size_t k = 0; k < classes.size(); ++k) {
            const auto& cs = classes[k];
            if (cs.components.empty()) throw InvalidArgument("class " + std::to_string(k) + " has no components");
            double total = 0.0;
            for (const auto& m : cs.components) {
                if (m.mean.size() != dim)
                    throw ShapeMismatch("class " + std::to_string(k) + " mean has length " +
                                        std::to_string(m.mean.size()) + ", layout needs " + std::to_string(dim));
                if (!(m.scale > 0.0)) throw InvalidArgument("covariance scales must be positive");
                if (!(m.weight >= 0.0)) throw InvalidArgument("mixture weights must be non-negative");
                total += m.weight;
            }
            if (std::abs(total - 1.0) > 1e-12)
                throw InvalidArgument("class " + std::to_string(k) + " mixture weights sum to " + std::to_string(total));
        }
    }
};

struct LabeledDataset {
    InputLayout layout;
    std::size_t class_count = 0;
    Tensor x;
    std::vector<int> y;

    std::size_t size() const noexcept { return y.size(); }

    void validate() const {
        if (y.empty()) throw InvalidArgument("dataset is empty");
        if (x.batch() != y.size() || x.shape() != layout.shape) throw ShapeMismatch("dataset tensor does not match labels/layout");
        for (int label : y)
            if (label < 0 || static_cast<std::size_t>(label) >= class_count)
                throw UnknownClass("label " + std::to_string(label) + " outside [0, " + std::to_string(class_count) + ")");
    }

    /// Samples whose label is in `keep`, in original order.
    LabeledDataset filter(const std::set<int>& keep) const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < y.size(); ++i)
            if (keep.contains(y[i])) idx.push_back(i);
        LabeledDataset out{layout, class_count, Tensor(idx.size(), layout.shape), {}};
        for (std::size_t j = 0; j < idx.size(); ++j) {
            auto src = x.sample(idx[j]);
            std::copy(src.begin(), src.end(), out.x.sample(j).begin());
            out.y.push_back(y[idx[j]]);
        }
        return out;
    }
};

namespace detail {
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over (seed, stream)
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}
} // namespace detail

/// Draws exactly `n_per_class` samples for each requested class (all classes
/// when `classes` is empty), ordered by class. Each class has its own random
/// stream, so a class-restricted draw is the matching slice of the full draw.
inline LabeledDataset sample(const SyntheticSource& source, std::size_t n_per_class, const std::set<int>& classes = {},
                             std::optional<std::uint64_t> seed = std::nullopt) {
    source.validate();
    if (n_per_class == 0) throw InvalidArgument("n_per_class must be at least 1");
    std::set<int> wanted = classes;
    if (wanted.empty())
        for (std::size_t k = 0; k < source.class_count(); ++k) wanted.insert(static_cast<int>(k));
    for (int k : wanted)
        if (k < 0 || static_cast<std::size_t>(k) >= source.class_count())
            throw UnknownClass("class " + std::to_string(k) + " not in source with " +
                               std::to_string(source.class_count()) + " classes");

    const std::uint64_t base = seed.value_or(source.seed);
    const std::size_t dim = source.layout.shape.size();
    LabeledDataset out{source.layout, source.class_count(), Tensor(wanted.size() * n_per_class, source.layout.shape), {}};
    std::size_t row = 0;
    for (int k : wanted) {
        const auto& cs = source.classes[static_cast<std::size_t>(k)];
        std::mt19937_64 rng(detail::mix_seed(base, static_cast<std::uint64_t>(k)));
        std::vector<double> weights;
        for (const auto& m : cs.components) weights.push_back(m.weight);
        std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
        std::normal_distribution<double> gauss;
        for (std::size_t s = 0; s < n_per_class; ++s, ++row) {
            const auto& comp = cs.components[pick(rng)];
            const double sd = std::sqrt(comp.scale);
            auto dst = out.x.sample(row);
            for (std::size_t j = 0; j < dim; ++j) dst[j] = comp.mean[j] + sd * gauss(rng);
            out.y.push_back(k);
        }
    }
    return out;
}

/// Inflates every covariance scale by (1 + noise_scale).
inline SyntheticSource degrade(const SyntheticSource& source, double noise_scale) {
    if (!(noise_scale >= 0.0)) throw InvalidArgument("noise scale must be non-negative");
    SyntheticSource out = source;
    for (auto& cs : out.classes)
        for (auto& m : cs.components) m.scale *= 1.0 + noise_scale;
    return out;
}

/// One Gaussian per class, means drawn uniformly on a sphere of radius
/// `separation`.
inline SyntheticSource make_blob_source(std::size_t classes, InputLayout layout, double separation, double scale,
                                        std::uint64_t seed) {
    SyntheticSource src{layout, {}, seed};
    std::mt19937_64 rng(detail::mix_seed(seed, 0xB10B));
    std::normal_distribution<double> gauss;
    const std::size_t dim = layout.shape.size();
    for (std::size_t k = 0; k < classes; ++k) {
        std::vector<double> mean(dim);
        double nrm = 0.0;
        for (double& v : mean) {
            v = gauss(rng);
            nrm += v * v;
        }
        nrm = std::sqrt(nrm);
        for (double& v : mean) v *= separation / nrm;
        src.classes.push_back({{{1.0, std::move(mean), scale}}});
    }
    return src;
}

// ---------------------------------------------------------------- files

namespace detail {
inline const char* layout_name(Layout l) { return l == Layout::Image ? "image" : "tokens"; }

/// Flat file order: C*H*W for images, T x d row-major for tokens.
inline std::vector<double> to_file_order(const InputLayout& layout, std::span<const double> v) {
    if (layout.kind == Layout::Image) return {v.begin(), v.end()};
    const std::size_t d = layout.shape.c, t = layout.shape.h;
    std::vector<double> out(v.size());
    for (std::size_t c = 0; c < d; ++c)
        for (std::size_t p = 0; p < t; ++p) out[p * d + c] = v[c * t + p];
    return out;
}

inline std::vector<double> from_file_order(const InputLayout& layout, std::span<const double> v) {
    if (layout.kind == Layout::Image) return {v.begin(), v.end()};
    const std::size_t d = layout.shape.c, t = layout.shape.h;
    std::vector<double> out(v.size());
    for (std::size_t c = 0; c < d; ++c)
        for (std::size_t p = 0; p < t; ++p) out[c * t + p] = v[p * d + c];
    return out;
}

inline nlohmann::json layout_to_json(const InputLayout& l) {
    return {{"kind", layout_name(l.kind)}, {"shape", {l.shape.c, l.shape.h, l.shape.w}}};
}

template <class T>
T get_field(const nlohmann::json& j, const char* key, const std::string& path) {
    if (!j.is_object() || !j.contains(key)) throw FormatError(path + "." + key + ": missing");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + "." + key + ": " + e.what());
    }
}

inline const nlohmann::json& child(const nlohmann::json& j, const char* key, const std::string& path) {
    if (!j.is_object() || !j.contains(key)) throw FormatError(path + "." + key + ": missing");
    return j.at(key);
}

inline InputLayout layout_from_json(const nlohmann::json& j, const std::string& path) {
    const auto kind = get_field<std::string>(j, "kind", path);
    const auto shape = get_field<std::vector<std::size_t>>(j, "shape", path);
    if (shape.size() != 3) throw FormatError(path + ".shape: expected [c, h, w]");
    InputLayout l;
    if (kind == "image") l.kind = Layout::Image;
    else if (kind == "tokens") l.kind = Layout::Tokens;
    else throw FormatError(path + ".kind: unknown layout '" + kind + "'");
    l.shape = {shape[0], shape[1], shape[2]};
    if (l.kind == Layout::Tokens && l.shape.w != 1) throw FormatError(path + ".shape: token layouts have w = 1");
    return l;
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(path + ": cannot open");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw FormatError(path + ": cannot open for writing");
    out << text;
    if (!out) throw FormatError(path + ": write failed");
}
} // namespace detail

inline nlohmann::json dataset_to_json(const LabeledDataset& d) {
    nlohmann::json samples = nlohmann::json::array();
    for (std::size_t i = 0; i < d.size(); ++i)
        samples.push_back({{"x", detail::to_file_order(d.layout, d.x.sample(i))}, {"y", d.y[i]}});
    return {{"version", 1}, {"layout", detail::layout_to_json(d.layout)}, {"class_count", d.class_count},
            {"samples", std::move(samples)}};
}

inline LabeledDataset dataset_from_json(const nlohmann::json& j) {
    using detail::get_field;
    if (get_field<int>(j, "version", "dataset") != 1) throw FormatError("dataset.version: unsupported");
    LabeledDataset d;
    d.layout = detail::layout_from_json(detail::child(j, "layout", "dataset"), "dataset.layout");
    d.class_count = get_field<std::size_t>(j, "class_count", "dataset");
    const auto& samples = detail::child(j, "samples", "dataset");
    if (!samples.is_array()) throw FormatError("dataset.samples: expected an array");
    d.x = Tensor(samples.size(), d.layout.shape);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::string path = "dataset.samples[" + std::to_string(i) + "]";
        const auto x = get_field<std::vector<double>>(samples[i], "x", path);
        if (x.size() != d.layout.shape.size())
            throw FormatError(path + ".x: has " + std::to_string(x.size()) + " values, layout needs " +
                              std::to_string(d.layout.shape.size()));
        const auto v = detail::from_file_order(d.layout, x);
        std::copy(v.begin(), v.end(), d.x.sample(i).begin());
        d.y.push_back(get_field<int>(samples[i], "y", path));
    }
    try {
        d.validate();
    } catch (const Error& e) {
        throw FormatError(std::string("dataset: ") + e.what());
    }
    return d;
}

inline nlohmann::json source_to_json(const SyntheticSource& s) {
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& cs : s.classes) {
        nlohmann::json comps = nlohmann::json::array();
        for (const auto& m : cs.components)
            comps.push_back({{"weight", m.weight}, {"scale", m.scale}, {"mean", detail::to_file_order(s.layout, m.mean)}});
        classes.push_back({{"components", std::move(comps)}});
    }
    return {{"version", 1}, {"layout", detail::layout_to_json(s.layout)}, {"seed", s.seed}, {"classes", std::move(classes)}};
}

inline SyntheticSource source_from_json(const nlohmann::json& j) {
    using detail::get_field;
    if (get_field<int>(j, "version", "source") != 1) throw FormatError("source.version: unsupported");
    SyntheticSource s;
    s.layout = detail::layout_from_json(detail::child(j, "layout", "source"), "source.layout");
    s.seed = get_field<std::uint64_t>(j, "seed", "source");
    const auto& classes = detail::child(j, "classes", "source");
    if (!classes.is_array()) throw FormatError("source.classes: expected an array");
    for (std::size_t k = 0; k < classes.size(); ++k) {
        ClassSpec cs;
        const auto& comps = detail::child(classes[k], "components", "source.classes[" + std::to_string(k) + "]");
        if (!comps.is_array()) throw FormatError("source.classes[" + std::to_string(k) + "].components: expected an array");
        for (std::size_t m = 0; m < comps.size(); ++m) {
            const std::string path = "source.classes[" + std::to_string(k) + "].components[" + std::to_string(m) + "]";
            MixtureComponent mc;
            mc.weight = get_field<double>(comps[m], "weight", path);
            mc.scale = get_field<double>(comps[m], "scale", path);
            mc.mean = detail::from_file_order(s.layout, get_field<std::vector<double>>(comps[m], "mean", path));
            cs.components.push_back(std::move(mc));
        }
        s.classes.push_back(std::move(cs));
    }
    try {
        s.validate();
    } catch (const Error& e) {
        throw FormatError(std::string("source: ") + e.what());
    }
    return s;
}

inline void save_dataset(const LabeledDataset& d, const std::string& path) {
    detail::write_text_file(path, dataset_to_json(d).dump() + "\n");
}
inline LabeledDataset load_dataset(const std::string& path) { return dataset_from_json(detail::read_json_file(path)); }
inline void save_source(const SyntheticSource& s, const std::string& path) {
    detail::write_text_file(path, source_to_json(s).dump(2) + "\n");
}
inline SyntheticSource load_source(const std::string& path) { return source_from_json(detail::read_json_file(path)); }

} // namespace modhifi
