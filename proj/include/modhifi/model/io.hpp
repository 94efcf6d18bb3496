#pragma once

// JSON model files:
//   {version, input: {kind, shape}, class_count, residual_edges: [[s, t]...],
//    layers: [{kind, params: {...}, shapes: {name: [dims]}, arrays: {name: [...]}}]}
// The shapes object is authoritative; array lengths must match its product.

#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "modhifi/data.hpp"
#include "modhifi/model/graph.hpp"

namespace modhifi {

inline constexpr int kModelFormatVersion = 1;

namespace detail {

struct LayerWriter {
    nlohmann::json j = {{"params", nlohmann::json::object()},
                        {"shapes", nlohmann::json::object()},
                        {"arrays", nlohmann::json::object()}};
    void array(const std::string& name, const std::vector<double>& v, std::vector<std::size_t> shape) {
        j["shapes"][name] = shape;
        j["arrays"][name] = v;
    }
};

struct LayerReader {
    const nlohmann::json& j;
    std::string path;

    template <class T>
    T param(const char* key) const {
        return get_field<T>(child(j, "params", path), key, path + ".params");
    }
    std::vector<double> array(const std::string& name, const std::vector<std::size_t>& expected) const {
        const std::string where = path + ".arrays." + name;
        const auto shape = get_field<std::vector<std::size_t>>(child(j, "shapes", path), name.c_str(), path + ".shapes");
        if (shape != expected)
            throw FormatError(path + ".shapes." + name + ": does not match the layer parameters");
        std::size_t declared = 1;
        for (auto d : shape) declared *= d;
        auto values = get_field<std::vector<double>>(child(j, "arrays", path), name.c_str(), path + ".arrays");
        if (values.size() != declared)
            throw FormatError(where + ": declared " + std::to_string(declared) + " values, found " +
                              std::to_string(values.size()));
        return values;
    }
};

inline void write_dense(LayerWriter& w, const Dense& d, const std::string& prefix = "") {
    w.j["params"][prefix + "in"] = d.in;
    w.j["params"][prefix + "out"] = d.out;
    w.array(prefix + "weight", d.weight, {d.out, d.in});
    w.array(prefix + "bias", d.bias, {d.out});
}

inline Dense read_dense(const LayerReader& r, const std::string& prefix = "") {
    Dense d;
    d.in = r.param<std::size_t>((prefix + "in").c_str());
    d.out = r.param<std::size_t>((prefix + "out").c_str());
    d.weight = r.array(prefix + "weight", {d.out, d.in});
    d.bias = r.array(prefix + "bias", {d.out});
    return d;
}

inline void write_norm(LayerWriter& w, const Norm& n, const std::string& prefix = "") {
    w.j["params"][prefix + "dim"] = n.dim;
    w.j["params"][prefix + "norm"] = n.type == NormType::LayerNorm ? "LayerNorm" : "RMSNorm";
    w.array(prefix + "gamma", n.gamma, {n.dim});
    w.array(prefix + "beta", n.beta, {n.dim});
}

inline Norm read_norm(const LayerReader& r, NormType type, const std::string& prefix = "") {
    Norm n;
    n.type = type;
    n.dim = r.param<std::size_t>((prefix + "dim").c_str());
    n.gamma = r.array(prefix + "gamma", {n.dim});
    n.beta = r.array(prefix + "beta", {n.dim});
    return n;
}

inline nlohmann::json layer_to_json(const LayerSpec& layer) {
    LayerWriter w;
    std::visit(
        [&](const auto& l) {
            using T = std::remove_cvref_t<decltype(l)>;
            if constexpr (std::is_same_v<T, Dense>) {
                write_dense(w, l);
            } else if constexpr (std::is_same_v<T, Conv2D>) {
                w.j["params"]["in"] = l.in;
                w.j["params"]["out"] = l.out;
                w.j["params"]["kernel"] = l.kernel;
                w.array("weight", l.weight, {l.out, l.in, l.kernel, l.kernel});
                w.array("bias", l.bias, {l.out});
            } else if constexpr (std::is_same_v<T, BatchNorm2D>) {
                w.j["params"]["channels"] = l.channels;
                w.j["params"]["eps"] = l.eps;
                w.array("gamma", l.gamma, {l.channels});
                w.array("beta", l.beta, {l.channels});
                w.array("running_mean", l.running_mean, {l.channels});
                w.array("running_var", l.running_var, {l.channels});
            } else if constexpr (std::is_same_v<T, Norm>) {
                w.j["params"]["dim"] = l.dim;
                w.array("gamma", l.gamma, {l.dim});
                w.array("beta", l.beta, {l.dim});
            } else if constexpr (std::is_same_v<T, AvgPool2D>) {
                w.j["params"]["kernel"] = l.kernel;
            } else if constexpr (std::is_same_v<T, FFNBlock>) {
                write_norm(w, l.norm, "norm_");
                write_dense(w, l.up, "up_");
                write_dense(w, l.down, "down_");
            }
        },
        layer);
    w.j["kind"] = to_string(kind_of(layer));
    return w.j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j, const std::string& path) {
    const auto kind = get_field<std::string>(j, "kind", path);
    const LayerReader r{j, path};
    if (kind == "Dense") return read_dense(r);
    if (kind == "Conv2D") {
        Conv2D c;
        c.in = r.param<std::size_t>("in");
        c.out = r.param<std::size_t>("out");
        c.kernel = r.param<std::size_t>("kernel");
        c.weight = r.array("weight", {c.out, c.in, c.kernel, c.kernel});
        c.bias = r.array("bias", {c.out});
        return c;
    }
    if (kind == "BatchNorm2D") {
        BatchNorm2D b;
        b.channels = r.param<std::size_t>("channels");
        b.eps = r.param<double>("eps");
        b.gamma = r.array("gamma", {b.channels});
        b.beta = r.array("beta", {b.channels});
        b.running_mean = r.array("running_mean", {b.channels});
        b.running_var = r.array("running_var", {b.channels});
        return b;
    }
    if (kind == "LayerNorm") return read_norm(r, NormType::LayerNorm);
    if (kind == "RMSNorm") return read_norm(r, NormType::RMSNorm);
    if (kind == "ReLU") return ReLU{};
    if (kind == "GELU") return GELU{};
    if (kind == "AvgPool2D") return AvgPool2D{r.param<std::size_t>("kernel")};
    if (kind == "ResidualAdd") return ResidualAdd{};
    if (kind == "FFNBlock") {
        FFNBlock f;
        const auto nt = r.param<std::string>("norm_norm");
        if (nt != "LayerNorm" && nt != "RMSNorm") throw FormatError(path + ".params.norm_norm: unknown norm '" + nt + "'");
        f.norm = read_norm(r, nt == "LayerNorm" ? NormType::LayerNorm : NormType::RMSNorm, "norm_");
        f.up = read_dense(r, "up_");
        f.down = read_dense(r, "down_");
        return f;
    }
    throw FormatError(path + ".kind: unknown layer kind '" + kind + "'");
}

} // namespace detail

inline nlohmann::json model_to_json(const ModelGraph& model) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : model.layers) layers.push_back(detail::layer_to_json(l));
    nlohmann::json edges = nlohmann::json::array();
    for (const auto& e : model.residual_edges) edges.push_back({e.source, e.target});
    return {{"version", kModelFormatVersion},
            {"input", detail::layout_to_json(model.input)},
            {"class_count", model.class_count},
            {"residual_edges", std::move(edges)},
            {"layers", std::move(layers)}};
}

inline ModelGraph model_from_json(const nlohmann::json& j) {
    using detail::get_field;
    const int version = get_field<int>(j, "version", "model");
    if (version != kModelFormatVersion) throw FormatError("model.version: unsupported version " + std::to_string(version));
    ModelGraph m;
    m.input = detail::layout_from_json(detail::child(j, "input", "model"), "model.input");
    m.class_count = get_field<std::size_t>(j, "class_count", "model");
    const auto& layers = detail::child(j, "layers", "model");
    if (!layers.is_array()) throw FormatError("model.layers: expected an array");
    for (std::size_t i = 0; i < layers.size(); ++i)
        m.layers.push_back(detail::layer_from_json(layers[i], "model.layers[" + std::to_string(i) + "]"));
    const auto& edges = detail::child(j, "residual_edges", "model");
    if (!edges.is_array()) throw FormatError("model.residual_edges: expected an array");
    for (std::size_t i = 0; i < edges.size(); ++i) {
        const auto& e = edges[i];
        if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number_integer() || e[1].get<long>() < 0)
            throw FormatError("model.residual_edges[" + std::to_string(i) + "]: expected [source, target]");
        m.residual_edges.push_back({e[0].get<int>(), e[1].get<std::size_t>()});
    }
    try {
        infer_shapes(m);
    } catch (const ShapeMismatch& e) {
        throw FormatError(std::string("model: ") + e.what());
    }
    return m;
}

inline void save_model(const ModelGraph& model, const std::string& path) {
    detail::write_text_file(path, model_to_json(model).dump() + "\n");
}

inline ModelGraph load_model(const std::string& path) { return model_from_json(detail::read_json_file(path)); }

} // namespace modhifi
