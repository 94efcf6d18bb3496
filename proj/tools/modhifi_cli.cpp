#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <random>

#include "modhifi/modhifi.hpp"

using nlohmann::json;
namespace fs = std::filesystem;
using namespace modhifi;

namespace {

// Config knobs read from the merged config. Every value actually used is
// echoed into `resolved` so reports carry the full effective config.
class Knobs {
public:
    Knobs(json given, std::string command) : given_(std::move(given)), command_(std::move(command)) {
        if (!given_.is_object()) throw InvalidArgument("config must be a JSON object");
    }

    template <class T>
    T get(const std::string& key, T fallback) {
        used_.insert(key);
        T v = given_.contains(key) ? convert<T>(key) : std::move(fallback);
        resolved_[key] = v;
        return v;
    }

    template <class T>
    std::optional<T> opt(const std::string& key) {
        used_.insert(key);
        if (!given_.contains(key) || given_[key].is_null()) {
            resolved_[key] = nullptr;
            return std::nullopt;
        }
        T v = convert<T>(key);
        resolved_[key] = v;
        return v;
    }

    bool has(const std::string& key) const { return given_.contains(key) && !given_[key].is_null(); }

    void finish() const {
        for (const auto& [k, v] : given_.items())
            if (!used_.contains(k)) throw InvalidArgument("unknown config key '" + k + "' for " + command_);
    }

    const json& resolved() const { return resolved_; }

private:
    template <class T>
    T convert(const std::string& key) const {
        try {
            return given_.at(key).get<T>();
        } catch (const json::exception&) {
            throw InvalidArgument("config key '" + key + "' has the wrong type");
        }
    }

    json given_;
    json resolved_ = json::object();
    std::set<std::string> used_;
    std::string command_;
};

struct Common {
    std::string config;
    std::string model;
    std::string data;
    std::string out = ".";
    std::optional<std::uint64_t> seed;
};

struct Overrides {
    std::optional<std::size_t> layer;
    std::vector<std::size_t> layers;
    std::optional<double> keep;
    std::optional<std::size_t> k;
    std::optional<double> eta;
    std::optional<double> lambda;
    std::optional<double> sigma;
    std::optional<std::size_t> mc_samples;
    std::optional<int> forget_class;
    std::string variant;
    std::string method;
    std::string kind;
    std::string arch;
    std::string csm;
    std::vector<double> diag;
    std::optional<std::size_t> epochs;
};

json merged_config(const Common& c, const Overrides& o) {
    json cfg = c.config.empty() ? json::object() : detail::read_json_file(c.config);
    if (!cfg.is_object()) throw InvalidArgument(c.config + ": config must be a JSON object");
    if (c.seed) cfg["seed"] = *c.seed;
    if (o.layer) cfg["layer"] = *o.layer;
    if (!o.layers.empty()) cfg["layers"] = o.layers;
    if (o.keep) cfg["keep_fraction"] = *o.keep;
    if (o.k) cfg["k"] = *o.k;
    if (o.eta) cfg["eta"] = *o.eta;
    if (o.lambda) cfg["lambda"] = *o.lambda;
    if (o.sigma) cfg["sigmas"] = std::vector<double>{*o.sigma};
    if (o.mc_samples) cfg["mc_samples"] = *o.mc_samples;
    if (o.forget_class) cfg["forget_class"] = *o.forget_class;
    if (!o.variant.empty()) cfg["variant"] = o.variant;
    if (!o.method.empty()) cfg["method"] = o.method;
    if (!o.kind.empty()) cfg["kind"] = o.kind;
    if (!o.arch.empty()) cfg["arch"] = o.arch;
    if (!o.csm.empty()) cfg["csm"] = o.csm;
    if (!o.diag.empty()) cfg["diag"] = o.diag;
    if (o.epochs) cfg["epochs"] = *o.epochs;
    return cfg;
}

struct DataInput {
    std::optional<SyntheticSource> source;
    std::optional<LabeledDataset> dataset;
};

DataInput load_data(const std::string& path) {
    if (path.empty()) throw InvalidArgument("--data is required");
    const json j = detail::read_json_file(path);
    if (j.is_object() && j.contains("samples")) return {std::nullopt, dataset_from_json(j)};
    if (j.is_object() && j.contains("classes")) return {source_from_json(j), std::nullopt};
    throw FormatError(path + ": neither a dataset nor a synthetic source");
}

ModelGraph require_model(const std::string& path) {
    if (path.empty()) throw InvalidArgument("--model is required");
    return load_model(path);
}

std::string base_name(const std::string& path) { return path.empty() ? "" : fs::path(path).filename().string(); }

// Calibration samples come from the seed itself, evaluation samples from a
// derived stream so the two never coincide.
std::uint64_t eval_seed(std::uint64_t seed) { return detail::mix_seed(seed, 1); }

Tensor calibration(const DataInput& d, std::size_t per_class, std::uint64_t seed) {
    if (d.source) return sample(*d.source, per_class, {}, seed).x;
    return d.dataset->x;
}

LabeledDataset evaluation(const DataInput& d, std::size_t per_class, std::uint64_t seed) {
    if (d.source) return sample(*d.source, per_class, {}, eval_seed(seed));
    return *d.dataset;
}

LabeledDataset only_class(const LabeledDataset& d, int cls) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < d.size(); ++i)
        if (d.y[i] == cls) rows.push_back(i);
    if (rows.empty()) throw UnknownClass("dataset has no samples of class " + std::to_string(cls));
    LabeledDataset out{d.layout, d.class_count, Tensor(rows.size(), d.layout.shape), std::vector<int>(rows.size(), cls)};
    for (std::size_t r = 0; r < rows.size(); ++r) {
        auto src = d.x.sample(rows[r]);
        std::copy(src.begin(), src.end(), out.x.sample(r).begin());
    }
    return out;
}

// Tappable layers except the classification head.
std::vector<std::size_t> default_layers(const ModelGraph& m) {
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l + 1 < m.layers.size(); ++l)
        if (is_tappable(m.layers[l])) out.push_back(l);
    if (out.empty()) throw InvalidArgument("model has no prunable layers before the head");
    return out;
}

void write_json(const fs::path& path, const json& j) { detail::write_text_file(path.string(), j.dump(2) + "\n"); }

json header(const std::string& command, std::uint64_t seed, const Knobs& k, const Common& c) {
    return {{"command", command},
            {"seed", seed},
            {"config", k.resolved()},
            {"inputs", {{"model", base_name(c.model)}, {"data", base_name(c.data)}}}};
}

fs::path out_dir(const Common& c) {
    fs::path p(c.out);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw FormatError(c.out + ": cannot create output directory");
    return p;
}

// ---------------------------------------------------------------- train

ModelGraph build_model(const std::string& arch, Knobs& k, const InputLayout& layout, std::size_t classes,
                       std::uint64_t seed) {
    const Shape& s = layout.shape;
    if (arch == "mlp") {
        const auto hidden = k.get<std::vector<std::size_t>>("hidden", {24});
        if (layout.kind != Layout::Image || s.spatial() != 1)
            throw ShapeMismatch("mlp needs flat image inputs (h = w = 1)");
        return make_mlp(s.c, hidden, classes, seed);
    }
    if (arch == "cnn") {
        const auto channels = k.get<std::vector<std::size_t>>("channels", {6, 6});
        const auto kernel = k.get<std::size_t>("kernel", 3);
        if (layout.kind != Layout::Image) throw ShapeMismatch("cnn needs image inputs");
        return make_cnn(s, channels, classes, seed, kernel);
    }
    if (arch == "ffn") {
        const auto d_ff = k.get<std::size_t>("d_ff", 12);
        const auto blocks = k.get<std::size_t>("blocks", 2);
        const auto norm = k.get<std::string>("norm", "layernorm");
        if (norm != "layernorm" && norm != "rmsnorm") throw InvalidArgument("norm must be layernorm or rmsnorm");
        if (layout.kind != Layout::Tokens) throw ShapeMismatch("ffn needs token inputs");
        return make_ffn_model(s.c, s.h, d_ff, blocks, classes,
                              norm == "layernorm" ? NormType::LayerNorm : NormType::RMSNorm, seed);
    }
    throw InvalidArgument("unknown arch '" + arch + "' (mlp, cnn, ffn)");
}

InputLayout default_layout(const std::string& arch, const std::vector<std::size_t>& input) {
    auto dim = [&](std::size_t i, std::size_t fallback) { return i < input.size() ? input[i] : fallback; };
    if (arch == "cnn") {
        if (!input.empty() && input.size() != 3) throw InvalidArgument("cnn input must be [c, h, w]");
        return {Layout::Image, {dim(0, 3), dim(1, 6), dim(2, 6)}};
    }
    if (arch == "ffn") {
        if (!input.empty() && input.size() != 2) throw InvalidArgument("ffn input must be [d, tokens]");
        return {Layout::Tokens, {dim(0, 6), dim(1, 4), 1}};
    }
    if (!input.empty() && input.size() != 1) throw InvalidArgument("mlp input must be [features]");
    return {Layout::Image, {dim(0, 8), 1, 1}};
}

int cmd_train(const Common& c, const json& cfg) {
    Knobs k(cfg, "train");
    const auto seed = k.get<std::uint64_t>("seed", 0);
    const auto arch = k.get<std::string>("arch", "mlp");
    TrainConfig tc;
    tc.epochs = k.get("epochs", tc.epochs);
    tc.batch_size = k.get("batch_size", tc.batch_size);
    tc.learning_rate = k.get("learning_rate", tc.learning_rate);
    tc.momentum = k.get("momentum", tc.momentum);
    tc.weight_decay = k.get("weight_decay", tc.weight_decay);
    tc.cosine_schedule = k.get("cosine_schedule", tc.cosine_schedule);
    tc.seed = seed;
    const auto train_n = k.get<std::size_t>("train_per_class", 200);
    const auto test_n = k.get<std::size_t>("test_per_class", 200);

    DataInput data;
    bool generated = false;
    if (!c.data.empty()) {
        data = load_data(c.data);
    } else {
        const auto classes = k.get<std::size_t>("classes", 3);
        const auto input = k.get<std::vector<std::size_t>>("input", {});
        const auto separation = k.get("separation", 5.0);
        const auto scale = k.get("scale", 1.0);
        if (classes < 2) throw InvalidArgument("need at least 2 classes");
        data.source = make_blob_source(classes, default_layout(arch, input), separation, scale, seed);
        generated = true;
    }
    const InputLayout layout = data.source ? data.source->layout : data.dataset->layout;
    const std::size_t classes = data.source ? data.source->class_count() : data.dataset->class_count;
    const ModelGraph init = build_model(arch, k, layout, classes, seed);
    k.finish();
    tc.validate();

    const LabeledDataset train_set = data.source ? sample(*data.source, train_n, {}, seed) : *data.dataset;
    const auto result = train_with_history(init, train_set, tc);

    const fs::path out = out_dir(c);
    save_model(result.model, (out / "model.json").string());
    if (generated) save_source(*data.source, (out / "source.json").string());

    json rep = header("train", seed, k, c);
    rep["train"] = to_json(evaluate(result.model, train_set));
    rep["test"] = data.source ? to_json(evaluate(result.model, evaluation(data, test_n, seed))) : json(nullptr);
    rep["epoch_loss"] = result.epoch_loss;
    write_json(out / "metrics.json", rep);
    std::cout << "train accuracy " << rep["train"]["accuracy"].get<double>() << "\n";
    return 0;
}

// ---------------------------------------------------------------- score

std::optional<CSMVariant> variant_knob(Knobs& k) {
    const auto v = k.get<std::string>("variant", "default");
    if (v == "default") return std::nullopt;
    if (v == "plain") return CSMVariant::Plain;
    if (v == "centered") return CSMVariant::Centered;
    throw InvalidArgument("variant must be default, plain or centered");
}

int cmd_score(const Common& c, const json& cfg) {
    Knobs k(cfg, "score");
    const auto seed = k.get<std::uint64_t>("seed", 0);
    const auto layer = k.opt<std::size_t>("layer");
    const auto per_class = k.get<std::size_t>("samples_per_class", kDefaultSamplesPerClass);
    const auto batch = k.get<std::size_t>("batch", kDefaultScoringBatch);
    const auto lambda = k.get("lambda", kDefaultLambda);
    const auto variant = variant_knob(k);
    k.finish();
    if (!layer) throw InvalidArgument("score needs a layer");

    const ModelGraph model = require_model(c.model);
    const DataInput data = load_data(c.data);
    const auto csms = estimate_csms(model, *layer, calibration(data, per_class, seed), variant, batch);

    json dump = header("score", seed, k, c);
    json channels = json::array();
    dump["csms"] = json::array();
    for (const auto& csm : csms) {
        dump["csms"].push_back(csm_to_json(csm));
        const auto sc = singleton_scores(csm);
        json ch = {{"channel", csm.channel},
                   {"dead", sc.dead},
                   {"total_energy", csm.total_energy},
                   {"s", sc.s},
                   {"alpha", sc.alpha},
                   {"saliency", saliency(csm)}};
        ch["cholesky"] = sc.dead ? json(nullptr) : json(cholesky_heuristic(csm, lambda));
        channels.push_back(std::move(ch));
    }
    json scores = header("score", seed, k, c);
    scores["layer"] = *layer;
    scores["variant"] = csms.empty() ? "plain" : to_string(csms.front().variant);
    scores["channels"] = std::move(channels);

    const fs::path out = out_dir(c);
    write_json(out / "csms.json", dump);
    write_json(out / "scores.json", scores);
    return 0;
}

// ---------------------------------------------------------------- mfs

std::vector<CSM> mfs_inputs(const Common& c, Knobs& k, std::uint64_t seed) {
    const auto diag = k.get<std::vector<double>>("diag", {});
    const auto csm_path = k.get<std::string>("csm", "");
    const auto layer = k.opt<std::size_t>("layer");
    const auto per_class = k.get<std::size_t>("samples_per_class", kDefaultSamplesPerClass);
    const auto variant = variant_knob(k);
    k.finish();
    if (!diag.empty()) return {make_csm(SymmetricMatrix::diagonal(Vector(diag.begin(), diag.end())))};
    if (!csm_path.empty()) {
        const json j = detail::read_json_file(csm_path);
        std::vector<CSM> out;
        const json& arr = j.is_object() && j.contains("csms") ? j["csms"] : j;
        if (arr.is_array())
            for (std::size_t i = 0; i < arr.size(); ++i) out.push_back(csm_from_json(arr[i], "csms[" + std::to_string(i) + "]"));
        else
            out.push_back(csm_from_json(arr));
        if (out.empty()) throw FormatError(csm_path + ": no CSMs");
        return out;
    }
    if (!layer) throw InvalidArgument("mfs needs diag, csm or a model layer");
    const ModelGraph model = require_model(c.model);
    return estimate_csms(model, *layer, calibration(load_data(c.data), per_class, seed), variant);
}

int cmd_mfs(const Common& c, const json& cfg) {
    Knobs k(cfg, "mfs");
    const auto seed = k.get<std::uint64_t>("seed", 0);
    const auto method = selection_method_from_string(k.get<std::string>("method", "exhaustive"));
    SearchOptions opt;
    opt.lambda = k.get("lambda", kDefaultLambda);
    opt.monte_carlo_samples = k.opt<std::size_t>("mc_samples");
    opt.seed = seed;
    opt.budget = k.get<std::uint64_t>("budget", kDefaultEnumerationBudget);
    const auto single = k.opt<std::size_t>("k");
    const auto k_min = single.value_or(k.get<std::size_t>("k_min", 1));
    const auto k_max = single ? single : k.opt<std::size_t>("k_max");
    const auto eta = k.opt<double>("eta");
    const auto csms = mfs_inputs(c, k, seed);
    if (eta && !(*eta > 0.0 && *eta < 1.0)) throw InvalidArgument("eta must lie in (0, 1)");
    if (k_min == 0) throw InvalidArgument("k_min must be at least 1");

    std::vector<HiFiSet> sets;
    json curves = json::array();
    json dead = json::array();
    for (const auto& csm : csms) {
        if (csm.dead()) {
            dead.push_back(csm.channel);
            continue;
        }
        const std::size_t hi = k_max.value_or(csm.dim());
        detail::check_k(hi, csm.dim());
        json pts = json::array();
        json min_k = nullptr;
        for (std::size_t kk = k_min; kk <= hi; ++kk) {
            auto h = best_subset(csm, kk, method, opt);
            h.layer = csm.layer;
            h.channel = csm.channel;
            pts.push_back({{"k", kk}, {"fidelity", *h.fidelity}, {"indices", h.indices}});
            if (eta && min_k.is_null() && *h.fidelity >= *eta) min_k = kk;
            sets.push_back(std::move(h));
        }
        json entry = {{"layer", csm.layer}, {"channel", csm.channel}, {"dim", csm.dim()}, {"curve", std::move(pts)}};
        if (eta) entry["min_hifi_k"] = min_k;
        curves.push_back(std::move(entry));
    }

    json rep = header("mfs", seed, k, c);
    rep["method"] = to_string(method);
    rep["channels"] = std::move(curves);
    rep["dead_channels"] = std::move(dead);
    const fs::path out = out_dir(c);
    detail::write_text_file((out / "mfs.csv").string(), mfs_csv(sets));
    write_json(out / "mfs.json", rep);
    return 0;
}

// ---------------------------------------------------------------- prune

int cmd_prune(const Common& c, const json& cfg) {
    Knobs k(cfg, "prune");
    const auto seed = k.get<std::uint64_t>("seed", 0);
    PrunePlan plan;
    const auto keep = k.get("keep_fraction", 0.5);
    const auto layers = k.opt<std::vector<std::size_t>>("layers");
    plan.lambda = k.get("lambda", plan.lambda);
    plan.compensate = k.get("compensate", plan.compensate);
    plan.recalibrate = k.get("recalibrate", plan.recalibrate);
    plan.rounds = k.get("rounds", plan.rounds);
    plan.exact_budget = k.get("exact_budget", plan.exact_budget);
    plan.samples_per_class = k.get("samples_per_class", plan.samples_per_class);
    plan.batch = k.get("batch", plan.batch);
    plan.seed = seed;
    const auto eval_n = k.get<std::size_t>("eval_per_class", 200);
    const auto do_compact = k.get("compact", false);
    k.finish();

    const ModelGraph model = require_model(c.model);
    const DataInput data = load_data(c.data);
    for (auto l : layers.value_or(default_layers(model))) plan.targets.push_back({l, keep});
    const LabeledDataset eval = evaluation(data, eval_n, seed);
    const auto res = modhifi_prune(model, plan, calibration(data, plan.samples_per_class, seed));

    json rep = header("prune", seed, k, c);
    rep["task"] = "prune";
    rep["seeds"] = {{"calibration", seed}, {"evaluation", data.source ? json(eval_seed(seed)) : json(nullptr)}};
    std::size_t removed = 0;
    rep["per_layer"] = json::array();
    for (const auto& m : res.per_layer) {
        json j = to_json(m);
        j["changed"] = m.changed;
        rep["per_layer"].push_back(std::move(j));
        removed += m.removed;
    }
    rep["removed_total"] = removed;
    rep["metrics_before"] = to_json(evaluate(model, eval));
    rep["metrics_after"] = to_json(evaluate(res.model, eval));

    ModelGraph written = res.model;
    if (do_compact) {
        auto cr = compact(res.model);
        rep["compacted"] = {{"removed", cr.removed.size()}, {"metrics", to_json(evaluate(cr.model, eval))}};
        written = std::move(cr.model);
    } else {
        rep["compacted"] = nullptr;
    }
    const fs::path out = out_dir(c);
    save_model(written, (out / "model.json").string());
    write_json(out / "prune_report.json", rep);
    return 0;
}

// ---------------------------------------------------------------- unlearn

int cmd_unlearn(const Common& c, const json& cfg) {
    Knobs k(cfg, "unlearn");
    const auto seed = k.get<std::uint64_t>("seed", 0);
    UnlearnPlan plan;
    plan.forget_class = k.get("forget_class", 0);
    const auto layers = k.opt<std::vector<std::size_t>>("layers");
    plan.k_fraction = k.get("k_fraction", plan.k_fraction);
    plan.k = k.opt<std::size_t>("k");
    const auto variant = k.get<std::string>("variant", "zero");
    plan.batch = k.get("batch", plan.batch);
    const auto per_class = k.get<std::size_t>("samples_per_class", kDefaultSamplesPerClass);
    const auto eval_n = k.get<std::size_t>("eval_per_class", 200);
    k.finish();
    if (variant == "zero") plan.variant = MaskMode::UnlearnZero;
    else if (variant == "negate") plan.variant = MaskMode::UnlearnNegate;
    else throw InvalidArgument("variant must be zero or negate");

    const ModelGraph model = require_model(c.model);
    const DataInput data = load_data(c.data);
    plan.layers = layers.value_or(default_layers(model));
    plan.validate(model);
    const LabeledDataset forget = data.source ? sample(*data.source, per_class, {plan.forget_class}, seed)
                                              : only_class(*data.dataset, plan.forget_class);
    const LabeledDataset eval = evaluation(data, eval_n, seed);
    const auto res = modhifi_unlearn(model, plan, forget);

    const auto before = unlearn_metrics(model, eval, plan.forget_class);
    const auto after = unlearn_metrics(res.model, eval, plan.forget_class);
    json rep = header("unlearn", seed, k, c);
    rep["task"] = "unlearn";
    rep["seeds"] = {{"forget", seed}, {"evaluation", data.source ? json(eval_seed(seed)) : json(nullptr)}};
    rep["per_layer"] = json::array();
    for (const auto& m : res.per_layer) {
        json j = to_json(m);
        j["changed"] = m.changed;
        rep["per_layer"].push_back(std::move(j));
    }
    rep["metrics_before"] = to_json(evaluate(model, eval));
    rep["metrics_after"] = to_json(evaluate(res.model, eval));
    rep["forget_accuracy"] = {{"before", before.forget_accuracy}, {"after", after.forget_accuracy},
                              {"delta", after.forget_accuracy - before.forget_accuracy}};
    rep["retain_accuracy"] = {{"before", before.retain_accuracy}, {"after", after.retain_accuracy},
                              {"delta", after.retain_accuracy - before.retain_accuracy}};

    const fs::path out = out_dir(c);
    save_model(res.model, (out / "model.json").string());
    write_json(out / "unlearn_report.json", rep);
    return 0;
}

// ---------------------------------------------------------------- lipschitz

int cmd_lipschitz(const Common& c, const json& cfg) {
    Knobs k(cfg, "lipschitz");
    const auto seed = k.get<std::uint64_t>("seed", 0);
    const auto per_class = k.get<std::size_t>("samples_per_class", kDefaultSamplesPerClass);
    k.finish();

    const ModelGraph model = require_model(c.model);
    LipschitzReport rep;
    if (!c.data.empty()) {
        rep = lipschitz_report(model, calibration(load_data(c.data), per_class, seed));
    } else {
        // without samples, only models free of norm layers can be bounded
        const auto shapes = infer_shapes(model);
        for (std::size_t l = 0; l < model.layers.size(); ++l) {
            rep.layers.push_back(layer_lipschitz(model.layers[l], shapes[l]));
            rep.worst_case.push_back(worst_case_Cl(model, l, {}));
        }
    }
    json j = header("lipschitz", seed, k, c);
    j["report"] = to_json(rep, model);
    write_json(out_dir(c) / "lipschitz.json", j);
    return 0;
}

// ---------------------------------------------------------------- experiment

struct DeltaStats {
    double mean = 0.0;
    double min = 0.0;
    double max = 0.0;
};

DeltaStats stats(const std::vector<double>& v) {
    DeltaStats s{0.0, v.front(), v.front()};
    for (double d : v) {
        s.mean += d;
        s.min = std::min(s.min, d);
        s.max = std::max(s.max, d);
    }
    s.mean /= static_cast<double>(v.size());
    return s;
}

constexpr std::array kPools{ComponentPool::HiFi, ComponentPool::NonHiFi, ComponentPool::Random};

int cmd_experiment(const Common& c, const json& cfg) {
    Knobs k(cfg, "experiment");
    const auto seed = k.get<std::uint64_t>("seed", 0);
    const auto kind = k.get<std::string>("kind", "noise");
    const auto per_class = k.get<std::size_t>("samples_per_class", kDefaultSamplesPerClass);
    const auto eval_n = k.get<std::size_t>("eval_per_class", 200);
    const auto layer = k.opt<std::size_t>("layer");

    std::vector<double> sigmas, sizes_d;
    std::size_t hifi_k = 0, draws = 0, masks = 0;
    double fraction = 0.0, mask_keep = 0.0;
    if (kind == "noise" || kind == "removal") {
        hifi_k = k.get<std::size_t>("k", 4);
        draws = k.get<std::size_t>("draws", 40);
        if (kind == "noise") {
            sigmas = k.get<std::vector<double>>("sigmas", {0.1, 0.5, 1.0});
            fraction = k.get("fraction", 1.0);
        } else {
            sizes_d = k.get<std::vector<double>>("sizes", {});
        }
    } else if (kind == "bound") {
        masks = k.get<std::size_t>("masks", 50);
        mask_keep = k.get("mask_keep", 0.5);
    } else {
        throw InvalidArgument("experiment kind must be noise, removal or bound");
    }
    k.finish();
    if (!layer) throw InvalidArgument("experiment needs a layer");
    if ((kind != "bound" && draws == 0) || (kind == "bound" && masks == 0))
        throw InvalidArgument("need at least one draw or mask");

    const ModelGraph model = require_model(c.model);
    const DataInput data = load_data(c.data);
    const Tensor x = calibration(data, per_class, seed);
    json rep = header("experiment", seed, k, c);
    rep["kind"] = kind;
    std::ostringstream csv;
    csv.precision(17);

    if (kind == "bound") {
        if (*layer >= model.layers.size() || !is_tappable(model.layers[*layer]))
            throw InvalidArgument("layer " + std::to_string(*layer) + " has no input components");
        if (!(mask_keep >= 0.0 && mask_keep <= 1.0)) throw InvalidArgument("mask_keep must lie in [0, 1]");
        const auto dims = component_dims(model.layers[*layer]);
        std::mt19937_64 rng(seed);
        std::bernoulli_distribution coin(mask_keep);
        std::vector<ModificationMask> ms;
        for (std::size_t m = 0; m < masks; ++m) {
            auto mask = ModificationMask::all_kept(*layer, dims, MaskMode::UnlearnZero);
            for (auto& v : mask.keep) v = coin(rng);
            ms.push_back(std::move(mask));
        }
        const auto results = bound_check(model, *layer, ms, x);
        csv << "layer,mask,global_error,local_form,worst_case_C,ratio,normalized_ratio,satisfied\n";
        double worst = 0.0;
        bool all = true;
        for (const auto& r : results) {
            const double norm = r.worst_case_C > 0.0 ? r.ratio / (r.worst_case_C * r.worst_case_C) : 0.0;
            worst = std::max(worst, norm);
            all = all && r.satisfied;
            csv << r.layer << ',' << r.mask << ',' << r.global_error << ',' << r.local_form << ',' << r.worst_case_C
                << ',' << r.ratio << ',' << norm << ',' << (r.satisfied ? 1 : 0) << '\n';
        }
        rep["summary"] = {{"masks", results.size()}, {"all_satisfied", all}, {"max_normalized_ratio", worst},
                          {"worst_case_C", results.front().worst_case_C}};
    } else {
        const auto hifi = layer_hifi_sets(model, *layer, x, hifi_k);
        const LabeledDataset eval = evaluation(data, eval_n, seed);
        const bool noise = kind == "noise";
        if (!noise && sizes_d.empty()) {
            // quarter, half and all of the smaller pool
            const auto [yes, no] = split_components(model.layers[*layer], hifi);
            const double m = static_cast<double>(std::min(yes.size(), no.size()));
            sizes_d = {std::round(0.25 * m), std::round(0.5 * m), m};
        }
        const std::vector<double>& levels = noise ? sigmas : sizes_d;
        if (levels.empty()) throw InvalidArgument(noise ? "sigmas is empty" : "sizes is empty");
        csv << (noise ? "sigma" : "size") << ",pool,mean_delta,min_delta,max_delta\n";
        json rows = json::array();
        for (double level : levels) {
            if (!noise && !(level >= 0.0 && level == std::floor(level)))
                throw InvalidArgument("removal sizes must be non-negative integers");
            json row = {{noise ? "sigma" : "size", level}};
            std::map<ComponentPool, double> means;
            for (auto pool : kPools) {
                std::vector<double> deltas;
                for (std::size_t r = 0; r < draws; ++r) {
                    const std::uint64_t s = detail::mix_seed(seed, 1000 + r);
                    deltas.push_back(noise ? noise_experiment(model, *layer, hifi, level, fraction, pool, s, eval)
                                           : counterfactual_removal(model, *layer, hifi, pool,
                                                                    static_cast<std::size_t>(level), s, eval));
                }
                const auto st = stats(deltas);
                means[pool] = st.mean;
                csv << level << ',' << to_string(pool) << ',' << st.mean << ',' << st.min << ',' << st.max << '\n';
                row[to_string(pool)] = {{"mean_delta", st.mean}, {"min_delta", st.min}, {"max_delta", st.max}};
            }
            row["hifi_most_harmful"] = means[ComponentPool::HiFi] < means[ComponentPool::NonHiFi] &&
                                       means[ComponentPool::HiFi] < means[ComponentPool::Random];
            rows.push_back(std::move(row));
        }
        std::size_t hifi_components = 0;
        for (const auto& h : hifi) hifi_components += h.indices.size();
        rep["hifi_components"] = hifi_components;
        rep["baseline_accuracy"] = accuracy(model, eval);
        rep["summary"] = std::move(rows);
    }
    const fs::path out = out_dir(c);
    detail::write_text_file((out / "experiment.csv").string(), csv.str());
    write_json(out / "experiment.json", rep);
    return 0;
}

int exit_code(ErrorKind k) {
    switch (k) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Numerical: return 3;
    case ErrorKind::Format: return 4;
    }
    return 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ModHiFi: fidelity-guided pruning, unlearning and analysis"};
    app.require_subcommand(1);
    Common common;
    Overrides ov;

    using Handler = int (*)(const Common&, const json&);
    const std::vector<std::tuple<std::string, std::string, Handler>> commands{
        {"train", "train a fixture model", cmd_train},
        {"score", "estimate CSMs and singleton scores for a layer", cmd_score},
        {"mfs", "sweep maximum-fidelity subsets over k", cmd_mfs},
        {"prune", "structured pruning with compensation", cmd_prune},
        {"unlearn", "class unlearning", cmd_unlearn},
        {"lipschitz", "per-layer Lipschitz constants and worst-case amplification", cmd_lipschitz},
        {"experiment", "noise, removal and bound-check studies", cmd_experiment},
    };
    std::map<CLI::App*, Handler> handlers;
    for (const auto& [name, desc, fn] : commands) {
        auto* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", common.config, "JSON config file");
        sub->add_option("--model", common.model, "model JSON");
        sub->add_option("--data", common.data, "dataset or synthetic source JSON");
        sub->add_option("--out", common.out, "output directory");
        sub->add_option("--seed", common.seed, "seed");
        sub->add_option("--layer", ov.layer, "layer index");
        sub->add_option("--layers", ov.layers, "layer indices")->delimiter(',');
        sub->add_option("--keep", ov.keep, "keep fraction");
        sub->add_option("--k", ov.k, "subset size");
        sub->add_option("--eta", ov.eta, "fidelity threshold");
        sub->add_option("--lambda", ov.lambda, "ridge regularizer");
        sub->add_option("--sigma", ov.sigma, "noise standard deviation");
        sub->add_option("--mc-samples", ov.mc_samples, "Monte-Carlo subset samples");
        sub->add_option("--forget-class", ov.forget_class, "class to forget");
        sub->add_option("--variant", ov.variant, "CSM or unlearning variant");
        sub->add_option("--method", ov.method, "naive, exhaustive or monte_carlo");
        sub->add_option("--kind", ov.kind, "experiment kind");
        sub->add_option("--arch", ov.arch, "mlp, cnn or ffn");
        sub->add_option("--csm", ov.csm, "CSM JSON file");
        sub->add_option("--diag", ov.diag, "diagonal CSM fixture")->delimiter(',');
        sub->add_option("--epochs", ov.epochs, "training epochs");
        handlers[sub] = fn;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        for (const auto& [sub, fn] : handlers)
            if (sub->parsed()) return fn(common, merged_config(common, ov));
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
