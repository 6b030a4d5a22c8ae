#pragma once

// Experiment orchestration: JSON configs, training with Adam and periodic
// checkpoints, evaluation reports, equivariance audits and step-size sweeps.
// Everything runs on one thread so a config plus seed fixes every byte.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <json.hpp>

#include "adam.hpp"
#include "data.hpp"
#include "metrics.hpp"
#include "unrolled.hpp"

namespace equirecon {

using json = nlohmann::json;

enum class Precision { float32, float64 };

inline std::string to_string(Precision p) { return p == Precision::float32 ? "float32" : "float64"; }

inline Precision parse_precision(const std::string& s) {
    if (s == "float32") return Precision::float32;
    if (s == "float64") return Precision::float64;
    throw ConfigError("unknown precision '" + s + "' (expected float32 or float64)");
}

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 4;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t checkpoint_every = 10;
};

struct AugmentConfig {
    bool enabled = false;
    double scale = 0.9;
    double p_max = 0.5;
    double rate = 5.0;
};

struct EvalConfig {
    std::vector<std::string> splits{"test", "test_scaled"};
    std::vector<double> audit_scales{1.0, 0.9};
    std::string audit_split = "val";
};

struct ExperimentConfig {
    std::string name = "run";
    std::uint64_t seed = 0;
    Precision precision = Precision::float64;
    ModelSpec model;
    // Vanilla width whose parameter budget this run matches; 0 uses
    // model.channels as given.
    std::size_t reference_channels = 0;
    DataConfig data;
    std::string data_root;  // empty: generate from `data`
    TrainConfig train;
    AugmentConfig augment;
    EvalConfig eval;
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

/// Typed reader over one JSON object that rejects unknown keys.
class JsonFields {
public:
    JsonFields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
    }

    bool has(const char* key) const { return j_.contains(key); }

    void get(const char* key, std::size_t& out) {
        if (const json* v = take(key)) {
            if (!v->is_number_unsigned()) throw ConfigError(path(key) + " must be a non-negative integer");
            out = v->get<std::size_t>();
        }
    }
    void get(const char* key, double& out) {
        if (const json* v = take(key)) {
            if (!v->is_number()) throw ConfigError(path(key) + " must be a number");
            out = v->get<double>();
        }
    }
    void get(const char* key, bool& out) {
        if (const json* v = take(key)) {
            if (!v->is_boolean()) throw ConfigError(path(key) + " must be true or false");
            out = v->get<bool>();
        }
    }
    void get(const char* key, std::string& out) {
        if (const json* v = take(key)) {
            if (!v->is_string()) throw ConfigError(path(key) + " must be a string");
            out = v->get<std::string>();
        }
    }
    template <typename V>
    void get(const char* key, std::vector<V>& out) {
        if (const json* v = take(key)) {
            if (!v->is_array()) throw ConfigError(path(key) + " must be an array");
            out.clear();
            for (std::size_t i = 0; i < v->size(); ++i) out.push_back(element<V>((*v)[i], key));
        }
    }
    template <typename V, std::size_t N>
    void get(const char* key, std::array<V, N>& out) {
        if (const json* v = take(key)) {
            if (!v->is_array() || v->size() != N) throw ConfigError(path(key) + " must be an array of " + std::to_string(N));
            for (std::size_t i = 0; i < N; ++i) out[i] = element<V>((*v)[i], key);
        }
    }
    const json* sub(const char* key) { return take(key); }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError("unknown config key " + path(k.c_str()));
    }

private:
    const json* take(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }
    std::string path(const char* key) const { return where_ + "." + key; }
    template <typename V>
    V element(const json& e, const char* key) const {
        if constexpr (std::is_same_v<V, double>) {
            if (!e.is_number()) throw ConfigError(path(key) + " entries must be numbers");
        } else if constexpr (std::is_same_v<V, std::string>) {
            if (!e.is_string()) throw ConfigError(path(key) + " entries must be strings");
        } else {
            if (!e.is_number_unsigned()) throw ConfigError(path(key) + " entries must be non-negative integers");
        }
        return e.get<V>();
    }

    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

inline std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace detail

inline json to_json(const ModelSpec& m) {
    return {{"variant", to_string(m.variant)},
            {"unrolls", m.unrolls},
            {"channels", m.channels},
            {"kernel_size", m.kernel_size},
            {"steer_kernel_size", m.steer_kernel_size},
            {"basis_order", m.basis_order},
            {"scale_factor", m.scale_factor},
            {"n_scales", m.n_scales},
            {"interaction", m.interaction},
            {"basis_sigma", m.basis_sigma},
            {"eta_init", m.initial_eta()},
            {"padding", m.padding == Padding::zero ? "zero" : "circular"}};
}

inline json to_json(const ExperimentConfig& c) {
    json model = to_json(c.model);
    model["reference_channels"] = c.reference_channels;
    return {{"name", c.name},
            {"seed", c.seed},
            {"precision", to_string(c.precision)},
            {"model", model},
            {"data", to_json(c.data)},
            {"data_root", c.data_root},
            {"train",
             {{"epochs", c.train.epochs},
              {"batch_size", c.train.batch_size},
              {"lr", c.train.lr},
              {"betas", {c.train.beta1, c.train.beta2}},
              {"eps", c.train.eps},
              {"checkpoint_every", c.train.checkpoint_every}}},
            {"augment",
             {{"enabled", c.augment.enabled}, {"scale", c.augment.scale}, {"p_max", c.augment.p_max}, {"rate", c.augment.rate}}},
            {"eval", {{"splits", c.eval.splits}, {"audit_scales", c.eval.audit_scales}, {"audit_split", c.eval.audit_split}}}};
}

inline void validate(const ExperimentConfig& c);

/// Parses and validates a config. Absent keys keep their defaults; unknown
/// keys and type mismatches are config errors. data.seed defaults to a value
/// derived from the master seed.
inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    detail::JsonFields top(j, "config");
    top.get("name", c.name);
    top.get("seed", c.seed);
    std::string precision = to_string(c.precision);
    top.get("precision", precision);
    c.precision = parse_precision(precision);
    top.get("data_root", c.data_root);

    if (const json* m = top.sub("model")) {
        detail::JsonFields f(*m, "model");
        std::string variant = to_string(c.model.variant), padding = "zero";
        f.get("variant", variant);
        c.model.variant = parse_variant(variant);
        f.get("unrolls", c.model.unrolls);
        f.get("channels", c.model.channels);
        f.get("reference_channels", c.reference_channels);
        f.get("kernel_size", c.model.kernel_size);
        f.get("steer_kernel_size", c.model.steer_kernel_size);
        f.get("basis_order", c.model.basis_order);
        f.get("scale_factor", c.model.scale_factor);
        f.get("n_scales", c.model.n_scales);
        f.get("interaction", c.model.interaction);
        f.get("basis_sigma", c.model.basis_sigma);
        double eta = c.model.initial_eta();
        f.get("eta_init", eta);
        c.model.eta_init = eta == 0.0 ? EtaInit::zero : EtaInit::value;
        c.model.eta_value = eta == 0.0 ? c.model.eta_value : eta;
        f.get("padding", padding);
        if (padding == "zero")
            c.model.padding = Padding::zero;
        else if (padding == "circular")
            c.model.padding = Padding::circular;
        else
            throw ConfigError("model.padding must be zero or circular");
        f.finish();
    }

    bool data_seed_given = false;
    if (const json* d = top.sub("data")) {
        detail::JsonFields f(*d, "data");
        f.get("height", c.data.height);
        f.get("width", c.data.width);
        f.get("coils", c.data.coils);
        f.get("acceleration", c.data.acceleration);
        std::array<std::size_t, 2> calib{c.data.calib.first, c.data.calib.second};
        f.get("calib", calib);
        c.data.calib = {calib[0], calib[1]};
        f.get("noise_sigma", c.data.noise_sigma);
        f.get("volumes", c.data.volumes);
        f.get("slices_per_volume", c.data.slices_per_volume);
        f.get("split", c.data.split);
        f.get("limited", c.data.limited);
        f.get("n_ellipses", c.data.n_ellipses);
        f.get("map_smoothness", c.data.map_smoothness);
        f.get("test_scale", c.data.test_scale);
        data_seed_given = f.has("seed");
        f.get("seed", c.data.seed);
        f.finish();
    }
    if (!data_seed_given) c.data.seed = mix_seed(c.seed, 1);

    if (const json* t = top.sub("train")) {
        detail::JsonFields f(*t, "train");
        f.get("epochs", c.train.epochs);
        f.get("batch_size", c.train.batch_size);
        f.get("lr", c.train.lr);
        std::array<double, 2> betas{c.train.beta1, c.train.beta2};
        f.get("betas", betas);
        c.train.beta1 = betas[0];
        c.train.beta2 = betas[1];
        f.get("eps", c.train.eps);
        f.get("checkpoint_every", c.train.checkpoint_every);
        f.finish();
    }
    if (const json* a = top.sub("augment")) {
        detail::JsonFields f(*a, "augment");
        f.get("enabled", c.augment.enabled);
        f.get("scale", c.augment.scale);
        f.get("p_max", c.augment.p_max);
        f.get("rate", c.augment.rate);
        f.finish();
    }
    if (const json* e = top.sub("eval")) {
        detail::JsonFields f(*e, "eval");
        f.get("splits", c.eval.splits);
        f.get("audit_scales", c.eval.audit_scales);
        f.get("audit_split", c.eval.audit_split);
        f.finish();
    }
    top.finish();
    validate(c);
    return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
    return config_from_json(parse_json(read_text(path), path.string()));
}

/// Architecture actually built: a nonzero reference width sets the vanilla
/// width directly and the scale_eq width through parameter matching.
inline ModelSpec resolved_spec(const ExperimentConfig& c) {
    ModelSpec s = c.model;
    if (c.reference_channels == 0) return s;
    ModelSpec ref = s;
    ref.variant = Variant::vanilla;
    ref.channels = c.reference_channels;
    s.channels = s.variant == Variant::vanilla ? c.reference_channels : match_parameter_budget(ref, s.variant);
    return s;
}

inline void validate(const ExperimentConfig& c) {
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError(msg);
    };
    const auto& m = c.model;
    need(m.channels >= 1, "model.channels must be >= 1");
    need(m.kernel_size % 2 == 1, "model.kernel_size must be odd");
    need(m.steer_kernel_size % 2 == 1, "model.steer_kernel_size must be odd");
    need(m.basis_order >= 1 && m.basis_order <= m.steer_kernel_size * (m.steer_kernel_size + 1) / 2,
         "model.basis_order must be in [1, k(k+1)/2]");
    need(m.scale_factor > 0 && m.scale_factor <= 1, "model.scale_factor must be in (0, 1]");
    need(m.n_scales >= 1, "model.n_scales must be >= 1");
    need(m.interaction >= 1 && m.interaction <= m.n_scales, "model.interaction must be in [1, n_scales]");
    need(m.basis_sigma >= 0, "model.basis_sigma must be >= 0");
    need(std::isfinite(m.initial_eta()), "model.eta_init must be finite");
    need(c.reference_channels == 0 || m.unrolls >= 1, "parameter matching needs at least one unroll");

    const auto& d = c.data;
    need(d.height >= 8 && d.width >= 8, "data.height and data.width must be >= 8");
    need(d.coils >= 1, "data.coils must be >= 1");
    need(d.acceleration >= 1, "data.acceleration must be >= 1");
    need(d.calib.first <= d.height && d.calib.second <= d.width, "data.calib exceeds the image size");
    need(d.noise_sigma >= 0, "data.noise_sigma must be >= 0");
    need(d.slices_per_volume >= 1, "data.slices_per_volume must be >= 1");
    need(d.split[0] + d.split[1] + d.split[2] == d.volumes, "data.split must sum to data.volumes");
    need(d.split[0] >= 1 && d.split[1] >= 1 && d.split[2] >= 1, "every split needs at least one volume");
    need(d.n_ellipses >= 1, "data.n_ellipses must be >= 1");
    need(d.test_scale > 0, "data.test_scale must be > 0");

    const auto& t = c.train;
    need(t.epochs >= 1, "train.epochs must be >= 1");
    need(t.batch_size >= 1, "train.batch_size must be >= 1");
    need(t.lr > 0, "train.lr must be > 0");
    need(t.beta1 >= 0 && t.beta1 < 1 && t.beta2 >= 0 && t.beta2 < 1, "train.betas must be in [0, 1)");
    need(t.eps > 0, "train.eps must be > 0");
    need(t.checkpoint_every >= 1, "train.checkpoint_every must be >= 1");

    const auto& a = c.augment;
    need(a.scale > 0, "augment.scale must be > 0");
    need(a.p_max >= 0 && a.p_max <= 1, "augment.p_max must be in [0, 1]");
    need(a.rate >= 0, "augment.rate must be >= 0");

    for (const auto& s : c.eval.splits) parse_split(s);
    parse_split(c.eval.audit_split);
    for (double s : c.eval.audit_scales) need(s > 0, "eval.audit_scales must be > 0");
    resolved_spec(c);
}

/// Hash of the canonical JSON form (sorted keys, shortest round-trip numbers).
inline std::string config_hash(const ExperimentConfig& c) { return detail::hex64(detail::fnv1a(to_json(c).dump())); }

/// Hash of everything that determines the data: generator settings or root.
inline std::string data_hash(const ExperimentConfig& c) {
    return detail::hex64(detail::fnv1a(json{{"data", to_json(c.data)}, {"data_root", c.data_root}}.dump()));
}

inline Dataset<double> load_split(const ExperimentConfig& c, Split split, std::size_t limit = 0) {
    if (c.data_root.empty()) return generate_split(c.data, split, limit);
    auto d = load_dataset(c.data_root, split);
    if (limit && d.samples.size() > limit) d.samples.resize(limit);
    return d;
}

/// Keeps freed activation buffers in the heap instead of returning them to the
/// OS after every pass; training otherwise spends a fifth of its time in page
/// faults. No effect on results.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
#endif
}

// ---------------------------------------------------------------------------
// Augmentation

/// p_max (1 - exp(-rate epoch / total)).
inline double augment_probability(std::size_t epoch, std::size_t total_epochs, double p_max, double rate) {
    if (total_epochs == 0 || epoch > total_epochs) throw DomainError("augment_probability needs 0 <= epoch <= total_epochs");
    return p_max * (1.0 - std::exp(-rate * double(epoch) / double(total_epochs)));
}

/// The scaled-test pipeline applied to a training sample, with a fresh noise
/// draw from `rng`. a == 1 returns the sample unchanged.
inline KSpaceSample<double> apply_scale_augmentation(const KSpaceSample<double>& s, double a, std::mt19937_64& rng) {
    if (a == 1.0) return s;
    KSpaceSample<double> src = s;
    src.seed = mix_seed(s.seed, rng());
    return scale_sample(src, a);
}

// ---------------------------------------------------------------------------
// Evaluation

template <typename T>
EvalReport evaluate_model(const UnrolledModel<T>& model, const Dataset<double>& data, const std::string& model_id,
                          double scale = 1.0) {
    EvalReport r{model_id, to_string(data.split), scale, {}};
    for (const auto& s : data.samples) {
        const auto x = unrolled_forward(s.template cast<T>(), model).image.template cast<double>();
        r.rows.push_back({s.id, ssim_magnitude(x, s.target), cpsnr_db(x, s.target), std::nullopt});
    }
    return r;
}

/// Ground truth scored against itself: the metric sanity path.
inline EvalReport evaluate_identity(const Dataset<double>& data, double scale = 1.0) {
    EvalReport r{"identity", to_string(data.split), scale, {}};
    for (const auto& s : data.samples) r.rows.push_back({s.id, ssim_magnitude(s.target, s.target), cpsnr_db(s.target, s.target), std::nullopt});
    return r;
}

inline std::string hash_line(const std::string& config_hash, const std::string& data_hash) {
    return "# config_hash " + config_hash + " data_hash " + data_hash + "\n";
}

inline void write_report(const fs::path& dir, const EvalReport& r, const std::string& chash, const std::string& dhash) {
    fs::create_directories(dir);
    write_text(dir / ("report_" + r.split + ".csv"), hash_line(chash, dhash) + r.to_csv());
    write_text(dir / ("report_" + r.split + ".txt"), r.to_text() + "config_hash: " + chash + "\ndata_hash: " + dhash + "\n");
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename T>
struct Checkpoint {
    ExperimentConfig config;
    json meta;
    UnrolledModel<T> model;
    AdamState<T> optimizer;
    std::size_t epoch = 0;
};

template <typename T>
void save_checkpoint(const fs::path& dir, const ExperimentConfig& cfg, const UnrolledModel<T>& model,
                     const AdamState<T>& opt, std::size_t epoch, double val_ssim, double val_cpsnr) {
    // Written under a temporary name and renamed, so an interrupted write never
    // replaces a good checkpoint.
    const fs::path tmp = dir.parent_path() / ("." + dir.filename().string() + ".tmp");
    fs::remove_all(tmp);
    fs::create_directories(tmp / "params");
    fs::create_directories(tmp / "optimizer" / "m");
    fs::create_directories(tmp / "optimizer" / "v");
    const auto named = model.named_parameters();
    json names = json::array();
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& [n, v] = named[i];
        names.push_back(n);
        etns::save(tmp / "params" / (n + ".etns"), v.value());
        if (i < opt.m.size()) {
            etns::save(tmp / "optimizer" / "m" / (n + ".etns"), opt.m[i]);
            etns::save(tmp / "optimizer" / "v" / (n + ".etns"), opt.v[i]);
        }
    }
    json meta = {{"format", "equirecon-checkpoint"},
                 {"version", 1},
                 {"config_hash", config_hash(cfg)},
                 {"data_hash", data_hash(cfg)},
                 {"precision", to_string(cfg.precision)},
                 {"epoch", epoch},
                 {"val_ssim", val_ssim},
                 {"val_cpsnr_db", val_cpsnr},
                 {"parameter_count", parameter_count(model.spec)},
                 {"spec", to_json(model.spec)},
                 {"parameters", names},
                 {"config", to_json(cfg)}};
    write_text(tmp / "model.json", meta.dump(2) + "\n");
    write_text(tmp / "optimizer" / "state.json", json{{"t", opt.t}, {"has_moments", !opt.m.empty()}}.dump() + "\n");
    write_text(tmp / "epoch.txt", std::to_string(epoch) + "\n");
    fs::remove_all(dir);
    fs::rename(tmp, dir);
}

/// A run directory resolves to its best/ checkpoint.
inline fs::path resolve_checkpoint_dir(const fs::path& p) {
    if (fs::exists(p / "model.json")) return p;
    if (fs::exists(p / "best" / "model.json")) return p / "best";
    throw DataError("no checkpoint at " + p.string() + " (model.json not found)");
}

inline json read_checkpoint_meta(const fs::path& dir) {
    const fs::path f = resolve_checkpoint_dir(dir) / "model.json";
    auto meta = parse_json(read_text(f), f.string());
    if (meta.value("format", std::string()) != "equirecon-checkpoint") throw DataError(f.string() + " is not a checkpoint");
    return meta;
}

template <typename T>
Checkpoint<T> load_checkpoint(const fs::path& path) {
    const fs::path dir = resolve_checkpoint_dir(path);
    Checkpoint<T> ck;
    ck.meta = read_checkpoint_meta(dir);
    ck.config = config_from_json(ck.meta.at("config"));
    if (config_hash(ck.config) != ck.meta.value("config_hash", std::string()))
        throw DataError(dir.string() + ": stored config does not match its config hash");
    ck.epoch = ck.meta.value("epoch", std::size_t(0));
    ck.model = init_model<T>(resolved_spec(ck.config), 0);
    const fs::path st = dir / "optimizer" / "state.json";
    const bool moments = fs::exists(st) && parse_json(read_text(st), st.string()).value("has_moments", false);
    if (fs::exists(st)) ck.optimizer.t = parse_json(read_text(st), st.string()).value("t", std::uint64_t(0));
    for (auto& [n, v] : ck.model.named_parameters()) {
        auto t = etns::load(dir / "params" / (n + ".etns")).template to_tensor<T>();
        if (t.shape != v.shape())
            throw ValidationError(dir.string() + ": parameter " + n + " has shape " + shape_str(t.shape) + ", expected " +
                                  shape_str(v.shape()));
        v.mutable_value() = std::move(t);
        if (moments) {
            ck.optimizer.m.push_back(etns::load(dir / "optimizer" / "m" / (n + ".etns")).template to_tensor<T>());
            ck.optimizer.v.push_back(etns::load(dir / "optimizer" / "v" / (n + ".etns")).template to_tensor<T>());
        }
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Training

struct TrainRow {
    std::size_t epoch = 0;
    double train_loss = 0;
    double val_ssim = 0;
    double val_cpsnr_db = 0;
    double augment_p = 0;
    double wall_s = 0;
};

struct TrainLog {
    std::vector<TrainRow> rows;

    std::string to_csv(const std::string& chash = "", const std::string& dhash = "") const {
        std::string out = chash.empty() ? "" : hash_line(chash, dhash);
        out += "epoch,train_loss,val_ssim,val_cpsnr_db,augment_p,wall_s\n";
        for (const auto& r : rows)
            out += std::to_string(r.epoch) + "," + EvalReport::fmt(r.train_loss) + "," + EvalReport::fmt(r.val_ssim) + "," +
                   EvalReport::fmt(r.val_cpsnr_db) + "," + EvalReport::fmt(r.augment_p) + "," + EvalReport::fmt(r.wall_s) + "\n";
        return out;
    }
};

struct TrainResult {
    TrainLog log;
    std::vector<std::size_t> checkpoint_epochs;
    std::size_t best_epoch = 0;
    double best_val_ssim = -1;
    std::size_t steps = 0;
};

struct TrainOptions {
    std::ostream* progress = nullptr;
    // Stop after this many optimizer steps (0: run every epoch). A stopped run
    // skips validation and checkpoints; it exists for dry runs.
    std::size_t max_steps = 0;
    // Forces the augmentation coin to land on "augment" whenever enabled.
    bool always_augment = false;
    // Fault injection for tests: poisons one parameter entry with NaN at the
    // start of this epoch (0: never).
    std::size_t inject_nan_at_epoch = 0;
};

inline std::string checkpoint_name(std::size_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_epoch_%04zu", epoch);
    return buf;
}

/// Trains cfg's model and writes into `out`: config.json, train_log.csv,
/// ckpt_epoch_XXXX/ every checkpoint_every epochs and at the final epoch, and
/// best/ (a copy of the checkpoint with the highest validation SSIM, earliest
/// on ties) named by best.txt.
template <typename T>
TrainResult train(const ExperimentConfig& cfg, const fs::path& out, const TrainOptions& opts = {}) {
    validate(cfg);
    const std::string chash = config_hash(cfg), dhash = data_hash(cfg);
    fs::create_directories(out);
    write_text(out / "config.json", to_json(cfg).dump(2) + "\n");

    auto model = init_model<T>(resolved_spec(cfg), mix_seed(cfg.seed, 2));
    auto params = model.parameters();
    AdamState<T> opt;
    const AdamOptions aopt{cfg.train.lr, cfg.train.beta1, cfg.train.beta2, cfg.train.eps};

    const std::size_t limit = opts.max_steps ? opts.max_steps * cfg.train.batch_size : 0;
    const auto train_set = load_split(cfg, Split::train, limit);
    if (train_set.samples.empty()) throw DataError("training split is empty");
    const auto val_set = opts.max_steps ? Dataset<double>{Split::val, {}, ""} : load_split(cfg, Split::val);
    std::vector<KSpaceSample<T>> cast;
    for (const auto& s : train_set.samples) cast.push_back(s.template cast<T>());

    std::mt19937_64 rng(mix_seed(cfg.seed, 3));
    TrainResult res;
    std::string last_good = "none";
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t N = cast.size(), E = cfg.train.epochs, bs = cfg.train.batch_size;
    std::vector<std::size_t> order(N);

    for (std::size_t epoch = 1; epoch <= E; ++epoch) {
        const double p = cfg.augment.enabled ? augment_probability(epoch - 1, E, cfg.augment.p_max, cfg.augment.rate) : 0.0;
        if (epoch == opts.inject_nan_at_epoch) params.front().mutable_value().data[0] = std::numeric_limits<T>::quiet_NaN();
        for (std::size_t i = 0; i < N; ++i) order[i] = i;
        for (std::size_t i = N; i > 1; --i) std::swap(order[i - 1], order[detail::uniform_index(rng, i)]);

        double loss_sum = 0;
        std::size_t loss_n = 0;
        for (std::size_t start = 0; start < N; start += bs) {
            const std::size_t end = std::min(N, start + bs);
            model.zero_grad();
            for (std::size_t b = start; b < end; ++b) {
                const std::size_t i = order[b];
                const bool aug = cfg.augment.enabled && (opts.always_augment || (p > 0 && detail::uniform01(rng) < p));
                const KSpaceSample<T> s =
                    aug ? apply_scale_augmentation(train_set.samples[i], cfg.augment.scale, rng).template cast<T>() : cast[i];
                try {
                    const ForwardOperator<T> op(s.maps, s.mask);
                    auto y = Var<T>::constant(pack_planar(s.y));
                    auto x = ad::unrolled_forward(ad::adjoint_A(y, op), y, op, model);
                    auto loss = complex_l1_loss(x, s.target);
                    const double lv = double(loss.value()[0]);
                    if (!std::isfinite(lv)) throw NumericError("non-finite loss");
                    loss_sum += lv;
                    ++loss_n;
                    backward(ad::scale(loss, T(1) / T(end - start)));
                } catch (const NumericError& e) {
                    throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", sample " + s.id +
                                       "; last good checkpoint: " + last_good);
                }
            }
            try {
                adam_step(params, opt, aopt);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + "; last good checkpoint: " + last_good);
            }
            ++res.steps;
            if (opts.max_steps && res.steps >= opts.max_steps) break;
        }

        TrainRow row;
        row.epoch = epoch;
        row.train_loss = loss_sum / double(std::max<std::size_t>(loss_n, 1));
        row.augment_p = p;
        if (opts.max_steps && res.steps >= opts.max_steps) {
            row.val_ssim = row.val_cpsnr_db = std::nan("");
            row.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            res.log.rows.push_back(row);
            break;
        }
        try {
            const auto val = evaluate_model(model, val_set, cfg.name);
            row.val_ssim = val.ssim().mean;
            row.val_cpsnr_db = val.cpsnr().mean;
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " during validation at epoch " + std::to_string(epoch) +
                               "; last good checkpoint: " + last_good);
        }
        if (!std::isfinite(row.val_ssim))
            throw NumericError("non-finite validation SSIM at epoch " + std::to_string(epoch) + "; last good checkpoint: " + last_good);
        row.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.log.rows.push_back(row);
        if (opts.progress)
            *opts.progress << "epoch " << epoch << "/" << E << " loss " << EvalReport::fmt(row.train_loss) << " val_ssim "
                           << EvalReport::fmt(row.val_ssim) << " val_cpsnr " << EvalReport::fmt(row.val_cpsnr_db) << " p_aug "
                           << EvalReport::fmt(p) << "\n";

        if (epoch % cfg.train.checkpoint_every == 0 || epoch == E) {
            const fs::path dir = out / checkpoint_name(epoch);
            save_checkpoint(dir, cfg, model, opt, epoch, row.val_ssim, row.val_cpsnr_db);
            res.checkpoint_epochs.push_back(epoch);
            last_good = dir.string();
            if (row.val_ssim > res.best_val_ssim) {
                res.best_val_ssim = row.val_ssim;
                res.best_epoch = epoch;
                fs::remove_all(out / "best");
                fs::copy(dir, out / "best", fs::copy_options::recursive);
                write_text(out / "best.txt", checkpoint_name(epoch) + "\n");
            }
        }
        write_text(out / "train_log.csv", res.log.to_csv(chash, dhash));
    }
    write_text(out / "train_log.csv", res.log.to_csv(chash, dhash));
    return res;
}

/// Runs f.template operator()<T>() with T matching the precision.
template <typename F>
decltype(auto) with_precision(Precision p, F&& f) {
    if (p == Precision::float32) return f.template operator()<float>();
    return f.template operator()<double>();
}

inline TrainResult train_any(const ExperimentConfig& cfg, const fs::path& out, const TrainOptions& opts = {}) {
    return with_precision(cfg.precision, [&]<typename T>() { return train<T>(cfg, out, opts); });
}

// ---------------------------------------------------------------------------
// Evaluation of a checkpoint

/// Rejects data whose slice geometry differs from what the checkpoint's config
/// describes.
inline void check_geometry(const ExperimentConfig& cfg, const Dataset<double>& d) {
    for (const auto& s : d.samples)
        if (s.height() != cfg.data.height || s.width() != cfg.data.width || s.maps.ncoils() != cfg.data.coils)
            throw ConfigError("sample " + s.id + " is " + std::to_string(s.height()) + "x" + std::to_string(s.width()) + " with " +
                              std::to_string(s.maps.ncoils()) + " coils; the checkpoint expects " + std::to_string(cfg.data.height) +
                              "x" + std::to_string(cfg.data.width) + " with " + std::to_string(cfg.data.coils));
}

/// Evaluates a checkpoint on each split and writes report_<split>.{csv,txt}
/// into `out`. `data_root` overrides the config's data source; `identity`
/// scores the ground truth against itself instead of running the model.
inline std::vector<EvalReport> evaluate_checkpoint(const fs::path& ckpt, const std::vector<Split>& splits, const fs::path& out,
                                                   const std::string& data_root = "", bool identity = false) {
    const auto meta = read_checkpoint_meta(ckpt);
    auto cfg = config_from_json(meta.at("config"));
    const std::string chash = config_hash(cfg), dhash = data_hash(cfg);
    if (!data_root.empty()) cfg.data_root = data_root;
    // Named by run and epoch rather than path, so reports do not depend on
    // where the checkpoint lives.
    const std::string id = cfg.name + "@epoch" + std::to_string(meta.value("epoch", std::size_t(0)));
    std::vector<EvalReport> reports;
    for (Split sp : splits) {
        const auto data = load_split(cfg, sp);
        check_geometry(cfg, data);
        const double scale = sp == Split::test_scaled ? cfg.data.test_scale : 1.0;
        EvalReport r = identity ? evaluate_identity(data, scale)
                                : with_precision(cfg.precision, [&]<typename T>() {
                                      return evaluate_model(load_checkpoint<T>(ckpt).model, data, id, scale);
                                  });
        write_report(out, r, chash, dhash);
        reports.push_back(std::move(r));
    }
    return reports;
}

// ---------------------------------------------------------------------------
// Equivariance audit

struct AuditRow {
    std::string model;
    double scale = 1;
    double delta_network = 0;
    double delta_layer_mean = 0;
    std::vector<double> delta_layers;
    double ssim = 0;
};

struct AuditResult {
    std::vector<AuditRow> rows;
    std::vector<std::pair<double, double>> correlation;  // (scale, pearson(-delta, ssim))
    std::string notice;

    std::string summary_csv(const std::string& hashes) const {
        std::string out = hashes + "model,scale,delta_network,delta_layer_mean,ssim\n";
        for (const auto& r : rows)
            out += r.model + "," + EvalReport::fmt(r.scale) + "," + EvalReport::fmt(r.delta_network) + "," +
                   EvalReport::fmt(r.delta_layer_mean) + "," + EvalReport::fmt(r.ssim) + "\n";
        return out;
    }
    std::string long_csv(const std::string& hashes) const {
        std::string out = hashes + "model,layer_or_network,scale,delta\n";
        for (const auto& r : rows) {
            out += r.model + ",network," + EvalReport::fmt(r.scale) + "," + EvalReport::fmt(r.delta_network) + "\n";
            for (std::size_t k = 0; k < r.delta_layers.size(); ++k)
                out += r.model + ",block" + std::to_string(k) + "," + EvalReport::fmt(r.scale) + "," +
                       EvalReport::fmt(r.delta_layers[k]) + "\n";
        }
        return out;
    }
    std::string correlation_csv(const std::string& hashes) const {
        std::string out = hashes + "scale,pearson_negdelta_ssim\n";
        for (const auto& [s, r] : correlation) out += EvalReport::fmt(s) + "," + EvalReport::fmt(r) + "\n";
        return out;
    }
};

namespace detail {

inline std::size_t audit_kernel(const ModelSpec& s) {
    return s.variant == Variant::vanilla ? s.kernel_size : s.steer_kernel_size;
}

/// Network-level Delta per sample compares L_s of the reconstruction with the
/// reconstruction of the physically scaled acquisition; per-layer Delta feeds
/// the zero-filled image through each block body.
template <typename T>
AuditRow audit_one(const UnrolledModel<T>& model, const Dataset<double>& data, const std::string& id, double sc) {
    AuditRow row{id, sc, 0, 0, std::vector<double>(model.unrolls(), 0.0), 0};
    const std::size_t k = audit_kernel(model.spec);
    for (const auto& s : data.samples) {
        const auto base = unrolled_forward(s.template cast<T>(), model).image;
        const auto scaled = scale_sample(s, sc);
        const auto rec = unrolled_forward(scaled.template cast<T>(), model).image;
        const std::size_t m = equivariance_margin(sc, s.height(), s.width(), k);
        row.delta_network += interior_relative_error(pack_planar(resample_scale(base, sc)), pack_planar(rec), m);
        row.ssim += ssim_magnitude(rec.template cast<double>(), scaled.target);
        const auto f = pack_planar(zero_filled_init(s.template cast<T>()));
        for (std::size_t b = 0; b < model.unrolls(); ++b) {
            std::function<Tensor<T>(const Tensor<T>&)> phi = [&](const Tensor<T>& z) {
                return model.blocks[b].body(Var<T>::constant(z)).value();
            };
            row.delta_layers[b] += equivariance_error(phi, f, sc, k);
        }
    }
    const double n = double(data.samples.size());
    row.delta_network /= n;
    row.ssim /= n;
    for (auto& d : row.delta_layers) {
        d /= n;
        row.delta_layer_mean += d / double(row.delta_layers.size());
    }
    return row;
}

} // namespace detail

/// Audits each checkpoint at each scale on `split` of the first checkpoint's
/// data. Checkpoints trained on different data are refused unless `force`.
inline AuditResult equiv_audit(const std::vector<fs::path>& ckpts, const std::vector<double>& scales, Split split,
                               bool force = false, std::vector<std::string> ids = {}) {
    if (ckpts.empty()) throw ConfigError("equiv-audit needs at least one checkpoint");
    if (scales.empty()) throw ConfigError("equiv-audit needs at least one scale");
    for (double s : scales)
        if (!(s > 0)) throw ConfigError("audit scales must be > 0");
    if (ids.empty())
        for (const auto& c : ckpts) ids.push_back(c.string());
    const auto first = config_from_json(read_checkpoint_meta(ckpts[0]).at("config"));
    for (std::size_t i = 1; i < ckpts.size(); ++i) {
        const auto cfg = config_from_json(read_checkpoint_meta(ckpts[i]).at("config"));
        if (data_hash(cfg) != data_hash(first) && !force)
            throw ConfigError("checkpoint " + ckpts[i].string() + " was trained on different data (data hash " + data_hash(cfg) +
                              " vs " + data_hash(first) + "); pass --force to compare anyway");
    }
    const auto data = load_split(first, split);
    check_geometry(first, data);
    AuditResult res;
    for (std::size_t i = 0; i < ckpts.size(); ++i) {
        const auto cfg = config_from_json(read_checkpoint_meta(ckpts[i]).at("config"));
        with_precision(cfg.precision, [&]<typename T>() {
            const auto ck = load_checkpoint<T>(ckpts[i]);
            for (double s : scales) res.rows.push_back(detail::audit_one(ck.model, data, ids[i], s));
        });
    }
    if (ckpts.size() < 2) {
        res.notice = "correlation omitted: fewer than 2 models";
        return res;
    }
    for (double s : scales) {
        if (s == 1.0) continue;
        std::vector<double> nd, q;
        for (const auto& r : res.rows)
            if (r.scale == s) {
                nd.push_back(-r.delta_network);
                q.push_back(r.ssim);
            }
        res.correlation.emplace_back(s, pearson(nd, q));
    }
    return res;
}

inline void write_audit(const fs::path& out, const AuditResult& r, const std::string& hashes) {
    fs::create_directories(out);
    write_text(out / "equiv_audit.csv", r.summary_csv(hashes));
    write_text(out / "equiv_audit_long.csv", r.long_csv(hashes));
    if (!r.correlation.empty()) write_text(out / "equiv_audit_correlation.csv", r.correlation_csv(hashes));
}

// ---------------------------------------------------------------------------
// Step-size sweep

struct SweepRow {
    Variant variant = Variant::vanilla;
    double eta_init = 0;
    double final_val_ssim = 0;
    double best_val_ssim = 0;
};

struct SweepResult {
    std::vector<SweepRow> rows;

    /// Population std of the final validation SSIM across inits.
    double std_ssim(Variant v) const {
        std::vector<double> x;
        for (const auto& r : rows)
            if (r.variant == v) x.push_back(r.final_val_ssim);
        return stats_of(x).std;
    }

    std::string table_csv(const std::string& hashes) const {
        std::string out = hashes + "variant,eta_init,final_val_ssim,best_val_ssim\n";
        for (const auto& r : rows)
            out += to_string(r.variant) + "," + EvalReport::fmt(r.eta_init) + "," + EvalReport::fmt(r.final_val_ssim) + "," +
                   EvalReport::fmt(r.best_val_ssim) + "\n";
        return out;
    }
    std::string summary_csv(const std::string& hashes) const {
        std::string out = hashes + "variant,std_final_val_ssim\n";
        for (Variant v : {Variant::vanilla, Variant::scale_eq}) out += to_string(v) + "," + EvalReport::fmt(std_ssim(v)) + "\n";
        return out;
    }
};

inline std::string eta_tag(double eta) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g", eta);
    return buf;
}

/// Config of one sweep cell: the base config with variant and eta init set.
inline ExperimentConfig sweep_config(const ExperimentConfig& base, Variant v, double eta) {
    ExperimentConfig c = base;
    c.model.variant = v;
    c.model.eta_init = eta == 0.0 ? EtaInit::zero : EtaInit::value;
    if (eta != 0.0) c.model.eta_value = eta;
    c.name = base.name + "_" + to_string(v) + "_eta" + eta_tag(eta);
    return c;
}

/// One training run per (variant, eta init) under `out`/<variant>_eta<eta>,
/// plus sweep.csv and sweep_summary.csv.
inline SweepResult step_size_sweep(const ExperimentConfig& base, const std::vector<double>& inits, const fs::path& out,
                                   std::ostream* progress = nullptr) {
    if (inits.empty()) throw ConfigError("sweep-eta needs at least one eta init");
    SweepResult res;
    for (Variant v : {Variant::vanilla, Variant::scale_eq})
        for (double eta : inits) {
            const auto c = sweep_config(base, v, eta);
            if (progress) *progress << "sweep: " << c.name << "\n";
            TrainOptions o;
            o.progress = progress;
            const auto r = train_any(c, out / (to_string(v) + "_eta" + eta_tag(eta)), o);
            res.rows.push_back({v, eta, r.log.rows.back().val_ssim, r.best_val_ssim});
        }
    fs::create_directories(out);
    const std::string hashes = hash_line(config_hash(base), data_hash(base));
    write_text(out / "sweep.csv", res.table_csv(hashes));
    write_text(out / "sweep_summary.csv", res.summary_csv(hashes));
    return res;
}

} // namespace equirecon
