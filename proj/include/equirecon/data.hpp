#pragma once

// Synthetic datasets: ellipse phantoms, volume-wise splits, scaled test
// variants, and the on-disk sample/dataset layout.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "etns.hpp"
#include "mri_forward.hpp"
#include "resample.hpp"

namespace equirecon {

enum class Split { train, val, test, test_scaled };

inline const std::array<Split, 4> kAllSplits{Split::train, Split::val, Split::test, Split::test_scaled};

inline std::string to_string(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::test_scaled: return "test_scaled";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    for (Split x : kAllSplits)
        if (to_string(x) == s) return x;
    throw ConfigError("unknown split '" + s + "' (expected train, val, test or test_scaled)");
}

/// Random overlapping rotated ellipses with complex amplitudes, smoothed by a
/// 5x5 Gaussian (sigma 1) and normalized to peak magnitude 1. Ellipses stay in
/// the central 70% of the field of view.
inline ComplexTensor<double> random_ellipse_phantom(std::size_t H, std::size_t W, std::size_t n_ellipses, std::uint64_t seed) {
    if (n_ellipses < 1) throw DomainError("n_ellipses must be >= 1");
    if (H == 0 || W == 0) throw DimensionError("phantom grid must be non-empty");
    std::mt19937_64 rng(seed);
    auto u = [&](double lo, double hi) { return lo + (hi - lo) * detail::uniform01(rng); };
    ComplexTensor<double> raw({H, W});
    const double cy = (double(H) - 1) / 2, cx = (double(W) - 1) / 2;
    for (std::size_t e = 0; e < n_ellipses; ++e) {
        // The first ellipse is a large body outline so every phantom has support.
        const bool body = e == 0;
        const double ry = body ? u(0.28, 0.34) * double(H) : u(0.04, 0.16) * double(H);
        const double rx = body ? u(0.24, 0.32) * double(W) : u(0.04, 0.16) * double(W);
        const double oy = body ? 0.0 : u(-0.2, 0.2) * double(H);
        const double ox = body ? 0.0 : u(-0.2, 0.2) * double(W);
        const double th = u(0.0, std::numbers::pi);
        const double amp = body ? u(0.6, 1.0) : u(-0.4, 0.6);
        const double ph = u(-std::numbers::pi / 4, std::numbers::pi / 4);
        const double c = std::cos(th), s = std::sin(th);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const double dy = double(y) - cy - oy, dx = double(x) - cx - ox;
                const double a = (c * dx + s * dy) / rx, b = (-s * dx + c * dy) / ry;
                if (a * a + b * b <= 1.0) {
                    raw.re[y * W + x] += amp * std::cos(ph);
                    raw.im[y * W + x] += amp * std::sin(ph);
                }
            }
    }
    double g[5], gs = 0;
    for (int i = 0; i < 5; ++i) gs += g[i] = std::exp(-double((i - 2) * (i - 2)) / 2.0);
    for (double& v : g) v /= gs;
    ComplexTensor<double> tmp({H, W}), out({H, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (int t = -2; t <= 2; ++t) {
                const long xx = long(x) + t;
                if (xx < 0 || xx >= long(W)) continue;
                tmp.re[y * W + x] += g[t + 2] * raw.re[y * W + std::size_t(xx)];
                tmp.im[y * W + x] += g[t + 2] * raw.im[y * W + std::size_t(xx)];
            }
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (int t = -2; t <= 2; ++t) {
                const long yy = long(y) + t;
                if (yy < 0 || yy >= long(H)) continue;
                out.re[y * W + x] += g[t + 2] * tmp.re[std::size_t(yy) * W + x];
                out.im[y * W + x] += g[t + 2] * tmp.im[std::size_t(yy) * W + x];
            }
    double peak = 0;
    for (std::size_t i = 0; i < out.size(); ++i) peak = std::max(peak, std::hypot(out.re[i], out.im[i]));
    if (!(peak > 0)) throw GenerationError("phantom is identically zero", 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.re[i] /= peak;
        out.im[i] /= peak;
    }
    return out;
}

/// Generator settings for a synthetic dataset.
struct DataConfig {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t coils = 4;
    double acceleration = 4.0;
    std::pair<std::size_t, std::size_t> calib{8, 8};
    double noise_sigma = 0.0;
    std::size_t volumes = 19;
    std::size_t slices_per_volume = 20;
    std::array<std::size_t, 3> split{14, 2, 3};  // train / val / test volumes
    bool limited = false;
    std::size_t n_ellipses = 10;
    double map_smoothness = 0.3;
    double test_scale = 0.9;
    std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const DataConfig& c) {
    return {{"height", c.height},
            {"width", c.width},
            {"coils", c.coils},
            {"acceleration", c.acceleration},
            {"calib", {c.calib.first, c.calib.second}},
            {"noise_sigma", c.noise_sigma},
            {"volumes", c.volumes},
            {"slices_per_volume", c.slices_per_volume},
            {"split", c.split},
            {"limited", c.limited},
            {"n_ellipses", c.n_ellipses},
            {"map_smoothness", c.map_smoothness},
            {"test_scale", c.test_scale},
            {"seed", c.seed}};
}

struct SliceRef {
    std::size_t volume = 0;
    std::size_t slice = 0;
    std::string id;
};

inline std::string slice_id(std::size_t volume, std::size_t slice) {
    return "v" + std::to_string(volume) + "_s" + std::to_string(slice);
}

inline std::string scaled_id(const std::string& id) { return id + "_scaled"; }

/// Volume-wise partition. Volumes are shuffled with the seed and dealt out in
/// the ratio order train, val, test; test_scaled mirrors test.
struct SplitPlan {
    std::array<std::vector<SliceRef>, 4> slices;
    std::array<std::vector<std::size_t>, 3> volumes;

    const std::vector<SliceRef>& operator[](Split s) const { return slices[std::size_t(s)]; }
};

inline SplitPlan make_splits(std::size_t n_volumes, std::size_t slices_per_volume, std::array<std::size_t, 3> ratios,
                             std::uint64_t seed, bool limited) {
    const std::size_t total = ratios[0] + ratios[1] + ratios[2];
    if (total != n_volumes)
        throw ConfigError("split ratios " + std::to_string(ratios[0]) + "/" + std::to_string(ratios[1]) + "/" +
                          std::to_string(ratios[2]) + " do not add up to " + std::to_string(n_volumes) + " volumes");
    if (ratios[0] < 1 || ratios[1] < 1 || ratios[2] < 1) throw ConfigError("every split needs at least one volume");
    if (slices_per_volume < 1) throw ConfigError("slices_per_volume must be >= 1");
    std::vector<std::size_t> order(n_volumes);
    for (std::size_t i = 0; i < n_volumes; ++i) order[i] = i;
    std::mt19937_64 rng(mix_seed(seed, 0x5b1175));
    for (std::size_t i = n_volumes; i > 1; --i) std::swap(order[i - 1], order[detail::uniform_index(rng, i)]);
    SplitPlan p;
    std::size_t at = 0;
    for (std::size_t k = 0; k < 3; ++k) {
        p.volumes[k].assign(order.begin() + long(at), order.begin() + long(at + ratios[k]));
        std::sort(p.volumes[k].begin(), p.volumes[k].end());
        at += ratios[k];
    }
    if (limited) p.volumes[0].resize(1);
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t v : p.volumes[k])
            for (std::size_t s = 0; s < slices_per_volume; ++s) p.slices[k].push_back({v, s, slice_id(v, s)});
    for (const auto& r : p.slices[2]) p.slices[3].push_back({r.volume, r.slice, scaled_id(r.id)});
    return p;
}

/// Scaled copy of a sample: target and every coil map resampled by a, maps
/// re-normalized, k-space regenerated through the forward model with the same
/// mask, noise level and noise seed. a == 1 returns the sample unchanged.
inline KSpaceSample<double> scale_sample(const KSpaceSample<double>& s, double a) {
    if (!(a > 0)) throw DomainError("scale factor must be positive");
    if (a == 1.0) return s;
    SensitivityMaps<double> maps{resample_scale(s.maps.maps, a)};
    normalize_maps(maps);
    auto out = simulate_sample(resample_scale(s.target, a), maps, s.mask, s.noise_sigma, s.seed);
    out.id = s.id;
    return out;
}

template <typename T>
struct Dataset {
    Split split = Split::train;
    std::vector<KSpaceSample<T>> samples;
    std::string provenance;

    template <typename U>
    Dataset<U> cast() const {
        Dataset<U> d{split, {}, provenance};
        for (const auto& s : samples) d.samples.push_back(s.template cast<U>());
        return d;
    }
};

inline Dataset<double> scaled_test_variant(const Dataset<double>& test, double a) {
    Dataset<double> out{Split::test_scaled, {}, test.provenance + " scaled " + std::to_string(a)};
    for (const auto& s : test.samples) {
        auto t = scale_sample(s, a);
        t.id = scaled_id(s.id);
        out.samples.push_back(std::move(t));
    }
    return out;
}

/// One slice of the synthetic corpus. Coil maps belong to the volume; phantom,
/// mask and noise are per slice. Every stream is derived from the master seed.
inline KSpaceSample<double> generate_slice(const DataConfig& c, std::size_t volume, std::size_t slice) {
    const std::uint64_t vseed = mix_seed(c.seed, 1000 + volume);
    const std::uint64_t sseed = mix_seed(vseed, 1 + slice);
    auto maps = synth_sensitivity_maps(c.height, c.width, c.coils, c.map_smoothness, mix_seed(vseed, 0));
    auto target = random_ellipse_phantom(c.height, c.width, c.n_ellipses, mix_seed(sseed, 1));
    auto mask = poisson_disc_mask(c.height, c.width, c.acceleration, c.calib, mix_seed(sseed, 2));
    auto s = simulate_sample(target, maps, mask, c.noise_sigma, mix_seed(sseed, 3));
    s.id = slice_id(volume, slice);
    return s;
}

inline std::array<Dataset<double>, 4> generate_dataset(const DataConfig& c) {
    const auto plan = make_splits(c.volumes, c.slices_per_volume, c.split, c.seed, c.limited);
    const std::string prov = "synthetic seed " + std::to_string(c.seed);
    std::array<Dataset<double>, 4> out;
    for (std::size_t k = 0; k < 3; ++k) {
        out[k].split = kAllSplits[k];
        out[k].provenance = prov;
        for (const auto& r : plan.slices[k]) out[k].samples.push_back(generate_slice(c, r.volume, r.slice));
    }
    out[3] = scaled_test_variant(out[2], c.test_scale);
    return out;
}

/// Only the requested split (test_scaled implies generating test first).
/// `limit` > 0 keeps just the first `limit` slices of the split.
inline Dataset<double> generate_split(const DataConfig& c, Split split, std::size_t limit = 0) {
    const auto plan = make_splits(c.volumes, c.slices_per_volume, c.split, c.seed, c.limited);
    const std::size_t k = split == Split::test_scaled ? 2 : std::size_t(split);
    Dataset<double> d{kAllSplits[k], {}, "synthetic seed " + std::to_string(c.seed)};
    for (const auto& r : plan.slices[k]) {
        if (limit && d.samples.size() == limit) break;
        d.samples.push_back(generate_slice(c, r.volume, r.slice));
    }
    return split == Split::test_scaled ? scaled_test_variant(d, c.test_scale) : d;
}

// ---------------------------------------------------------------------------
// On-disk layout

namespace fs = std::filesystem;

inline void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw DataError("cannot write " + p.string());
    f << text;
}

inline std::string read_text(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw DataError("cannot read " + p.string());
    return std::string(std::istreambuf_iterator<char>(f), {});
}

inline nlohmann::json parse_json(const std::string& text, const std::string& what) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(what + ": " + e.what(), e.byte);
    }
}

/// Writes {y, maps, mask, target}.etns and meta.json.
inline void save_sample(const fs::path& dir, const KSpaceSample<double>& s) {
    fs::create_directories(dir);
    etns::save(dir / "y.etns", s.y);
    etns::save(dir / "maps.etns", s.maps.maps);
    etns::save(dir / "mask.etns", s.mask.grid);
    etns::save(dir / "target.etns", s.target);
    nlohmann::json meta = {{"id", s.id},
                           {"seed", s.seed},
                           {"mask_seed", s.mask.seed},
                           {"acceleration", s.mask.acceleration},
                           {"calib", {s.mask.calib.first, s.mask.calib.second}},
                           {"base_radius", s.mask.base_radius},
                           {"noise_sigma", s.noise_sigma}};
    write_text(dir / "meta.json", meta.dump(2) + "\n");
}

/// Violated sample invariants (shapes, mask binarity, y zero off the mask,
/// finiteness); empty when the sample is valid. Shape problems short-circuit
/// the content checks.
inline std::vector<std::string> sample_invariant_violations(const KSpaceSample<double>& s) {
    std::vector<std::string> problems;
    const Shape& ts = s.target.shape();
    if (ts.size() != 2) problems.push_back("target must be H x W, got " + shape_str(ts));
    if (s.maps.maps.shape().size() != 3 || (ts.size() == 2 && (s.maps.maps.shape()[1] != ts[0] || s.maps.maps.shape()[2] != ts[1])))
        problems.push_back("maps shape " + shape_str(s.maps.maps.shape()) + " does not match target " + shape_str(ts));
    if (s.y.shape() != s.maps.maps.shape()) problems.push_back("y shape " + shape_str(s.y.shape()) + " does not match maps");
    if (ts.size() == 2 && s.mask.grid.shape != ts) problems.push_back("mask shape does not match target");
    if (!problems.empty()) return problems;

    for (double v : s.mask.grid.data)
        if (v != 0.0 && v != 1.0) {
            problems.push_back("mask binarity (entry " + std::to_string(v) + ")");
            break;
        }
    const std::size_t HW = s.mask.grid.size();
    for (std::size_t i = 0; i < s.y.size(); ++i)
        if (s.mask.grid[i % HW] == 0.0 && (s.y.re[i] != 0.0 || s.y.im[i] != 0.0)) {
            problems.push_back("y nonzero at a masked-out location");
            break;
        }
    if (!s.y.all_finite() || !s.maps.maps.all_finite() || !s.target.all_finite()) problems.push_back("non-finite values");
    return problems;
}

/// Loads and validates a sample directory. Map normalization off by more than
/// 1e-3 is reported through `warnings` rather than rejected.
inline KSpaceSample<double> load_external_slice(const fs::path& dir, std::vector<std::string>* warnings = nullptr) {
    if (!fs::is_directory(dir)) throw DataError("sample directory not found: " + dir.string());
    KSpaceSample<double> s;
    auto load = [&](const char* name) {
        try {
            return etns::load(dir / name);
        } catch (const ParseError& e) {
            throw ParseError(std::string(name) + ": " + e.message(), e.offset());
        }
    };
    s.y = load("y.etns").to_complex<double>();
    s.maps.maps = load("maps.etns").to_complex<double>();
    s.mask.grid = load("mask.etns").to_tensor<double>();
    s.target = load("target.etns").to_complex<double>();
    s.id = dir.filename().string();
    if (fs::exists(dir / "meta.json")) {
        auto meta = parse_json(read_text(dir / "meta.json"), (dir / "meta.json").string());
        s.id = meta.value("id", s.id);
        s.seed = meta.value("seed", std::uint64_t(0));
        s.mask.seed = meta.value("mask_seed", std::uint64_t(0));
        s.noise_sigma = meta.value("noise_sigma", 0.0);
        s.mask.base_radius = meta.value("base_radius", 0.0);
        if (meta.contains("calib")) s.mask.calib = {meta["calib"][0].get<std::size_t>(), meta["calib"][1].get<std::size_t>()};
    }

    auto problems = sample_invariant_violations(s);
    if (!problems.empty()) {
        std::string msg = "invalid sample " + dir.string() + ":";
        for (const auto& p : problems) msg += " " + p + ";";
        throw ValidationError(msg);
    }
    const std::size_t HW = s.mask.grid.size(), C = s.maps.ncoils();
    double worst = 0;
    for (std::size_t p = 0; p < HW; ++p) {
        double ss = 0;
        for (std::size_t c = 0; c < C; ++c) ss += std::norm(std::complex<double>(s.maps.maps.re[c * HW + p], s.maps.maps.im[c * HW + p]));
        if (ss > 0) worst = std::max(worst, std::abs(ss - 1.0));
    }
    if (worst > 1e-3 && warnings) warnings->push_back("coil maps deviate from unit sum-of-squares by " + std::to_string(worst));
    s.mask.recount();
    return s;
}

/// root/{train,val,test,test_scaled}/<id>/ plus root/manifest.json.
inline void save_dataset(const fs::path& root, const DataConfig& c, const std::array<Dataset<double>, 4>& splits) {
    nlohmann::json manifest = {{"generator", to_json(c)}, {"master_seed", c.seed}};
    for (const auto& d : splits) {
        auto& ids = manifest["splits"][to_string(d.split)] = nlohmann::json::array();
        for (const auto& s : d.samples) {
            save_sample(root / to_string(d.split) / s.id, s);
            ids.push_back(s.id);
        }
    }
    write_text(root / "manifest.json", manifest.dump(2) + "\n");
}

inline Dataset<double> load_dataset(const fs::path& root, Split split) {
    auto manifest = parse_json(read_text(root / "manifest.json"), (root / "manifest.json").string());
    const std::string name = to_string(split);
    if (!manifest.contains("splits") || !manifest["splits"].contains(name))
        throw DataError("manifest has no split '" + name + "'");
    Dataset<double> d{split, {}, root.string()};
    for (const auto& id : manifest["splits"][name]) {
        std::vector<std::string> warnings;
        d.samples.push_back(load_external_slice(root / name / id.get<std::string>(), &warnings));
        for (const auto& w : warnings) std::cerr << "warning: " << id.get<std::string>() << ": " << w << "\n";
    }
    return d;
}

} // namespace equirecon
