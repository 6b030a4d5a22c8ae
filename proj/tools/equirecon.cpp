// equirecon: command-line front end for data generation, training,
// evaluation, equivariance audits, step-size sweeps and the l1 reference.
//
// Exit codes: 0 ok, 2 config error, 3 data or parse error, 4 numeric failure.

#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include <equirecon/harness.hpp>

using namespace equirecon;

namespace {

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<double> parse_numbers(const std::string& s, const char* what) {
    std::vector<double> out;
    for (const auto& t : split_list(s)) {
        std::size_t used = 0;
        double v = 0;
        try {
            v = std::stod(t, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != t.size()) throw ConfigError(std::string(what) + ": '" + t + "' is not a number");
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError(std::string(what) + " is empty");
    return out;
}

void print_metrics(const ComplexTensor<double>& x, const ComplexTensor<double>& target) {
    std::cout << "ssim " << EvalReport::fmt(ssim_magnitude(x, target)) << "\n";
    std::cout << "cpsnr_db " << EvalReport::fmt(cpsnr_db(x, target)) << "\n";
}

} // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"Scale-equivariant unrolled MRI reconstruction"};
    app.require_subcommand(1);

    std::string config_path, out, ckpt, sample, splits = "test,test_scaled", data_root, ckpts, scales, inits = "0,0.05,0.2";
    std::string audit_split = "val", names;
    std::size_t h = 64, w = 64, calib = 8, iters = 200, max_steps = 0;
    double accel = 4, lambda = 1e-3, step = 0.5;
    std::uint64_t seed = 0;
    bool identity = false, force = false, dry_run = false, quiet = false;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset root from a config");
    gen->add_option("--config", config_path, "Experiment config (JSON)")->required();
    gen->add_option("--out", out, "Dataset root to write")->required();

    auto* mask = app.add_subcommand("mask-gen", "Write a variable-density Poisson-disc mask");
    mask->set_help_flag("--help", "Print this help message and exit");  // -h would clash with --h
    mask->add_option("--h", h, "Rows")->capture_default_str();
    mask->add_option("--w", w, "Columns")->capture_default_str();
    mask->add_option("--accel", accel, "Target acceleration")->capture_default_str();
    mask->add_option("--calib", calib, "Fully sampled calibration square side")->capture_default_str();
    mask->add_option("--seed", seed, "Random seed")->capture_default_str();
    mask->add_option("--out", out, "Output .etns")->required();

    auto* tr = app.add_subcommand("train", "Train a model");
    tr->add_option("--config", config_path, "Experiment config (JSON)")->required();
    tr->add_option("--out", out, "Run directory")->required();
    tr->add_flag("--dry-run", dry_run, "Validate, then take a single optimizer step");
    tr->add_option("--max-steps", max_steps, "Stop after this many optimizer steps");
    tr->add_flag("--quiet", quiet, "No per-epoch progress");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    ev->add_option("--ckpt", ckpt, "Checkpoint or run directory")->required();
    ev->add_option("--split", splits, "Comma-separated splits")->capture_default_str();
    ev->add_option("--data", data_root, "Dataset root overriding the checkpoint's data source");
    ev->add_option("--out", out, "Report directory (default: the checkpoint directory)");
    ev->add_flag("--identity", identity, "Score the ground truth against itself");

    auto* rc = app.add_subcommand("recon", "Reconstruct one sample directory");
    rc->add_option("--ckpt", ckpt, "Checkpoint or run directory")->required();
    rc->add_option("--sample", sample, "Sample directory")->required();
    rc->add_option("--out", out, "Output .etns (complex)")->required();

    auto* au = app.add_subcommand("equiv-audit", "Measure scale-equivariance error of trained models");
    au->add_option("--ckpts", ckpts, "Comma-separated checkpoints")->required();
    au->add_option("--names", names, "Comma-separated model names (default: checkpoint paths)");
    au->add_option("--scales", scales, "Comma-separated scales")->required();
    au->add_option("--split", audit_split, "Split to audit")->capture_default_str();
    au->add_option("--out", out, "Output directory")->capture_default_str();
    au->add_flag("--force", force, "Allow checkpoints trained on different data");

    auto* sw = app.add_subcommand("sweep-eta", "Step-size initialization sensitivity sweep");
    sw->add_option("--config", config_path, "Base experiment config (JSON)")->required();
    sw->add_option("--inits", inits, "Comma-separated eta inits")->capture_default_str();
    sw->add_option("--out", out, "Sweep directory")->required();

    auto* pg = app.add_subcommand("pgd", "Classical l1 proximal gradient reconstruction");
    pg->add_option("--sample", sample, "Sample directory")->required();
    pg->add_option("--lambda", lambda, "l1 weight")->capture_default_str();
    pg->add_option("--iters", iters, "Iterations")->capture_default_str();
    pg->add_option("--step", step, "Step size")->capture_default_str();
    pg->add_option("--out", out, "Output .etns (complex)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*gen) {
            const auto cfg = load_config(config_path);
            if (!cfg.data_root.empty()) throw ConfigError("config points at an existing data_root; nothing to generate");
            save_dataset(out, cfg.data, generate_dataset(cfg.data));
            std::cout << "wrote " << out << " (data_hash " << data_hash(cfg) << ")\n";
        } else if (*mask) {
            const auto m = poisson_disc_mask(h, w, accel, {calib, calib}, seed);
            etns::save(out, m.grid);
            std::cout << "acceleration " << EvalReport::fmt(m.acceleration) << " samples " << m.count() << "\n";
        } else if (*tr) {
            const auto cfg = load_config(config_path);
            TrainOptions o;
            o.progress = quiet ? nullptr : &std::cerr;
            o.max_steps = dry_run ? 1 : max_steps;
            std::cout << "config_hash " << config_hash(cfg) << " parameters " << parameter_count(resolved_spec(cfg)) << " channels "
                      << resolved_spec(cfg).channels << "\n";
            const auto r = train_any(cfg, out, o);
            std::cout << "steps " << r.steps << " final_loss " << EvalReport::fmt(r.log.rows.back().train_loss) << "\n";
            if (r.best_epoch) std::cout << "best " << checkpoint_name(r.best_epoch) << " val_ssim " << EvalReport::fmt(r.best_val_ssim) << "\n";
        } else if (*ev) {
            std::vector<Split> sp;
            for (const auto& s : split_list(splits)) sp.push_back(parse_split(s));
            if (sp.empty()) throw ConfigError("--split is empty");
            const fs::path dir = out.empty() ? resolve_checkpoint_dir(ckpt) : fs::path(out);
            for (const auto& r : evaluate_checkpoint(ckpt, sp, dir, data_root, identity)) std::cout << r.to_text() << "\n";
        } else if (*rc) {
            const auto s = load_external_slice(sample);
            const auto cfg = config_from_json(read_checkpoint_meta(ckpt).at("config"));
            const auto x = with_precision(cfg.precision, [&]<typename T>() {
                return unrolled_forward(s.template cast<T>(), load_checkpoint<T>(ckpt).model).image.template cast<double>();
            });
            etns::save(out, x);
            print_metrics(x, s.target);
        } else if (*au) {
            std::vector<fs::path> paths;
            for (const auto& c : split_list(ckpts)) paths.push_back(c);
            const auto ids = split_list(names);
            if (!ids.empty() && ids.size() != paths.size()) throw ConfigError("--names must name every checkpoint");
            const auto res = equiv_audit(paths, parse_numbers(scales, "--scales"), parse_split(audit_split), force, ids);
            const auto cfg = config_from_json(read_checkpoint_meta(paths[0]).at("config"));
            const fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
            write_audit(dir, res, hash_line(config_hash(cfg), data_hash(cfg)));
            std::cout << res.summary_csv("");
            for (const auto& [s, r] : res.correlation) std::cout << "pearson(-delta, ssim) at scale " << EvalReport::fmt(s) << ": " << EvalReport::fmt(r) << "\n";
            if (!res.notice.empty()) std::cout << "notice: " << res.notice << "\n";
        } else if (*sw) {
            const auto cfg = load_config(config_path);
            const auto res = step_size_sweep(cfg, parse_numbers(inits, "--inits"), out, &std::cerr);
            std::cout << res.table_csv("") << res.summary_csv("");
        } else if (*pg) {
            const auto s = load_external_slice(sample);
            const auto r = pgd_l1_reference(s, lambda, iters, step);
            if (!out.empty()) etns::save(out, r.recon.image);
            std::cout << "objective " << EvalReport::fmt(r.initial_objective) << " -> " << EvalReport::fmt(r.objective.back()) << "\n";
            print_metrics(r.recon.image, s.target);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
