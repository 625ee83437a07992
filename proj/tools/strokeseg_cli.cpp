// strokeseg: corpus generation, preprocessing, training, evaluation,
// prediction and gradient checks behind one subcommand-style binary.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "strokeseg/config.hpp"
#include "strokeseg/gradcheck.hpp"

using namespace strokeseg;
namespace fs = std::filesystem;

namespace {

struct Globals {
    std::string config;
    std::string preset;
    std::optional<std::uint64_t> seed;
    int threads = 1;
    std::string out;
    std::string log_level = "info";
};

RunConfig effective_config(const Globals& g)
{
    RunConfig c = g.preset.empty() ? RunConfig{} : preset(g.preset);
    if (!g.config.empty()) c = load_run_config(g.config, c);
    if (g.seed) c.seed = *g.seed;
    return c;
}

fs::path require_out(const Globals& g, const char* cmd)
{
    if (g.out.empty()) throw CLI::ValidationError("--out", std::string(cmd) + " requires --out");
    return g.out;
}

std::vector<double> parse_overlaps(const std::string& s)
{
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t pos = 0;
            const double v = std::stod(item, &pos);
            if (pos != item.size()) throw std::invalid_argument(item);
            out.push_back(v / 100.0);
        } catch (const std::exception&) {
            throw ConfigError("--overlaps: cannot parse '" + item + "' as a percentage");
        }
    }
    if (out.empty()) throw ConfigError("--overlaps: empty list");
    return out;
}

// ---------------------------------------------------------------------------

int cmd_phantom(const Globals& g, std::optional<int> n)
{
    RunConfig c = effective_config(g);
    if (n) c.phantom_count = *n;
    c.phantom.seed = c.seed;
    const fs::path out = require_out(g, "phantom");
    c.paths.corpus = out;
    c.validate();
    const Manifest m = generate_corpus(c.phantom_count, c.phantom, out);
    write_effective_config(c, out);
    std::printf("phantom: wrote %zu volume/mask pairs and %s\n", m.entries.size(),
                (out / "manifest.csv").string().c_str());
    return 0;
}

int cmd_preprocess(const Globals& g, const std::string& manifest_arg, std::optional<bool> standardize)
{
    RunConfig c = effective_config(g);
    if (standardize) c.preprocess.standardize_first = *standardize;
    const fs::path out = require_out(g, "preprocess");
    c.paths.processed = out;
    c.validate();
    const fs::path manifest_path = manifest_arg.empty() ? c.paths.corpus / "manifest.csv" : fs::path(manifest_arg);
    const Manifest in = load_manifest(manifest_path);
    fs::create_directories(out);
    Manifest result;
    int failures = 0;
    for (const auto& e : in.entries) {
        try {
            const Volume vol = load_volume(e.volume_path);
            const Mask mask = load_mask(e.mask_path);
            auto [pv, pm, box] = run_pipeline(vol, mask, c.preprocess);
            const auto vpath = out / (e.patient_id + "_ct");
            const auto mpath = out / (e.patient_id + "_mask");
            save_volume(pv, vpath);
            save_mask(pm, mpath);
            result.entries.push_back({e.patient_id, vpath, mpath, e.fold});
            log_event(LogLevel::Info, "preprocessed",
                      {{"patient", e.patient_id},
                       {"crop_lo", std::to_string(box.lo[0]) + "," + std::to_string(box.lo[1]) + "," +
                                       std::to_string(box.lo[2])},
                       {"crop_hi", std::to_string(box.hi[0]) + "," + std::to_string(box.hi[1]) + "," +
                                       std::to_string(box.hi[2])}});
        } catch (const std::exception& ex) {
            ++failures;
            log_event(LogLevel::Error, "preprocess_failed", {{"patient", e.patient_id}, {"error", ex.what()}});
        }
    }
    save_manifest(result, out / "manifest.csv");
    write_effective_config(c, out);
    std::printf("preprocess: %zu processed, %d failed, standardize_first=%s\n", result.entries.size(), failures,
                c.preprocess.standardize_first ? "true" : "false");
    return failures ? 1 : 0;
}

struct TrainArgs {
    std::string manifest;
    int fold = 0;
    bool all_folds = false;
    std::string resume;
    std::optional<std::int64_t> iterations;
    std::optional<std::int64_t> stop_after;
};

int cmd_train(const Globals& g, const TrainArgs& a)
{
    RunConfig c = effective_config(g);
    if (a.iterations) c.optim.total_iterations = *a.iterations;
    const fs::path out = require_out(g, "train");
    c.paths.runs = out;
    c.validate();
    const fs::path manifest_path = a.manifest.empty() ? c.paths.processed / "manifest.csv" : fs::path(a.manifest);
    const Manifest m = load_manifest(manifest_path);
    if (a.all_folds && !a.resume.empty()) throw ConfigError("--resume applies to a single fold");
    std::vector<int> folds;
    if (a.all_folds) {
        int k = 0;
        for (const auto& e : m.entries)
            if (e.fold) k = std::max(k, *e.fold + 1);
        for (int f = 0; f < k; ++f) folds.push_back(f);
    } else {
        folds.push_back(a.fold);
    }
    write_effective_config(c, out);
    for (int f : folds) {
        TrainConfig tc = train_config(c);
        if (!a.resume.empty()) tc.resume = fs::path(a.resume);
        tc.stop_after = a.stop_after;
        const fs::path dir = out / ("fold_" + std::to_string(f));
        const TrainResult r = train_fold(m, f, tc, dir);
        const double last = r.log.empty() ? 0.0 : r.log.back().total;
        std::printf("train: fold %d, %zu iterations, final loss %.6g, checkpoint %s\n", f, r.log.size(), last,
                    r.final_checkpoint.string().c_str());
    }
    return 0;
}

struct EvalArgs {
    std::string manifest;
    std::string checkpoint;
    int fold = 0;
    std::string overlaps;
    bool save_predictions = false;
    bool overlay = false;
};

int cmd_eval(const Globals& g, const EvalArgs& a)
{
    RunConfig c = effective_config(g);
    const fs::path out = require_out(g, "eval");
    c.validate();
    const fs::path manifest_path = a.manifest.empty() ? c.paths.processed / "manifest.csv" : fs::path(a.manifest);
    const fs::path ckpt =
        a.checkpoint.empty() ? c.paths.runs / ("fold_" + std::to_string(a.fold)) / "final.svck" : fs::path(a.checkpoint);
    const Manifest m = load_manifest(manifest_path);
    const auto loaded = load_checkpoint<float>(ckpt);
    fs::create_directories(out);
    write_effective_config(c, out);
    EvalOptions opts;
    if (a.save_predictions) opts.prediction_dir = out / "predictions";
    if (a.overlay) opts.overlay_dir = out / "overlays";

    if (!a.overlaps.empty()) {
        const auto ovs = parse_overlaps(a.overlaps);
        const auto rows = overlap_sweep(loaded.model, m, a.fold, ovs, opts);
        write_overlap_csv(rows, out / "overlap_table.csv");
        std::printf("overlap  time_s  patches  dsc            sensitivity    specificity      precision\n");
        for (const auto& r : rows)
            std::printf("%5.0f%%  %6.2f  %7.0f  %.3f+-%.3f  %.3f+-%.3f  %.4f+-%.4f  %.3f+-%.3f\n", r.overlap * 100,
                        r.time_per_patient_s, r.patches_per_patient, r.mean.dsc, r.std.dsc, r.mean.sensitivity,
                        r.std.sensitivity, r.mean.specificity, r.std.specificity, r.mean.precision, r.std.precision);
        return 0;
    }
    GridSpec spec = c.grid;
    spec.patch_size = loaded.model.config().patch_size;
    const MetricReport rep = evaluate_fold(loaded.model, m, a.fold, spec, opts);
    write_report_csv(rep, out / "metrics.csv");
    write_report_json(rep, out / "summary.json");
    std::printf("eval: fold %d, %zu patients, DSC %.3f+-%.3f, sensitivity %.3f+-%.3f, specificity %.4f+-%.4f, "
                "precision %.3f+-%.3f\n",
                a.fold, rep.rows.size(), rep.mean.dsc, rep.std.dsc, rep.mean.sensitivity, rep.std.sensitivity,
                rep.mean.specificity, rep.std.specificity, rep.mean.precision, rep.std.precision);
    return 0;
}

int cmd_predict(const Globals& g, const std::string& checkpoint, const std::string& volume, std::optional<double> ov)
{
    RunConfig c = effective_config(g);
    if (ov) c.grid.overlap = *ov / 100.0;
    const fs::path out = require_out(g, "predict");
    c.validate();
    if (checkpoint.empty() || volume.empty()) throw CLI::ValidationError("predict requires --checkpoint and --volume");
    const auto loaded = load_checkpoint<float>(checkpoint);
    const Volume src = load_volume(volume);
    GridSpec spec = c.grid;
    spec.patch_size = loaded.model.config().patch_size;

    Volume input = src;
    std::optional<CropBox> box;
    if (src.kind == IntensityKind::HU) {
        auto [pv, pm, b] = run_pipeline(src, Mask::zeros(src.dims, src.spacing), c.preprocess);
        input = std::move(pv);
        box = b;
    }
    const ProbabilityVolume prob = sliding_window_predict(loaded.model, input, spec);
    Volume pvol;
    pvol.dims = prob.dims;
    pvol.spacing = prob.spacing;
    pvol.kind = IntensityKind::Normalized;
    pvol.data = prob.prob;
    Mask pred = binarize(prob);
    if (box) {
        pvol = uncrop_volume(pvol, *box, src.dims);
        pred = uncrop_mask(pred, *box, src.dims);
    } else {
        pvol.crop = input.crop;
        pred.crop = input.crop;
    }
    fs::create_directories(out);
    const std::string stem = fs::path(volume).stem().string();
    save_volume(pvol, out / (stem + "_prob"));
    save_mask(pred, out / (stem + "_pred"));
    write_effective_config(c, out);
    std::printf("predict: %lld grid patches in %.2f s, %lld lesion voxels\n", static_cast<long long>(prob.patch_count),
                prob.seconds, static_cast<long long>(pred.count_ones()));
    return 0;
}

int cmd_gradcheck(const Globals& g, const GradcheckOptions& base)
{
    GradcheckOptions opts = base;
    if (g.seed) opts.base_seed = *g.seed;
    const GradcheckReport r = run_gradcheck(opts);
    std::printf("%-26s %14s %10s  %s\n", "case", "max_rel_error", "tolerance", "status");
    for (const auto& res : r.results)
        std::printf("%-26s %14.3e %10.1e  %s\n", res.name.c_str(), res.max_rel_error, res.tolerance,
                    res.passed ? "pass" : "FAIL");
    std::printf("gradcheck (%s, %d seeds): %s in %.1f s\n", opts.f64 ? "f64" : "f32", opts.seeds,
                r.all_passed() ? "all passed" : "FAILED", r.seconds);
    if (!g.out.empty()) {
        RunConfig c = effective_config(g);
        write_effective_config(c, g.out);
    }
    return r.all_passed() ? 0 : 1;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Volumetric stroke-lesion segmentation toolkit"};
    app.set_version_flag("--version", std::string(tool_version()));
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
    app.add_option("--preset", g.preset, "Base preset before --config: desk or paper")
        ->check(CLI::IsMember({"desk", "paper"}));
    app.add_option("--seed", g.seed, "Master seed");
    app.add_option("--threads", g.threads, "Worker thread cap")->check(CLI::PositiveNumber);
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--log-level", g.log_level, "debug, info, warn or error")
        ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

    auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom corpus");
    std::optional<int> n;
    phantom->add_option("--n", n, "Number of patients")->check(CLI::PositiveNumber);

    auto* prep = app.add_subcommand("preprocess", "Window, skull-strip, normalize and crop a corpus");
    std::string prep_manifest;
    bool no_std = false, with_std = false;
    prep->add_option("--manifest", prep_manifest, "Input manifest (default <paths.corpus>/manifest.csv)");
    auto* no_std_flag = prep->add_flag("--no-standardize", no_std, "Skip z-score standardization");
    prep->add_flag("--standardize", with_std, "Z-score brain voxels before min-max")->excludes(no_std_flag);

    auto* train = app.add_subcommand("train", "Train one fold or all folds");
    TrainArgs ta;
    train->add_option("--manifest", ta.manifest, "Preprocessed manifest (default <paths.processed>/manifest.csv)");
    train->add_option("--fold", ta.fold, "Held-out fold")->check(CLI::Range(0, 4));
    train->add_flag("--all-folds", ta.all_folds, "Train every fold in turn");
    train->add_option("--resume", ta.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
    train->add_option("--iterations", ta.iterations, "Override optim.total_iterations")->check(CLI::PositiveNumber);
    train->add_option("--stop-after", ta.stop_after, "Stop after this many iterations")->check(CLI::PositiveNumber);
    train->add_option("--preset", g.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a held-out fold");
    EvalArgs ea;
    eval->add_option("--manifest", ea.manifest, "Preprocessed manifest");
    eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint (default <paths.runs>/fold_<k>/final.svck)");
    eval->add_option("--fold", ea.fold, "Fold to evaluate (-1 for all patients)")->check(CLI::Range(-1, 4));
    eval->add_option("--overlaps", ea.overlaps, "Comma-separated overlap percentages, e.g. 25,50,75");
    eval->add_flag("--save-predictions", ea.save_predictions, "Write probability and mask VOLs");
    eval->add_flag("--overlay", ea.overlay, "Write PNG overlays of the most lesioned slice");

    auto* predict = app.add_subcommand("predict", "Segment one volume");
    std::string pred_ckpt, pred_vol;
    std::optional<double> pred_overlap;
    predict->add_option("--checkpoint", pred_ckpt, "Checkpoint")->required();
    predict->add_option("--volume", pred_vol, "VOL image (HU images are preprocessed first)")->required();
    predict->add_option("--overlap", pred_overlap, "Grid overlap in percent")->check(CLI::Range(0.0, 99.0));

    auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    GradcheckOptions go;
    std::string inject;
    grad->add_flag("--f64", go.f64, "Check the double-precision engine (tolerance 1e-6)");
    grad->add_option("--seeds", go.seeds, "Random instances per case")->check(CLI::PositiveNumber);
    grad->add_option("--filter", go.filter, "Run only cases whose name contains this text");
    grad->add_option("--inject-wrong-sign", inject, "Test hook: negate the analytic gradient of a case");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        set_max_threads(g.threads);
        static const std::pair<const char*, LogLevel> levels[] = {
            {"debug", LogLevel::Debug}, {"info", LogLevel::Info}, {"warn", LogLevel::Warn}, {"error", LogLevel::Error}};
        for (const auto& [name, lvl] : levels)
            if (g.log_level == name) set_log_threshold(lvl);

        if (*phantom) return cmd_phantom(g, n);
        if (*prep) {
            std::optional<bool> s;
            if (no_std) s = false;
            if (with_std) s = true;
            return cmd_preprocess(g, prep_manifest, s);
        }
        if (*train) return cmd_train(g, ta);
        if (*eval) return cmd_eval(g, ea);
        if (*predict) return cmd_predict(g, pred_ckpt, pred_vol, pred_overlap);
        if (*grad) {
            if (!inject.empty()) go.inject_wrong_sign = inject;
            return cmd_gradcheck(g, go);
        }
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
