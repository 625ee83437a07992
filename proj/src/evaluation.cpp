#include "strokeseg/evaluation.hpp"

#include <png.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "strokeseg/ops.hpp"
#include "strokeseg/preprocess.hpp"

namespace strokeseg {

using ad::Tensor;

ProbabilityVolume sliding_window_predict(const UNet3D<float>& model, const Volume& vol, const GridSpec& spec,
                                         int batch_size)
{
    spec.validate();
    vol.validate();
    const int P = spec.patch_size;
    if (model.config().patch_size != P)
        throw Error("sliding_window_predict: model patch size " + std::to_string(model.config().patch_size) +
                    " differs from grid patch size " + std::to_string(P));
    if (model.config().in_channels != 1 || model.config().out_channels != 1)
        throw Error("sliding_window_predict: model must map one channel to one channel");
    if (batch_size < 1) throw Error("sliding_window_predict: batch_size must be positive");

    const auto t0 = std::chrono::steady_clock::now();
    Volume padded = vol;
    const Dims3 offset = pad_volume_to_patch(padded, P);
    const Dims3 d = padded.dims;
    const auto origins = grid_patches(d, spec);
    const std::int64_t voxels = static_cast<std::int64_t>(P) * P * P;

    std::vector<float> mean(static_cast<std::size_t>(voxel_count(d)), 0.0f);
    std::vector<std::uint16_t> count(mean.size(), 0);

    // Patches are predicted in parallel groups, then accumulated in grid order.
    const std::int64_t n = static_cast<std::int64_t>(origins.size());
    const std::int64_t group = static_cast<std::int64_t>(batch_size) * std::max(1, max_threads());
    std::vector<float> preds;
    for (std::int64_t g0 = 0; g0 < n; g0 += group) {
        const std::int64_t g1 = std::min(n, g0 + group);
        preds.assign(static_cast<std::size_t>((g1 - g0) * voxels), 0.0f);
        const std::int64_t nbatches = (g1 - g0 + batch_size - 1) / batch_size;
        parallel_for(0, nbatches, [&](std::int64_t b0, std::int64_t b1) {
            ad::NoGradGuard no_grad;
            for (std::int64_t b = b0; b < b1; ++b) {
                const std::int64_t p0 = g0 + b * batch_size;
                const std::int64_t p1 = std::min(g1, p0 + batch_size);
                const std::int64_t nb = p1 - p0;
                std::vector<float> x(static_cast<std::size_t>(nb * voxels));
                for (std::int64_t p = p0; p < p1; ++p) {
                    const Dims3& o = origins[static_cast<std::size_t>(p)];
                    float* dst = x.data() + (p - p0) * voxels;
                    for (std::int64_t z = 0; z < P; ++z)
                        for (std::int64_t y = 0; y < P; ++y) {
                            const float* src = padded.data.data() + linear_index(d, o[0], o[1] + y, o[2] + z);
                            std::copy(src, src + P, dst + (z * P + y) * P);
                        }
                }
                const auto prob =
                    ad::sigmoid(model.forward(Tensor<float>::from_data({nb, 1, P, P, P}, std::move(x))));
                const auto pv = prob.data();
                std::copy(pv.begin(), pv.end(), preds.begin() + (p0 - g0) * voxels);
            }
        });
        for (std::int64_t p = g0; p < g1; ++p) {
            const Dims3& o = origins[static_cast<std::size_t>(p)];
            const float* src = preds.data() + (p - g0) * voxels;
            for (std::int64_t z = 0; z < P; ++z)
                for (std::int64_t y = 0; y < P; ++y) {
                    const std::int64_t base = linear_index(d, o[0], o[1] + y, o[2] + z);
                    for (std::int64_t x = 0; x < P; ++x) {
                        const std::size_t i = static_cast<std::size_t>(base + x);
                        if (count[i] == std::numeric_limits<std::uint16_t>::max())
                            throw Error("sliding_window_predict: voxel covered by more than 65535 patches");
                        const std::uint16_t c = ++count[i];
                        const float v = src[(z * P + y) * P + x];
                        mean[i] += (v - mean[i]) / static_cast<float>(c);
                    }
                }
        }
    }

    ProbabilityVolume out;
    out.spacing = vol.spacing;
    out.patch_count = n;
    if (d == vol.dims) {
        out.dims = d;
        out.prob = std::move(mean);
        out.count = std::move(count);
    } else {
        out.dims = vol.dims;
        out.prob.resize(static_cast<std::size_t>(vol.size()));
        out.count.resize(out.prob.size());
        for (std::int64_t z = 0; z < vol.dims[2]; ++z)
            for (std::int64_t y = 0; y < vol.dims[1]; ++y)
                for (std::int64_t x = 0; x < vol.dims[0]; ++x) {
                    const auto src = linear_index(d, x + offset[0], y + offset[1], z + offset[2]);
                    const auto dst = linear_index(vol.dims, x, y, z);
                    out.prob[dst] = mean[src];
                    out.count[dst] = count[src];
                }
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

Mask binarize(const ProbabilityVolume& p, double threshold)
{
    Mask m = Mask::zeros(p.dims, p.spacing);
    for (std::size_t i = 0; i < p.prob.size(); ++i) m.data[i] = p.prob[i] >= threshold ? 1 : 0;
    return m;
}

ConfusionCounts confusion(const Mask& pred, const Mask& gt)
{
    if (pred.dims != gt.dims) throw Error("confusion: prediction and ground-truth dims differ");
    ConfusionCounts c;
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
        const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
        if (p && g)
            ++c.tp;
        else if (p)
            ++c.fp;
        else if (g)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

Metrics metrics(const ConfusionCounts& c)
{
    const bool gt_empty = c.tp + c.fn == 0;
    auto ratio = [gt_empty](double num, double den) {
        if (den == 0.0) return gt_empty ? 1.0 : 0.0;
        return num / den;
    };
    Metrics m;
    m.dsc = ratio(2.0 * c.tp, 2.0 * c.tp + c.fp + c.fn);
    m.sensitivity = ratio(c.tp, c.tp + c.fn);
    m.specificity = ratio(c.tn, c.tn + c.fp);
    m.precision = ratio(c.tp, c.tp + c.fp);
    return m;
}

namespace {

Metrics metrics_mean(const std::vector<Metrics>& ms)
{
    Metrics s;
    if (ms.empty()) return s;
    for (const auto& m : ms) {
        s.dsc += m.dsc;
        s.sensitivity += m.sensitivity;
        s.specificity += m.specificity;
        s.precision += m.precision;
    }
    const double n = static_cast<double>(ms.size());
    return {s.dsc / n, s.sensitivity / n, s.specificity / n, s.precision / n};
}

Metrics metrics_std(const std::vector<Metrics>& ms, const Metrics& mu)
{
    Metrics s;
    if (ms.empty()) return s;
    for (const auto& m : ms) {
        s.dsc += (m.dsc - mu.dsc) * (m.dsc - mu.dsc);
        s.sensitivity += (m.sensitivity - mu.sensitivity) * (m.sensitivity - mu.sensitivity);
        s.specificity += (m.specificity - mu.specificity) * (m.specificity - mu.specificity);
        s.precision += (m.precision - mu.precision) * (m.precision - mu.precision);
    }
    const double n = static_cast<double>(ms.size());
    return {std::sqrt(s.dsc / n), std::sqrt(s.sensitivity / n), std::sqrt(s.specificity / n),
            std::sqrt(s.precision / n)};
}

nlohmann::json metrics_json(const Metrics& m)
{
    return {{"dsc", m.dsc}, {"sensitivity", m.sensitivity}, {"specificity", m.specificity}, {"precision", m.precision}};
}

std::string fmt17(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

void MetricReport::aggregate()
{
    std::vector<Metrics> ms;
    for (const auto& r : rows) ms.push_back(r.m);
    mean = metrics_mean(ms);
    std = metrics_std(ms, mean);
}

MetricReport evaluate_fold(const UNet3D<float>& model, const Manifest& manifest, int fold, const GridSpec& spec,
                           const EvalOptions& opts)
{
    MetricReport report;
    for (const auto& e : manifest.entries) {
        if (fold >= 0 && (!e.fold || *e.fold != fold)) continue;
        const Volume vol = load_volume(e.volume_path);
        const Mask gt = load_mask(e.mask_path);
        validate_pair(vol, gt);
        const ProbabilityVolume prob = sliding_window_predict(model, vol, spec, opts.batch_size);
        const Mask pred = binarize(prob);
        PatientResult r;
        r.patient_id = e.patient_id;
        r.fold = e.fold.value_or(-1);
        r.counts = confusion(pred, gt);
        r.m = metrics(r.counts);
        r.time_s = prob.seconds;
        r.patch_count = prob.patch_count;
        if (r.counts.tp + r.counts.fp + r.counts.fn == 0)
            log_event(LogLevel::Info, "empty_prediction_and_truth", {{"patient", e.patient_id}});
        log_event(LogLevel::Info, "evaluated",
                  {{"patient", e.patient_id},
                   {"dsc", to_field(r.m.dsc)},
                   {"patches", to_field(r.patch_count)},
                   {"time_s", to_field(r.time_s)}});
        if (opts.prediction_dir) {
            std::filesystem::create_directories(*opts.prediction_dir);
            Volume pv;
            pv.dims = prob.dims;
            pv.spacing = prob.spacing;
            pv.kind = IntensityKind::Normalized;
            pv.data = prob.prob;
            pv.crop = vol.crop;
            save_volume(pv, *opts.prediction_dir / (e.patient_id + "_prob"));
            Mask pm = pred;
            pm.crop = vol.crop;
            save_mask(pm, *opts.prediction_dir / (e.patient_id + "_pred"));
        }
        if (opts.overlay_dir) {
            // Slice with the most ground-truth voxels, else the middle one.
            std::int64_t best_z = vol.dims[2] / 2, best = 0;
            const std::int64_t plane = vol.dims[0] * vol.dims[1];
            for (std::int64_t z = 0; z < vol.dims[2]; ++z) {
                const auto first = gt.data.begin() + z * plane;
                const std::int64_t c = std::count(first, first + plane, std::uint8_t{1});
                if (c > best) {
                    best = c;
                    best_z = z;
                }
            }
            std::filesystem::create_directories(*opts.overlay_dir);
            write_overlay_png(vol, gt, pred, best_z, *opts.overlay_dir / (e.patient_id + ".png"));
        }
        report.rows.push_back(std::move(r));
    }
    if (report.rows.empty()) throw Error("evaluate_fold: no patients in fold " + std::to_string(fold));
    report.aggregate();
    return report;
}

void write_report_csv(const MetricReport& report, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write report: " + path.string());
    out << "patient_id,fold,dsc,sensitivity,specificity,precision,time_s\n";
    for (const auto& r : report.rows)
        out << r.patient_id << ',' << r.fold << ',' << fmt17(r.m.dsc) << ',' << fmt17(r.m.sensitivity) << ','
            << fmt17(r.m.specificity) << ',' << fmt17(r.m.precision) << ',' << fmt17(r.time_s) << '\n';
    if (!out) throw Error("cannot write report: " + path.string());
}

void write_report_json(const MetricReport& report, const std::filesystem::path& path)
{
    nlohmann::json j;
    j["patients"] = report.rows.size();
    j["mean"] = metrics_json(report.mean);
    j["std"] = metrics_json(report.std);
    double t = 0.0;
    for (const auto& r : report.rows) t += r.time_s;
    j["time_per_patient_s"] = report.rows.empty() ? 0.0 : t / static_cast<double>(report.rows.size());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write report: " + path.string());
    out << j.dump(2) << '\n';
}

std::vector<OverlapRow> overlap_sweep(const UNet3D<float>& model, const Manifest& manifest, int fold,
                                      const std::vector<double>& overlaps, const EvalOptions& opts)
{
    std::vector<OverlapRow> rows;
    for (double ov : overlaps) {
        GridSpec spec{model.config().patch_size, ov};
        const MetricReport rep = evaluate_fold(model, manifest, fold, spec, opts);
        OverlapRow row;
        row.overlap = ov;
        row.mean = rep.mean;
        row.std = rep.std;
        for (const auto& r : rep.rows) {
            row.time_per_patient_s += r.time_s;
            row.patches_per_patient += static_cast<double>(r.patch_count);
        }
        row.time_per_patient_s /= static_cast<double>(rep.rows.size());
        row.patches_per_patient /= static_cast<double>(rep.rows.size());
        rows.push_back(row);
    }
    return rows;
}

void write_overlap_csv(const std::vector<OverlapRow>& rows, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write overlap table: " + path.string());
    out << "overlap_pct,time_per_patient_s,patches_per_patient,dsc_mean,dsc_std,sensitivity_mean,sensitivity_std,"
           "specificity_mean,specificity_std,precision_mean,precision_std\n";
    for (const auto& r : rows)
        out << fmt17(r.overlap * 100.0) << ',' << fmt17(r.time_per_patient_s) << ',' << fmt17(r.patches_per_patient)
            << ',' << fmt17(r.mean.dsc) << ',' << fmt17(r.std.dsc) << ',' << fmt17(r.mean.sensitivity) << ','
            << fmt17(r.std.sensitivity) << ',' << fmt17(r.mean.specificity) << ',' << fmt17(r.std.specificity)
            << ',' << fmt17(r.mean.precision) << ',' << fmt17(r.std.precision) << '\n';
    if (!out) throw Error("cannot write overlap table: " + path.string());
}

namespace {

bool on_contour(const Mask& m, std::int64_t x, std::int64_t y, std::int64_t z)
{
    if (!m.at(x, y, z)) return false;
    const std::int64_t nx = m.dims[0], ny = m.dims[1];
    if (x == 0 || y == 0 || x == nx - 1 || y == ny - 1) return true;
    return !m.at(x - 1, y, z) || !m.at(x + 1, y, z) || !m.at(x, y - 1, z) || !m.at(x, y + 1, z);
}

} // namespace

void write_overlay_png(const Volume& image, const Mask& gt, const Mask& pred, std::int64_t z,
                       const std::filesystem::path& path)
{
    validate_pair(image, gt);
    if (pred.dims != gt.dims) throw Error("overlay: prediction dims differ");
    if (z < 0 || z >= image.dims[2]) throw Error("overlay: slice index out of range");
    const std::int64_t w = image.dims[0], h = image.dims[1];
    const bool hu = image.kind == IntensityKind::HU;
    std::vector<std::uint8_t> rgb;
    rgb.reserve(static_cast<std::size_t>(h * w * 3));
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            double v = image.at(x, y, z);
            if (hu) v /= 80.0;
            const auto g = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            std::uint8_t px[3] = {g, g, g};
            if (on_contour(gt, x, y, z)) {
                px[0] = 0;
                px[1] = 255;
                px[2] = 0;
            }
            if (on_contour(pred, x, y, z)) {
                px[0] = 255;
                px[1] = 0;
                px[2] = 0;
            }
            rgb.insert(rgb.end(), px, px + 3);
        }
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(w);
    img.height = static_cast<png_uint_32>(h);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, rgb.data(), 0, nullptr))
        throw Error("overlay: cannot write " + path.string() + ": " + img.message);
}

} // namespace strokeseg
