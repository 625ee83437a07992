#pragma once

// Grid inference with overlap averaging, thresholding, confusion-matrix
// metrics and per-fold reports.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "strokeseg/network.hpp"
#include "strokeseg/sampling.hpp"

namespace strokeseg {

struct ProbabilityVolume {
    Dims3 dims{0, 0, 0};
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::vector<float> prob;
    /// Number of grid patches that covered each voxel.
    std::vector<std::uint16_t> count;
    std::int64_t patch_count = 0;
    double seconds = 0.0;
};

/// Runs the model over an overlapping grid and averages sigmoid outputs
/// voxelwise. Volumes smaller than the patch are zero-padded first and the
/// result is cropped back. The average is kept as a running mean so that
/// identical contributions reproduce their value exactly.
ProbabilityVolume sliding_window_predict(const UNet3D<float>& model, const Volume& vol, const GridSpec& spec,
                                         int batch_size = 4);

/// voxel = 1 iff p >= threshold.
Mask binarize(const ProbabilityVolume& p, double threshold = 0.5);

struct ConfusionCounts {
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t tn = 0;
    std::int64_t fn = 0;

    std::int64_t total() const { return tp + fp + tn + fn; }
    bool operator==(const ConfusionCounts&) const = default;
};

ConfusionCounts confusion(const Mask& pred, const Mask& gt);

struct Metrics {
    double dsc = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    double precision = 0.0;
};

/// Standard voxel metrics. A 0/0 ratio is 1 when the ground truth is empty
/// and 0 otherwise.
Metrics metrics(const ConfusionCounts& c);

struct PatientResult {
    std::string patient_id;
    int fold = -1;
    Metrics m;
    ConfusionCounts counts;
    double time_s = 0.0;
    std::int64_t patch_count = 0;
};

struct MetricReport {
    std::vector<PatientResult> rows;
    Metrics mean;
    Metrics std; // population standard deviation

    /// Recomputes mean and std from rows.
    void aggregate();
};

struct EvalOptions {
    int batch_size = 4;
    std::optional<std::filesystem::path> prediction_dir; // writes <id>_prob / <id>_pred VOLs
    std::optional<std::filesystem::path> overlay_dir;    // writes PNG overlays
};

/// Evaluates the held-out patients of `fold`. A negative fold evaluates every
/// manifest entry.
MetricReport evaluate_fold(const UNet3D<float>& model, const Manifest& manifest, int fold, const GridSpec& spec,
                           const EvalOptions& opts = {});

void write_report_csv(const MetricReport& report, const std::filesystem::path& path);
void write_report_json(const MetricReport& report, const std::filesystem::path& path);

struct OverlapRow {
    double overlap = 0.0;
    double time_per_patient_s = 0.0;
    double patches_per_patient = 0.0;
    Metrics mean;
    Metrics std;
};

/// One row per overlap fraction, in the given order.
std::vector<OverlapRow> overlap_sweep(const UNet3D<float>& model, const Manifest& manifest, int fold,
                                      const std::vector<double>& overlaps, const EvalOptions& opts = {});

/// CSV `overlap_pct,time_per_patient_s,patches_per_patient,dsc_mean,dsc_std,...`.
void write_overlap_csv(const std::vector<OverlapRow>& rows, const std::filesystem::path& path);

/// Grayscale RGB PNG of one axial slice with ground truth (green) and
/// prediction (red) contours.
void write_overlay_png(const Volume& image, const Mask& gt, const Mask& pred, std::int64_t z,
                       const std::filesystem::path& path);

} // namespace strokeseg
