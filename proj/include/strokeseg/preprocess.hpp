#pragma once

// NCCT pre-processing: HU window, per-slice skull/coil removal by largest
// connected component, optional brain z-score, min-max normalization and crop
// to the non-zero region.

#include <span>
#include <tuple>

#include "strokeseg/volume_io.hpp"

namespace strokeseg {

enum class Connectivity { Four = 4, Eight = 8 };

struct PreprocessConfig {
    float hu_lo = 0.0f;
    float hu_hi = 80.0f;
    bool standardize_first = false;
    Connectivity connectivity = Connectivity::Eight;

    void validate() const;
};

/// Clamps every voxel into [hu_lo, hu_hi].
Volume hu_window(const Volume& vol, const PreprocessConfig& cfg);

/// Keeps only the largest connected component of `foreground` in a 2D slice
/// of nx*ny pixels (x-fastest). Ties go to the component reached first in
/// raster order. Returns the kept pixel count.
std::int64_t keep_largest_component(std::span<std::uint8_t> foreground, std::int64_t nx, std::int64_t ny,
                                    Connectivity connectivity);

/// Per axial slice: largest component of voxels > hu_lo, zero voxels >= hu_hi,
/// largest component again. Removed voxels become exactly 0.
Volume strip_skull(const Volume& vol, const PreprocessConfig& cfg);

/// (X - min) / (max - min). A constant volume maps to all zeros with a warning.
Volume minmax_normalize(const Volume& vol);

/// Standardizes the non-zero (brain) voxels with their mean and population
/// standard deviation; background stays 0.
Volume zscore_brain(const Volume& vol);

/// Tight bounding box of the non-zero voxels of `vol`.
CropBox nonzero_box(const Volume& vol);

Volume crop_volume(const Volume& vol, const CropBox& box);
Mask crop_mask(const Mask& mask, const CropBox& box);

/// Crops both to the non-zero region of `vol`.
std::tuple<Volume, Mask, CropBox> crop_nonzero(const Volume& vol, const Mask& mask);

/// Zero-pads a cropped volume back onto a grid of `source_dims`.
Volume uncrop_volume(const Volume& cropped, const CropBox& box, const Dims3& source_dims);
Mask uncrop_mask(const Mask& cropped, const CropBox& box, const Dims3& source_dims);

/// window -> strip -> [z-score] -> min-max -> crop. Non-brain voxels stay 0
/// after normalization. The returned volume and mask carry CropInfo.
std::tuple<Volume, Mask, CropBox> run_pipeline(const Volume& vol, const Mask& mask, const PreprocessConfig& cfg);

} // namespace strokeseg
