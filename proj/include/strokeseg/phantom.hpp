#pragma once

// Synthetic NCCT-like heads: air, an ellipsoidal skull shell, a thin CSF gap,
// brain tissue with smooth lattice noise, hypodense ellipsoidal lesions and a
// disconnected head-coil slab. Only uniform draws from Rng are used, so the
// output is identical across platforms.

#include <filesystem>
#include <utility>

#include "strokeseg/volume_io.hpp"

namespace strokeseg {

struct PhantomConfig {
    Dims3 dims{64, 64, 64};
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::uint64_t seed = 0;

    double air_hu = -1000.0;
    double skull_hu = 900.0;
    double skull_thickness = 3.0;
    double csf_hu = 8.0;
    double csf_gap = 1.0;
    double brain_hu = 35.0;
    double brain_noise_sd = 5.0;  // smooth lattice noise
    double white_noise_sd = 1.0;  // per-voxel noise
    int noise_cell = 8;           // lattice spacing in voxels
    double brain_hu_min = 5.0;
    double brain_hu_max = 70.0;
    bool head_coil = true;
    double coil_hu = 300.0;

    double lesion_offset_hu = -12.0;
    int lesion_count_min = 1;
    int lesion_count_max = 3;
    double lesion_radius_min = 3.0;
    double lesion_radius_max = 7.0;
    /// Accepted lesion volume as a fraction of the brain volume.
    double lesion_fraction_min = 0.008;
    double lesion_fraction_max = 0.03;
    int max_retries = 200;

    void validate() const;
};

struct PhantomStats {
    std::int64_t brain_voxels = 0;
    std::int64_t lesion_voxels = 0;
    int lesion_count = 0;
};

/// Returns an int16-tagged HU volume and the exact lesion mask.
std::pair<Volume, Mask> generate_phantom(const PhantomConfig& cfg, PhantomStats* stats = nullptr);

/// Brain-region mask of a phantom (CSF gap excluded), for tests.
Mask phantom_brain_mask(const PhantomConfig& cfg);

/// Writes `n` phantoms `Pxxx_ct` / `Pxxx_mask` and `manifest.csv` into
/// out_dir, with folds from kfold_split over min(5, n) folds. Patient i uses
/// seed derive_seed(cfg.seed, {i}).
Manifest generate_corpus(int n, const PhantomConfig& cfg, const std::filesystem::path& out_dir);

} // namespace strokeseg
