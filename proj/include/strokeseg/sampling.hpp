#pragma once

// Patch extraction. Training draws patches either uniformly over all valid
// placements or by first drawing a voxel class (background/healthy/lesion)
// and then a uniform centre voxel of that class. Inference walks an
// overlapping grid that covers every voxel.

#include <filesystem>
#include <optional>
#include <vector>

#include "strokeseg/volume_io.hpp"

namespace strokeseg {

enum class VoxelClass : std::uint8_t { Background = 0, Healthy = 1, Lesion = 2 };

/// Lesion where mask = 1; background where volume = 0 and mask = 0; healthy otherwise.
struct LabelMap {
    Dims3 dims{0, 0, 0};
    std::vector<VoxelClass> labels;
    /// Linear voxel indices per class, ascending.
    std::array<std::vector<std::int64_t>, 3> members;

    std::int64_t count(VoxelClass c) const { return static_cast<std::int64_t>(members[static_cast<int>(c)].size()); }
};

struct ClassProbs {
    double background = 0.0;
    double healthy = 0.5;
    double lesion = 0.5;
    bool operator==(const ClassProbs&) const = default;
};

enum class SamplerKind { Uniform, Weighted };

struct SamplerConfig {
    int patch_size = 16;
    int patches_per_patient = 32;
    SamplerKind kind = SamplerKind::Weighted;
    ClassProbs class_probs;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Grid stride is round(P * (1 - overlap)), at least 1.
struct GridSpec {
    int patch_size = 16;
    double overlap = 0.25;

    std::int64_t stride() const;
    void validate() const;
};

struct Patch {
    Volume image;
    Mask mask;
    Dims3 origin{0, 0, 0};
    Dims3 center{0, 0, 0};
    std::optional<VoxelClass> center_class; // set by the weighted sampler
};

LabelMap build_label_map(const Volume& vol, const Mask& mask);

/// Zero-pads every axis shorter than P symmetrically up to P (extra voxel
/// after). Returns the offset of the source inside the padded grid.
Dims3 pad_to_patch(Volume& vol, Mask& mask, int patch_size);
Dims3 pad_volume_to_patch(Volume& vol, int patch_size);

/// Probabilities after the empty-class fallback: lesion mass moves to healthy
/// (and vice versa) when a class has no voxels; background mass moves to
/// healthy. Throws if no class with positive probability is populated.
ClassProbs effective_class_probs(const LabelMap& labels, const ClassProbs& probs);

Dims3 draw_uniform_origin(const Dims3& dims, int patch_size, Rng& rng);

struct WeightedDraw {
    Dims3 origin;
    Dims3 center;
    VoxelClass center_class;
};

/// Draws a class, then a uniform voxel of it, and clamps the window so that
/// it lies inside the volume while still containing the centre.
WeightedDraw draw_weighted(const LabelMap& labels, int patch_size, const ClassProbs& probs, Rng& rng);

/// Window origin for a centre voxel: centre - P/2, clamped into [0, dim - P].
Dims3 clamp_window(const Dims3& center, const Dims3& dims, int patch_size);

Patch extract_patch(const Volume& vol, const Mask& mask, const Dims3& origin, int patch_size);

/// cfg.patches_per_patient uniformly placed patches. Origins refer to the
/// padded grid when the volume is smaller than the patch.
std::vector<Patch> uniform_sample(const Volume& vol, const Mask& mask, const SamplerConfig& cfg, Rng& rng);

/// cfg.patches_per_patient class-weighted patches. Logs a warning when the
/// fallback probabilities differ from the configured ones.
std::vector<Patch> weighted_sample(const Volume& vol, const Mask& mask, const LabelMap& labels,
                                   const SamplerConfig& cfg, Rng& rng);

/// Per-axis origins 0, s, 2s, ... followed by dim - P.
std::vector<std::int64_t> grid_axis_origins(std::int64_t dim, std::int64_t patch_size, std::int64_t stride);

/// Cartesian product of per-axis origins, x varying fastest.
std::vector<Dims3> grid_patches(const Dims3& dims, const GridSpec& spec);

/// Debug dump: each patch as `patch_NNNN` VOL image + `patch_NNNN_mask` and an origins CSV.
void dump_patches(const std::vector<Patch>& patches, const std::filesystem::path& out_dir);

} // namespace strokeseg
