#pragma once

// VOL format: a JSON sidecar `<name>.json` describing dims, spacing, dtype and
// intensity kind, plus a headerless little-endian body `<name>.raw` in x-fastest
// voxel order.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "strokeseg/common.hpp"

namespace strokeseg {

enum class DType { F32, I16 };
enum class IntensityKind { HU, Normalized };

/// Tight bounding box of a region; `hi` is exclusive.
struct CropBox {
    Dims3 lo{0, 0, 0};
    Dims3 hi{0, 0, 0};

    Dims3 extent() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
    bool operator==(const CropBox&) const = default;
};

/// Crop bookkeeping carried in the sidecar so a processed volume can be
/// mapped back onto its source grid.
struct CropInfo {
    Dims3 origin{0, 0, 0};
    Dims3 source_dims{0, 0, 0};
    bool operator==(const CropInfo&) const = default;
};

using Spacing3 = std::array<double, 3>;

/// Scalar 3D image. Values are held as float; `dtype` selects the on-disk
/// encoding, and I16 volumes must hold integral values in int16 range.
struct Volume {
    Dims3 dims{0, 0, 0};
    Spacing3 spacing{1.0, 1.0, 1.0};
    DType dtype = DType::F32;
    IntensityKind kind = IntensityKind::HU;
    std::vector<float> data;
    std::optional<CropInfo> crop;

    static Volume filled(const Dims3& dims, float value, const Spacing3& spacing = {1.0, 1.0, 1.0},
                         IntensityKind kind = IntensityKind::HU);

    std::int64_t size() const { return voxel_count(dims); }
    float& at(std::int64_t x, std::int64_t y, std::int64_t z) { return data[linear_index(dims, x, y, z)]; }
    float at(std::int64_t x, std::int64_t y, std::int64_t z) const { return data[linear_index(dims, x, y, z)]; }

    /// Throws Error if any invariant is violated.
    void validate() const;
    bool operator==(const Volume&) const = default;
};

/// Binary lesion mask aligned with a Volume.
struct Mask {
    Dims3 dims{0, 0, 0};
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::vector<std::uint8_t> data;
    std::optional<CropInfo> crop;

    static Mask zeros(const Dims3& dims, const Spacing3& spacing = {1.0, 1.0, 1.0});

    std::int64_t size() const { return voxel_count(dims); }
    std::uint8_t& at(std::int64_t x, std::int64_t y, std::int64_t z) { return data[linear_index(dims, x, y, z)]; }
    std::uint8_t at(std::int64_t x, std::int64_t y, std::int64_t z) const { return data[linear_index(dims, x, y, z)]; }
    std::int64_t count_ones() const;

    void validate() const;
    bool operator==(const Mask&) const = default;
};

struct ManifestEntry {
    std::string patient_id;
    std::filesystem::path volume_path;
    std::filesystem::path mask_path;
    std::optional<int> fold;
    bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
    std::vector<ManifestEntry> entries;

    const ManifestEntry& find(std::string_view patient_id) const;
};

/// Sidecar and body paths for a VOL base name; accepts `name`, `name.json` or `name.raw`.
std::filesystem::path sidecar_path(const std::filesystem::path& path);
std::filesystem::path raw_path(const std::filesystem::path& path);

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& vol, const std::filesystem::path& path);

Mask load_mask(const std::filesystem::path& path);
void save_mask(const Mask& mask, const std::filesystem::path& path);

/// Relative paths in the CSV are resolved against the manifest's directory.
Manifest load_manifest(const std::filesystem::path& path);
/// Writes paths relative to the manifest directory when possible.
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

/// Returns only if dims match and the mask is binary.
void validate_pair(const Volume& vol, const Mask& mask);

// Little-endian primitives shared with the checkpoint writer.
namespace le {
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);
std::uint16_t get_u16(std::span<const std::uint8_t> in, std::size_t& pos);
std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t& pos);
std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t& pos);
float get_f32(std::span<const std::uint8_t> in, std::size_t& pos);
} // namespace le

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

} // namespace strokeseg
