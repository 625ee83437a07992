#include "strokeseg/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "strokeseg/preprocess.hpp"

namespace strokeseg {

void SamplerConfig::validate() const
{
    if (patch_size < 1) throw ConfigError("sampler: patch_size must be positive");
    if (patches_per_patient < 1) throw ConfigError("sampler: patches_per_patient must be positive");
    const auto& p = class_probs;
    if (p.background < 0 || p.healthy < 0 || p.lesion < 0) throw ConfigError("sampler: class_probs must be >= 0");
    if (std::abs(p.background + p.healthy + p.lesion - 1.0) > 1e-9)
        throw ConfigError("sampler: class_probs must sum to 1");
}

std::int64_t GridSpec::stride() const
{
    return std::max<std::int64_t>(1, std::llround(static_cast<double>(patch_size) * (1.0 - overlap)));
}

void GridSpec::validate() const
{
    if (patch_size < 1) throw ConfigError("grid: patch_size must be positive");
    if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("grid: overlap must lie in [0, 1)");
}

LabelMap build_label_map(const Volume& vol, const Mask& mask)
{
    validate_pair(vol, mask);
    LabelMap lm;
    lm.dims = vol.dims;
    lm.labels.resize(vol.data.size());
    for (std::size_t i = 0; i < vol.data.size(); ++i) {
        VoxelClass c = VoxelClass::Healthy;
        if (mask.data[i])
            c = VoxelClass::Lesion;
        else if (vol.data[i] == 0.0f)
            c = VoxelClass::Background;
        lm.labels[i] = c;
        lm.members[static_cast<int>(c)].push_back(static_cast<std::int64_t>(i));
    }
    return lm;
}

Dims3 pad_volume_to_patch(Volume& vol, int patch_size)
{
    Dims3 target = vol.dims, offset{0, 0, 0};
    bool needed = false;
    for (int a = 0; a < 3; ++a)
        if (vol.dims[a] < patch_size) {
            target[a] = patch_size;
            offset[a] = (patch_size - vol.dims[a]) / 2;
            needed = true;
        }
    if (!needed) return offset;
    CropBox box{offset, {offset[0] + vol.dims[0], offset[1] + vol.dims[1], offset[2] + vol.dims[2]}};
    auto crop = vol.crop;
    vol = uncrop_volume(vol, box, target);
    vol.crop = crop;
    return offset;
}

Dims3 pad_to_patch(Volume& vol, Mask& mask, int patch_size)
{
    validate_pair(vol, mask);
    const Dims3 src = mask.dims;
    const Dims3 offset = pad_volume_to_patch(vol, patch_size);
    if (vol.dims != src) {
        CropBox box{offset, {offset[0] + src[0], offset[1] + src[1], offset[2] + src[2]}};
        auto crop = mask.crop;
        mask = uncrop_mask(mask, box, vol.dims);
        mask.crop = crop;
    }
    return offset;
}

ClassProbs effective_class_probs(const LabelMap& labels, const ClassProbs& probs)
{
    ClassProbs p = probs;
    const bool has_bg = labels.count(VoxelClass::Background) > 0;
    const bool has_healthy = labels.count(VoxelClass::Healthy) > 0;
    const bool has_lesion = labels.count(VoxelClass::Lesion) > 0;
    if (!has_lesion && p.lesion > 0) {
        p.healthy += p.lesion;
        p.lesion = 0;
    }
    if (!has_healthy && p.healthy > 0) {
        p.lesion += p.healthy;
        p.healthy = 0;
        if (!has_lesion) {
            p.background += p.lesion;
            p.lesion = 0;
        }
    }
    if (!has_bg && p.background > 0) {
        if (has_healthy)
            p.healthy += p.background;
        else
            p.lesion += p.background;
        p.background = 0;
    }
    const bool ok = (p.background > 0 && has_bg) || (p.healthy > 0 && has_healthy) || (p.lesion > 0 && has_lesion);
    if (!ok) throw Error("weighted sampler: no voxel class with positive probability is populated");
    return p;
}

Dims3 draw_uniform_origin(const Dims3& dims, int patch_size, Rng& rng)
{
    Dims3 o{};
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < patch_size) throw Error("uniform sampler: volume smaller than patch; pad first");
        o[a] = rng.uniform_int(0, dims[a] - patch_size);
    }
    return o;
}

Dims3 clamp_window(const Dims3& center, const Dims3& dims, int patch_size)
{
    Dims3 o{};
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < patch_size) throw Error("patch window larger than volume; pad first");
        o[a] = std::clamp<std::int64_t>(center[a] - patch_size / 2, 0, dims[a] - patch_size);
    }
    return o;
}

WeightedDraw draw_weighted(const LabelMap& labels, int patch_size, const ClassProbs& probs, Rng& rng)
{
    const ClassProbs p = effective_class_probs(labels, probs);
    const double u = rng.uniform();
    VoxelClass cls;
    if (u < p.background)
        cls = VoxelClass::Background;
    else if (u < p.background + p.healthy)
        cls = VoxelClass::Healthy;
    else
        cls = VoxelClass::Lesion;
    // Guard against rounding in the cumulative sum landing on an empty class.
    if (labels.count(cls) == 0) cls = p.lesion > 0 ? VoxelClass::Lesion : p.healthy > 0 ? VoxelClass::Healthy
                                                                                       : VoxelClass::Background;
    const auto& members = labels.members[static_cast<int>(cls)];
    const std::int64_t idx = members[rng.uniform_index(members.size())];
    const Dims3& d = labels.dims;
    const Dims3 center{idx % d[0], (idx / d[0]) % d[1], idx / (d[0] * d[1])};
    return {clamp_window(center, d, patch_size), center, cls};
}

Patch extract_patch(const Volume& vol, const Mask& mask, const Dims3& origin, int patch_size)
{
    const CropBox box{origin, {origin[0] + patch_size, origin[1] + patch_size, origin[2] + patch_size}};
    Patch p;
    p.image = crop_volume(vol, box);
    p.mask = crop_mask(mask, box);
    p.image.crop.reset();
    p.mask.crop.reset();
    p.origin = origin;
    p.center = {origin[0] + patch_size / 2, origin[1] + patch_size / 2, origin[2] + patch_size / 2};
    return p;
}

std::vector<Patch> uniform_sample(const Volume& vol, const Mask& mask, const SamplerConfig& cfg, Rng& rng)
{
    cfg.validate();
    Volume v = vol;
    Mask m = mask;
    pad_to_patch(v, m, cfg.patch_size);
    std::vector<Patch> out;
    out.reserve(static_cast<std::size_t>(cfg.patches_per_patient));
    for (int i = 0; i < cfg.patches_per_patient; ++i)
        out.push_back(extract_patch(v, m, draw_uniform_origin(v.dims, cfg.patch_size, rng), cfg.patch_size));
    return out;
}

std::vector<Patch> weighted_sample(const Volume& vol, const Mask& mask, const LabelMap& labels,
                                   const SamplerConfig& cfg, Rng& rng)
{
    cfg.validate();
    if (labels.dims != vol.dims) throw Error("weighted sampler: label map does not match volume");
    Volume v = vol;
    Mask m = mask;
    const Dims3 before = v.dims;
    pad_to_patch(v, m, cfg.patch_size);
    const LabelMap padded = (v.dims == before) ? LabelMap{} : build_label_map(v, m);
    const LabelMap& lm = (v.dims == before) ? labels : padded;

    const ClassProbs eff = effective_class_probs(lm, cfg.class_probs);
    if (!(eff == cfg.class_probs))
        log_event(LogLevel::Warn, "sampler_fallback",
                  {{"lesion_voxels", to_field(lm.count(VoxelClass::Lesion))},
                   {"healthy_prob", to_field(eff.healthy)},
                   {"lesion_prob", to_field(eff.lesion)}});
    std::vector<Patch> out;
    out.reserve(static_cast<std::size_t>(cfg.patches_per_patient));
    for (int i = 0; i < cfg.patches_per_patient; ++i) {
        const WeightedDraw d = draw_weighted(lm, cfg.patch_size, eff, rng);
        Patch p = extract_patch(v, m, d.origin, cfg.patch_size);
        p.center = d.center;
        p.center_class = d.center_class;
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<std::int64_t> grid_axis_origins(std::int64_t dim, std::int64_t patch_size, std::int64_t stride)
{
    if (dim < patch_size) throw Error("grid: axis of length " + std::to_string(dim) + " shorter than patch");
    if (stride < 1) throw Error("grid: stride must be positive");
    std::vector<std::int64_t> o;
    for (std::int64_t v = 0; v + patch_size < dim; v += stride) o.push_back(v);
    if (o.empty() || o.back() != dim - patch_size) o.push_back(dim - patch_size);
    return o;
}

std::vector<Dims3> grid_patches(const Dims3& dims, const GridSpec& spec)
{
    spec.validate();
    const auto s = spec.stride();
    const auto ox = grid_axis_origins(dims[0], spec.patch_size, s);
    const auto oy = grid_axis_origins(dims[1], spec.patch_size, s);
    const auto oz = grid_axis_origins(dims[2], spec.patch_size, s);
    std::vector<Dims3> out;
    out.reserve(ox.size() * oy.size() * oz.size());
    for (auto z : oz)
        for (auto y : oy)
            for (auto x : ox) out.push_back({x, y, z});
    return out;
}

void dump_patches(const std::vector<Patch>& patches, const std::filesystem::path& out_dir)
{
    std::filesystem::create_directories(out_dir);
    std::ofstream csv(out_dir / "origins.csv", std::ios::trunc);
    if (!csv) throw Error("cannot write " + (out_dir / "origins.csv").string());
    csv << "index,x0,y0,z0,center_class\n";
    for (std::size_t i = 0; i < patches.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "patch_%04zu", i);
        save_volume(patches[i].image, out_dir / name);
        save_mask(patches[i].mask, out_dir / (std::string(name) + "_mask"));
        const auto& o = patches[i].origin;
        csv << i << ',' << o[0] << ',' << o[1] << ',' << o[2] << ',';
        if (patches[i].center_class) {
            static const char* names[] = {"background", "healthy", "lesion"};
            csv << names[static_cast<int>(*patches[i].center_class)];
        }
        csv << '\n';
    }
}

} // namespace strokeseg
