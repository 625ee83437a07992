#include "strokeseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace strokeseg {

void PreprocessConfig::validate() const
{
    if (!(hu_lo < hu_hi)) throw ConfigError("preprocess: hu_lo must be below hu_hi");
    if (connectivity != Connectivity::Four && connectivity != Connectivity::Eight)
        throw ConfigError("preprocess: connectivity must be 4 or 8");
}

Volume hu_window(const Volume& vol, const PreprocessConfig& cfg)
{
    cfg.validate();
    if (vol.kind != IntensityKind::HU) throw Error("hu_window expects a volume in Hounsfield units");
    Volume out = vol;
    for (auto& v : out.data) v = std::clamp(v, cfg.hu_lo, cfg.hu_hi);
    return out;
}

namespace {

// Union-find over provisional labels; the root keeps the smallest label,
// which is also the label whose first pixel comes first in raster order.
struct DisjointSet {
    std::vector<std::int32_t> parent;

    std::int32_t make()
    {
        parent.push_back(static_cast<std::int32_t>(parent.size()));
        return parent.back();
    }
    std::int32_t find(std::int32_t a)
    {
        while (parent[a] != a) {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        return a;
    }
    void unite(std::int32_t a, std::int32_t b)
    {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (a < b)
            parent[b] = a;
        else
            parent[a] = b;
    }
};

} // namespace

std::int64_t keep_largest_component(std::span<std::uint8_t> fg, std::int64_t nx, std::int64_t ny,
                                    Connectivity connectivity)
{
    if (static_cast<std::int64_t>(fg.size()) != nx * ny) throw Error("slice buffer size mismatch");
    std::vector<std::int32_t> label(fg.size(), -1);
    DisjointSet ds;
    const bool eight = connectivity == Connectivity::Eight;

    // First pass: provisional labels from the already-visited neighbours.
    for (std::int64_t y = 0; y < ny; ++y) {
        for (std::int64_t x = 0; x < nx; ++x) {
            const std::int64_t i = x + nx * y;
            if (!fg[i]) continue;
            std::int32_t current = -1;
            auto visit = [&](std::int64_t xx, std::int64_t yy) {
                if (xx < 0 || xx >= nx || yy < 0) return;
                const std::int32_t l = label[xx + nx * yy];
                if (l < 0) return;
                if (current < 0)
                    current = l;
                else
                    ds.unite(current, l);
            };
            visit(x - 1, y);
            visit(x, y - 1);
            if (eight) {
                visit(x - 1, y - 1);
                visit(x + 1, y - 1);
            }
            label[i] = current >= 0 ? current : ds.make();
        }
    }
    if (ds.parent.empty()) return 0;

    // Second pass: component sizes per root.
    std::vector<std::int64_t> size(ds.parent.size(), 0);
    for (auto& l : label) {
        if (l < 0) continue;
        l = ds.find(l);
        ++size[l];
    }
    // Roots are the smallest provisional label of their set, and provisional
    // labels are issued in raster order, so scanning upward breaks ties by
    // first-pixel order.
    std::int32_t best = 0;
    for (std::int32_t l = 1; l < static_cast<std::int32_t>(size.size()); ++l)
        if (size[l] > size[best]) best = l;

    for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = (label[i] == best) ? 1 : 0;
    return size[best];
}

Volume strip_skull(const Volume& vol, const PreprocessConfig& cfg)
{
    cfg.validate();
    Volume out = vol;
    const std::int64_t nx = vol.dims[0], ny = vol.dims[1], nz = vol.dims[2];
    const std::int64_t plane = nx * ny;

    parallel_for(0, nz, [&](std::int64_t z0, std::int64_t z1) {
        std::vector<std::uint8_t> fg(static_cast<std::size_t>(plane));
        for (std::int64_t z = z0; z < z1; ++z) {
            float* slice = out.data.data() + z * plane;
            for (std::int64_t i = 0; i < plane; ++i) fg[i] = slice[i] > cfg.hu_lo ? 1 : 0;
            keep_largest_component(fg, nx, ny, cfg.connectivity);
            for (std::int64_t i = 0; i < plane; ++i) {
                if (!fg[i] || slice[i] >= cfg.hu_hi) slice[i] = 0.0f;
            }
            for (std::int64_t i = 0; i < plane; ++i) fg[i] = slice[i] > cfg.hu_lo ? 1 : 0;
            keep_largest_component(fg, nx, ny, cfg.connectivity);
            for (std::int64_t i = 0; i < plane; ++i)
                if (!fg[i]) slice[i] = 0.0f;
        }
    });
    return out;
}

Volume minmax_normalize(const Volume& vol)
{
    if (vol.data.empty()) throw Error("minmax_normalize: empty volume");
    const auto [mn_it, mx_it] = std::minmax_element(vol.data.begin(), vol.data.end());
    const double mn = *mn_it, mx = *mx_it;
    Volume out = vol;
    out.kind = IntensityKind::Normalized;
    out.dtype = DType::F32;
    if (mx == mn) {
        log_event(LogLevel::Warn, "minmax_degenerate", {{"value", to_field(mn)}});
        std::fill(out.data.begin(), out.data.end(), 0.0f);
        return out;
    }
    const double range = mx - mn;
    for (auto& v : out.data) v = static_cast<float>(std::clamp((v - mn) / range, 0.0, 1.0));
    return out;
}

Volume zscore_brain(const Volume& vol)
{
    std::int64_t n = 0;
    double sum = 0.0;
    for (float v : vol.data)
        if (v != 0.0f) {
            ++n;
            sum += v;
        }
    if (n < 2) throw Error("zscore_brain: fewer than 2 brain voxels");
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (float v : vol.data)
        if (v != 0.0f) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n));
    if (!(sd > 0.0)) throw Error("zscore_brain: brain intensities have zero standard deviation");
    Volume out = vol;
    out.dtype = DType::F32;
    // Result is unnormalized; kind stays HU until min-max runs.
    for (auto& v : out.data) v = (v != 0.0f) ? static_cast<float>((v - mean) / sd) : 0.0f;
    return out;
}

CropBox nonzero_box(const Volume& vol)
{
    CropBox b;
    b.lo = {std::numeric_limits<std::int64_t>::max(), std::numeric_limits<std::int64_t>::max(),
            std::numeric_limits<std::int64_t>::max()};
    b.hi = {0, 0, 0};
    bool any = false;
    for (std::int64_t z = 0; z < vol.dims[2]; ++z)
        for (std::int64_t y = 0; y < vol.dims[1]; ++y)
            for (std::int64_t x = 0; x < vol.dims[0]; ++x) {
                if (vol.at(x, y, z) == 0.0f) continue;
                any = true;
                const Dims3 p{x, y, z};
                for (int a = 0; a < 3; ++a) {
                    b.lo[a] = std::min(b.lo[a], p[a]);
                    b.hi[a] = std::max(b.hi[a], p[a] + 1);
                }
            }
    if (!any) throw Error("crop_nonzero: volume has no non-zero voxels");
    return b;
}

namespace {

void check_box(const CropBox& box, const Dims3& dims)
{
    for (int a = 0; a < 3; ++a)
        if (box.lo[a] < 0 || box.hi[a] > dims[a] || box.lo[a] >= box.hi[a]) throw Error("crop box outside volume");
}

template <class T>
std::vector<T> copy_box(const std::vector<T>& src, const Dims3& dims, const CropBox& box)
{
    const Dims3 e = box.extent();
    std::vector<T> out(static_cast<std::size_t>(voxel_count(e)));
    std::size_t k = 0;
    for (std::int64_t z = box.lo[2]; z < box.hi[2]; ++z)
        for (std::int64_t y = box.lo[1]; y < box.hi[1]; ++y) {
            const auto row = src.begin() + linear_index(dims, box.lo[0], y, z);
            std::copy(row, row + e[0], out.begin() + static_cast<std::ptrdiff_t>(k));
            k += static_cast<std::size_t>(e[0]);
        }
    return out;
}

template <class T>
std::vector<T> paste_box(const std::vector<T>& src, const CropBox& box, const Dims3& dst_dims)
{
    const Dims3 e = box.extent();
    std::vector<T> out(static_cast<std::size_t>(voxel_count(dst_dims)), T{});
    std::size_t k = 0;
    for (std::int64_t z = box.lo[2]; z < box.hi[2]; ++z)
        for (std::int64_t y = box.lo[1]; y < box.hi[1]; ++y) {
            std::copy(src.begin() + static_cast<std::ptrdiff_t>(k), src.begin() + static_cast<std::ptrdiff_t>(k + e[0]),
                      out.begin() + linear_index(dst_dims, box.lo[0], y, z));
            k += static_cast<std::size_t>(e[0]);
        }
    return out;
}

} // namespace

Volume crop_volume(const Volume& vol, const CropBox& box)
{
    check_box(box, vol.dims);
    Volume out = vol;
    out.dims = box.extent();
    out.data = copy_box(vol.data, vol.dims, box);
    out.crop = CropInfo{box.lo, vol.dims};
    return out;
}

Mask crop_mask(const Mask& mask, const CropBox& box)
{
    check_box(box, mask.dims);
    Mask out = mask;
    out.dims = box.extent();
    out.data = copy_box(mask.data, mask.dims, box);
    out.crop = CropInfo{box.lo, mask.dims};
    return out;
}

std::tuple<Volume, Mask, CropBox> crop_nonzero(const Volume& vol, const Mask& mask)
{
    if (vol.dims != mask.dims) throw Error("crop_nonzero: volume and mask dims differ");
    const CropBox box = nonzero_box(vol);
    return {crop_volume(vol, box), crop_mask(mask, box), box};
}

Volume uncrop_volume(const Volume& cropped, const CropBox& box, const Dims3& source_dims)
{
    if (cropped.dims != box.extent()) throw Error("uncrop: volume dims do not match crop box");
    check_box(box, source_dims);
    Volume out = cropped;
    out.dims = source_dims;
    out.data = paste_box(cropped.data, box, source_dims);
    out.crop.reset();
    return out;
}

Mask uncrop_mask(const Mask& cropped, const CropBox& box, const Dims3& source_dims)
{
    if (cropped.dims != box.extent()) throw Error("uncrop: mask dims do not match crop box");
    check_box(box, source_dims);
    Mask out = cropped;
    out.dims = source_dims;
    out.data = paste_box(cropped.data, box, source_dims);
    out.crop.reset();
    return out;
}

std::tuple<Volume, Mask, CropBox> run_pipeline(const Volume& vol, const Mask& mask, const PreprocessConfig& cfg)
{
    cfg.validate();
    validate_pair(vol, mask);
    const Volume windowed = hu_window(vol, cfg);
    const Volume stripped = strip_skull(windowed, cfg);

    Volume normalized = minmax_normalize(cfg.standardize_first ? zscore_brain(stripped) : stripped);
    // The brain support is defined by the stripped volume; everything else
    // stays exactly 0 whatever the normalization produced there.
    for (std::size_t i = 0; i < normalized.data.size(); ++i)
        if (stripped.data[i] == 0.0f) normalized.data[i] = 0.0f;

    const CropBox box = nonzero_box(stripped);
    Volume v = crop_volume(normalized, box);
    Mask m = crop_mask(mask, box);
    log_event(LogLevel::Debug, "crop",
              {{"lo", std::to_string(box.lo[0]) + "," + std::to_string(box.lo[1]) + "," + std::to_string(box.lo[2])},
               {"hi", std::to_string(box.hi[0]) + "," + std::to_string(box.hi[1]) + "," + std::to_string(box.hi[2])}});
    return {std::move(v), std::move(m), box};
}

} // namespace strokeseg
