#include "strokeseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "strokeseg/training.hpp"

namespace strokeseg {

void PhantomConfig::validate() const
{
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < 32) throw ConfigError("phantom: every axis needs at least 32 voxels");
        if (!(spacing[a] > 0.0)) throw ConfigError("phantom: spacing must be positive");
    }
    if (!(skull_thickness >= 1.0)) throw ConfigError("phantom: skull_thickness must be >= 1");
    if (!(csf_gap >= 0.0)) throw ConfigError("phantom: csf_gap must be >= 0");
    if (!(brain_noise_sd >= 0.0) || !(white_noise_sd >= 0.0)) throw ConfigError("phantom: noise sd must be >= 0");
    if (noise_cell < 2) throw ConfigError("phantom: noise_cell must be >= 2");
    if (!(brain_hu_min < brain_hu_max)) throw ConfigError("phantom: brain_hu_min must be below brain_hu_max");
    if (lesion_count_min < 1 || lesion_count_max < lesion_count_min)
        throw ConfigError("phantom: lesion counts must satisfy 1 <= min <= max");
    if (!(lesion_radius_min >= 1.0) || lesion_radius_max < lesion_radius_min)
        throw ConfigError("phantom: lesion radii must satisfy 1 <= min <= max");
    if (!(lesion_fraction_min >= 0.0) || !(lesion_fraction_max > lesion_fraction_min) || lesion_fraction_max > 1.0)
        throw ConfigError("phantom: lesion fraction range must satisfy 0 <= min < max <= 1");
    if (max_retries < 1) throw ConfigError("phantom: max_retries must be positive");
}

namespace {

struct Geometry {
    std::array<double, 3> center{};
    std::array<double, 3> outer{}; // skull outer semi-axes
};

Geometry draw_geometry(const PhantomConfig& cfg, Rng& rng)
{
    static constexpr double kAxisFrac[3] = {0.36, 0.38, 0.35};
    Geometry g;
    for (int a = 0; a < 3; ++a) {
        const double d = static_cast<double>(cfg.dims[a]);
        g.center[a] = d / 2.0 + rng.uniform(-1.5, 1.5);
        g.outer[a] = d * (kAxisFrac[a] + rng.uniform(-0.02, 0.02));
    }
    return g;
}

// Normalized ellipsoid radius of voxel centre p for semi-axes shrunk by `inset`.
double ellipsoid_radius(const Geometry& g, double inset, std::int64_t x, std::int64_t y, std::int64_t z)
{
    const double p[3] = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
        const double t = (p[a] - g.center[a]) / (g.outer[a] - inset);
        s += t * t;
    }
    return std::sqrt(s);
}

double approx_normal(Rng& rng)
{
    double s = 0.0;
    for (int i = 0; i < 12; ++i) s += rng.uniform();
    return s - 6.0;
}

struct Lattice {
    Dims3 n{};
    int cell = 8;
    std::vector<double> v;

    double at(std::int64_t i, std::int64_t j, std::int64_t k) const { return v[(k * n[1] + j) * n[0] + i]; }

    double sample(std::int64_t x, std::int64_t y, std::int64_t z) const
    {
        const double f[3] = {static_cast<double>(x) / cell, static_cast<double>(y) / cell,
                             static_cast<double>(z) / cell};
        std::int64_t i0[3];
        double w[3];
        for (int a = 0; a < 3; ++a) {
            i0[a] = static_cast<std::int64_t>(std::floor(f[a]));
            w[a] = f[a] - static_cast<double>(i0[a]);
        }
        double out = 0.0;
        for (int c = 0; c < 8; ++c) {
            const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
            const double wt = (dx ? w[0] : 1 - w[0]) * (dy ? w[1] : 1 - w[1]) * (dz ? w[2] : 1 - w[2]);
            out += wt * at(i0[0] + dx, i0[1] + dy, i0[2] + dz);
        }
        return out;
    }
};

struct Lesion {
    std::array<double, 3> center{};
    std::array<double, 3> radius{};
};

// Soft membership: 1 inside, fading to 0 over one voxel around the surface.
double lesion_weight(const Lesion& l, std::int64_t x, std::int64_t y, std::int64_t z)
{
    const double p[3] = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
    double q = 0.0;
    for (int a = 0; a < 3; ++a) {
        const double t = (p[a] - l.center[a]) / l.radius[a];
        q += t * t;
    }
    q = std::sqrt(q);
    const double mean_r = (l.radius[0] + l.radius[1] + l.radius[2]) / 3.0;
    return std::clamp((1.0 - q) * mean_r + 0.5, 0.0, 1.0);
}

double brain_inset(const PhantomConfig& cfg) { return cfg.skull_thickness + cfg.csf_gap; }

} // namespace

Mask phantom_brain_mask(const PhantomConfig& cfg)
{
    cfg.validate();
    Rng rng(cfg.seed);
    const Geometry g = draw_geometry(cfg, rng);
    Mask m = Mask::zeros(cfg.dims, cfg.spacing);
    const double inset = brain_inset(cfg);
    for (std::int64_t z = 0; z < cfg.dims[2]; ++z)
        for (std::int64_t y = 0; y < cfg.dims[1]; ++y)
            for (std::int64_t x = 0; x < cfg.dims[0]; ++x)
                if (ellipsoid_radius(g, inset, x, y, z) <= 1.0) m.at(x, y, z) = 1;
    return m;
}

std::pair<Volume, Mask> generate_phantom(const PhantomConfig& cfg, PhantomStats* stats)
{
    cfg.validate();
    Rng rng(cfg.seed);
    const Geometry g = draw_geometry(cfg, rng);
    const Dims3 d = cfg.dims;
    const Mask brain = [&] {
        Mask m = Mask::zeros(d, cfg.spacing);
        const double inset = brain_inset(cfg);
        for (std::int64_t z = 0; z < d[2]; ++z)
            for (std::int64_t y = 0; y < d[1]; ++y)
                for (std::int64_t x = 0; x < d[0]; ++x)
                    if (ellipsoid_radius(g, inset, x, y, z) <= 1.0) m.at(x, y, z) = 1;
        return m;
    }();
    const std::int64_t brain_voxels = brain.count_ones();
    if (brain_voxels == 0) throw Error("phantom: brain region is empty");

    Lattice lat;
    lat.cell = cfg.noise_cell;
    for (int a = 0; a < 3; ++a) lat.n[a] = d[a] / cfg.noise_cell + 2;
    lat.v.resize(static_cast<std::size_t>(voxel_count(lat.n)));
    // Uniform lattice values with the configured standard deviation.
    for (auto& v : lat.v) v = cfg.brain_noise_sd * std::sqrt(3.0) * rng.uniform(-1.0, 1.0);

    // Lesions: redraw the whole set until it fits inside the brain and the
    // lesion fraction falls in range.
    std::vector<Lesion> lesions;
    std::vector<double> weight;
    std::int64_t lesion_voxels = 0;
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
        lesions.clear();
        const int count = static_cast<int>(rng.uniform_int(cfg.lesion_count_min, cfg.lesion_count_max));
        bool inside = true;
        for (int i = 0; i < count && inside; ++i) {
            Lesion l;
            for (int a = 0; a < 3; ++a) l.radius[a] = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
            const auto& members = brain.data;
            // Centre: a uniformly drawn brain voxel.
            std::int64_t idx = 0;
            do {
                idx = static_cast<std::int64_t>(rng.uniform_index(members.size()));
            } while (!members[static_cast<std::size_t>(idx)]);
            l.center = {static_cast<double>(idx % d[0]), static_cast<double>((idx / d[0]) % d[1]),
                        static_cast<double>(idx / (d[0] * d[1]))};
            lesions.push_back(l);
        }
        weight.assign(static_cast<std::size_t>(voxel_count(d)), 0.0);
        lesion_voxels = 0;
        for (const auto& l : lesions) {
            std::int64_t lo[3], hi[3];
            for (int a = 0; a < 3; ++a) {
                lo[a] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(l.center[a] - l.radius[a] - 2)));
                hi[a] = std::min<std::int64_t>(d[a] - 1, static_cast<std::int64_t>(std::ceil(l.center[a] + l.radius[a] + 2)));
            }
            for (std::int64_t z = lo[2]; z <= hi[2] && inside; ++z)
                for (std::int64_t y = lo[1]; y <= hi[1] && inside; ++y)
                    for (std::int64_t x = lo[0]; x <= hi[0]; ++x) {
                        const double w = lesion_weight(l, x, y, z);
                        if (w <= 0.0) continue;
                        const auto i = static_cast<std::size_t>(linear_index(d, x, y, z));
                        if (!brain.data[i]) {
                            inside = false;
                            break;
                        }
                        weight[i] = std::max(weight[i], w);
                    }
        }
        if (!inside) continue;
        for (double w : weight) lesion_voxels += w >= 0.5 ? 1 : 0;
        const double frac = static_cast<double>(lesion_voxels) / static_cast<double>(brain_voxels);
        placed = frac >= cfg.lesion_fraction_min && frac <= cfg.lesion_fraction_max;
    }
    if (!placed)
        throw Error("phantom: no feasible lesion placement after " + std::to_string(cfg.max_retries) + " attempts");

    Volume vol = Volume::filled(d, 0.0f, cfg.spacing, IntensityKind::HU);
    vol.dtype = DType::I16;
    Mask mask = Mask::zeros(d, cfg.spacing);
    const double skull_inset = cfg.skull_thickness;
    for (std::int64_t z = 0; z < d[2]; ++z)
        for (std::int64_t y = 0; y < d[1]; ++y)
            for (std::int64_t x = 0; x < d[0]; ++x) {
                const auto i = static_cast<std::size_t>(linear_index(d, x, y, z));
                const double white = cfg.white_noise_sd * approx_normal(rng);
                double hu = cfg.air_hu;
                if (brain.data[i]) {
                    hu = cfg.brain_hu + lat.sample(x, y, z) + white + cfg.lesion_offset_hu * weight[i];
                    hu = std::clamp(hu, cfg.brain_hu_min, cfg.brain_hu_max);
                    mask.data[i] = weight[i] >= 0.5 ? 1 : 0;
                } else if (ellipsoid_radius(g, skull_inset, x, y, z) <= 1.0) {
                    hu = cfg.csf_hu + white;
                } else if (ellipsoid_radius(g, 0.0, x, y, z) <= 1.0) {
                    hu = cfg.skull_hu + 10.0 * white;
                }
                vol.data[i] = static_cast<float>(std::lround(hu));
            }

    if (cfg.head_coil) {
        // Slab below the head, separated from the skull by at least two voxels of air.
        const std::int64_t head_max_y = static_cast<std::int64_t>(std::ceil(g.center[1] + g.outer[1]));
        const std::int64_t y0 = d[1] - 3;
        if (y0 - head_max_y >= 2) {
            const std::int64_t x0 = d[0] / 6, x1 = d[0] - d[0] / 6;
            for (std::int64_t z = 0; z < d[2]; ++z)
                for (std::int64_t y = y0; y < y0 + 2; ++y)
                    for (std::int64_t x = x0; x < x1; ++x) vol.at(x, y, z) = static_cast<float>(cfg.coil_hu);
        }
    }

    if (stats) *stats = {brain_voxels, lesion_voxels, static_cast<int>(lesions.size())};
    return {std::move(vol), std::move(mask)};
}

Manifest generate_corpus(int n, const PhantomConfig& cfg, const std::filesystem::path& out_dir)
{
    if (n < 2) throw ConfigError("phantom corpus needs at least 2 patients");
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    Manifest m;
    std::vector<std::string> ids;
    std::int64_t lesion = 0, brain = 0, total = 0;
    for (int i = 0; i < n; ++i) {
        PhantomConfig pc = cfg;
        pc.seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(i)});
        PhantomStats st;
        auto [vol, mask] = generate_phantom(pc, &st);
        char id[32];
        std::snprintf(id, sizeof id, "P%03d", i);
        const auto vpath = out_dir / (std::string(id) + "_ct");
        const auto mpath = out_dir / (std::string(id) + "_mask");
        save_volume(vol, vpath);
        save_mask(mask, mpath);
        m.entries.push_back({id, vpath, mpath, std::nullopt});
        ids.push_back(id);
        lesion += st.lesion_voxels;
        brain += st.brain_voxels;
        total += vol.size();
    }
    const FoldSplit split = kfold_split(ids, std::min(5, n), derive_seed(cfg.seed, {0x666f6c64}));
    for (auto& e : m.entries) e.fold = split.fold_of(e.patient_id);
    save_manifest(m, out_dir / "manifest.csv");
    log_event(LogLevel::Info, "corpus_written",
              {{"patients", to_field(n)},
               {"lesion_fraction_of_brain", to_field(static_cast<double>(lesion) / static_cast<double>(brain))},
               {"lesion_fraction_of_volume", to_field(static_cast<double>(lesion) / static_cast<double>(total))},
               {"dir", out_dir.string()}});
    return m;
}

} // namespace strokeseg
