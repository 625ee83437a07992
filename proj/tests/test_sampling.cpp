#include <doctest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include "strokeseg/phantom.hpp"
#include "strokeseg/preprocess.hpp"
#include "strokeseg/sampling.hpp"

using namespace strokeseg;

namespace {

std::pair<Volume, Mask> processed_phantom(std::uint64_t seed)
{
    PhantomConfig pc;
    pc.seed = seed;
    auto [vol, mask] = generate_phantom(pc);
    PreprocessConfig cfg;
    cfg.standardize_first = true;
    auto [pv, pm, box] = run_pipeline(vol, mask, cfg);
    return {std::move(pv), std::move(pm)};
}

bool inside_window(const Dims3& origin, const Dims3& point, int p)
{
    for (int a = 0; a < 3; ++a)
        if (point[a] < origin[a] || point[a] >= origin[a] + p) return false;
    return true;
}

} // namespace

TEST_CASE("label map classes")
{
    Volume v = Volume::filled({3, 1, 1}, 0.0f, {1, 1, 1}, IntensityKind::Normalized);
    v.data = {0.3f, 0.0f, 0.6f};
    Mask m = Mask::zeros(v.dims);
    m.data = {1, 0, 0};
    const LabelMap lm = build_label_map(v, m);
    CHECK(lm.labels[0] == VoxelClass::Lesion);
    CHECK(lm.labels[1] == VoxelClass::Background);
    CHECK(lm.labels[2] == VoxelClass::Healthy);

    const auto [pv, pm] = processed_phantom(1);
    const LabelMap full = build_label_map(pv, pm);
    CHECK(full.count(VoxelClass::Background) + full.count(VoxelClass::Healthy) + full.count(VoxelClass::Lesion) ==
          pv.size());
    CHECK(full.count(VoxelClass::Lesion) == pm.count_ones());
    for (auto i : full.members[static_cast<int>(VoxelClass::Lesion)]) CHECK(pm.data[i] == 1);
}

TEST_CASE("uniform sampling of a volume equal to the patch returns the whole volume")
{
    Volume v = Volume::filled({8, 8, 8}, 0.0f, {1, 1, 1}, IntensityKind::Normalized);
    Rng fill(1);
    for (auto& x : v.data) x = static_cast<float>(fill.uniform());
    SamplerConfig cfg;
    cfg.patch_size = 8;
    cfg.patches_per_patient = 5;
    Rng r(2);
    for (const auto& p : uniform_sample(v, Mask::zeros(v.dims), cfg, r)) {
        CHECK(p.origin == Dims3{0, 0, 0});
        CHECK(p.image.data == v.data);
    }
}

TEST_CASE("extracted patches are exact sub-arrays")
{
    const auto [pv, pm] = processed_phantom(2);
    Rng r(3);
    for (int i = 0; i < 20; ++i) {
        const Dims3 o = draw_uniform_origin(pv.dims, 16, r);
        const Patch p = extract_patch(pv, pm, o, 16);
        CHECK(p.image.dims == Dims3{16, 16, 16});
        for (int z = 0; z < 16; z += 5)
            for (int y = 0; y < 16; y += 3)
                for (int x = 0; x < 16; ++x) {
                    CHECK(p.image.at(x, y, z) == pv.at(o[0] + x, o[1] + y, o[2] + z));
                    CHECK(p.mask.at(x, y, z) == pm.at(o[0] + x, o[1] + y, o[2] + z));
                }
    }
}

TEST_CASE("uniform origins pass a chi-squared test")
{
    const int p = 4;
    const Dims3 dims{2 * p, 2 * p, 2 * p};
    const int cells = (p + 1) * (p + 1) * (p + 1);
    std::vector<int> hist(cells, 0);
    Rng r(20240501);
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        const Dims3 o = draw_uniform_origin(dims, p, r);
        for (int a = 0; a < 3; ++a) REQUIRE((o[a] >= 0 && o[a] <= p));
        ++hist[o[0] + (p + 1) * (o[1] + (p + 1) * o[2])];
    }
    const double expected = static_cast<double>(draws) / cells;
    double chi2 = 0;
    for (int h : hist) chi2 += (h - expected) * (h - expected) / expected;
    const boost::math::chi_squared dist(cells - 1);
    CHECK(chi2 < boost::math::quantile(dist, 0.99));
}

TEST_CASE("weighted sampler draws lesion centres half of the time")
{
    const auto [pv, pm] = processed_phantom(3);
    const LabelMap lm = build_label_map(pv, pm);
    Rng r(99);
    int lesion = 0, background = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        const auto d = draw_weighted(lm, 16, ClassProbs{}, r);
        lesion += d.center_class == VoxelClass::Lesion;
        background += d.center_class == VoxelClass::Background;
        CHECK(lm.labels[linear_index(lm.dims, d.center[0], d.center[1], d.center[2])] == d.center_class);
        CHECK(inside_window(d.origin, d.center, 16));
    }
    CHECK(std::abs(static_cast<double>(lesion) / draws - 0.5) <= 0.03);
    CHECK(background == 0);
}

TEST_CASE("healthy-only probabilities only centre on healthy voxels")
{
    const auto [pv, pm] = processed_phantom(4);
    const LabelMap lm = build_label_map(pv, pm);
    Rng r(5);
    for (int i = 0; i < 500; ++i)
        CHECK(draw_weighted(lm, 16, ClassProbs{0.0, 1.0, 0.0}, r).center_class == VoxelClass::Healthy);
}

TEST_CASE("window clamping keeps the patch in bounds and around the centre")
{
    const Dims3 dims{40, 50, 30};
    CHECK(clamp_window({3, 25, 15}, dims, 16) == Dims3{0, 17, 7});
    CHECK(clamp_window({39, 49, 29}, dims, 16) == Dims3{24, 34, 14});
    Rng r(6);
    for (int i = 0; i < 1000; ++i) {
        const Dims3 c{r.uniform_int(0, 39), r.uniform_int(0, 49), r.uniform_int(0, 29)};
        const Dims3 o = clamp_window(c, dims, 16);
        CHECK(inside_window(o, c, 16));
        for (int a = 0; a < 3; ++a) CHECK((o[a] >= 0 && o[a] + 16 <= dims[a]));
    }
}

TEST_CASE("empty lesion class falls back to healthy with a warning")
{
    const auto [pv, pm] = processed_phantom(5);
    const Mask empty = Mask::zeros(pm.dims);
    const LabelMap lm = build_label_map(pv, empty);
    const ClassProbs eff = effective_class_probs(lm, ClassProbs{});
    CHECK(eff.lesion == 0.0);
    CHECK(eff.healthy == 1.0);

    std::vector<std::string> warnings;
    auto prev = set_log_sink([&](LogLevel l, std::string_view s) {
        if (l == LogLevel::Warn) warnings.emplace_back(s);
    });
    SamplerConfig cfg;
    Rng r(1);
    const auto patches = weighted_sample(pv, empty, lm, cfg, r);
    set_log_sink(prev);
    CHECK(patches.size() == 32);
    CHECK_FALSE(warnings.empty());
    for (const auto& p : patches) CHECK(p.center_class == VoxelClass::Healthy);

    const LabelMap nothing = build_label_map(Volume::filled({4, 4, 4}, 0.0f), Mask::zeros({4, 4, 4}));
    const ClassProbs only_bg = effective_class_probs(nothing, ClassProbs{0.0, 0.5, 0.5});
    CHECK(only_bg.background == 1.0);
    CHECK(only_bg.healthy == 0.0);
    CHECK(only_bg.lesion == 0.0);
}

TEST_CASE("samplers are deterministic in the seed")
{
    const auto [pv, pm] = processed_phantom(6);
    const LabelMap lm = build_label_map(pv, pm);
    SamplerConfig cfg;
    Rng a(11), b(11);
    const auto pa = weighted_sample(pv, pm, lm, cfg, a);
    const auto pb = weighted_sample(pv, pm, lm, cfg, b);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].origin == pb[i].origin);
        CHECK(pa[i].image.data == pb[i].image.data);
    }
    Rng c(12), d(12);
    const auto ua = uniform_sample(pv, pm, cfg, c);
    const auto ub = uniform_sample(pv, pm, cfg, d);
    for (std::size_t i = 0; i < ua.size(); ++i) CHECK(ua[i].origin == ub[i].origin);
}

TEST_CASE("volumes smaller than the patch are padded symmetrically")
{
    Volume v = Volume::filled({5, 16, 20}, 1.0f, {1, 1, 1}, IntensityKind::Normalized);
    Mask m = Mask::zeros(v.dims);
    const Dims3 off = pad_to_patch(v, m, 16);
    CHECK(off == Dims3{5, 0, 0});
    CHECK(v.dims == Dims3{16, 16, 20});
    CHECK(m.dims == v.dims);
    CHECK(v.at(4, 0, 0) == 0.0f);
    CHECK(v.at(5, 0, 0) == 1.0f);
    CHECK(v.at(9, 0, 0) == 1.0f);
    CHECK(v.at(10, 0, 0) == 0.0f);

    SamplerConfig cfg;
    Rng r(1);
    Volume small = Volume::filled({5, 6, 7}, 0.5f, {1, 1, 1}, IntensityKind::Normalized);
    for (const auto& p : uniform_sample(small, Mask::zeros(small.dims), cfg, r)) CHECK(p.image.dims == Dims3{16, 16, 16});
}

TEST_CASE("grid origins")
{
    CHECK(grid_axis_origins(128, 128, 96) == std::vector<std::int64_t>{0});
    CHECK(grid_axis_origins(256, 128, 96) == std::vector<std::int64_t>{0, 96, 128});
    CHECK(GridSpec{128, 0.25}.stride() == 96);
    CHECK(GridSpec{16, 0.75}.stride() == 4);
    CHECK(GridSpec{16, 0.99}.stride() == 1);
    CHECK_THROWS_AS((GridSpec{16, 1.0}.validate()), ConfigError);
    CHECK_THROWS_AS((GridSpec{16, -0.1}.validate()), ConfigError);
}

TEST_CASE("grid coverage is total and patch count grows with overlap")
{
    Rng r(2025);
    for (int trial = 0; trial < 50; ++trial) {
        const int p = static_cast<int>(r.uniform_int(2, 12));
        const Dims3 dims{r.uniform_int(p, 40), r.uniform_int(p, 40), r.uniform_int(p, 40)};
        const double overlap = r.uniform(0.0, 0.95);
        const auto patches = grid_patches(dims, GridSpec{p, overlap});
        std::vector<std::uint8_t> covered(static_cast<std::size_t>(voxel_count(dims)), 0);
        for (const auto& o : patches) {
            for (int a = 0; a < 3; ++a) REQUIRE((o[a] >= 0 && o[a] + p <= dims[a]));
            for (std::int64_t z = o[2]; z < o[2] + p; ++z)
                for (std::int64_t y = o[1]; y < o[1] + p; ++y)
                    for (std::int64_t x = o[0]; x < o[0] + p; ++x) covered[linear_index(dims, x, y, z)] = 1;
        }
        CHECK(std::all_of(covered.begin(), covered.end(), [](auto c) { return c == 1; }));

        std::size_t prev = 0;
        for (double ov = 0.0; ov < 0.96; ov += 0.05) {
            const std::size_t n = grid_patches(dims, GridSpec{p, ov}).size();
            CHECK(n >= prev);
            prev = n;
        }
    }
}
