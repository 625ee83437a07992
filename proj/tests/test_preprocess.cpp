#include <doctest.h>

#include <cmath>

#include "strokeseg/phantom.hpp"
#include "strokeseg/preprocess.hpp"
#include "test_support.hpp"

using namespace strokeseg;

namespace {

Volume line_volume(std::vector<float> values)
{
    Volume v = Volume::filled({static_cast<std::int64_t>(values.size()), 1, 1}, 0.0f);
    v.data = std::move(values);
    return v;
}

Volume random_hu(const Dims3& dims, std::uint64_t seed, double lo = -200.0, double hi = 300.0)
{
    Rng r(seed);
    Volume v = Volume::filled(dims, 0.0f);
    for (auto& x : v.data) x = static_cast<float>(std::round(r.uniform(lo, hi)));
    return v;
}

} // namespace

TEST_CASE("hu_window clamps into the window")
{
    const PreprocessConfig cfg;
    CHECK(hu_window(line_volume({-10, 40, 1000}), cfg).data == std::vector<float>{0, 40, 80});
    const Volume inside = line_volume({0, 12, 79.5f, 80});
    CHECK(hu_window(inside, cfg).data == inside.data);
    CHECK(hu_window(Volume::filled({3, 3, 3}, 500.0f), cfg).data == std::vector<float>(27, 80.0f));
}

TEST_CASE("hu_window is idempotent")
{
    const PreprocessConfig cfg;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const Volume once = hu_window(random_hu({6, 5, 4}, s, -2000, 2000), cfg);
        CHECK(hu_window(once, cfg) == once);
    }
}

TEST_CASE("largest component matches a flood-fill oracle on random slices")
{
    for (bool eight : {true, false}) {
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            Rng r(seed);
            const double density = r.uniform(0.2, 0.7);
            std::vector<std::uint8_t> fg(64 * 64);
            for (auto& v : fg) v = r.uniform() < density ? 1 : 0;
            const auto expected = testing::largest_component_oracle(fg, 64, 64, eight);
            auto got = fg;
            const auto kept =
                keep_largest_component(got, 64, 64, eight ? Connectivity::Eight : Connectivity::Four);
            CHECK(got == expected);
            CHECK(kept == std::count(expected.begin(), expected.end(), 1));
        }
    }
}

TEST_CASE("component selection on hand-built slices")
{
    SUBCASE("two blobs without skull keeps the larger")
    {
        std::vector<std::uint8_t> fg(20 * 20, 0);
        for (int y = 1; y < 6; ++y)
            for (int x = 1; x < 11; ++x) fg[x + 20 * y] = 1; // 50 pixels
        for (int y = 12; y < 14; ++y)
            for (int x = 12; x < 17; ++x) fg[x + 20 * y] = 1; // 10 pixels
        CHECK(keep_largest_component(fg, 20, 20, Connectivity::Eight) == 50);
        CHECK(fg[12 + 20 * 12] == 0);
        CHECK(fg[1 + 20 * 1] == 1);
    }
    SUBCASE("all zero slice stays zero")
    {
        std::vector<std::uint8_t> fg(16, 0);
        CHECK(keep_largest_component(fg, 4, 4, Connectivity::Eight) == 0);
        CHECK(std::all_of(fg.begin(), fg.end(), [](auto v) { return v == 0; }));
    }
    SUBCASE("diagonal neighbours join only under 8-connectivity")
    {
        std::vector<std::uint8_t> a{1, 0, 0, 1};
        auto b = a;
        CHECK(keep_largest_component(a, 2, 2, Connectivity::Eight) == 2);
        CHECK(keep_largest_component(b, 2, 2, Connectivity::Four) == 1);
        CHECK(b == std::vector<std::uint8_t>{1, 0, 0, 0});
    }
}

TEST_CASE("strip_skull keeps only the brain disk inside a skull ring")
{
    const int n = 32;
    Volume v = Volume::filled({n, n, 1}, -1000.0f);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const double r = std::hypot(x - 15.5, y - 15.5);
            if (r < 9.0) v.at(x, y, 0) = 30.0f;
            else if (r < 12.0) v.at(x, y, 0) = 900.0f;
        }
    const PreprocessConfig cfg;
    const Volume s = strip_skull(hu_window(v, cfg), cfg);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const double r = std::hypot(x - 15.5, y - 15.5);
            CHECK(s.at(x, y, 0) == (r < 9.0 ? 30.0f : 0.0f));
        }
}

TEST_CASE("strip_skull output is a masked copy of its input")
{
    const PreprocessConfig cfg;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Volume w = hu_window(random_hu({24, 24, 3}, seed), cfg);
        const Volume s = strip_skull(w, cfg);
        for (std::size_t i = 0; i < s.data.size(); ++i) {
            CHECK((s.data[i] == 0.0f || s.data[i] == w.data[i]));
            CHECK(s.data[i] < cfg.hu_hi);
        }
    }
}

TEST_CASE("strip_skull does not depend on the thread count")
{
    const PreprocessConfig cfg;
    const Volume w = hu_window(random_hu({32, 32, 9}, 5), cfg);
    set_max_threads(1);
    const Volume a = strip_skull(w, cfg);
    set_max_threads(3);
    const Volume b = strip_skull(w, cfg);
    set_max_threads(1);
    CHECK(a == b);
}

TEST_CASE("minmax_normalize")
{
    const Volume a = minmax_normalize(line_volume({0, 40, 80}));
    CHECK(a.data == std::vector<float>{0.0f, 0.5f, 1.0f});
    CHECK(a.kind == IntensityKind::Normalized);
    CHECK(minmax_normalize(line_volume({10, 20, 30})).data == std::vector<float>{0.0f, 0.5f, 1.0f});

    std::vector<std::string> warnings;
    auto prev = set_log_sink([&](LogLevel l, std::string_view s) {
        if (l == LogLevel::Warn) warnings.emplace_back(s);
    });
    const Volume c = minmax_normalize(Volume::filled({2, 2, 2}, 17.0f));
    set_log_sink(prev);
    CHECK(c.data == std::vector<float>(8, 0.0f));
    CHECK(warnings.size() == 1);

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Volume r = minmax_normalize(random_hu({7, 6, 5}, seed, -1e4, 1e4));
        const auto [mn, mx] = std::minmax_element(r.data.begin(), r.data.end());
        CHECK(std::abs(*mn) <= 1e-6);
        CHECK(std::abs(*mx - 1.0) <= 1e-6);
        CHECK(*mn >= 0.0f);
        CHECK(*mx <= 1.0f);
    }
}

TEST_CASE("zscore_brain")
{
    const Volume z = zscore_brain(line_volume({0, 1, 2, 3, 0}));
    CHECK(z.data[0] == 0.0f);
    CHECK(z.data[4] == 0.0f);
    CHECK(z.data[1] == doctest::Approx(-1.22474).epsilon(1e-4));
    CHECK(z.data[2] == doctest::Approx(0.0).scale(1e-6));
    CHECK(z.data[3] == doctest::Approx(1.22474).epsilon(1e-4));

    CHECK_THROWS_AS(zscore_brain(line_volume({0, 5, 5, 5})), Error);
    const Volume sym = zscore_brain(line_volume({10, 20, 30, 40, 0}));
    double s = 0;
    for (float v : sym.data) s += v;
    CHECK(std::abs(s / 4) <= 1e-6);

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Volume in = random_hu({16, 16, 4}, seed, 1, 79);
        Rng r0(seed + 100);
        for (auto& x : in.data)
            if (r0.uniform() < 0.3) x = 0.0f;
        const Volume r = zscore_brain(in);
        double sum = 0, sum2 = 0;
        std::int64_t n = 0;
        for (float v : r.data)
            if (v != 0.0f) {
                sum += v;
                sum2 += double(v) * v;
                ++n;
            }
        const double mean = sum / n;
        CHECK(std::abs(mean) <= 1e-5);
        CHECK(std::abs(std::sqrt(sum2 / n - mean * mean) - 1.0) <= 1e-5);
    }
}

TEST_CASE("crop to the non-zero box")
{
    Volume v = Volume::filled({8, 6, 4}, 0.0f);
    for (int z = 0; z <= 1; ++z)
        for (int y = 3; y <= 4; ++y)
            for (int x = 2; x <= 5; ++x) v.at(x, y, z) = 1.0f + x;
    const CropBox box = nonzero_box(v);
    CHECK(box.lo == Dims3{2, 3, 0});
    CHECK(box.extent() == Dims3{4, 2, 2});
    auto [cv, cm, b2] = crop_nonzero(v, Mask::zeros(v.dims));
    CHECK(cv.dims == Dims3{4, 2, 2});
    CHECK(b2 == box);
    CHECK(uncrop_volume(cv, box, v.dims).data == v.data);

    const Volume full = Volume::filled({3, 3, 3}, 2.0f);
    auto [fv, fm, fb] = crop_nonzero(full, Mask::zeros(full.dims));
    CHECK(fv.data == full.data);
    CHECK(fb.lo == Dims3{0, 0, 0});
    CHECK(fb.hi == full.dims);
    CHECK_THROWS_AS(crop_nonzero(Volume::filled({3, 3, 3}, 0.0f), Mask::zeros({3, 3, 3})), Error);
}

TEST_CASE("crop round-trips the stripped volume")
{
    const PreprocessConfig cfg;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto [vol, mask] = generate_phantom(testing::small_phantom({40, 40, 32}, seed));
        const Volume stripped = strip_skull(hu_window(vol, cfg), cfg);
        auto [cv, cm, box] = crop_nonzero(stripped, mask);
        CHECK(uncrop_volume(cv, box, stripped.dims).data == stripped.data);
        CHECK(uncrop_mask(cm, box, mask.dims).data == mask.data);
        CHECK(cm.count_ones() == mask.count_ones());
    }
}

TEST_CASE("run_pipeline on phantoms")
{
    for (bool standardize : {false, true}) {
        PreprocessConfig cfg;
        cfg.standardize_first = standardize;
        for (std::uint64_t seed = 0; seed < 4; ++seed) {
            PhantomConfig pc;
            pc.seed = seed;
            auto [vol, mask] = generate_phantom(pc);
            auto [pv, pm, box] = run_pipeline(vol, mask, cfg);
            CHECK(pv.kind == IntensityKind::Normalized);
            CHECK_NOTHROW(pv.validate());
            CHECK(pm.count_ones() == mask.count_ones());
            REQUIRE(pv.crop.has_value());
            CHECK(pv.crop->origin == box.lo);
            CHECK(pv.crop->source_dims == vol.dims);
            // No skull left: every retained voxel came from a sub-window HU value.
            const Volume stripped = strip_skull(hu_window(vol, cfg), cfg);
            const Volume cs = crop_volume(stripped, box);
            for (std::size_t i = 0; i < cs.data.size(); ++i) {
                CHECK(cs.data[i] < cfg.hu_hi);
                if (cs.data[i] == 0.0f) CHECK(pv.data[i] == 0.0f);
            }
        }
    }
}
