#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "strokeseg/volume_io.hpp"
#include "test_support.hpp"

using namespace strokeseg;
using strokeseg::testing::TempDir;

namespace {

void write_text(const std::filesystem::path& p, const std::string& s)
{
    std::ofstream out(p);
    out << s;
}

Volume random_volume(const Dims3& dims, std::uint64_t seed)
{
    Rng r(seed);
    Volume v = Volume::filled(dims, 0.0f);
    for (auto& x : v.data) x = static_cast<float>(r.uniform(-1000.0, 1000.0));
    return v;
}

} // namespace

TEST_CASE("sidecar with matching raw length loads")
{
    TempDir d("vio");
    write_text(d / "v.json", R"({"dims":[4,4,2],"spacing":[1,1,1],"dtype":"f32le","kind":"hu"})");
    std::vector<std::uint8_t> raw(32 * 4, 0);
    write_file_bytes(d / "v.raw", raw);
    const Volume v = load_volume(d / "v");
    CHECK(v.size() == 32);
    CHECK(v.data.size() == 32);
}

TEST_CASE("raw length mismatch is rejected")
{
    TempDir d("vio");
    write_text(d / "v.json", R"({"dims":[4,4,2],"spacing":[1,1,1],"dtype":"f32le","kind":"hu"})");
    write_file_bytes(d / "v.raw", std::vector<std::uint8_t>(31 * 4, 0));
    CHECK_THROWS_AS(load_volume(d / "v"), Error);
}

TEST_CASE("malformed sidecars are rejected")
{
    TempDir d("vio");
    write_file_bytes(d / "v.raw", std::vector<std::uint8_t>(8 * 4, 0));
    write_text(d / "v.json", "{not json");
    CHECK_THROWS_AS(load_volume(d / "v"), Error);
    write_text(d / "v.json", R"({"dims":[2,2,2],"spacing":[1,1,0],"dtype":"f32le","kind":"hu"})");
    CHECK_THROWS_AS(load_volume(d / "v"), Error);
    write_text(d / "v.json", R"({"dims":[2,2,2],"spacing":[1,1,1],"dtype":"f64le","kind":"hu"})");
    CHECK_THROWS_AS(load_volume(d / "v"), Error);
    CHECK_THROWS_AS(load_volume(d / "missing"), Error);
}

TEST_CASE("constant-zero volume writes zero floats")
{
    TempDir d("vio");
    save_volume(Volume::filled({2, 2, 2}, 0.0f), d / "z");
    const auto bytes = read_file_bytes(d / "z.raw");
    CHECK(bytes.size() == 32);
    CHECK(std::all_of(bytes.begin(), bytes.end(), [](std::uint8_t b) { return b == 0; }));
}

TEST_CASE("spacing and dtype tags are recorded exactly")
{
    TempDir d("vio");
    Volume v = Volume::filled({3, 2, 1}, 7.0f, {0.5, 0.5, 1.0});
    v.dtype = DType::I16;
    save_volume(v, d / "s");
    std::ifstream in(d / "s.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j.at("spacing").get<std::vector<double>>() == std::vector<double>{0.5, 0.5, 1.0});
    CHECK(j.at("dtype") == "i16le");
    CHECK(j.at("kind") == "hu");
    CHECK(read_file_bytes(d / "s.raw").size() == 12);
}

TEST_CASE("golden little-endian bytes")
{
    TempDir d("vio");
    Volume f = Volume::filled({2, 1, 1}, 0.0f);
    f.data = {1.0f, -2.5f};
    save_volume(f, d / "f");
    const std::vector<std::uint8_t> f_expected{0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0};
    CHECK(read_file_bytes(d / "f.raw") == f_expected);

    Volume i = Volume::filled({3, 1, 1}, 0.0f);
    i.dtype = DType::I16;
    i.data = {1.0f, -2.0f, 258.0f};
    save_volume(i, d / "i");
    const std::vector<std::uint8_t> i_expected{0x01, 0x00, 0xfe, 0xff, 0x02, 0x01};
    CHECK(read_file_bytes(d / "i.raw") == i_expected);

    std::vector<std::uint8_t> buf;
    le::put_u32(buf, 0x01020304u);
    le::put_u16(buf, 0xa0b0u);
    CHECK(buf == std::vector<std::uint8_t>{0x04, 0x03, 0x02, 0x01, 0xb0, 0xa0});
    std::size_t pos = 0;
    CHECK(le::get_u32(buf, pos) == 0x01020304u);
    CHECK(le::get_u16(buf, pos) == 0xa0b0u);
    CHECK_THROWS_AS(le::get_u16(buf, pos), Error);
}

TEST_CASE("volume and mask round-trip bit-exactly")
{
    TempDir d("vio");
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Volume v = random_volume({5, 4, 3}, seed);
        v.spacing = {0.38, 0.45, 1.0};
        v.crop = CropInfo{{1, 2, 3}, {9, 9, 9}};
        save_volume(v, d / "v");
        const Volume back = load_volume(d / "v");
        CHECK(back == v);
        CHECK(std::memcmp(back.data.data(), v.data.data(), v.data.size() * 4) == 0);
        const auto raw1 = read_file_bytes(d / "v.raw");
        save_volume(back, d / "v2");
        CHECK(read_file_bytes(d / "v2.raw") == raw1);

        Volume h = Volume::filled({4, 4, 4}, 0.0f);
        Rng r(seed);
        for (auto& x : h.data) x = static_cast<float>(r.uniform_int(-32768, 32767));
        h.dtype = DType::I16;
        save_volume(h, d / "h");
        CHECK(load_volume(d / "h") == h);

        Mask m = Mask::zeros({4, 3, 2});
        for (auto& x : m.data) x = static_cast<std::uint8_t>(r.uniform_index(2));
        save_mask(m, d / "m");
        CHECK(load_mask(d / "m") == m);
    }
}

TEST_CASE("normalized volumes must lie in the unit interval")
{
    Volume v = Volume::filled({2, 2, 2}, 0.5f, {1, 1, 1}, IntensityKind::Normalized);
    CHECK_NOTHROW(v.validate());
    v.data[3] = 1.5f;
    CHECK_THROWS_AS(v.validate(), Error);
    Volume i = Volume::filled({2, 2, 2}, 0.5f);
    i.dtype = DType::I16;
    CHECK_THROWS_AS(i.validate(), Error);
}

TEST_CASE("validate_pair checks dims and binarity")
{
    const Volume v = Volume::filled({4, 4, 4}, 1.0f);
    Mask m = Mask::zeros({4, 4, 4});
    m.data[5] = 1;
    CHECK_NOTHROW(validate_pair(v, m));
    CHECK_THROWS_AS(validate_pair(v, Mask::zeros({4, 4, 2})), Error);
    m.data[6] = 2;
    CHECK_THROWS_AS(validate_pair(v, m), Error);
}

TEST_CASE("manifest loading")
{
    TempDir d("vio");
    save_volume(Volume::filled({2, 2, 2}, 0.0f), d / "a_ct");
    save_mask(Mask::zeros({2, 2, 2}), d / "a_mask");

    SUBCASE("81 rows keep order and folds")
    {
        std::string csv = "patient_id,volume_path,mask_path,fold\n";
        for (int i = 0; i < 81; ++i) csv += "P" + std::to_string(i) + ",a_ct,a_mask," + std::to_string(i % 5) + "\n";
        write_text(d / "m.csv", csv);
        const Manifest m = load_manifest(d / "m.csv");
        REQUIRE(m.entries.size() == 81);
        for (int i = 0; i < 81; ++i) {
            CHECK(m.entries[i].patient_id == "P" + std::to_string(i));
            CHECK(m.entries[i].fold == i % 5);
        }
        CHECK(m.entries[0].volume_path == d.path() / "a_ct");
        CHECK(m.find("P17").fold == 2);
        CHECK_THROWS_AS(m.find("nobody"), Error);
    }
    SUBCASE("empty file gives an empty manifest")
    {
        write_text(d / "m.csv", "");
        CHECK(load_manifest(d / "m.csv").entries.empty());
    }
    SUBCASE("duplicate patient id")
    {
        write_text(d / "m.csv", "patient_id,volume_path,mask_path,fold\nA,a_ct,a_mask,0\nA,a_ct,a_mask,1\n");
        CHECK_THROWS_AS(load_manifest(d / "m.csv"), Error);
    }
    SUBCASE("missing referenced file")
    {
        write_text(d / "m.csv", "patient_id,volume_path,mask_path,fold\nA,nope,a_mask,0\n");
        CHECK_THROWS_AS(load_manifest(d / "m.csv"), Error);
    }
    SUBCASE("bad header and bad fold")
    {
        write_text(d / "m.csv", "id,v,m,f\n");
        CHECK_THROWS_AS(load_manifest(d / "m.csv"), Error);
        write_text(d / "m.csv", "patient_id,volume_path,mask_path,fold\nA,a_ct,a_mask,x\n");
        CHECK_THROWS_AS(load_manifest(d / "m.csv"), Error);
    }
    SUBCASE("save and reload")
    {
        Manifest m;
        m.entries.push_back({"A", d.path() / "a_ct", d.path() / "a_mask", 3});
        m.entries.push_back({"B", d.path() / "a_ct", d.path() / "a_mask", std::nullopt});
        save_manifest(m, d / "out.csv");
        const Manifest back = load_manifest(d / "out.csv");
        REQUIRE(back.entries.size() == 2);
        CHECK(back.entries[0].fold == 3);
        CHECK_FALSE(back.entries[1].fold.has_value());
        CHECK(back.entries[1].mask_path.lexically_normal() == (d.path() / "a_mask").lexically_normal());
    }
}
