#include <doctest.h>

#include <cmath>

#include "strokeseg/network.hpp"
#include "test_support.hpp"

using namespace strokeseg;
using namespace strokeseg::ad;
using strokeseg::testing::TempDir;

namespace {

template <class T>
Tensor<T> random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0)
{
    Rng r(seed);
    std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(r.uniform(lo, hi));
    return Tensor<T>::from_data(shape, std::move(v));
}

UNetConfig small_config()
{
    UNetConfig c;
    c.levels = 2;
    c.base_channels = 2;
    c.patch_size = 8;
    c.se_reduction = 2;
    return c;
}

template <class T>
bool same_values(const Tensor<T>& a, const Tensor<T>& b)
{
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

} // namespace

TEST_CASE("se bottleneck width")
{
    CHECK(se_hidden_width(32, 16) == 2);
    CHECK(se_hidden_width(8, 16) == 1);
    CHECK(se_hidden_width(17, 16) == 2);
}

TEST_CASE("se with zero weights halves its input")
{
    SEBlock<double> se;
    se.channels = 4;
    se.reduction = 2;
    se.w1 = Tensor<double>::zeros({2, 4});
    se.w2 = Tensor<double>::zeros({4, 2});
    const auto t = random_tensor<double>({2, 4, 2, 3, 2}, 1);
    const auto y = se_forward(t, se);
    for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(y.data()[i] == 0.5 * t.data()[i]);
}

TEST_CASE("se matches a scalar evaluation of the recalibration")
{
    SEBlock<double> se;
    se.channels = 2;
    se.reduction = 16;
    se.w1 = Tensor<double>::from_data({1, 2}, {0.8, -0.3});
    se.w2 = Tensor<double>::from_data({2, 1}, {1.5, -2.0});
    const auto t = random_tensor<double>({1, 2, 2, 2, 2}, 5, 0, 2);
    double u0 = 0, u1 = 0;
    for (int i = 0; i < 8; ++i) {
        u0 += t.data()[i] / 8;
        u1 += t.data()[8 + i] / 8;
    }
    const double z = std::max(0.0, 0.8 * u0 - 0.3 * u1);
    const double s0 = 1 / (1 + std::exp(-1.5 * z)), s1 = 1 / (1 + std::exp(2.0 * z));
    const auto y = se_forward(t, se);
    for (int i = 0; i < 8; ++i) {
        CHECK(std::abs(y.data()[i] - s0 * t.data()[i]) <= 1e-6);
        CHECK(std::abs(y.data()[8 + i] - s1 * t.data()[8 + i]) <= 1e-6);
    }
}

TEST_CASE("se scales lie strictly inside (0, 1)")
{
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SEBlock<float> se;
        se.channels = 16;
        se.w1 = random_tensor<float>({1, 16}, seed, -2, 2);
        se.w2 = random_tensor<float>({16, 1}, seed + 1, -2, 2);
        const auto t = random_tensor<float>({2, 16, 4, 4, 4}, seed + 2, -3, 3);
        const auto s = se_scales(t, se);
        for (float v : s.data()) {
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
        }
        const auto y = se_forward(t, se);
        CHECK(y.shape() == t.shape());
        float mt = 0, my = 0;
        for (float v : t.data()) mt = std::max(mt, std::abs(v));
        for (float v : y.data()) my = std::max(my, std::abs(v));
        CHECK(my <= mt);
    }
}

TEST_CASE("block with a silenced main path reduces to the shortcut")
{
    UNetConfig cfg = small_config();
    const UNet3D<double> net(cfg, 3);
    ConvBlock<double> blk = net.encoder()[0];
    blk.norm2.gamma = Tensor<double>::zeros({blk.out_channels});
    blk.norm2.beta = Tensor<double>::zeros({blk.out_channels});
    REQUIRE(blk.shortcut.has_value());
    const auto x = random_tensor<double>({1, 1, 6, 6, 6}, 4);
    const auto y = conv_block_forward(x, blk, cfg);
    const auto expected = leaky_relu((*blk.shortcut)(x), cfg.leaky_slope);
    CHECK(y.shape() == Shape{1, 2, 6, 6, 6});
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(expected.data()[i]).epsilon(1e-12));
}

TEST_CASE("conv block preserves spatial dims")
{
    UNetConfig cfg;
    cfg.levels = 2;
    cfg.base_channels = 8;
    cfg.patch_size = 16;
    const UNet3D<float> net(cfg, 1);
    const auto x = random_tensor<float>({1, 8, 16, 16, 16}, 2);
    const auto y = conv_block_forward(x, net.encoder()[1], cfg);
    CHECK(y.shape() == Shape{1, 16, 16, 16, 16});
}

TEST_CASE("desk network maps patches to logits of the same shape")
{
    UNetConfig cfg; // levels 3, base 8, P 16
    const UNet3D<float> net(cfg, 9);
    const auto x = random_tensor<float>({2, 1, 16, 16, 16}, 1, 0, 1);
    NoGradGuard ng;
    const auto y = net.forward(x);
    CHECK(y.shape() == Shape{2, 1, 16, 16, 16});
    for (float v : y.data()) CHECK(std::isfinite(v));
}

TEST_CASE("shape preservation for every valid patch size")
{
    for (int levels : {2, 3}) {
        for (int p : {4, 8, 12}) {
            UNetConfig cfg;
            cfg.levels = levels;
            cfg.base_channels = 2;
            cfg.patch_size = p;
            cfg.se_reduction = 2;
            if (p % (1 << (levels - 1)) != 0 || p < (2 << (levels - 1))) {
                CHECK_THROWS_AS(cfg.validate(), ConfigError);
                continue;
            }
            const UNet3D<float> net(cfg, 1);
            NoGradGuard ng;
            CHECK(net.forward(random_tensor<float>({1, 1, p, p, p}, 2)).shape() == Shape{1, 1, p, p, p});
        }
    }
    UNetConfig bad;
    bad.patch_size = 10;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("full-scale configuration constructs")
{
    UNetConfig cfg;
    cfg.levels = 4;
    cfg.base_channels = 32;
    cfg.patch_size = 128;
    const UNet3D<float> net(cfg, 0);
    CHECK(net.parameter_count() > 5'000'000);
    CHECK(net.encoder().size() == 4);
    CHECK(net.decoder().size() == 3);
    CHECK(net.encoder()[3].out_channels == 256);
}

TEST_CASE("all-zero parameters give zero logits")
{
    UNet3D<float> net(UNetConfig{}, 4);
    net.fill_parameters(0.0f);
    NoGradGuard ng;
    const auto y = net.forward(random_tensor<float>({1, 1, 16, 16, 16}, 3));
    CHECK(std::all_of(y.data().begin(), y.data().end(), [](float v) { return v == 0.0f; }));
    const auto p = sigmoid(y);
    CHECK(std::all_of(p.data().begin(), p.data().end(), [](float v) { return v == 0.5f; }));
}

TEST_CASE("initialization is a function of the seed")
{
    const auto x = random_tensor<float>({1, 1, 8, 8, 8}, 1);
    const UNet3D<float> a(small_config(), 77), b(small_config(), 77), c(small_config(), 78);
    NoGradGuard ng;
    CHECK(same_values(a.forward(x), b.forward(x)));
    CHECK_FALSE(same_values(a.forward(x), c.forward(x)));
}

TEST_CASE("checkpoints round-trip forward outputs bit-exactly")
{
    TempDir d("net");
    UNetConfig cfg;
    const UNet3D<float> net(cfg, 21);
    OptimizerBlobs blobs;
    blobs.step = 12;
    for (const auto& p : net.parameters()) {
        blobs.first_moment.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.25f);
        blobs.second_moment.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.5f);
    }
    save_checkpoint(net, d / "a.svck", 345, &blobs);
    const auto loaded = load_checkpoint<float>(d / "a.svck", &cfg);
    CHECK(loaded.iteration == 345);
    REQUIRE(loaded.optimizer.has_value());
    CHECK(loaded.optimizer->step == 12);
    CHECK(loaded.optimizer->second_moment == blobs.second_moment);
    CHECK(loaded.model.config() == cfg);
    const auto x = random_tensor<float>({2, 1, 16, 16, 16}, 8);
    NoGradGuard ng;
    CHECK(same_values(net.forward(x), loaded.model.forward(x)));

    save_checkpoint(net, d / "plain.svck");
    CHECK_FALSE(load_checkpoint<float>(d / "plain.svck").optimizer.has_value());
}

TEST_CASE("corrupt or mismatched checkpoints are rejected")
{
    TempDir d("net");
    const UNet3D<float> net(small_config(), 1);
    save_checkpoint(net, d / "c.svck");
    auto bytes = read_file_bytes(d / "c.svck");

    UNetConfig other = small_config();
    other.base_channels = 4;
    CHECK_THROWS_AS(load_checkpoint<float>(d / "c.svck", &other), Error);

    auto truncated = bytes;
    truncated.resize(bytes.size() - 7);
    write_file_bytes(d / "t.svck", truncated);
    CHECK_THROWS_AS(load_checkpoint<float>(d / "t.svck"), Error);

    auto trailing = bytes;
    trailing.push_back(0);
    write_file_bytes(d / "x.svck", trailing);
    CHECK_THROWS_AS(load_checkpoint<float>(d / "x.svck"), Error);

    auto magic = bytes;
    magic[0] = 'X';
    write_file_bytes(d / "m.svck", magic);
    CHECK_THROWS_AS(load_checkpoint<float>(d / "m.svck"), Error);
    CHECK_THROWS_AS(load_checkpoint<float>(d / "none.svck"), Error);
}

TEST_CASE("config json round-trip")
{
    UNetConfig c = small_config();
    c.se_placement = SePlacement::AfterResidualAdd;
    c.use_se = false;
    nlohmann::json j = c;
    CHECK(j.get<UNetConfig>() == c);
}
