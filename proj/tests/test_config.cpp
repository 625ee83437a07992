#include <doctest.h>

#include <fstream>

#include "strokeseg/config.hpp"
#include "test_support.hpp"

using namespace strokeseg;
using strokeseg::testing::TempDir;

TEST_CASE("desk preset")
{
    const RunConfig c = preset("desk");
    CHECK(c.unet.levels == 3);
    CHECK(c.unet.base_channels == 8);
    CHECK(c.unet.patch_size == 16);
    CHECK(c.optim.total_iterations == 2000);
    CHECK(c.optim.batch_size == 2);
    CHECK(c.sampler.kind == SamplerKind::Weighted);
    CHECK(c.loss.weighted);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("full-scale preset")
{
    const RunConfig c = preset("paper");
    CHECK(c.unet.patch_size == 128);
    CHECK(c.sampler.patch_size == 128);
    CHECK(c.optim.total_iterations == 40000);
    CHECK(c.optim.batch_size == 2);
    CHECK(c.sampler.patches_per_patient == 32);
    CHECK(c.optim.lr0 == 1e-4);
    CHECK(c.sampler.class_probs == ClassProbs{0.0, 0.5, 0.5});
    CHECK_NOTHROW(c.validate());
    CHECK_THROWS_AS(preset("laptop"), ConfigError);
}

TEST_CASE("json round-trip and partial overlay")
{
    const RunConfig base = preset("desk");
    const RunConfig back = merge_json(RunConfig{}, to_json(base));
    CHECK(to_json(back) == to_json(base));

    const auto j = nlohmann::json::parse(R"({"seed": 9, "optim": {"lr0": 0.01}, "unet": {"use_se": false}})");
    const RunConfig m = merge_json(base, j);
    CHECK(m.seed == 9);
    CHECK(m.optim.lr0 == 0.01);
    CHECK_FALSE(m.unet.use_se);
    CHECK(m.unet.levels == base.unet.levels);
    CHECK(m.optim.total_iterations == base.optim.total_iterations);
}

TEST_CASE("unknown keys and bad values are rejected")
{
    const RunConfig base;
    CHECK_THROWS_AS(merge_json(base, nlohmann::json::parse(R"({"sede": 1})")), ConfigError);
    CHECK_THROWS_AS(merge_json(base, nlohmann::json::parse(R"({"optim": {"lr": 1}})")), ConfigError);
    CHECK_THROWS_AS(merge_json(base, nlohmann::json::parse(R"({"optim": {"lr0": "fast"}})")), ConfigError);
    CHECK_THROWS_AS(merge_json(base, nlohmann::json::parse(R"({"sampler": {"kind": "stratified"}})")), ConfigError);

    RunConfig bad = preset("desk");
    bad.sampler.patch_size = 8;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = preset("desk");
    bad.preprocess.hu_lo = 90;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config files and effective config")
{
    TempDir d("cfg");
    {
        std::ofstream out(d / "c.json");
        out << R"({"phantom_count": 4, "grid": {"overlap": 0.5}})";
    }
    const RunConfig c = load_run_config(d / "c.json", preset("desk"));
    CHECK(c.phantom_count == 4);
    CHECK(c.grid.overlap == 0.5);
    {
        std::ofstream out(d / "bad.json");
        out << "{ nope";
    }
    CHECK_THROWS_AS(load_run_config(d / "bad.json"), ConfigError);
    CHECK_THROWS_AS(load_run_config(d / "missing.json"), Error);

    write_effective_config(c, d / "out");
    std::ifstream in(d / "out" / "effective_config.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j.at("tool_version") == std::string(tool_version()));
    CHECK(j.at("phantom_count") == 4);
}

TEST_CASE("train config carries every section")
{
    RunConfig c = preset("desk");
    c.seed = 31;
    const TrainConfig t = train_config(c);
    CHECK(t.seed == 31);
    CHECK(t.unet == c.unet);
    CHECK(t.optim.lr0 == c.optim.lr0);
    CHECK(t.sampler.patch_size == c.sampler.patch_size);
    CHECK(t.loss.weighted == c.loss.weighted);
}
