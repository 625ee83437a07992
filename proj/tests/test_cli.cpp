#include <doctest.h>

#include <cstdlib>
#include <fstream>

#include <sys/wait.h>

#include "strokeseg/volume_io.hpp"
#include "test_support.hpp"

#ifndef STROKESEG_CLI_PATH
#error "STROKESEG_CLI_PATH must name the strokeseg executable"
#endif

using namespace strokeseg;
using strokeseg::testing::TempDir;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args, const fs::path& log)
{
    const std::string cmd = std::string("\"") + STROKESEG_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WIFEXITED(status) ? WEXITSTATUS(status) : 128;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

void write_text(const fs::path& p, const std::string& s)
{
    std::ofstream out(p);
    out << s;
}

int count_rows(const fs::path& csv)
{
    std::ifstream in(csv);
    std::string line;
    int n = -1;
    while (std::getline(in, line))
        if (!line.empty()) ++n;
    return n;
}

} // namespace

TEST_CASE("usage errors exit with 2")
{
    TempDir d("cli");
    const auto log = d / "log.txt";
    CHECK(run("", log) == 2);
    CHECK(run("phantom --n 3", log) == 2);
    CHECK(run("phantom --n 3 --bogus --out " + q(d / "x"), log) == 2);
    CHECK(run("--preset huge phantom --out " + q(d / "x"), log) == 2);
    write_text(d / "bad.json", R"({"optim": {"learning_rate": 1}})");
    CHECK(run("--config " + q(d / "bad.json") + " phantom --n 3 --out " + q(d / "x"), log) == 2);
    CHECK(run("gradcheck --inject-wrong-sign no_such_case", log) == 2);
    CHECK(run("--version", log) == 0);
}

TEST_CASE("runtime failures exit with 1")
{
    TempDir d("cli");
    const auto log = d / "log.txt";
    write_text(d / "file", "x");
    CHECK(run("phantom --n 2 --out " + q(d / "file" / "sub"), log) == 1);
    CHECK(run("phantom --n 2 --out " + q(d / "c"), log) == 0);
    CHECK(run("eval --manifest " + q(d / "c" / "manifest.csv") + " --checkpoint " + q(d / "none.svck") + " --out " +
                  q(d / "e"),
              log) == 1);
}

TEST_CASE("gradient check exit status follows the suite")
{
    TempDir d("cli");
    const auto log = d / "log.txt";
    CHECK(run("gradcheck --filter sigmoid", log) == 0);
    CHECK(run("gradcheck --f64 --filter sigmoid --seeds 2", log) == 0);
    CHECK(run("gradcheck --filter sigmoid --inject-wrong-sign sigmoid", log) == 1);
}

TEST_CASE("phantom, preprocess, train, resume, eval and predict")
{
    TempDir d("cli");
    const auto log = d / "log.txt";
    write_text(d / "tiny.json", R"({
        "phantom": {"dims": [40, 40, 32], "lesion_radius_min": 2.0, "lesion_radius_max": 4.0,
                    "lesion_fraction_max": 0.06},
        "unet": {"levels": 2, "base_channels": 2, "patch_size": 8, "se_reduction": 2},
        "sampler": {"patch_size": 8, "patches_per_patient": 4},
        "grid": {"patch_size": 8},
        "optim": {"total_iterations": 6, "checkpoint_every": 3}
    })");
    const std::string cfg = "--config " + q(d / "tiny.json") + " --seed 3 ";

    REQUIRE(run(cfg + "phantom --n 5 --out " + q(d / "raw"), log) == 0);
    CHECK(load_manifest(d / "raw" / "manifest.csv").entries.size() == 5);
    CHECK(fs::exists(d / "raw" / "effective_config.json"));
    REQUIRE(run(cfg + "phantom --n 5 --out " + q(d / "raw2"), log) == 0);
    CHECK(read_file_bytes(d / "raw" / "P003_ct.raw") == read_file_bytes(d / "raw2" / "P003_ct.raw"));

    REQUIRE(run(cfg + "preprocess --manifest " + q(d / "raw" / "manifest.csv") + " --out " + q(d / "proc"), log) == 0);
    const Manifest proc = load_manifest(d / "proc" / "manifest.csv");
    CHECK(proc.entries.size() == 5);
    CHECK(run(cfg + "preprocess --no-standardize --manifest " + q(d / "raw" / "manifest.csv") + " --out " +
                  q(d / "proc_ns"),
              log) == 0);

    const std::string manifest = " --manifest " + q(d / "proc" / "manifest.csv");
    REQUIRE(run(cfg + "train --fold 0" + manifest + " --out " + q(d / "runs"), log) == 0);
    const auto full_log = read_file_bytes(d / "runs" / "fold_0" / "train_log.csv");
    CHECK(count_rows(d / "runs" / "fold_0" / "train_log.csv") == 6);

    REQUIRE(run(cfg + "train --fold 0 --stop-after 3" + manifest + " --out " + q(d / "r2"), log) == 0);
    CHECK(fs::exists(d / "r2" / "fold_0" / "ckpt_00000003.svck"));
    CHECK_FALSE(fs::exists(d / "r2" / "fold_0" / "final.svck"));
    REQUIRE(run(cfg + "train --fold 0 --resume " + q(d / "r2" / "fold_0" / "ckpt_00000003.svck") + manifest +
                    " --out " + q(d / "r2"),
                log) == 0);
    CHECK(read_file_bytes(d / "r2" / "fold_0" / "train_log.csv") == full_log);
    CHECK(read_file_bytes(d / "r2" / "fold_0" / "final.svck") == read_file_bytes(d / "runs" / "fold_0" / "final.svck"));

    const std::string ckpt = " --checkpoint " + q(d / "runs" / "fold_0" / "final.svck");
    REQUIRE(run(cfg + "eval --fold 0" + manifest + ckpt + " --overlay --save-predictions --out " + q(d / "ev"), log) ==
            0);
    CHECK(count_rows(d / "ev" / "metrics.csv") == 1);
    CHECK(fs::exists(d / "ev" / "summary.json"));
    CHECK(fs::exists(d / "ev" / "effective_config.json"));

    REQUIRE(run(cfg + "eval --fold 0 --overlaps 25,50,75" + manifest + ckpt + " --out " + q(d / "ov"), log) == 0);
    CHECK(count_rows(d / "ov" / "overlap_table.csv") == 3);
    CHECK(run(cfg + "eval --fold 0 --overlaps 25,abc" + manifest + ckpt + " --out " + q(d / "ov"), log) == 2);

    REQUIRE(run(cfg + "predict" + ckpt + " --volume " + q(d / "raw" / "P000_ct") + " --overlap 50 --out " +
                    q(d / "pred"),
                log) == 0);
    const Volume prob = load_volume(d / "pred" / "P000_ct_prob");
    CHECK(prob.dims == load_volume(d / "raw" / "P000_ct").dims);
    CHECK(load_mask(d / "pred" / "P000_ct_pred").dims == prob.dims);
}

TEST_CASE("a corrupt volume fails its patient but not the batch")
{
    TempDir d("cli");
    const auto log = d / "log.txt";
    REQUIRE(run("--seed 1 phantom --n 3 --out " + q(d / "raw"), log) == 0);
    write_file_bytes(d / "raw" / "P001_ct.raw", std::vector<std::uint8_t>(10, 0));
    CHECK(run("preprocess --manifest " + q(d / "raw" / "manifest.csv") + " --out " + q(d / "proc"), log) == 1);
    CHECK(load_manifest(d / "proc" / "manifest.csv").entries.size() == 2);
}
