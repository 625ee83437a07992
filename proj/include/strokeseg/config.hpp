#pragma once

// Run configuration: one JSON document holding every sub-config. Unknown keys
// are rejected at every level.

#include <filesystem>
#include <string>

#include <json.hpp>

#include "strokeseg/evaluation.hpp"
#include "strokeseg/phantom.hpp"
#include "strokeseg/preprocess.hpp"
#include "strokeseg/training.hpp"

namespace strokeseg {

struct RunPaths {
    std::filesystem::path corpus = "corpus";       // raw phantom corpus
    std::filesystem::path processed = "processed"; // preprocessed corpus
    std::filesystem::path runs = "runs";           // training output root
};

struct RunConfig {
    std::uint64_t seed = 0;
    int phantom_count = 10;
    PhantomConfig phantom;
    PreprocessConfig preprocess;
    SamplerConfig sampler;
    UNetConfig unet;
    OptimConfig optim;
    LossConfig loss;
    GridSpec grid;
    RunPaths paths;

    /// Validates every section and the cross-section constraints.
    void validate() const;
};

/// Small model and short schedule used for desk-scale runs.
RunConfig desk_preset();
/// Full-scale hyperparameters: P = 128, 4 levels from 32 channels, 40000 iterations.
RunConfig paper_preset();
/// Throws ConfigError for unknown names.
RunConfig preset(const std::string& name);

nlohmann::json to_json(const RunConfig& c);
/// Overlays `j` onto `base`; keys absent from `j` keep their base values.
RunConfig merge_json(const RunConfig& base, const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base = {});

/// Writes `effective_config.json` (config plus tool fingerprint) into dir.
void write_effective_config(const RunConfig& c, const std::filesystem::path& dir);

TrainConfig train_config(const RunConfig& c);

} // namespace strokeseg
