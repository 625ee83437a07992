#pragma once

// Loss functions, Adam with step decay, k-fold splitting and the patch
// training loop.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "strokeseg/network.hpp"
#include "strokeseg/sampling.hpp"

namespace strokeseg {

// ---------------------------------------------------------------------------
// Losses

/// Probabilities are clamped into [kProbClamp, 1 - kProbClamp] before logs.
inline constexpr double kProbClamp = 1e-7;

struct LossConfig {
    double eps = 1.0;     // soft Dice smoothing
    bool weighted = true; // per-voxel BCE weights from class counts
    std::int64_t n0 = 0;  // non-lesion voxels over the training set
    std::int64_t n1 = 0;  // lesion voxels over the training set

    void validate() const;
    /// Weight of a lesion voxel: N0 / N (1 when unweighted).
    double lesion_weight() const;
    /// Weight of a non-lesion voxel: N1 / N (1 when unweighted).
    double background_weight() const;
};

/// 1 - (2 sum(p y) + eps) / (sum(p^2) + sum(y^2) + eps), summed over the
/// whole batch as one population.
template <class T>
ad::Tensor<T> soft_dice_loss(const ad::Tensor<T>& p, const ad::Tensor<T>& y, double eps);

/// sum_i w_i (-y_i log p_i - (1 - y_i) log(1 - p_i)).
template <class T>
ad::Tensor<T> weighted_bce(const ad::Tensor<T>& p, const ad::Tensor<T>& y, const LossConfig& cfg);

template <class T>
struct LossTerms {
    ad::Tensor<T> total;
    double bce = 0.0;
    double dice = 0.0;
};

/// sigmoid(logits), then weighted BCE + soft Dice.
template <class T>
LossTerms<T> combined_loss(const ad::Tensor<T>& logits, const ad::Tensor<T>& y, const LossConfig& cfg);

struct ClassCounts {
    std::int64_t n0 = 0;
    std::int64_t n1 = 0;
};

ClassCounts class_counts(const std::vector<Mask>& masks);
/// Counts over all manifest entries whose fold differs from `held_out_fold`.
ClassCounts class_counts(const Manifest& manifest, int held_out_fold);

// ---------------------------------------------------------------------------
// Optimization

struct OptimConfig {
    double lr0 = 1e-4;
    double decay_factor = 0.5;
    std::int64_t decay_every = 5000;
    double lr_floor = 1.25e-5;
    double weight_decay = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 2;
    std::int64_t total_iterations = 40000;
    std::int64_t checkpoint_every = 1000;

    void validate() const;
};

/// lr0 * decay_factor^floor(it / decay_every), never below lr_floor.
double lr_at(std::int64_t iteration, const OptimConfig& cfg = {});

template <class T>
struct AdamState {
    std::int64_t step = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    static AdamState zeros_like(const std::vector<NamedParam<T>>& params);
    OptimizerBlobs to_blobs() const;
    static AdamState from_blobs(const OptimizerBlobs& blobs, const std::vector<NamedParam<T>>& params);
};

/// One bias-corrected Adam update at learning rate `lr`; L2 decay is added
/// to the gradient as weight_decay * theta. Parameters without a gradient
/// are left untouched.
template <class T>
void adam_step_lr(std::vector<NamedParam<T>>& params, AdamState<T>& state, const OptimConfig& cfg, double lr);

/// adam_step_lr at lr_at(iteration).
template <class T>
void adam_step(std::vector<NamedParam<T>>& params, AdamState<T>& state, const OptimConfig& cfg,
               std::int64_t iteration);

// ---------------------------------------------------------------------------
// Cross-validation

struct FoldSplit {
    int k = 5;
    std::vector<std::vector<std::string>> folds;

    int fold_of(std::string_view patient_id) const;
};

/// Seeded Fisher-Yates shuffle followed by a round-robin deal into k folds.
FoldSplit kfold_split(const std::vector<std::string>& patient_ids, int k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    UNetConfig unet;
    OptimConfig optim;
    LossConfig loss; // n0/n1 are filled from the training folds
    SamplerConfig sampler;
    std::uint64_t seed = 0;
    std::optional<std::filesystem::path> resume;
    /// Stop early after this many iterations (used to simulate interruption).
    std::optional<std::int64_t> stop_after;
};

struct LossRecord {
    std::int64_t iteration = 0;
    double lr = 0.0;
    double bce = 0.0;
    double dice = 0.0;
    double total = 0.0;
    bool operator==(const LossRecord&) const = default;
};

struct TrainResult {
    std::vector<LossRecord> log;
    std::filesystem::path final_checkpoint;
    ClassCounts counts;
};

/// Trains on every manifest entry whose fold differs from `fold`. Writes
/// `train_log.csv`, periodic `ckpt_XXXXXXXX.svck` and `final.svck` into out_dir.
TrainResult train_fold(const Manifest& manifest, int fold, const TrainConfig& cfg,
                       const std::filesystem::path& out_dir);

void write_loss_log(const std::vector<LossRecord>& log, const std::filesystem::path& path);
std::vector<LossRecord> read_loss_log(const std::filesystem::path& path);

} // namespace strokeseg
