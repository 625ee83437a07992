#include "strokeseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace strokeseg {

using ad::Tensor;

void LossConfig::validate() const
{
    if (!(eps > 0.0)) throw ConfigError("loss: eps must be positive");
    if (n0 < 0 || n1 < 0) throw ConfigError("loss: class counts must be non-negative");
    if (weighted && n1 < 1) throw Error("loss: weighted BCE needs at least one lesion voxel (N1 = 0)");
}

double LossConfig::lesion_weight() const
{
    if (!weighted) return 1.0;
    return static_cast<double>(n0) / static_cast<double>(n0 + n1);
}

double LossConfig::background_weight() const
{
    if (!weighted) return 1.0;
    return static_cast<double>(n1) / static_cast<double>(n0 + n1);
}

namespace {

template <class T>
void check_loss_inputs(const Tensor<T>& p, const Tensor<T>& y, const char* op)
{
    if (!p.defined() || !y.defined() || p.shape() != y.shape())
        throw Error(std::string(op) + ": prediction and target shapes differ");
}

} // namespace

template <class T>
Tensor<T> soft_dice_loss(const Tensor<T>& p, const Tensor<T>& y, double eps)
{
    check_loss_inputs(p, y, "soft_dice_loss");
    const auto pv = p.data();
    const auto yv = y.data();
    double inter = 0.0, sp = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        inter += static_cast<double>(pv[i]) * yv[i];
        sp += static_cast<double>(pv[i]) * pv[i];
        sy += static_cast<double>(yv[i]) * yv[i];
    }
    const double num = 2.0 * inter + eps;
    const double den = sp + sy + eps;
    const double loss = 1.0 - num / den;
    auto pn = p.node_ptr();
    auto yn = y.node_ptr();
    return ad::make_result<T>({1}, {static_cast<T>(loss)}, {p}, [pn, yn, num, den](ad::Node<T>& r) {
        auto dp = pn->grad_buffer();
        const double g = r.grad[0];
        const double inv_den2 = 1.0 / (den * den);
        for (std::size_t i = 0; i < dp.size(); ++i) {
            const double d = -(2.0 * yn->value[i] * den - num * 2.0 * pn->value[i]) * inv_den2;
            dp[i] += static_cast<T>(g * d);
        }
    });
}

template <class T>
Tensor<T> weighted_bce(const Tensor<T>& p, const Tensor<T>& y, const LossConfig& cfg)
{
    check_loss_inputs(p, y, "weighted_bce");
    cfg.validate();
    const double w1 = cfg.lesion_weight();
    const double w0 = cfg.background_weight();
    const auto pv = p.data();
    const auto yv = y.data();
    double loss = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double pi = std::clamp(static_cast<double>(pv[i]), kProbClamp, 1.0 - kProbClamp);
        const double yi = yv[i];
        const double w = w0 + (w1 - w0) * yi;
        loss += w * (-yi * std::log(pi) - (1.0 - yi) * std::log(1.0 - pi));
    }
    auto pn = p.node_ptr();
    auto yn = y.node_ptr();
    return ad::make_result<T>({1}, {static_cast<T>(loss)}, {p}, [pn, yn, w0, w1](ad::Node<T>& r) {
        auto dp = pn->grad_buffer();
        const double g = r.grad[0];
        for (std::size_t i = 0; i < dp.size(); ++i) {
            const double pi = pn->value[i];
            if (pi < kProbClamp || pi > 1.0 - kProbClamp) continue; // clamped: flat
            const double yi = yn->value[i];
            const double w = w0 + (w1 - w0) * yi;
            dp[i] += static_cast<T>(g * w * (-yi / pi + (1.0 - yi) / (1.0 - pi)));
        }
    });
}

template <class T>
LossTerms<T> combined_loss(const Tensor<T>& logits, const Tensor<T>& y, const LossConfig& cfg)
{
    const Tensor<T> p = ad::sigmoid(logits);
    const Tensor<T> bce = weighted_bce(p, y, cfg);
    const Tensor<T> dice = soft_dice_loss(p, y, cfg.eps);
    LossTerms<T> out;
    out.bce = bce.item();
    out.dice = dice.item();
    out.total = ad::add(bce, dice);
    return out;
}

ClassCounts class_counts(const std::vector<Mask>& masks)
{
    if (masks.empty()) throw Error("class_counts: empty training set");
    ClassCounts c;
    for (const auto& m : masks) {
        const std::int64_t ones = m.count_ones();
        c.n1 += ones;
        c.n0 += m.size() - ones;
    }
    return c;
}

ClassCounts class_counts(const Manifest& manifest, int held_out_fold)
{
    std::vector<Mask> masks;
    for (const auto& e : manifest.entries)
        if (e.fold && *e.fold != held_out_fold) masks.push_back(load_mask(e.mask_path));
    if (masks.empty()) throw Error("class_counts: no training patients outside fold " + std::to_string(held_out_fold));
    return class_counts(masks);
}

// ---------------------------------------------------------------------------

void OptimConfig::validate() const
{
    if (!(lr0 > 0.0)) throw ConfigError("optim: lr0 must be positive");
    if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("optim: decay_factor must lie in (0, 1]");
    if (decay_every < 1) throw ConfigError("optim: decay_every must be positive");
    if (!(lr_floor >= 0.0)) throw ConfigError("optim: lr_floor must be non-negative");
    if (!(weight_decay >= 0.0)) throw ConfigError("optim: weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optim: betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("optim: adam_eps must be positive");
    if (batch_size < 1) throw ConfigError("optim: batch_size must be positive");
    if (total_iterations < 1) throw ConfigError("optim: total_iterations must be positive");
    if (checkpoint_every < 1) throw ConfigError("optim: checkpoint_every must be positive");
}

double lr_at(std::int64_t iteration, const OptimConfig& cfg)
{
    if (iteration < 0) throw Error("lr_at: negative iteration");
    const std::int64_t k = iteration / cfg.decay_every;
    double lr = cfg.lr0;
    if (cfg.decay_factor == 0.5) {
        // Exact power-of-two scaling.
        lr = std::ldexp(cfg.lr0, -static_cast<int>(std::min<std::int64_t>(k, 1000)));
    } else {
        lr = cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(k));
    }
    return std::max(lr, cfg.lr_floor);
}

template <class T>
AdamState<T> AdamState<T>::zeros_like(const std::vector<NamedParam<T>>& params)
{
    AdamState s;
    for (const auto& p : params) {
        s.m.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
        s.v.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
    }
    return s;
}

template <class T>
OptimizerBlobs AdamState<T>::to_blobs() const
{
    OptimizerBlobs b;
    b.step = step;
    for (std::size_t i = 0; i < m.size(); ++i) {
        b.first_moment.emplace_back(m[i].begin(), m[i].end());
        b.second_moment.emplace_back(v[i].begin(), v[i].end());
    }
    return b;
}

template <class T>
AdamState<T> AdamState<T>::from_blobs(const OptimizerBlobs& blobs, const std::vector<NamedParam<T>>& params)
{
    if (blobs.first_moment.size() != params.size()) throw Error("optimizer state does not match parameters");
    AdamState s;
    s.step = blobs.step;
    for (std::size_t i = 0; i < params.size(); ++i) {
        s.m.emplace_back(blobs.first_moment[i].begin(), blobs.first_moment[i].end());
        s.v.emplace_back(blobs.second_moment[i].begin(), blobs.second_moment[i].end());
    }
    return s;
}

template <class T>
void adam_step_lr(std::vector<NamedParam<T>>& params, AdamState<T>& state, const OptimConfig& cfg, double lr)
{
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw Error("adam: optimizer state does not match parameter list");
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T wd = static_cast<T>(cfg.weight_decay);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(cfg.adam_eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].tensor;
        if (state.m[i].size() != static_cast<std::size_t>(p.numel()))
            throw Error("adam: state shape mismatch for " + params[i].name);
        if (!p.has_grad()) continue;
        auto theta = p.mutable_data();
        const auto g = p.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < theta.size(); ++j) {
            const T gj = g[j] + wd * theta[j];
            m[j] = b1 * m[j] + (T(1) - b1) * gj;
            v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
            theta[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
        }
    }
}

template <class T>
void adam_step(std::vector<NamedParam<T>>& params, AdamState<T>& state, const OptimConfig& cfg,
               std::int64_t iteration)
{
    adam_step_lr(params, state, cfg, lr_at(iteration, cfg));
}

// ---------------------------------------------------------------------------

int FoldSplit::fold_of(std::string_view patient_id) const
{
    for (std::size_t f = 0; f < folds.size(); ++f)
        for (const auto& id : folds[f])
            if (id == patient_id) return static_cast<int>(f);
    throw Error("patient not in fold split: " + std::string(patient_id));
}

FoldSplit kfold_split(const std::vector<std::string>& patient_ids, int k, std::uint64_t seed)
{
    if (k < 2) throw Error("kfold_split: k must be at least 2");
    if (static_cast<int>(patient_ids.size()) < k)
        throw Error("kfold_split: " + std::to_string(patient_ids.size()) + " patients cannot fill " +
                    std::to_string(k) + " folds");
    std::vector<std::string> ids = patient_ids;
    Rng rng(seed);
    for (std::size_t i = ids.size() - 1; i > 0; --i) std::swap(ids[i], ids[rng.uniform_index(i + 1)]);
    FoldSplit s;
    s.k = k;
    s.folds.resize(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < ids.size(); ++i) s.folds[i % k].push_back(ids[i]);
    return s;
}

// ---------------------------------------------------------------------------

void write_loss_log(const std::vector<LossRecord>& log, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write training log: " + path.string());
    out << "iteration,lr,loss_bce,loss_dice,loss_total\n";
    char buf[256];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g\n", static_cast<long long>(r.iteration), r.lr,
                      r.bce, r.dice, r.total);
        out << buf;
    }
    if (!out) throw Error("cannot write training log: " + path.string());
}

std::vector<LossRecord> read_loss_log(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw Error("cannot open training log: " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "iteration,lr,loss_bce,loss_dice,loss_total") throw Error("unexpected training log header");
    std::vector<LossRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        LossRecord r;
        long long it = 0;
        if (std::sscanf(line.c_str(), "%lld,%lf,%lf,%lf,%lf", &it, &r.lr, &r.bce, &r.dice, &r.total) != 5)
            throw Error("malformed training log line: " + line);
        r.iteration = it;
        out.push_back(r);
    }
    return out;
}

namespace {

struct TrainingPatient {
    std::string id;
    Volume image;
    Mask mask;
    LabelMap labels;
    ClassProbs probs;
};

void copy_patch(const Volume& vol, const Mask& mask, const Dims3& origin, int P, float* x, float* y)
{
    std::size_t k = 0;
    for (std::int64_t z = 0; z < P; ++z)
        for (std::int64_t yy = 0; yy < P; ++yy) {
            const std::int64_t base = linear_index(vol.dims, origin[0], origin[1] + yy, origin[2] + z);
            for (std::int64_t xx = 0; xx < P; ++xx, ++k) {
                x[k] = vol.data[base + xx];
                y[k] = static_cast<float>(mask.data[base + xx]);
            }
        }
}

std::string checkpoint_name(std::int64_t iteration)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "ckpt_%08lld.svck", static_cast<long long>(iteration));
    return buf;
}

} // namespace

TrainResult train_fold(const Manifest& manifest, int fold, const TrainConfig& cfg, const std::filesystem::path& out_dir)
{
    cfg.unet.validate();
    cfg.optim.validate();
    cfg.sampler.validate();
    if (cfg.sampler.patch_size != cfg.unet.patch_size)
        throw ConfigError("sampler patch_size must equal the network patch_size");
    const int P = cfg.unet.patch_size;
    std::filesystem::create_directories(out_dir);

    std::vector<TrainingPatient> patients;
    std::vector<Mask> raw_masks;
    for (const auto& e : manifest.entries) {
        if (!e.fold || *e.fold == fold) continue;
        TrainingPatient tp;
        tp.id = e.patient_id;
        tp.image = load_volume(e.volume_path);
        tp.mask = load_mask(e.mask_path);
        validate_pair(tp.image, tp.mask);
        raw_masks.push_back(tp.mask);
        pad_to_patch(tp.image, tp.mask, P);
        tp.labels = build_label_map(tp.image, tp.mask);
        tp.probs = cfg.sampler.kind == SamplerKind::Weighted
                       ? effective_class_probs(tp.labels, cfg.sampler.class_probs)
                       : cfg.sampler.class_probs;
        if (cfg.sampler.kind == SamplerKind::Weighted && !(tp.probs == cfg.sampler.class_probs))
            log_event(LogLevel::Warn, "sampler_fallback", {{"patient", tp.id}, {"lesion_prob", to_field(tp.probs.lesion)}});
        patients.push_back(std::move(tp));
    }
    if (patients.empty()) throw Error("train_fold: no training patients outside fold " + std::to_string(fold));

    TrainResult result;
    result.counts = class_counts(raw_masks);
    LossConfig loss_cfg = cfg.loss;
    loss_cfg.n0 = result.counts.n0;
    loss_cfg.n1 = result.counts.n1;
    loss_cfg.validate();

    UNet3D<float> model(cfg.unet, derive_seed(cfg.seed, {1}));
    AdamState<float> adam = AdamState<float>::zeros_like(model.parameters());
    std::int64_t start = 0;
    const auto log_path = out_dir / "train_log.csv";
    if (cfg.resume) {
        auto ck = load_checkpoint<float>(*cfg.resume, &cfg.unet);
        if (!ck.optimizer) throw Error("resume checkpoint has no optimizer state");
        auto& dst = model.parameters();
        const auto& src = ck.model.parameters();
        for (std::size_t i = 0; i < dst.size(); ++i)
            std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), dst[i].tensor.mutable_data().begin());
        adam = AdamState<float>::from_blobs(*ck.optimizer, model.parameters());
        start = ck.iteration;
        if (std::filesystem::exists(log_path))
            for (const auto& r : read_loss_log(log_path))
                if (r.iteration < start) result.log.push_back(r);
        if (static_cast<std::int64_t>(result.log.size()) != start)
            throw Error("resume: training log does not cover the first " + std::to_string(start) + " iterations");
    }

    const int B = cfg.optim.batch_size;
    const std::int64_t slots = static_cast<std::int64_t>(patients.size()) * cfg.sampler.patches_per_patient;
    const std::int64_t steps_per_epoch = std::max<std::int64_t>(1, slots / B);
    std::int64_t plan_epoch = -1;
    std::vector<std::size_t> plan;

    log_event(LogLevel::Info, "train_start",
              {{"fold", to_field(fold)},
               {"patients", to_field(patients.size())},
               {"params", to_field(model.parameter_count())},
               {"n0", to_field(loss_cfg.n0)},
               {"n1", to_field(loss_cfg.n1)},
               {"start", to_field(start)}});

    const std::int64_t voxels = static_cast<std::int64_t>(P) * P * P;
    const std::int64_t end = cfg.stop_after ? std::min(cfg.optim.total_iterations, *cfg.stop_after)
                                            : cfg.optim.total_iterations;
    for (std::int64_t it = start; it < end; ++it) {
        const std::int64_t epoch = it / steps_per_epoch;
        const std::int64_t step = it % steps_per_epoch;
        if (epoch != plan_epoch) {
            // Every patient contributes patches_per_patient slots per epoch.
            plan.clear();
            for (std::size_t p = 0; p < patients.size(); ++p)
                for (int r = 0; r < cfg.sampler.patches_per_patient; ++r) plan.push_back(p);
            Rng shuffle(derive_seed(cfg.seed, {2, static_cast<std::uint64_t>(epoch)}));
            for (std::size_t i = plan.size() - 1; i > 0; --i) std::swap(plan[i], plan[shuffle.uniform_index(i + 1)]);
            plan_epoch = epoch;
        }

        std::vector<float> xb(static_cast<std::size_t>(B * voxels)), yb(xb.size());
        for (int b = 0; b < B; ++b) {
            const std::int64_t slot = step * B + b;
            const TrainingPatient& tp = patients[plan[static_cast<std::size_t>(slot % slots)]];
            Rng rng(derive_seed(cfg.seed, {3, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(slot)}));
            const Dims3 origin = cfg.sampler.kind == SamplerKind::Weighted
                                     ? draw_weighted(tp.labels, P, tp.probs, rng).origin
                                     : draw_uniform_origin(tp.image.dims, P, rng);
            copy_patch(tp.image, tp.mask, origin, P, xb.data() + b * voxels, yb.data() + b * voxels);
        }
        const auto x = Tensor<float>::from_data({B, 1, P, P, P}, std::move(xb));
        const auto y = Tensor<float>::from_data({B, 1, P, P, P}, std::move(yb));

        model.zero_grad();
        const auto loss = combined_loss(model.forward(x), y, loss_cfg);
        const double total = loss.total.item();
        if (!std::isfinite(total)) {
            log_event(LogLevel::Error, "non_finite_loss", {{"iteration", to_field(it)}});
            throw Error("non-finite loss at iteration " + std::to_string(it));
        }
        ad::backward(loss.total);
        const double lr = lr_at(it, cfg.optim);
        adam_step_lr(model.parameters(), adam, cfg.optim, lr);
        result.log.push_back({it, lr, loss.bce, loss.dice, total});

        if ((it + 1) % 100 == 0)
            log_event(LogLevel::Info, "train_step",
                      {{"iteration", to_field(it + 1)}, {"lr", to_field(lr)}, {"loss", to_field(total)}});
        if ((it + 1) % cfg.optim.checkpoint_every == 0 || (cfg.stop_after && it + 1 == end)) {
            const auto blobs = adam.to_blobs();
            save_checkpoint(model, out_dir / checkpoint_name(it + 1), it + 1, &blobs);
            write_loss_log(result.log, log_path);
        }
    }

    write_loss_log(result.log, log_path);
    if (end == cfg.optim.total_iterations) {
        const auto blobs = adam.to_blobs();
        result.final_checkpoint = out_dir / "final.svck";
        save_checkpoint(model, result.final_checkpoint, end, &blobs);
    } else {
        result.final_checkpoint = out_dir / checkpoint_name(end);
    }
    return result;
}

#define STROKESEG_INSTANTIATE_TRAINING(T)                                                                    \
    template Tensor<T> soft_dice_loss(const Tensor<T>&, const Tensor<T>&, double);                           \
    template Tensor<T> weighted_bce(const Tensor<T>&, const Tensor<T>&, const LossConfig&);                  \
    template LossTerms<T> combined_loss(const Tensor<T>&, const Tensor<T>&, const LossConfig&);              \
    template struct AdamState<T>;                                                                            \
    template void adam_step_lr(std::vector<NamedParam<T>>&, AdamState<T>&, const OptimConfig&, double);      \
    template void adam_step(std::vector<NamedParam<T>>&, AdamState<T>&, const OptimConfig&, std::int64_t);

STROKESEG_INSTANTIATE_TRAINING(float)
STROKESEG_INSTANTIATE_TRAINING(double)

} // namespace strokeseg
