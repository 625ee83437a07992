#include "strokeseg/gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>

#include "strokeseg/network.hpp"
#include "strokeseg/training.hpp"

namespace strokeseg {

using ad::Shape;
using ad::Tensor;

bool GradcheckReport::all_passed() const
{
    if (results.empty()) return false;
    for (const auto& r : results)
        if (!r.passed) return false;
    return true;
}

namespace {

template <class T>
struct Instance {
    std::vector<Tensor<T>> inputs;   // tensors whose gradients are checked
    std::function<Tensor<T>()> fn;   // re-evaluates from the current input values
    std::shared_ptr<void> keep_alive; // owns anything fn refers to
};

template <class T>
using Maker = std::function<Instance<T>(Rng&)>;

template <class T>
struct Case {
    std::string name;
    Maker<T> make;
};

template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    std::vector<T> v(static_cast<std::size_t>(ad::shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return Tensor<T>::from_data(std::move(shape), std::move(v), true);
}

// Values bounded away from zero, for ops with a kink at the origin.
template <class T>
Tensor<T> away_from_zero(Shape shape, Rng& rng)
{
    std::vector<T> v(static_cast<std::size_t>(ad::shape_numel(shape)));
    for (auto& x : v) {
        const double m = rng.uniform(0.1, 1.0);
        x = static_cast<T>(rng.uniform() < 0.5 ? -m : m);
    }
    return Tensor<T>::from_data(std::move(shape), std::move(v), true);
}

// Distinct values spaced 0.05 apart in random order, so no pooling cell has a
// near-tie.
template <class T>
Tensor<T> distinct_tensor(Shape shape, Rng& rng)
{
    const auto n = static_cast<std::size_t>(ad::shape_numel(shape));
    std::vector<T> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<T>(-1.0 + 0.05 * static_cast<double>(i));
    for (std::size_t i = n - 1; i > 0; --i) std::swap(v[i], v[rng.uniform_index(i + 1)]);
    return Tensor<T>::from_data(std::move(shape), std::move(v), true);
}

template <class T>
Tensor<T> binary_tensor(Shape shape, Rng& rng)
{
    std::vector<T> v(static_cast<std::size_t>(ad::shape_numel(shape)));
    for (auto& x : v) x = rng.uniform() < 0.3 ? T(1) : T(0);
    v[0] = T(1);
    return Tensor<T>::from_data(std::move(shape), std::move(v), false);
}

template <class T>
Instance<T> unary(Tensor<T> x, std::function<Tensor<T>(const Tensor<T>&)> f)
{
    Instance<T> inst;
    inst.inputs = {x};
    inst.fn = [x, f] { return f(x); };
    return inst;
}

template <class T>
Conv3dLayer<T> random_conv(int cin, int cout, int k, Rng& rng)
{
    const double bound = std::sqrt(6.0 / (cin * k * k * k));
    return {random_tensor<T>({cout, cin, k, k, k}, rng, -bound, bound), random_tensor<T>({cout}, rng, -0.2, 0.2)};
}

template <class T>
InstanceNormLayer<T> random_norm(int c, Rng& rng)
{
    return {random_tensor<T>({c}, rng, 0.5, 1.5), random_tensor<T>({c}, rng, -0.3, 0.3)};
}

template <class T>
std::vector<Case<T>> build_cases()
{
    std::vector<Case<T>> cases;
    cases.push_back({"conv3d_k3", [](Rng& rng) {
                         auto x = random_tensor<T>({1, 2, 5, 4, 3}, rng);
                         auto w = random_tensor<T>({3, 2, 3, 3, 3}, rng);
                         auto b = random_tensor<T>({3}, rng);
                         return Instance<T>{{x, w, b}, [x, w, b] { return ad::conv3d(x, w, b); }, nullptr};
                     }});
    cases.push_back({"conv3d_k1", [](Rng& rng) {
                         auto x = random_tensor<T>({2, 3, 3, 3, 2}, rng);
                         auto w = random_tensor<T>({2, 3, 1, 1, 1}, rng);
                         auto b = random_tensor<T>({2}, rng);
                         return Instance<T>{{x, w, b}, [x, w, b] { return ad::conv3d(x, w, b); }, nullptr};
                     }});
    cases.push_back({"maxpool3d", [](Rng& rng) {
                         return unary<T>(distinct_tensor<T>({1, 2, 4, 4, 2}, rng),
                                         [](const Tensor<T>& x) { return ad::maxpool3d(x); });
                     }});
    cases.push_back({"avgpool3d", [](Rng& rng) {
                         return unary<T>(random_tensor<T>({2, 1, 4, 2, 4}, rng),
                                         [](const Tensor<T>& x) { return ad::avgpool3d(x); });
                     }});
    cases.push_back({"trilinear_upsample", [](Rng& rng) {
                         return unary<T>(random_tensor<T>({1, 2, 3, 2, 3}, rng),
                                         [](const Tensor<T>& x) { return ad::trilinear_upsample(x); });
                     }});
    cases.push_back({"instance_norm", [](Rng& rng) {
                         auto x = random_tensor<T>({2, 2, 3, 3, 2}, rng);
                         auto g = random_tensor<T>({2}, rng, 0.5, 1.5);
                         auto b = random_tensor<T>({2}, rng);
                         return Instance<T>{{x, g, b}, [x, g, b] { return ad::instance_norm(x, g, b); }, nullptr};
                     }});
    cases.push_back({"leaky_relu", [](Rng& rng) {
                         return unary<T>(away_from_zero<T>({1, 2, 3, 3, 3}, rng),
                                         [](const Tensor<T>& x) { return ad::leaky_relu(x, T(0.01)); });
                     }});
    cases.push_back({"relu", [](Rng& rng) {
                         return unary<T>(away_from_zero<T>({1, 2, 3, 3, 3}, rng),
                                         [](const Tensor<T>& x) { return ad::relu(x); });
                     }});
    cases.push_back({"sigmoid", [](Rng& rng) {
                         return unary<T>(random_tensor<T>({1, 2, 3, 3, 3}, rng, -4.0, 4.0),
                                         [](const Tensor<T>& x) { return ad::sigmoid(x); });
                     }});
    cases.push_back({"global_avg_pool", [](Rng& rng) {
                         return unary<T>(random_tensor<T>({2, 3, 2, 3, 2}, rng),
                                         [](const Tensor<T>& x) { return ad::global_avg_pool(x); });
                     }});
    cases.push_back({"linear", [](Rng& rng) {
                         auto x = random_tensor<T>({2, 5}, rng);
                         auto w = random_tensor<T>({3, 5}, rng);
                         auto b = random_tensor<T>({3}, rng);
                         return Instance<T>{{x, w, b}, [x, w, b] { return ad::linear(x, w, b); }, nullptr};
                     }});
    cases.push_back({"add", [](Rng& rng) {
                         auto x = random_tensor<T>({1, 2, 2, 3, 2}, rng);
                         auto y = random_tensor<T>({1, 2, 2, 3, 2}, rng);
                         return Instance<T>{{x, y}, [x, y] { return ad::add(x, y); }, nullptr};
                     }});
    cases.push_back({"mul", [](Rng& rng) {
                         auto x = random_tensor<T>({1, 2, 2, 3, 2}, rng);
                         auto y = random_tensor<T>({1, 2, 2, 3, 2}, rng);
                         return Instance<T>{{x, y}, [x, y] { return ad::mul(x, y); }, nullptr};
                     }});
    cases.push_back({"scale", [](Rng& rng) {
                         return unary<T>(random_tensor<T>({1, 1, 3, 3, 3}, rng),
                                         [](const Tensor<T>& x) { return ad::scale(x, T(-1.75)); });
                     }});
    cases.push_back({"sum", [](Rng& rng) {
                         return unary<T>(random_tensor<T>({2, 2, 2, 2, 2}, rng),
                                         [](const Tensor<T>& x) { return ad::sum(x); });
                     }});
    cases.push_back({"mul_channelwise", [](Rng& rng) {
                         auto x = random_tensor<T>({2, 3, 2, 2, 2}, rng);
                         auto s = random_tensor<T>({2, 3}, rng);
                         return Instance<T>{{x, s}, [x, s] { return ad::mul_channelwise(x, s); }, nullptr};
                     }});
    cases.push_back({"concat_channels", [](Rng& rng) {
                         auto a = random_tensor<T>({2, 1, 2, 3, 2}, rng);
                         auto b = random_tensor<T>({2, 2, 2, 3, 2}, rng);
                         return Instance<T>{{a, b}, [a, b] { return ad::concat_channels(a, b); }, nullptr};
                     }});
    cases.push_back({"se_block", [](Rng& rng) {
                         auto se = std::make_shared<SEBlock<T>>();
                         se->channels = 4;
                         se->reduction = 2;
                         se->w1 = random_tensor<T>({2, 4}, rng);
                         se->w2 = random_tensor<T>({4, 2}, rng);
                         auto x = random_tensor<T>({2, 4, 2, 2, 3}, rng);
                         return Instance<T>{{x, se->w1, se->w2}, [x, se] { return se_forward(x, *se); }, se};
                     }});
    for (const bool after : {false, true}) {
        cases.push_back({after ? "conv_block_se_after_add" : "conv_block", [after](Rng& rng) {
                             auto cfg = std::make_shared<UNetConfig>();
                             cfg->se_reduction = 2;
                             cfg->se_placement = after ? SePlacement::AfterResidualAdd : SePlacement::BeforeResidualAdd;
                             auto blk = std::make_shared<ConvBlock<T>>();
                             blk->in_channels = 2;
                             blk->out_channels = 3;
                             blk->conv1 = random_conv<T>(2, 3, 3, rng);
                             blk->norm1 = random_norm<T>(3, rng);
                             blk->conv2 = random_conv<T>(3, 3, 3, rng);
                             blk->norm2 = random_norm<T>(3, rng);
                             blk->shortcut = random_conv<T>(2, 3, 1, rng);
                             SEBlock<T> se;
                             se.channels = 3;
                             se.reduction = 2;
                             se.w1 = random_tensor<T>({2, 3}, rng);
                             se.w2 = random_tensor<T>({3, 2}, rng);
                             blk->se = se;
                             auto x = random_tensor<T>({1, 2, 4, 3, 4}, rng);
                             std::vector<Tensor<T>> in = {x,
                                                          blk->conv1.weight,
                                                          blk->conv1.bias,
                                                          blk->norm1.gamma,
                                                          blk->norm1.beta,
                                                          blk->conv2.weight,
                                                          blk->conv2.bias,
                                                          blk->norm2.gamma,
                                                          blk->norm2.beta,
                                                          blk->shortcut->weight,
                                                          blk->shortcut->bias,
                                                          blk->se->w1,
                                                          blk->se->w2};
                             auto keep = std::make_shared<std::pair<std::shared_ptr<UNetConfig>,
                                                                    std::shared_ptr<ConvBlock<T>>>>(cfg, blk);
                             return Instance<T>{in, [x, blk, cfg] { return conv_block_forward(x, *blk, *cfg); },
                                                keep};
                         }});
    }
    cases.push_back({"unet_2level", [](Rng& rng) {
                         UNetConfig cfg;
                         cfg.levels = 2;
                         cfg.base_channels = 2;
                         cfg.patch_size = 8;
                         cfg.se_reduction = 2;
                         auto net = std::make_shared<UNet3D<T>>(cfg, rng.next_u64());
                         // Randomize affine norm parameters and biases away from their init values.
                         for (auto& p : net->parameters()) {
                             auto d = p.tensor.mutable_data();
                             const bool is_bias = p.name.ends_with(".bias") || p.name.ends_with(".beta");
                             const bool is_gamma = p.name.ends_with(".gamma");
                             if (is_bias || is_gamma)
                                 for (auto& v : d) v = static_cast<T>(is_gamma ? rng.uniform(0.5, 1.5) : rng.uniform(-0.2, 0.2));
                         }
                         auto x = random_tensor<T>({1, 1, 8, 8, 8}, rng);
                         std::vector<Tensor<T>> in = {x};
                         for (auto& p : net->parameters()) in.push_back(p.tensor);
                         return Instance<T>{in, [x, net] { return net->forward(x); }, net};
                     }});
    cases.push_back({"soft_dice_loss", [](Rng& rng) {
                         auto p = random_tensor<T>({1, 1, 4, 4, 4}, rng, 0.05, 0.95);
                         auto y = binary_tensor<T>({1, 1, 4, 4, 4}, rng);
                         return Instance<T>{{p}, [p, y] { return soft_dice_loss(p, y, 1.0); }, nullptr};
                     }});
    cases.push_back({"weighted_bce", [](Rng& rng) {
                         auto p = random_tensor<T>({1, 1, 4, 4, 4}, rng, 0.05, 0.95);
                         auto y = binary_tensor<T>({1, 1, 4, 4, 4}, rng);
                         LossConfig lc;
                         lc.n0 = 90;
                         lc.n1 = 10;
                         return Instance<T>{{p}, [p, y, lc] { return weighted_bce(p, y, lc); }, nullptr};
                     }});
    cases.push_back({"combined_loss", [](Rng& rng) {
                         auto z = random_tensor<T>({1, 1, 4, 4, 4}, rng, -3.0, 3.0);
                         auto y = binary_tensor<T>({1, 1, 4, 4, 4}, rng);
                         LossConfig lc;
                         lc.n0 = 99;
                         lc.n1 = 1;
                         return Instance<T>{{z}, [z, y, lc] { return combined_loss(z, y, lc).total; }, nullptr};
                     }});
    return cases;
}

template <class T>
double projection(const Tensor<T>& out, const std::vector<double>& r)
{
    const auto v = out.data();
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += static_cast<double>(v[i]) * r[i];
    return s;
}

// Largest normwise relative error over the inputs of one instance. The
// analytic gradient comes from `inst`; central differences are taken on
// `ref`, which holds the same inputs in double precision (it is `inst` itself
// in f64 mode).
template <class T>
double check_instance(Instance<T>& inst, Instance<double>& ref, Rng& rng, bool wrong_sign)
{
    if (inst.inputs.size() != ref.inputs.size()) throw Error("gradcheck: reference instance does not match");
    std::vector<double> r;
    {
        const Tensor<T> out = inst.fn();
        r.resize(static_cast<std::size_t>(out.numel()));
        for (auto& v : r) v = rng.uniform(-1.0, 1.0);
        std::vector<T> rt(r.begin(), r.end());
        const auto loss = ad::sum(ad::mul(out, Tensor<T>::from_data(out.shape(), std::move(rt))));
        ad::backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    double total2 = 0.0;
    for (const auto& in : inst.inputs) {
        std::vector<double> g(static_cast<std::size_t>(in.numel()), 0.0);
        if (in.has_grad()) {
            const auto gv = in.grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = wrong_sign ? -gv[i] : gv[i];
        }
        for (double v : g) total2 += v * v;
        analytic.push_back(std::move(g));
    }
    // Inputs whose gradient vanishes identically (a conv bias feeding instance
    // norm) are measured against the instance's overall gradient scale.
    const double floor = 1e-3 * std::sqrt(total2);

    constexpr double h = 1e-6;
    ad::NoGradGuard no_grad;
    double worst = 0.0;
    for (std::size_t k = 0; k < ref.inputs.size(); ++k) {
        auto data = ref.inputs[k].mutable_data();
        if (data.size() != analytic[k].size()) throw Error("gradcheck: reference input shape mismatch");
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + h;
            const double lp = projection(ref.fn(), r);
            data[i] = orig - h;
            const double lm = projection(ref.fn(), r);
            data[i] = orig;
            const double num = (lp - lm) / (2.0 * h);
            const double a = analytic[k][i];
            diff2 += (a - num) * (a - num);
            a2 += a * a;
            n2 += num * num;
        }
        const double denom = std::max(std::sqrt(std::max(a2, n2)), floor);
        const double rel = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
        worst = std::max(worst, rel);
    }
    return worst;
}

template <class T>
GradcheckReport run_typed(const GradcheckOptions& opts)
{
    const double tol = opts.tolerance > 0.0 ? opts.tolerance : (std::is_same_v<T, float> ? 1e-3 : 1e-6);
    GradcheckReport report;
    const auto cases = build_cases<T>();
    const auto ref_cases = build_cases<double>();
    for (std::size_t c = 0; c < cases.size(); ++c) {
        const auto& cs = cases[c];
        if (!opts.filter.empty() && cs.name.find(opts.filter) == std::string::npos) continue;
        GradcheckResult res;
        res.name = cs.name;
        res.tolerance = tol;
        res.seeds = opts.seeds;
        const bool wrong = opts.inject_wrong_sign && *opts.inject_wrong_sign == cs.name;
        for (int s = 0; s < opts.seeds; ++s) {
            const std::uint64_t seed =
                derive_seed(opts.base_seed, {static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(s)});
            Rng rng(seed);
            Instance<T> inst = cs.make(rng);
            double err = 0.0;
            if constexpr (std::is_same_v<T, double>) {
                err = check_instance(inst, inst, rng, wrong);
            } else {
                Rng ref_rng(seed);
                Instance<double> ref = ref_cases[c].make(ref_rng);
                // Widen the exact f32 input values into the reference.
                for (std::size_t k = 0; k < inst.inputs.size(); ++k) {
                    const auto src = inst.inputs[k].data();
                    auto dst = ref.inputs.at(k).mutable_data();
                    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<double>(src[i]);
                }
                err = check_instance(inst, ref, rng, wrong);
            }
            res.max_rel_error = std::max(res.max_rel_error, err);
        }
        res.passed = res.max_rel_error < tol;
        log_event(res.passed ? LogLevel::Info : LogLevel::Error, "gradcheck",
                  {{"case", res.name},
                   {"dtype", std::is_same_v<T, float> ? "f32" : "f64"},
                   {"max_rel_error", to_field(res.max_rel_error)},
                   {"tolerance", to_field(tol)},
                   {"passed", res.passed ? "true" : "false"}});
        report.results.push_back(res);
    }
    return report;
}

} // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& opts)
{
    if (opts.seeds < 1) throw ConfigError("gradcheck: seeds must be positive");
    if (opts.inject_wrong_sign) {
        const auto names = gradcheck_case_names();
        if (std::find(names.begin(), names.end(), *opts.inject_wrong_sign) == names.end())
            throw ConfigError("gradcheck: unknown case '" + *opts.inject_wrong_sign + "'");
    }
    const auto t0 = std::chrono::steady_clock::now();
    GradcheckReport r = opts.f64 ? run_typed<double>(opts) : run_typed<float>(opts);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

std::vector<std::string> gradcheck_case_names()
{
    std::vector<std::string> names;
    for (const auto& c : build_cases<double>()) names.push_back(c.name);
    return names;
}

} // namespace strokeseg
