#include "strokeseg/network.hpp"

#include <cmath>
#include <cstring>

#include "strokeseg/volume_io.hpp"

namespace strokeseg {

using ad::Tensor;
using nlohmann::json;

void UNetConfig::validate() const
{
    if (levels < 2) throw ConfigError("unet: levels must be at least 2");
    if (base_channels < 1) throw ConfigError("unet: base_channels must be positive");
    if (in_channels != 1 || out_channels != 1) throw ConfigError("unet: in_channels and out_channels must be 1");
    if (se_reduction < 1) throw ConfigError("unet: se_reduction must be positive");
    if (!(leaky_slope >= 0.0)) throw ConfigError("unet: leaky_slope must be non-negative");
    if (!(norm_eps > 0.0)) throw ConfigError("unet: norm_eps must be positive");
    const int step = 1 << (levels - 1);
    if (patch_size % step != 0)
        throw ConfigError("unet: patch_size " + std::to_string(patch_size) + " must be a positive multiple of " +
                          std::to_string(step));
    // Instance norm needs at least two voxels per channel at the bottleneck.
    if (patch_size < 2 * step)
        throw ConfigError("unet: patch_size " + std::to_string(patch_size) + " leaves a bottleneck under 2 voxels");
}

void to_json(json& j, const UNetConfig& c)
{
    j = json{{"levels", c.levels},
             {"base_channels", c.base_channels},
             {"in_channels", c.in_channels},
             {"out_channels", c.out_channels},
             {"patch_size", c.patch_size},
             {"leaky_slope", c.leaky_slope},
             {"se_reduction", c.se_reduction},
             {"use_residual", c.use_residual},
             {"use_se", c.use_se},
             {"se_placement", c.se_placement == SePlacement::BeforeResidualAdd ? "before_add" : "after_add"},
             {"norm_eps", c.norm_eps}};
}

void from_json(const json& j, UNetConfig& c)
{
    static const char* known[] = {"levels",       "base_channels", "in_channels", "out_channels",
                                  "patch_size",   "leaky_slope",   "se_reduction", "use_residual",
                                  "use_se",       "se_placement",  "norm_eps"};
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ConfigError("unet: unknown key '" + key + "'");
    }
    c.levels = j.value("levels", c.levels);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.out_channels = j.value("out_channels", c.out_channels);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    c.se_reduction = j.value("se_reduction", c.se_reduction);
    c.use_residual = j.value("use_residual", c.use_residual);
    c.use_se = j.value("use_se", c.use_se);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
    if (j.contains("se_placement")) {
        const auto p = j.at("se_placement").get<std::string>();
        if (p == "before_add")
            c.se_placement = SePlacement::BeforeResidualAdd;
        else if (p == "after_add")
            c.se_placement = SePlacement::AfterResidualAdd;
        else
            throw ConfigError("unet: se_placement must be before_add or after_add");
    }
}

int se_hidden_width(int channels, int reduction) { return std::max(1, (channels + reduction - 1) / reduction); }

// ---------------------------------------------------------------------------

template <class T>
Tensor<T> se_scales(const Tensor<T>& t, const SEBlock<T>& se)
{
    if (t.rank() != 5 || t.dim(1) != se.channels)
        throw Error("se_forward: channel mismatch, block has " + std::to_string(se.channels) + " channels, input " +
                    ad::shape_str(t.shape()));
    const Tensor<T> u = ad::global_avg_pool(t);
    const Tensor<T> z = ad::relu(ad::linear(u, se.w1, Tensor<T>{}));
    return ad::sigmoid(ad::linear(z, se.w2, Tensor<T>{}));
}

template <class T>
Tensor<T> se_forward(const Tensor<T>& t, const SEBlock<T>& se)
{
    return ad::mul_channelwise(t, se_scales(t, se));
}

template <class T>
Tensor<T> conv_block_forward(const Tensor<T>& x, const ConvBlock<T>& blk, const UNetConfig& cfg)
{
    if (x.rank() != 5 || x.dim(1) != blk.in_channels)
        throw Error("conv block expects " + std::to_string(blk.in_channels) + " input channels, got " +
                    ad::shape_str(x.shape()));
    const T slope = static_cast<T>(cfg.leaky_slope);
    const T eps = static_cast<T>(cfg.norm_eps);
    Tensor<T> h = blk.conv1(x);
    h = ad::leaky_relu(ad::instance_norm(h, blk.norm1.gamma, blk.norm1.beta, eps), slope);
    h = ad::instance_norm(blk.conv2(h), blk.norm2.gamma, blk.norm2.beta, eps);
    if (blk.se && cfg.se_placement == SePlacement::BeforeResidualAdd) h = se_forward(h, *blk.se);
    if (blk.shortcut) h = ad::add(h, (*blk.shortcut)(x));
    if (blk.se && cfg.se_placement == SePlacement::AfterResidualAdd) h = se_forward(h, *blk.se);
    return ad::leaky_relu(h, slope);
}

// ---------------------------------------------------------------------------

namespace {

template <class T>
Tensor<T> he_uniform(ad::Shape shape, std::int64_t fan_in, Rng& rng)
{
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> v(static_cast<std::size_t>(ad::shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from_data(std::move(shape), std::move(v), true);
}

} // namespace

template <class T>
Conv3dLayer<T> UNet3D<T>::make_conv(const std::string& prefix, int cin, int cout, int k, Rng& rng)
{
    Conv3dLayer<T> c;
    c.weight = he_uniform<T>({cout, cin, k, k, k}, static_cast<std::int64_t>(cin) * k * k * k, rng);
    c.bias = Tensor<T>::zeros({cout}, true);
    params_.push_back({prefix + ".weight", c.weight});
    params_.push_back({prefix + ".bias", c.bias});
    return c;
}

template <class T>
ConvBlock<T> UNet3D<T>::make_block(const std::string& prefix, int cin, int cout, Rng& rng)
{
    ConvBlock<T> b;
    b.in_channels = cin;
    b.out_channels = cout;
    auto norm = [&](const std::string& name) {
        InstanceNormLayer<T> n{Tensor<T>::full({cout}, T(1), true), Tensor<T>::zeros({cout}, true)};
        params_.push_back({prefix + "." + name + ".gamma", n.gamma});
        params_.push_back({prefix + "." + name + ".beta", n.beta});
        return n;
    };
    b.conv1 = make_conv(prefix + ".conv1", cin, cout, 3, rng);
    b.norm1 = norm("norm1");
    b.conv2 = make_conv(prefix + ".conv2", cout, cout, 3, rng);
    b.norm2 = norm("norm2");
    if (config_.use_se) {
        SEBlock<T> se;
        se.channels = cout;
        se.reduction = config_.se_reduction;
        const int hidden = se_hidden_width(cout, config_.se_reduction);
        se.w1 = he_uniform<T>({hidden, cout}, cout, rng);
        se.w2 = he_uniform<T>({cout, hidden}, hidden, rng);
        params_.push_back({prefix + ".se.w1", se.w1});
        params_.push_back({prefix + ".se.w2", se.w2});
        b.se = std::move(se);
    }
    if (config_.use_residual) b.shortcut = make_conv(prefix + ".shortcut", cin, cout, 1, rng);
    return b;
}

template <class T>
UNet3D<T>::UNet3D(const UNetConfig& config, std::uint64_t seed) : config_(config)
{
    config_.validate();
    Rng rng(seed);
    const int L = config_.levels;
    for (int l = 0; l < L; ++l) {
        const int cin = l == 0 ? config_.in_channels : config_.channels_at(l - 1);
        encoder_.push_back(make_block("enc" + std::to_string(l), cin, config_.channels_at(l), rng));
    }
    reducers_.resize(static_cast<std::size_t>(L - 1));
    decoder_.resize(static_cast<std::size_t>(L - 1));
    for (int l = L - 2; l >= 0; --l) {
        const int c = config_.channels_at(l);
        reducers_[l] = make_conv("dec" + std::to_string(l) + ".reduce", config_.channels_at(l + 1), c, 1, rng);
        // Skip pairing: encoder level l contributes c channels, the reducer c more.
        decoder_[l] = make_block("dec" + std::to_string(l), 2 * c, c, rng);
        if (decoder_[l].in_channels != encoder_[l].out_channels + c)
            throw Error("unet: skip connection channel mismatch at level " + std::to_string(l));
    }
    head_ = make_conv("head", config_.channels_at(0), config_.out_channels, 1, rng);
}

template <class T>
Tensor<T> UNet3D<T>::forward(const Tensor<T>& x) const
{
    if (x.rank() != 5 || x.dim(1) != config_.in_channels)
        throw Error("unet: input must be (N, " + std::to_string(config_.in_channels) + ", D, H, W), got " +
                    ad::shape_str(x.shape()));
    const std::int64_t step = std::int64_t{1} << (config_.levels - 1);
    for (int a = 2; a < 5; ++a)
        if (x.dim(a) % step != 0 || x.dim(a) < step)
            throw Error("unet: spatial dims of " + ad::shape_str(x.shape()) + " must be multiples of " +
                        std::to_string(step));
    const int L = config_.levels;
    std::vector<Tensor<T>> skips;
    Tensor<T> h = x;
    for (int l = 0; l < L; ++l) {
        h = conv_block_forward(h, encoder_[l], config_);
        if (l < L - 1) {
            skips.push_back(h);
            h = ad::maxpool3d(h);
        }
    }
    for (int l = L - 2; l >= 0; --l) {
        h = reducers_[l](ad::trilinear_upsample(h));
        h = conv_block_forward(ad::concat_channels(skips[l], h), decoder_[l], config_);
    }
    return head_(h);
}

template <class T>
std::int64_t UNet3D<T>::parameter_count() const
{
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

template <class T>
void UNet3D<T>::zero_grad()
{
    for (auto& p : params_) p.tensor.zero_grad();
}

template <class T>
void UNet3D<T>::fill_parameters(T value)
{
    for (auto& p : params_)
        for (auto& v : p.tensor.mutable_data()) v = value;
}

// ---------------------------------------------------------------------------

template <class T>
void save_checkpoint(const UNet3D<T>& model, const std::filesystem::path& path, std::int64_t iteration,
                     const OptimizerBlobs* optimizer)
{
    std::vector<std::uint8_t> out{'S', 'V', 'C', 'K'};
    le::put_u32(out, kCheckpointVersion);
    const std::string cfg = json(model.config()).dump();
    le::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
    out.insert(out.end(), cfg.begin(), cfg.end());
    le::put_u64(out, static_cast<std::uint64_t>(iteration));
    const auto& params = model.parameters();
    le::put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        le::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
        out.insert(out.end(), p.name.begin(), p.name.end());
        const auto& shape = p.tensor.shape();
        le::put_u32(out, static_cast<std::uint32_t>(shape.size()));
        for (auto d : shape) le::put_u64(out, static_cast<std::uint64_t>(d));
        for (T v : p.tensor.data()) le::put_f32(out, static_cast<float>(v));
    }
    if (optimizer) {
        if (optimizer->first_moment.size() != params.size() || optimizer->second_moment.size() != params.size())
            throw Error("checkpoint: optimizer state does not match parameter count");
        out.push_back(1);
        le::put_u64(out, static_cast<std::uint64_t>(optimizer->step));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto n = static_cast<std::size_t>(params[i].tensor.numel());
            if (optimizer->first_moment[i].size() != n || optimizer->second_moment[i].size() != n)
                throw Error("checkpoint: optimizer moment shape mismatch for " + params[i].name);
            for (float v : optimizer->first_moment[i]) le::put_f32(out, v);
            for (float v : optimizer->second_moment[i]) le::put_f32(out, v);
        }
    } else {
        out.push_back(0);
    }
    // Write-then-rename so an interrupted save never leaves a torn checkpoint.
    auto tmp = path;
    tmp += ".tmp";
    write_file_bytes(tmp, out);
    std::filesystem::rename(tmp, path);
}

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path, const UNetConfig* expected)
{
    const auto bytes = read_file_bytes(path);
    const std::span<const std::uint8_t> in(bytes);
    std::size_t pos = 0;
    try {
        if (bytes.size() < 4 || std::memcmp(bytes.data(), "SVCK", 4) != 0) throw Error("not a checkpoint file");
        pos = 4;
        const std::uint32_t version = le::get_u32(in, pos);
        if (version != kCheckpointVersion)
            throw Error("unsupported checkpoint version " + std::to_string(version));
        const std::uint32_t cfg_len = le::get_u32(in, pos);
        if (pos + cfg_len > bytes.size()) throw Error("unexpected end of data");
        UNetConfig cfg = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(pos + cfg_len))
                             .template get<UNetConfig>();
        pos += cfg_len;
        if (expected && !(cfg == *expected)) throw Error("checkpoint config does not match the expected UNet config");
        LoadedCheckpoint<T> ck{UNet3D<T>(cfg, 0), 0, std::nullopt};
        ck.iteration = static_cast<std::int64_t>(le::get_u64(in, pos));
        auto& params = ck.model.parameters();
        const std::uint32_t count = le::get_u32(in, pos);
        if (count != params.size()) throw Error("checkpoint parameter count does not match the model");
        for (auto& p : params) {
            const std::uint32_t name_len = le::get_u32(in, pos);
            if (pos + name_len > bytes.size()) throw Error("unexpected end of data");
            const std::string name(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + name_len));
            pos += name_len;
            if (name != p.name) throw Error("checkpoint parameter '" + name + "' where '" + p.name + "' expected");
            const std::uint32_t rank = le::get_u32(in, pos);
            ad::Shape shape(rank);
            for (auto& d : shape) d = static_cast<std::int64_t>(le::get_u64(in, pos));
            if (shape != p.tensor.shape())
                throw Error("checkpoint shape mismatch for " + name + ": " + ad::shape_str(shape) + " vs " +
                            ad::shape_str(p.tensor.shape()));
            for (auto& v : p.tensor.mutable_data()) v = static_cast<T>(le::get_f32(in, pos));
        }
        if (pos >= bytes.size()) throw Error("unexpected end of data");
        const std::uint8_t has_opt = bytes[pos++];
        if (has_opt > 1) throw Error("corrupt optimizer flag");
        if (has_opt) {
            OptimizerBlobs opt;
            opt.step = static_cast<std::int64_t>(le::get_u64(in, pos));
            for (const auto& p : params) {
                const auto n = static_cast<std::size_t>(p.tensor.numel());
                std::vector<float> m(n), v(n);
                for (auto& x : m) x = le::get_f32(in, pos);
                for (auto& x : v) x = le::get_f32(in, pos);
                opt.first_moment.push_back(std::move(m));
                opt.second_moment.push_back(std::move(v));
            }
            ck.optimizer = std::move(opt);
        }
        if (pos != bytes.size()) throw Error("trailing bytes after checkpoint payload");
        return ck;
    } catch (const json::exception& e) {
        throw Error("checkpoint " + path.string() + ": malformed config block: " + e.what());
    } catch (const ConfigError& e) {
        throw Error("checkpoint " + path.string() + ": " + e.what());
    } catch (const Error& e) {
        throw Error("checkpoint " + path.string() + ": " + e.what());
    }
}

template class UNet3D<float>;
template class UNet3D<double>;

#define STROKESEG_INSTANTIATE_NET(T)                                                                          \
    template Tensor<T> se_scales(const Tensor<T>&, const SEBlock<T>&);                                        \
    template Tensor<T> se_forward(const Tensor<T>&, const SEBlock<T>&);                                       \
    template Tensor<T> conv_block_forward(const Tensor<T>&, const ConvBlock<T>&, const UNetConfig&);          \
    template void save_checkpoint(const UNet3D<T>&, const std::filesystem::path&, std::int64_t,               \
                                  const OptimizerBlobs*);                                                     \
    template LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path&, const UNetConfig*);

STROKESEG_INSTANTIATE_NET(float)
STROKESEG_INSTANTIATE_NET(double)

} // namespace strokeseg
