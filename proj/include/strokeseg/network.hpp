#pragma once

// SE-residual 3D U-Net.
//
// Encoder level l holds a ConvBlock producing base * 2^l channels and, except
// at the deepest level, a 2x2x2 max pooling. Each decoder level upsamples the
// deeper features trilinearly, halves their channel count with a 1x1x1
// convolution, concatenates the encoder skip of the same level and runs a
// ConvBlock. A final 1x1x1 convolution emits one channel of logits.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "strokeseg/ops.hpp"

namespace strokeseg {

enum class SePlacement { BeforeResidualAdd, AfterResidualAdd };

struct UNetConfig {
    int levels = 3;
    int base_channels = 8;
    int in_channels = 1;
    int out_channels = 1;
    int patch_size = 16;
    double leaky_slope = 0.01;
    int se_reduction = 16;
    bool use_residual = true;
    bool use_se = true;
    SePlacement se_placement = SePlacement::BeforeResidualAdd;
    double norm_eps = 1e-5;

    void validate() const;
    int channels_at(int level) const { return base_channels << level; }
    bool operator==(const UNetConfig&) const = default;
};

void to_json(nlohmann::json& j, const UNetConfig& c);
void from_json(const nlohmann::json& j, UNetConfig& c);

template <class T>
struct NamedParam {
    std::string name;
    ad::Tensor<T> tensor;
};

template <class T>
struct Conv3dLayer {
    ad::Tensor<T> weight; // (Cout, Cin, k, k, k)
    ad::Tensor<T> bias;   // (Cout)
    ad::Tensor<T> operator()(const ad::Tensor<T>& x) const { return ad::conv3d(x, weight, bias); }
};

template <class T>
struct InstanceNormLayer {
    ad::Tensor<T> gamma;
    ad::Tensor<T> beta;
};

/// Channel recalibration: S = sigmoid(W2 relu(W1 U)), U the per-channel means.
template <class T>
struct SEBlock {
    int channels = 0;
    int reduction = 16;
    ad::Tensor<T> w1; // (hidden, C)
    ad::Tensor<T> w2; // (C, hidden)

    int hidden() const { return static_cast<int>(w1.dim(0)); }
};

/// Width of the SE bottleneck: ceil(C / r), at least 1.
int se_hidden_width(int channels, int reduction);

template <class T>
struct ConvBlock {
    Conv3dLayer<T> conv1;
    InstanceNormLayer<T> norm1;
    Conv3dLayer<T> conv2;
    InstanceNormLayer<T> norm2;
    std::optional<Conv3dLayer<T>> shortcut;
    std::optional<SEBlock<T>> se;
    int in_channels = 0;
    int out_channels = 0;
};

template <class T>
ad::Tensor<T> se_forward(const ad::Tensor<T>& t, const SEBlock<T>& se);

/// The per-channel scales S for input t, shape (N, C).
template <class T>
ad::Tensor<T> se_scales(const ad::Tensor<T>& t, const SEBlock<T>& se);

template <class T>
ad::Tensor<T> conv_block_forward(const ad::Tensor<T>& x, const ConvBlock<T>& blk, const UNetConfig& cfg);

template <class T>
class UNet3D {
public:
    /// Builds and initializes (He-uniform conv/linear weights, zero biases,
    /// unit gamma, zero beta) from `seed`.
    UNet3D(const UNetConfig& config, std::uint64_t seed);
    // Parameters are shared tensor handles; copies would alias them.
    UNet3D(const UNet3D&) = delete;
    UNet3D& operator=(const UNet3D&) = delete;
    UNet3D(UNet3D&&) noexcept = default;
    UNet3D& operator=(UNet3D&&) noexcept = default;

    /// x: (N, in_channels, P, P, P) -> logits (N, out_channels, P, P, P).
    ad::Tensor<T> forward(const ad::Tensor<T>& x) const;

    const UNetConfig& config() const { return config_; }
    const std::vector<NamedParam<T>>& parameters() const { return params_; }
    std::vector<NamedParam<T>>& parameters() { return params_; }
    std::int64_t parameter_count() const;
    void zero_grad();
    /// Sets every parameter element to `value`.
    void fill_parameters(T value);

    const std::vector<ConvBlock<T>>& encoder() const { return encoder_; }
    const std::vector<ConvBlock<T>>& decoder() const { return decoder_; }

private:
    ConvBlock<T> make_block(const std::string& prefix, int cin, int cout, Rng& rng);
    Conv3dLayer<T> make_conv(const std::string& prefix, int cin, int cout, int k, Rng& rng);

    UNetConfig config_;
    std::vector<ConvBlock<T>> encoder_;
    std::vector<Conv3dLayer<T>> reducers_; // decoder channel-halving convs, index = level
    std::vector<ConvBlock<T>> decoder_;    // index = level
    Conv3dLayer<T> head_;
    std::vector<NamedParam<T>> params_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "SVCK", u32 version, u32 length + JSON UNetConfig, u64 iteration,
// u32 count of named f32 parameter blobs, then an optional Adam section.
// All integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct OptimizerBlobs {
    std::int64_t step = 0;
    std::vector<std::vector<float>> first_moment;
    std::vector<std::vector<float>> second_moment;
};

template <class T>
struct LoadedCheckpoint {
    UNet3D<T> model;
    std::int64_t iteration = 0;
    std::optional<OptimizerBlobs> optimizer;
};

template <class T>
void save_checkpoint(const UNet3D<T>& model, const std::filesystem::path& path, std::int64_t iteration = 0,
                     const OptimizerBlobs* optimizer = nullptr);

/// If `expected` is given, the stored config must equal it.
template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path, const UNetConfig* expected = nullptr);

extern template class UNet3D<float>;
extern template class UNet3D<double>;

} // namespace strokeseg
