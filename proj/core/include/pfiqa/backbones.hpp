#pragma once

/// @file backbones.hpp
/// @brief Frozen ViT / ResNet feature extractors and the channel reductions
///        that turn their stage outputs into a FeatureBundle.
///
/// Two families are provided behind one interface:
///  - pretrained: ViT-B/8 and ResNet-50 with torchvision parameter names, so a
///    `torch.save(model.state_dict())` file loads directly;
///  - fixture: small randomly initialized stand-ins with identical output
///    shapes, used for fast tests and desk-scale runs.

#include "pfiqa/datamodel.hpp"

#include <torch/torch.h>

#include <string>
#include <vector>

namespace pfiqa {

struct BackboneOutputs {
    std::vector<torch::Tensor> vit_stages;     // 5 × (N×768×28×28)
    std::vector<torch::Tensor> resnet_stages;  // N×256×56², N×512×28², N×1024×14², N×2048×7²
};

/// Channel counts of the four ResNet-50 stages (conv2_x .. conv5_x).
inline constexpr int64_t kResnetStageChannels[4] = {256, 512, 1024, 2048};

/// ImageNet mean/std normalization of an N×3×H×W (or 3×H×W) tensor in [0,1].
torch::Tensor imagenet_normalize(const torch::Tensor& images);

// ---------------------------------------------------------------------------
// Backbone interfaces

class VitBackboneImpl : public torch::nn::Module {
public:
    /// Token maps after each selected encoder layer, class token dropped,
    /// reshaped to N×hidden×g×g.
    virtual std::vector<torch::Tensor> stages(const torch::Tensor& images) = 0;
};

class ResnetBackboneImpl : public torch::nn::Module {
public:
    /// Outputs of the four residual stages at native resolution.
    virtual std::vector<torch::Tensor> stages(const torch::Tensor& images) = 0;
};

// ---------------------------------------------------------------------------
// Pretrained architectures (torchvision layout)

/// Multi-head self-attention with packed QKV projection (nn.MultiheadAttention layout).
class SelfAttentionImpl : public torch::nn::Module {
public:
    SelfAttentionImpl(int64_t hidden, int64_t heads);
    torch::Tensor forward(const torch::Tensor& x);

private:
    int64_t heads_;
    torch::Tensor in_proj_weight;
    torch::Tensor in_proj_bias;
    torch::nn::Linear out_proj{nullptr};
};
TORCH_MODULE(SelfAttention);

class VitEncoderLayerImpl : public torch::nn::Module {
public:
    VitEncoderLayerImpl(int64_t hidden, int64_t heads, int64_t mlp_dim);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::LayerNorm ln_1{nullptr};
    SelfAttention self_attention{nullptr};
    torch::nn::LayerNorm ln_2{nullptr};
    torch::nn::Sequential mlp{nullptr};
};
TORCH_MODULE(VitEncoderLayer);

class VitEncoderImpl : public torch::nn::Module {
public:
    VitEncoderImpl(const VitConfig& cfg, int64_t seq_len);

    torch::Tensor pos_embedding;
    std::vector<VitEncoderLayer> layers;
    torch::nn::LayerNorm ln{nullptr};
};
TORCH_MODULE(VitEncoder);

class VisionTransformerImpl : public VitBackboneImpl {
public:
    VisionTransformerImpl(const VitConfig& cfg, int64_t image_size, std::vector<int64_t> stage_indices);
    std::vector<torch::Tensor> stages(const torch::Tensor& images) override;

    const VitConfig& config() const { return cfg_; }

private:
    VitConfig cfg_;
    int64_t grid_;
    std::vector<int64_t> stage_indices_;
    torch::nn::Conv2d conv_proj{nullptr};
    torch::Tensor class_token;
    VitEncoder encoder{nullptr};
};

class BottleneckImpl : public torch::nn::Module {
public:
    BottleneckImpl(int64_t in_channels, int64_t width, int64_t stride);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
    torch::nn::Sequential downsample{nullptr};
};
TORCH_MODULE(Bottleneck);

class ResNetImpl : public ResnetBackboneImpl {
public:
    explicit ResNetImpl(const std::vector<int64_t>& blocks);
    std::vector<torch::Tensor> stages(const torch::Tensor& images) override;

private:
    torch::nn::Conv2d conv1{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr};
    torch::nn::Sequential layer1{nullptr}, layer2{nullptr}, layer3{nullptr}, layer4{nullptr};
};

// ---------------------------------------------------------------------------
// Fixture architectures

class FixtureVitImpl : public VitBackboneImpl {
public:
    FixtureVitImpl(const VitConfig& cfg, int64_t image_size, std::vector<int64_t> stage_indices, uint64_t seed);
    std::vector<torch::Tensor> stages(const torch::Tensor& images) override;

private:
    int64_t grid_;
    std::vector<int64_t> stage_indices_;
    torch::nn::Conv2d patch_embed{nullptr};
    torch::Tensor pos_embedding;
    torch::nn::ModuleList blocks{nullptr};
};

class FixtureResNetImpl : public ResnetBackboneImpl {
public:
    explicit FixtureResNetImpl(uint64_t seed);
    std::vector<torch::Tensor> stages(const torch::Tensor& images) override;

private:
    torch::nn::Conv2d stem{nullptr};
    torch::nn::ModuleList stage_convs{nullptr};
};

/// Copies tensors from a `torch.save(state_dict)` file into `module`.
/// Every parameter and buffer of `module` must be present with a matching
/// shape; extra entries (classifier heads) are ignored.
void load_state_dict_file(torch::nn::Module& module, const std::string& path);

// ---------------------------------------------------------------------------
// Reductions

/// Concatenates the ViT stages on the channel axis and applies a learned
/// convolution (1×1 by default) down to `out_channels`.
class GlobalReductionImpl : public torch::nn::Module {
public:
    GlobalReductionImpl(int64_t stage_count, int64_t stage_channels, int64_t out_channels, int64_t kernel);
    torch::Tensor forward(const std::vector<torch::Tensor>& vit_stages);

    torch::nn::Conv2d conv{nullptr};

private:
    int64_t stage_count_;
    int64_t stage_channels_;
};
TORCH_MODULE(GlobalReduction);

/// Bilinearly resizes each ResNet stage to grid×grid, concatenates and
/// reduces with a learned convolution.
class LocalReductionImpl : public torch::nn::Module {
public:
    LocalReductionImpl(std::vector<int64_t> stage_channels, int64_t out_channels, int64_t kernel, int64_t grid);
    torch::Tensor forward(const std::vector<torch::Tensor>& resnet_stages);

    torch::nn::Conv2d conv{nullptr};

private:
    std::vector<int64_t> stage_channels_;
    int64_t grid_;
};
TORCH_MODULE(LocalReduction);

/// Elementwise SR − LR on both maps.
FeatureBundle difference_bundle(const FeatureBundle& sr_bundle, const FeatureBundle& lr_bundle);

// ---------------------------------------------------------------------------
// Feature extractor

/// Owns both backbones (shared by SR and LR inputs) and both reductions.
/// Paths disabled by the fusion mode are not constructed.
class FeatureExtractorImpl : public torch::nn::Module {
public:
    FeatureExtractorImpl(const ModelConfig& cfg, int64_t image_size);

    BackboneOutputs extract_stages(const torch::Tensor& images);
    torch::Tensor reduce_global(const std::vector<torch::Tensor>& vit_stages);
    torch::Tensor reduce_local(const std::vector<torch::Tensor>& resnet_stages);

    /// Normalized N×3×S×S images to a bundle. A disabled path yields an
    /// undefined tensor in its slot.
    FeatureBundle forward(const torch::Tensor& images);

    /// Backbone parameters only (both families).
    std::vector<torch::Tensor> backbone_parameters() const;

    /// Loads pretrained checkpoints named in the config.
    void load_pretrained();

    /// Keeps backbone normalization layers in inference mode regardless of
    /// the requested mode.
    void train(bool on = true) override;

    bool has_vit() const { return static_cast<bool>(vit_); }
    bool has_resnet() const { return static_cast<bool>(resnet_); }
    bool vit_trainable() const { return vit_trainable_; }
    bool resnet_trainable() const { return resnet_trainable_; }

    std::shared_ptr<VitBackboneImpl> vit() const { return vit_; }
    std::shared_ptr<ResnetBackboneImpl> resnet() const { return resnet_; }
    GlobalReduction global_reduction{nullptr};
    LocalReduction local_reduction{nullptr};

private:
    ModelConfig cfg_;
    int64_t image_size_;
    bool vit_trainable_ = false;
    bool resnet_trainable_ = false;
    std::shared_ptr<VitBackboneImpl> vit_;
    std::shared_ptr<ResnetBackboneImpl> resnet_;
};
TORCH_MODULE(FeatureExtractor);

}  // namespace pfiqa
