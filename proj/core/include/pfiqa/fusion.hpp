#pragma once

/// @file fusion.hpp
/// @brief Adaptive Fusion Module: merges global/local features and injects
///        the scale-factor embedding, one instance per assessment branch.

#include "pfiqa/datamodel.hpp"

#include <torch/torch.h>

namespace pfiqa {

/// Collapses a FeatureBundle to one C×p×p map.
///
/// adaptive    ReLU(a·global + b·local + c), with (a, b, c) shared across
///             channels and positions, or per channel when `per_channel` is set.
/// concat      ReLU(conv1×1(cat(global, local))), 2C → C.
/// vit_only    ReLU(global); the local slot is ignored.
/// resnet_only ReLU(local); the global slot is ignored.
class GlobalLocalFusionImpl : public torch::nn::Module {
public:
    GlobalLocalFusionImpl(FusionMode mode, int64_t channels, bool per_channel);

    torch::Tensor forward(const FeatureBundle& bundle);

    /// Sets the adaptive weights directly: every channel gets (a, b, bias).
    void set_adaptive_weights(double a, double b, double bias);

    FusionMode mode() const { return mode_; }

    torch::Tensor weight;  // adaptive: 1×2 or C×2
    torch::Tensor bias;    // adaptive: 1 or C
    torch::nn::Conv2d concat_conv{nullptr};

private:
    FusionMode mode_;
    int64_t channels_;
};
TORCH_MODULE(GlobalLocalFusion);

/// scale → dense(1→hidden) → ReLU → dense(hidden→channels·g·g) → reshape.
class ScaleEmbeddingImpl : public torch::nn::Module {
public:
    ScaleEmbeddingImpl(int64_t hidden, int64_t channels, int64_t grid);

    /// `scales` holds one raw scale factor per batch item (N or N×1).
    torch::Tensor forward(const torch::Tensor& scales);

    torch::nn::Linear fc1{nullptr};
    torch::nn::Linear fc2{nullptr};

private:
    int64_t channels_;
    int64_t grid_;
};
TORCH_MODULE(ScaleEmbedding);

/// conv3×3 → ReLU → conv3×3 over cat(fused, embedding) on the channel axis.
/// Without an embedding the first convolution takes `in_channels` inputs.
class ScaleConditionerImpl : public torch::nn::Module {
public:
    ScaleConditionerImpl(int64_t in_channels, int64_t embed_channels, int64_t out_channels);

    torch::Tensor forward(const torch::Tensor& fused, const torch::Tensor& embedding = {});

    torch::nn::Conv2d conv1{nullptr};
    torch::nn::Conv2d conv2{nullptr};

private:
    int64_t embed_channels_;
};
TORCH_MODULE(ScaleConditioner);

class AdaptiveFusionModuleImpl : public torch::nn::Module {
public:
    AdaptiveFusionModuleImpl(const ModelConfig& cfg, Branch branch);

    BranchFeatures forward(const FeatureBundle& bundle, const torch::Tensor& scales);

    GlobalLocalFusion fusion{nullptr};
    ScaleEmbedding embedding{nullptr};  // null when the scale factor is disabled
    ScaleConditioner conditioner{nullptr};

private:
    Branch branch_;
};
TORCH_MODULE(AdaptiveFusionModule);

}  // namespace pfiqa
