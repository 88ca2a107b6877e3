#include "pfiqa/fusion.hpp"

#include <sstream>

namespace pfiqa {

namespace {

std::string shape_str(const torch::Tensor& t)
{
    std::ostringstream os;
    os << t.sizes();
    return os.str();
}

void require_map(const torch::Tensor& t, int64_t channels, const char* what)
{
    if (!t.defined() || t.dim() != 4 || t.size(1) != channels)
        throw ShapeError(std::string(what) + " must be N×" + std::to_string(channels) + "×p×p, got " +
                         (t.defined() ? shape_str(t) : std::string("undefined")));
}

}  // namespace

GlobalLocalFusionImpl::GlobalLocalFusionImpl(FusionMode mode, int64_t channels, bool per_channel)
    : mode_(mode), channels_(channels)
{
    if (mode == FusionMode::adaptive) {
        const int64_t rows = per_channel ? channels : 1;
        // Start as an equal-weight average so neither source dominates.
        weight = register_parameter("weight", torch::full({rows, 2}, 0.5));
        bias = register_parameter("bias", torch::zeros({rows}));
    } else if (mode == FusionMode::concat) {
        concat_conv = register_module("concat_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * channels,
                                                                                                channels, 1)));
    }
}

void GlobalLocalFusionImpl::set_adaptive_weights(double a, double b, double c)
{
    if (mode_ != FusionMode::adaptive)
        throw ConfigError("adaptive weights exist only in adaptive fusion mode");
    torch::NoGradGuard no_grad;
    weight.select(1, 0).fill_(a);
    weight.select(1, 1).fill_(b);
    bias.fill_(c);
}

torch::Tensor GlobalLocalFusionImpl::forward(const FeatureBundle& bundle)
{
    switch (mode_) {
    case FusionMode::vit_only:
        require_map(bundle.global_feat, channels_, "global features");
        return torch::relu(bundle.global_feat);
    case FusionMode::resnet_only:
        require_map(bundle.local_feat, channels_, "local features");
        return torch::relu(bundle.local_feat);
    default:
        break;
    }
    require_map(bundle.global_feat, channels_, "global features");
    require_map(bundle.local_feat, channels_, "local features");
    if (bundle.global_feat.sizes() != bundle.local_feat.sizes())
        throw ShapeError("global " + shape_str(bundle.global_feat) + " and local " + shape_str(bundle.local_feat) +
                         " features differ in shape");
    if (mode_ == FusionMode::concat)
        return torch::relu(concat_conv(torch::cat({bundle.global_feat, bundle.local_feat}, 1)));

    // N×C×p×p×2 stack, then a linear map over the last axis.
    auto stacked = torch::stack({bundle.global_feat, bundle.local_feat}, -1);
    const auto rows = weight.size(0);
    auto w = weight.view({1, rows, 1, 1, 2});
    auto b = bias.view({1, rows, 1, 1});
    return torch::relu((stacked * w).sum(-1) + b);
}

ScaleEmbeddingImpl::ScaleEmbeddingImpl(int64_t hidden, int64_t channels, int64_t grid)
    : channels_(channels), grid_(grid)
{
    fc1 = register_module("fc1", torch::nn::Linear(1, hidden));
    fc2 = register_module("fc2", torch::nn::Linear(hidden, channels * grid * grid));
}

torch::Tensor ScaleEmbeddingImpl::forward(const torch::Tensor& scales)
{
    if (!scales.defined() || scales.numel() == 0)
        throw ShapeError("scale embedding needs at least one scale factor");
    if (!(scales > 0).all().item<bool>())
        throw RangeError("scale factors must be positive");
    auto s = scales.reshape({-1, 1}).to(fc1->weight.dtype());
    auto h = torch::relu(fc1(s));
    return fc2(h).view({s.size(0), channels_, grid_, grid_});
}

ScaleConditionerImpl::ScaleConditionerImpl(int64_t in_channels, int64_t embed_channels, int64_t out_channels)
    : embed_channels_(embed_channels)
{
    using torch::nn::Conv2dOptions;
    conv1 = register_module("conv1",
                            torch::nn::Conv2d(Conv2dOptions(in_channels + embed_channels, out_channels, 3).padding(1)));
    conv2 = register_module("conv2", torch::nn::Conv2d(Conv2dOptions(out_channels, out_channels, 3).padding(1)));
}

torch::Tensor ScaleConditionerImpl::forward(const torch::Tensor& fused, const torch::Tensor& embedding)
{
    auto x = fused;
    if (embed_channels_ > 0) {
        if (!embedding.defined())
            throw ShapeError("scale conditioner was built with an embedding input but none was given");
        if (embedding.dim() != 4 || embedding.size(0) != fused.size(0) || embedding.size(2) != fused.size(2) ||
            embedding.size(3) != fused.size(3))
            throw ShapeError("scale embedding " + shape_str(embedding) + " does not match features " +
                             shape_str(fused) + " spatially");
        x = torch::cat({fused, embedding}, 1);
    }
    return conv2(torch::relu(conv1(x)));
}

AdaptiveFusionModuleImpl::AdaptiveFusionModuleImpl(const ModelConfig& cfg, Branch branch) : branch_(branch)
{
    fusion = register_module("fusion", GlobalLocalFusion(cfg.fusion_mode, cfg.feature_channels, cfg.per_channel_fusion));
    int64_t embed_channels = 0;
    if (cfg.enable_scale_factor) {
        embedding = register_module("embedding", ScaleEmbedding(cfg.scale_hidden, cfg.scale_channels, cfg.grid_size));
        embed_channels = cfg.scale_channels;
    }
    conditioner = register_module("conditioner",
                                  ScaleConditioner(cfg.feature_channels, embed_channels, cfg.branch_channels));
}

BranchFeatures AdaptiveFusionModuleImpl::forward(const FeatureBundle& bundle, const torch::Tensor& scales)
{
    auto fused = fusion(bundle);
    torch::Tensor emb;
    if (embedding)
        emb = embedding(scales);
    return {conditioner(fused, emb), branch_};
}

}  // namespace pfiqa
