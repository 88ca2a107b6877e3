#include "pfiqa/model.hpp"

namespace pfiqa {

namespace {

torch::Tensor promote(const torch::Tensor& t)
{
    if (t.defined() && at::isReducedFloatingType(t.scalar_type()))
        return t.to(torch::kFloat);
    return t;
}

}  // namespace

PfiqaModelImpl::PfiqaModelImpl(const ModelConfig& cfg, int64_t image_size) : cfg_(cfg), image_size_(image_size)
{
    if (!cfg.enable_perception_branch && !cfg.enable_fidelity_branch)
        throw ConfigError("at least one assessment branch must be enabled");
    extractor = register_module("extractor", FeatureExtractor(cfg, image_size));

    const int branches = int(cfg.enable_perception_branch) + int(cfg.enable_fidelity_branch);
    // Each branch term is a weighted mean of its score map, so splitting 0.5
    // across the enabled heads starts the untrained score near mid-range.
    const double head_bias = 0.5 / branches;
    auto init_head = [&](ScoringHead& head) {
        torch::NoGradGuard no_grad;
        head->conv2->bias.fill_(head_bias);
    };
    if (cfg.enable_perception_branch) {
        perception_afm = register_module("perception_afm", AdaptiveFusionModule(cfg, Branch::perception));
        perception_head = register_module("perception_head",
                                          ScoringHead(cfg.branch_channels, cfg.head_hidden, Branch::perception));
        init_head(perception_head);
    }
    if (cfg.enable_fidelity_branch) {
        fidelity_afm = register_module("fidelity_afm", AdaptiveFusionModule(cfg, Branch::fidelity));
        fidelity_head = register_module("fidelity_head",
                                        ScoringHead(cfg.branch_channels, cfg.head_hidden, Branch::fidelity));
        init_head(fidelity_head);
    }
    weighting_head = register_module("weighting_head", WeightingHead(cfg.branch_channels, branches, cfg.head_hidden));
}

ModelTrace PfiqaModelImpl::trace(const torch::Tensor& sr, const torch::Tensor& lr, const torch::Tensor& scales)
{
    ModelTrace t;
    const auto n = sr.size(0);
    if (scales.numel() != n)
        throw ShapeError("need one scale factor per batch item");
    if (cfg_.enable_fidelity_branch) {
        if (!lr.defined() || lr.sizes() != sr.sizes())
            throw ShapeError("SR and LR batches must have identical shapes");
        // One backbone pass over SR and LR together; the weights are shared.
        auto both = extractor(torch::cat({sr, lr}, 0));
        auto split = [n](const torch::Tensor& x, bool first) -> torch::Tensor {
            if (!x.defined())
                return {};
            return first ? x.slice(0, 0, n) : x.slice(0, n);
        };
        t.sr = {split(both.global_feat, true), split(both.local_feat, true)};
        t.lr = {split(both.global_feat, false), split(both.local_feat, false)};
        t.diff = difference_bundle(t.sr, t.lr);
    } else {
        t.sr = extractor(sr);
    }

    auto& pred = t.prediction;
    std::vector<torch::Tensor> weight_inputs;
    if (cfg_.enable_perception_branch) {
        t.perception = perception_afm(t.sr, scales);
        pred.s_p = perception_head(t.perception);
        weight_inputs.push_back(t.perception.feat);
    }
    if (cfg_.enable_fidelity_branch) {
        t.fidelity = fidelity_afm(t.diff, scales);
        pred.s_f = fidelity_head(t.fidelity);
        weight_inputs.push_back(t.fidelity.feat);
    }

    // Reduced-precision maps (autocast) are promoted before the weighted means.
    pred.s_p = promote(pred.s_p);
    pred.s_f = promote(pred.s_f);

    if (cfg_.enable_perception_branch && cfg_.enable_fidelity_branch) {
        std::tie(pred.w_p, pred.w_f) = weight_maps(weighting_head, t.perception, t.fidelity);
        pred.w_p = promote(pred.w_p);
        pred.w_f = promote(pred.w_f);
        pred.final_score = final_score(pred.s_p, pred.s_f, pred.w_p, pred.w_f);
    } else if (cfg_.enable_perception_branch) {
        pred.w_p = promote(weighting_head(weight_inputs));
        pred.final_score = weighted_mean(pred.s_p, pred.w_p);
    } else {
        pred.w_f = promote(weighting_head(weight_inputs));
        pred.final_score = weighted_mean(pred.s_f, pred.w_f);
    }
    return t;
}

QualityPrediction PfiqaModelImpl::forward(const torch::Tensor& sr, const torch::Tensor& lr,
                                          const torch::Tensor& scales)
{
    return trace(sr, lr, scales).prediction;
}

std::vector<torch::Tensor> PfiqaModelImpl::trainable_parameters()
{
    std::vector<torch::Tensor> out;
    for (auto& p : parameters())
        if (p.requires_grad())
            out.push_back(p);
    return out;
}

int64_t PfiqaModelImpl::trainable_parameter_count()
{
    int64_t n = 0;
    for (auto& p : trainable_parameters())
        n += p.numel();
    return n;
}

int64_t PfiqaModelImpl::parameter_count()
{
    int64_t n = 0;
    for (auto& p : parameters())
        n += p.numel();
    return n;
}

std::vector<std::pair<std::string, torch::Tensor>> PfiqaModelImpl::checkpoint_state()
{
    auto frozen = [&](const std::string& name) {
        if (name.rfind("extractor.vit.", 0) == 0)
            return !extractor->vit_trainable();
        if (name.rfind("extractor.resnet.", 0) == 0)
            return !extractor->resnet_trainable();
        return false;
    };
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (auto& p : named_parameters(true))
        if (!frozen(p.key()))
            out.emplace_back(p.key(), p.value());
    for (auto& b : named_buffers(true))
        if (!frozen(b.key()))
            out.emplace_back(b.key(), b.value());
    return out;
}

}  // namespace pfiqa
