#pragma once

/// @file model.hpp
/// @brief The full dual-branch quality network: shared backbones, one AFM
///        per branch, scoring heads, weighting head and score combination.

#include "pfiqa/backbones.hpp"
#include "pfiqa/datamodel.hpp"
#include "pfiqa/fusion.hpp"
#include "pfiqa/regression.hpp"

#include <torch/torch.h>

#include <string>
#include <utility>
#include <vector>

namespace pfiqa {

/// Intermediate tensors of one forward pass, for inspection and map dumps.
struct ModelTrace {
    FeatureBundle sr;
    FeatureBundle lr;
    FeatureBundle diff;
    BranchFeatures perception;
    BranchFeatures fidelity;
    QualityPrediction prediction;
};

class PfiqaModelImpl : public torch::nn::Module {
public:
    PfiqaModelImpl(const ModelConfig& cfg, int64_t image_size);

    /// `sr` and `lr` are normalized N×3×S×S crops; `scales` holds N raw scale factors.
    QualityPrediction forward(const torch::Tensor& sr, const torch::Tensor& lr, const torch::Tensor& scales);
    ModelTrace trace(const torch::Tensor& sr, const torch::Tensor& lr, const torch::Tensor& scales);

    std::vector<torch::Tensor> trainable_parameters();
    int64_t trainable_parameter_count();
    int64_t parameter_count();

    /// Parameters and buffers that belong in a checkpoint: everything except
    /// frozen backbone weights, which are rebuilt from the config.
    std::vector<std::pair<std::string, torch::Tensor>> checkpoint_state();

    const ModelConfig& config() const { return cfg_; }
    int64_t image_size() const { return image_size_; }

    FeatureExtractor extractor{nullptr};
    AdaptiveFusionModule perception_afm{nullptr};
    AdaptiveFusionModule fidelity_afm{nullptr};
    ScoringHead perception_head{nullptr};
    ScoringHead fidelity_head{nullptr};
    WeightingHead weighting_head{nullptr};

private:
    ModelConfig cfg_;
    int64_t image_size_;
};
TORCH_MODULE(PfiqaModel);

}  // namespace pfiqa
