#pragma once

/// @file regression.hpp
/// @brief Patch scoring heads, the patch weighting head and the weighted
///        score combination.

#include "pfiqa/datamodel.hpp"

#include <torch/torch.h>

#include <utility>

namespace pfiqa {

inline constexpr double kWeightSumEpsilon = 1e-8;

/// conv3×3 (C_b→hidden) → ReLU → conv3×3 (hidden→1); raw per-patch scores.
class ScoringHeadImpl : public torch::nn::Module {
public:
    ScoringHeadImpl(int64_t in_channels, int64_t hidden, Branch branch);

    torch::Tensor forward(const BranchFeatures& features);

    Branch branch() const { return branch_; }

    torch::nn::Conv2d conv1{nullptr};
    torch::nn::Conv2d conv2{nullptr};

private:
    int64_t in_channels_;
    Branch branch_;
};
TORCH_MODULE(ScoringHead);

/// Sigmoid(conv1×1(ReLU(conv3×3(cat(branches))))).
/// With both branches it emits two channels, [w_p, w_f]; the single-branch
/// variant takes one branch and emits one channel.
class WeightingHeadImpl : public torch::nn::Module {
public:
    WeightingHeadImpl(int64_t branch_channels, int64_t branch_count, int64_t hidden);

    torch::Tensor forward(const std::vector<torch::Tensor>& branch_features);

    torch::nn::Conv2d conv3{nullptr};
    torch::nn::Conv2d conv1{nullptr};

private:
    int64_t branch_channels_;
    int64_t branch_count_;
};
TORCH_MODULE(WeightingHead);

/// Splits a two-channel weight tensor into (w_p, w_f), each N×1×p×p.
std::pair<torch::Tensor, torch::Tensor> weight_maps(WeightingHead& head, const BranchFeatures& perception,
                                                    const BranchFeatures& fidelity);

/// Σ(s⊙w)/Σw per batch item. Maps are N×1×p×p (or 1×p×p / p×p for a single
/// item, treated as N=1). Throws NumericError when Σw ≤ ε.
torch::Tensor weighted_mean(const torch::Tensor& scores, const torch::Tensor& weights);

/// S_PF = Σ(s_p⊙w_p)/Σw_p + Σ(s_f⊙w_f)/Σw_f, one value per batch item.
torch::Tensor final_score(const torch::Tensor& s_p, const torch::Tensor& s_f, const torch::Tensor& w_p,
                          const torch::Tensor& w_f);

}  // namespace pfiqa
