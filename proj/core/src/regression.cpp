#include "pfiqa/regression.hpp"

#include <sstream>

namespace pfiqa {

namespace {

std::string shape_str(const torch::Tensor& t)
{
    std::ostringstream os;
    os << t.sizes();
    return os.str();
}

torch::Tensor as_batched_map(const torch::Tensor& t, const char* what)
{
    if (!t.defined())
        throw ShapeError(std::string(what) + " is undefined");
    switch (t.dim()) {
    case 2: return t.unsqueeze(0).unsqueeze(0);
    case 3:
        if (t.size(0) == 1)
            return t.unsqueeze(0);
        break;
    case 4:
        if (t.size(1) == 1)
            return t;
        break;
    default: break;
    }
    throw ShapeError(std::string(what) + " must be a single-channel map, got " + shape_str(t));
}

}  // namespace

ScoringHeadImpl::ScoringHeadImpl(int64_t in_channels, int64_t hidden, Branch branch)
    : in_channels_(in_channels), branch_(branch)
{
    using torch::nn::Conv2dOptions;
    conv1 = register_module("conv1", torch::nn::Conv2d(Conv2dOptions(in_channels, hidden, 3).padding(1)));
    conv2 = register_module("conv2", torch::nn::Conv2d(Conv2dOptions(hidden, 1, 3).padding(1)));
}

torch::Tensor ScoringHeadImpl::forward(const BranchFeatures& features)
{
    if (features.branch_tag != branch_)
        throw ConfigError("scoring head for the " + to_string(branch_) + " branch received " +
                          to_string(features.branch_tag) + " features");
    const auto& f = features.feat;
    if (!f.defined() || f.dim() != 4 || f.size(1) != in_channels_)
        throw ShapeError("scoring head expects N×" + std::to_string(in_channels_) + "×p×p, got " +
                         (f.defined() ? shape_str(f) : std::string("undefined")));
    return conv2(torch::relu(conv1(f)));
}

WeightingHeadImpl::WeightingHeadImpl(int64_t branch_channels, int64_t branch_count, int64_t hidden)
    : branch_channels_(branch_channels), branch_count_(branch_count)
{
    using torch::nn::Conv2dOptions;
    conv3 = register_module("conv3", torch::nn::Conv2d(Conv2dOptions(branch_channels * branch_count, hidden, 3)
                                                           .padding(1)));
    conv1 = register_module("conv1", torch::nn::Conv2d(Conv2dOptions(hidden, branch_count, 1)));
}

torch::Tensor WeightingHeadImpl::forward(const std::vector<torch::Tensor>& branch_features)
{
    if (static_cast<int64_t>(branch_features.size()) != branch_count_)
        throw ShapeError("weighting head expects " + std::to_string(branch_count_) + " branch inputs, got " +
                         std::to_string(branch_features.size()));
    for (const auto& f : branch_features)
        if (!f.defined() || f.dim() != 4 || f.size(1) != branch_channels_ ||
            f.sizes() != branch_features.front().sizes())
            throw ShapeError("weighting head inputs must be spatially aligned N×" + std::to_string(branch_channels_) +
                             "×p×p maps");
    auto x = branch_features.size() == 1 ? branch_features.front() : torch::cat(branch_features, 1);
    return torch::sigmoid(conv1(torch::relu(conv3(x))));
}

std::pair<torch::Tensor, torch::Tensor> weight_maps(WeightingHead& head, const BranchFeatures& perception,
                                                    const BranchFeatures& fidelity)
{
    if (perception.branch_tag != Branch::perception || fidelity.branch_tag != Branch::fidelity)
        throw ConfigError("weight_maps expects (perception, fidelity) features in that order");
    auto w = head(std::vector<torch::Tensor>{perception.feat, fidelity.feat});
    if (w.size(1) != 2)
        throw ShapeError("weight_maps needs the two-channel weighting head");
    return {w.slice(1, 0, 1), w.slice(1, 1, 2)};
}

torch::Tensor weighted_mean(const torch::Tensor& scores, const torch::Tensor& weights)
{
    auto s = as_batched_map(scores, "score map");
    auto w = as_batched_map(weights, "weight map");
    if (s.sizes() != w.sizes())
        throw ShapeError("score map " + shape_str(s) + " and weight map " + shape_str(w) + " differ");
    auto wsum = w.sum({1, 2, 3});
    if (!(wsum > kWeightSumEpsilon).all().item<bool>())
        throw NumericError("degenerate weights: weight map sums to <= 1e-8");
    return (s * w).sum({1, 2, 3}) / wsum;
}

torch::Tensor final_score(const torch::Tensor& s_p, const torch::Tensor& s_f, const torch::Tensor& w_p,
                          const torch::Tensor& w_f)
{
    return weighted_mean(s_p, w_p) + weighted_mean(s_f, w_f);
}

}  // namespace pfiqa
