#pragma once

/// @file datamodel.hpp
/// @brief Core value types shared across the pfiqa library.
///
/// Tensors follow libtorch conventions. Images inside a Sample are stored
/// H×W×3, float32, unnormalized in [0,1]. Feature maps carry a leading batch
/// dimension (N×C×p×p) once they leave the data module.

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfiqa {

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor dimensions disagree with a contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Pixel values, labels or scalars outside their allowed range.
class RangeError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration values or unknown enum names.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Problems with on-disk inputs: manifests, images, checkpoints.
class DataError : public Error {
public:
    using Error::Error;
};

class MissingFileError : public DataError {
public:
    using DataError::DataError;
};

/// NaN/Inf losses, degenerate weight maps, zero-variance metric inputs.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Zero-variance input to a correlation metric.
class DegenerateInputError : public NumericError {
public:
    using NumericError::NumericError;
};

// ---------------------------------------------------------------------------
// Samples and feature containers

struct Sample {
    torch::Tensor sr_image;            // H×W×3, [0,1]
    torch::Tensor lr_image_upsampled;  // H×W×3, [0,1], LR resized to SR size
    double scale_factor = 0.0;
    std::optional<double> mos;         // normalized to [0,1] at ingestion
    std::string dataset_id;
    std::string content_id;
    std::string method_id;
};

/// Returns `s` unchanged when every Sample invariant holds.
/// Throws ShapeError for mismatched or malformed images and RangeError for
/// pixel, scale or MOS values out of range.
Sample validate_sample(Sample s);

struct FeatureBundle {
    torch::Tensor global_feat;  // N×256×p×p, from the ViT stages
    torch::Tensor local_feat;   // N×256×p×p, from the ResNet stages
};

/// Checks that both maps are finite and shaped N×channels×grid×grid.
void check_bundle(const FeatureBundle& bundle, int64_t channels, int64_t grid);

enum class Branch { perception, fidelity };

std::string to_string(Branch branch);

struct BranchFeatures {
    torch::Tensor feat;  // N×C_b×p×p
    Branch branch_tag = Branch::perception;
};

/// Score maps, weight maps and the final score for a batch.
/// Maps belonging to a disabled branch are undefined tensors.
struct QualityPrediction {
    torch::Tensor s_p;          // N×1×p×p
    torch::Tensor s_f;          // N×1×p×p
    torch::Tensor w_p;          // N×1×p×p, in (0,1)
    torch::Tensor w_f;          // N×1×p×p, in (0,1)
    torch::Tensor final_score;  // N
};

/// Plain record for one prediction; the scalar is always present and the
/// four maps are included on request.
nlohmann::json to_record(const QualityPrediction& pred, int64_t index, bool include_maps);

// ---------------------------------------------------------------------------
// Experiment configuration

enum class FusionMode { adaptive, concat, vit_only, resnet_only };
enum class BackboneTrainable { none, vit, resnet, both };
enum class BackboneKind { fixture, pretrained };

std::string to_string(FusionMode mode);
std::string to_string(BackboneTrainable mode);
std::string to_string(BackboneKind kind);
FusionMode parse_fusion_mode(const std::string& name);
BackboneTrainable parse_backbone_trainable(const std::string& name);
BackboneKind parse_backbone_kind(const std::string& name);

struct SyntheticSpec {
    int64_t n_contents = 10;
    int64_t methods_per_content = 4;
    std::vector<double> scales{2.0, 3.0, 4.0};
    int64_t image_size = 256;
    double max_blur_sigma = 2.0;
    double max_noise_std = 0.05;
    uint64_t seed = 0;

    bool operator==(const SyntheticSpec&) const = default;
};

struct DatasetSpec {
    /// Dataset root holding `manifest.tsv`; unused for the synthetic format.
    std::string root;
    /// One of: generic, qads, wind, realsrq, synthetic.
    std::string format = "synthetic";
    SyntheticSpec synthetic;

    bool operator==(const DatasetSpec&) const = default;
};

struct SplitConfig {
    uint64_t seed = 0;
    double ratio = 0.8;
    int64_t n_repeats = 5;
    bool group_by_content = true;

    bool operator==(const SplitConfig&) const = default;
};

struct VitConfig {
    int64_t patch_size = 8;
    int64_t hidden_dim = 768;
    int64_t num_layers = 12;
    int64_t num_heads = 12;
    int64_t mlp_dim = 3072;

    bool operator==(const VitConfig&) const = default;
};

struct BackboneConfig {
    BackboneKind kind = BackboneKind::fixture;
    std::string vit_checkpoint;
    std::string resnet_checkpoint;
    std::vector<int64_t> vit_stage_indices{1, 3, 5, 7, 9};
    VitConfig vit;
    std::vector<int64_t> resnet_blocks{3, 4, 6, 3};
    uint64_t fixture_seed = 20240101;

    bool operator==(const BackboneConfig&) const = default;
};

struct ModelConfig {
    bool enable_perception_branch = true;
    bool enable_fidelity_branch = true;
    bool enable_scale_factor = true;
    FusionMode fusion_mode = FusionMode::adaptive;
    BackboneTrainable backbone_trainable = BackboneTrainable::none;
    bool per_channel_fusion = false;
    BackboneConfig backbone;
    int64_t feature_channels = 256;
    int64_t branch_channels = 256;
    int64_t head_hidden = 64;
    int64_t scale_hidden = 256;
    int64_t scale_channels = 1;
    int64_t reduction_kernel = 1;
    int64_t grid_size = 28;

    bool operator==(const ModelConfig&) const = default;
};

struct OptimConfig {
    double learning_rate = 1e-4;
    double weight_decay = 1e-2;
    double min_learning_rate = 1e-6;
    int64_t batch_size = 4;
    int64_t max_epochs = 200;
    bool horizontal_flip = true;
    /// Runs training forward passes under CPU bfloat16 autocast.
    bool bf16_autocast = false;

    bool operator==(const OptimConfig&) const = default;
};

struct EvalConfig {
    bool logistic_fit = false;
    bool emit_scatter = false;

    bool operator==(const EvalConfig&) const = default;
};

struct ExperimentConfig {
    DatasetSpec dataset;
    SplitConfig split;
    ModelConfig model;
    OptimConfig optim;
    EvalConfig eval;
    int64_t crop_size = 224;
    uint64_t seed = 0;

    bool operator==(const ExperimentConfig&) const = default;
};

/// Throws ConfigError unless at least one branch is enabled and every
/// numeric hyperparameter is in range.
void validate_config(const ExperimentConfig& config);

void to_json(nlohmann::json& j, const ExperimentConfig& config);
void from_json(const nlohmann::json& j, ExperimentConfig& config);

std::string serialize_config(const ExperimentConfig& config);
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);
void save_config(const ExperimentConfig& config, const std::string& path);

/// 64-bit FNV-1a hash of the canonical serialized config, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

}  // namespace pfiqa
