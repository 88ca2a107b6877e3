#pragma once

/// @file data.hpp
/// @brief Dataset ingestion, split protocol, crops/augmentation and the
///        synthetic desk-scale corpus.
///
/// Manifest format (`<root>/manifest.tsv`, UTF-8): lines starting with '#'
/// are comments; every other non-empty line is one sample with six
/// tab-separated fields
///
///     sr_path  lr_path  scale_factor  raw_label  content_id  method_id
///
/// Paths are relative to the dataset root.

#include "pfiqa/datamodel.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace pfiqa {

// ---------------------------------------------------------------------------
// Randomness helpers; explicit arithmetic so results do not depend on the
// standard library's distribution implementations.

/// Uniform integer in [0, n).
uint64_t uniform_index(std::mt19937_64& rng, uint64_t n);
/// Uniform real in [0, 1).
double uniform_unit(std::mt19937_64& rng);
/// Independent engine for a (seed, stream...) tuple.
std::mt19937_64 derive_rng(uint64_t seed, std::initializer_list<uint64_t> stream);

// ---------------------------------------------------------------------------
// Images

/// Decodes an 8-bit raster file to an H×W×3 RGB float tensor in [0,1].
torch::Tensor load_image(const std::string& path);
/// Writes an H×W×3 tensor in [0,1] as an 8-bit image (format from extension).
void save_image(const torch::Tensor& image, const std::string& path);
/// Bilinear (half-pixel centers) resize of an H×W×3 image.
torch::Tensor resize_bilinear(const torch::Tensor& image, int64_t height, int64_t width);
/// Box-filter downsampling of an H×W×3 image.
torch::Tensor resize_area(const torch::Tensor& image, int64_t height, int64_t width);

// ---------------------------------------------------------------------------
// Manifests and datasets

struct ManifestRecord {
    std::string sr_path;
    std::string lr_path;
    double scale_factor = 0.0;
    double raw_label = 0.0;
    std::string content_id;
    std::string method_id;
};

std::vector<ManifestRecord> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records);

/// Layout facts about a named benchmark format.
struct DatasetProfile {
    std::string format;
    std::vector<double> scales;  // empty: any scale > 1
    bool rank_labels = false;    // labels are ranks, 1 = best
    int64_t nominal_contents = 0;
    int64_t nominal_samples = 0;
};

const DatasetProfile& dataset_profile(const std::string& format);

/// Maps raw labels to [0,1]: min-max for opinion scores; for ranks the best
/// (smallest) rank maps to 1 and the worst to 0, linearly in between.
std::vector<double> normalize_labels(std::span<const double> raw, bool rank_labels);

/// Loads and validates every sample of a dataset. The synthetic format is
/// generated in memory from `spec.synthetic`.
std::vector<Sample> load_dataset(const DatasetSpec& spec);

// ---------------------------------------------------------------------------
// Splits

struct Split {
    std::vector<size_t> train;  // indices into the sample list
    std::vector<size_t> test;
};

/// `n_repeats` independent train/test partitions. With `group_by_content`
/// every content lands wholly in train or wholly in test.
std::vector<Split> make_splits(const std::vector<Sample>& samples, uint64_t seed, double ratio = 0.8,
                               int64_t n_repeats = 5, bool group_by_content = true);

// ---------------------------------------------------------------------------
// Model inputs

struct ModelInput {
    torch::Tensor sr;  // 3×crop×crop, ImageNet-normalized
    torch::Tensor lr;  // 3×crop×crop, ImageNet-normalized
    double scale_factor = 0.0;
    std::optional<double> mos;
};

struct CropWindow {
    int64_t top = 0;
    int64_t left = 0;
    bool operator==(const CropWindow&) const = default;
};

/// Random crop and optional horizontal flip, shared by SR and LR.
ModelInput train_transform(const Sample& s, std::mt19937_64& rng, int64_t crop = 224, bool flip = true);

/// Four corners then center, in that order.
std::vector<CropWindow> eval_crop_windows(int64_t height, int64_t width, int64_t crop = 224);
std::vector<ModelInput> eval_crops(const Sample& s, int64_t crop = 224);

/// Cuts one window from both images, flips if asked, normalizes.
ModelInput make_input(const Sample& s, CropWindow window, int64_t crop, bool flip);

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Procedural HR texture (oriented gratings plus flat-colored rectangles), S×S×3 in [0,1].
torch::Tensor synthesize_texture(int64_t size, std::mt19937_64& rng);

struct SyntheticItem {
    Sample sample;
    torch::Tensor lr_native;  // LR before upsampling
};

/// Downsamples `hr` by `scale`, re-upsamples and degrades with strength
/// d ∈ [0,1]: SR = clamp((1−d)·HR + d·(blur(up(LR)) + noise)). d = 0 gives SR = HR.
SyntheticItem degrade(const torch::Tensor& hr, double scale, double d, const SyntheticSpec& spec, uint64_t noise_seed);

/// Pseudo-MOS for degradation strength d: 1 − d.
double pseudo_mos(double d);

std::vector<Sample> synthesize_corpus(const SyntheticSpec& spec, std::mt19937_64& rng);
std::vector<SyntheticItem> synthesize_items(const SyntheticSpec& spec, std::mt19937_64& rng);

/// Writes a synthetic corpus as a dataset root (PNG images + manifest.tsv)
/// loadable with the generic format. Labels are written as pseudo-MOS.
void export_synthetic_dataset(const SyntheticSpec& spec, const std::string& root);

}  // namespace pfiqa
