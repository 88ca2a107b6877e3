#pragma once

/// @file trainer.hpp
/// @brief Training loop, 5-crop evaluation, the repeated-split protocol,
///        ablation suites and checkpoints.

#include "pfiqa/data.hpp"
#include "pfiqa/datamodel.hpp"
#include "pfiqa/metrics.hpp"
#include "pfiqa/model.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace pfiqa {

struct TrainLogEntry {
    int64_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double learning_rate = 0.0;  // at the last step of the epoch
    std::optional<double> val_plcc;
    std::optional<double> val_srcc;
};

/// `epoch<TAB>train_loss<TAB>lr[<TAB>val_plcc<TAB>val_srcc]`
std::string format_log_entry(const TrainLogEntry& entry);

/// Owns the model and the optimizer for one training run.
///
/// Everything random is derived from `config.seed`: parameter init,
/// per-epoch shuffling and per-sample crops/flips.
class Trainer {
public:
    explicit Trainer(const ExperimentConfig& config, torch::Device device = torch::kCPU);

    PfiqaModel& model() { return model_; }
    const ExperimentConfig& config() const { return config_; }
    torch::optim::AdamW& optimizer() { return *optimizer_; }
    torch::Device device() const { return device_; }

    /// Sets the number of optimizer steps the cosine schedule spans.
    void set_total_steps(int64_t steps);
    /// Cosine decay from learning_rate to min(min_learning_rate, learning_rate).
    double learning_rate_at(int64_t step) const;
    int64_t steps_taken() const { return step_; }
    int64_t epochs_done() const { return epoch_; }

    /// One optimizer step on a prepared batch; returns the batch MSE.
    /// Throws NumericError on a non-finite loss or gradient.
    double step(const std::vector<ModelInput>& batch);

    /// One pass over `indices` in a seeded shuffled order.
    TrainLogEntry train_epoch(const std::vector<Sample>& samples, const std::vector<size_t>& indices);

    /// Full budget of `max_epochs`. `on_epoch` sees every log entry as it is produced.
    std::vector<TrainLogEntry> fit(const std::vector<Sample>& samples, const std::vector<size_t>& indices,
                                   const std::function<void(const TrainLogEntry&)>& on_epoch = {});

    /// Restores weights, optimizer state and epoch counter from a checkpoint
    /// written by save_checkpoint with the same model configuration.
    void resume(const std::string& path);

private:
    ExperimentConfig config_;
    torch::Device device_;
    PfiqaModel model_{nullptr};
    std::unique_ptr<torch::optim::AdamW> optimizer_;
    int64_t total_steps_ = 1;
    int64_t step_ = 0;
    int64_t epoch_ = 0;
};

struct TrainResult {
    PfiqaModel model{nullptr};
    std::vector<TrainLogEntry> log;
};

/// Trains a fresh model on `indices` (all samples when empty).
TrainResult train(const ExperimentConfig& config, const std::vector<Sample>& corpus,
                  const std::vector<size_t>& indices = {},
                  const std::function<void(const TrainLogEntry&)>& on_epoch = {});

// ---------------------------------------------------------------------------
// Evaluation

/// Maps one sample to a scalar quality prediction.
using Scorer = std::function<double(const Sample&)>;

/// Mean model score over the distinct 5-crop windows of a sample.
Scorer make_model_scorer(PfiqaModel model, int64_t crop = 224);

struct EvalOutcome {
    EvalReport report;
    std::vector<double> predictions;
    std::vector<double> mos;
};

/// Scores `indices` (all samples when empty) and correlates against MOS.
/// Throws ShapeError for fewer than three samples and DataError when a
/// sample has no MOS.
EvalOutcome evaluate(const Scorer& scorer, const std::vector<Sample>& samples, const std::vector<size_t>& indices = {},
                     bool logistic = false);

// ---------------------------------------------------------------------------
// Protocol

struct ProtocolHooks {
    std::function<void(int64_t repeat, const TrainLogEntry&)> on_epoch;
    /// Called after each repeat finished training, before its evaluation.
    std::function<void(int64_t repeat, Trainer&)> on_trained;
    std::function<void(int64_t repeat, const EvalOutcome&)> on_evaluated;
};

struct ProtocolResult {
    EvalReport report;
    std::vector<EvalOutcome> repeats;
};

/// Trains and evaluates once per split and averages the repeats.
ProtocolResult run_protocol(const ExperimentConfig& config, const std::vector<Sample>& corpus,
                            const ProtocolHooks& hooks = {}, torch::Device device = torch::kCPU);

// ---------------------------------------------------------------------------
// Ablations

enum class AblationAxis { branches, fusion, finetune };

std::string to_string(AblationAxis axis);
/// Throws ConfigError for unknown names.
AblationAxis parse_ablation_axis(const std::string& name);

struct AblationRow {
    std::string label;   // "(a)" .. "(d)"
    std::string method;  // human-readable setting
    ExperimentConfig config;
};

/// The four configurations of one axis, derived from `base`.
std::vector<AblationRow> ablation_rows(const ExperimentConfig& base, AblationAxis axis);

struct AblationResult {
    AblationRow row;
    int64_t trainable_parameters = 0;
    int64_t total_parameters = 0;
    std::optional<EvalReport> report;  // empty when only counting
};

/// Builds every row's model and counts parameters without training.
std::vector<AblationResult> count_ablation_parameters(const ExperimentConfig& base, AblationAxis axis);

/// Runs the full protocol for every row of the axis.
std::vector<AblationResult> run_ablation_suite(const ExperimentConfig& base, const std::vector<Sample>& corpus,
                                               AblationAxis axis, const ProtocolHooks& hooks = {},
                                               torch::Device device = torch::kCPU);

/// Tab-delimited comparative table, one line per row after a header.
std::string format_ablation_table(AblationAxis axis, const std::vector<AblationResult>& results);

// ---------------------------------------------------------------------------
// Checkpoints

/// Writes trainable/non-frozen model tensors, optimizer state, config
/// snapshot, seed and epoch counter.
void save_checkpoint(const std::string& path, Trainer& trainer);
void save_checkpoint(const std::string& path, PfiqaModel& model, const ExperimentConfig& config, int64_t epoch);

struct LoadedCheckpoint {
    ExperimentConfig config;
    int64_t epoch = 0;
    PfiqaModel model{nullptr};
};

/// Rebuilds the model from the stored config and restores its tensors.
/// Throws MissingFileError for absent files and DataError when the stored
/// tensors do not match the configured model.
LoadedCheckpoint load_checkpoint(const std::string& path, torch::Device device = torch::kCPU);

}  // namespace pfiqa
