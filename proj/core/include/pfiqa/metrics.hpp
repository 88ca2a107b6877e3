#pragma once

/// @file metrics.hpp
/// @brief Correlation metrics (PLCC, SRCC), reference metrics (PSNR, SSIM)
///        and evaluation reports.

#include "pfiqa/datamodel.hpp"

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace pfiqa {

/// Pearson correlation. Throws ShapeError on length mismatch or fewer than
/// three values and DegenerateInputError when either vector is constant.
double plcc(std::span<const double> pred, std::span<const double> mos);

/// Spearman correlation: Pearson correlation of fractional (tie-averaged) ranks.
double srcc(std::span<const double> pred, std::span<const double> mos);

/// 1-based ranks with ties sharing the average of their positions.
std::vector<double> fractional_ranks(std::span<const double> values);

/// Four-parameter logistic f(x) = (b1 − b2) / (1 + exp(−(x − b3)/|b4|)) + b2.
struct LogisticMap {
    double b1 = 1.0, b2 = 0.0, b3 = 0.0, b4 = 1.0;
    double operator()(double x) const;
};

/// Least-squares fit of the logistic map from predictions to MOS
/// (Levenberg–Marquardt).
LogisticMap fit_logistic(std::span<const double> pred, std::span<const double> mos);

/// PLCC after mapping predictions through the fitted logistic.
double plcc_logistic(std::span<const double> pred, std::span<const double> mos);

/// 10·log10(1/MSE) for images in [0,1]; +infinity when the images are equal.
double psnr(const torch::Tensor& a, const torch::Tensor& b);

/// Mean single-scale SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01,
/// K2 = 0.03, dynamic range 1) over the valid window positions. H×W×3
/// inputs are converted to luma first.
double ssim(const torch::Tensor& a, const torch::Tensor& b);

/// ITU-R BT.601 luma of an H×W×3 image; H×W inputs pass through.
torch::Tensor to_grayscale(const torch::Tensor& image);

// ---------------------------------------------------------------------------
// Reports

struct RepeatResult {
    int64_t repeat = 0;
    double plcc = 0.0;
    double srcc = 0.0;
    int64_t n_samples = 0;
};

struct EvalReport {
    double plcc = 0.0;     // mean over repeats
    double srcc = 0.0;     // mean over repeats
    int64_t n_samples = 0; // total over repeats
    std::vector<RepeatResult> repeats;
};

/// Single evaluation; the report holds one repeat row. `logistic` selects
/// PLCC after a logistic fit.
EvalReport make_report(std::span<const double> pred, std::span<const double> mos, bool logistic = false);

/// Mean of several single-repeat reports, keeping each as a repeat row.
EvalReport aggregate_reports(const std::vector<EvalReport>& per_repeat);

/// Tab-delimited table: one row per repeat, then a `mean` row.
std::string format_report_table(const EvalReport& report);
nlohmann::json report_to_json(const EvalReport& report);

/// Writes `pred<TAB>mos` lines (with a `#` header) for external plotting.
void write_scatter(const std::string& path, std::span<const double> pred, std::span<const double> mos);

/// Fixed-precision rendering used by every report writer.
std::string format_number(double value);

}  // namespace pfiqa
