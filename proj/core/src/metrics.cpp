#include "pfiqa/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

namespace pfiqa {

namespace {

void check_pair(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size())
        throw ShapeError("correlation inputs differ in length (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
    if (a.size() < 3)
        throw ShapeError("correlation needs at least 3 samples, got " + std::to_string(a.size()));
}

double pearson(std::span<const double> x, std::span<const double> y)
{
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0)
        throw DegenerateInputError("constant input: correlation undefined for zero-variance vectors");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> to_doubles(const torch::Tensor& t)
{
    auto c = t.to(torch::kDouble).contiguous();
    return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

// Solves the 4×4 system A·x = b in place by Gaussian elimination with partial pivoting.
bool solve4(std::array<std::array<double, 4>, 4> a, std::array<double, 4> b, std::array<double, 4>& x)
{
    for (int col = 0; col < 4; ++col) {
        int piv = col;
        for (int r = col + 1; r < 4; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col]))
                piv = r;
        if (std::abs(a[piv][col]) < 1e-300)
            return false;
        std::swap(a[piv], a[col]);
        std::swap(b[piv], b[col]);
        for (int r = col + 1; r < 4; ++r) {
            const double f = a[r][col] / a[col][col];
            for (int k = col; k < 4; ++k)
                a[r][k] -= f * a[col][k];
            b[r] -= f * b[col];
        }
    }
    for (int r = 3; r >= 0; --r) {
        double s = b[r];
        for (int k = r + 1; k < 4; ++k)
            s -= a[r][k] * x[k];
        x[r] = s / a[r][r];
    }
    return true;
}

}  // namespace

double plcc(std::span<const double> pred, std::span<const double> mos)
{
    check_pair(pred, mos);
    return pearson(pred, mos);
}

std::vector<double> fractional_ranks(std::span<const double> values)
{
    std::vector<size_t> order(values.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]])
            ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (size_t k = i; k <= j; ++k)
            ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

double srcc(std::span<const double> pred, std::span<const double> mos)
{
    check_pair(pred, mos);
    auto rp = fractional_ranks(pred);
    auto rm = fractional_ranks(mos);
    return pearson(rp, rm);
}

double LogisticMap::operator()(double x) const
{
    const double s = std::max(std::abs(b4), 1e-12);
    return (b1 - b2) / (1.0 + std::exp(-(x - b3) / s)) + b2;
}

LogisticMap fit_logistic(std::span<const double> pred, std::span<const double> mos)
{
    check_pair(pred, mos);
    const double n = static_cast<double>(pred.size());
    const double mean_p = std::accumulate(pred.begin(), pred.end(), 0.0) / n;
    double var_p = 0.0;
    for (double p : pred)
        var_p += (p - mean_p) * (p - mean_p);
    var_p /= n;
    if (var_p <= 0.0)
        throw DegenerateInputError("constant input: cannot fit a logistic to constant predictions");

    LogisticMap m{*std::max_element(mos.begin(), mos.end()), *std::min_element(mos.begin(), mos.end()), mean_p,
                  std::sqrt(var_p)};
    auto params = [](const LogisticMap& l) { return std::array<double, 4>{l.b1, l.b2, l.b3, l.b4}; };
    auto from = [](const std::array<double, 4>& p) { return LogisticMap{p[0], p[1], p[2], p[3]}; };
    auto sse = [&](const LogisticMap& l) {
        double s = 0.0;
        for (size_t i = 0; i < pred.size(); ++i) {
            const double r = l(pred[i]) - mos[i];
            s += r * r;
        }
        return s;
    };

    double lambda = 1e-3;
    double cost = sse(m);
    for (int iter = 0; iter < 200; ++iter) {
        auto p = params(m);
        std::array<std::array<double, 4>, 4> jtj{};
        std::array<double, 4> jtr{};
        for (size_t i = 0; i < pred.size(); ++i) {
            const double r = m(pred[i]) - mos[i];
            std::array<double, 4> g{};
            for (int k = 0; k < 4; ++k) {
                auto q = p;
                const double h = 1e-6 * std::max(1.0, std::abs(p[k]));
                q[k] += h;
                g[k] = (from(q)(pred[i]) - m(pred[i])) / h;
            }
            for (int a = 0; a < 4; ++a) {
                jtr[a] += g[a] * r;
                for (int b = 0; b < 4; ++b)
                    jtj[a][b] += g[a] * g[b];
            }
        }
        bool improved = false;
        for (int attempt = 0; attempt < 10 && !improved; ++attempt) {
            auto lhs = jtj;
            for (int k = 0; k < 4; ++k)
                lhs[k][k] += lambda * std::max(jtj[k][k], 1e-12);
            std::array<double, 4> neg{-jtr[0], -jtr[1], -jtr[2], -jtr[3]};
            std::array<double, 4> step{};
            if (!solve4(lhs, neg, step)) {
                lambda *= 10.0;
                continue;
            }
            std::array<double, 4> q{};
            for (int k = 0; k < 4; ++k)
                q[k] = p[k] + step[k];
            const double c = sse(from(q));
            if (std::isfinite(c) && c < cost) {
                const double gain = cost - c;
                m = from(q);
                cost = c;
                lambda = std::max(lambda / 10.0, 1e-12);
                improved = true;
                if (gain < 1e-15 * std::max(1.0, cost))
                    return m;
            } else {
                lambda *= 10.0;
            }
        }
        if (!improved)
            break;
    }
    return m;
}

double plcc_logistic(std::span<const double> pred, std::span<const double> mos)
{
    auto fit = fit_logistic(pred, mos);
    std::vector<double> mapped(pred.size());
    std::transform(pred.begin(), pred.end(), mapped.begin(), fit);
    return plcc(mapped, mos);
}

torch::Tensor to_grayscale(const torch::Tensor& image)
{
    if (image.dim() == 2)
        return image;
    if (image.dim() == 3 && image.size(2) == 3) {
        auto img = image.to(torch::kDouble);
        return 0.299 * img.select(2, 0) + 0.587 * img.select(2, 1) + 0.114 * img.select(2, 2);
    }
    throw ShapeError("expected an H×W or H×W×3 image");
}

double psnr(const torch::Tensor& a, const torch::Tensor& b)
{
    if (a.sizes() != b.sizes())
        throw ShapeError("psnr inputs differ in shape");
    auto va = to_doubles(a), vb = to_doubles(b);
    if (va.empty())
        throw ShapeError("psnr of empty images");
    double se = 0.0;
    for (size_t i = 0; i < va.size(); ++i)
        se += (va[i] - vb[i]) * (va[i] - vb[i]);
    const double mse = se / static_cast<double>(va.size());
    if (mse == 0.0)
        return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

double ssim(const torch::Tensor& a, const torch::Tensor& b)
{
    if (a.sizes() != b.sizes())
        throw ShapeError("ssim inputs differ in shape");
    auto ga = to_grayscale(a).contiguous();
    auto gb = to_grayscale(b).contiguous();
    constexpr int kWin = 11;
    constexpr double kSigma = 1.5;
    const int64_t h = ga.size(0), w = ga.size(1);
    if (h < kWin || w < kWin)
        throw ShapeError("ssim needs images of at least 11×11 pixels");

    std::array<double, kWin> g{};
    double gsum = 0.0;
    for (int i = 0; i < kWin; ++i) {
        const double d = i - kWin / 2;
        g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
        gsum += g[i];
    }
    for (auto& v : g)
        v /= gsum;

    auto pa = to_doubles(ga), pb = to_doubles(gb);
    const int64_t oh = h - kWin + 1, ow = w - kWin + 1;
    // Separable filtering: horizontal pass over all rows, then vertical.
    auto filter = [&](const std::vector<double>& src) {
        std::vector<double> tmp(static_cast<size_t>(h * ow));
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < ow; ++x) {
                double s = 0.0;
                for (int k = 0; k < kWin; ++k)
                    s += g[k] * src[static_cast<size_t>(y * w + x + k)];
                tmp[static_cast<size_t>(y * ow + x)] = s;
            }
        std::vector<double> out(static_cast<size_t>(oh * ow));
        for (int64_t y = 0; y < oh; ++y)
            for (int64_t x = 0; x < ow; ++x) {
                double s = 0.0;
                for (int k = 0; k < kWin; ++k)
                    s += g[k] * tmp[static_cast<size_t>((y + k) * ow + x)];
                out[static_cast<size_t>(y * ow + x)] = s;
            }
        return out;
    };
    std::vector<double> aa(pa.size()), bb(pa.size()), ab(pa.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        aa[i] = pa[i] * pa[i];
        bb[i] = pb[i] * pb[i];
        ab[i] = pa[i] * pb[i];
    }
    auto mu_a = filter(pa), mu_b = filter(pb), s_aa = filter(aa), s_bb = filter(bb), s_ab = filter(ab);

    constexpr double c1 = (0.01 * 1.0) * (0.01 * 1.0);
    constexpr double c2 = (0.03 * 1.0) * (0.03 * 1.0);
    double total = 0.0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double va = s_aa[i] - ma * ma, vb = s_bb[i] - mb * mb, cov = s_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    return total / static_cast<double>(mu_a.size());
}

// ---------------------------------------------------------------------------
// Reports

EvalReport make_report(std::span<const double> pred, std::span<const double> mos, bool logistic)
{
    RepeatResult r;
    r.plcc = logistic ? plcc_logistic(pred, mos) : plcc(pred, mos);
    r.srcc = srcc(pred, mos);
    r.n_samples = static_cast<int64_t>(pred.size());
    return EvalReport{r.plcc, r.srcc, r.n_samples, {r}};
}

EvalReport aggregate_reports(const std::vector<EvalReport>& per_repeat)
{
    if (per_repeat.empty())
        throw ShapeError("cannot aggregate zero reports");
    EvalReport out;
    for (size_t i = 0; i < per_repeat.size(); ++i) {
        const auto& r = per_repeat[i];
        out.repeats.push_back(RepeatResult{static_cast<int64_t>(i), r.plcc, r.srcc, r.n_samples});
        out.plcc += r.plcc;
        out.srcc += r.srcc;
        out.n_samples += r.n_samples;
    }
    out.plcc /= static_cast<double>(per_repeat.size());
    out.srcc /= static_cast<double>(per_repeat.size());
    return out;
}

std::string format_number(double value)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10f", value);
    return buf;
}

std::string format_report_table(const EvalReport& report)
{
    std::string s = "repeat\tn_samples\tplcc\tsrcc\n";
    for (const auto& r : report.repeats)
        s += std::to_string(r.repeat) + "\t" + std::to_string(r.n_samples) + "\t" + format_number(r.plcc) + "\t" +
             format_number(r.srcc) + "\n";
    s += "mean\t" + std::to_string(report.n_samples) + "\t" + format_number(report.plcc) + "\t" +
         format_number(report.srcc) + "\n";
    return s;
}

nlohmann::json report_to_json(const EvalReport& report)
{
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.repeats)
        rows.push_back({{"repeat", r.repeat}, {"n_samples", r.n_samples}, {"plcc", r.plcc}, {"srcc", r.srcc}});
    return {{"plcc", report.plcc}, {"srcc", report.srcc}, {"n_samples", report.n_samples}, {"repeats", rows}};
}

void write_scatter(const std::string& path, std::span<const double> pred, std::span<const double> mos)
{
    if (pred.size() != mos.size())
        throw ShapeError("scatter inputs differ in length");
    std::ofstream out(path);
    if (!out)
        throw DataError("cannot write scatter file '" + path + "'");
    out << "# pred\tmos\n";
    for (size_t i = 0; i < pred.size(); ++i)
        out << format_number(pred[i]) << '\t' << format_number(mos[i]) << '\n';
}

}  // namespace pfiqa
