#include "pfiqa/data.hpp"

#include "pfiqa/backbones.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace pfiqa {

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Randomness

uint64_t uniform_index(std::mt19937_64& rng, uint64_t n)
{
    if (n == 0)
        throw RangeError("uniform_index over an empty range");
    const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % n;
    uint64_t v;
    do {
        v = rng();
    } while (v >= limit);
    return v % n;
}

double uniform_unit(std::mt19937_64& rng)
{
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::mt19937_64 derive_rng(uint64_t seed, std::initializer_list<uint64_t> stream)
{
    std::vector<uint32_t> words{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32)};
    for (auto s : stream) {
        words.push_back(static_cast<uint32_t>(s));
        words.push_back(static_cast<uint32_t>(s >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return std::mt19937_64(seq);
}

// ---------------------------------------------------------------------------
// Images

torch::Tensor load_image(const std::string& path)
{
    if (!fs::exists(path))
        throw MissingFileError("missing file: image '" + path + "'");
    cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
    if (bgr.empty())
        throw DataError("cannot decode image '" + path + "'");
    if (bgr.depth() != CV_8U)
        bgr.convertTo(bgr, CV_8U);
    auto t = torch::from_blob(bgr.data, {bgr.rows, bgr.cols, 3}, torch::kUInt8).clone();
    return t.flip({2}).to(torch::kFloat32).div_(255.0f);
}

void save_image(const torch::Tensor& image, const std::string& path)
{
    if (image.dim() != 3 || image.size(2) != 3)
        throw ShapeError("save_image expects an H×W×3 tensor");
    auto u8 = image.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8).flip({2}).contiguous();
    cv::Mat bgr(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC3, u8.data_ptr<uint8_t>());
    if (!cv::imwrite(path, bgr))
        throw DataError("cannot write image '" + path + "'");
}

torch::Tensor resize_bilinear(const torch::Tensor& image, int64_t height, int64_t width)
{
    if (image.size(0) == height && image.size(1) == width)
        return image;
    auto x = image.permute({2, 0, 1}).unsqueeze(0);
    auto y = F::interpolate(x, F::InterpolateFuncOptions()
                                   .size(std::vector<int64_t>{height, width})
                                   .mode(torch::kBilinear)
                                   .align_corners(false));
    return y.squeeze(0).permute({1, 2, 0}).clamp(0.0, 1.0).contiguous();
}

torch::Tensor resize_area(const torch::Tensor& image, int64_t height, int64_t width)
{
    auto x = image.permute({2, 0, 1}).unsqueeze(0);
    auto y = F::interpolate(x, F::InterpolateFuncOptions().size(std::vector<int64_t>{height, width}).mode(torch::kArea));
    return y.squeeze(0).permute({1, 2, 0}).contiguous();
}

// ---------------------------------------------------------------------------
// Manifests

namespace {

std::vector<std::string> split_tabs(const std::string& line)
{
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, '\t'))
        out.push_back(cur);
    if (!line.empty() && line.back() == '\t')
        out.emplace_back();
    return out;
}

std::optional<double> parse_double(std::string s)
{
    while (!s.empty() && (s.back() == '\r' || s.back() == ' '))
        s.pop_back();
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty() || !std::isfinite(v))
        return std::nullopt;
    return v;
}

std::string strip_cr(std::string s)
{
    if (!s.empty() && s.back() == '\r')
        s.pop_back();
    return s;
}

}  // namespace

std::vector<ManifestRecord> read_manifest(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw MissingFileError("missing file: manifest '" + path + "'");
    std::vector<ManifestRecord> records;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = strip_cr(line);
        if (line.empty() || line[0] == '#')
            continue;
        auto f = split_tabs(line);
        if (f.size() != 6)
            throw DataError("malformed manifest " + path + ":" + std::to_string(lineno) + ": expected 6 tab-separated fields, got " +
                            std::to_string(f.size()));
        ManifestRecord r;
        r.sr_path = f[0];
        r.lr_path = f[1];
        auto scale = parse_double(f[2]);
        if (!scale)
            throw DataError("malformed manifest " + path + ":" + std::to_string(lineno) + ": bad scale factor '" + f[2] + "'");
        r.scale_factor = *scale;
        auto label = parse_double(f[3]);
        if (!label)
            throw DataError("unparseable label '" + f[3] + "' at " + path + ":" + std::to_string(lineno));
        r.raw_label = *label;
        r.content_id = f[4];
        r.method_id = f[5];
        if (r.sr_path.empty() || r.lr_path.empty() || r.content_id.empty())
            throw DataError("malformed manifest " + path + ":" + std::to_string(lineno) + ": empty path or content id");
        records.push_back(std::move(r));
    }
    return records;
}

void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records)
{
    std::ofstream out(path);
    if (!out)
        throw DataError("cannot write manifest '" + path + "'");
    out << "# sr_path\tlr_path\tscale_factor\traw_label\tcontent_id\tmethod_id\n";
    for (const auto& r : records) {
        char scale[32], label[32];
        std::snprintf(scale, sizeof(scale), "%.17g", r.scale_factor);
        std::snprintf(label, sizeof(label), "%.17g", r.raw_label);
        out << r.sr_path << '\t' << r.lr_path << '\t' << scale << '\t' << label << '\t' << r.content_id << '\t'
            << r.method_id << '\n';
    }
}

const DatasetProfile& dataset_profile(const std::string& format)
{
    static const std::map<std::string, DatasetProfile> profiles{
        {"generic", {"generic", {}, false, 0, 0}},
        {"synthetic", {"synthetic", {}, false, 0, 0}},
        {"qads", {"qads", {2.0, 3.0, 4.0}, false, 60, 980}},
        {"wind", {"wind", {2.0, 4.0, 8.0}, true, 13, 312}},
        {"realsrq", {"realsrq", {2.0, 3.0, 4.0}, false, 180, 1620}},
    };
    auto it = profiles.find(format);
    if (it == profiles.end())
        throw ConfigError("unknown dataset format '" + format + "'");
    return it->second;
}

std::vector<double> normalize_labels(std::span<const double> raw, bool rank_labels)
{
    if (raw.empty())
        return {};
    const auto [mn_it, mx_it] = std::minmax_element(raw.begin(), raw.end());
    const double mn = *mn_it, mx = *mx_it;
    if (!(mx > mn))
        throw DataError("labels have zero range; cannot normalize to [0,1]");
    std::vector<double> out(raw.size());
    for (size_t i = 0; i < raw.size(); ++i)
        out[i] = rank_labels ? (mx - raw[i]) / (mx - mn) : (raw[i] - mn) / (mx - mn);
    return out;
}

std::vector<Sample> load_dataset(const DatasetSpec& spec)
{
    if (spec.format == "synthetic") {
        auto rng = derive_rng(spec.synthetic.seed, {0x5157});
        return synthesize_corpus(spec.synthetic, rng);
    }
    const auto& profile = dataset_profile(spec.format);
    if (spec.root.empty() || !fs::is_directory(spec.root))
        throw MissingFileError("missing file: dataset root '" + spec.root + "' does not exist");
    const auto root = fs::path(spec.root);
    auto records = read_manifest((root / "manifest.tsv").string());
    if (records.empty())
        throw DataError("manifest '" + (root / "manifest.tsv").string() + "' lists no samples");

    std::vector<double> raw;
    raw.reserve(records.size());
    for (const auto& r : records) {
        if (!profile.scales.empty() &&
            std::find(profile.scales.begin(), profile.scales.end(), r.scale_factor) == profile.scales.end())
            throw DataError("scale factor " + std::to_string(r.scale_factor) + " is not part of the " + profile.format +
                            " layout");
        raw.push_back(r.raw_label);
    }
    auto mos = normalize_labels(raw, profile.rank_labels);

    std::vector<Sample> samples;
    samples.reserve(records.size());
    for (size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        Sample s;
        s.sr_image = load_image((root / r.sr_path).string());
        auto lr = load_image((root / r.lr_path).string());
        s.lr_image_upsampled = resize_bilinear(lr, s.sr_image.size(0), s.sr_image.size(1));
        s.scale_factor = r.scale_factor;
        s.mos = mos[i];
        s.dataset_id = profile.format;
        s.content_id = r.content_id;
        s.method_id = r.method_id;
        samples.push_back(validate_sample(std::move(s)));
    }
    return samples;
}

// ---------------------------------------------------------------------------
// Splits

std::vector<Split> make_splits(const std::vector<Sample>& samples, uint64_t seed, double ratio, int64_t n_repeats,
                               bool group_by_content)
{
    if (samples.empty())
        throw DataError("cannot split an empty sample list");
    if (!(ratio > 0.0 && ratio < 1.0))
        throw ConfigError("split ratio must lie in (0,1)");

    // Units are contents (grouped) or individual samples.
    std::vector<std::string> unit_ids;
    std::vector<size_t> unit_of(samples.size());
    if (group_by_content) {
        std::set<std::string> ids;
        for (const auto& s : samples)
            ids.insert(s.content_id);
        unit_ids.assign(ids.begin(), ids.end());
        for (size_t i = 0; i < samples.size(); ++i)
            unit_of[i] = static_cast<size_t>(
                std::lower_bound(unit_ids.begin(), unit_ids.end(), samples[i].content_id) - unit_ids.begin());
    } else {
        for (size_t i = 0; i < samples.size(); ++i) {
            unit_ids.push_back(std::to_string(i));
            unit_of[i] = i;
        }
    }
    const auto n_units = unit_ids.size();
    if (n_units < 5)
        throw DataError("need at least 5 " + std::string(group_by_content ? "contents" : "samples") +
                        " to split, got " + std::to_string(n_units));
    auto n_train = static_cast<size_t>(std::llround(ratio * static_cast<double>(n_units)));
    n_train = std::clamp<size_t>(n_train, 1, n_units - 1);

    std::vector<Split> splits;
    for (int64_t rep = 0; rep < n_repeats; ++rep) {
        auto rng = derive_rng(seed, {0x53504c4954ULL, static_cast<uint64_t>(rep)});
        std::vector<size_t> perm(n_units);
        std::iota(perm.begin(), perm.end(), size_t{0});
        for (size_t i = n_units - 1; i > 0; --i)
            std::swap(perm[i], perm[uniform_index(rng, i + 1)]);
        std::vector<bool> in_train(n_units, false);
        for (size_t i = 0; i < n_train; ++i)
            in_train[perm[i]] = true;
        Split sp;
        for (size_t i = 0; i < samples.size(); ++i)
            (in_train[unit_of[i]] ? sp.train : sp.test).push_back(i);
        splits.push_back(std::move(sp));
    }
    return splits;
}

// ---------------------------------------------------------------------------
// Model inputs

ModelInput make_input(const Sample& s, CropWindow win, int64_t crop, bool flip)
{
    const auto h = s.sr_image.size(0), w = s.sr_image.size(1);
    if (h < crop || w < crop)
        throw ShapeError("image " + std::to_string(h) + "×" + std::to_string(w) + " is smaller than the " +
                         std::to_string(crop) + " crop");
    if (win.top < 0 || win.left < 0 || win.top + crop > h || win.left + crop > w)
        throw ShapeError("crop window out of bounds");
    auto cut = [&](const torch::Tensor& img) {
        auto c = img.slice(0, win.top, win.top + crop).slice(1, win.left, win.left + crop);
        if (flip)
            c = c.flip({1});
        return imagenet_normalize(c.permute({2, 0, 1}).contiguous());
    };
    return ModelInput{cut(s.sr_image), cut(s.lr_image_upsampled), s.scale_factor, s.mos};
}

ModelInput train_transform(const Sample& s, std::mt19937_64& rng, int64_t crop, bool flip)
{
    const auto h = s.sr_image.size(0), w = s.sr_image.size(1);
    if (h < crop || w < crop)
        throw ShapeError("image " + std::to_string(h) + "×" + std::to_string(w) + " is smaller than the " +
                         std::to_string(crop) + " crop");
    CropWindow win{static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(h - crop + 1))),
                   static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(w - crop + 1)))};
    const bool do_flip = flip && (rng() & 1ULL);
    return make_input(s, win, crop, do_flip);
}

std::vector<CropWindow> eval_crop_windows(int64_t height, int64_t width, int64_t crop)
{
    if (height < crop || width < crop)
        throw ShapeError("image " + std::to_string(height) + "×" + std::to_string(width) + " is smaller than the " +
                         std::to_string(crop) + " crop");
    const auto bottom = height - crop, right = width - crop;
    return {{0, 0}, {0, right}, {bottom, 0}, {bottom, right}, {bottom / 2, right / 2}};
}

std::vector<ModelInput> eval_crops(const Sample& s, int64_t crop)
{
    std::vector<ModelInput> out;
    for (const auto& win : eval_crop_windows(s.sr_image.size(0), s.sr_image.size(1), crop))
        out.push_back(make_input(s, win, crop, false));
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

torch::Tensor synthesize_texture(int64_t size, std::mt19937_64& rng)
{
    constexpr double two_pi = 2.0 * std::numbers::pi;
    auto coords = torch::arange(size, torch::kFloat64) / static_cast<double>(size);
    auto yy = coords.view({size, 1}).expand({size, size});
    auto xx = coords.view({1, size}).expand({size, size});
    auto img = torch::zeros({size, size, 3}, torch::kFloat64);
    for (int k = 0; k < 6; ++k) {
        const double theta = uniform_unit(rng) * std::numbers::pi;
        const double freq = 2.0 + 18.0 * uniform_unit(rng);
        const double phase = uniform_unit(rng) * two_pi;
        auto wave = torch::sin(two_pi * freq * (xx * std::cos(theta) + yy * std::sin(theta)) + phase);
        for (int c = 0; c < 3; ++c)
            img.select(2, c).add_(wave * uniform_unit(rng));
    }
    for (int r = 0; r < 4; ++r) {
        const auto y0 = static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(size)));
        const auto x0 = static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(size)));
        const auto rh = 1 + static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(size / 2)));
        const auto rw = 1 + static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(size / 2)));
        auto patch = img.slice(0, y0, std::min(size, y0 + rh)).slice(1, x0, std::min(size, x0 + rw));
        for (int c = 0; c < 3; ++c)
            patch.select(2, c).fill_(4.0 * uniform_unit(rng) - 2.0);
    }
    auto mn = img.min(), mx = img.max();
    img = (img - mn) / (mx - mn + 1e-12);
    return img.to(torch::kFloat32).clamp(0.0, 1.0).contiguous();
}

namespace {

torch::Tensor gaussian_blur(const torch::Tensor& hwc, double sigma)
{
    if (sigma <= 0.0)
        return hwc;
    const int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3.0 * sigma)));
    auto offsets = torch::arange(-radius, radius + 1, torch::kFloat32);
    auto kernel = torch::exp(-(offsets * offsets) / (2.0 * sigma * sigma));
    kernel = kernel / kernel.sum();
    auto x = hwc.permute({2, 0, 1}).unsqueeze(0);
    x = F::pad(x, F::PadFuncOptions({radius, radius, radius, radius}).mode(torch::kReplicate));
    auto kh = kernel.view({1, 1, 1, -1}).repeat({3, 1, 1, 1});
    auto kv = kernel.view({1, 1, -1, 1}).repeat({3, 1, 1, 1});
    x = F::conv2d(x, kh, F::Conv2dFuncOptions().groups(3));
    x = F::conv2d(x, kv, F::Conv2dFuncOptions().groups(3));
    return x.squeeze(0).permute({1, 2, 0}).contiguous();
}

}  // namespace

double pseudo_mos(double d)
{
    return 1.0 - d;
}

SyntheticItem degrade(const torch::Tensor& hr, double scale, double d, const SyntheticSpec& spec, uint64_t noise_seed)
{
    if (!(scale > 1.0))
        throw RangeError("scale factor must be > 1");
    if (!(d >= 0.0 && d <= 1.0))
        throw RangeError("degradation strength must lie in [0,1]");
    const auto h = hr.size(0), w = hr.size(1);
    const auto lh = std::max<int64_t>(1, static_cast<int64_t>(std::llround(static_cast<double>(h) / scale)));
    const auto lw = std::max<int64_t>(1, static_cast<int64_t>(std::llround(static_cast<double>(w) / scale)));
    auto lr = resize_area(hr, lh, lw).clamp(0.0, 1.0);
    auto up = resize_bilinear(lr, h, w);

    torch::Tensor sr;
    if (d == 0.0) {
        sr = hr.clone();
    } else {
        auto gen = at::detail::createCPUGenerator(noise_seed);
        auto noise = torch::randn(hr.sizes(), gen, torch::kFloat32) * (d * spec.max_noise_std);
        auto degraded = gaussian_blur(up, d * spec.max_blur_sigma) + noise;
        sr = ((1.0 - d) * hr + d * degraded).clamp(0.0, 1.0);
    }
    SyntheticItem item;
    item.sample.sr_image = sr.contiguous();
    item.sample.lr_image_upsampled = up;
    item.sample.scale_factor = scale;
    item.sample.mos = pseudo_mos(d);
    item.sample.dataset_id = "synthetic";
    item.lr_native = lr;
    return item;
}

std::vector<SyntheticItem> synthesize_items(const SyntheticSpec& spec, std::mt19937_64& rng)
{
    if (spec.n_contents < 1)
        throw ConfigError("synthetic corpus needs at least one content");
    if (spec.scales.empty())
        throw ConfigError("synthetic corpus needs at least one scale factor");
    std::vector<SyntheticItem> items;
    char id[32];
    for (int64_t c = 0; c < spec.n_contents; ++c) {
        auto hr = synthesize_texture(spec.image_size, rng);
        for (int64_t m = 0; m < spec.methods_per_content; ++m) {
            const double scale = spec.scales[uniform_index(rng, spec.scales.size())];
            const double d = uniform_unit(rng);
            auto item = degrade(hr, scale, d, spec, rng());
            std::snprintf(id, sizeof(id), "c%03lld", static_cast<long long>(c));
            item.sample.content_id = id;
            std::snprintf(id, sizeof(id), "m%02lld", static_cast<long long>(m));
            item.sample.method_id = id;
            item.sample = validate_sample(std::move(item.sample));
            items.push_back(std::move(item));
        }
    }
    return items;
}

std::vector<Sample> synthesize_corpus(const SyntheticSpec& spec, std::mt19937_64& rng)
{
    auto items = synthesize_items(spec, rng);
    std::vector<Sample> out;
    out.reserve(items.size());
    for (auto& it : items)
        out.push_back(std::move(it.sample));
    return out;
}

void export_synthetic_dataset(const SyntheticSpec& spec, const std::string& root)
{
    auto rng = derive_rng(spec.seed, {0x5157});
    auto items = synthesize_items(spec, rng);
    fs::create_directories(fs::path(root) / "sr");
    fs::create_directories(fs::path(root) / "lr");
    std::vector<ManifestRecord> records;
    for (const auto& it : items) {
        const auto& s = it.sample;
        const auto stem = s.content_id + "_" + s.method_id + ".png";
        save_image(s.sr_image, (fs::path(root) / "sr" / stem).string());
        save_image(it.lr_native, (fs::path(root) / "lr" / stem).string());
        records.push_back({"sr/" + stem, "lr/" + stem, s.scale_factor, *s.mos, s.content_id, s.method_id});
    }
    write_manifest((fs::path(root) / "manifest.tsv").string(), records);
}

}  // namespace pfiqa
