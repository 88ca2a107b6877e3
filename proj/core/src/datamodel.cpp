#include "pfiqa/datamodel.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace pfiqa {

namespace {

std::string shape_str(const torch::Tensor& t)
{
    std::ostringstream os;
    os << t.sizes();
    return os.str();
}

void check_image(const torch::Tensor& img, const char* what)
{
    if (!img.defined() || img.dim() != 3 || img.size(2) != 3)
        throw ShapeError(std::string(what) + " must be an H×W×3 tensor, got " +
                         (img.defined() ? shape_str(img) : std::string("undefined")));
    if (!img.is_floating_point())
        throw ShapeError(std::string(what) + " must hold floating-point pixels");
    if (img.numel() == 0)
        return;
    auto mn = img.min().item<double>();
    auto mx = img.max().item<double>();
    if (!(mn >= 0.0 && mx <= 1.0))
        throw RangeError(std::string(what) + " pixel values outside [0,1]");
}

// Reads `key` into `out` when present and records it as consumed.
template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out, std::set<std::string>& seen)
{
    seen.insert(key);
    if (auto it = j.find(key); it != j.end())
        out = it->get<T>();
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& seen, const std::string& where)
{
    if (!j.is_object())
        throw ConfigError("config section '" + where + "' must be an object");
    for (const auto& [key, value] : j.items())
        if (!seen.count(key))
            throw ConfigError("unknown config key '" + where + (where.empty() ? "" : ".") + key + "'");
}

template <typename Fn>
void read_section(const nlohmann::json& j, const char* key, std::set<std::string>& seen, Fn&& fn)
{
    seen.insert(key);
    if (auto it = j.find(key); it != j.end())
        fn(*it);
}

}  // namespace

Sample validate_sample(Sample s)
{
    check_image(s.sr_image, "sr_image");
    check_image(s.lr_image_upsampled, "lr_image_upsampled");
    if (s.sr_image.sizes() != s.lr_image_upsampled.sizes())
        throw ShapeError("SR " + shape_str(s.sr_image) + " and upsampled LR " +
                         shape_str(s.lr_image_upsampled) + " differ in size");
    if (!(s.scale_factor > 1.0) || !std::isfinite(s.scale_factor))
        throw RangeError("scale_factor must be a finite value > 1");
    if (s.mos && !(*s.mos >= 0.0 && *s.mos <= 1.0))
        throw RangeError("mos " + std::to_string(*s.mos) + " outside [0,1]");
    return s;
}

void check_bundle(const FeatureBundle& bundle, int64_t channels, int64_t grid)
{
    for (const auto* t : {&bundle.global_feat, &bundle.local_feat}) {
        if (!t->defined() || t->dim() != 4 || t->size(1) != channels || t->size(2) != grid ||
            t->size(3) != grid)
            throw ShapeError("feature map must be N×" + std::to_string(channels) + "×" +
                             std::to_string(grid) + "×" + std::to_string(grid) + ", got " +
                             (t->defined() ? shape_str(*t) : std::string("undefined")));
        if (!torch::isfinite(*t).all().item<bool>())
            throw NumericError("feature map contains NaN or Inf");
    }
    if (bundle.global_feat.size(0) != bundle.local_feat.size(0))
        throw ShapeError("global and local feature batch sizes differ");
}

std::string to_string(Branch branch)
{
    return branch == Branch::perception ? "perception" : "fidelity";
}

nlohmann::json to_record(const QualityPrediction& pred, int64_t index, bool include_maps)
{
    nlohmann::json rec;
    rec["score"] = pred.final_score[index].item<double>();
    if (include_maps) {
        auto map_json = [&](const torch::Tensor& m) -> nlohmann::json {
            if (!m.defined())
                return nullptr;
            auto t = m[index][0].to(torch::kDouble).contiguous();
            nlohmann::json rows = nlohmann::json::array();
            auto acc = t.accessor<double, 2>();
            for (int64_t y = 0; y < t.size(0); ++y) {
                nlohmann::json row = nlohmann::json::array();
                for (int64_t x = 0; x < t.size(1); ++x)
                    row.push_back(acc[y][x]);
                rows.push_back(std::move(row));
            }
            return rows;
        };
        rec["s_p"] = map_json(pred.s_p);
        rec["s_f"] = map_json(pred.s_f);
        rec["w_p"] = map_json(pred.w_p);
        rec["w_f"] = map_json(pred.w_f);
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Enum names

std::string to_string(FusionMode mode)
{
    switch (mode) {
    case FusionMode::adaptive: return "adaptive";
    case FusionMode::concat: return "concat";
    case FusionMode::vit_only: return "vit_only";
    case FusionMode::resnet_only: return "resnet_only";
    }
    return "?";
}

std::string to_string(BackboneTrainable mode)
{
    switch (mode) {
    case BackboneTrainable::none: return "none";
    case BackboneTrainable::vit: return "vit";
    case BackboneTrainable::resnet: return "resnet";
    case BackboneTrainable::both: return "both";
    }
    return "?";
}

std::string to_string(BackboneKind kind)
{
    return kind == BackboneKind::fixture ? "fixture" : "pretrained";
}

FusionMode parse_fusion_mode(const std::string& name)
{
    for (auto m : {FusionMode::adaptive, FusionMode::concat, FusionMode::vit_only, FusionMode::resnet_only})
        if (to_string(m) == name)
            return m;
    throw ConfigError("unknown fusion_mode '" + name + "'");
}

BackboneTrainable parse_backbone_trainable(const std::string& name)
{
    for (auto m : {BackboneTrainable::none, BackboneTrainable::vit, BackboneTrainable::resnet,
                   BackboneTrainable::both})
        if (to_string(m) == name)
            return m;
    throw ConfigError("unknown backbone_trainable '" + name + "'");
}

BackboneKind parse_backbone_kind(const std::string& name)
{
    if (name == "fixture")
        return BackboneKind::fixture;
    if (name == "pretrained")
        return BackboneKind::pretrained;
    throw ConfigError("unknown backbone kind '" + name + "'");
}

// ---------------------------------------------------------------------------
// Validation

void validate_config(const ExperimentConfig& c)
{
    auto require = [](bool ok, const std::string& msg) {
        if (!ok)
            throw ConfigError(msg);
    };
    const auto& m = c.model;
    require(m.enable_perception_branch || m.enable_fidelity_branch,
            "at least one of model.enable_perception_branch / model.enable_fidelity_branch must be set");
    require(m.feature_channels > 0 && m.branch_channels > 0 && m.head_hidden > 0 && m.scale_hidden > 0 &&
                m.scale_channels > 0 && m.grid_size > 0,
            "model channel counts and grid_size must be positive");
    require(m.reduction_kernel > 0 && m.reduction_kernel % 2 == 1, "model.reduction_kernel must be odd and positive");
    require(!m.backbone.vit_stage_indices.empty(), "model.backbone.vit_stage_indices must not be empty");
    for (auto idx : m.backbone.vit_stage_indices)
        require(idx >= 0 && idx < m.backbone.vit.num_layers,
                "model.backbone.vit_stage_indices entries must index an encoder layer");
    require(m.backbone.resnet_blocks.size() == 4, "model.backbone.resnet_blocks must list 4 stages");
    for (auto b : m.backbone.resnet_blocks)
        require(b > 0, "model.backbone.resnet_blocks entries must be positive");
    const auto& v = m.backbone.vit;
    require(v.patch_size > 0 && v.hidden_dim > 0 && v.num_layers > 0 && v.num_heads > 0 && v.mlp_dim > 0 &&
                v.hidden_dim % v.num_heads == 0,
            "model.backbone.vit dimensions must be positive with hidden_dim divisible by num_heads");

    const auto& o = c.optim;
    // A zero learning rate is allowed so a run can be checked for parameter stasis.
    require(o.learning_rate >= 0.0 && std::isfinite(o.learning_rate), "optim.learning_rate must be >= 0");
    require(o.weight_decay >= 0.0, "optim.weight_decay must be >= 0");
    require(o.min_learning_rate >= 0.0, "optim.min_learning_rate must be >= 0");
    require(o.batch_size > 0 && o.max_epochs > 0, "optim.batch_size and optim.max_epochs must be positive");

    require(c.split.ratio > 0.0 && c.split.ratio < 1.0, "split.ratio must lie in (0,1)");
    require(c.split.n_repeats > 0, "split.n_repeats must be positive");
    require(c.crop_size > 0, "crop_size must be positive");

    static const std::set<std::string> formats{"generic", "qads", "wind", "realsrq", "synthetic"};
    require(formats.count(c.dataset.format) == 1, "unknown dataset.format '" + c.dataset.format + "'");
    const auto& s = c.dataset.synthetic;
    require(s.n_contents > 0 && s.methods_per_content > 0 && s.image_size > 0,
            "dataset.synthetic counts must be positive");
    require(!s.scales.empty(), "dataset.synthetic.scales must not be empty");
    for (auto sc : s.scales)
        require(sc > 1.0, "dataset.synthetic.scales entries must be > 1");
    require(s.max_blur_sigma >= 0.0 && s.max_noise_std >= 0.0, "dataset.synthetic degradation strengths must be >= 0");
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const ExperimentConfig& c)
{
    const auto& s = c.dataset.synthetic;
    const auto& m = c.model;
    const auto& b = m.backbone;
    j = nlohmann::json{
        {"dataset",
         {{"root", c.dataset.root},
          {"format", c.dataset.format},
          {"synthetic",
           {{"n_contents", s.n_contents},
            {"methods_per_content", s.methods_per_content},
            {"scales", s.scales},
            {"image_size", s.image_size},
            {"max_blur_sigma", s.max_blur_sigma},
            {"max_noise_std", s.max_noise_std},
            {"seed", s.seed}}}}},
        {"split",
         {{"seed", c.split.seed},
          {"ratio", c.split.ratio},
          {"n_repeats", c.split.n_repeats},
          {"group_by_content", c.split.group_by_content}}},
        {"model",
         {{"enable_perception_branch", m.enable_perception_branch},
          {"enable_fidelity_branch", m.enable_fidelity_branch},
          {"enable_scale_factor", m.enable_scale_factor},
          {"fusion_mode", to_string(m.fusion_mode)},
          {"backbone_trainable", to_string(m.backbone_trainable)},
          {"per_channel_fusion", m.per_channel_fusion},
          {"backbone",
           {{"kind", to_string(b.kind)},
            {"vit_checkpoint", b.vit_checkpoint},
            {"resnet_checkpoint", b.resnet_checkpoint},
            {"vit_stage_indices", b.vit_stage_indices},
            {"vit",
             {{"patch_size", b.vit.patch_size},
              {"hidden_dim", b.vit.hidden_dim},
              {"num_layers", b.vit.num_layers},
              {"num_heads", b.vit.num_heads},
              {"mlp_dim", b.vit.mlp_dim}}},
            {"resnet_blocks", b.resnet_blocks},
            {"fixture_seed", b.fixture_seed}}},
          {"feature_channels", m.feature_channels},
          {"branch_channels", m.branch_channels},
          {"head_hidden", m.head_hidden},
          {"scale_hidden", m.scale_hidden},
          {"scale_channels", m.scale_channels},
          {"reduction_kernel", m.reduction_kernel},
          {"grid_size", m.grid_size}}},
        {"optim",
         {{"learning_rate", c.optim.learning_rate},
          {"weight_decay", c.optim.weight_decay},
          {"min_learning_rate", c.optim.min_learning_rate},
          {"batch_size", c.optim.batch_size},
          {"max_epochs", c.optim.max_epochs},
          {"horizontal_flip", c.optim.horizontal_flip},
          {"bf16_autocast", c.optim.bf16_autocast}}},
        {"eval", {{"logistic_fit", c.eval.logistic_fit}, {"emit_scatter", c.eval.emit_scatter}}},
        {"crop_size", c.crop_size},
        {"seed", c.seed},
    };
}

void from_json(const nlohmann::json& j, ExperimentConfig& c)
{
    std::set<std::string> top;
    read_section(j, "dataset", top, [&](const nlohmann::json& d) {
        std::set<std::string> seen;
        read_opt(d, "root", c.dataset.root, seen);
        read_opt(d, "format", c.dataset.format, seen);
        read_section(d, "synthetic", seen, [&](const nlohmann::json& s) {
            std::set<std::string> ss;
            auto& syn = c.dataset.synthetic;
            read_opt(s, "n_contents", syn.n_contents, ss);
            read_opt(s, "methods_per_content", syn.methods_per_content, ss);
            read_opt(s, "scales", syn.scales, ss);
            read_opt(s, "image_size", syn.image_size, ss);
            read_opt(s, "max_blur_sigma", syn.max_blur_sigma, ss);
            read_opt(s, "max_noise_std", syn.max_noise_std, ss);
            read_opt(s, "seed", syn.seed, ss);
            reject_unknown(s, ss, "dataset.synthetic");
        });
        reject_unknown(d, seen, "dataset");
    });
    read_section(j, "split", top, [&](const nlohmann::json& s) {
        std::set<std::string> seen;
        read_opt(s, "seed", c.split.seed, seen);
        read_opt(s, "ratio", c.split.ratio, seen);
        read_opt(s, "n_repeats", c.split.n_repeats, seen);
        read_opt(s, "group_by_content", c.split.group_by_content, seen);
        reject_unknown(s, seen, "split");
    });
    read_section(j, "model", top, [&](const nlohmann::json& mj) {
        std::set<std::string> seen;
        auto& m = c.model;
        read_opt(mj, "enable_perception_branch", m.enable_perception_branch, seen);
        read_opt(mj, "enable_fidelity_branch", m.enable_fidelity_branch, seen);
        read_opt(mj, "enable_scale_factor", m.enable_scale_factor, seen);
        std::string fusion = to_string(m.fusion_mode);
        read_opt(mj, "fusion_mode", fusion, seen);
        m.fusion_mode = parse_fusion_mode(fusion);
        std::string trainable = to_string(m.backbone_trainable);
        read_opt(mj, "backbone_trainable", trainable, seen);
        m.backbone_trainable = parse_backbone_trainable(trainable);
        read_opt(mj, "per_channel_fusion", m.per_channel_fusion, seen);
        read_section(mj, "backbone", seen, [&](const nlohmann::json& bj) {
            std::set<std::string> bs;
            auto& b = m.backbone;
            std::string kind = to_string(b.kind);
            read_opt(bj, "kind", kind, bs);
            b.kind = parse_backbone_kind(kind);
            read_opt(bj, "vit_checkpoint", b.vit_checkpoint, bs);
            read_opt(bj, "resnet_checkpoint", b.resnet_checkpoint, bs);
            read_opt(bj, "vit_stage_indices", b.vit_stage_indices, bs);
            read_section(bj, "vit", bs, [&](const nlohmann::json& vj) {
                std::set<std::string> vs;
                read_opt(vj, "patch_size", b.vit.patch_size, vs);
                read_opt(vj, "hidden_dim", b.vit.hidden_dim, vs);
                read_opt(vj, "num_layers", b.vit.num_layers, vs);
                read_opt(vj, "num_heads", b.vit.num_heads, vs);
                read_opt(vj, "mlp_dim", b.vit.mlp_dim, vs);
                reject_unknown(vj, vs, "model.backbone.vit");
            });
            read_opt(bj, "resnet_blocks", b.resnet_blocks, bs);
            read_opt(bj, "fixture_seed", b.fixture_seed, bs);
            reject_unknown(bj, bs, "model.backbone");
        });
        read_opt(mj, "feature_channels", m.feature_channels, seen);
        read_opt(mj, "branch_channels", m.branch_channels, seen);
        read_opt(mj, "head_hidden", m.head_hidden, seen);
        read_opt(mj, "scale_hidden", m.scale_hidden, seen);
        read_opt(mj, "scale_channels", m.scale_channels, seen);
        read_opt(mj, "reduction_kernel", m.reduction_kernel, seen);
        read_opt(mj, "grid_size", m.grid_size, seen);
        reject_unknown(mj, seen, "model");
    });
    read_section(j, "optim", top, [&](const nlohmann::json& oj) {
        std::set<std::string> seen;
        auto& o = c.optim;
        read_opt(oj, "learning_rate", o.learning_rate, seen);
        read_opt(oj, "weight_decay", o.weight_decay, seen);
        read_opt(oj, "min_learning_rate", o.min_learning_rate, seen);
        read_opt(oj, "batch_size", o.batch_size, seen);
        read_opt(oj, "max_epochs", o.max_epochs, seen);
        read_opt(oj, "horizontal_flip", o.horizontal_flip, seen);
        read_opt(oj, "bf16_autocast", o.bf16_autocast, seen);
        reject_unknown(oj, seen, "optim");
    });
    read_section(j, "eval", top, [&](const nlohmann::json& ej) {
        std::set<std::string> seen;
        read_opt(ej, "logistic_fit", c.eval.logistic_fit, seen);
        read_opt(ej, "emit_scatter", c.eval.emit_scatter, seen);
        reject_unknown(ej, seen, "eval");
    });
    read_opt(j, "crop_size", c.crop_size, top);
    read_opt(j, "seed", c.seed, top);
    reject_unknown(j, top, "");
}

std::string serialize_config(const ExperimentConfig& config)
{
    nlohmann::json j = config;
    return j.dump(2) + "\n";
}

ExperimentConfig parse_config(const std::string& text)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    ExperimentConfig c;
    try {
        from_json(j, c);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
    return c;
}

ExperimentConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw MissingFileError("missing file: cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

void save_config(const ExperimentConfig& config, const std::string& path)
{
    std::ofstream out(path);
    if (!out)
        throw DataError("cannot write config '" + path + "'");
    out << serialize_config(config);
}

std::string config_hash(const ExperimentConfig& config)
{
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : serialize_config(config)) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace pfiqa
