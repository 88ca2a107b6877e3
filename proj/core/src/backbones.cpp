#include "pfiqa/backbones.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <caffe2/serialize/inline_container.h>
#include <torch/csrc/jit/serialization/unpickler.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

namespace pfiqa {

namespace F = torch::nn::functional;

namespace {

std::string shape_str(const torch::Tensor& t)
{
    std::ostringstream os;
    os << t.sizes();
    return os.str();
}

/// Re-draws every parameter of `module` from a seeded generator so fixture
/// backbones do not depend on the global RNG state.
void seeded_init(torch::nn::Module& module, uint64_t seed)
{
    auto gen = at::detail::createCPUGenerator(seed);
    torch::NoGradGuard no_grad;
    for (auto& p : module.named_parameters(/*recurse=*/true)) {
        auto& t = p.value();
        if (p.key().find("bias") != std::string::npos) {
            t.zero_();
            continue;
        }
        int64_t fan_in = t.dim() > 1 ? t[0].numel() : t.numel();
        if (p.key().find("pos_embedding") != std::string::npos)
            fan_in = 2500;  // std 0.02
        t.copy_(torch::randn(t.sizes(), gen, t.options()) / std::sqrt(static_cast<double>(fan_in)));
    }
}

}  // namespace

torch::Tensor imagenet_normalize(const torch::Tensor& images)
{
    auto opts = images.options();
    auto mean = torch::tensor({0.485, 0.456, 0.406}, opts);
    auto stdv = torch::tensor({0.229, 0.224, 0.225}, opts);
    if (images.dim() == 3) {
        mean = mean.view({3, 1, 1});
        stdv = stdv.view({3, 1, 1});
    } else {
        mean = mean.view({1, 3, 1, 1});
        stdv = stdv.view({1, 3, 1, 1});
    }
    return (images - mean) / stdv;
}

// ---------------------------------------------------------------------------
// ViT

SelfAttentionImpl::SelfAttentionImpl(int64_t hidden, int64_t heads) : heads_(heads)
{
    in_proj_weight = register_parameter("in_proj_weight", torch::empty({3 * hidden, hidden}));
    in_proj_bias = register_parameter("in_proj_bias", torch::zeros({3 * hidden}));
    torch::nn::init::xavier_uniform_(in_proj_weight);
    out_proj = register_module("out_proj", torch::nn::Linear(hidden, hidden));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x)
{
    const auto n = x.size(0), len = x.size(1), hidden = x.size(2);
    const auto head_dim = hidden / heads_;
    auto qkv = F::linear(x, in_proj_weight, in_proj_bias).chunk(3, -1);
    auto split = [&](const torch::Tensor& t) { return t.reshape({n, len, heads_, head_dim}).transpose(1, 2); };
    auto q = split(qkv[0]), k = split(qkv[1]), v = split(qkv[2]);
    auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim)), -1);
    auto out = torch::matmul(attn, v).transpose(1, 2).reshape({n, len, hidden});
    return out_proj(out);
}

VitEncoderLayerImpl::VitEncoderLayerImpl(int64_t hidden, int64_t heads, int64_t mlp_dim)
{
    ln_1 = register_module("ln_1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({hidden}).eps(1e-6)));
    self_attention = register_module("self_attention", SelfAttention(hidden, heads));
    ln_2 = register_module("ln_2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({hidden}).eps(1e-6)));
    mlp = register_module("mlp", torch::nn::Sequential(torch::nn::Linear(hidden, mlp_dim), torch::nn::GELU(),
                                                       torch::nn::Dropout(0.0), torch::nn::Linear(mlp_dim, hidden),
                                                       torch::nn::Dropout(0.0)));
}

torch::Tensor VitEncoderLayerImpl::forward(const torch::Tensor& x)
{
    auto y = x + self_attention(ln_1(x));
    return y + mlp->forward(ln_2(y));
}

VitEncoderImpl::VitEncoderImpl(const VitConfig& cfg, int64_t seq_len)
{
    pos_embedding = register_parameter("pos_embedding", torch::randn({1, seq_len, cfg.hidden_dim}) * 0.02);
    auto holder = register_module("layers", std::make_shared<torch::nn::Module>());
    for (int64_t i = 0; i < cfg.num_layers; ++i) {
        layers.push_back(VitEncoderLayer(cfg.hidden_dim, cfg.num_heads, cfg.mlp_dim));
        holder->register_module("encoder_layer_" + std::to_string(i), layers.back());
    }
    ln = register_module("ln", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.hidden_dim}).eps(1e-6)));
}

VisionTransformerImpl::VisionTransformerImpl(const VitConfig& cfg, int64_t image_size,
                                             std::vector<int64_t> stage_indices)
    : cfg_(cfg), grid_(image_size / cfg.patch_size), stage_indices_(std::move(stage_indices))
{
    if (image_size % cfg.patch_size != 0)
        throw ConfigError("image size must be a multiple of the ViT patch size");
    conv_proj = register_module(
        "conv_proj",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(3, cfg.hidden_dim, cfg.patch_size).stride(cfg.patch_size)));
    class_token = register_parameter("class_token", torch::zeros({1, 1, cfg.hidden_dim}));
    encoder = register_module("encoder", VitEncoder(cfg, grid_ * grid_ + 1));
}

std::vector<torch::Tensor> VisionTransformerImpl::stages(const torch::Tensor& images)
{
    const auto n = images.size(0);
    auto x = conv_proj(images);
    if (x.size(2) != grid_ || x.size(3) != grid_)
        throw ShapeError("ViT input produces a " + shape_str(x) + " patch grid, expected " + std::to_string(grid_));
    x = x.reshape({n, cfg_.hidden_dim, grid_ * grid_}).permute({0, 2, 1});
    x = torch::cat({class_token.expand({n, -1, -1}), x}, 1) + encoder->pos_embedding;

    const auto last = *std::max_element(stage_indices_.begin(), stage_indices_.end());
    std::vector<torch::Tensor> taps(static_cast<size_t>(last + 1));
    for (int64_t i = 0; i <= last; ++i) {
        x = encoder->layers[static_cast<size_t>(i)]->forward(x);
        taps[static_cast<size_t>(i)] = x;
    }
    std::vector<torch::Tensor> out;
    out.reserve(stage_indices_.size());
    for (auto idx : stage_indices_) {
        auto tokens = taps[static_cast<size_t>(idx)].slice(1, 1);  // drop class token
        out.push_back(tokens.transpose(1, 2).reshape({n, cfg_.hidden_dim, grid_, grid_}));
    }
    return out;
}

// ---------------------------------------------------------------------------
// ResNet

BottleneckImpl::BottleneckImpl(int64_t in_channels, int64_t width, int64_t stride)
{
    using torch::nn::Conv2dOptions;
    const int64_t out = width * 4;
    conv1 = register_module("conv1", torch::nn::Conv2d(Conv2dOptions(in_channels, width, 1).bias(false)));
    bn1 = register_module("bn1", torch::nn::BatchNorm2d(width));
    conv2 = register_module("conv2",
                            torch::nn::Conv2d(Conv2dOptions(width, width, 3).stride(stride).padding(1).bias(false)));
    bn2 = register_module("bn2", torch::nn::BatchNorm2d(width));
    conv3 = register_module("conv3", torch::nn::Conv2d(Conv2dOptions(width, out, 1).bias(false)));
    bn3 = register_module("bn3", torch::nn::BatchNorm2d(out));
    if (stride != 1 || in_channels != out) {
        downsample = register_module(
            "downsample",
            torch::nn::Sequential(torch::nn::Conv2d(Conv2dOptions(in_channels, out, 1).stride(stride).bias(false)),
                                  torch::nn::BatchNorm2d(out)));
    }
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x)
{
    auto y = torch::relu(bn1(conv1(x)));
    y = torch::relu(bn2(conv2(y)));
    y = bn3(conv3(y));
    auto identity = downsample ? downsample->forward(x) : x;
    return torch::relu(y + identity);
}

ResNetImpl::ResNetImpl(const std::vector<int64_t>& blocks)
{
    using torch::nn::Conv2dOptions;
    conv1 = register_module("conv1", torch::nn::Conv2d(Conv2dOptions(3, 64, 7).stride(2).padding(3).bias(false)));
    bn1 = register_module("bn1", torch::nn::BatchNorm2d(64));
    int64_t in_channels = 64;
    auto make_layer = [&](int64_t width, int64_t count, int64_t stride) {
        torch::nn::Sequential seq;
        for (int64_t i = 0; i < count; ++i) {
            seq->push_back(Bottleneck(in_channels, width, i == 0 ? stride : 1));
            in_channels = width * 4;
        }
        return seq;
    };
    layer1 = register_module("layer1", make_layer(64, blocks.at(0), 1));
    layer2 = register_module("layer2", make_layer(128, blocks.at(1), 2));
    layer3 = register_module("layer3", make_layer(256, blocks.at(2), 2));
    layer4 = register_module("layer4", make_layer(512, blocks.at(3), 2));
}

std::vector<torch::Tensor> ResNetImpl::stages(const torch::Tensor& images)
{
    auto x = torch::relu(bn1(conv1(images)));
    x = F::max_pool2d(x, F::MaxPool2dFuncOptions(3).stride(2).padding(1));
    auto c2 = layer1->forward(x);
    auto c3 = layer2->forward(c2);
    auto c4 = layer3->forward(c3);
    auto c5 = layer4->forward(c4);
    return {c2, c3, c4, c5};
}

// ---------------------------------------------------------------------------
// Fixtures

FixtureVitImpl::FixtureVitImpl(const VitConfig& cfg, int64_t image_size, std::vector<int64_t> stage_indices,
                               uint64_t seed)
    : grid_(image_size / cfg.patch_size), stage_indices_(std::move(stage_indices))
{
    patch_embed = register_module(
        "patch_embed",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(3, cfg.hidden_dim, cfg.patch_size).stride(cfg.patch_size)));
    pos_embedding = register_parameter("pos_embedding", torch::zeros({1, cfg.hidden_dim, grid_, grid_}));
    blocks = register_module("blocks", torch::nn::ModuleList());
    // One block per tapped stage keeps the stand-in cheap.
    for (size_t i = 0; i < stage_indices_.size(); ++i)
        blocks->push_back(torch::nn::Conv2d(
            torch::nn::Conv2dOptions(cfg.hidden_dim, cfg.hidden_dim, 3).padding(1).groups(cfg.hidden_dim)));
    seeded_init(*this, seed);
    // Residual path folded into the center tap: block(x) = x + dwconv(x).
    torch::NoGradGuard no_grad;
    for (auto& b : *blocks)
        b->as<torch::nn::Conv2d>()->weight.select(2, 1).select(2, 1).add_(1.0);
}

std::vector<torch::Tensor> FixtureVitImpl::stages(const torch::Tensor& images)
{
    auto x = patch_embed(images.contiguous(at::MemoryFormat::ChannelsLast));
    if (x.size(2) != grid_ || x.size(3) != grid_)
        throw ShapeError("fixture ViT input produces a " + shape_str(x) + " patch grid");
    x = (x + pos_embedding).contiguous(at::MemoryFormat::ChannelsLast);
    std::vector<torch::Tensor> out;
    for (size_t i = 0; i < stage_indices_.size(); ++i) {
        x = torch::relu(blocks[i]->as<torch::nn::Conv2d>()->forward(x));
        out.push_back(x);
    }
    return out;
}

FixtureResNetImpl::FixtureResNetImpl(uint64_t seed)
{
    using torch::nn::Conv2dOptions;
    stem = register_module("stem", torch::nn::Conv2d(Conv2dOptions(3, 64, 4).stride(4)));
    stage_convs = register_module("stage_convs", torch::nn::ModuleList());
    int64_t in = 64;
    for (int i = 0; i < 4; ++i) {
        const int64_t out = kResnetStageChannels[i];
        stage_convs->push_back(torch::nn::Conv2d(Conv2dOptions(in, out, 1).groups(i == 0 ? 1 : 4)));
        in = out;
    }
    seeded_init(*this, seed);
}

std::vector<torch::Tensor> FixtureResNetImpl::stages(const torch::Tensor& images)
{
    auto x = torch::relu(stem(images));
    std::vector<torch::Tensor> out;
    for (size_t i = 0; i < 4; ++i) {
        if (i > 0)
            x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(2));
        x = torch::relu(stage_convs[i]->as<torch::nn::Conv2d>()->forward(x));
        out.push_back(x);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint loading

namespace {

// Python saves state dicts as collections.OrderedDict, which the C++
// unpickler turns into None. Rewrites each `OrderedDict()` construction into
// EMPTY_DICT and each BUILD (the `_metadata` attribute) into TUPLE2, which
// leaves a (dict, state) pair for unwrap_built to undo. Returns
// nullopt for opcodes outside the protocol-2/4 subset torch.save emits.
std::optional<std::string> plain_dict_pickle(const std::string& in)
{
    std::string out;
    out.reserve(in.size());
    std::set<uint32_t> class_memo;
    bool pending = false;  // the OrderedDict class is on top of the stack
    bool found = false;
    size_t i = 0;
    auto need = [&](size_t n) { return i + n <= in.size(); };
    auto le = [&](size_t at, size_t n) {
        uint64_t v = 0;
        for (size_t k = 0; k < n; ++k)
            v |= static_cast<uint64_t>(static_cast<unsigned char>(in[at + k])) << (8 * k);
        return v;
    };
    while (i < in.size()) {
        const char op = in[i];
        const size_t start = i++;
        size_t arg = 0;
        switch (op) {
        case 'c': {  // GLOBAL: two newline-terminated names
            const auto a = in.find('\n', i);
            const auto b = a == std::string::npos ? a : in.find('\n', a + 1);
            if (b == std::string::npos)
                return std::nullopt;
            if (in.compare(i, b - i, "collections\nOrderedDict") == 0) {
                pending = found = true;
                i = b + 1;
                continue;
            }
            arg = b + 1 - i;
            break;
        }
        case 'q': case 'h': case 'K': arg = 1; break;
        case 'r': case 'j': case 'J': arg = 4; break;
        case 'M': arg = 2; break;
        case 'G': case '\x95': arg = 8; break;
        case '\x80': arg = 1; break;
        case 'X': case 'B':
            if (!need(4)) return std::nullopt;
            arg = 4 + le(i, 4);
            break;
        case '\x8c': case 'C':
            if (!need(1)) return std::nullopt;
            arg = 1 + le(i, 1);
            break;
        case '\x8a':
            if (!need(1)) return std::nullopt;
            arg = 1 + le(i, 1);
            break;
        case '\x8d':
            if (!need(8)) return std::nullopt;
            arg = 8 + le(i, 8);
            break;
        case ')': case 'R': case '(': case 't': case '\x85': case '\x86': case '\x87': case 'Q': case '\x88':
        case '\x89': case '}': case 's': case 'u': case 'b': case '.': case 'N': case ']': case 'a': case 'e':
        case '0': case '\x94': case '\x93':
            break;
        default:
            return std::nullopt;
        }
        if (!need(arg))
            return std::nullopt;
        i += arg;
        const bool put = op == 'q' || op == 'r';
        const bool get = op == 'h' || op == 'j';
        if (pending) {
            if (put) {
                class_memo.insert(static_cast<uint32_t>(le(start + 1, arg)));
                continue;
            }
            if (op == ')' && i < in.size() && in[i] == 'R') {
                out.push_back('}');
                ++i;
                pending = false;
                continue;
            }
            return std::nullopt;
        }
        if (get && class_memo.count(static_cast<uint32_t>(le(start + 1, arg)))) {
            pending = true;
            continue;
        }
        if (op == 'b' && found) {
            out.push_back('\x86');
            continue;
        }
        out.append(in, start, i - start);
    }
    return out;
}

c10::IValue unwrap_built(const c10::IValue& v)
{
    if (v.isTuple()) {
        const auto& e = v.toTupleRef().elements();
        if (e.size() == 2 && e[0].isGenericDict() && e[1].isGenericDict())
            return unwrap_built(e[0]);
    }
    if (v.isGenericDict()) {
        auto dict = v.toGenericDict();
        for (const auto& kv : dict)
            if (kv.value().isTuple())
                dict.insert_or_assign(kv.key(), unwrap_built(kv.value()));
    }
    return v;
}

c10::IValue read_torch_save(const std::vector<char>& bytes)
{
    auto root = std::string(bytes.begin(), bytes.end());
    std::istringstream stream(root);
    std::optional<caffe2::serialize::PyTorchStreamReader> holder;
    std::optional<std::string> rewritten;
    try {
        holder.emplace(&stream);
        auto [data, size] = holder->getRecord("data.pkl");
        rewritten = plain_dict_pickle(std::string(static_cast<const char*>(data.get()), size));
    } catch (const c10::Error&) {
        rewritten.reset();
    }
    if (!rewritten)
        return torch::pickle_load(bytes);
    auto& reader = *holder;
    size_t pos = 0;
    auto read = [&](char* dst, size_t n) {
        n = std::min(n, rewritten->size() - pos);
        std::memcpy(dst, rewritten->data() + pos, n);
        pos += n;
        return n;
    };
    auto record = [&](const std::string& name) { return std::get<0>(reader.getRecord("data/" + name)); };
    torch::jit::Unpickler unpickler(read, nullptr, nullptr, record, c10::Device(c10::kCPU));
    unpickler.set_version(reader.version());
    return unwrap_built(unpickler.parse_ivalue());
}

}  // namespace


void load_state_dict_file(torch::nn::Module& module, const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw MissingFileError("missing file: backbone checkpoint '" + path + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    c10::IValue root;
    try {
        root = read_torch_save(bytes);
    } catch (const c10::Error& e) {
        throw DataError("cannot read checkpoint '" + path + "' (expected torch.save of a state_dict): " +
                        e.what_without_backtrace());
    }
    if (!root.isGenericDict())
        throw DataError("checkpoint '" + path + "' does not hold a dict");
    auto dict = root.toGenericDict();
    for (const char* nested : {"state_dict", "model"}) {
        if (dict.contains(nested) && dict.at(nested).isGenericDict()) {
            dict = dict.at(nested).toGenericDict();
            break;
        }
    }

    std::unordered_map<std::string, torch::Tensor> tensors;
    for (const auto& kv : dict) {
        if (!kv.key().isString() || !kv.value().isTensor())
            continue;
        std::string key = kv.key().toStringRef();
        // Older torchvision releases named the ViT MLP layers linear_1/linear_2.
        for (auto [from, to] : {std::pair{".mlp.linear_1.", ".mlp.0."}, std::pair{".mlp.linear_2.", ".mlp.3."}})
            if (auto pos = key.find(from); pos != std::string::npos)
                key.replace(pos, std::string(from).size(), to);
        tensors.emplace(std::move(key), kv.value().toTensor());
    }

    torch::NoGradGuard no_grad;
    auto copy_into = [&](const std::string& name, torch::Tensor& target) {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw DataError("checkpoint '" + path + "' is missing '" + name + "'");
        if (it->second.sizes() != target.sizes())
            throw DataError("checkpoint '" + path + "' entry '" + name + "' has shape " + shape_str(it->second) +
                            ", model expects " + shape_str(target));
        target.copy_(it->second.to(target.dtype()));
    };
    for (auto& p : module.named_parameters(true))
        copy_into(p.key(), p.value());
    for (auto& b : module.named_buffers(true))
        copy_into(b.key(), b.value());
}

// ---------------------------------------------------------------------------
// Reductions

namespace {

// conv(cat(parts)) without materializing the concatenation when the kernel
// is 1×1: a sum of per-part matrix products over channels-last rows.
torch::Tensor reduce_concat(torch::nn::Conv2d& conv, const std::vector<torch::Tensor>& parts)
{
    const auto& w = conv->weight;
    if (w.size(2) != 1 || w.size(3) != 1)
        return conv(torch::cat(parts, 1));
    const auto& ref = parts.front();
    auto w2 = w.flatten(1);
    torch::Tensor acc;
    int64_t offset = 0;
    for (const auto& p : parts) {
        const auto c = p.size(1);
        auto rows = p.permute({0, 2, 3, 1}).reshape({-1, c});
        auto term = torch::matmul(rows, w2.slice(1, offset, offset + c).t());
        acc = acc.defined() ? acc + term : (conv->bias.defined() ? term + conv->bias : term);
        offset += c;
    }
    return acc.view({ref.size(0), ref.size(2), ref.size(3), -1}).permute({0, 3, 1, 2});
}

}  // namespace

GlobalReductionImpl::GlobalReductionImpl(int64_t stage_count, int64_t stage_channels, int64_t out_channels,
                                         int64_t kernel)
    : stage_count_(stage_count), stage_channels_(stage_channels)
{
    conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(stage_count * stage_channels,
                                                                              out_channels, kernel)
                                                         .padding(kernel / 2)));
}

torch::Tensor GlobalReductionImpl::forward(const std::vector<torch::Tensor>& vit_stages)
{
    if (static_cast<int64_t>(vit_stages.size()) != stage_count_)
        throw ShapeError("global reduction expects " + std::to_string(stage_count_) + " ViT stages, got " +
                         std::to_string(vit_stages.size()));
    const auto& ref = vit_stages.front();
    for (const auto& s : vit_stages)
        if (s.dim() != 4 || s.size(1) != stage_channels_ || s.sizes() != ref.sizes())
            throw ShapeError("ViT stage has shape " + shape_str(s) + ", expected N×" +
                             std::to_string(stage_channels_) + "×p×p matching the other stages");
    return reduce_concat(conv, vit_stages);
}

LocalReductionImpl::LocalReductionImpl(std::vector<int64_t> stage_channels, int64_t out_channels, int64_t kernel,
                                       int64_t grid)
    : stage_channels_(std::move(stage_channels)), grid_(grid)
{
    const auto total = std::accumulate(stage_channels_.begin(), stage_channels_.end(), int64_t{0});
    conv = register_module(
        "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(total, out_channels, kernel).padding(kernel / 2)));
}

torch::Tensor LocalReductionImpl::forward(const std::vector<torch::Tensor>& resnet_stages)
{
    if (resnet_stages.size() != stage_channels_.size())
        throw ShapeError("local reduction expects " + std::to_string(stage_channels_.size()) +
                         " ResNet stages, got " + std::to_string(resnet_stages.size()));
    std::vector<torch::Tensor> resized;
    resized.reserve(resnet_stages.size());
    for (size_t i = 0; i < resnet_stages.size(); ++i) {
        const auto& s = resnet_stages[i];
        if (s.dim() != 4 || s.size(1) != stage_channels_[i] || s.size(0) != resnet_stages[0].size(0))
            throw ShapeError("ResNet stage " + std::to_string(i) + " has shape " + shape_str(s) + ", expected N×" +
                             std::to_string(stage_channels_[i]) + "×h×w");
        if (s.size(2) == grid_ && s.size(3) == grid_) {
            resized.push_back(s.contiguous(at::MemoryFormat::ChannelsLast));
        } else {
            // Channels-last resizing is several times faster on CPU and numerically identical.
            resized.push_back(F::interpolate(s.contiguous(at::MemoryFormat::ChannelsLast),
                                             F::InterpolateFuncOptions()
                                                    .size(std::vector<int64_t>{grid_, grid_})
                                                    .mode(torch::kBilinear)
                                                    .align_corners(false)));
        }
    }
    return reduce_concat(conv, resized);
}

FeatureBundle difference_bundle(const FeatureBundle& sr, const FeatureBundle& lr)
{
    FeatureBundle out;
    auto sub = [](const torch::Tensor& a, const torch::Tensor& b, const char* what) -> torch::Tensor {
        if (!a.defined() && !b.defined())
            return {};
        if (!a.defined() || !b.defined() || a.sizes() != b.sizes())
            throw ShapeError(std::string("difference of ") + what + " features needs matching shapes");
        return a - b;
    };
    out.global_feat = sub(sr.global_feat, lr.global_feat, "global");
    out.local_feat = sub(sr.local_feat, lr.local_feat, "local");
    return out;
}

// ---------------------------------------------------------------------------
// Feature extractor

FeatureExtractorImpl::FeatureExtractorImpl(const ModelConfig& cfg, int64_t image_size)
    : cfg_(cfg), image_size_(image_size)
{
    const auto& bb = cfg.backbone;
    const bool want_vit = cfg.fusion_mode != FusionMode::resnet_only;
    const bool want_resnet = cfg.fusion_mode != FusionMode::vit_only;
    const auto stage_count = static_cast<int64_t>(bb.vit_stage_indices.size());
    const int64_t resnet_total = std::accumulate(std::begin(kResnetStageChannels), std::end(kResnetStageChannels),
                                                 int64_t{0});
    static_assert(256 + 512 + 1024 + 2048 == 3840);
    if (stage_count * bb.vit.hidden_dim != resnet_total)
        throw ConfigError("ViT stage concat width " + std::to_string(stage_count * bb.vit.hidden_dim) +
                          " must equal the ResNet concat width " + std::to_string(resnet_total));
    if (image_size / bb.vit.patch_size != cfg.grid_size)
        throw ConfigError("image size / ViT patch size must equal model.grid_size");

    vit_trainable_ = cfg.backbone_trainable == BackboneTrainable::vit ||
                     cfg.backbone_trainable == BackboneTrainable::both;
    resnet_trainable_ = cfg.backbone_trainable == BackboneTrainable::resnet ||
                        cfg.backbone_trainable == BackboneTrainable::both;

    if (want_vit) {
        if (bb.kind == BackboneKind::fixture)
            vit_ = std::make_shared<FixtureVitImpl>(bb.vit, image_size, bb.vit_stage_indices, bb.fixture_seed);
        else
            vit_ = std::make_shared<VisionTransformerImpl>(bb.vit, image_size, bb.vit_stage_indices);
        register_module("vit", vit_);
        for (auto& p : vit_->parameters())
            p.requires_grad_(vit_trainable_);
        global_reduction = register_module(
            "global_reduction",
            GlobalReduction(stage_count, bb.vit.hidden_dim, cfg.feature_channels, cfg.reduction_kernel));
    }
    if (want_resnet) {
        if (bb.kind == BackboneKind::fixture)
            resnet_ = std::make_shared<FixtureResNetImpl>(bb.fixture_seed + 1);
        else
            resnet_ = std::make_shared<ResNetImpl>(bb.resnet_blocks);
        register_module("resnet", resnet_);
        for (auto& p : resnet_->parameters())
            p.requires_grad_(resnet_trainable_);
        local_reduction = register_module(
            "local_reduction",
            LocalReduction(std::vector<int64_t>(std::begin(kResnetStageChannels), std::end(kResnetStageChannels)),
                           cfg.feature_channels, cfg.reduction_kernel, cfg.grid_size));
    }
    if (bb.kind == BackboneKind::pretrained)
        load_pretrained();
    train(is_training());
}

void FeatureExtractorImpl::load_pretrained()
{
    const auto& bb = cfg_.backbone;
    if (vit_) {
        if (bb.vit_checkpoint.empty())
            throw ConfigError("model.backbone.vit_checkpoint is required for pretrained backbones");
        load_state_dict_file(*vit_, bb.vit_checkpoint);
    }
    if (resnet_) {
        if (bb.resnet_checkpoint.empty())
            throw ConfigError("model.backbone.resnet_checkpoint is required for pretrained backbones");
        load_state_dict_file(*resnet_, bb.resnet_checkpoint);
    }
}

void FeatureExtractorImpl::train(bool on)
{
    torch::nn::Module::train(on);
    if (vit_)
        vit_->eval();
    if (resnet_)
        resnet_->eval();
}

BackboneOutputs FeatureExtractorImpl::extract_stages(const torch::Tensor& images)
{
    if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != image_size_ || images.size(3) != image_size_)
        throw ShapeError("backbones expect N×3×" + std::to_string(image_size_) + "×" + std::to_string(image_size_) +
                         " input, got " + shape_str(images));
    BackboneOutputs out;
    const bool grad = torch::GradMode::is_enabled();
    if (vit_) {
        torch::AutoGradMode mode(grad && vit_trainable_);
        out.vit_stages = vit_->stages(images);
    }
    if (resnet_) {
        torch::AutoGradMode mode(grad && resnet_trainable_);
        out.resnet_stages = resnet_->stages(images);
    }
    return out;
}

torch::Tensor FeatureExtractorImpl::reduce_global(const std::vector<torch::Tensor>& vit_stages)
{
    if (!global_reduction)
        throw ConfigError("global path is disabled by the fusion mode");
    return global_reduction(vit_stages);
}

torch::Tensor FeatureExtractorImpl::reduce_local(const std::vector<torch::Tensor>& resnet_stages)
{
    if (!local_reduction)
        throw ConfigError("local path is disabled by the fusion mode");
    return local_reduction(resnet_stages);
}

FeatureBundle FeatureExtractorImpl::forward(const torch::Tensor& images)
{
    auto stages = extract_stages(images);
    FeatureBundle bundle;
    if (vit_)
        bundle.global_feat = reduce_global(stages.vit_stages);
    if (resnet_)
        bundle.local_feat = reduce_local(stages.resnet_stages);
    return bundle;
}

std::vector<torch::Tensor> FeatureExtractorImpl::backbone_parameters() const
{
    std::vector<torch::Tensor> out;
    if (vit_)
        for (auto& p : vit_->parameters())
            out.push_back(p);
    if (resnet_)
        for (auto& p : resnet_->parameters())
            out.push_back(p);
    return out;
}

}  // namespace pfiqa
