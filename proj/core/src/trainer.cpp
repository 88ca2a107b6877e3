#include "pfiqa/trainer.hpp"

#include <ATen/autocast_mode.h>
#include <torch/serialize.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace pfiqa {

namespace {

// Enables CPU bfloat16 autocast for its lifetime, restoring the previous state.
class AutocastScope {
public:
    explicit AutocastScope(bool on) : on_(on)
    {
        if (!on_)
            return;
        prev_enabled_ = at::autocast::is_autocast_enabled(at::kCPU);
        prev_dtype_ = at::autocast::get_autocast_dtype(at::kCPU);
        at::autocast::set_autocast_dtype(at::kCPU, at::kBFloat16);
        at::autocast::set_autocast_enabled(at::kCPU, true);
    }
    ~AutocastScope()
    {
        if (!on_)
            return;
        at::autocast::set_autocast_enabled(at::kCPU, prev_enabled_);
        at::autocast::set_autocast_dtype(at::kCPU, prev_dtype_);
        at::autocast::clear_cache();
    }
    AutocastScope(const AutocastScope&) = delete;
    AutocastScope& operator=(const AutocastScope&) = delete;

private:
    bool on_;
    bool prev_enabled_ = false;
    at::ScalarType prev_dtype_ = at::kBFloat16;
};

// Stream tags for derive_rng, one per independent use.
constexpr uint64_t kShuffleStream = 0x5348;
constexpr uint64_t kCropStream = 0x4352;

struct Batch {
    torch::Tensor sr, lr, scales, mos;
};

Batch collate(const std::vector<ModelInput>& inputs, torch::Device device)
{
    std::vector<torch::Tensor> sr, lr;
    std::vector<float> scales, mos;
    for (const auto& in : inputs) {
        sr.push_back(in.sr);
        lr.push_back(in.lr);
        scales.push_back(static_cast<float>(in.scale_factor));
        mos.push_back(static_cast<float>(in.mos.value_or(0.0)));
    }
    auto n = static_cast<int64_t>(inputs.size());
    return Batch{torch::stack(sr).to(device), torch::stack(lr).to(device),
                 torch::from_blob(scales.data(), {n}, torch::kFloat32).clone().to(device),
                 torch::from_blob(mos.data(), {n}, torch::kFloat32).clone().to(device)};
}

std::vector<size_t> all_indices(const std::vector<Sample>& samples, const std::vector<size_t>& indices)
{
    if (!indices.empty())
        return indices;
    std::vector<size_t> out(samples.size());
    std::iota(out.begin(), out.end(), size_t{0});
    return out;
}

int64_t steps_per_epoch(size_t n, int64_t batch)
{
    return (static_cast<int64_t>(n) + batch - 1) / batch;
}

}  // namespace

std::string format_log_entry(const TrainLogEntry& e)
{
    std::string line = std::to_string(e.epoch) + "\t" + format_number(e.train_loss) + "\t" + format_number(e.learning_rate);
    if (e.val_plcc && e.val_srcc)
        line += "\t" + format_number(*e.val_plcc) + "\t" + format_number(*e.val_srcc);
    return line;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const ExperimentConfig& config, torch::Device device) : config_(config), device_(device)
{
    validate_config(config_);
    torch::manual_seed(config_.seed);
    model_ = PfiqaModel(config_.model, config_.crop_size);
    model_->to(device_);
    auto params = model_->trainable_parameters();
    if (params.empty())
        throw ConfigError("model has no trainable parameters");
    optimizer_ = std::make_unique<torch::optim::AdamW>(
        params, torch::optim::AdamWOptions(config_.optim.learning_rate).weight_decay(config_.optim.weight_decay));
}

void Trainer::set_total_steps(int64_t steps)
{
    total_steps_ = std::max<int64_t>(1, steps);
}

double Trainer::learning_rate_at(int64_t step) const
{
    const double hi = config_.optim.learning_rate;
    const double lo = std::min(config_.optim.min_learning_rate, hi);
    const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps_), 0.0, 1.0);
    return lo + 0.5 * (hi - lo) * (1.0 + std::cos(std::numbers::pi * t));
}

double Trainer::step(const std::vector<ModelInput>& inputs)
{
    if (inputs.empty())
        throw DataError("empty training batch");
    for (const auto& in : inputs)
        if (!in.mos)
            throw DataError("training sample without a MOS label");
    model_->train();
    auto batch = collate(inputs, device_);
    const double lr = learning_rate_at(step_);
    for (auto& group : optimizer_->param_groups())
        static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);

    optimizer_->zero_grad();
    torch::Tensor pred;
    {
        AutocastScope autocast(config_.optim.bf16_autocast && device_.is_cpu());
        pred = model_->forward(batch.sr, batch.lr, batch.scales).final_score;
    }
    auto loss = torch::mse_loss(pred.to(batch.mos.scalar_type()), batch.mos);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite training loss at epoch " << epoch_ + 1 << ", step " << step_ << " (lr " << lr
            << "); predictions: " << pred.detach().cpu();
        throw NumericError(msg.str());
    }
    loss.backward();
    for (auto& p : model_->trainable_parameters()) {
        if (p.grad().defined() && !torch::isfinite(p.grad()).all().item<bool>())
            throw NumericError("non-finite gradient at epoch " + std::to_string(epoch_ + 1) + ", step " +
                               std::to_string(step_));
    }
    optimizer_->step();
    ++step_;
    return value;
}

TrainLogEntry Trainer::train_epoch(const std::vector<Sample>& samples, const std::vector<size_t>& indices)
{
    if (indices.empty())
        throw DataError("empty training split");
    const auto epoch = static_cast<uint64_t>(epoch_);
    const auto seed = config_.seed;

    auto order = indices;
    auto shuffle_rng = derive_rng(seed, {kShuffleStream, epoch});
    for (size_t i = order.size() - 1; i > 0; --i)
        std::swap(order[i], order[uniform_index(shuffle_rng, i + 1)]);

    const auto bs = static_cast<size_t>(config_.optim.batch_size);
    double weighted = 0.0;
    for (size_t begin = 0; begin < order.size(); begin += bs) {
        const auto end = std::min(order.size(), begin + bs);
        std::vector<ModelInput> inputs;
        for (size_t k = begin; k < end; ++k) {
            const auto idx = order[k];
            if (idx >= samples.size())
                throw DataError("training index out of range");
            if (!samples[idx].mos)
                throw DataError("training sample " + std::to_string(idx) + " has no MOS");
            auto rng = derive_rng(seed, {kCropStream, epoch, static_cast<uint64_t>(idx)});
            inputs.push_back(train_transform(samples[idx], rng, config_.crop_size, config_.optim.horizontal_flip));
        }
        weighted += step(inputs) * static_cast<double>(end - begin);
    }
    ++epoch_;
    TrainLogEntry entry;
    entry.epoch = epoch_;
    entry.train_loss = weighted / static_cast<double>(order.size());
    entry.learning_rate = learning_rate_at(std::max<int64_t>(0, step_ - 1));
    return entry;
}

std::vector<TrainLogEntry> Trainer::fit(const std::vector<Sample>& samples, const std::vector<size_t>& indices,
                                        const std::function<void(const TrainLogEntry&)>& on_epoch)
{
    if (indices.empty())
        throw DataError("empty training split");
    const auto per_epoch = steps_per_epoch(indices.size(), config_.optim.batch_size);
    set_total_steps(per_epoch * config_.optim.max_epochs);
    step_ = epoch_ * per_epoch;
    std::vector<TrainLogEntry> log;
    while (epoch_ < config_.optim.max_epochs) {
        log.push_back(train_epoch(samples, indices));
        if (on_epoch)
            on_epoch(log.back());
    }
    return log;
}

TrainResult train(const ExperimentConfig& config, const std::vector<Sample>& corpus, const std::vector<size_t>& indices,
                  const std::function<void(const TrainLogEntry&)>& on_epoch)
{
    if (corpus.empty())
        throw DataError("empty training split");
    Trainer trainer(config);
    auto log = trainer.fit(corpus, all_indices(corpus, indices), on_epoch);
    return TrainResult{trainer.model(), std::move(log)};
}

// ---------------------------------------------------------------------------
// Evaluation

Scorer make_model_scorer(PfiqaModel model, int64_t crop)
{
    return [model, crop](const Sample& s) mutable {
        torch::NoGradGuard no_grad;
        model->eval();
        auto windows = eval_crop_windows(s.sr_image.size(0), s.sr_image.size(1), crop);
        // Identical windows give identical scores, so the mean is unchanged.
        std::vector<CropWindow> distinct;
        for (const auto& w : windows)
            if (std::find(distinct.begin(), distinct.end(), w) == distinct.end())
                distinct.push_back(w);
        std::vector<ModelInput> inputs;
        for (const auto& w : distinct)
            inputs.push_back(make_input(s, w, crop, false));
        const auto device = model->parameters().front().device();
        auto batch = collate(inputs, device);
        auto scores = model->forward(batch.sr, batch.lr, batch.scales).final_score.to(torch::kFloat64).cpu();
        double sum = 0.0;
        for (size_t i = 0; i < distinct.size(); ++i) {
            const auto reps = std::count(windows.begin(), windows.end(), distinct[i]);
            sum += scores[static_cast<int64_t>(i)].item<double>() * static_cast<double>(reps);
        }
        return sum / static_cast<double>(windows.size());
    };
}

EvalOutcome evaluate(const Scorer& scorer, const std::vector<Sample>& samples, const std::vector<size_t>& indices,
                     bool logistic)
{
    const auto idx = all_indices(samples, indices);
    if (idx.size() < 3)
        throw ShapeError("evaluation needs at least 3 samples, got " + std::to_string(idx.size()));
    EvalOutcome out;
    for (auto i : idx) {
        if (i >= samples.size())
            throw DataError("evaluation index out of range");
        if (!samples[i].mos)
            throw DataError("evaluation sample " + std::to_string(i) + " has no MOS");
        out.predictions.push_back(scorer(samples[i]));
        out.mos.push_back(*samples[i].mos);
    }
    out.report = make_report(out.predictions, out.mos, logistic);
    return out;
}

// ---------------------------------------------------------------------------
// Protocol

ProtocolResult run_protocol(const ExperimentConfig& config, const std::vector<Sample>& corpus,
                            const ProtocolHooks& hooks, torch::Device device)
{
    validate_config(config);
    const auto splits = make_splits(corpus, config.split.seed, config.split.ratio, config.split.n_repeats,
                                    config.split.group_by_content);
    ProtocolResult result;
    std::vector<EvalReport> reports;
    for (size_t r = 0; r < splits.size(); ++r) {
        const auto repeat = static_cast<int64_t>(r);
        Trainer trainer(config, device);
        std::function<void(const TrainLogEntry&)> cb;
        if (hooks.on_epoch)
            cb = [&](const TrainLogEntry& e) { hooks.on_epoch(repeat, e); };
        trainer.fit(corpus, splits[r].train, cb);
        if (hooks.on_trained)
            hooks.on_trained(repeat, trainer);
        auto outcome = evaluate(make_model_scorer(trainer.model(), config.crop_size), corpus, splits[r].test,
                                config.eval.logistic_fit);
        if (hooks.on_evaluated)
            hooks.on_evaluated(repeat, outcome);
        reports.push_back(outcome.report);
        result.repeats.push_back(std::move(outcome));
    }
    result.report = aggregate_reports(reports);
    return result;
}

// ---------------------------------------------------------------------------
// Ablations

std::string to_string(AblationAxis axis)
{
    switch (axis) {
    case AblationAxis::branches: return "branches";
    case AblationAxis::fusion: return "fusion";
    case AblationAxis::finetune: return "finetune";
    }
    return "?";
}

AblationAxis parse_ablation_axis(const std::string& name)
{
    if (name == "branches")
        return AblationAxis::branches;
    if (name == "fusion")
        return AblationAxis::fusion;
    if (name == "finetune")
        return AblationAxis::finetune;
    throw ConfigError("unknown ablation axis '" + name + "' (expected branches, fusion or finetune)");
}

std::vector<AblationRow> ablation_rows(const ExperimentConfig& base, AblationAxis axis)
{
    std::vector<AblationRow> rows;
    auto add = [&](std::string label, std::string method, auto&& edit) {
        ExperimentConfig c = base;
        edit(c.model);
        rows.push_back({std::move(label), std::move(method), std::move(c)});
    };
    switch (axis) {
    case AblationAxis::branches:
        add("(a)", "perception", [](ModelConfig& m) {
            m.enable_perception_branch = true;
            m.enable_fidelity_branch = false;
            m.enable_scale_factor = false;
        });
        add("(b)", "fidelity", [](ModelConfig& m) {
            m.enable_perception_branch = false;
            m.enable_fidelity_branch = true;
            m.enable_scale_factor = false;
        });
        add("(c)", "perception+fidelity", [](ModelConfig& m) {
            m.enable_perception_branch = true;
            m.enable_fidelity_branch = true;
            m.enable_scale_factor = false;
        });
        add("(d)", "perception+fidelity+scale", [](ModelConfig& m) {
            m.enable_perception_branch = true;
            m.enable_fidelity_branch = true;
            m.enable_scale_factor = true;
        });
        break;
    case AblationAxis::fusion:
        add("(a)", "ResNet-only", [](ModelConfig& m) { m.fusion_mode = FusionMode::resnet_only; });
        add("(b)", "ViT-only", [](ModelConfig& m) { m.fusion_mode = FusionMode::vit_only; });
        add("(c)", "Concatenation", [](ModelConfig& m) { m.fusion_mode = FusionMode::concat; });
        add("(d)", "Adaptive Fusion", [](ModelConfig& m) { m.fusion_mode = FusionMode::adaptive; });
        break;
    case AblationAxis::finetune:
        add("(a)", "ResNet updated", [](ModelConfig& m) { m.backbone_trainable = BackboneTrainable::resnet; });
        add("(b)", "ViT updated", [](ModelConfig& m) { m.backbone_trainable = BackboneTrainable::vit; });
        add("(c)", "ViT+ResNet updated", [](ModelConfig& m) { m.backbone_trainable = BackboneTrainable::both; });
        add("(d)", "frozen", [](ModelConfig& m) { m.backbone_trainable = BackboneTrainable::none; });
        break;
    }
    return rows;
}

std::vector<AblationResult> count_ablation_parameters(const ExperimentConfig& base, AblationAxis axis)
{
    std::vector<AblationResult> out;
    for (auto& row : ablation_rows(base, axis)) {
        PfiqaModel model(row.config.model, row.config.crop_size);
        AblationResult r;
        r.trainable_parameters = model->trainable_parameter_count();
        r.total_parameters = model->parameter_count();
        r.row = std::move(row);
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<AblationResult> run_ablation_suite(const ExperimentConfig& base, const std::vector<Sample>& corpus,
                                               AblationAxis axis, const ProtocolHooks& hooks, torch::Device device)
{
    auto results = count_ablation_parameters(base, axis);
    for (auto& r : results)
        r.report = run_protocol(r.row.config, corpus, hooks, device).report;
    return results;
}

std::string format_ablation_table(AblationAxis axis, const std::vector<AblationResult>& results)
{
    std::ostringstream os;
    os << "row\t" << (axis == AblationAxis::fusion ? "fusion_method" : "setting")
       << "\ttrainable_params\ttotal_params\tplcc\tsrcc\n";
    for (const auto& r : results) {
        os << r.row.label << '\t' << r.row.method << '\t' << r.trainable_parameters << '\t' << r.total_parameters;
        if (r.report)
            os << '\t' << format_number(r.report->plcc) << '\t' << format_number(r.report->srcc);
        else
            os << "\t-\t-";
        os << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr int64_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, PfiqaModel& model, const ExperimentConfig& config, int64_t epoch,
                      int64_t step, torch::optim::AdamW* optimizer)
{
    c10::Dict<std::string, at::Tensor> tensors;
    for (auto& [name, t] : model->checkpoint_state())
        tensors.insert(name, t.detach().cpu().contiguous());

    c10::impl::GenericDict root(c10::StringType::get(), c10::AnyType::get());
    root.insert("version", kCheckpointVersion);
    root.insert("config", serialize_config(config));
    root.insert("seed", static_cast<int64_t>(config.seed));
    root.insert("epoch", epoch);
    root.insert("step", step);
    root.insert("model", tensors);
    if (optimizer) {
        std::ostringstream os;
        torch::serialize::OutputArchive archive;
        optimizer->save(archive);
        archive.save_to(os);
        const auto bytes = os.str();
        auto blob = torch::empty({static_cast<int64_t>(bytes.size())}, torch::kUInt8);
        std::memcpy(blob.data_ptr<uint8_t>(), bytes.data(), bytes.size());
        root.insert("optimizer", blob);
    }
    const auto data = torch::pickle_save(c10::IValue(root));
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("cannot write checkpoint '" + path + "'");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out)
        throw DataError("cannot write checkpoint '" + path + "'");
}

c10::impl::GenericDict read_checkpoint(const std::string& path)
{
    if (!std::filesystem::exists(path))
        throw MissingFileError("missing file: checkpoint '" + path + "'");
    std::ifstream in(path, std::ios::binary);
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    c10::IValue value;
    try {
        value = torch::pickle_load(data);
    } catch (const c10::Error& e) {
        throw DataError("cannot parse checkpoint '" + path + "'");
    }
    if (!value.isGenericDict())
        throw DataError("checkpoint '" + path + "' is not a pfiqa checkpoint");
    auto dict = value.toGenericDict();
    for (const char* key : {"version", "config", "epoch", "model"})
        if (!dict.contains(key))
            throw DataError("checkpoint '" + path + "' lacks '" + key + "'");
    if (dict.at("version").toInt() != kCheckpointVersion)
        throw DataError("unsupported checkpoint version in '" + path + "'");
    return dict;
}

void restore_model(PfiqaModel& model, const c10::impl::GenericDict& dict, const std::string& path)
{
    auto stored = dict.at("model").toGenericDict();
    std::set<std::string> expected;
    torch::NoGradGuard no_grad;
    for (auto& [name, t] : model->checkpoint_state()) {
        expected.insert(name);
        if (!stored.contains(name))
            throw DataError("checkpoint/config mismatch in '" + path + "': missing tensor '" + name + "'");
        auto src = stored.at(name).toTensor();
        if (src.sizes() != t.sizes())
            throw DataError("checkpoint/config mismatch in '" + path + "': tensor '" + name + "' has shape " +
                            c10::str(src.sizes()) + ", model expects " + c10::str(t.sizes()));
        t.copy_(src);
    }
    for (const auto& entry : stored)
        if (!expected.count(entry.key().toStringRef()))
            throw DataError("checkpoint/config mismatch in '" + path + "': unexpected tensor '" +
                            entry.key().toStringRef() + "'");
}

}  // namespace

void save_checkpoint(const std::string& path, Trainer& trainer)
{
    write_checkpoint(path, trainer.model(), trainer.config(), trainer.epochs_done(), trainer.steps_taken(),
                     &trainer.optimizer());
}

void save_checkpoint(const std::string& path, PfiqaModel& model, const ExperimentConfig& config, int64_t epoch)
{
    write_checkpoint(path, model, config, epoch, 0, nullptr);
}

LoadedCheckpoint load_checkpoint(const std::string& path, torch::Device device)
{
    auto dict = read_checkpoint(path);
    LoadedCheckpoint out;
    out.config = parse_config(dict.at("config").toStringRef());
    out.epoch = dict.at("epoch").toInt();
    out.model = PfiqaModel(out.config.model, out.config.crop_size);
    restore_model(out.model, dict, path);
    out.model->to(device);
    out.model->eval();
    return out;
}

void Trainer::resume(const std::string& path)
{
    auto dict = read_checkpoint(path);
    if (!(parse_config(dict.at("config").toStringRef()).model == config_.model))
        throw DataError("checkpoint/config mismatch: '" + path + "' was written for a different model configuration");
    model_->to(torch::kCPU);
    restore_model(model_, dict, path);
    model_->to(device_);
    epoch_ = dict.at("epoch").toInt();
    if (dict.contains("optimizer")) {
        auto blob = dict.at("optimizer").toTensor().contiguous();
        std::string bytes(reinterpret_cast<const char*>(blob.data_ptr<uint8_t>()), static_cast<size_t>(blob.numel()));
        std::istringstream is(bytes);
        torch::serialize::InputArchive archive;
        archive.load_from(is, device_);
        optimizer_->load(archive);
    }
}

}  // namespace pfiqa
