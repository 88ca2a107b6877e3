// pfiqa: train, evaluate, predict and ablate from the command line.
//
// Every command writes under one run directory,
// <out-dir>/run-<config hash>-<UTC timestamp>, and prints its path on stderr.
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric failure.

#include "pfiqa/data.hpp"
#include "pfiqa/datamodel.hpp"
#include "pfiqa/metrics.hpp"
#include "pfiqa/model.hpp"
#include "pfiqa/trainer.hpp"

#include "CLI11.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace pfiqa;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct CommonOptions {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::string out_dir = "runs";
    std::string device = "cpu";
};

struct Overrides {
    std::optional<int64_t> epochs;
    std::optional<double> learning_rate;
    std::optional<int64_t> batch_size;
    std::optional<int64_t> repeats;
    std::optional<std::string> dataset_root;
    std::optional<std::string> dataset_format;
    bool emit_scatter = false;
};

void add_common(CLI::App* cmd, CommonOptions& common)
{
    cmd->add_option("--config", common.config_path, "Experiment config (JSON); defaults apply when omitted")
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed", common.seed, "Experiment and split seed (overrides the config)");
    cmd->add_option("--out-dir", common.out_dir, "Parent directory for the run directory")->capture_default_str();
    cmd->add_option("--device", common.device, "cpu or cuda")->capture_default_str();
}

void add_overrides(CLI::App* cmd, Overrides& o)
{
    cmd->add_option("--epochs", o.epochs, "Training epochs per repeat")->check(CLI::PositiveNumber);
    cmd->add_option("--lr", o.learning_rate, "Peak learning rate")->check(CLI::NonNegativeNumber);
    cmd->add_option("--batch-size", o.batch_size, "Mini-batch size")->check(CLI::PositiveNumber);
    cmd->add_option("--repeats", o.repeats, "Number of train/test splits")->check(CLI::PositiveNumber);
    cmd->add_option("--dataset-root", o.dataset_root, "Dataset root holding manifest.tsv");
    cmd->add_option("--format", o.dataset_format, "Dataset format: generic, qads, wind, realsrq, synthetic");
    cmd->add_flag("--emit-scatter", o.emit_scatter, "Write per-repeat prediction/MOS pairs");
}

ExperimentConfig resolve_config(const CommonOptions& common, const Overrides& o)
{
    ExperimentConfig c = common.config_path.empty() ? ExperimentConfig{} : load_config(common.config_path);
    if (common.seed) {
        c.seed = *common.seed;
        c.split.seed = *common.seed;
    }
    if (o.epochs)
        c.optim.max_epochs = *o.epochs;
    if (o.learning_rate)
        c.optim.learning_rate = *o.learning_rate;
    if (o.batch_size)
        c.optim.batch_size = *o.batch_size;
    if (o.repeats)
        c.split.n_repeats = *o.repeats;
    if (o.dataset_root)
        c.dataset.root = *o.dataset_root;
    if (o.dataset_format)
        c.dataset.format = *o.dataset_format;
    if (o.emit_scatter)
        c.eval.emit_scatter = true;
    validate_config(c);
    return c;
}

torch::Device resolve_device(const std::string& name)
{
    if (name == "cpu")
        return torch::kCPU;
    if (name == "cuda") {
        if (!torch::cuda::is_available())
            throw ConfigError("--device cuda requested but no CUDA device is available");
        return torch::kCUDA;
    }
    throw ConfigError("unknown device '" + name + "' (expected cpu or cuda)");
}

fs::path make_run_dir(const std::string& out_dir, const ExperimentConfig& config)
{
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%dT%H%M%SZ", &tm);
    const auto base = fs::path(out_dir) / ("run-" + config_hash(config) + "-" + stamp);
    auto dir = base;
    for (int k = 1; fs::exists(dir); ++k)
        dir = base.string() + "-" + std::to_string(k);
    fs::create_directories(dir);
    std::cerr << "run directory: " << dir.string() << "\n";
    return dir;
}

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("cannot write '" + path.string() + "'");
    out << text;
}

void write_report(const fs::path& dir, const EvalReport& report)
{
    write_text(dir / "report.tsv", format_report_table(report));
    write_text(dir / "report.json", report_to_json(report).dump(2) + "\n");
}

fs::path repeat_dir(const fs::path& run, int64_t repeat)
{
    auto dir = run / ("repeat-" + std::to_string(repeat));
    fs::create_directories(dir);
    return dir;
}

// ---------------------------------------------------------------------------

int cmd_train(const CommonOptions& common, const Overrides& o)
{
    const auto config = resolve_config(common, o);
    const auto device = resolve_device(common.device);
    const auto corpus = load_dataset(config.dataset);
    const auto run = make_run_dir(common.out_dir, config);
    save_config(config, (run / "config.json").string());

    ProtocolHooks hooks;
    hooks.on_epoch = [&](int64_t repeat, const TrainLogEntry& e) {
        std::ofstream log(repeat_dir(run, repeat) / "train_log.tsv", std::ios::app);
        if (e.epoch == 1)
            log << "# epoch\ttrain_loss\tlearning_rate\n";
        log << format_log_entry(e) << '\n';
        std::cerr << "repeat " << repeat << " epoch " << e.epoch << " loss " << format_number(e.train_loss) << "\n";
    };
    hooks.on_trained = [&](int64_t repeat, Trainer& trainer) {
        save_checkpoint((repeat_dir(run, repeat) / "checkpoint.pt").string(), trainer);
    };
    hooks.on_evaluated = [&](int64_t repeat, const EvalOutcome& outcome) {
        if (config.eval.emit_scatter)
            write_scatter((repeat_dir(run, repeat) / "scatter.tsv").string(), outcome.predictions, outcome.mos);
    };
    const auto result = run_protocol(config, corpus, hooks, device);
    write_report(run, result.report);
    std::cout << format_report_table(result.report);
    return kOk;
}

int cmd_eval(const CommonOptions& common, const Overrides& o, const std::string& checkpoint)
{
    const auto device = resolve_device(common.device);
    auto loaded = load_checkpoint(checkpoint, device);
    // The checkpoint fixes the model; the dataset may come from --config or flags.
    ExperimentConfig config = loaded.config;
    if (!common.config_path.empty())
        config.dataset = load_config(common.config_path).dataset;
    if (o.dataset_root)
        config.dataset.root = *o.dataset_root;
    if (o.dataset_format)
        config.dataset.format = *o.dataset_format;
    if (o.emit_scatter)
        config.eval.emit_scatter = true;
    const auto samples = load_dataset(config.dataset);
    const auto run = make_run_dir(common.out_dir, config);
    save_config(config, (run / "config.json").string());
    auto outcome = evaluate(make_model_scorer(loaded.model, config.crop_size), samples, {}, config.eval.logistic_fit);
    if (config.eval.emit_scatter)
        write_scatter((run / "scatter.tsv").string(), outcome.predictions, outcome.mos);
    write_report(run, outcome.report);
    std::cout << format_report_table(outcome.report);
    return kOk;
}

struct PredictOptions {
    std::string checkpoint;
    std::string sr_path;
    std::string lr_path;
    double scale = 0.0;
    bool dump_maps = false;
};

int cmd_predict(const CommonOptions& common, const PredictOptions& p)
{
    const auto device = resolve_device(common.device);
    auto loaded = load_checkpoint(p.checkpoint, device);
    const auto& config = loaded.config;

    Sample s;
    s.sr_image = load_image(p.sr_path);
    s.lr_image_upsampled = resize_bilinear(load_image(p.lr_path), s.sr_image.size(0), s.sr_image.size(1));
    s.scale_factor = p.scale;
    s = validate_sample(std::move(s));
    const auto crop = config.crop_size;
    if (s.sr_image.size(0) < crop || s.sr_image.size(1) < crop)
        throw ShapeError("resolution " + std::to_string(s.sr_image.size(0)) + "×" + std::to_string(s.sr_image.size(1)) +
                         " is below the " + std::to_string(crop) + "×" + std::to_string(crop) + " crop size");

    nlohmann::json record;
    record["sr"] = p.sr_path;
    record["lr"] = p.lr_path;
    record["scale_factor"] = p.scale;
    record["score"] = make_model_scorer(loaded.model, crop)(s);

    if (p.dump_maps) {
        const auto run = make_run_dir(common.out_dir, config);
        const auto maps = run / "maps";
        fs::create_directories(maps);
        torch::NoGradGuard no_grad;
        loaded.model->eval();
        const auto windows = eval_crop_windows(s.sr_image.size(0), s.sr_image.size(1), crop);
        for (size_t k = 0; k < windows.size(); ++k) {
            auto in = make_input(s, windows[k], crop, false);
            auto scales = torch::full({1}, static_cast<float>(s.scale_factor));
            auto t = loaded.model->trace(in.sr.unsqueeze(0).to(device), in.lr.unsqueeze(0).to(device), scales.to(device));
            auto rec = to_record(t.prediction, 0, true);
            rec["crop"] = {{"top", windows[k].top}, {"left", windows[k].left}};

            c10::Dict<std::string, at::Tensor> tensors;
            auto put = [&](const std::string& name, const torch::Tensor& x) {
                if (!x.defined())
                    return;
                auto c = x[0].detach().cpu().contiguous();
                tensors.insert(name, c);
                rec["tensors"][name] = {{"shape", c.sizes().vec()}, {"max_abs", c.abs().max().item<double>()}};
            };
            put("f_diff_global", t.diff.global_feat);
            put("f_diff_local", t.diff.local_feat);
            put("s_p", t.prediction.s_p);
            put("s_f", t.prediction.s_f);
            put("w_p", t.prediction.w_p);
            put("w_f", t.prediction.w_f);
            const auto stem = "crop-" + std::to_string(k);
            const auto bytes = torch::pickle_save(c10::IValue(tensors));
            std::ofstream((maps / (stem + ".pt")).string(), std::ios::binary)
                .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
            write_text(maps / (stem + ".json"), rec.dump() + "\n");
        }
        record["maps"] = (maps).string();
        write_text(run / "prediction.json", record.dump(2) + "\n");
    }
    std::cout << record.dump() << "\n";
    return kOk;
}

int cmd_ablate(const CommonOptions& common, const Overrides& o, const std::string& axis_name, bool count_only)
{
    const auto axis = parse_ablation_axis(axis_name);
    const auto config = resolve_config(common, o);
    const auto device = resolve_device(common.device);
    std::vector<AblationResult> results;
    if (count_only) {
        results = count_ablation_parameters(config, axis);
    } else {
        const auto corpus = load_dataset(config.dataset);
        ProtocolHooks hooks;
        hooks.on_epoch = [](int64_t repeat, const TrainLogEntry& e) {
            std::cerr << "repeat " << repeat << " epoch " << e.epoch << " loss " << format_number(e.train_loss) << "\n";
        };
        results = run_ablation_suite(config, corpus, axis, hooks, device);
    }
    const auto table = format_ablation_table(axis, results);
    const auto run = make_run_dir(common.out_dir, config);
    save_config(config, (run / "config.json").string());
    write_text(run / ("ablation-" + to_string(axis) + ".tsv"), table);
    std::cout << table;
    return kOk;
}

struct SynthOptions {
    std::optional<int64_t> contents;
    std::optional<int64_t> methods;
    std::optional<int64_t> size;
};

int cmd_synth(const CommonOptions& common, const SynthOptions& s)
{
    ExperimentConfig config = common.config_path.empty() ? ExperimentConfig{} : load_config(common.config_path);
    auto& spec = config.dataset.synthetic;
    if (common.seed)
        spec.seed = *common.seed;
    if (s.contents)
        spec.n_contents = *s.contents;
    if (s.methods)
        spec.methods_per_content = *s.methods;
    if (s.size)
        spec.image_size = *s.size;
    validate_config(config);
    const auto run = make_run_dir(common.out_dir, config);
    const auto root = run / "dataset";
    export_synthetic_dataset(spec, root.string());
    std::cout << root.string() << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Reduced-reference quality assessment for super-resolved images.\n"
                 "Flag values take precedence over the config file, which takes precedence over built-in defaults."};
    app.require_subcommand(1);

    CommonOptions common;
    Overrides overrides;

    auto* train = app.add_subcommand("train", "Run the repeated train/test protocol");
    add_common(train, common);
    add_overrides(train, overrides);

    std::string checkpoint;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a whole dataset");
    add_common(eval, common);
    eval->add_option("--checkpoint", checkpoint, "Checkpoint written by train")->required()->check(CLI::ExistingFile);
    eval->add_option("--dataset-root", overrides.dataset_root, "Dataset root holding manifest.tsv");
    eval->add_option("--format", overrides.dataset_format, "Dataset format");
    eval->add_flag("--emit-scatter", overrides.emit_scatter, "Write prediction/MOS pairs");

    PredictOptions predict_opts;
    auto* predict = app.add_subcommand("predict", "Score one SR/LR image pair");
    add_common(predict, common);
    predict->add_option("--checkpoint", predict_opts.checkpoint, "Checkpoint written by train")
        ->required()
        ->check(CLI::ExistingFile);
    predict->add_option("--sr", predict_opts.sr_path, "Super-resolved image")->required();
    predict->add_option("--lr", predict_opts.lr_path, "Low-resolution source image")->required();
    predict->add_option("--scale", predict_opts.scale, "Scale factor")->required()->check(CLI::PositiveNumber);
    predict->add_flag("--dump-maps", predict_opts.dump_maps,
                      "Write per-crop score/weight maps and difference features to the run directory");

    std::string axis;
    bool count_only = false;
    auto* ablate = app.add_subcommand("ablate", "Run one ablation axis and print its comparative table");
    add_common(ablate, common);
    add_overrides(ablate, overrides);
    ablate->add_option("--axis", axis, "branches, fusion or finetune")
        ->required()
        ->check(CLI::IsMember({"branches", "fusion", "finetune"}));
    ablate->add_flag("--count-only", count_only, "Only build each row's model and count parameters");

    SynthOptions synth_opts;
    auto* synth = app.add_subcommand("synth", "Write a synthetic dataset (PNG images + manifest.tsv)");
    add_common(synth, common);
    synth->add_option("--contents", synth_opts.contents, "Number of HR contents")->check(CLI::PositiveNumber);
    synth->add_option("--methods", synth_opts.methods, "Degraded versions per content")->check(CLI::PositiveNumber);
    synth->add_option("--size", synth_opts.size, "Image side length")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*train)
            return cmd_train(common, overrides);
        if (*eval)
            return cmd_eval(common, overrides, checkpoint);
        if (*predict)
            return cmd_predict(common, predict_opts);
        if (*ablate)
            return cmd_ablate(common, overrides, axis, count_only);
        if (*synth)
            return cmd_synth(common, synth_opts);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kNumeric;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    }
    return kUsage;
}
