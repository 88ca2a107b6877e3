#include "support/doctest_torch.hpp"

#include "pfiqa/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <numbers>

using namespace pfiqa;
namespace fs = std::filesystem;

namespace {

// 224×224 images make every crop the full frame; with flips off the
// training inputs are fixed.
ExperimentConfig tiny_config(int64_t contents, int64_t methods)
{
    ExperimentConfig c;
    c.dataset.synthetic.n_contents = contents;
    c.dataset.synthetic.methods_per_content = methods;
    c.dataset.synthetic.image_size = 224;
    c.optim.horizontal_flip = false;
    c.optim.batch_size = 2;
    c.optim.max_epochs = 1;
    c.split.n_repeats = 1;
    return c;
}

std::vector<ModelInput> fixed_batch(const std::vector<Sample>& corpus, size_t n)
{
    std::vector<ModelInput> out;
    for (size_t i = 0; i < n; ++i)
        out.push_back(make_input(corpus[i], {0, 0}, 224, false));
    return out;
}

std::vector<torch::Tensor> snapshot(const std::vector<torch::Tensor>& params)
{
    std::vector<torch::Tensor> out;
    for (const auto& p : params)
        out.push_back(p.detach().clone());
    return out;
}

bool all_equal(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b)
{
    if (a.size() != b.size())
        return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (!torch::equal(a[i], b[i]))
            return false;
    return true;
}

}  // namespace

TEST_SUITE("trainer")
{
    TEST_CASE("cosine learning-rate schedule")
    {
        auto c = tiny_config(1, 1);
        c.optim.learning_rate = 1e-3;
        c.optim.min_learning_rate = 1e-5;
        Trainer t(c);
        t.set_total_steps(10);
        for (int64_t s = 0; s <= 10; ++s) {
            const double want = 1e-5 + 0.5 * (1e-3 - 1e-5) * (1.0 + std::cos(std::numbers::pi * s / 10.0));
            CHECK(t.learning_rate_at(s) == doctest::Approx(want).epsilon(1e-12));
        }
        CHECK(t.learning_rate_at(0) == doctest::Approx(1e-3));
        CHECK(t.learning_rate_at(10) == doctest::Approx(1e-5));
    }

    TEST_CASE("zero learning rate leaves every parameter untouched")
    {
        auto c = tiny_config(2, 1);
        c.optim.learning_rate = 0.0;
        c.optim.min_learning_rate = 0.0;
        auto corpus = load_dataset(c.dataset);
        Trainer t(c);
        auto before = snapshot(t.model()->parameters());
        auto batch = fixed_batch(corpus, 2);
        const double l1 = t.step(batch);
        const double l2 = t.step(batch);
        CHECK(l1 == l2);
        CHECK(all_equal(before, snapshot(t.model()->parameters())));
    }

    TEST_CASE("frozen backbones survive optimizer steps while heads move")
    {
        auto c = tiny_config(2, 1);
        c.optim.learning_rate = 1e-3;
        auto corpus = load_dataset(c.dataset);
        Trainer t(c);
        auto backbone = snapshot(t.model()->extractor->backbone_parameters());
        auto head = snapshot(t.model()->perception_head->parameters());
        auto batch = fixed_batch(corpus, 1);
        for (int i = 0; i < 3; ++i)
            t.step(batch);
        CHECK(all_equal(backbone, snapshot(t.model()->extractor->backbone_parameters())));
        CHECK_FALSE(all_equal(head, snapshot(t.model()->perception_head->parameters())));
        CHECK(t.steps_taken() == 3);
    }

    TEST_CASE("a batch with a missing label is rejected")
    {
        auto c = tiny_config(1, 1);
        auto corpus = load_dataset(c.dataset);
        Trainer t(c);
        auto batch = fixed_batch(corpus, 1);
        batch[0].mos.reset();
        CHECK_THROWS_AS(t.step(batch), DataError);
        CHECK_THROWS_AS(t.step({}), DataError);
    }

    TEST_CASE("checkpoint round trip gives bit-identical scores and resumable training")
    {
        auto c = tiny_config(2, 1);
        c.optim.learning_rate = 1e-3;
        c.optim.max_epochs = 2;
        auto corpus = load_dataset(c.dataset);
        const std::vector<size_t> idx{0, 1};
        const auto dir = fs::temp_directory_path() / "pfiqa_ckpt_test";
        fs::create_directories(dir);
        const auto path = (dir / "a.pt").string();

        Trainer a(c);
        a.set_total_steps(2);
        a.train_epoch(corpus, idx);
        save_checkpoint(path, a);

        auto loaded = load_checkpoint(path);
        CHECK(loaded.epoch == 1);
        CHECK(loaded.config == c);
        auto sa = make_model_scorer(a.model()), sb = make_model_scorer(loaded.model);
        for (const auto& s : corpus)
            CHECK(sa(s) == sb(s));

        a.train_epoch(corpus, idx);
        Trainer b(c);
        b.resume(path);
        CHECK(b.epochs_done() == 1);
        b.fit(corpus, idx);
        CHECK(b.epochs_done() == 2);
        CHECK(all_equal(snapshot(a.model()->parameters()), snapshot(b.model()->parameters())));

        auto other = c;
        other.model.head_hidden = 32;
        Trainer mismatch(other);
        CHECK_THROWS_WITH_AS(mismatch.resume(path), doctest::Contains("mismatch"), DataError);
        CHECK_THROWS_AS(load_checkpoint((dir / "absent.pt").string()), MissingFileError);
        fs::remove_all(dir);
    }

    TEST_CASE("evaluation with oracle and constant scorers")
    {
        auto c = tiny_config(2, 2);
        auto corpus = load_dataset(c.dataset);
        auto oracle = evaluate([](const Sample& s) { return *s.mos; }, corpus);
        CHECK(oracle.report.plcc == doctest::Approx(1.0));
        CHECK(oracle.report.srcc == doctest::Approx(1.0));
        CHECK(oracle.predictions == oracle.mos);
        CHECK_THROWS_AS(evaluate([](const Sample&) { return 0.5; }, corpus), DegenerateInputError);
        CHECK_THROWS_AS(evaluate([](const Sample& s) { return *s.mos; }, corpus, {0, 1}), ShapeError);
        corpus[3].mos.reset();
        CHECK_THROWS_AS(evaluate([](const Sample&) { return 0.5; }, corpus), DataError);
    }

    TEST_CASE("model scorer averages the five crop windows")
    {
        auto c = tiny_config(1, 1);
        c.dataset.synthetic.image_size = 240;
        auto corpus = load_dataset(c.dataset);
        Trainer t(c);
        auto scorer = make_model_scorer(t.model());
        torch::NoGradGuard g;
        t.model()->eval();
        double sum = 0.0;
        for (const auto& in : eval_crops(corpus[0])) {
            auto p = t.model()->forward(in.sr.unsqueeze(0), in.lr.unsqueeze(0), torch::tensor({float(in.scale_factor)}));
            sum += p.final_score.item<double>();
        }
        CHECK(scorer(corpus[0]) == doctest::Approx(sum / 5.0).epsilon(1e-5));
    }

    TEST_CASE("training log formatting")
    {
        TrainLogEntry e{3, 0.25, 1e-4, std::nullopt, std::nullopt};
        const auto bare = format_log_entry(e);
        CHECK(bare.rfind("3\t", 0) == 0);
        CHECK(std::count(bare.begin(), bare.end(), '\t') == 2);
        e.val_plcc = 0.5;
        e.val_srcc = 0.4;
        const auto line = format_log_entry(e);
        CHECK(std::count(line.begin(), line.end(), '\t') == 4);
    }

    TEST_CASE("protocol reruns are identical")
    {
        auto c = tiny_config(5, 3);
        c.split.n_repeats = 2;
        c.optim.batch_size = 4;
        auto corpus = load_dataset(c.dataset);
        std::vector<int64_t> seen;
        ProtocolHooks hooks;
        hooks.on_epoch = [&](int64_t r, const TrainLogEntry&) { seen.push_back(r); };
        auto a = run_protocol(c, corpus, hooks);
        auto b = run_protocol(c, corpus);
        CHECK(seen == std::vector<int64_t>({0, 1}));
        REQUIRE(a.repeats.size() == 2);
        CHECK(format_report_table(a.report) == format_report_table(b.report));
        CHECK(report_to_json(a.report).dump() == report_to_json(b.report).dump());
        CHECK(a.repeats[0].predictions == b.repeats[0].predictions);
    }

    TEST_CASE("ablation rows follow the published tables")
    {
        ExperimentConfig base;
        auto branches = ablation_rows(base, AblationAxis::branches);
        REQUIRE(branches.size() == 4);
        // (perception, fidelity, scale factor) per row.
        const bool br[4][3] = {{true, false, false}, {false, true, false}, {true, true, false}, {true, true, true}};
        for (size_t i = 0; i < 4; ++i) {
            const auto& m = branches[i].config.model;
            CHECK(branches[i].label == "(" + std::string(1, char('a' + i)) + ")");
            CHECK(m.enable_perception_branch == br[i][0]);
            CHECK(m.enable_fidelity_branch == br[i][1]);
            CHECK(m.enable_scale_factor == br[i][2]);
        }

        auto fusion = ablation_rows(base, AblationAxis::fusion);
        REQUIRE(fusion.size() == 4);
        CHECK(fusion[0].config.model.fusion_mode == FusionMode::resnet_only);
        CHECK(fusion[1].config.model.fusion_mode == FusionMode::vit_only);
        CHECK(fusion[2].config.model.fusion_mode == FusionMode::concat);
        CHECK(fusion[3].config.model.fusion_mode == FusionMode::adaptive);
        CHECK(fusion[2].method == "Concatenation");
        CHECK(fusion[3].method == "Adaptive Fusion");

        auto finetune = ablation_rows(base, AblationAxis::finetune);
        REQUIRE(finetune.size() == 4);
        CHECK(finetune[0].config.model.backbone_trainable == BackboneTrainable::resnet);
        CHECK(finetune[1].config.model.backbone_trainable == BackboneTrainable::vit);
        CHECK(finetune[2].config.model.backbone_trainable == BackboneTrainable::both);
        CHECK(finetune[3].config.model.backbone_trainable == BackboneTrainable::none);

        // Everything outside the ablated axis is inherited from the base.
        for (const auto& r : finetune) {
            auto m = r.config.model;
            m.backbone_trainable = base.model.backbone_trainable;
            CHECK(m == base.model);
            CHECK(r.config.optim == base.optim);
        }
        for (auto axis : {AblationAxis::branches, AblationAxis::fusion, AblationAxis::finetune})
            CHECK(parse_ablation_axis(to_string(axis)) == axis);
        CHECK_THROWS_AS(parse_ablation_axis("depth"), ConfigError);
    }

    TEST_CASE("ablation parameter counts and table")
    {
        ExperimentConfig base;
        auto rows = count_ablation_parameters(base, AblationAxis::finetune);
        REQUIRE(rows.size() == 4);
        // Total size does not depend on what is trainable.
        for (const auto& r : rows)
            CHECK(r.total_parameters == rows[3].total_parameters);
        CHECK(rows[2].trainable_parameters > rows[0].trainable_parameters);
        CHECK(rows[2].trainable_parameters > rows[1].trainable_parameters);
        CHECK(rows[3].trainable_parameters < rows[0].trainable_parameters);

        auto fusion = count_ablation_parameters(base, AblationAxis::fusion);
        CHECK(fusion[2].trainable_parameters > fusion[3].trainable_parameters);
        CHECK(fusion[3].trainable_parameters > fusion[0].trainable_parameters);

        const auto table = format_ablation_table(AblationAxis::fusion, fusion);
        CHECK(std::count(table.begin(), table.end(), '\n') == 5);
        CHECK(table.find("Adaptive Fusion") != std::string::npos);
        CHECK(table.find("\t-\t-") != std::string::npos);
    }
}
