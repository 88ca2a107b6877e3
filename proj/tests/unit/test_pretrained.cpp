#include "support/doctest_torch.hpp"

#include "pfiqa/backbones.hpp"

#include <filesystem>
#include <fstream>
#include <iterator>

using namespace pfiqa;
namespace fs = std::filesystem;

#ifndef PFIQA_REFERENCE_DIR
#define PFIQA_REFERENCE_DIR ""
#endif

namespace {

c10::Dict<c10::IValue, c10::IValue> read_reference(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return torch::pickle_load(bytes).toGenericDict();
}

}  // namespace

TEST_SUITE("pretrained")
{
    TEST_CASE("torchvision checkpoints load and reproduce reference stage outputs")
    {
        const fs::path dir = PFIQA_REFERENCE_DIR;
        if (dir.empty() || !fs::exists(dir / "reference.pt")) {
            MESSAGE("reference backbones not generated; skipping");
            return;
        }
        ModelConfig cfg;
        cfg.backbone.kind = BackboneKind::pretrained;
        cfg.backbone.vit.num_layers = 2;
        cfg.backbone.vit_stage_indices = {0, 1, 1, 0, 1};
        cfg.backbone.vit_checkpoint = (dir / "vit.pt").string();
        cfg.backbone.resnet_checkpoint = (dir / "resnet.pt").string();
        FeatureExtractor fx(cfg, 224);
        fx->eval();

        auto ref = read_reference(dir / "reference.pt");
        auto input = ref.at("input").toTensor();
        torch::NoGradGuard g;
        auto stages = fx->extract_stages(input);
        REQUIRE(stages.vit_stages.size() == 5);
        for (size_t k = 0; k < 5; ++k) {
            auto want = ref.at("vit_" + std::to_string(k)).toTensor();
            CHECK((stages.vit_stages[k] - want).abs().max().item<double>() <= 1e-4);
        }
        REQUIRE(stages.resnet_stages.size() == 4);
        for (size_t k = 0; k < 4; ++k) {
            auto want = ref.at("resnet_" + std::to_string(k)).toTensor();
            const double scale = want.abs().max().item<double>();
            CHECK((stages.resnet_stages[k] - want).abs().max().item<double>() <= 1e-4 * std::max(1.0, scale));
        }

        // Loaded backbones produce the contractual bundle shapes.
        auto bundle = fx(input);
        check_bundle(bundle, 256, 28);
    }

    TEST_CASE("checkpoint for the wrong architecture is rejected")
    {
        const fs::path dir = PFIQA_REFERENCE_DIR;
        if (dir.empty() || !fs::exists(dir / "resnet.pt")) {
            MESSAGE("reference backbones not generated; skipping");
            return;
        }
        ModelConfig cfg;
        cfg.backbone.kind = BackboneKind::pretrained;
        cfg.backbone.vit.num_layers = 2;
        cfg.backbone.vit_stage_indices = {0, 1, 1, 0, 1};
        // Swapped files: every expected tensor is missing or mis-shaped.
        cfg.backbone.vit_checkpoint = (dir / "resnet.pt").string();
        cfg.backbone.resnet_checkpoint = (dir / "vit.pt").string();
        CHECK_THROWS_AS(FeatureExtractor(cfg, 224), DataError);
    }
}
