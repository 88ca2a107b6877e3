#include "support/doctest_torch.hpp"

#include "pfiqa/data.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <sys/wait.h>

using namespace pfiqa;
namespace fs = std::filesystem;

#ifndef PFIQA_CLI_PATH
#error "PFIQA_CLI_PATH must name the pfiqa executable"
#endif

namespace {

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const fs::path& workdir()
{
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / "pfiqa_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

RunResult run(const std::string& args)
{
    const auto out = workdir() / "stdout.txt", err = workdir() / "stderr.txt";
    const std::string cmd = std::string(PFIQA_CLI_PATH) + " " + args + " > '" + out.string() + "' 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

fs::path only_run_dir(const fs::path& parent)
{
    fs::path found;
    int n = 0;
    for (const auto& e : fs::directory_iterator(parent))
        if (e.is_directory() && e.path().filename().string().rfind("run-", 0) == 0) {
            found = e.path();
            ++n;
        }
    REQUIRE(n == 1);
    return found;
}

std::string trim(std::string s)
{
    while (!s.empty() && (s.back() == '\n' || s.back() == '\r'))
        s.pop_back();
    return s;
}

// Shared synthetic dataset and a one-epoch training config.
struct Fixture {
    fs::path root;
    fs::path config;

    Fixture()
    {
        auto r = run("synth --contents 5 --methods 3 --size 224 --seed 4 --out-dir '" + (workdir() / "synth").string() + "'");
        REQUIRE(r.code == 0);
        root = trim(r.out);
        REQUIRE(fs::exists(root / "manifest.tsv"));
        config = workdir() / "tiny.json";
        std::ofstream(config) << R"({"optim": {"max_epochs": 1, "batch_size": 4, "horizontal_flip": false},
                                    "split": {"n_repeats": 1}})";
    }
};

const Fixture& fixture()
{
    static Fixture f;
    return f;
}

std::string data_args()
{
    return "--config '" + fixture().config.string() + "' --dataset-root '" + fixture().root.string() +
           "' --format generic";
}

}  // namespace

TEST_SUITE("cli")
{
    TEST_CASE("train is reproducible and its checkpoint evaluates and predicts")
    {
        const auto a = workdir() / "train-a", b = workdir() / "train-b";
        auto ra = run("train " + data_args() + " --emit-scatter --out-dir '" + a.string() + "'");
        REQUIRE_MESSAGE(ra.code == 0, ra.err);
        auto rb = run("train " + data_args() + " --emit-scatter --out-dir '" + b.string() + "'");
        REQUIRE(rb.code == 0);
        const auto run_a = only_run_dir(a), run_b = only_run_dir(b);
        CHECK(slurp(run_a / "report.tsv") == slurp(run_b / "report.tsv"));
        CHECK(slurp(run_a / "report.json") == slurp(run_b / "report.json"));
        CHECK(ra.out == slurp(run_a / "report.tsv"));
        CHECK(ra.out.rfind("repeat\t", 0) == 0);
        CHECK(fs::exists(run_a / "config.json"));
        CHECK(fs::exists(run_a / "repeat-0" / "train_log.tsv"));
        CHECK(fs::exists(run_a / "repeat-0" / "scatter.tsv"));
        const auto ckpt = run_a / "repeat-0" / "checkpoint.pt";
        REQUIRE(fs::exists(ckpt));

        auto ev = run("eval --checkpoint '" + ckpt.string() + "' --dataset-root '" + fixture().root.string() +
                      "' --format generic --out-dir '" + (workdir() / "eval").string() + "'");
        CHECK_MESSAGE(ev.code == 0, ev.err);
        CHECK(ev.out.find("\nmean\t15\t") != std::string::npos);

        // SR identical to LR: the difference features vanish.
        const auto img = (fixture().root / "sr" / "c000_m00.png").string();
        const auto pred_dir = workdir() / "predict";
        auto pr = run("predict --checkpoint '" + ckpt.string() + "' --sr '" + img + "' --lr '" + img +
                      "' --scale 2 --dump-maps --out-dir '" + pred_dir.string() + "'");
        REQUIRE_MESSAGE(pr.code == 0, pr.err);
        auto record = nlohmann::json::parse(pr.out);
        CHECK(std::isfinite(record["score"].get<double>()));
        const auto maps = only_run_dir(pred_dir) / "maps";
        for (int k = 0; k < 5; ++k) {
            auto rec = nlohmann::json::parse(slurp(maps / ("crop-" + std::to_string(k) + ".json")));
            CHECK(rec["tensors"]["f_diff_global"]["max_abs"].get<double>() == 0.0);
            CHECK(rec["tensors"]["f_diff_local"]["max_abs"].get<double>() == 0.0);
            CHECK(rec["tensors"]["f_diff_global"]["shape"] == nlohmann::json::array({256, 28, 28}));
            CHECK(rec["s_p"].size() == 28);

            const auto bytes = slurp(maps / ("crop-" + std::to_string(k) + ".pt"));
            auto dict = torch::pickle_load(std::vector<char>(bytes.begin(), bytes.end())).toGenericDict();
            auto diff = dict.at("f_diff_local").toTensor();
            CHECK(diff.abs().max().item<float>() == 0.0f);
            CHECK(dict.at("w_p").toTensor().sizes() == torch::IntArrayRef({1, 28, 28}));
        }

        // Below the crop size.
        const auto small = (workdir() / "small.png").string();
        save_image(torch::rand({100, 100, 3}), small);
        auto tiny = run("predict --checkpoint '" + ckpt.string() + "' --sr '" + small + "' --lr '" + small +
                        "' --scale 2");
        CHECK(tiny.code == 2);
        CHECK(tiny.err.find("crop size") != std::string::npos);
    }

    TEST_CASE("missing dataset root exits with a data error")
    {
        auto r = run("train --config '" + fixture().config.string() +
                     "' --dataset-root /nonexistent/pfiqa --format generic --out-dir '" +
                     (workdir() / "missing").string() + "'");
        CHECK(r.code == 2);
        CHECK(r.err.find("missing file") != std::string::npos);
    }

    TEST_CASE("usage and configuration errors exit with 1")
    {
        CHECK(run("ablate --axis bogus").code == 1);
        CHECK(run("train --lr -1").code == 1);
        CHECK(run("").code == 1);
        CHECK(run("--help").code == 0);
        const auto bad = workdir() / "bad.json";
        std::ofstream(bad) << R"({"optim": {"learning_rte": 0.1}})";
        auto r = run("train --config '" + bad.string() + "'");
        CHECK(r.code == 1);
        CHECK(r.err.find("learning_rte") != std::string::npos);
    }

    TEST_CASE("ablate --count-only prints the fusion rows")
    {
        auto r = run("ablate --axis fusion --count-only --out-dir '" + (workdir() / "ablate").string() + "'");
        REQUIRE_MESSAGE(r.code == 0, r.err);
        for (const char* label : {"ResNet-only", "ViT-only", "Concatenation", "Adaptive Fusion"})
            CHECK(r.out.find(label) != std::string::npos);
        CHECK(fs::exists(only_run_dir(workdir() / "ablate") / "ablation-fusion.tsv"));
    }
}
