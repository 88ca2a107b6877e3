#include "support/doctest_torch.hpp"

#include "pfiqa/data.hpp"
#include "pfiqa/metrics.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

using namespace pfiqa;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name)
{
    auto p = fs::temp_directory_path() / ("pfiqa_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<Sample> labelled_samples(int contents, int methods)
{
    std::vector<Sample> out;
    for (int c = 0; c < contents; ++c)
        for (int m = 0; m < methods; ++m) {
            Sample s;
            s.content_id = "c" + std::to_string(c);
            s.method_id = "m" + std::to_string(m);
            out.push_back(s);
        }
    return out;
}

SyntheticSpec small_spec()
{
    SyntheticSpec s;
    s.n_contents = 3;
    s.methods_per_content = 2;
    s.image_size = 64;
    s.seed = 5;
    return s;
}

}  // namespace

TEST_SUITE("data")
{
    TEST_CASE("uniform helpers stay in range")
    {
        std::mt19937_64 rng(1);
        std::vector<int> hist(7, 0);
        for (int i = 0; i < 7000; ++i) {
            auto k = uniform_index(rng, 7);
            REQUIRE(k < 7);
            ++hist[k];
            const double u = uniform_unit(rng);
            REQUIRE(u >= 0.0);
            REQUIRE(u < 1.0);
        }
        for (int h : hist)
            CHECK(h > 800);
        auto a = derive_rng(3, {1, 2}), b = derive_rng(3, {1, 2}), c = derive_rng(3, {2, 1});
        CHECK(a() == b());
        CHECK(derive_rng(3, {1, 2})() != c());
    }

    TEST_CASE("manifest round trip, comments and errors")
    {
        auto dir = scratch_dir("manifest");
        std::vector<ManifestRecord> recs{{"sr/a.png", "lr/a.png", 2.0, 0.123456789012345, "c0", "m0"},
                                         {"sr/b.png", "lr/b.png", 4.0, 7.0, "c1", "m1"}};
        write_manifest((dir / "manifest.tsv").string(), recs);
        auto back = read_manifest((dir / "manifest.tsv").string());
        REQUIRE(back.size() == 2);
        CHECK(back[0].raw_label == recs[0].raw_label);
        CHECK(back[1].scale_factor == 4.0);
        CHECK(back[1].method_id == "m1");

        std::ofstream(dir / "bad_label.tsv") << "# header\nsr\tlr\t2\tgood\tc0\tm0\n";
        CHECK_THROWS_WITH_AS(read_manifest((dir / "bad_label.tsv").string()),
                             doctest::Contains("unparseable label"), DataError);
        std::ofstream(dir / "short.tsv") << "sr\tlr\t2\t0.5\n";
        CHECK_THROWS_AS(read_manifest((dir / "short.tsv").string()), DataError);
        CHECK_THROWS_AS(read_manifest((dir / "absent.tsv").string()), MissingFileError);
        fs::remove_all(dir);
    }

    TEST_CASE("label normalization")
    {
        std::vector<double> mos{2.0, 4.0, 3.0};
        CHECK(normalize_labels(mos, false) == std::vector<double>({0.0, 1.0, 0.5}));
        // Ranks: 1 is best and maps to 1.
        std::vector<double> ranks{1.0, 5.0, 3.0};
        CHECK(normalize_labels(ranks, true) == std::vector<double>({1.0, 0.0, 0.5}));
        std::vector<double> flat{3.0, 3.0};
        CHECK_THROWS_AS(normalize_labels(flat, false), DataError);
        CHECK(dataset_profile("wind").rank_labels);
        CHECK_FALSE(dataset_profile("qads").rank_labels);
        CHECK(dataset_profile("realsrq").nominal_samples == 1620);
        CHECK_THROWS_AS(dataset_profile("live"), ConfigError);
    }

    TEST_CASE("missing dataset root")
    {
        DatasetSpec spec;
        spec.format = "generic";
        spec.root = "/nonexistent/pfiqa";
        CHECK_THROWS_WITH_AS(load_dataset(spec), doctest::Contains("missing file"), MissingFileError);
    }

    TEST_CASE("splits are content-disjoint, complete and deterministic")
    {
        auto samples = labelled_samples(12, 3);
        auto a = make_splits(samples, 99, 0.8, 5, true);
        auto b = make_splits(samples, 99, 0.8, 5, true);
        REQUIRE(a.size() == 5);
        std::set<std::vector<size_t>> distinct;
        for (size_t r = 0; r < a.size(); ++r) {
            CHECK(a[r].train == b[r].train);
            CHECK(a[r].test == b[r].test);
            std::set<std::string> train_c, test_c;
            for (auto i : a[r].train)
                train_c.insert(samples[i].content_id);
            for (auto i : a[r].test)
                test_c.insert(samples[i].content_id);
            for (const auto& c : test_c)
                CHECK(train_c.count(c) == 0);
            CHECK(train_c.size() == 10);
            CHECK(a[r].train.size() + a[r].test.size() == samples.size());
            distinct.insert(a[r].train);
        }
        CHECK(distinct.size() > 1);
        auto other = make_splits(samples, 100, 0.8, 5, true);
        bool differs = false;
        for (size_t r = 0; r < 5; ++r)
            differs |= other[r].train != a[r].train;
        CHECK(differs);

        auto flat = make_splits(samples, 1, 0.5, 1, false);
        CHECK(flat[0].train.size() == 18);
        CHECK_THROWS_AS(make_splits(labelled_samples(4, 3), 0), DataError);
        CHECK_THROWS_AS(make_splits(samples, 0, 1.0), ConfigError);
    }

    TEST_CASE("evaluation windows: corners then center")
    {
        auto w = eval_crop_windows(300, 260, 224);
        REQUIRE(w.size() == 5);
        CHECK(w[0] == (CropWindow{0, 0}));
        CHECK(w[1] == (CropWindow{0, 36}));
        CHECK(w[2] == (CropWindow{76, 0}));
        CHECK(w[3] == (CropWindow{76, 36}));
        CHECK(w[4] == (CropWindow{38, 18}));
        CHECK_THROWS_AS(eval_crop_windows(200, 300, 224), ShapeError);
    }

    TEST_CASE("model inputs are the normalized crop")
    {
        Sample s;
        s.sr_image = torch::rand({40, 50, 3});
        s.lr_image_upsampled = torch::rand({40, 50, 3});
        s.scale_factor = 2.0;
        s.mos = 0.3;
        auto in = make_input(s, {3, 7}, 32, false);
        CHECK(in.sr.sizes() == torch::IntArrayRef({3, 32, 32}));
        const double mean[3] = {0.485, 0.456, 0.406}, stdv[3] = {0.229, 0.224, 0.225};
        for (int c = 0; c < 3; ++c) {
            const double raw = s.sr_image[3 + 5][7 + 9][c].item<double>();
            CHECK(in.sr[c][5][9].item<double>() == doctest::Approx((raw - mean[c]) / stdv[c]).epsilon(1e-5));
        }
        auto flipped = make_input(s, {3, 7}, 32, true);
        CHECK(torch::equal(flipped.sr, in.sr.flip({2})));
        CHECK(torch::equal(flipped.lr, in.lr.flip({2})));
        CHECK(*in.mos == 0.3);

        // A random training crop is always one of the valid windows.
        std::mt19937_64 rng(4);
        for (int i = 0; i < 20; ++i) {
            auto t = train_transform(s, rng, 32, true);
            CHECK(t.sr.sizes() == torch::IntArrayRef({3, 32, 32}));
        }
        std::mt19937_64 r1(8), r2(8);
        CHECK(torch::equal(train_transform(s, r1, 32).lr, train_transform(s, r2, 32).lr));
        CHECK_THROWS_AS(make_input(s, {20, 0}, 32, false), ShapeError);
    }

    TEST_CASE("resizing")
    {
        auto img = torch::rand({8, 8, 3});
        CHECK(torch::allclose(resize_bilinear(img, 8, 8), img));
        auto down = resize_area(img, 4, 4);
        CHECK(down[0][0][1].item<float>() ==
              doctest::Approx(img.slice(0, 0, 2).slice(1, 0, 2).select(2, 1).mean().item<float>()));
        CHECK(resize_bilinear(img, 16, 12).sizes() == torch::IntArrayRef({16, 12, 3}));
    }

    TEST_CASE("synthetic degradation")
    {
        std::mt19937_64 rng(2);
        auto hr = synthesize_texture(48, rng);
        CHECK(hr.min().item<float>() >= 0.0f);
        CHECK(hr.max().item<float>() <= 1.0f);
        SyntheticSpec spec;
        auto clean = degrade(hr, 2.0, 0.0, spec, 1);
        CHECK(torch::equal(clean.sample.sr_image, hr));
        CHECK(*clean.sample.mos == 1.0);
        CHECK(clean.lr_native.sizes() == torch::IntArrayRef({24, 24, 3}));
        CHECK(clean.sample.lr_image_upsampled.sizes() == hr.sizes());

        auto heavy = degrade(hr, 4.0, 0.9, spec, 1);
        CHECK(*heavy.sample.mos == doctest::Approx(0.1));
        CHECK(psnr(heavy.sample.sr_image, hr) < psnr(degrade(hr, 4.0, 0.2, spec, 1).sample.sr_image, hr));
        CHECK(torch::equal(heavy.sample.sr_image, degrade(hr, 4.0, 0.9, spec, 1).sample.sr_image));
        CHECK_THROWS_AS(degrade(hr, 1.0, 0.5, spec, 1), RangeError);
        CHECK_THROWS_AS(degrade(hr, 2.0, 1.5, spec, 1), RangeError);
    }

    TEST_CASE("synthetic corpus is deterministic in its seed")
    {
        DatasetSpec spec;
        spec.synthetic = small_spec();
        auto a = load_dataset(spec), b = load_dataset(spec);
        REQUIRE(a.size() == 6);
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(torch::equal(a[i].sr_image, b[i].sr_image));
            CHECK(torch::equal(a[i].lr_image_upsampled, b[i].lr_image_upsampled));
            CHECK(a[i].mos == b[i].mos);
            CHECK(a[i].content_id == "c00" + std::to_string(i / 2));
        }
        spec.synthetic.seed = 6;
        CHECK_FALSE(torch::equal(load_dataset(spec)[0].sr_image, a[0].sr_image));
    }

    TEST_CASE("exported synthetic dataset reloads through the generic format")
    {
        auto dir = scratch_dir("export");
        auto spec = small_spec();
        export_synthetic_dataset(spec, dir.string());
        DatasetSpec generic;
        generic.format = "generic";
        generic.root = dir.string();
        auto loaded = load_dataset(generic);
        DatasetSpec synth;
        synth.synthetic = spec;
        auto mem = load_dataset(synth);
        REQUIRE(loaded.size() == mem.size());
        std::vector<double> a, b;
        for (size_t i = 0; i < mem.size(); ++i) {
            CHECK(loaded[i].content_id == mem[i].content_id);
            CHECK(loaded[i].scale_factor == mem[i].scale_factor);
            // 8-bit quantization is the only loss.
            CHECK((loaded[i].sr_image - mem[i].sr_image).abs().max().item<float>() <= 0.5f / 255.0f + 1e-6f);
            a.push_back(*loaded[i].mos);
            b.push_back(*mem[i].mos);
        }
        CHECK(srcc(a, b) == doctest::Approx(1.0));

        // WIND accepts only ×2/×4/×8.
        auto recs = read_manifest((dir / "manifest.tsv").string());
        for (auto& r : recs)
            r.scale_factor = 3.0;
        write_manifest((dir / "manifest.tsv").string(), recs);
        generic.format = "wind";
        CHECK_THROWS_WITH_AS(load_dataset(generic), doctest::Contains("not part of the wind layout"), DataError);
        generic.format = "qads";
        CHECK_NOTHROW(load_dataset(generic));

        fs::remove(dir / "sr" / "c000_m00.png");
        generic.format = "generic";
        CHECK_THROWS_WITH_AS(load_dataset(generic), doctest::Contains("missing file"), MissingFileError);
        fs::remove_all(dir);
    }
}
