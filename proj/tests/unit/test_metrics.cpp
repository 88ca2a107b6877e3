#include "support/doctest_torch.hpp"

#include "pfiqa/metrics.hpp"
#include "support/oracles.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace pfiqa;

TEST_SUITE("metrics")
{
    TEST_CASE("plcc and srcc match definitional oracles on tied random vectors")
    {
        std::mt19937_64 rng(7);
        std::uniform_int_distribution<int> len(3, 60);
        std::uniform_int_distribution<int> levels(2, 12);
        int checked = 0;
        for (int trial = 0; trial < 1000; ++trial) {
            const auto n = static_cast<size_t>(len(rng));
            auto a = oracle::tied_vector(rng, n, levels(rng));
            auto b = oracle::tied_vector(rng, n, levels(rng));
            const auto ca = std::count(a.begin(), a.end(), a[0]);
            const auto cb = std::count(b.begin(), b.end(), b[0]);
            if (ca == static_cast<long>(n) || cb == static_cast<long>(n))
                continue;
            CHECK(std::abs(plcc(a, b) - oracle::pearson(a, b)) <= 1e-12);
            CHECK(std::abs(srcc(a, b) - oracle::spearman(a, b)) <= 1e-12);
            ++checked;
        }
        CHECK(checked > 900);
    }

    TEST_CASE("fractional ranks average tied positions")
    {
        std::vector<double> x{3.0, 1.0, 3.0, 2.0, 3.0};
        auto r = fractional_ranks(x);
        CHECK(r == std::vector<double>({4.0, 1.0, 4.0, 2.0, 4.0}));
        CHECK(r == oracle::ranks(x));
    }

    TEST_CASE("srcc is invariant under strictly increasing transforms")
    {
        std::mt19937_64 rng(11);
        std::normal_distribution<double> nd;
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<double> a(40), b(40);
            for (size_t i = 0; i < a.size(); ++i) {
                a[i] = nd(rng);
                b[i] = a[i] + nd(rng);
            }
            const double base = srcc(a, b);
            std::vector<double> t1, t2;
            for (double v : a) {
                t1.push_back(std::exp(v));
                t2.push_back(v * v * v + 5.0 * v);
            }
            CHECK(srcc(t1, b) == doctest::Approx(base).epsilon(1e-12));
            CHECK(srcc(t2, b) == doctest::Approx(base).epsilon(1e-12));
        }
    }

    TEST_CASE("perfect and reversed predictions")
    {
        std::vector<double> mos{0.1, 0.4, 0.2, 0.9};
        CHECK(plcc(mos, mos) == doctest::Approx(1.0));
        CHECK(srcc(mos, mos) == doctest::Approx(1.0));
        std::vector<double> rev{-0.1, -0.4, -0.2, -0.9};
        CHECK(srcc(rev, mos) == doctest::Approx(-1.0));
    }

    TEST_CASE("degenerate and malformed inputs throw")
    {
        std::vector<double> c{0.5, 0.5, 0.5}, v{0.1, 0.2, 0.3};
        CHECK_THROWS_AS(plcc(c, v), DegenerateInputError);
        CHECK_THROWS_AS(srcc(v, c), DegenerateInputError);
        CHECK_THROWS_AS(plcc(std::vector<double>({1, 2}), std::vector<double>({1, 2})), ShapeError);
        CHECK_THROWS_AS(plcc(v, std::vector<double>({1, 2, 3, 4})), ShapeError);
    }

    TEST_CASE("logistic fit recovers a known mapping")
    {
        LogisticMap truth{0.9, 0.1, 0.4, 0.15};
        std::vector<double> x, y;
        for (int i = 0; i < 50; ++i) {
            x.push_back(i / 49.0);
            y.push_back(truth(x.back()));
        }
        auto fit = fit_logistic(x, y);
        for (double v : x)
            CHECK(fit(v) == doctest::Approx(truth(v)).epsilon(1e-6));
        CHECK(plcc_logistic(x, y) == doctest::Approx(1.0).epsilon(1e-9));
    }

    TEST_CASE("psnr")
    {
        auto a = torch::rand({16, 16, 3}, torch::kDouble);
        CHECK(std::isinf(psnr(a, a)));
        auto b = a + 0.1;
        CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));
        CHECK_THROWS_AS(psnr(a, torch::rand({8, 8, 3})), ShapeError);
    }

    TEST_CASE("ssim matches a direct-window oracle")
    {
        torch::manual_seed(3);
        auto a = torch::rand({23, 19, 3}, torch::kDouble);
        auto b = (a + 0.08 * torch::randn({23, 19, 3}, torch::kDouble)).clamp(0.0, 1.0);
        auto to_rows = [](const torch::Tensor& rgb) {
            auto acc = rgb.accessor<double, 3>();
            std::vector<std::vector<double>> g(static_cast<size_t>(rgb.size(0)),
                                               std::vector<double>(static_cast<size_t>(rgb.size(1))));
            for (int64_t y = 0; y < rgb.size(0); ++y)
                for (int64_t x = 0; x < rgb.size(1); ++x)
                    g[y][x] = 0.299 * acc[y][x][0] + 0.587 * acc[y][x][1] + 0.114 * acc[y][x][2];
            return g;
        };
        CHECK(ssim(a, b) == doctest::Approx(oracle::ssim_gray(to_rows(a), to_rows(b))).epsilon(1e-10));
        CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK_THROWS_AS(ssim(torch::rand({8, 8}), torch::rand({8, 8})), ShapeError);
    }

    TEST_CASE("report aggregation and formatting")
    {
        std::vector<double> p1{0.1, 0.5, 0.3, 0.9}, m1{0.2, 0.4, 0.3, 0.8};
        std::vector<double> p2{0.9, 0.5, 0.3, 0.1}, m2{0.2, 0.4, 0.3, 0.8};
        auto r1 = make_report(p1, m1), r2 = make_report(p2, m2);
        auto agg = aggregate_reports({r1, r2});
        REQUIRE(agg.repeats.size() == 2);
        CHECK(agg.plcc == doctest::Approx((r1.plcc + r2.plcc) / 2));
        CHECK(agg.n_samples == 8);

        auto single = aggregate_reports({r1});
        CHECK(single.plcc == r1.plcc);
        CHECK(single.srcc == r1.srcc);

        const auto table = format_report_table(agg);
        CHECK(table.rfind("repeat\tn_samples\tplcc\tsrcc\n", 0) == 0);
        CHECK(std::count(table.begin(), table.end(), '\n') == 4);
        CHECK(table.find("\nmean\t8\t") != std::string::npos);
        CHECK(report_to_json(agg)["repeats"].size() == 2);
    }

    TEST_CASE("scatter file")
    {
        const auto path = std::filesystem::temp_directory_path() / "pfiqa_scatter_test.tsv";
        std::vector<double> p{0.25, 0.5}, m{0.3, 0.6};
        write_scatter(path.string(), p, m);
        std::ifstream in(path);
        std::string header, line;
        std::getline(in, header);
        std::getline(in, line);
        CHECK(header[0] == '#');
        CHECK(line == format_number(0.25) + "\t" + format_number(0.3));
        std::filesystem::remove(path);
    }
}
