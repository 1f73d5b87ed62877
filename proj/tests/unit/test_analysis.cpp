#include <doctest.h>

#include <fstream>
#include <sstream>

#include "decontext/analysis.hpp"
#include "decontext/attack.hpp"
#include "decontext/errors.hpp"
#include "fixtures.hpp"

using namespace decontext;

namespace {

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string field; std::getline(ss, field, ',');) out.push_back(field);
  return out;
}

}  // namespace

TEST_CASE("timestep grid") {
  auto grid = timestep_grid(1000, 50);
  CHECK(grid.size() == 21);
  CHECK(grid.front() == 0);
  CHECK(grid.back() == 1000);
  CHECK(timestep_grid(1000, 300) == std::vector<int>{0, 300, 600, 900, 1000});
  CHECK_THROWS_AS(timestep_grid(1000, 0), RangeError);
}

TEST_CASE("gradient profile") {
  const Model model = Model::initialized(ModelConfig{}, 1);
  const std::vector<Tensor> images{render_context({1, 2}), render_context({8, 5})};
  const std::vector<int> ts{0, 400, 1000};

  SUBCASE("severed context has zero context gradient") {
    auto p = timestep_gradient_profile(model, images, ts, 0, {3, true});
    for (std::size_t i = 0; i < ts.size(); ++i) {
      CHECK(p.g_ctx[i] == 0.0);
      CHECK(p.g_tgt[i] > 0.0);
    }
  }
  SUBCASE("deterministic and well formed") {
    auto a = timestep_gradient_profile(model, images, ts, 4, {3, false});
    auto b = timestep_gradient_profile(model, images, ts, 4, {3, false});
    CHECK(a.g_tgt == b.g_tgt);
    CHECK(a.g_ctx == b.g_ctx);
    CHECK(a.n_samples == 2);
    CHECK(a.timesteps == ts);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      CHECK(a.g_ctx[i] > 0.0);
      CHECK(a.g_tgt[i] > 0.0);
    }
    auto c = timestep_gradient_profile(model, images, ts, 4, {4, false});
    CHECK(c.g_tgt != a.g_tgt);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(timestep_gradient_profile(model, {}, ts, 0), RangeError);
    CHECK_THROWS_AS(timestep_gradient_profile(model, images, {}, 0), RangeError);
  }
}

TEST_CASE("gradient ratio") {
  GradientProfile p;
  p.timesteps = {0, 50, 100, 900, 1000};
  p.g_tgt = {1, 2, 4, 1, 2};
  p.g_ctx = {1, 1, 1, 3, 8};
  CHECK(gradient_ratio(p, 0, 100) == doctest::Approx((1 + 0.5 + 0.25) / 3));
  CHECK(gradient_ratio(p, 900, 1000) == doctest::Approx(3.5));
  CHECK_THROWS_AS(gradient_ratio(p, 200, 800), RangeError);
}

TEST_CASE("block scan") {
  SUBCASE("uniform attention reports the context share of keys") {
    Model stub{ModelConfig{}};  // all weights zero: every score is equal
    Rng rng(1, "test/scan");
    auto scan = blockwise_ctx_scan(stub, render_context({0, 0}), 0, 1000, rng);
    REQUIRE(scan.r_ctx.size() == 6);
    for (double r : scan.r_ctx) CHECK(r == doctest::Approx(64.0 / 136.0).epsilon(1e-6));
  }
  SUBCASE("agrees with context_proportion per block and partitions the mass") {
    Model model = Model::initialized(ModelConfig{}, 2);
    const Tensor img = render_context({3, 3});
    Rng a(2, "test/scan"), b(2, "test/scan");
    auto scan = blockwise_ctx_scan(model, img, 7, 990, a, "attacked");
    CHECK(scan.condition == "attacked");

    AttackDraw d;
    d.t = 990;
    d.prompt = 7;
    d.stand_in = b.normal_tensor({3, 16, 16});
    d.noise = b.normal_tensor({3, 16, 16});
    auto records = forward_velocity(model, stand_in_latent(d, 1000), 990, img, 7, true, false).records;
    for (std::size_t blk = 0; blk < 6; ++blk) {
      CHECK(scan.block_ids[blk] == blk);
      CHECK(std::abs(scan.r_ctx[blk] - context_proportion(records, std::vector<std::size_t>{blk})) < 1e-6);
      CHECK((scan.r_ctx[blk] >= 0.0 && scan.r_ctx[blk] <= 1.0));
      CHECK(std::abs(scan.r_ctx[blk] + scan.text_share[blk] + scan.target_share[blk] - 1.0) < 1e-5);
    }
  }
  SUBCASE("averaging") {
    BlockScan x, y;
    x.block_ids = y.block_ids = {0, 1};
    x.kinds = y.kinds = {BlockKind::kDouble, BlockKind::kSingle};
    x.r_ctx = {0.2, 0.4};
    y.r_ctx = {0.4, 0.8};
    x.text_share = y.text_share = x.target_share = y.target_share = {0, 0};
    auto avg = average_scans({x, y});
    CHECK(avg.r_ctx[0] == doctest::Approx(0.3));
    CHECK(avg.r_ctx[1] == doctest::Approx(0.6));
    CHECK(mean_r_ctx(avg) == doctest::Approx(0.45));
    y.block_ids = {0, 2};
    CHECK_THROWS_AS(average_scans({x, y}), ShapeError);
    CHECK_THROWS_AS(average_scans({}), RangeError);
  }
}

TEST_CASE("csv export") {
  auto dir = decontext::testing::scratch_dir("csv");

  SUBCASE("profile rows round trip") {
    GradientProfile p;
    p.timesteps = timestep_grid(1000, 50);
    for (std::size_t i = 0; i < p.timesteps.size(); ++i) {
      p.g_tgt.push_back(1.0 / (3.0 + static_cast<double>(i)));
      p.g_ctx.push_back(std::sqrt(2.0) * static_cast<double>(i));
    }
    export_csv(p, dir / "p.csv");
    auto lines = read_lines(dir / "p.csv");
    REQUIRE(lines.size() == 22);
    CHECK(lines[0] == "t,g_tgt,g_ctx");
    for (std::size_t i = 0; i < p.timesteps.size(); ++i) {
      auto f = split(lines[i + 1]);
      CHECK(std::stoi(f[0]) == p.timesteps[i]);
      CHECK(std::stof(f[1]) == static_cast<float>(p.g_tgt[i]));
      CHECK(std::stof(f[2]) == static_cast<float>(p.g_ctx[i]));
    }
  }
  SUBCASE("scans") {
    BlockScan s;
    s.block_ids = {0, 1, 2};
    s.kinds = {BlockKind::kDouble, BlockKind::kSingle, BlockKind::kSingle};
    s.r_ctx = {0.1, 0.2, 1.0 / 3.0};
    s.condition = "clean";
    BlockScan t = s;
    t.condition = "attacked";
    export_csv(std::vector<BlockScan>{s, t}, dir / "s.csv");
    auto lines = read_lines(dir / "s.csv");
    REQUIRE(lines.size() == 7);
    CHECK(lines[0] == "block,kind,r_ctx,condition");
    CHECK(lines[1].rfind("0,double,", 0) == 0);
    auto f = split(lines[6]);
    CHECK(f[1] == "single");
    CHECK(std::stof(f[2]) == static_cast<float>(1.0 / 3.0));
    CHECK(f[3] == "attacked");
  }
  SUBCASE("reports, including the empty batch") {
    export_csv(std::vector<ReportRow>{}, dir / "empty.csv");
    CHECK(read_lines(dir / "empty.csv") == std::vector<std::string>{"run,similarity,match,mse,linf"});
    IdentityReport r{0.75, true, 0.01, 0.1};
    export_csv(std::vector<ReportRow>{{"clean", r}}, dir / "r.csv");
    auto f = split(read_lines(dir / "r.csv").at(1));
    CHECK(f == std::vector<std::string>{"clean", "0.75", "1", "0.01", "0.1"});
  }
  SUBCASE("unwritable path") {
    CHECK_THROWS_AS(export_csv(std::vector<ReportRow>{}, dir / "missing" / "x.csv"), IoError);
  }
}

TEST_CASE("gnuplot scripts reference their data") {
  auto prof = gnuplot_profile_script("out/grad.csv", "out/grad.png");
  CHECK(prof.find("'out/grad.csv'") != std::string::npos);
  CHECK(prof.find("'out/grad.png'") != std::string::npos);
  auto scan = gnuplot_scan_script({"a/scan_clean.csv", "a/scan_attacked.csv"}, "a/scan.png");
  CHECK(scan.find("'a/scan_clean.csv'") != std::string::npos);
  CHECK(scan.find("title 'scan_attacked'") != std::string::npos);
}
