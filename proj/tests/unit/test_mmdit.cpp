#include <doctest.h>

#include <numeric>

#include "decontext/errors.hpp"
#include "decontext/model.hpp"
#include "fixtures.hpp"

using namespace decontext;
using decontext::testing::bitwise_equal;
using decontext::testing::max_abs_diff;
using decontext::testing::uniform_image;

namespace {

Tensor velocity(Model& m, const Tensor& z, int t, const Tensor& ctx, std::size_t prompt, bool zero_context) {
  return forward_velocity(m, z, t, ctx, prompt, false, zero_context).velocity;
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.sequence_length() == 136);
  c.heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.image_side = 15;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.double_blocks = c.single_blocks = 0;
  CHECK_THROWS_AS(Model{c}, ConfigError);
}

TEST_CASE("segment layout") {
  auto lay = layout_for(ModelConfig{});
  CHECK(lay.text_len == 8);
  CHECK(lay.target_len == 64);
  CHECK(lay.context_len == 64);
  CHECK(lay.at(0) == Segment::kText);
  CHECK(lay.at(8) == Segment::kTarget);
  CHECK(lay.at(71) == Segment::kTarget);
  CHECK(lay.at(72) == Segment::kContext);
  CHECK(lay.at(135) == Segment::kContext);
}

TEST_CASE("embed_prompt") {
  Model m = Model::initialized(ModelConfig{}, 1);
  Graph<float> g;
  auto a = m.embed_prompt(g, 0);
  auto b = m.embed_prompt(g, 0);
  auto c = m.embed_prompt(g, 1);
  CHECK(a.shape() == Shape{8, 32});
  CHECK(bitwise_equal(a.value(), b.value()));
  CHECK(max_abs_diff(a.value(), c.value()) > 0);
  CHECK_THROWS_AS(m.embed_prompt(g, 60), RangeError);
}

TEST_CASE("patchify") {
  ModelConfig cfg;
  Model m = Model::initialized(cfg, 2);
  Rng rng(3, "test/patchify");

  SUBCASE("token count") {
    Graph<float> g;
    Tensor img = uniform_image(rng);
    CHECK(m.patchify(g, g.input(img)).shape() == Shape{64, 32});
  }
  SUBCASE("zero image gives the projection bias") {
    Graph<float> g;
    Tensor zero({3, 16, 16});
    auto tok = m.patchify(g, g.input(zero));
    const auto& bias = m.param("img.in.b");
    for (std::size_t r = 0; r < 64; ++r) {
      for (std::size_t k = 0; k < 32; ++k) CHECK(tok.value()[r * 32 + k] == bias[k]);
    }
  }
  SUBCASE("identity projection round trip") {
    ModelConfig c;
    c.hidden_dim = 12;  // equals 3 * patch * patch
    c.heads = 2;
    Model id(c);
    auto& w = id.param("img.in.w");
    for (std::size_t i = 0; i < 12; ++i) w[i * 12 + i] = 1.0f;
    Graph<float> g;
    Tensor img = uniform_image(rng);
    auto back = id.unpatchify(g, id.patchify(g, g.input(img)));
    CHECK(max_abs_diff(back.value(), img) < 1e-6);
  }
  SUBCASE("pure rearrangement is invertible") {
    Tensor img = uniform_image(rng);
    CHECK(bitwise_equal(assemble_patches(cfg, extract_patches(cfg, img)), img));
  }
  SUBCASE("shape mismatch") {
    Graph<float> g;
    Tensor wrong({3, 8, 8});
    CHECK_THROWS_AS(m.patchify(g, g.input(wrong)), ShapeError);
    CHECK_THROWS_AS(extract_patches(cfg, wrong), ShapeError);
  }
}

TEST_CASE("forward errors") {
  Model m = Model::initialized(ModelConfig{}, 4);
  Rng rng(4, "test/forward-errors");
  Tensor z = rng.normal_tensor({3, 16, 16}), ctx = uniform_image(rng);
  CHECK_THROWS_AS(velocity(m, z, -1, ctx, 0, false), RangeError);
  CHECK_THROWS_AS(velocity(m, z, 1001, ctx, 0, false), RangeError);
  CHECK_THROWS_AS(velocity(m, z, 10, Tensor({3, 8, 8}), 0, false), ShapeError);
  CHECK_THROWS_AS(velocity(m, z, 10, ctx, 60, false), RangeError);
}

TEST_CASE("recorded attention is row-stochastic") {
  Model m = Model::initialized(ModelConfig{}, 5);
  Rng rng(5, "test/rows");
  for (bool zero_context : {false, true}) {
    auto res = forward_velocity(m, rng.normal_tensor({3, 16, 16}), static_cast<int>(rng.uniform_int(0, 1000)),
                                uniform_image(rng), rng.uniform_int(0, 59), true, zero_context);
    REQUIRE(res.records.size() == 6);
    for (std::size_t b = 0; b < res.records.size(); ++b) {
      const auto& r = res.records[b];
      CHECK(r.block_id == b);
      CHECK(r.kind == (b < 2 ? BlockKind::kDouble : BlockKind::kSingle));
      REQUIRE(r.maps.shape() == Shape{4, 136, 136});
      for (std::size_t row = 0; row < 4 * 136; ++row) {
        double total = 0;
        for (std::size_t k = 0; k < 136; ++k) {
          const float a = r.maps[row * 136 + k];
          CHECK((a >= 0.0f && a <= 1.0f));
          total += a;
        }
        CHECK(std::abs(total - 1.0) < 1e-5);
      }
    }
  }
}

TEST_CASE("zero_context removes context keys for target and text queries") {
  Model m = Model::initialized(ModelConfig{}, 6);
  Rng rng(6, "test/mask");
  auto res = forward_velocity(m, rng.normal_tensor({3, 16, 16}), 500, uniform_image(rng), 3, true, true);
  for (const auto& r : res.records) {
    for (std::size_t h = 0; h < 4; ++h) {
      for (std::size_t q = 0; q < 72; ++q) {
        for (std::size_t k = 72; k < 136; ++k) REQUIRE(r.maps[(h * 136 + q) * 136 + k] == 0.0f);
      }
    }
  }
}

TEST_CASE("zero_context output is invariant to the context image") {
  Model m = Model::initialized(ModelConfig{}, 7);
  Rng rng(7, "test/invariance");
  for (int pair = 0; pair < 20; ++pair) {
    Tensor z = rng.normal_tensor({3, 16, 16});
    const int t = static_cast<int>(rng.uniform_int(0, 1000));
    const auto p = rng.uniform_int(0, 59);
    Tensor a = uniform_image(rng), b = uniform_image(rng);
    CHECK(max_abs_diff(velocity(m, z, t, a, p, true), velocity(m, z, t, b, p, true)) < 1e-5);
    CHECK(max_abs_diff(velocity(m, z, t, a, p, false), velocity(m, z, t, b, p, false)) > 0);
  }
}

TEST_CASE("context couples to the target only through attention") {
  // Permuting the context patches together with their positional rows is a
  // relabelling of keys, which attention is invariant to.
  ModelConfig cfg;
  Model m = Model::initialized(cfg, 8);
  Rng rng(8, "test/permute");
  Tensor z = rng.normal_tensor({3, 16, 16}), ctx = uniform_image(rng);
  std::vector<std::size_t> perm(cfg.patches());
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);

  Tensor patches = extract_patches(cfg, ctx), moved(patches.shape());
  Model pm = m;
  const auto& pos = m.param("ctx.pos");
  auto& ppos = pm.param("ctx.pos");
  const std::size_t pd = cfg.patch_dim(), d = cfg.hidden_dim;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (std::size_t k = 0; k < pd; ++k) moved[perm[i] * pd + k] = patches[i * pd + k];
    for (std::size_t k = 0; k < d; ++k) ppos[perm[i] * d + k] = pos[i * d + k];
  }
  const Tensor reference = velocity(m, z, 700, ctx, 5, false);
  CHECK(max_abs_diff(velocity(pm, z, 700, assemble_patches(cfg, moved), 5, false), reference) < 1e-5);
  // Moving the content without its positions is a different input.
  CHECK(max_abs_diff(velocity(m, z, 700, assemble_patches(cfg, moved), 5, false), reference) > 1e-4);
}

TEST_CASE("gradient reaches context pixels only without the intervention") {
  Model m = Model::initialized(ModelConfig{}, 9);
  Rng rng(9, "test/ctx-grad");
  Tensor z = rng.normal_tensor({3, 16, 16});
  for (bool zero_context : {false, true}) {
    Tensor ctx = uniform_image(rng);
    ctx.set_requires_grad(true);
    Graph<float> g;
    auto res = m.forward(g, g.constant(z), 900, g.input(ctx), 2, {false, zero_context});
    g.backward(mean(multiply(res.velocity, res.velocity)));
    double norm = 0;
    for (float v : ctx.grad()) norm += static_cast<double>(v) * v;
    if (zero_context) {
      CHECK(norm == 0.0);
    } else {
      CHECK(norm > 0.0);
    }
  }
}

TEST_CASE("forward leaves parameters without gradient state") {
  Model m = Model::initialized(ModelConfig{}, 10);
  Rng rng(10, "test/frozen");
  Model before = m;
  velocity(m, rng.normal_tensor({3, 16, 16}), 100, uniform_image(rng), 0, false);
  for (const auto& [name, t] : m.parameters()) {
    CHECK(bitwise_equal(t, before.param(name)));
    CHECK_FALSE(t.has_grad());
  }
}

TEST_CASE("sample") {
  Model m = Model::initialized(ModelConfig{}, 11);
  Rng data(11, "test/sample");
  Tensor ctx = uniform_image(data);

  SUBCASE("deterministic under a fixed seed") {
    Rng a(3, "sample"), b(3, "sample");
    CHECK(bitwise_equal(sample(m, ctx, 4, 5, a, false), sample(m, ctx, 4, 5, b, false)));
  }
  SUBCASE("one step is a single Euler step from noise") {
    Rng r(4, "sample");
    Tensor eps = Rng(4, "sample").normal_tensor({3, 16, 16});
    Tensor v = velocity(m, eps, 1000, ctx, 7, false);
    Tensor expect(eps.shape());
    for (std::size_t i = 0; i < eps.numel(); ++i) expect[i] = std::clamp(eps[i] - v[i], 0.0f, 1.0f);
    CHECK(bitwise_equal(sample(m, ctx, 7, 1, r, false), expect));
  }
  SUBCASE("output is a clamped image") {
    Rng r(5, "sample");
    Tensor out = sample(m, ctx, 0, 3, r, false);
    CHECK(out.shape() == Shape{3, 16, 16});
    for (float v : out.data()) CHECK((v >= 0.0f && v <= 1.0f));
  }
  SUBCASE("zero_context ignores the context") {
    Rng a(6, "sample"), b(6, "sample");
    CHECK(bitwise_equal(sample(m, ctx, 1, 4, a, true), sample(m, uniform_image(data), 1, 4, b, true)));
  }
  SUBCASE("invalid steps") {
    Rng r(7, "sample");
    CHECK_THROWS_AS(sample(m, ctx, 0, 0, r, false), RangeError);
  }
}

TEST_CASE("noisy latent endpoints") {
  Rng rng(12, "test/latent");
  Tensor x = uniform_image(rng), eps = rng.normal_tensor({3, 16, 16});
  CHECK(bitwise_equal(noisy_latent(x, eps, 0, 1000), x));
  CHECK(bitwise_equal(noisy_latent(x, eps, 1000, 1000), eps));
  Tensor mid = noisy_latent(x, eps, 250, 1000);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(mid[i] == doctest::Approx(0.75 * x[i] + 0.25 * eps[i]));
  CHECK_THROWS_AS(noisy_latent(x, eps, 1001, 1000), RangeError);
}

TEST_CASE("checkpoint round trip") {
  Model m = Model::initialized(ModelConfig{}, 13);
  CHECK(m.parameter_count() == 76524);
  auto dir = decontext::testing::scratch_dir("checkpoint");
  Checkpoint::from_model(m, {12, 0.5, 3}).save(dir);
  Checkpoint back = Checkpoint::load(dir);
  CHECK(back.config == m.config());
  CHECK(back.meta.steps == 12);
  CHECK(back.meta.seed == 3);
  Model m2 = back.to_model();
  for (const auto& [name, t] : m.parameters()) CHECK(bitwise_equal(t, m2.param(name)));
  CHECK_THROWS_AS(Checkpoint::load(dir / "missing"), IoError);
}

TEST_CASE("f64 model matches f32 model") {
  Model m = Model::initialized(ModelConfig{}, 14);
  ModelD md = m.cast<double>();
  Rng rng(14, "test/f64");
  Tensor z = rng.normal_tensor({3, 16, 16}), ctx = uniform_image(rng);
  Graph<double> g;
  TensorD zd = z.cast<double>(), cd = ctx.cast<double>();
  auto vd = md.forward(g, g.input(zd), 600, g.input(cd), 9).velocity.value().cast<float>();
  CHECK(max_abs_diff(vd, velocity(m, z, 600, ctx, 9, false)) < 1e-4);
}
