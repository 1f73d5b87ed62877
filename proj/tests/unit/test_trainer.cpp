#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "decontext/attack.hpp"
#include "decontext/errors.hpp"
#include "decontext/trainer.hpp"
#include "fixtures.hpp"

using namespace decontext;
using decontext::testing::bitwise_equal;

namespace {

struct Moments {
  double mean = 0, se = 0;
};

Moments moments(const std::vector<double>& xs) {
  double s = 0, s2 = 0;
  for (double x : xs) s += x;
  const double mu = s / static_cast<double>(xs.size());
  for (double x : xs) s2 += (x - mu) * (x - mu);
  const double var = s2 / static_cast<double>(xs.size() - 1);
  return {mu, std::sqrt(var / static_cast<double>(xs.size()))};
}

}  // namespace

TEST_CASE("flow matching loss of an exact velocity is zero") {
  Rng rng(1, "test/stub");
  Tensor x = decontext::testing::uniform_image(rng), eps = rng.normal_tensor({3, 16, 16});
  Tensor v(x.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = eps[i] - x[i];
  Graph<float> g;
  CHECK(flow_matching_loss(g.constant(v), x, eps).value().item() == 0.0f);
  CHECK_THROWS_AS(flow_matching_loss(g.constant(v), x, Tensor({3, 8, 8})), ShapeError);
}

TEST_CASE("untrained model has positive flow loss") {
  Model m = Model::initialized(ModelConfig{}, 2);
  Rng data(0, "unused"), noise(2, "test/noise");
  auto s = gen_sample({4, 1}, 12, data);
  for (int t : {0, 500, 1000}) CHECK(flow_loss(m, s, t, noise) > 0.0);
  CHECK_THROWS_AS(flow_loss(m, s, 1001, noise), RangeError);
}

TEST_CASE("high-noise loss with a Gaussian stand-in matches the attack-time form") {
  // At t = T the latent no longer depends on x, so replacing the clean target
  // by noise in the training loss gives the same distribution as the attack's
  // stand-in construction. Two independent 1000-draw means must agree.
  Model m = Model::initialized(ModelConfig{}, 3);
  const Tensor ctx = render_context({6, 2});
  const int big_t = m.config().timesteps;
  const std::size_t n = 1000;
  AttackConfig cfg;
  cfg.t_low = cfg.t_high = big_t;
  cfg = cfg.resolved(m.config());

  std::vector<double> train_side, attack_side;
  const Rng rng(3, "test/stand-in");
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = rng.derive("draw", i);
    SyntheticSample s;
    s.context_image = ctx;
    s.prompt_id = r.uniform_int(0, kPrompts - 1);
    s.target_image = r.derive("x").normal_tensor({3, 16, 16});
    const Tensor eps = r.derive("eps").normal_tensor({3, 16, 16});
    Graph<float> g;
    train_side.push_back(flow_loss(g, m, s, big_t, eps).value().item());
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto d = draw_attack_sample(cfg, m.config(), i);
    auto v = forward_velocity(m, stand_in_latent(d, big_t), d.t, ctx, d.prompt, false, false).velocity;
    Graph<float> g;
    attack_side.push_back(flow_matching_loss(g.constant(v), d.stand_in, d.noise).value().item());
  }
  const auto a = moments(train_side), b = moments(attack_side);
  CHECK(std::abs(a.mean - b.mean) < 3.0 * std::hypot(a.se, b.se));
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.learning_rate = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.model.image_side = 8;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.steps = 1100;
  c.learning_rate = 1.0;
  CHECK(learning_rate_at(c, 1) == doctest::Approx(0.01));
  CHECK(learning_rate_at(c, 50) == doctest::Approx(0.5));
  CHECK(learning_rate_at(c, 100) == doctest::Approx(1.0));
  CHECK(learning_rate_at(c, 600) == doctest::Approx(kLrFloor + (1 - kLrFloor) * 0.5));
  CHECK(learning_rate_at(c, 1100) == doctest::Approx(kLrFloor));
  for (std::uint64_t s = 101; s < 1100; ++s) CHECK(learning_rate_at(c, s + 1) <= learning_rate_at(c, s));
}

TEST_CASE("one training step barely moves the loss and round-trips") {
  TrainConfig c;
  c.steps = 1;
  c.batch = 2;
  auto dir = decontext::testing::scratch_dir("train-one");
  c.checkpoint_path = dir / "ck";
  c.log_path = dir / "log.csv";
  auto res = train(c);
  REQUIRE(res.log.size() == 1);
  Model initial = Model::initialized(c.model, c.seed);
  Model trained = Checkpoint::load(c.checkpoint_path).to_model();
  const auto ids = held_out_identities();
  const double before = mean_flow_loss(initial, ids, 32, 5);
  const double after = mean_flow_loss(trained, ids, 32, 5);
  CHECK(std::abs(after - before) < 0.05 * before);

  std::ifstream in(c.log_path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "step,loss");
  CHECK(row.rfind("1,", 0) == 0);
}

TEST_CASE("training is deterministic") {
  TrainConfig c;
  c.steps = 3;
  c.batch = 2;
  c.seed = 9;
  auto a = train(c), b = train(c);
  for (const auto& [name, t] : a.checkpoint.parameters) CHECK(bitwise_equal(t, b.checkpoint.parameters.at(name)));
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].loss == b.log[i].loss);
  c.seed = 10;
  auto other = train(c);
  CHECK_FALSE(bitwise_equal(a.checkpoint.parameters.at("final.w"), other.checkpoint.parameters.at("final.w")));
}

TEST_CASE("divergence keeps the last good parameters") {
  TrainConfig c;
  c.steps = 20;
  c.batch = 1;
  c.learning_rate = 1e30;
  auto dir = decontext::testing::scratch_dir("diverge");
  c.checkpoint_path = dir / "ck";
  CHECK_THROWS_AS(train(c), DivergenceError);
  auto ck = Checkpoint::load(c.checkpoint_path);
  for (const auto& [name, t] : ck.parameters) CHECK(t.all_finite());
}

TEST_CASE("progress sees every step") {
  TrainConfig c;
  c.steps = 4;
  c.batch = 1;
  std::vector<std::uint64_t> seen;
  train(c, [&](const TrainStep& s) { seen.push_back(s.step); });
  CHECK(seen == std::vector<std::uint64_t>{1, 2, 3, 4});
}
