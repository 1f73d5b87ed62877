#include "decontext/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "decontext/errors.hpp"
#include "decontext/io.hpp"

namespace decontext {

void TrainConfig::validate() const {
  model.validate();
  if (model.image_side != kImageSide) throw ConfigError("training data is 16x16; model.image_side must be 16");
  if (model.vocab < kPrompts) throw ConfigError("model.vocab must cover the 60 edit prompts");
  if (steps < 1) throw ConfigError("train.steps must be >= 1");
  if (batch < 1) throw ConfigError("train.batch must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train.learning_rate must be > 0");
  if (!(jitter >= 0.0f) || jitter > 0.5f) throw ConfigError("train.jitter must be in [0, 0.5]");
}

double learning_rate_at(const TrainConfig& config, std::uint64_t step) {
  const double lr = config.learning_rate;
  if (step <= kWarmupSteps && config.steps > kWarmupSteps) {
    return lr * static_cast<double>(step) / static_cast<double>(kWarmupSteps);
  }
  const double span = static_cast<double>(config.steps > kWarmupSteps ? config.steps - kWarmupSteps : config.steps);
  const double done = static_cast<double>(config.steps > kWarmupSteps ? step - kWarmupSteps : step);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, done / span)));
  return lr * (kLrFloor + (1.0 - kLrFloor) * cosine);
}

Var flow_matching_loss(Var velocity, const Tensor& x, const Tensor& noise) {
  if (x.shape() != noise.shape()) {
    throw ShapeError("flow loss: " + shape_to_string(x.shape()) + " vs " + shape_to_string(noise.shape()));
  }
  Tensor target(x.shape());
  for (std::size_t i = 0; i < target.numel(); ++i) target[i] = noise[i] - x[i];
  return squared_error(velocity, velocity.graph().constant(std::move(target)));
}

Var flow_loss(Graph<float>& g, Model& model, const SyntheticSample& sample, int t, const Tensor& noise) {
  const auto z_t = noisy_latent(sample.target_image, noise, t, model.config().timesteps);
  auto res = model.forward(g, g.constant(z_t), t, g.constant(sample.context_image), sample.prompt_id);
  return flow_matching_loss(res.velocity, sample.target_image, noise);
}

double flow_loss(Model& model, const SyntheticSample& sample, int t, Rng& rng) {
  if (t < 0 || t > model.config().timesteps) throw RangeError("timestep " + std::to_string(t) + " out of range");
  const auto noise = rng.normal_tensor(model.config().image_shape());
  Graph<float> g;
  return flow_loss(g, model, sample, t, noise).value().item();
}

namespace {

struct Draw {
  SyntheticSample sample;
  int t = 0;
  Tensor noise;
};

Draw draw_sample(const std::vector<Identity>& pool, Rng rng, int timesteps, float jitter) {
  const auto& id = pool[rng.uniform_int(0, pool.size() - 1)];
  const auto prompt = static_cast<std::size_t>(rng.uniform_int(0, kPrompts - 1));
  const int t = static_cast<int>(rng.uniform_int(0, static_cast<std::uint64_t>(timesteps)));
  Rng jitter_rng = rng.derive("jitter");
  auto sample = gen_sample(id, prompt, jitter_rng, {jitter});
  Rng noise_rng = rng.derive("noise");
  Tensor noise = noise_rng.normal_tensor(sample.target_image.shape());
  return {std::move(sample), t, std::move(noise)};
}

void save_if_requested(const TrainConfig& config, const Model& model, TrainingMeta meta) {
  if (config.checkpoint_path.empty()) return;
  Checkpoint::from_model(model, meta).save(config.checkpoint_path);
}

}  // namespace

TrainResult train(const TrainConfig& config, const TrainProgress& progress) {
  config.validate();
  Model model = Model::initialized(config.model, config.seed);
  model.set_requires_grad(true);
  const auto pool = training_identities();
  const Rng data_rng(config.seed, "train/data");

  std::map<std::string, std::vector<double>> second_moment;
  for (const auto& [name, t] : model.parameters()) second_moment[name].assign(t.numel(), 0.0);

  TrainResult result;
  Model::ParameterMap last_good = model.parameters();
  auto diverge = [&](std::uint64_t step, const std::string& why) {
    Model good(config.model);
    for (auto& [name, t] : good.parameters()) t = Tensor(last_good.at(name).shape(), last_good.at(name).values());
    const double last_loss = result.log.empty() ? std::nan("") : result.log.back().loss;
    save_if_requested(config, good, {step - 1, last_loss, config.seed});
    if (!config.log_path.empty()) write_train_log(config.log_path, result.log);
    throw DivergenceError("training diverged at step " + std::to_string(step) + ": " + why);
  };

  for (std::uint64_t step = 1; step <= config.steps; ++step) {
    model.zero_grad();
    double batch_loss = 0.0;
    try {
      for (std::size_t b = 0; b < config.batch; ++b) {
        const auto draw = draw_sample(pool, data_rng.derive("sample", (step - 1) * config.batch + b),
                                      config.model.timesteps, config.jitter);
        Graph<float> g;
        auto loss = flow_loss(g, model, draw.sample, draw.t, draw.noise);
        batch_loss += loss.value().item();
        g.backward(scale(loss, 1.0 / static_cast<double>(config.batch)));
      }
    } catch (const NonFiniteError& e) {
      diverge(step, e.what());
    }
    batch_loss /= static_cast<double>(config.batch);
    if (!std::isfinite(batch_loss)) diverge(step, "non-finite loss");

    last_good = model.parameters();
    const double lr = learning_rate_at(config, step);
    for (auto& [name, t] : model.parameters()) {
      auto& v = second_moment[name];
      auto w = t.data();
      const auto grad = t.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = grad[i];
        v[i] = kRmsBeta * v[i] + (1.0 - kRmsBeta) * gi * gi;
        w[i] = static_cast<float>(w[i] - lr * gi / (std::sqrt(v[i]) + kRmsEps));
      }
      if (!t.all_finite()) diverge(step + 1, "non-finite parameter " + name);
    }

    result.log.push_back({step, batch_loss});
    if (progress) progress(result.log.back());
  }

  model.set_requires_grad(false);
  for (auto& [name, t] : model.parameters()) t.clear_grad();
  const TrainingMeta meta{config.steps, result.log.back().loss, config.seed};
  result.checkpoint = Checkpoint::from_model(model, meta);
  save_if_requested(config, model, meta);
  if (!config.log_path.empty()) write_train_log(config.log_path, result.log);
  return result;
}

double mean_flow_loss(Model& model, const std::vector<Identity>& identities, std::size_t draws, std::uint64_t seed) {
  if (identities.empty() || draws == 0) throw RangeError("mean_flow_loss needs identities and draws");
  const Rng rng(seed, "eval/flow");
  double total = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    const auto draw = draw_sample(identities, rng.derive("sample", i), model.config().timesteps, 0.0f);
    Graph<float> g;
    total += flow_loss(g, model, draw.sample, draw.t, draw.noise).value().item();
  }
  return total / static_cast<double>(draws);
}

void write_train_log(const std::filesystem::path& path, const std::vector<TrainStep>& log) {
  std::ostringstream os;
  os.precision(9);
  os << "step,loss\n";
  for (const auto& s : log) os << s.step << ',' << s.loss << '\n';
  write_text(path, os.str());
}

}  // namespace decontext
