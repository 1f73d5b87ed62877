#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "decontext/dataset.hpp"
#include "decontext/model.hpp"

namespace decontext {

/// RMSProp without momentum: v <- beta v + (1 - beta) g^2,
/// w <- w - lr * g / (sqrt(v) + eps). The learning rate warms up linearly
/// then follows a cosine decay to kLrFloor * lr.
inline constexpr double kRmsBeta = 0.99;
inline constexpr double kRmsEps = 1e-8;
inline constexpr std::uint64_t kWarmupSteps = 100;
inline constexpr double kLrFloor = 0.05;

struct TrainConfig {
  ModelConfig model;
  std::uint64_t steps = 6000;
  std::size_t batch = 8;
  double learning_rate = 2e-3;
  std::uint64_t seed = 1;
  // Independent uniform noise on target and context pixels during training.
  float jitter = 0.1f;
  std::filesystem::path checkpoint_path;  // empty: do not write
  std::filesystem::path log_path;         // empty: do not write

  /// Throws ConfigError.
  void validate() const;
};

/// Learning rate applied at 1-based `step`.
double learning_rate_at(const TrainConfig& config, std::uint64_t step);

/// Mean squared error between a velocity prediction and eps - x.
Var flow_matching_loss(Var velocity, const Tensor& x, const Tensor& noise);

/// Flow loss of one sample at timestep t with the given noise draw.
Var flow_loss(Graph<float>& g, Model& model, const SyntheticSample& sample, int t, const Tensor& noise);
/// Inference-only version drawing the noise from `rng`.
double flow_loss(Model& model, const SyntheticSample& sample, int t, Rng& rng);

struct TrainStep {
  std::uint64_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TrainStep> log;
};

using TrainProgress = std::function<void(const TrainStep&)>;

/// Rectified flow-matching training on the synthetic identity task.
/// On a non-finite loss or gradient the last finite parameters are written to
/// the checkpoint path and DivergenceError is thrown.
TrainResult train(const TrainConfig& config, const TrainProgress& progress = {});

/// Average flow loss over `draws` random (identity, prompt, t, noise) tuples.
double mean_flow_loss(Model& model, const std::vector<Identity>& identities, std::size_t draws,
                      std::uint64_t seed);

/// Writes `step,loss` rows.
void write_train_log(const std::filesystem::path& path, const std::vector<TrainStep>& log);

}  // namespace decontext
