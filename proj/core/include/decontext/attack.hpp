#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "decontext/errors.hpp"
#include "decontext/model.hpp"

namespace decontext {

enum class AttackMethod { kDeContext, kDiffPgd };
enum class PgdMode { kUntargeted, kTargeted };

std::string_view attack_method_name(AttackMethod method);
std::string_view pgd_mode_name(PgdMode mode);

struct AttackConfig {
  double alpha = 0.005;
  double eta = 0.1;
  std::uint64_t steps = 800;
  int t_low = 980;
  int t_high = 1000;
  /// Global block ids (double blocks first). Empty selects every single block.
  std::vector<std::size_t> block_set;
  /// Prompt ids to sample from. Empty selects the whole vocabulary.
  std::vector<std::size_t> prompt_pool;
  std::uint64_t seed = 0;
  /// Samples whose gradients are averaged before the sign step. 1 follows the
  /// one-sample-per-iteration loop; larger values are an opt-in deviation.
  std::size_t batch = 1;

  /// Fills empty block_set / prompt_pool with their defaults for `model`.
  AttackConfig resolved(const ModelConfig& model) const;
  /// Checks that need no model: budget, step size, batch. Throws ConfigError.
  void validate_scalars() const;
  /// Full check against a model; throws ConfigError before any compute.
  void validate(const ModelConfig& model) const;
};

struct AttackLogEntry {
  std::uint64_t step = 0;
  double loss = 0.0;
  double r_ctx = 0.0;
  double linf = 0.0;  // of x_adv after this step's projection
};

struct PerturbationState {
  Tensor x_clean;
  Tensor x_adv;
  std::uint64_t step = 0;
  std::vector<AttackLogEntry> history;
};

/// Raised when a gradient or loss turns non-finite; carries the state reached.
class AttackAborted : public NonFiniteError {
 public:
  AttackAborted(const std::string& what, PerturbationState state)
      : NonFiniteError(what), state_(std::move(state)) {}
  const PerturbationState& state() const noexcept { return state_; }

 private:
  PerturbationState state_;
};

/// Called after every step with the state just reached.
using AttackProgress = std::function<void(const PerturbationState&)>;

/// Mean attention mass that target-query rows put on context-key columns,
/// averaged over heads, the blocks in `block_set` and target queries.
double context_proportion(std::span<const AttentionRecord> records, std::span<const std::size_t> block_set);
double decontext_loss(std::span<const AttentionRecord> records, std::span<const std::size_t> block_set);

/// Differentiable version over attention maps recorded in a graph
/// (`maps[b]` is block b's [heads, S, S] post-softmax attention).
template <typename T>
BasicVar<T> context_proportion(std::span<const BasicVar<T>> maps, const SegmentLayout& layout,
                               std::span<const std::size_t> block_set);

/// Attention mass of target queries split by key segment for one block:
/// {text, target, context}. The three parts sum to one.
struct SegmentProportions {
  double text = 0.0;
  double target = 0.0;
  double context = 0.0;
};
SegmentProportions segment_proportions(const AttentionRecord& record);

/// Clamp to [x_clean - eta, x_clean + eta] and to [0, 1]. The bounds hold
/// exactly when the result and x_clean are compared in double precision.
Tensor project_linf(const Tensor& x_adv, const Tensor& x_clean, double eta);
double linf_distance(const Tensor& a, const Tensor& b);

/// One attack iteration's random draw.
struct AttackDraw {
  std::size_t prompt = 0;
  int t = 0;
  Tensor stand_in;  // Gaussian stand-in for the unknown target image
  Tensor noise;
};

AttackDraw draw_attack_sample(const AttackConfig& resolved, const ModelConfig& model, std::uint64_t index);

/// Noisy latent z_t of a draw built from its Gaussian stand-in.
Tensor stand_in_latent(const AttackDraw& draw, int timesteps);

/// L = 1 - r_ctx over the resolved block set; the context image is `context`.
template <typename T>
BasicVar<T> decontext_objective(Graph<T>& g, BasicModel<T>& model, BasicVar<T> context, const BasicTensor<T>& z_t,
                                int t, std::size_t prompt, std::span<const std::size_t> block_set);

/// L = mean (v_hat - (z_t - z_star))^2.
template <typename T>
BasicVar<T> recon_objective(Graph<T>& g, BasicModel<T>& model, BasicVar<T> context, const BasicTensor<T>& z_t,
                            const BasicTensor<T>& z_star, int t, std::size_t prompt);

/// DeContext: ascend sign(grad (1 - r_ctx)) under the l-inf budget.
PerturbationState decontext_attack(const Model& model, const Tensor& x_clean, const AttackConfig& config,
                                   const AttackProgress& progress = {});

/// Diff-PGD reconstruction baseline. Untargeted mode uses the clean image as
/// the reconstruction target and ascends; targeted mode descends towards
/// `target_latent`.
PerturbationState diffpgd_attack(const Model& model, const Tensor& x_clean, const AttackConfig& config,
                                 PgdMode mode, const std::optional<Tensor>& target_latent = std::nullopt,
                                 const AttackProgress& progress = {});

/// Gradient of the DeContext objective with respect to the context image for
/// draws [first, first + n), averaged per sample or through one averaged loss.
Tensor mean_sample_gradient(const Model& model, const Tensor& x, const AttackConfig& config, std::uint64_t first,
                            std::size_t n);
Tensor averaged_loss_gradient(const Model& model, const Tensor& x, const AttackConfig& config, std::uint64_t first,
                              std::size_t n);

/// Max coordinate deviation between the mean of n single-sample gradients and
/// the gradient of the n-sample averaged loss, relative to the largest
/// coordinate of the latter. With `independent` the two sides use disjoint
/// draw sets, which measures Monte Carlo error instead of linearity.
double mc_gradient_unbiasedness(const Model& model, const Tensor& x, const AttackConfig& config, std::size_t n_samples,
                                bool independent = false);

}  // namespace decontext
