#include "decontext/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace decontext {

std::string_view attack_method_name(AttackMethod method) {
  return method == AttackMethod::kDeContext ? "decontext" : "diffpgd";
}

std::string_view pgd_mode_name(PgdMode mode) { return mode == PgdMode::kUntargeted ? "untargeted" : "targeted"; }

AttackConfig AttackConfig::resolved(const ModelConfig& model) const {
  AttackConfig out = *this;
  if (out.block_set.empty()) {
    out.block_set.resize(model.single_blocks);
    std::iota(out.block_set.begin(), out.block_set.end(), model.double_blocks);
  }
  if (out.prompt_pool.empty()) {
    out.prompt_pool.resize(model.vocab);
    std::iota(out.prompt_pool.begin(), out.prompt_pool.end(), std::size_t{0});
  }
  return out;
}

void AttackConfig::validate_scalars() const {
  if (!std::isfinite(eta) || eta < 0.0) throw ConfigError("attack.eta must be a finite value >= 0");
  if (!std::isfinite(alpha) || alpha <= 0.0) throw ConfigError("attack.alpha must be > 0");
  if (eta > 0.0 && alpha > eta) throw ConfigError("attack.alpha must not exceed attack.eta");
  if (batch < 1) throw ConfigError("attack.batch must be >= 1");
  if (t_low < 0 || t_low > t_high) throw ConfigError("attack.t_low must satisfy 0 <= t_low <= t_high");
}

void AttackConfig::validate(const ModelConfig& model) const {
  validate_scalars();
  if (t_low < 0 || t_low > t_high || t_high > model.timesteps) {
    throw ConfigError("attack timestep interval [" + std::to_string(t_low) + ", " + std::to_string(t_high) +
                      "] must satisfy 0 <= t_low <= t_high <= " + std::to_string(model.timesteps));
  }
  const auto r = resolved(model);
  if (r.block_set.empty()) throw ConfigError("attack.block_set is empty");
  for (auto b : r.block_set) {
    if (b >= model.total_blocks()) {
      throw ConfigError("attack.block_set id " + std::to_string(b) + " exceeds the model's " +
                        std::to_string(model.total_blocks()) + " blocks");
    }
  }
  for (auto p : r.prompt_pool) {
    if (p >= model.vocab) throw ConfigError("attack.prompt_pool id " + std::to_string(p) + " outside the vocabulary");
  }
}

// ---- context proportion ---------------------------------------------------------

namespace {

void check_block_set(std::span<const std::size_t> block_set, std::size_t available) {
  if (block_set.empty()) throw RangeError("context proportion needs a non-empty block set");
  for (auto b : block_set) {
    if (b >= available) {
      throw RangeError("block " + std::to_string(b) + " not among the " + std::to_string(available) + " recorded blocks");
    }
  }
}

void check_layout(const SegmentLayout& lay, const Shape& maps) {
  if (lay.target_len == 0 || lay.context_len == 0) throw ShapeError("attention record lacks target or context segment");
  if (maps.size() != 3 || maps[1] != lay.total() || maps[2] != lay.total()) {
    throw ShapeError("attention maps " + shape_to_string(maps) + " do not match " + std::to_string(lay.total()) +
                     " tokens");
  }
}

}  // namespace

SegmentProportions segment_proportions(const AttentionRecord& record) {
  const auto& lay = record.segments;
  check_layout(lay, record.maps.shape());
  const std::size_t heads = record.maps.dim(0), s = lay.total();
  const auto a = record.maps.data();
  SegmentProportions p;
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t q = lay.target_begin(); q < lay.target_begin() + lay.target_len; ++q) {
      const float* row = a.data() + (h * s + q) * s;
      for (std::size_t k = 0; k < s; ++k) {
        switch (lay.at(k)) {
          case Segment::kText: p.text += row[k]; break;
          case Segment::kTarget: p.target += row[k]; break;
          case Segment::kContext: p.context += row[k]; break;
        }
      }
    }
  }
  const double n = static_cast<double>(heads * lay.target_len);
  p.text /= n;
  p.target /= n;
  p.context /= n;
  return p;
}

double context_proportion(std::span<const AttentionRecord> records, std::span<const std::size_t> block_set) {
  check_block_set(block_set, records.size());
  double total = 0.0;
  for (auto b : block_set) total += segment_proportions(records[b]).context;
  return total / static_cast<double>(block_set.size());
}

double decontext_loss(std::span<const AttentionRecord> records, std::span<const std::size_t> block_set) {
  return 1.0 - context_proportion(records, block_set);
}

template <typename T>
BasicVar<T> context_proportion(std::span<const BasicVar<T>> maps, const SegmentLayout& layout,
                               std::span<const std::size_t> block_set) {
  check_block_set(block_set, maps.size());
  std::vector<BasicVar<T>> parts;
  std::size_t heads = 0;
  for (auto b : block_set) {
    check_layout(layout, maps[b].shape());
    heads = maps[b].shape()[0];
    auto rows = slice(maps[b], 1, layout.target_begin(), layout.target_len);
    parts.push_back(reshape(sum(slice(rows, 2, layout.context_begin(), layout.context_len)), Shape{1}));
  }
  auto total = parts.size() == 1 ? parts[0] : sum(concat(std::span<const BasicVar<T>>(parts), 0));
  const double n = static_cast<double>(heads * block_set.size() * layout.target_len);
  return reshape(scale(total, 1.0 / n), Shape{});
}

// ---- projection -------------------------------------------------------------------

Tensor project_linf(const Tensor& x_adv, const Tensor& x_clean, double eta) {
  if (x_adv.shape() != x_clean.shape()) {
    throw ShapeError("project_linf: " + shape_to_string(x_adv.shape()) + " vs " + shape_to_string(x_clean.shape()));
  }
  if (!(eta >= 0.0)) throw RangeError("project_linf: eta must be >= 0");
  Tensor out(x_adv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double c = x_clean[i];
    const double lo = std::max(0.0, c - eta);
    const double hi = std::min(1.0, c + eta);
    if (lo > hi) throw RangeError("project_linf: clean pixel " + std::to_string(c) + " outside [0, 1]");
    float y = static_cast<float>(std::clamp(static_cast<double>(x_adv[i]), lo, hi));
    // Rounding to float may step just outside the box; move one ulp inward.
    if (y > hi) y = std::nextafter(y, -1.0f);
    if (y < lo) y = std::nextafter(y, 2.0f);
    out[i] = y;
  }
  return out;
}

double linf_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("linf_distance: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

// ---- objectives -------------------------------------------------------------------

AttackDraw draw_attack_sample(const AttackConfig& resolved, const ModelConfig& model, std::uint64_t index) {
  Rng rng = Rng(resolved.seed, "attack/draw").derive("sample", index);
  AttackDraw d;
  d.prompt = resolved.prompt_pool.at(rng.uniform_int(0, resolved.prompt_pool.size() - 1));
  d.t = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(resolved.t_low),
                                         static_cast<std::uint64_t>(resolved.t_high)));
  d.stand_in = rng.derive("stand-in").normal_tensor(model.image_shape());
  d.noise = rng.derive("noise").normal_tensor(model.image_shape());
  return d;
}

Tensor stand_in_latent(const AttackDraw& draw, int timesteps) {
  return noisy_latent(draw.stand_in, draw.noise, draw.t, timesteps);
}

template <typename T>
BasicVar<T> decontext_objective(Graph<T>& g, BasicModel<T>& model, BasicVar<T> context, const BasicTensor<T>& z_t,
                                int t, std::size_t prompt, std::span<const std::size_t> block_set) {
  ForwardOptions opts;
  opts.record_attention = true;
  auto res = model.forward(g, g.constant(z_t), t, context, prompt, opts);
  auto r = context_proportion<T>(std::span<const BasicVar<T>>(res.attention), model.layout(), block_set);
  return add(g.constant(BasicTensor<T>::scalar(T{1})), scale(r, -1.0));
}

template <typename T>
BasicVar<T> recon_objective(Graph<T>& g, BasicModel<T>& model, BasicVar<T> context, const BasicTensor<T>& z_t,
                            const BasicTensor<T>& z_star, int t, std::size_t prompt) {
  if (z_t.shape() != z_star.shape()) throw ShapeError("recon objective: z_t and z_star differ in shape");
  auto res = model.forward(g, g.constant(z_t), t, context, prompt);
  BasicTensor<T> target(z_t.shape());
  for (std::size_t i = 0; i < target.numel(); ++i) target[i] = z_t[i] - z_star[i];
  return squared_error(res.velocity, g.constant(std::move(target)));
}

template BasicVar<float> context_proportion<float>(std::span<const BasicVar<float>>, const SegmentLayout&,
                                                   std::span<const std::size_t>);
template BasicVar<double> context_proportion<double>(std::span<const BasicVar<double>>, const SegmentLayout&,
                                                     std::span<const std::size_t>);
template BasicVar<float> decontext_objective<float>(Graph<float>&, Model&, BasicVar<float>, const Tensor&, int,
                                                    std::size_t, std::span<const std::size_t>);
template BasicVar<double> decontext_objective<double>(Graph<double>&, ModelD&, BasicVar<double>, const TensorD&, int,
                                                      std::size_t, std::span<const std::size_t>);
template BasicVar<float> recon_objective<float>(Graph<float>&, Model&, BasicVar<float>, const Tensor&, const Tensor&,
                                                int, std::size_t);
template BasicVar<double> recon_objective<double>(Graph<double>&, ModelD&, BasicVar<double>, const TensorD&,
                                                  const TensorD&, int, std::size_t);

// ---- attack loop ------------------------------------------------------------------

namespace {

struct StepOutcome {
  double loss = 0.0;
  double r_ctx = 0.0;
};

// Builds one sample's objective with `context` as the differentiable input.
using StepObjective = std::function<StepOutcome(Graph<float>&, Model&, Var context, const AttackDraw&)>;

void check_clean(const Model& model, const Tensor& x) {
  if (x.shape() != model.config().image_shape()) {
    throw ShapeError("attack input must be " + shape_to_string(model.config().image_shape()) + ", got " +
                     shape_to_string(x.shape()));
  }
  x.check_finite("attack input");
  for (float v : x.data()) {
    if (v < 0.0f || v > 1.0f) throw RangeError("attack input pixels must lie in [0, 1]");
  }
}

Model frozen_copy(const Model& model) {
  Model m = model;
  m.set_requires_grad(false);
  for (auto& [_, t] : m.parameters()) t.clear_grad();
  return m;
}

PerturbationState run_attack(const Model& model, const Tensor& x_clean, const AttackConfig& config, double direction,
                             const StepObjective& objective, const AttackProgress& progress) {
  config.validate(model.config());
  check_clean(model, x_clean);
  const auto cfg = config.resolved(model.config());
  Model frozen = frozen_copy(model);

  PerturbationState state;
  state.x_clean = x_clean;
  state.x_adv = x_clean;
  state.x_clean.clear_grad();
  state.x_adv.clear_grad();

  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    std::vector<double> grad(x_clean.numel(), 0.0);
    StepOutcome outcome;
    try {
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        const auto draw = draw_attack_sample(cfg, frozen.config(), step * cfg.batch + b);
        Tensor ctx = state.x_adv;
        ctx.set_requires_grad(true);
        Graph<float> g;
        const auto o = objective(g, frozen, g.input(ctx), draw);
        outcome.loss += o.loss / static_cast<double>(cfg.batch);
        outcome.r_ctx += o.r_ctx / static_cast<double>(cfg.batch);
        const auto gx = ctx.grad();
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += gx[i];
      }
      if (!std::isfinite(outcome.loss)) throw NonFiniteError("non-finite attack loss");
    } catch (const NonFiniteError& e) {
      throw AttackAborted("attack aborted at step " + std::to_string(step + 1) + ": " + e.what(), state);
    }

    Tensor moved = state.x_adv;
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
      moved[i] = static_cast<float>(static_cast<double>(moved[i]) + direction * cfg.alpha * s);
    }
    state.x_adv = project_linf(moved, state.x_clean, cfg.eta);
    state.step = step + 1;
    state.history.push_back({state.step, outcome.loss, outcome.r_ctx, linf_distance(state.x_adv, state.x_clean)});
    if (progress) progress(state);
  }
  return state;
}

}  // namespace

PerturbationState decontext_attack(const Model& model, const Tensor& x_clean, const AttackConfig& config,
                                   const AttackProgress& progress) {
  const auto blocks = config.resolved(model.config()).block_set;
  auto objective = [&](Graph<float>& g, Model& m, Var context, const AttackDraw& draw) {
    auto loss = decontext_objective<float>(g, m, context, stand_in_latent(draw, m.config().timesteps), draw.t,
                                           draw.prompt, blocks);
    g.backward(loss);
    const double l = loss.value().item();
    return StepOutcome{l, 1.0 - l};
  };
  return run_attack(model, x_clean, config, +1.0, objective, progress);
}

PerturbationState diffpgd_attack(const Model& model, const Tensor& x_clean, const AttackConfig& config, PgdMode mode,
                                 const std::optional<Tensor>& target_latent, const AttackProgress& progress) {
  if (mode == PgdMode::kTargeted && !target_latent) throw ConfigError("targeted Diff-PGD requires a target latent");
  if (target_latent && target_latent->shape() != model.config().image_shape()) {
    throw ShapeError("target latent must be " + shape_to_string(model.config().image_shape()));
  }
  const Tensor z_star = mode == PgdMode::kTargeted ? *target_latent : x_clean;
  const auto blocks = config.resolved(model.config()).block_set;
  auto objective = [&](Graph<float>& g, Model& m, Var context, const AttackDraw& draw) {
    const auto z_t = noisy_latent(z_star, draw.noise, draw.t, m.config().timesteps);
    ForwardOptions opts;
    opts.record_attention = true;
    auto res = m.forward(g, g.constant(z_t), draw.t, context, draw.prompt, opts);
    Tensor target(z_t.shape());
    for (std::size_t i = 0; i < target.numel(); ++i) target[i] = z_t[i] - z_star[i];
    auto loss = squared_error(res.velocity, g.constant(std::move(target)));
    g.backward(loss);
    const auto records = detach_records(m, res);
    return StepOutcome{loss.value().item(), context_proportion(records, blocks)};
  };
  return run_attack(model, x_clean, config, mode == PgdMode::kUntargeted ? +1.0 : -1.0, objective, progress);
}

// ---- Monte Carlo gradient check -----------------------------------------------------

namespace {

constexpr std::size_t kChunk = 50;

}  // namespace

Tensor mean_sample_gradient(const Model& model, const Tensor& x, const AttackConfig& config, std::uint64_t first,
                            std::size_t n) {
  config.validate(model.config());
  const auto cfg = config.resolved(model.config());
  Model frozen = frozen_copy(model);
  std::vector<double> acc(x.numel(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto draw = draw_attack_sample(cfg, frozen.config(), first + i);
    Tensor ctx = x;
    ctx.set_requires_grad(true);
    Graph<float> g;
    g.backward(decontext_objective<float>(g, frozen, g.input(ctx), stand_in_latent(draw, frozen.config().timesteps),
                                          draw.t, draw.prompt, cfg.block_set));
    const auto gx = ctx.grad();
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += gx[k];
  }
  Tensor out(x.shape());
  for (std::size_t k = 0; k < acc.size(); ++k) out[k] = static_cast<float>(acc[k] / static_cast<double>(n));
  return out;
}

Tensor averaged_loss_gradient(const Model& model, const Tensor& x, const AttackConfig& config, std::uint64_t first,
                              std::size_t n) {
  config.validate(model.config());
  const auto cfg = config.resolved(model.config());
  Model frozen = frozen_copy(model);
  std::vector<double> acc(x.numel(), 0.0);
  // The averaged loss is built in chunks to bound graph memory; each chunk's
  // graph holds the chunk's summed losses scaled by 1/n.
  for (std::size_t begin = 0; begin < n; begin += kChunk) {
    const std::size_t end = std::min(n, begin + kChunk);
    Tensor ctx = x;
    ctx.set_requires_grad(true);
    Graph<float> g;
    auto context = g.input(ctx);
    std::vector<Var> losses;
    for (std::size_t i = begin; i < end; ++i) {
      const auto draw = draw_attack_sample(cfg, frozen.config(), first + i);
      losses.push_back(reshape(decontext_objective<float>(g, frozen, context,
                                                          stand_in_latent(draw, frozen.config().timesteps), draw.t,
                                                          draw.prompt, cfg.block_set),
                               Shape{1}));
    }
    g.backward(scale(sum(concat(std::span<const Var>(losses), 0)), 1.0 / static_cast<double>(n)));
    const auto gx = ctx.grad();
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += gx[k];
  }
  Tensor out(x.shape());
  for (std::size_t k = 0; k < acc.size(); ++k) out[k] = static_cast<float>(acc[k]);
  return out;
}

double mc_gradient_unbiasedness(const Model& model, const Tensor& x, const AttackConfig& config, std::size_t n_samples,
                                bool independent) {
  if (n_samples < 1) throw RangeError("mc_gradient_unbiasedness needs at least one sample");
  check_clean(model, x);
  const auto a = mean_sample_gradient(model, x, config, 0, n_samples);
  // Disjoint draw indices give an independent second estimate.
  const std::uint64_t offset = independent ? (std::uint64_t{1} << 40) : 0;
  const auto b = averaged_loss_gradient(model, x, config, offset, n_samples);
  double diff = 0.0, scale_b = 0.0;
  for (std::size_t k = 0; k < a.numel(); ++k) {
    diff = std::max(diff, std::abs(static_cast<double>(a[k]) - b[k]));
    scale_b = std::max(scale_b, std::abs(static_cast<double>(b[k])));
  }
  return diff / (scale_b + 1e-12);
}

}  // namespace decontext
