#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "decontext/graph.hpp"
#include "decontext/rng.hpp"
#include "decontext/tensor.hpp"

namespace decontext {

/// Shape hyperparameters of the miniature multi-modal diffusion transformer.
/// Double (dual-stream) blocks always precede single-stream blocks.
struct ModelConfig {
  std::size_t hidden_dim = 32;
  std::size_t heads = 4;
  std::size_t double_blocks = 2;
  std::size_t single_blocks = 4;
  std::size_t image_side = 16;
  std::size_t patch = 2;
  std::size_t text_tokens = 8;
  std::size_t vocab = 60;
  std::size_t mlp_ratio = 2;
  int timesteps = 1000;

  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;

  std::size_t head_dim() const { return hidden_dim / heads; }
  std::size_t grid() const { return image_side / patch; }
  std::size_t patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return 3 * patch * patch; }
  std::size_t total_blocks() const { return double_blocks + single_blocks; }
  std::size_t sequence_length() const { return text_tokens + 2 * patches(); }
  Shape image_shape() const { return {3, image_side, image_side}; }

  bool operator==(const ModelConfig&) const = default;
};

enum class Segment : std::uint8_t { kText, kTarget, kContext };
enum class BlockKind : std::uint8_t { kDouble, kSingle };

std::string_view block_kind_name(BlockKind kind);

/// Token layout of the joint sequence: [text ; target ; context].
struct SegmentLayout {
  std::size_t text_len = 0;
  std::size_t target_len = 0;
  std::size_t context_len = 0;

  std::size_t total() const { return text_len + target_len + context_len; }
  std::size_t target_begin() const { return text_len; }
  std::size_t context_begin() const { return text_len + target_len; }
  Segment at(std::size_t token) const;

  bool operator==(const SegmentLayout&) const = default;
};

SegmentLayout layout_for(const ModelConfig& config);

/// Post-softmax attention of one block, detached from any graph.
struct AttentionRecord {
  std::size_t block_id = 0;
  BlockKind kind = BlockKind::kDouble;
  Tensor maps;  // [heads, S, S]
  SegmentLayout segments;
};

struct ForwardOptions {
  bool record_attention = false;
  /// Removes every attention entry whose key is a context token and whose
  /// query is not (rows renormalised over the remaining keys), in all blocks.
  bool zero_context = false;
};

/// Graph handles produced by one forward pass.
template <typename T>
struct ForwardResult {
  BasicVar<T> velocity;        // [3, side, side]
  BasicVar<T> target_tokens;   // [patches, d] as they enter the first block
  BasicVar<T> context_tokens;  // [patches, d] as they enter the first block
  std::vector<BasicVar<T>> attention;  // per block [heads, S, S], when recorded
};

/// Index maps between a [3, side, side] image and its [patches, 3*p*p] patch matrix.
struct PatchIndex {
  std::shared_ptr<const std::vector<std::uint32_t>> to_patches;
  std::shared_ptr<const std::vector<std::uint32_t>> to_image;
};

PatchIndex make_patch_index(const ModelConfig& config);

/// Pure re-arrangement (no projection); exact inverses of each other.
Tensor extract_patches(const ModelConfig& config, const Tensor& image);
Tensor assemble_patches(const ModelConfig& config, const Tensor& patches);

/// Sinusoidal embedding of an integer timestep, shape [1, dim].
template <typename T>
BasicTensor<T> timestep_embedding(int t, std::size_t dim);

template <typename T>
class BasicModel {
 public:
  using TensorT = BasicTensor<T>;
  using VarT = BasicVar<T>;
  using ParameterMap = std::map<std::string, TensorT>;

  /// All parameters zero. Use `initialized` for a trainable model.
  explicit BasicModel(ModelConfig config);
  static BasicModel initialized(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  SegmentLayout layout() const { return layout_for(config_); }

  ParameterMap& parameters() noexcept { return params_; }
  const ParameterMap& parameters() const noexcept { return params_; }
  TensorT& param(const std::string& name);
  const TensorT& param(const std::string& name) const;
  std::size_t parameter_count() const;

  void set_requires_grad(bool on);
  void zero_grad();

  template <typename U>
  BasicModel<U> cast() const {
    BasicModel<U> out(config_);
    for (const auto& [name, t] : params_) out.param(name) = t.template cast<U>();
    return out;
  }

  /// Prompt tokens [text_tokens, d]; throws RangeError if prompt_id >= vocab.
  VarT embed_prompt(Graph<T>& g, std::size_t prompt_id);
  /// Image [3, side, side] -> tokens [patches, d] through the patch projection.
  VarT patchify(Graph<T>& g, VarT image);
  /// Patch matrix [patches, 3*p*p] -> image [3, side, side].
  VarT unpatchify(Graph<T>& g, VarT patches);

  /// Velocity prediction for noisy target `z_t` at integer timestep `t`.
  ForwardResult<T> forward(Graph<T>& g, VarT z_t, int t, VarT context, std::size_t prompt_id,
                           const ForwardOptions& options = {});

 private:
  VarT linear(Graph<T>& g, VarT x, const std::string& prefix);
  VarT mlp(Graph<T>& g, VarT x, const std::string& prefix);
  VarT attention(Graph<T>& g, VarT qkv, const VarT* mask, std::vector<VarT>* maps);
  void check_image(const VarT& v, const char* what) const;

  ModelConfig config_;
  ParameterMap params_;
  PatchIndex patch_index_;
};

using Model = BasicModel<float>;
using ModelD = BasicModel<double>;

extern template class BasicModel<float>;
extern template class BasicModel<double>;

struct VelocityResult {
  Tensor velocity;
  std::vector<AttentionRecord> records;
};

/// Inference-only forward pass (no gradients kept).
VelocityResult forward_velocity(Model& model, const Tensor& z_t, int t, const Tensor& context,
                                std::size_t prompt_id, bool record_attention, bool zero_context);

/// Copies recorded attention maps out of a graph.
std::vector<AttentionRecord> detach_records(const Model& model, const ForwardResult<float>& result);

/// Euler integration of the velocity field from pure noise (sigma = 1) to
/// sigma = 0 over `steps` uniform steps; output clamped to [0, 1].
Tensor sample(Model& model, const Tensor& context, std::size_t prompt_id, int steps, Rng& rng,
              bool zero_context);

/// z_t = (1 - sigma) x + sigma noise, sigma = t / T.
Tensor noisy_latent(const Tensor& x, const Tensor& noise, int t, int timesteps);

struct TrainingMeta {
  std::uint64_t steps = 0;
  double final_loss = 0.0;
  std::uint64_t seed = 0;
};

/// Model weights plus training provenance, persisted as a directory holding
/// `manifest.json` and one DCTX file per parameter.
struct Checkpoint {
  ModelConfig config;
  Model::ParameterMap parameters;
  TrainingMeta meta;

  static Checkpoint from_model(const Model& model, TrainingMeta meta);
  Model to_model() const;

  void save(const std::filesystem::path& dir) const;
  static Checkpoint load(const std::filesystem::path& dir);
};

}  // namespace decontext
