#include "decontext/model.hpp"

#include <algorithm>
#include <cmath>

#include "decontext/errors.hpp"

namespace decontext {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (hidden_dim == 0 || heads == 0) fail("hidden_dim and heads must be positive");
  if (hidden_dim % heads != 0) fail("hidden_dim must be divisible by heads");
  if (hidden_dim % 2 != 0) fail("hidden_dim must be even for the timestep embedding");
  if (patch == 0 || image_side == 0 || image_side % patch != 0) fail("image_side must be a positive multiple of patch");
  if (text_tokens == 0) fail("text_tokens must be positive");
  if (vocab == 0) fail("vocab must be positive");
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (total_blocks() == 0) fail("at least one block is required");
  if (timesteps <= 0) fail("timesteps must be positive");
}

std::string_view block_kind_name(BlockKind kind) {
  return kind == BlockKind::kDouble ? "double" : "single";
}

Segment SegmentLayout::at(std::size_t token) const {
  if (token < text_len) return Segment::kText;
  if (token < text_len + target_len) return Segment::kTarget;
  if (token < total()) return Segment::kContext;
  throw RangeError("token " + std::to_string(token) + " outside sequence of length " + std::to_string(total()));
}

SegmentLayout layout_for(const ModelConfig& config) {
  return SegmentLayout{config.text_tokens, config.patches(), config.patches()};
}

PatchIndex make_patch_index(const ModelConfig& config) {
  const std::size_t side = config.image_side, p = config.patch, grid = config.grid(), pd = config.patch_dim();
  std::vector<std::uint32_t> to_patches(3 * side * side);
  std::vector<std::uint32_t> to_image(3 * side * side);
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t dy = 0; dy < p; ++dy) {
          for (std::size_t dx = 0; dx < p; ++dx) {
            const std::size_t patch_flat = (gy * grid + gx) * pd + c * p * p + dy * p + dx;
            const std::size_t pixel_flat = c * side * side + (gy * p + dy) * side + gx * p + dx;
            to_patches[patch_flat] = static_cast<std::uint32_t>(pixel_flat);
            to_image[pixel_flat] = static_cast<std::uint32_t>(patch_flat);
          }
        }
      }
    }
  }
  return PatchIndex{std::make_shared<const std::vector<std::uint32_t>>(std::move(to_patches)),
                    std::make_shared<const std::vector<std::uint32_t>>(std::move(to_image))};
}

Tensor extract_patches(const ModelConfig& config, const Tensor& image) {
  if (image.shape() != config.image_shape()) {
    throw ShapeError("extract_patches: expected " + shape_to_string(config.image_shape()) + ", got " +
                     shape_to_string(image.shape()));
  }
  const auto idx = make_patch_index(config);
  Tensor out(Shape{config.patches(), config.patch_dim()});
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = image[(*idx.to_patches)[i]];
  return out;
}

Tensor assemble_patches(const ModelConfig& config, const Tensor& patches) {
  const Shape want{config.patches(), config.patch_dim()};
  if (patches.shape() != want) {
    throw ShapeError("assemble_patches: expected " + shape_to_string(want) + ", got " + shape_to_string(patches.shape()));
  }
  const auto idx = make_patch_index(config);
  Tensor out(config.image_shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = patches[(*idx.to_image)[i]];
  return out;
}

template <typename T>
BasicTensor<T> timestep_embedding(int t, std::size_t dim) {
  BasicTensor<T> out(Shape{1, dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = static_cast<T>(std::sin(t * freq));
    out[i + half] = static_cast<T>(std::cos(t * freq));
  }
  return out;
}

// ---- parameters --------------------------------------------------------------

namespace {

struct ParamSpec {
  std::string name;
  Shape shape;
  double init_std;  // 0 => zeros
};

std::vector<ParamSpec> parameter_specs(const ModelConfig& c) {
  const std::size_t d = c.hidden_dim, m = c.mlp_ratio * d, pd = c.patch_dim();
  const double wd = 1.0 / std::sqrt(static_cast<double>(d));
  const double wm = 1.0 / std::sqrt(static_cast<double>(m));
  const double wp = 1.0 / std::sqrt(static_cast<double>(pd));
  // Residual branches start small so the untrained stack stays well conditioned.
  const double wres = wd / std::sqrt(2.0 * static_cast<double>(c.total_blocks()));
  const double wres_m = wm / std::sqrt(2.0 * static_cast<double>(c.total_blocks()));
  std::vector<ParamSpec> specs;
  auto lin = [&](const std::string& prefix, std::size_t in, std::size_t out, double stddev) {
    specs.push_back({prefix + ".w", {in, out}, stddev});
    specs.push_back({prefix + ".b", {1, out}, 0.0});
  };
  specs.push_back({"txt.embed", {c.vocab, d}, 1.0});
  specs.push_back({"txt.pos", {c.text_tokens, d}, 0.5});
  lin("img.in", pd, d, wp);
  specs.push_back({"tgt.pos", {c.patches(), d}, 1.0});
  specs.push_back({"ctx.pos", {c.patches(), d}, 1.0});
  lin("time.fc1", d, d, wd);
  lin("time.fc2", d, d, wd);
  for (std::size_t i = 0; i < c.double_blocks; ++i) {
    const std::string p = "double" + std::to_string(i);
    for (const char* stream : {".txt", ".img"}) {
      lin(p + stream + ".qkv", d, 3 * d, wd);
      lin(p + stream + ".out", d, d, wres);
      lin(p + stream + ".mlp1", d, m, wd);
      lin(p + stream + ".mlp2", m, d, wres_m);
    }
  }
  for (std::size_t i = 0; i < c.single_blocks; ++i) {
    const std::string p = "single" + std::to_string(i);
    lin(p + ".qkv", d, 3 * d, wd);
    lin(p + ".out", d, d, wres);
    lin(p + ".mlp1", d, m, wd);
    lin(p + ".mlp2", m, d, wres_m);
  }
  lin("final", d, pd, 0.1 * wd);
  return specs;
}

}  // namespace

template <typename T>
BasicModel<T>::BasicModel(ModelConfig config) : config_(config) {
  config_.validate();
  for (const auto& spec : parameter_specs(config_)) params_.emplace(spec.name, TensorT(spec.shape));
  patch_index_ = make_patch_index(config_);
}

template <typename T>
BasicModel<T> BasicModel<T>::initialized(const ModelConfig& config, std::uint64_t seed) {
  BasicModel model(config);
  for (const auto& spec : parameter_specs(model.config_)) {
    if (spec.init_std == 0.0) continue;
    Rng rng(seed, "init/" + spec.name);
    for (auto& v : model.params_.at(spec.name).data()) v = static_cast<T>(spec.init_std * rng.normal());
  }
  // Context positions start as a copy of target positions so that spatially
  // aligned target/context tokens attend to each other from the first step.
  model.param("ctx.pos") = model.param("tgt.pos");
  return model;
}

template <typename T>
BasicTensor<T>& BasicModel<T>::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw RangeError("unknown parameter " + name);
  return it->second;
}

template <typename T>
const BasicTensor<T>& BasicModel<T>::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw RangeError("unknown parameter " + name);
  return it->second;
}

template <typename T>
std::size_t BasicModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

template <typename T>
void BasicModel<T>::set_requires_grad(bool on) {
  for (auto& [_, t] : params_) t.set_requires_grad(on);
}

template <typename T>
void BasicModel<T>::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

// ---- forward -------------------------------------------------------------------

template <typename T>
void BasicModel<T>::check_image(const VarT& v, const char* what) const {
  if (v.shape() != config_.image_shape()) {
    throw ShapeError(std::string(what) + ": expected " + shape_to_string(config_.image_shape()) + ", got " +
                     shape_to_string(v.shape()));
  }
}

template <typename T>
typename BasicModel<T>::VarT BasicModel<T>::linear(Graph<T>& g, VarT x, const std::string& prefix) {
  auto w = g.input(param(prefix + ".w"));
  auto b = g.input(param(prefix + ".b"));
  return add(matmul(x, w), repeat_rows(b, x.shape()[0]));
}

template <typename T>
typename BasicModel<T>::VarT BasicModel<T>::mlp(Graph<T>& g, VarT x, const std::string& prefix) {
  return linear(g, gelu(linear(g, x, prefix + ".mlp1")), prefix + ".mlp2");
}

template <typename T>
typename BasicModel<T>::VarT BasicModel<T>::attention(Graph<T>&, VarT qkv, const VarT* mask,
                                                      std::vector<VarT>* maps) {
  const std::size_t d = config_.hidden_dim, hd = config_.head_dim(), s = qkv.shape()[0];
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<VarT> heads;
  std::vector<VarT> head_maps;
  for (std::size_t h = 0; h < config_.heads; ++h) {
    auto q = slice(qkv, 1, h * hd, hd);
    auto k = slice(qkv, 1, d + h * hd, hd);
    auto v = slice(qkv, 1, 2 * d + h * hd, hd);
    auto scores = scale(matmul(q, transpose(k)), inv_sqrt);
    // A large negative additive mask underflows to exactly zero after the
    // softmax, which is the same as zeroing and renormalising the row.
    if (mask) scores = add(scores, *mask);
    auto a = softmax(scores);
    heads.push_back(matmul(a, v));
    if (maps) head_maps.push_back(reshape(a, Shape{1, s, s}));
  }
  if (maps) maps->push_back(concat(std::span<const VarT>(head_maps), 0));
  return concat(std::span<const VarT>(heads), 1);
}

template <typename T>
typename BasicModel<T>::VarT BasicModel<T>::embed_prompt(Graph<T>& g, std::size_t prompt_id) {
  if (prompt_id >= config_.vocab) {
    throw RangeError("prompt id " + std::to_string(prompt_id) + " outside vocabulary of " + std::to_string(config_.vocab));
  }
  auto row = slice(g.input(param("txt.embed")), 0, prompt_id, 1);
  return add(repeat_rows(row, config_.text_tokens), g.input(param("txt.pos")));
}

template <typename T>
typename BasicModel<T>::VarT BasicModel<T>::patchify(Graph<T>& g, VarT image) {
  check_image(image, "patchify");
  auto patches = gather(image, patch_index_.to_patches, Shape{config_.patches(), config_.patch_dim()});
  return linear(g, patches, "img.in");
}

template <typename T>
typename BasicModel<T>::VarT BasicModel<T>::unpatchify(Graph<T>&, VarT patches) {
  return gather(patches, patch_index_.to_image, config_.image_shape());
}

template <typename T>
ForwardResult<T> BasicModel<T>::forward(Graph<T>& g, VarT z_t, int t, VarT context, std::size_t prompt_id,
                                        const ForwardOptions& options) {
  if (t < 0 || t > config_.timesteps) {
    throw RangeError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(config_.timesteps) + "]");
  }
  check_image(z_t, "forward (noisy target)");
  check_image(context, "forward (context)");

  const auto lay = layout();
  const std::size_t d = config_.hidden_dim, s = lay.total();

  auto temb = g.constant(timestep_embedding<T>(t, d));
  temb = linear(g, gelu(linear(g, temb, "time.fc1")), "time.fc2");

  ForwardResult<T> result;
  auto txt = add(embed_prompt(g, prompt_id), repeat_rows(temb, lay.text_len));
  result.target_tokens = add(add(patchify(g, z_t), g.input(param("tgt.pos"))), repeat_rows(temb, lay.target_len));
  result.context_tokens = add(add(patchify(g, context), g.input(param("ctx.pos"))), repeat_rows(temb, lay.context_len));

  VarT mask;
  if (options.zero_context) {
    TensorT m(Shape{s, s});
    for (std::size_t q = 0; q < lay.context_begin(); ++q) {
      for (std::size_t k = lay.context_begin(); k < s; ++k) m[q * s + k] = static_cast<T>(-1e9);
    }
    mask = g.constant(std::move(m));
  }
  const VarT* mask_ptr = options.zero_context ? &mask : nullptr;
  std::vector<VarT>* maps = options.record_attention ? &result.attention : nullptr;

  auto img = concat({result.target_tokens, result.context_tokens}, 0);
  for (std::size_t b = 0; b < config_.double_blocks; ++b) {
    const std::string p = "double" + std::to_string(b);
    auto qkv = concat({linear(g, layer_norm(txt), p + ".txt.qkv"), linear(g, layer_norm(img), p + ".img.qkv")}, 0);
    auto attn = attention(g, qkv, mask_ptr, maps);
    txt = add(txt, linear(g, slice(attn, 0, 0, lay.text_len), p + ".txt.out"));
    img = add(img, linear(g, slice(attn, 0, lay.text_len, lay.target_len + lay.context_len), p + ".img.out"));
    txt = add(txt, mlp(g, layer_norm(txt), p + ".txt"));
    img = add(img, mlp(g, layer_norm(img), p + ".img"));
  }

  auto x = concat({txt, img}, 0);
  for (std::size_t b = 0; b < config_.single_blocks; ++b) {
    const std::string p = "single" + std::to_string(b);
    auto attn = attention(g, linear(g, layer_norm(x), p + ".qkv"), mask_ptr, maps);
    x = add(x, linear(g, attn, p + ".out"));
    x = add(x, mlp(g, layer_norm(x), p));
  }

  auto target_out = slice(x, 0, lay.target_begin(), lay.target_len);
  auto patches = linear(g, layer_norm(target_out), "final");
  result.velocity = unpatchify(g, patches);
  return result;
}

template class BasicModel<float>;
template class BasicModel<double>;
template BasicTensor<float> timestep_embedding<float>(int, std::size_t);
template BasicTensor<double> timestep_embedding<double>(int, std::size_t);

// ---- inference helpers -------------------------------------------------------------

std::vector<AttentionRecord> detach_records(const Model& model, const ForwardResult<float>& result) {
  const auto& c = model.config();
  std::vector<AttentionRecord> out;
  out.reserve(result.attention.size());
  for (std::size_t b = 0; b < result.attention.size(); ++b) {
    AttentionRecord r;
    r.block_id = b;
    r.kind = b < c.double_blocks ? BlockKind::kDouble : BlockKind::kSingle;
    r.maps = result.attention[b].value();
    r.segments = model.layout();
    out.push_back(std::move(r));
  }
  return out;
}

VelocityResult forward_velocity(Model& model, const Tensor& z_t, int t, const Tensor& context,
                                std::size_t prompt_id, bool record_attention, bool zero_context) {
  Graph<float> g;
  Tensor z = z_t;
  Tensor ctx = context;
  z.set_requires_grad(false);
  ctx.set_requires_grad(false);
  auto res = model.forward(g, g.input(z), t, g.input(ctx), prompt_id, {record_attention, zero_context});
  VelocityResult out;
  out.velocity = res.velocity.value();
  if (record_attention) out.records = detach_records(model, res);
  return out;
}

Tensor noisy_latent(const Tensor& x, const Tensor& noise, int t, int timesteps) {
  if (x.shape() != noise.shape()) {
    throw ShapeError("noisy_latent: " + shape_to_string(x.shape()) + " vs " + shape_to_string(noise.shape()));
  }
  if (t < 0 || t > timesteps) throw RangeError("timestep " + std::to_string(t) + " out of range");
  const float sigma = static_cast<float>(t) / static_cast<float>(timesteps);
  Tensor z(x.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) z[i] = (1.0f - sigma) * x[i] + sigma * noise[i];
  return z;
}

Tensor sample(Model& model, const Tensor& context, std::size_t prompt_id, int steps, Rng& rng, bool zero_context) {
  if (steps < 1) throw RangeError("sample: steps must be >= 1");
  const int big_t = model.config().timesteps;
  Tensor z = rng.normal_tensor(model.config().image_shape());
  for (int i = 0; i < steps; ++i) {
    const double sigma = 1.0 - static_cast<double>(i) / steps;
    const double next = 1.0 - static_cast<double>(i + 1) / steps;
    const int t = static_cast<int>(std::lround(sigma * big_t));
    auto v = forward_velocity(model, z, t, context, prompt_id, false, zero_context).velocity;
    const float dt = static_cast<float>(sigma - next);
    for (std::size_t k = 0; k < z.numel(); ++k) z[k] -= dt * v[k];
    z.check_finite("sampling trajectory");
  }
  for (auto& v : z.data()) v = std::clamp(v, 0.0f, 1.0f);
  return z;
}

}  // namespace decontext
