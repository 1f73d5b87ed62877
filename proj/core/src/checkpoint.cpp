#include <algorithm>
#include <fstream>

#include "decontext/errors.hpp"
#include "decontext/io.hpp"
#include "decontext/json.hpp"
#include "decontext/model.hpp"

namespace decontext {

void reject_unknown_keys(const Json& obj, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!obj.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(std::string(where) + ": unknown key \"" + key + "\"");
    }
  }
}

Json model_config_to_json(const ModelConfig& c) {
  return Json{{"hidden_dim", c.hidden_dim},       {"heads", c.heads},       {"double_blocks", c.double_blocks},
              {"single_blocks", c.single_blocks}, {"image_side", c.image_side}, {"patch", c.patch},
              {"text_tokens", c.text_tokens},     {"vocab", c.vocab},       {"mlp_ratio", c.mlp_ratio},
              {"timesteps", c.timesteps}};
}

ModelConfig model_config_from_json(const Json& obj) {
  reject_unknown_keys(obj,
                      {"hidden_dim", "heads", "double_blocks", "single_blocks", "image_side", "patch", "text_tokens",
                       "vocab", "mlp_ratio", "timesteps"},
                      "model");
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (!obj.contains(key)) return;
    try {
      obj.at(key).get_to(field);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("model.") + key + ": " + e.what());
    }
  };
  get("hidden_dim", c.hidden_dim);
  get("heads", c.heads);
  get("double_blocks", c.double_blocks);
  get("single_blocks", c.single_blocks);
  get("image_side", c.image_side);
  get("patch", c.patch);
  get("text_tokens", c.text_tokens);
  get("vocab", c.vocab);
  get("mlp_ratio", c.mlp_ratio);
  get("timesteps", c.timesteps);
  c.validate();
  return c;
}

Checkpoint Checkpoint::from_model(const Model& model, TrainingMeta meta) {
  Checkpoint ck;
  ck.config = model.config();
  for (const auto& [name, t] : model.parameters()) {
    Tensor copy(t.shape(), t.values());
    ck.parameters.emplace(name, std::move(copy));
  }
  ck.meta = meta;
  return ck;
}

Model Checkpoint::to_model() const {
  Model model(config);
  for (auto& [name, t] : model.parameters()) {
    auto it = parameters.find(name);
    if (it == parameters.end()) throw IoError("checkpoint is missing parameter " + name);
    if (it->second.shape() != t.shape()) {
      throw ShapeError("checkpoint parameter " + name + " has shape " + shape_to_string(it->second.shape()) +
                       ", model expects " + shape_to_string(t.shape()));
    }
    t = Tensor(it->second.shape(), it->second.values());
  }
  if (parameters.size() != model.parameters().size()) throw IoError("checkpoint holds unexpected parameters");
  return model;
}

void Checkpoint::save(const std::filesystem::path& dir) const {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  Json index = Json::array();
  for (const auto& [name, t] : parameters) {
    const std::string file = name + ".dctx";
    write_dctx(dir / file, t);
    index.push_back(Json{{"name", name}, {"file", file}, {"shape", t.shape()}});
  }
  Json manifest{{"format", "decontext-checkpoint"},
                {"version", 1},
                {"config", model_config_to_json(config)},
                {"training", Json{{"steps", meta.steps}, {"final_loss", meta.final_loss}, {"seed", meta.seed}}},
                {"parameters", index}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint Checkpoint::load(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  Json manifest;
  try {
    const auto bytes = read_file(manifest_path);
    manifest = Json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest_path.string() + ": " + e.what());
  }
  try {
    if (manifest.at("format") != "decontext-checkpoint") throw IoError(manifest_path.string() + ": not a checkpoint manifest");
    Checkpoint ck;
    ck.config = model_config_from_json(manifest.at("config"));
    const auto& tr = manifest.at("training");
    ck.meta.steps = tr.at("steps").get<std::uint64_t>();
    ck.meta.final_loss = tr.at("final_loss").get<double>();
    ck.meta.seed = tr.at("seed").get<std::uint64_t>();
    for (const auto& entry : manifest.at("parameters")) {
      const auto name = entry.at("name").get<std::string>();
      auto t = read_dctx(dir / entry.at("file").get<std::string>());
      if (t.shape() != entry.at("shape").get<Shape>()) throw IoError("shape mismatch for parameter " + name);
      if (!ck.parameters.emplace(name, std::move(t)).second) throw IoError("duplicate parameter " + name);
    }
    ck.to_model();  // validates names and shapes against the config
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest_path.string() + ": " + e.what());
  }
}

}  // namespace decontext
