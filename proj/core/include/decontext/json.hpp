#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "decontext/model.hpp"

namespace decontext {

using Json = nlohmann::ordered_json;

/// Throws ConfigError if `obj` is not an object or holds a key outside `allowed`.
void reject_unknown_keys(const Json& obj, std::initializer_list<std::string_view> allowed, std::string_view where);

Json model_config_to_json(const ModelConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig model_config_from_json(const Json& obj);

}  // namespace decontext
