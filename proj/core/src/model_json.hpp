// Internal JSON (de)serialization for model configs, shared between the
// checkpoint code and the experiment harness. Not installed.
#pragma once

#include "hta/model.hpp"
#include "json.hpp"

namespace hta {

nlohmann::json attachment_to_json(const AttachmentConfig& a);
AttachmentConfig attachment_from_json(const nlohmann::json& j);
nlohmann::json model_config_to_json(const ModelConfig& m);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace hta
