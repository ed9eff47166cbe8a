#pragma once

// nlohmann::json adapters for library types; private to the implementation.

#include <json.hpp>

#include "aligndiff/augmentation.hpp"
#include "aligndiff/toytask.hpp"

namespace aligndiff {

void to_json(nlohmann::json& j, const TaskConfig& c);
void from_json(const nlohmann::json& j, TaskConfig& c);

void to_json(nlohmann::json& j, const SceneObject& o);
void from_json(const nlohmann::json& j, SceneObject& o);

void to_json(nlohmann::json& j, const Condition& c);
void from_json(const nlohmann::json& j, Condition& c);

void to_json(nlohmann::json& j, const AugmentationSpec& s);
void from_json(const nlohmann::json& j, AugmentationSpec& s);

}  // namespace aligndiff
