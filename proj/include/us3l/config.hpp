#pragma once

#include <string>

#include "us3l/trainer.hpp"

// JSON experiment configs. Loading is strict: unknown keys anywhere in the
// document are rejected, and every TrainConfig field has exactly one source,
// an explicit value or its documented default. Serializing a loaded config
// therefore spells out every setting.

namespace us3l {

TrainConfig load_train_config_text(const std::string& json_text);
TrainConfig load_train_config_file(const std::string& path);

std::string train_config_to_json_text(const TrainConfig& config,
                                      int indent = 2);

std::string to_string(TargetMode mode);
TargetMode target_mode_from_string(const std::string& s);

}  // namespace us3l
