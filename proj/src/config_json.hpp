#pragma once

#include <string>

#include "json.hpp"
#include "us3l/nn.hpp"

// Shared JSON (de)serialization of the encoder architecture, used by both the
// experiment-config loader and the checkpoint format.

namespace us3l::detail {

nlohmann::json encoder_spec_to_json(const EncoderSpec& spec);
EncoderSpec encoder_spec_from_json(const nlohmann::json& j,
                                   const std::string& path);

}  // namespace us3l::detail
