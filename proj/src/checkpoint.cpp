#include "us3l/checkpoint.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "config_json.hpp"
#include "json_strict.hpp"

namespace us3l {

using nlohmann::json;

void save_checkpoint(const std::string& path, SlimmableEncoder& encoder,
                     const CheckpointMeta& meta) {
  json params = json::array();
  for (auto& [name, tensor] : encoder.named_parameters()) {
    params.push_back(
        json{{"name", name},
             {"shape", tensor.shape()},
             {"data", std::vector<double>(tensor.data().begin(),
                                          tensor.data().end())}});
  }

  json stats = json::array();
  for (SlimmableNorm* norm : encoder.norm_layers()) {
    for (const auto& [active, rs] : norm->stats) {
      if (rs.count == 0) continue;
      stats.push_back(json{{"layer", norm->name},
                           {"active", active},
                           {"count", rs.count},
                           {"mean", rs.mean},
                           {"m2", rs.m2}});
    }
  }

  json j{{"version", meta.version},
         {"seed", meta.seed},
         {"iteration", meta.iteration},
         {"encoder_spec", detail::encoder_spec_to_json(encoder.spec())},
         {"head_mode", to_string(encoder.spec().head_mode)},
         {"params", std::move(params)},
         {"norm_stats", std::move(stats)}};

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << j.dump();
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  json j;
  try {
    std::stringstream ss;
    ss << in.rdbuf();
    j = json::parse(ss.str());
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint parse error in " + path + ": " +
                             e.what());
  }

  detail::StrictObject o(j, "checkpoint");
  CheckpointMeta meta;
  meta.version = o.require<int>("version");
  if (meta.version != 1)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(meta.version));
  meta.seed = o.get<uint64_t>("seed", 0);
  meta.iteration = o.get<int64_t>("iteration", 0);

  EncoderSpec spec =
      detail::encoder_spec_from_json(o.child("encoder_spec"), "encoder_spec");
  spec.head_mode = head_mode_from_string(o.require<std::string>("head_mode"));

  SlimmableEncoder encoder(spec, 0);

  std::map<std::string, Tensor> by_name;
  for (auto& [name, tensor] : encoder.named_parameters())
    by_name.emplace(name, tensor);

  const json& params = o.child("params");
  std::size_t restored = 0;
  for (const json& p : params) {
    const auto name = p.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint parameter '" + name +
                               "' does not exist in the architecture");
    const auto shape = p.at("shape").get<Shape>();
    if (shape != it->second.shape())
      throw std::runtime_error("checkpoint parameter '" + name +
                               "' has shape " + shape_to_string(shape) +
                               ", expected " +
                               shape_to_string(it->second.shape()));
    const auto data = p.at("data").get<std::vector<double>>();
    if (static_cast<int64_t>(data.size()) != it->second.numel())
      throw std::runtime_error("checkpoint parameter '" + name +
                               "' has wrong element count");
    auto dst = it->second.mutable_data();
    std::copy(data.begin(), data.end(), dst.begin());
    ++restored;
  }
  if (restored != by_name.size())
    throw std::runtime_error("checkpoint restored " + std::to_string(restored) +
                             " parameters, architecture has " +
                             std::to_string(by_name.size()));

  std::map<std::string, SlimmableNorm*> norms;
  for (SlimmableNorm* n : encoder.norm_layers()) norms.emplace(n->name, n);
  for (const json& s : o.child("norm_stats")) {
    const auto layer = s.at("layer").get<std::string>();
    auto it = norms.find(layer);
    if (it == norms.end())
      throw std::runtime_error("checkpoint stats for unknown layer '" + layer +
                               "'");
    RunningStats rs;
    rs.count = s.at("count").get<int64_t>();
    rs.mean = s.at("mean").get<std::vector<double>>();
    rs.m2 = s.at("m2").get<std::vector<double>>();
    if (rs.mean.size() != rs.m2.size())
      throw std::runtime_error("checkpoint stats for '" + layer +
                               "' are inconsistent");
    it->second->stats[s.at("active").get<int64_t>()] = std::move(rs);
  }
  o.finish();

  return LoadedCheckpoint{meta, std::move(encoder)};
}

}  // namespace us3l
