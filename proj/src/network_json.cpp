#include "ulm/network.hpp"

#include <json.hpp>

namespace ulm {

namespace {

using nlohmann::json;

AxisVec axes_from_json(const json& arr, const char* field) {
  if (!arr.is_array() || arr.empty())
    throw std::invalid_argument(std::string("network config: '") + field +
                                "' must be a non-empty array");
  AxisVec v(static_cast<Eigen::Index>(arr.size()));
  for (std::size_t i = 0; i < arr.size(); ++i)
    v[static_cast<Eigen::Index>(i)] = arr[i].get<std::int32_t>();
  return v;
}

json axes_to_json(const AxisVec& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

}  // namespace

NetworkConfig parse_network_config(const std::string& json_text) {
  json doc = json::parse(json_text);
  NetworkConfig cfg;
  cfg.name = doc.value("name", "net");
  cfg.spatial_dims = doc.at("spatial_dims").get<int>();
  cfg.upscale = doc.at("upscale").get<int>();
  cfg.input_channels = doc.at("input_channels").get<int>();
  cfg.input_frames = doc.at("input_frames").get<int>();
  cfg.intermediate_loss_weight = doc.value("intermediate_loss_weight", 1.0);
  const Eigen::Index axes = cfg.data_axes();
  for (const auto& jl : doc.at("layers")) {
    LayerSpec l;
    const std::string type = jl.at("type").get<std::string>();
    if (type == "conv") {
      l.kind = LayerKind::kConv;
      l.kernel = axes_from_json(jl.at("kernel"), "kernel");
      l.stride = jl.contains("stride") ? axes_from_json(jl.at("stride"), "stride")
                                       : AxisVec::Ones(axes);
      l.dilation = jl.contains("dilation")
                       ? axes_from_json(jl.at("dilation"), "dilation")
                       : AxisVec::Ones(axes);
      l.out_channels = jl.at("out_channels").get<int>();
      l.relu = jl.value("relu", false);
    } else if (type == "upsample") {
      l.kind = LayerKind::kUpsample;
      l.kernel = axes_from_json(jl.at("factor"), "factor");
      l.out_channels = jl.at("out_channels").get<int>();
      l.relu = jl.value("relu", false);
    } else if (type == "classifier") {
      l.kind = LayerKind::kClassifier;
      l.level = jl.value("level", -1);
    } else if (type == "prune") {
      l.kind = LayerKind::kPrune;
      l.keep_threshold = jl.value("keep_threshold", 0.5);
    } else {
      throw std::invalid_argument("network config: unknown layer type '" + type + "'");
    }
    cfg.layers.push_back(std::move(l));
  }
  cfg.validate();
  return cfg;
}

NetworkConfig load_network_config(const std::string& path) {
  const auto bytes = read_file(path);
  return parse_network_config(std::string(bytes.begin(), bytes.end()));
}

std::string network_config_to_json(const NetworkConfig& cfg) {
  json doc;
  doc["name"] = cfg.name;
  doc["spatial_dims"] = cfg.spatial_dims;
  doc["upscale"] = cfg.upscale;
  doc["input_channels"] = cfg.input_channels;
  doc["input_frames"] = cfg.input_frames;
  doc["intermediate_loss_weight"] = cfg.intermediate_loss_weight;
  json layers = json::array();
  for (const auto& l : cfg.layers) {
    json jl;
    switch (l.kind) {
      case LayerKind::kConv:
        jl["type"] = "conv";
        jl["kernel"] = axes_to_json(l.kernel);
        jl["stride"] = axes_to_json(l.stride);
        jl["dilation"] = axes_to_json(l.dilation);
        jl["out_channels"] = l.out_channels;
        jl["relu"] = l.relu;
        break;
      case LayerKind::kUpsample:
        jl["type"] = "upsample";
        jl["factor"] = axes_to_json(l.kernel);
        jl["out_channels"] = l.out_channels;
        jl["relu"] = l.relu;
        break;
      case LayerKind::kClassifier:
        jl["type"] = "classifier";
        jl["level"] = l.level;
        break;
      case LayerKind::kPrune:
        jl["type"] = "prune";
        jl["keep_threshold"] = l.keep_threshold;
        break;
    }
    layers.push_back(std::move(jl));
  }
  doc["layers"] = std::move(layers);
  return doc.dump();
}

}  // namespace ulm
