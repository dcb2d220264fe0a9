#include "daqe/model.hpp"

#include <set>

#include "daqe/pipeline.hpp"

namespace daqe::model {

std::string feature_name(ClusterFeature f) {
  switch (f) {
    case ClusterFeature::Defocus:
      return "defocus";
    case ClusterFeature::Frequency:
      return "frequency";
    case ClusterFeature::Psnr:
      return "psnr";
  }
  return "defocus";
}

ClusterFeature parse_feature(const std::string& name) {
  if (name == "defocus") return ClusterFeature::Defocus;
  if (name == "frequency") return ClusterFeature::Frequency;
  if (name == "psnr") return ClusterFeature::Psnr;
  throw ConfigError("unknown cluster feature '" + name + "' (defocus, frequency, psnr)");
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  need(clusters >= 1 && clusters <= 6, "clusters must be in [1, 6]");
  need(patch_size >= 4, "patch_size must be at least 4");
  need(patch_size % (std::size_t{1} << (clusters - 1)) == 0,
       "patch_size must be divisible by 2^(clusters-1)");
  need(token_size >= 1 && patch_size % token_size == 0, "token_size must divide patch_size");
  need(width >= 1 && denet_width >= 1, "widths must be positive");
  need(heads >= 1 && head_dim >= 1, "heads and head_dim must be positive");
  need(max_refs >= 1, "max_refs must be positive");
  need(fixed_exit <= clusters, "fixed_exit must not exceed clusters");
}

}  // namespace daqe::model

namespace daqe::pipeline {

using nlohmann::json;

json model_config_to_json(const ModelConfig& c) {
  return json{{"patch_size", c.patch_size},
              {"clusters", c.clusters},
              {"width", c.width},
              {"depth", c.depth},
              {"heads", c.heads},
              {"head_dim", c.head_dim},
              {"token_size", c.token_size},
              {"max_refs", c.max_refs},
              {"denet_width", c.denet_width},
              {"denet_depth", c.denet_depth},
              {"no_ca", c.no_ca},
              {"no_global_attn", c.no_global_attn},
              {"no_local_attn", c.no_local_attn},
              {"blind", c.blind},
              {"renorm_attention", c.renorm_attention},
              {"fixed_exit", c.fixed_exit},
              {"cluster_feature", model::feature_name(c.cluster_feature)}};
}

ModelConfig model_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "patch_size") c.patch_size = v.get<std::size_t>();
      else if (key == "clusters") c.clusters = v.get<std::size_t>();
      else if (key == "width") c.width = v.get<std::size_t>();
      else if (key == "depth") c.depth = v.get<std::size_t>();
      else if (key == "heads") c.heads = v.get<std::size_t>();
      else if (key == "head_dim") c.head_dim = v.get<std::size_t>();
      else if (key == "token_size") c.token_size = v.get<std::size_t>();
      else if (key == "max_refs") c.max_refs = v.get<std::size_t>();
      else if (key == "denet_width") c.denet_width = v.get<std::size_t>();
      else if (key == "denet_depth") c.denet_depth = v.get<std::size_t>();
      else if (key == "no_ca") c.no_ca = v.get<bool>();
      else if (key == "no_global_attn") c.no_global_attn = v.get<bool>();
      else if (key == "no_local_attn") c.no_local_attn = v.get<bool>();
      else if (key == "blind") c.blind = v.get<bool>();
      else if (key == "renorm_attention") c.renorm_attention = v.get<bool>();
      else if (key == "fixed_exit") c.fixed_exit = v.get<std::size_t>();
      else if (key == "cluster_feature") c.cluster_feature = model::parse_feature(v.get<std::string>());
      else throw ConfigError("unknown model config key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("model config key '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

}  // namespace daqe::pipeline
