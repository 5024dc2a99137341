#include "musiq/config.hpp"

#include <fstream>
#include <nlohmann/json.hpp>

namespace musiq {

using nlohmann::json;

std::string to_string(PatchEncoderKind k) {
  switch (k) {
    case PatchEncoderKind::Linear: return "linear";
    case PatchEncoderKind::SimpleConv: return "simple_conv";
    case PatchEncoderKind::ResNet5: return "resnet5";
  }
  return "?";
}

std::string to_string(SpatialMode m) {
  switch (m) {
    case SpatialMode::HseLearned: return "hse_learned";
    case SpatialMode::HseSinusoidal: return "hse_sinusoidal";
    case SpatialMode::FixedLength: return "fixed_length";
    case SpatialMode::None: return "none";
  }
  return "?";
}

std::string to_string(HeadKind h) {
  return h == HeadKind::Scalar ? "scalar" : "distribution";
}

PatchEncoderKind patch_encoder_from_string(const std::string& s) {
  if (s == "linear") return PatchEncoderKind::Linear;
  if (s == "simple_conv") return PatchEncoderKind::SimpleConv;
  if (s == "resnet5") return PatchEncoderKind::ResNet5;
  throw ConfigError("unknown patch encoder: " + s);
}

SpatialMode spatial_mode_from_string(const std::string& s) {
  if (s == "hse_learned") return SpatialMode::HseLearned;
  if (s == "hse_sinusoidal") return SpatialMode::HseSinusoidal;
  if (s == "fixed_length") return SpatialMode::FixedLength;
  if (s == "none") return SpatialMode::None;
  throw ConfigError("unknown spatial embedding mode: " + s);
}

HeadKind head_kind_from_string(const std::string& s) {
  if (s == "scalar") return HeadKind::Scalar;
  if (s == "distribution") return HeadKind::Distribution;
  throw ConfigError("unknown head kind: " + s);
}

std::vector<int> ModelConfig::capacities() const {
  std::vector<int> caps;
  for (int L : scales) caps.push_back((L / patch_size) * (L / patch_size));
  return caps;
}

int ModelConfig::total_slots() const {
  int n = 1 + (include_native ? max_patches : 0);
  for (int c : capacities()) n += c;
  return n;
}

void ModelConfig::validate() const {
  if (patch_size < 1) throw ConfigError("patch_size must be >= 1");
  if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
  if (grid_size < 1) throw ConfigError("grid_size must be >= 1");
  if (depth < 0) throw ConfigError("depth must be >= 0");
  if (heads < 1) throw ConfigError("heads must be >= 1");
  if (hidden_dim % heads != 0) throw ConfigError("hidden_dim must be divisible by heads");
  if (mlp_dim < 1) throw ConfigError("mlp_dim must be >= 1");
  if (include_native && max_patches < 1) throw ConfigError("max_patches must be >= 1");
  if (!include_native && scales.empty())
    throw ConfigError("at least one scale is required when the native image is excluded");
  if (buckets < 2 && head == HeadKind::Distribution)
    throw ConfigError("distribution head needs >= 2 buckets");
  if (spatial == SpatialMode::HseSinusoidal && hidden_dim % 4 != 0)
    throw ConfigError("sinusoidal spatial embedding needs hidden_dim divisible by 4");
  for (size_t k = 0; k < scales.size(); ++k) {
    if (scales[k] < 1) throw ConfigError("scale targets must be >= 1");
    if (scales[k] % patch_size != 0)
      throw ConfigError("scale target " + std::to_string(scales[k]) +
                        " must be a multiple of the patch size (guarantees n_k <= m_k)");
    if (k > 0 && scales[k] <= scales[k - 1])
      throw ConfigError("scales must be strictly increasing");
  }
  if (conv_channels % gn_groups != 0)
    throw ConfigError("conv_channels must be divisible by gn_groups");
}

void ModelConfig::apply_preset(const std::string& name) {
  if (name == "small") {
    depth = 14; hidden_dim = 384; mlp_dim = 1152; heads = 6;
  } else if (name == "medium") {
    depth = 8; hidden_dim = 768; mlp_dim = 2358; heads = 8;
  } else if (name == "large") {
    depth = 12; hidden_dim = 768; mlp_dim = 3072; heads = 12;
  } else {
    throw ConfigError("unknown preset: " + name);
  }
}

std::string ModelConfig::to_json() const {
  json j;
  j["patch_size"] = patch_size;
  j["hidden_dim"] = hidden_dim;
  j["grid_size"] = grid_size;
  j["scales"] = scales;
  j["max_patches"] = max_patches;
  j["include_native"] = include_native;
  j["depth"] = depth;
  j["heads"] = heads;
  j["mlp_dim"] = mlp_dim;
  j["patch_encoder"] = to_string(patch_encoder);
  j["spatial_embedding"] = to_string(spatial);
  j["head"] = to_string(head);
  j["buckets"] = buckets;
  j["conv_channels"] = conv_channels;
  j["gn_groups"] = gn_groups;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  ModelConfig c;
  try {
    if (j.contains("preset")) c.apply_preset(j["preset"].get<std::string>());
    if (j.contains("patch_size")) c.patch_size = j["patch_size"].get<int>();
    if (j.contains("hidden_dim")) c.hidden_dim = j["hidden_dim"].get<int>();
    if (j.contains("grid_size")) c.grid_size = j["grid_size"].get<int>();
    if (j.contains("scales")) c.scales = j["scales"].get<std::vector<int>>();
    if (j.contains("max_patches")) c.max_patches = j["max_patches"].get<int>();
    if (j.contains("include_native")) c.include_native = j["include_native"].get<bool>();
    if (j.contains("depth")) c.depth = j["depth"].get<int>();
    if (j.contains("heads")) c.heads = j["heads"].get<int>();
    if (j.contains("mlp_dim")) c.mlp_dim = j["mlp_dim"].get<int>();
    if (j.contains("patch_encoder"))
      c.patch_encoder = patch_encoder_from_string(j["patch_encoder"].get<std::string>());
    if (j.contains("spatial_embedding"))
      c.spatial = spatial_mode_from_string(j["spatial_embedding"].get<std::string>());
    if (j.contains("head")) c.head = head_kind_from_string(j["head"].get<std::string>());
    if (j.contains("buckets")) c.buckets = j["buckets"].get<int>();
    if (j.contains("conv_channels")) c.conv_channels = j["conv_channels"].get<int>();
    if (j.contains("gn_groups")) c.gn_groups = j["gn_groups"].get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field error: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_json(text);
}

}  // namespace musiq
