#pragma once

#include <string>
#include <vector>

#include "musiq/common.hpp"

namespace musiq {

enum class PatchEncoderKind { Linear, SimpleConv, ResNet5 };
enum class SpatialMode { HseLearned, HseSinusoidal, FixedLength, None };
enum class HeadKind { Scalar, Distribution };

std::string to_string(PatchEncoderKind k);
std::string to_string(SpatialMode m);
std::string to_string(HeadKind h);
PatchEncoderKind patch_encoder_from_string(const std::string& s);
SpatialMode spatial_mode_from_string(const std::string& s);
HeadKind head_kind_from_string(const std::string& s);

// Everything needed to rebuild the model. Defaults follow the reference
// setup: P=32, D=384, G=10, scales (224, 384), l=512, "small" encoder.
struct ModelConfig {
  int patch_size = 32;      // P
  int hidden_dim = 384;     // D
  int grid_size = 10;       // G
  std::vector<int> scales = {224, 384};  // L_k, strictly increasing
  int max_patches = 512;    // l, native-segment capacity
  bool include_native = true;
  int depth = 14;
  int heads = 6;
  int mlp_dim = 1152;
  PatchEncoderKind patch_encoder = PatchEncoderKind::ResNet5;
  SpatialMode spatial = SpatialMode::HseLearned;
  HeadKind head = HeadKind::Scalar;
  int buckets = 10;  // B, distribution head only
  int conv_channels = 64;
  int gn_groups = 8;

  int num_scales() const { return static_cast<int>(scales.size()); }  // K
  int head_dim() const { return hidden_dim / heads; }                 // D_h
  std::vector<int> capacities() const;  // m_k = (L_k / P)^2
  int total_slots() const;              // 1 + l + sum m_k (padded layout)
  void validate() const;

  // "small" (14, 384, 1152, 6), "medium" (8, 768, 2358, 8),
  // "large" (12, 768, 3072, 12).
  void apply_preset(const std::string& name);

  std::string to_json() const;  // canonical (sorted keys, no whitespace)
  static ModelConfig from_json(const std::string& json);
  static ModelConfig from_json_file(const std::string& path);
};

}  // namespace musiq
