#pragma once

#include <string>

#include "bifit/error.hpp"

namespace bifit {

enum class Fusion { AttentionMultiply, AttentionFfn };
enum class VewlText { Fixed, Dynamic };

inline std::string to_string(Fusion f) { return f == Fusion::AttentionMultiply ? "attention_multiply" : "attention_ffn"; }
inline std::string to_string(VewlText v) { return v == VewlText::Fixed ? "fixed" : "dynamic"; }
inline Fusion parse_fusion(const std::string& s) {
  if (s == "attention_multiply") return Fusion::AttentionMultiply;
  if (s == "attention_ffn") return Fusion::AttentionFfn;
  throw ConfigError("unknown fusion '" + s + "' (expected attention_multiply|attention_ffn)");
}
inline VewlText parse_vewl_text(const std::string& s) {
  if (s == "fixed") return VewlText::Fixed;
  if (s == "dynamic") return VewlText::Dynamic;
  throw ConfigError("unknown vewl_text '" + s + "' (expected fixed|dynamic)");
}

/// Architecture hyper-parameters and component switches.
struct ModelConfig {
  int channels = 64;        // C
  int heads = 4;
  int encoder_layers = 4;   // E
  int decoder_layers = 4;   // D
  int queries = 5;          // N, per frame
  int levels = 4;           // N_l
  int mask_channels = 8;    // C_mid of the dynamic convolution
  int ffn_dim = 128;
  int stem1 = 16;           // stride-2 stage width
  int stem2 = 32;           // stride-4 stage width
  int norm_groups = 8;
  int text_layers = 2;
  int vocab_size = 16;
  int max_words = 12;       // L_max

  bool ifi_enabled = true;
  bool vewl_enabled = true;
  bool lewv_enabled = true;
  Fusion fusion = Fusion::AttentionMultiply;
  VewlText vewl_text = VewlText::Fixed;
  // Decoder-to-IFI layer ratio a:b, i.e. b IFI layers after every a decoder layers.
  int ifi_ratio_decoder = 1;
  int ifi_ratio_ifi = 1;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (channels <= 0 || channels % 4 != 0) fail("model.channels must be a positive multiple of 4");
    if (heads <= 0 || channels % heads != 0) fail("model.heads must divide model.channels");
    if (encoder_layers < 0 || decoder_layers < 0) fail("layer counts must be non-negative");
    if (queries < 1) fail("model.queries must be >= 1");
    if (levels != 4) fail("model.levels must be 4 (strides 8,16,32,64)");
    if (mask_channels < 1) fail("model.mask_channels must be >= 1");
    if (ffn_dim < 1 || stem1 < 1 || stem2 < 1) fail("widths must be positive");
    if (norm_groups < 1 || stem1 % norm_groups || stem2 % norm_groups || channels % norm_groups)
      fail("model.norm_groups must divide every convolution width");
    if (vocab_size < 1 || max_words < 1) fail("vocabulary and max_words must be positive");
    if (ifi_ratio_decoder < 1 || ifi_ratio_ifi < 1) fail("model.ifi_ratio terms must be >= 1");
  }
};

}  // namespace bifit
