#pragma once

// The frozen joint vision-language space: a visual encoder V (image -> v) and
// a text encoder T (token-embedding sequence -> t), both built from named
// float32 arrays that never change after construction.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "apattack/autograd.hpp"
#include "apattack/image.hpp"
#include "apattack/nn.hpp"
#include "apattack/prompt.hpp"

namespace apattack {

enum class TextPooling {
  kMean,        // mean over rows, then one projection
  kPositional,  // one projection per sequence position, summed
};

std::string to_string(TextPooling pooling);
TextPooling parse_text_pooling(std::string_view text);

struct JointSpaceConfig {
  std::size_t feature_dim = 32;
  std::size_t token_embedding_dim = 32;
  std::size_t max_sequence_length = 64;
  std::size_t image_height = 128;
  std::size_t image_width = 64;
  // Visual patch grid; image dimensions must be multiples of it.
  std::size_t patch_rows = 8;
  std::size_t patch_cols = 4;
  std::size_t visual_hidden = 64;
  TextPooling text_pooling = TextPooling::kMean;

  void validate() const;
  nlohmann::json to_json() const;
  static JointSpaceConfig from_json(const nlohmann::json& j);
  bool operator==(const JointSpaceConfig&) const = default;
};

struct FeatureVector {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  bool operator==(const FeatureVector&) const = default;
};

struct EncoderWeights {
  nn::ArrayList arrays;
  bool frozen = true;
};

// Patch average over the grid -> linear -> tanh -> linear to d.
// Arrays: visual.fc1.weight [hidden, 3*rows*cols] (input index
// c*rows*cols + r*cols + col), visual.fc1.bias, visual.fc2.weight [d, hidden],
// visual.fc2.bias.
class VisualEncoder {
 public:
  VisualEncoder(JointSpaceConfig config, const nn::ArrayList& arrays);

  FeatureVector encode(const Image& image) const;
  std::vector<FeatureVector> encode_batch(std::span<const Image> images) const;
  // [N,3,H,W] -> [N,d]; differentiable w.r.t. the pixels.
  ag::Var forward(const ag::Var& images) const;

  const JointSpaceConfig& config() const { return config_; }
  EncoderWeights weights() const { return {params_.to_arrays(), true}; }
  std::string checksum() const { return params_.checksum(); }

 private:
  JointSpaceConfig config_;
  nn::ParameterList params_;
};

// Token rows + positional rows, pooled, projected to d.
// Arrays: text.token_embedding [V,E], text.positional [Lmax,E],
// text.projection [d,E] (mean) or [Lmax,d,E] (positional), text.bias [d].
class TextEncoder {
 public:
  TextEncoder(JointSpaceConfig config, const nn::ArrayList& arrays);

  FeatureVector encode(const TokenEmbeddingSequence& sequence) const;
  // [N,L,E] -> [N,d]; differentiable w.r.t. every input row.
  ag::Var forward(const ag::Var& sequences) const;

  const ag::Tensor& token_embedding() const { return params_.at("token_embedding").value(); }
  std::size_t vocabulary_size() const { return token_embedding().dim(0); }
  const JointSpaceConfig& config() const { return config_; }
  EncoderWeights weights() const { return {params_.to_arrays(), true}; }
  std::string checksum() const { return params_.checksum(); }

 private:
  JointSpaceConfig config_;
  nn::ParameterList params_;
};

struct JointSpace {
  VisualEncoder visual;
  TextEncoder text;

  // Visual and text arrays with their "visual." / "text." prefixes.
  nn::ArrayList arrays() const;
  std::string checksum() const;
};

// Seeded random encoders of the configured shape (uniform fan-in weights).
// vocabulary_size sets the embedding table height.
JointSpace build_reference_encoders(std::uint64_t seed, const JointSpaceConfig& config,
                                    std::size_t vocabulary_size);

// Reference space for the shipped synthetic domain: region color signatures
// of images and color-word embeddings at the template's slot positions land
// in the same per-slot feature blocks, so a composed prompt naming the true
// colors encodes close to the image. Requires positional pooling, the
// domain's layout grid and every palette word in the vocabulary.
JointSpace build_aligned_reference_encoders(std::uint64_t seed, const JointSpaceConfig& config,
                                            const Vocabulary& vocab, const TokenizedPrompt& prompt);

void save_encoders(const std::filesystem::path& path, const JointSpace& space,
                   const std::string& config_digest = {});
// Loads a container written by save_encoders (or an external conversion in
// the same layout); architecture sizes come from the container metadata.
JointSpace load_encoder_adapter(const std::filesystem::path& path);

}  // namespace apattack
