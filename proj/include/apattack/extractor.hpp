#pragma once

// Pluggable frozen image -> feature maps used as attack surrogates and as
// retrieval victims.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "apattack/autograd.hpp"
#include "apattack/encoders.hpp"
#include "apattack/image.hpp"

namespace apattack {

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  virtual std::string name() const = 0;
  // [N,3,H,W] -> [N,D]; differentiable w.r.t. the pixels.
  virtual ag::Var forward(const ag::Var& images) const = 0;
  virtual std::string checksum() const = 0;

  // Batched in chunks; validates pixel ranges.
  std::vector<FeatureVector> extract(std::span<const Image> images) const;
};

// The joint space's visual encoder viewed as a retrieval model.
class VisualEncoderExtractor : public FeatureExtractor {
 public:
  explicit VisualEncoderExtractor(std::shared_ptr<const VisualEncoder> encoder, std::string name = "joint-visual")
      : encoder_(std::move(encoder)), name_(std::move(name)) {}

  std::string name() const override { return name_; }
  ag::Var forward(const ag::Var& images) const override { return encoder_->forward(images); }
  std::string checksum() const override { return encoder_->checksum(); }

 private:
  std::shared_ptr<const VisualEncoder> encoder_;
  std::string name_;
};

}  // namespace apattack
