#pragma once

// Attribute inversion networks f_1..f_I (image feature -> one pseudo-token
// per attribute slot), their identity-aware contrastive loss and the
// stage-1 training loop.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "apattack/encoders.hpp"
#include "apattack/nn.hpp"
#include "apattack/prompt.hpp"
#include "apattack/rng.hpp"
#include "apattack/synthdata.hpp"

namespace apattack {

struct InversionShape {
  std::size_t slots = 5;
  std::size_t feature_dim = 32;
  std::size_t token_dim = 32;
  std::size_t hidden = 64;  // both hidden layers

  static InversionShape for_space(const JointSpaceConfig& config, std::size_t slots = 5);
  nlohmann::json to_json() const;
  static InversionShape from_json(const nlohmann::json& j);
  bool operator==(const InversionShape&) const = default;
};

// Per slot: linear d->h, SiLU, linear h->h, SiLU, linear h->E.
// Arrays: slot<i>.fc<k>.weight [out,in] and slot<i>.fc<k>.bias, i from 1.
class InversionNetworks {
 public:
  // Seeded uniform fan-in initialisation; zero_final_layer zeroes fc3.
  InversionNetworks(InversionShape shape, std::uint64_t seed, bool zero_final_layer = false);
  InversionNetworks(InversionShape shape, const nn::ArrayList& arrays);

  PseudoTokenSet invert(const FeatureVector& v) const;
  std::vector<PseudoTokenSet> invert_batch(std::span<const FeatureVector> feats) const;
  // [N,d] -> one [N,E] batch per slot.
  std::vector<ag::Var> forward(const ag::Var& feats) const;

  const InversionShape& shape() const { return shape_; }
  nn::ParameterList& parameters() { return params_; }
  const nn::ParameterList& parameters() const { return params_; }
  void set_trainable(bool trainable) { params_.set_trainable(trainable); }
  bool frozen() const { return !params_.trainable(); }
  std::string checksum() const { return params_.checksum(); }

 private:
  void declare();

  InversionShape shape_;
  nn::ParameterList params_;
};

void save_inversion(const std::filesystem::path& path, const InversionNetworks& nets,
                    const std::string& config_digest = {});
InversionNetworks load_inversion(const std::filesystem::path& path);

// Inject each sample's pseudo-tokens into the template and encode: [N,d].
ag::Var compose_prompt_batch(std::span<const ag::Var> slot_tokens, const TokenizedPrompt& prompt,
                             const TextEncoder& text);
std::vector<FeatureVector> compose_prompt_batch(std::span<const PseudoTokenSet> pseudo, const TokenizedPrompt& prompt,
                                                const TextEncoder& text);

struct InversionLossTerms {
  ag::Var image_to_text;
  ag::Var text_to_image;
  ag::Var total;
};

// Negative mean log-softmax over each anchor's same-pid positives, averaged
// over anchors, in both directions and summed. include_self keeps the anchor
// in its own positive set.
InversionLossTerms inversion_contrastive_terms(const ag::Var& image_feats, const ag::Var& text_feats,
                                               std::span<const int> pids, double tau, bool include_self = true);
ag::Var inversion_contrastive_loss(const ag::Var& image_feats, const ag::Var& text_feats, std::span<const int> pids,
                                   double tau, bool include_self = true);

// P identities x K instances per batch. Every identity's samples are shuffled
// and cut into K-sized chunks; batches draw chunks from up to P distinct
// identities. Batches with fewer than min_identities identities are dropped.
std::vector<std::vector<std::size_t>> identity_batches(std::span<const int> pids, std::size_t p, std::size_t k,
                                                       Rng& rng, std::size_t min_identities = 1);

struct InversionTrainConfig {
  std::size_t epochs = 20;
  std::size_t identities_per_batch = 4;  // P
  std::size_t instances_per_identity = 2;  // K
  double learning_rate = 2e-4;
  double tau = 0.07;
  bool include_self = true;
  std::uint64_t seed = 0;
};

struct InversionEpochLog {
  std::size_t epoch = 0;  // 0 is the untrained network over the first epoch's batches
  double image_to_text = 0.0;
  double text_to_image = 0.0;
  double total = 0.0;
};

struct InversionTrainResult {
  std::vector<InversionEpochLog> log;
  std::size_t steps = 0;
};

// Stage 1: trains nets in place with the encoders frozen; nets are frozen on
// return.
InversionTrainResult train_inversion(std::span<const Sample> samples, const JointSpace& space,
                                     InversionNetworks& nets, const TokenizedPrompt& prompt,
                                     const InversionTrainConfig& config);

void write_inversion_log(const std::filesystem::path& path, const std::vector<InversionEpochLog>& log);

// Helpers for [N,D] batches of feature vectors.
ag::Tensor features_to_tensor(std::span<const FeatureVector> feats);
std::vector<FeatureVector> tensor_to_features(const ag::Tensor& t);

}  // namespace apattack
