#pragma once

// Stage 2: the perturbation generator G, the epsilon projection, the
// per-attribute semantic triplet loss, the surrogate triplet loss and the
// attack training loop.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "apattack/encoders.hpp"
#include "apattack/extractor.hpp"
#include "apattack/image.hpp"
#include "apattack/inversion.hpp"
#include "apattack/nn.hpp"
#include "apattack/synthdata.hpp"

namespace apattack {

inline constexpr double kDefaultEpsilon = 8.0 / 255.0;

enum class GeneratorVariant {
  kReference,  // 3 stride-2 down blocks, 4 residual blocks, 3 upsampling blocks
  kTiny,       // 1 down block, 1 up block
};

std::string to_string(GeneratorVariant v);
GeneratorVariant parse_generator_variant(std::string_view text);

// Encoder-decoder CNN with 3x3 convolutions and SiLU; the tanh head bounds
// the raw output in (-1, 1). Input images are mapped to [-1, 1] first.
class PerturbationGenerator {
 public:
  PerturbationGenerator(GeneratorVariant variant, std::uint64_t seed);
  PerturbationGenerator(GeneratorVariant variant, const nn::ArrayList& arrays);

  // [N,3,H,W] -> tanh-bounded field of the same shape.
  ag::Var forward(const ag::Var& images) const;

  GeneratorVariant variant() const { return variant_; }
  // H and W must be multiples of this.
  std::size_t size_multiple() const;
  nn::ParameterList& parameters() { return params_; }
  const nn::ParameterList& parameters() const { return params_; }
  void set_trainable(bool trainable) { params_.set_trainable(trainable); }
  std::string checksum() const { return params_.checksum(); }

 private:
  struct Conv {
    std::string name;
    std::size_t in, out, stride;
  };
  void declare();
  ag::Var conv(const ag::Var& x, const Conv& c) const;

  GeneratorVariant variant_;
  std::vector<Conv> down_, res_, up_;
  Conv stem_{}, head_{};
  nn::ParameterList params_;
};

void save_generator(const std::filesystem::path& path, const PerturbationGenerator& g,
                    const std::string& config_digest = {});
PerturbationGenerator load_generator(const std::filesystem::path& path);

// x' = clip(x + epsilon * G(x), 0, 1).
ag::Var apply_perturbation(const PerturbationGenerator& g, const ag::Var& images, double epsilon);
Image apply_perturbation(const PerturbationGenerator& g, const Image& image, double epsilon);
std::vector<Image> apply_perturbation(const PerturbationGenerator& g, std::span<const Image> images, double epsilon);

enum class NegativeMetric { kL2, kCosine };

std::string to_string(NegativeMetric m);
NegativeMetric parse_negative_metric(std::string_view text);

// Per anchor: the different-pid row farthest in L2 (or least cosine-similar).
// Ties keep the lowest index.
std::vector<std::size_t> hardest_negative(const ag::Tensor& anchors, std::span<const int> pids,
                                          NegativeMetric metric = NegativeMetric::kL2);
std::vector<std::size_t> hardest_negative(std::span<const std::vector<double>> anchors, std::span<const int> pids,
                                          NegativeMetric metric = NegativeMetric::kL2);

// mean_n max(0, |adv_n - clean_neg(n)| - |adv_n - clean_n| + alpha), the
// negative chosen in the clean space.
ag::Var triplet_attack_term(const ag::Var& clean, const ag::Var& adv, std::span<const int> pids, double alpha,
                            NegativeMetric metric = NegativeMetric::kL2);

// Sum over attribute spaces of the per-space term; one [N,E] batch per slot.
ag::Var semantic_attack_loss(std::span<const ag::Var> clean_tokens, std::span<const ag::Var> adv_tokens,
                             std::span<const int> pids, double alpha, NegativeMetric metric = NegativeMetric::kL2);
double semantic_attack_loss(std::span<const PseudoTokenSet> clean, std::span<const PseudoTokenSet> adv,
                            std::span<const int> pids, double alpha, NegativeMetric metric = NegativeMetric::kL2);

ag::Var surrogate_attack_loss(const ag::Var& clean_feats, const ag::Var& adv_feats, std::span<const int> pids,
                              double alpha, NegativeMetric metric = NegativeMetric::kL2);
double surrogate_attack_loss(std::span<const FeatureVector> clean, std::span<const FeatureVector> adv,
                             std::span<const int> pids, double alpha, NegativeMetric metric = NegativeMetric::kL2);

// surrogate_weight * L_M + semantic_weight * L_S.
ag::Var total_loss(const ag::Var& surrogate_term, const ag::Var& semantic_term, double surrogate_weight = 1.0,
                   double semantic_weight = 1.0);
double total_loss(double surrogate_term, double semantic_term, double surrogate_weight = 1.0,
                  double semantic_weight = 1.0);

struct AttackConfig {
  double epsilon = kDefaultEpsilon;
  double alpha = 0.3;
  double learning_rate = 2e-4;
  std::size_t epochs = 10;
  std::size_t identities_per_batch = 4;
  std::size_t instances_per_identity = 2;
  NegativeMetric metric = NegativeMetric::kL2;
  double surrogate_weight = 1.0;
  double semantic_weight = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AttackEpochLog {
  std::size_t epoch = 0;  // 0 is the untrained generator over the first epoch's batches
  double surrogate = 0.0;
  double semantic = 0.0;
  double total = 0.0;
};

struct AttackTrainResult {
  std::vector<AttackEpochLog> log;
  std::size_t steps = 0;
};

// Stage 2: trains g in place against the frozen joint space, inversion nets
// and surrogate; g is frozen on return.
AttackTrainResult train_attack(std::span<const Sample> samples, const JointSpace& space,
                               const InversionNetworks& nets, const FeatureExtractor& surrogate,
                               PerturbationGenerator& g, const AttackConfig& config);

void write_attack_log(const std::filesystem::path& path, const std::vector<AttackEpochLog>& log);

}  // namespace apattack
