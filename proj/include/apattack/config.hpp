#pragma once

// Run configuration: YAML in, dotted `--key value` overrides on top, a typed
// RunConfig out. Every key must exist in the defaults.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "apattack/attack.hpp"
#include "apattack/encoders.hpp"
#include "apattack/inversion.hpp"
#include "apattack/synthdata.hpp"

namespace apattack {

inline constexpr std::string_view kToolkitVersion = "0.1.0";

// Shipped data directory; the APATTACK_DATA_DIR environment variable wins.
std::filesystem::path data_directory();

struct RunConfig {
  std::uint64_t seed = 0;  // stage 1 and stage 2 initialisation and sampling
  std::string output_dir = "runs/default";

  struct JointSpaceSection {
    JointSpaceConfig space = [] {
      JointSpaceConfig c;
      c.text_pooling = TextPooling::kPositional;
      return c;
    }();
    std::string reference = "aligned";  // aligned | random, used when weights is empty
    std::uint64_t seed = 0;
    std::string weights;  // encoders checkpoint
  } joint_space;

  struct PromptSection {
    std::string template_text{kDefaultTemplateText};
    std::string vocabulary;            // empty: shipped vocab.json
    std::string attribute_vocabulary;  // empty: shipped attribute_vocab.json
  } prompt;

  struct DataSection {
    std::string root;  // dataset folder; empty renders the synthetic set in memory
    SyntheticSpec synthetic;  // height/width follow joint_space
  } data;

  InversionTrainConfig stage1;  // seed follows the top-level seed

  struct Stage2Section {
    AttackConfig attack;  // seed follows the top-level seed
    GeneratorVariant generator = GeneratorVariant::kReference;
  } stage2;

  struct SurrogateSection {
    std::string kind = "handcrafted";
    std::uint64_t seed = 0;
    std::size_t output_dim = 32;
  } surrogate;

  struct EvaluationSection {
    std::string distance = "cosine";
    bool exclude_same_camera = true;
    std::string defense = "none";
    std::vector<std::string> victims{"handcrafted"};  // handcrafted | joint
    bool clean_only = false;
    std::uint64_t seed = 0;  // defense randomness
  } evaluation;

  struct AttackSection {
    std::string input_dir;
    std::string output_dir;  // empty: <output_dir>/attack/images
  } attack;

  struct InterpretSection {
    std::string split = "test";  // train | query | gallery | test | all
    std::size_t top_k = 2;
  } interpret;

  struct CheckpointSection {
    std::string encoders;   // empty: <output_dir>/train-inversion/encoders.ckpt
    std::string inversion;  // empty: <output_dir>/train-inversion/inversion.ckpt
    std::string generator;  // empty: <output_dir>/train-attack/generator.ckpt
  } checkpoints;

  nlohmann::ordered_json to_json() const;
  // Strict: unknown keys and wrong types raise ConfigError naming the key.
  static RunConfig from_json(const nlohmann::ordered_json& j);
  // Range and consistency checks that need no filesystem access.
  void validate() const;
  // SHA-256 over every setting except filesystem paths.
  std::string digest() const;

  std::filesystem::path vocabulary_path() const;
  std::filesystem::path attribute_vocabulary_path() const;
  std::filesystem::path encoders_path() const;
  std::filesystem::path inversion_path() const;
  std::filesystem::path generator_path() const;
  std::filesystem::path command_dir(std::string_view command) const;
  SyntheticSpec synthetic_spec() const;
  InversionTrainConfig stage1_config() const;
  AttackConfig stage2_config() const;
};

// Override flags as (dotted key, raw value) pairs in command-line order.
using ConfigOverrides = std::vector<std::pair<std::string, std::string>>;

// Accepts `--key value` and `--key=value`; anything else is a ConfigError.
ConfigOverrides parse_override_args(std::span<const std::string> args);

// Defaults, then the YAML file (if any), then overrides, then validate().
RunConfig load_run_config(const std::filesystem::path& yaml_path, const ConfigOverrides& overrides = {});
RunConfig run_config_from_yaml(std::string_view yaml_text, const ConfigOverrides& overrides = {});

std::string to_yaml(const RunConfig& config);
// Defaults as YAML text.
std::string default_config_yaml();

}  // namespace apattack
