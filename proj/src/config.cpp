#include "apattack/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <tuple>

#include <yaml-cpp/yaml.h>

#include "apattack/defenses.hpp"
#include "apattack/digest.hpp"
#include "apattack/errors.hpp"
#include "apattack/metrics.hpp"
#include "apattack/prompt.hpp"

#ifndef APATTACK_DATA_DIR
#define APATTACK_DATA_DIR "data"
#endif

namespace apattack {

namespace {

using ojson = nlohmann::ordered_json;

std::string join(const std::string& prefix, const std::string& key) { return prefix.empty() ? key : prefix + "." + key; }

std::string type_name(const ojson& schema) {
  if (schema.is_boolean()) return "a boolean";
  if (schema.is_number_unsigned()) return "a non-negative integer";
  if (schema.is_number()) return "a number";
  if (schema.is_string()) return "a string";
  if (schema.is_array()) return "a list";
  return "a mapping";
}

// JSON value checked against the default value's type.
ojson check_json(const ojson& schema, const ojson& value, const std::string& path) {
  const auto bad = [&] { return ConfigError("config key '" + path + "' expects " + type_name(schema)); };
  if (schema.is_object()) {
    if (!value.is_object()) throw bad();
    ojson out = schema;
    for (const auto& [key, v] : value.items()) {
      if (!schema.contains(key)) throw ConfigError("unknown config key '" + join(path, key) + "'");
      out[key] = check_json(schema.at(key), v, join(path, key));
    }
    return out;
  }
  if (schema.is_array()) {
    if (!value.is_array()) throw bad();
    const ojson element = schema.empty() ? ojson("") : schema.front();
    ojson out = ojson::array();
    for (std::size_t i = 0; i < value.size(); ++i) out.push_back(check_json(element, value[i], path + "[" + std::to_string(i) + "]"));
    return out;
  }
  if (schema.is_boolean()) {
    if (!value.is_boolean()) throw bad();
    return value;
  }
  if (schema.is_number_unsigned()) {
    if (value.is_number_unsigned()) return value;
    if (value.is_number_integer() && value.get<std::int64_t>() >= 0) return ojson(value.get<std::uint64_t>());
    throw bad();
  }
  if (schema.is_number()) {
    if (!value.is_number()) throw bad();
    return ojson(value.get<double>());
  }
  if (!value.is_string()) throw bad();
  return value;
}

// YAML node converted with the default value's type as the guide.
ojson yaml_to_json(const ojson& schema, const YAML::Node& node, const std::string& path) {
  const auto bad = [&] { return ConfigError("config key '" + path + "' expects " + type_name(schema)); };
  if (schema.is_object()) {
    if (node.IsNull()) return ojson::object();
    if (!node.IsMap()) throw bad();
    ojson out = ojson::object();
    for (const auto& kv : node) {
      const auto key = kv.first.as<std::string>();
      if (!schema.contains(key)) throw ConfigError("unknown config key '" + join(path, key) + "'");
      out[key] = yaml_to_json(schema.at(key), kv.second, join(path, key));
    }
    return out;
  }
  if (schema.is_array()) {
    if (!node.IsSequence()) throw bad();
    const ojson element = schema.empty() ? ojson("") : schema.front();
    ojson out = ojson::array();
    for (std::size_t i = 0; i < node.size(); ++i) {
      out.push_back(yaml_to_json(element, node[i], path + "[" + std::to_string(i) + "]"));
    }
    return out;
  }
  if (schema.is_string() && node.IsNull()) return ojson("");
  if (!node.IsScalar()) throw bad();
  try {
    if (schema.is_boolean()) return ojson(node.as<bool>());
    if (schema.is_number_unsigned()) {
      const auto v = node.as<long long>();
      if (v < 0) throw bad();
      return ojson(static_cast<std::uint64_t>(v));
    }
    if (schema.is_number()) return ojson(node.as<double>());
    return ojson(node.as<std::string>());
  } catch (const YAML::Exception&) {
    throw bad();
  }
}

// Recursive overlay of b onto a (b already schema-checked).
void overlay(ojson& a, const ojson& b) {
  for (const auto& [key, v] : b.items()) {
    if (v.is_object() && a.contains(key) && a[key].is_object()) {
      overlay(a[key], v);
    } else {
      a[key] = v;
    }
  }
}

const ojson& schema_at(const ojson& root, const std::string& dotted) {
  const ojson* cur = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty() || !cur->is_object() || !cur->contains(key)) {
      throw ConfigError("unknown config key '" + dotted + "'");
    }
    cur = &cur->at(key);
    if (dot == std::string::npos) return *cur;
    start = dot + 1;
  }
}

void set_at(ojson& root, const std::string& dotted, ojson value) {
  ojson* cur = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*cur)[key] = std::move(value);
      return;
    }
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

ojson apply_overrides(ojson tree, const ojson& schema, const ConfigOverrides& overrides) {
  for (const auto& [key, raw] : overrides) {
    const ojson& s = schema_at(schema, key);
    if (s.is_object()) throw ConfigError("config key '" + key + "' is a section, not a value");
    YAML::Node node;
    try {
      node = YAML::Load(raw);
    } catch (const YAML::Exception& e) {
      throw ConfigError("cannot parse value for '" + key + "': " + e.what());
    }
    // Plain strings such as "none" or "1e-3" parse as YAML scalars already.
    if (s.is_string() && !node.IsScalar() && !node.IsNull()) node = YAML::Node(raw);
    set_at(tree, key, yaml_to_json(s, node, key));
  }
  return tree;
}

void emit_yaml(YAML::Emitter& out, const ojson& j) {
  if (j.is_object()) {
    out << YAML::BeginMap;
    for (const auto& [key, v] : j.items()) {
      out << YAML::Key << key << YAML::Value;
      emit_yaml(out, v);
    }
    out << YAML::EndMap;
  } else if (j.is_array()) {
    out << YAML::Flow << YAML::BeginSeq;
    for (const auto& v : j) emit_yaml(out, v);
    out << YAML::EndSeq;
  } else if (j.is_boolean()) {
    out << j.get<bool>();
  } else if (j.is_number_unsigned()) {
    out << j.get<std::uint64_t>();
  } else if (j.is_number()) {
    out << j.get<double>();
  } else {
    out << YAML::DoubleQuoted << j.get<std::string>();
  }
}

}  // namespace

std::filesystem::path data_directory() {
  if (const char* env = std::getenv("APATTACK_DATA_DIR"); env != nullptr && *env != '\0') return env;
  return APATTACK_DATA_DIR;
}

nlohmann::ordered_json RunConfig::to_json() const {
  const auto& s = joint_space.space;
  const auto& a = stage2.attack;
  ojson victims = ojson::array();
  for (const auto& v : evaluation.victims) victims.push_back(v);
  return {
      {"seed", seed},
      {"output_dir", output_dir},
      {"joint_space",
       {{"feature_dim", s.feature_dim},
        {"token_embedding_dim", s.token_embedding_dim},
        {"max_sequence_length", s.max_sequence_length},
        {"image_size", {s.image_height, s.image_width}},
        {"patch_grid", {s.patch_rows, s.patch_cols}},
        {"visual_hidden", s.visual_hidden},
        {"text_pooling", to_string(s.text_pooling)},
        {"reference", joint_space.reference},
        {"seed", joint_space.seed},
        {"weights", joint_space.weights}}},
      {"prompt",
       {{"template", prompt.template_text},
        {"vocabulary", prompt.vocabulary},
        {"attribute_vocabulary", prompt.attribute_vocabulary}}},
      {"data",
       {{"root", data.root},
        {"synthetic",
         {{"identities", data.synthetic.identities},
          {"images_per_identity", data.synthetic.images_per_identity},
          {"cameras", data.synthetic.cameras},
          {"query_per_identity", data.synthetic.query_per_identity},
          {"jitter", data.synthetic.jitter},
          {"seed", data.synthetic.seed}}}}},
      {"stage1",
       {{"epochs", stage1.epochs},
        {"identities_per_batch", stage1.identities_per_batch},
        {"instances_per_identity", stage1.instances_per_identity},
        {"learning_rate", stage1.learning_rate},
        {"tau", stage1.tau},
        {"include_self", stage1.include_self}}},
      {"stage2",
       {{"epochs", a.epochs},
        {"learning_rate", a.learning_rate},
        {"epsilon", a.epsilon},
        {"alpha", a.alpha},
        {"metric", to_string(a.metric)},
        {"identities_per_batch", a.identities_per_batch},
        {"instances_per_identity", a.instances_per_identity},
        {"surrogate_weight", a.surrogate_weight},
        {"semantic_weight", a.semantic_weight},
        {"generator", to_string(stage2.generator)}}},
      {"surrogate", {{"kind", surrogate.kind}, {"seed", surrogate.seed}, {"output_dim", surrogate.output_dim}}},
      {"evaluation",
       {{"distance", evaluation.distance},
        {"exclude_same_camera", evaluation.exclude_same_camera},
        {"defense", evaluation.defense},
        {"victims", victims},
        {"clean_only", evaluation.clean_only},
        {"seed", evaluation.seed}}},
      {"attack", {{"input_dir", attack.input_dir}, {"output_dir", attack.output_dir}}},
      {"interpret", {{"split", interpret.split}, {"top_k", interpret.top_k}}},
      {"checkpoints",
       {{"encoders", checkpoints.encoders}, {"inversion", checkpoints.inversion}, {"generator", checkpoints.generator}}},
  };
}

RunConfig RunConfig::from_json(const nlohmann::ordered_json& input) {
  const ojson j = check_json(RunConfig{}.to_json(), input, "");
  const auto pair = [](const ojson& arr, const std::string& key) {
    if (arr.size() != 2) throw ConfigError("config key '" + key + "' expects two values");
    return std::pair{arr[0].get<std::size_t>(), arr[1].get<std::size_t>()};
  };
  RunConfig c;
  c.seed = j["seed"].get<std::uint64_t>();
  c.output_dir = j["output_dir"].get<std::string>();

  const auto& js = j["joint_space"];
  auto& s = c.joint_space.space;
  s.feature_dim = js["feature_dim"].get<std::size_t>();
  s.token_embedding_dim = js["token_embedding_dim"].get<std::size_t>();
  s.max_sequence_length = js["max_sequence_length"].get<std::size_t>();
  std::tie(s.image_height, s.image_width) = pair(js["image_size"], "joint_space.image_size");
  std::tie(s.patch_rows, s.patch_cols) = pair(js["patch_grid"], "joint_space.patch_grid");
  s.visual_hidden = js["visual_hidden"].get<std::size_t>();
  s.text_pooling = parse_text_pooling(js["text_pooling"].get<std::string>());
  c.joint_space.reference = js["reference"].get<std::string>();
  c.joint_space.seed = js["seed"].get<std::uint64_t>();
  c.joint_space.weights = js["weights"].get<std::string>();

  c.prompt.template_text = j["prompt"]["template"].get<std::string>();
  c.prompt.vocabulary = j["prompt"]["vocabulary"].get<std::string>();
  c.prompt.attribute_vocabulary = j["prompt"]["attribute_vocabulary"].get<std::string>();

  c.data.root = j["data"]["root"].get<std::string>();
  const auto& syn = j["data"]["synthetic"];
  c.data.synthetic.identities = syn["identities"].get<std::size_t>();
  c.data.synthetic.images_per_identity = syn["images_per_identity"].get<std::size_t>();
  c.data.synthetic.cameras = syn["cameras"].get<std::size_t>();
  c.data.synthetic.query_per_identity = syn["query_per_identity"].get<std::size_t>();
  c.data.synthetic.jitter = syn["jitter"].get<bool>();
  c.data.synthetic.seed = syn["seed"].get<std::uint64_t>();

  const auto& s1 = j["stage1"];
  c.stage1.epochs = s1["epochs"].get<std::size_t>();
  c.stage1.identities_per_batch = s1["identities_per_batch"].get<std::size_t>();
  c.stage1.instances_per_identity = s1["instances_per_identity"].get<std::size_t>();
  c.stage1.learning_rate = s1["learning_rate"].get<double>();
  c.stage1.tau = s1["tau"].get<double>();
  c.stage1.include_self = s1["include_self"].get<bool>();

  const auto& s2 = j["stage2"];
  auto& a = c.stage2.attack;
  a.epochs = s2["epochs"].get<std::size_t>();
  a.learning_rate = s2["learning_rate"].get<double>();
  a.epsilon = s2["epsilon"].get<double>();
  a.alpha = s2["alpha"].get<double>();
  a.metric = parse_negative_metric(s2["metric"].get<std::string>());
  a.identities_per_batch = s2["identities_per_batch"].get<std::size_t>();
  a.instances_per_identity = s2["instances_per_identity"].get<std::size_t>();
  a.surrogate_weight = s2["surrogate_weight"].get<double>();
  a.semantic_weight = s2["semantic_weight"].get<double>();
  c.stage2.generator = parse_generator_variant(s2["generator"].get<std::string>());

  c.surrogate.kind = j["surrogate"]["kind"].get<std::string>();
  c.surrogate.seed = j["surrogate"]["seed"].get<std::uint64_t>();
  c.surrogate.output_dim = j["surrogate"]["output_dim"].get<std::size_t>();

  const auto& ev = j["evaluation"];
  c.evaluation.distance = ev["distance"].get<std::string>();
  c.evaluation.exclude_same_camera = ev["exclude_same_camera"].get<bool>();
  c.evaluation.defense = ev["defense"].get<std::string>();
  c.evaluation.victims = ev["victims"].get<std::vector<std::string>>();
  c.evaluation.clean_only = ev["clean_only"].get<bool>();
  c.evaluation.seed = ev["seed"].get<std::uint64_t>();

  c.attack.input_dir = j["attack"]["input_dir"].get<std::string>();
  c.attack.output_dir = j["attack"]["output_dir"].get<std::string>();
  c.interpret.split = j["interpret"]["split"].get<std::string>();
  c.interpret.top_k = j["interpret"]["top_k"].get<std::size_t>();
  c.checkpoints.encoders = j["checkpoints"]["encoders"].get<std::string>();
  c.checkpoints.inversion = j["checkpoints"]["inversion"].get<std::string>();
  c.checkpoints.generator = j["checkpoints"]["generator"].get<std::string>();
  return c;
}

void RunConfig::validate() const {
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  joint_space.space.validate();
  if (joint_space.reference != "aligned" && joint_space.reference != "random") {
    throw ConfigError("joint_space.reference must be aligned or random, got '" + joint_space.reference + "'");
  }
  parse_template(prompt.template_text);
  synthetic_spec().validate();
  if (stage1.identities_per_batch == 0 || stage1.instances_per_identity == 0) {
    throw ConfigError("stage1.identities_per_batch and stage1.instances_per_identity must be positive");
  }
  if (!(stage1.learning_rate >= 0.0)) throw ConfigError("stage1.learning_rate must be non-negative");
  if (!(stage1.tau > 0.0)) throw ConfigError("stage1.tau must be positive");
  stage2_config().validate();
  if (surrogate.kind != "handcrafted") {
    throw ConfigError("surrogate.kind must be handcrafted, got '" + surrogate.kind + "'");
  }
  if (surrogate.output_dim == 0) throw ConfigError("surrogate.output_dim must be positive");
  parse_distance(evaluation.distance);
  parse_defense_chain(evaluation.defense);
  if (evaluation.victims.empty()) throw ConfigError("evaluation.victims must name at least one victim");
  for (const auto& v : evaluation.victims) {
    if (v != "handcrafted" && v != "joint") {
      throw ConfigError("evaluation.victims entry '" + v + "' is not handcrafted or joint");
    }
  }
  static const std::vector<std::string> splits{"train", "query", "gallery", "test", "all"};
  if (std::find(splits.begin(), splits.end(), interpret.split) == splits.end()) {
    throw ConfigError("interpret.split must be train, query, gallery, test or all, got '" + interpret.split + "'");
  }
}

std::string RunConfig::digest() const {
  ojson j = to_json();
  j.erase("output_dir");
  j["joint_space"].erase("weights");
  j["prompt"].erase("vocabulary");
  j["prompt"].erase("attribute_vocabulary");
  j["data"].erase("root");
  j.erase("attack");
  j.erase("checkpoints");
  return sha256_hex(j.dump());
}

std::filesystem::path RunConfig::vocabulary_path() const {
  return prompt.vocabulary.empty() ? data_directory() / "vocab.json" : std::filesystem::path(prompt.vocabulary);
}

std::filesystem::path RunConfig::attribute_vocabulary_path() const {
  return prompt.attribute_vocabulary.empty() ? data_directory() / "attribute_vocab.json"
                                             : std::filesystem::path(prompt.attribute_vocabulary);
}

std::filesystem::path RunConfig::command_dir(std::string_view command) const {
  return std::filesystem::path(output_dir) / std::string(command);
}

std::filesystem::path RunConfig::encoders_path() const {
  return checkpoints.encoders.empty() ? command_dir("train-inversion") / "encoders.ckpt"
                                      : std::filesystem::path(checkpoints.encoders);
}

std::filesystem::path RunConfig::inversion_path() const {
  return checkpoints.inversion.empty() ? command_dir("train-inversion") / "inversion.ckpt"
                                       : std::filesystem::path(checkpoints.inversion);
}

std::filesystem::path RunConfig::generator_path() const {
  return checkpoints.generator.empty() ? command_dir("train-attack") / "generator.ckpt"
                                       : std::filesystem::path(checkpoints.generator);
}

SyntheticSpec RunConfig::synthetic_spec() const {
  SyntheticSpec spec = data.synthetic;
  spec.height = joint_space.space.image_height;
  spec.width = joint_space.space.image_width;
  return spec;
}

InversionTrainConfig RunConfig::stage1_config() const {
  InversionTrainConfig c = stage1;
  c.seed = seed;
  return c;
}

AttackConfig RunConfig::stage2_config() const {
  AttackConfig c = stage2.attack;
  c.seed = seed;
  return c;
}

ConfigOverrides parse_override_args(std::span<const std::string> args) {
  ConfigOverrides out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0 || a.size() == 2) throw ConfigError("unexpected argument '" + a + "'");
    const std::string body = a.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
      continue;
    }
    if (i + 1 >= args.size()) throw ConfigError("option '" + a + "' needs a value");
    out.emplace_back(body, args[++i]);
  }
  return out;
}

RunConfig run_config_from_yaml(std::string_view yaml_text, const ConfigOverrides& overrides) {
  const ojson schema = RunConfig{}.to_json();
  ojson tree = schema;
  YAML::Node root;
  try {
    root = YAML::Load(std::string(yaml_text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("cannot parse config YAML: ") + e.what());
  }
  if (root.IsDefined() && !root.IsNull()) overlay(tree, yaml_to_json(schema, root, ""));
  tree = apply_overrides(std::move(tree), schema, overrides);
  RunConfig c = RunConfig::from_json(tree);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& yaml_path, const ConfigOverrides& overrides) {
  if (yaml_path.empty()) return run_config_from_yaml("", overrides);
  std::ifstream in(yaml_path);
  if (!in) throw ConfigError("cannot open config file " + yaml_path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return run_config_from_yaml(text.str(), overrides);
}

std::string to_yaml(const RunConfig& config) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  emit_yaml(out, config.to_json());
  return std::string(out.c_str()) + "\n";
}

std::string default_config_yaml() { return to_yaml(RunConfig{}); }

}  // namespace apattack
