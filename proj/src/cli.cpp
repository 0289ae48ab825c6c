#include "apattack/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#include "apattack/attack.hpp"
#include "apattack/config.hpp"
#include "apattack/defenses.hpp"
#include "apattack/encoders.hpp"
#include "apattack/errors.hpp"
#include "apattack/interpret.hpp"
#include "apattack/inversion.hpp"
#include "apattack/metrics.hpp"
#include "apattack/synthdata.hpp"

namespace apattack {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

struct Run {
  std::string command;
  RunConfig config;
  fs::path dir;
  std::string started_at;
  std::chrono::steady_clock::time_point start;
  ojson outputs = ojson::object();
  ojson details = ojson::object();
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& path, const ojson& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw Error("failed writing " + path.string());
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw ConfigError(what + " not found: " + path.string());
}

void require_dir(const fs::path& path, const std::string& what) {
  if (!fs::is_directory(path)) throw ConfigError(what + " not found: " + path.string());
}

void check_data_root(const RunConfig& c) {
  if (!c.data.root.empty()) require_dir(c.data.root, "data.root");
}

Dataset load_data(const RunConfig& c) {
  if (c.data.root.empty()) return render_dataset(c.synthetic_spec());
  return load_dataset(c.data.root, c.joint_space.space.image_height, c.joint_space.space.image_width);
}

void check_space_matches(const JointSpace& space, const RunConfig& c, const fs::path& from) {
  const auto& s = space.visual.config();
  if (s.image_height != c.joint_space.space.image_height || s.image_width != c.joint_space.space.image_width) {
    throw ConfigError("encoders in " + from.string() + " expect " + std::to_string(s.image_height) + "x" +
                      std::to_string(s.image_width) + " images but joint_space.image_size differs");
  }
}

JointSpace load_space(const RunConfig& c) {
  JointSpace space = load_encoder_adapter(c.encoders_path());
  check_space_matches(space, c, c.encoders_path());
  return space;
}

InversionNetworks load_frozen_inversion(const RunConfig& c) {
  InversionNetworks nets = load_inversion(c.inversion_path());
  nets.set_trainable(false);
  return nets;
}

HandcraftedExtractor make_surrogate(const RunConfig& c) {
  return HandcraftedExtractor(c.joint_space.space.image_height, c.joint_space.space.image_width, c.surrogate.seed,
                              c.surrogate.output_dim);
}

ojson checksum_pair(const std::string& before, const std::string& after) {
  return {{"before", before}, {"after", after}, {"unchanged", before == after}};
}

void require_unchanged(const std::string& what, const std::string& before, const std::string& after) {
  if (before != after) throw TrainingError(what + " weights changed during training");
}

void cmd_synth_gen(Run& run) {
  const auto& c = run.config;
  const fs::path root = c.data.root.empty() ? run.dir / "dataset" : fs::path(c.data.root);
  const auto spec = c.synthetic_spec();
  const Dataset ds = generate_dataset(spec, root);
  run.outputs["dataset"] = root.string();
  run.details["images"] = {{"train", ds.train.size()}, {"query", ds.query.size()}, {"gallery", ds.gallery.size()}};
  run.details["identities"] = ds.attributes.size();
}

void cmd_train_inversion(Run& run) {
  const auto& c = run.config;
  require_file(c.vocabulary_path(), "prompt.vocabulary");
  if (!c.joint_space.weights.empty()) require_file(c.joint_space.weights, "joint_space.weights");
  check_data_root(c);

  const Vocabulary vocab = Vocabulary::load(c.vocabulary_path());
  const PromptTemplate prompt = parse_template(c.prompt.template_text);
  const TokenizedPrompt tokens = tokenize(prompt, vocab);
  JointSpace space = [&] {
    if (!c.joint_space.weights.empty()) {
      JointSpace s = load_encoder_adapter(c.joint_space.weights);
      check_space_matches(s, c, c.joint_space.weights);
      return s;
    }
    if (c.joint_space.reference == "random") {
      return build_reference_encoders(c.joint_space.seed, c.joint_space.space, vocab.size());
    }
    return build_aligned_reference_encoders(c.joint_space.seed, c.joint_space.space, vocab, tokens);
  }();
  const Dataset ds = load_data(c);
  if (ds.train.empty()) throw InputError("the training split is empty");

  InversionNetworks nets(InversionShape::for_space(space.visual.config()), c.seed);
  const std::string encoders_before = space.checksum();
  const auto result = train_inversion(ds.train, space, nets, tokens, c.stage1_config());
  const std::string encoders_after = space.checksum();
  require_unchanged("encoder", encoders_before, encoders_after);

  const std::string digest = c.digest();
  save_encoders(run.dir / "encoders.ckpt", space, digest);
  save_inversion(run.dir / "inversion.ckpt", nets, digest);
  write_inversion_log(run.dir / "inversion_log.jsonl", result.log);
  run.outputs["encoders"] = (run.dir / "encoders.ckpt").string();
  run.outputs["inversion"] = (run.dir / "inversion.ckpt").string();
  run.outputs["log"] = (run.dir / "inversion_log.jsonl").string();
  run.details["steps"] = result.steps;
  run.details["initial_loss"] = result.log.front().total;
  run.details["final_loss"] = result.log.back().total;
  run.details["checksums"] = {{"encoders", checksum_pair(encoders_before, encoders_after)},
                              {"inversion", nets.checksum()}};
}

void cmd_train_attack(Run& run) {
  const auto& c = run.config;
  require_file(c.encoders_path(), "encoders checkpoint");
  require_file(c.inversion_path(), "inversion checkpoint");
  check_data_root(c);

  const JointSpace space = load_space(c);
  const InversionNetworks nets = load_frozen_inversion(c);
  const HandcraftedExtractor surrogate = make_surrogate(c);
  const Dataset ds = load_data(c);
  if (ds.train.empty()) throw InputError("the training split is empty");

  PerturbationGenerator g(c.stage2.generator, c.seed);
  const std::string enc0 = space.checksum(), inv0 = nets.checksum(), sur0 = surrogate.checksum();
  const auto result = train_attack(ds.train, space, nets, surrogate, g, c.stage2_config());
  const std::string enc1 = space.checksum(), inv1 = nets.checksum(), sur1 = surrogate.checksum();
  require_unchanged("encoder", enc0, enc1);
  require_unchanged("inversion network", inv0, inv1);
  require_unchanged("surrogate", sur0, sur1);

  save_generator(run.dir / "generator.ckpt", g, c.digest());
  write_attack_log(run.dir / "attack_log.jsonl", result.log);
  run.outputs["generator"] = (run.dir / "generator.ckpt").string();
  run.outputs["log"] = (run.dir / "attack_log.jsonl").string();
  run.details["steps"] = result.steps;
  run.details["initial_loss"] = result.log.front().total;
  run.details["final_loss"] = result.log.back().total;
  run.details["checksums"] = {{"encoders", checksum_pair(enc0, enc1)},
                              {"inversion", checksum_pair(inv0, inv1)},
                              {"surrogate", checksum_pair(sur0, sur1)},
                              {"generator", g.checksum()}};
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

void cmd_attack(Run& run) {
  const auto& c = run.config;
  if (c.attack.input_dir.empty()) throw ConfigError("attack.input_dir must name a folder of images");
  require_dir(c.attack.input_dir, "attack.input_dir");
  require_file(c.generator_path(), "generator checkpoint");
  const double eps = c.stage2.attack.epsilon;

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(c.attack.input_dir)) {
    const auto name = entry.path().filename().string();
    if (entry.is_regular_file() && !name.empty() && name[0] != '.' && is_image_file(entry.path())) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw InputError("no PNG or JPEG images in " + c.attack.input_dir);

  const PerturbationGenerator g = load_generator(c.generator_path());
  const fs::path out_dir = c.attack.output_dir.empty() ? run.dir / "images" : fs::path(c.attack.output_dir);
  fs::create_directories(out_dir);
  ojson images = ojson::array();
  double worst = 0.0;
  for (const auto& f : files) {
    const Image x = read_image(f);
    Image adv;
    try {
      adv = apply_perturbation(g, x, eps);
    } catch (const InputError& e) {
      throw InputError(f.filename().string() + ": " + e.what());
    }
    const fs::path target = out_dir / (f.stem().string() + ".png");
    write_png(adv, target);
    // Measured on the written 8-bit file.
    const Image written = read_image(target);
    double max_d = 0.0, sum_d = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      const double d = std::abs(written.data[i] - x.data[i]);
      max_d = std::max(max_d, d);
      sum_d += d;
    }
    worst = std::max(worst, max_d);
    images.push_back({{"input", f.filename().string()},
                      {"output", target.filename().string()},
                      {"max_abs_delta", max_d},
                      {"mean_abs_delta", sum_d / static_cast<double>(x.data.size())}});
  }
  const ojson manifest = {{"epsilon", eps},
                          {"generator", c.generator_path().string()},
                          {"max_abs_delta", worst},
                          {"within_bound", worst <= eps + 1e-7},
                          {"images", images}};
  write_json(out_dir / "manifest.json", manifest);
  run.outputs["images"] = out_dir.string();
  run.outputs["manifest"] = (out_dir / "manifest.json").string();
  run.details["count"] = files.size();
  run.details["max_abs_delta"] = worst;
}

void cmd_evaluate(Run& run) {
  const auto& c = run.config;
  const bool needs_joint =
      std::find(c.evaluation.victims.begin(), c.evaluation.victims.end(), "joint") != c.evaluation.victims.end();
  if (needs_joint) require_file(c.encoders_path(), "encoders checkpoint");
  if (!c.evaluation.clean_only) require_file(c.generator_path(), "generator checkpoint");
  check_data_root(c);

  EvaluationOptions options;
  options.retrieval.distance = parse_distance(c.evaluation.distance);
  options.retrieval.exclude_same_camera = c.evaluation.exclude_same_camera;
  options.defense = parse_defense_chain(c.evaluation.defense);
  options.epsilon = c.stage2.attack.epsilon;
  options.seed = c.evaluation.seed;
  options.config_digest = c.digest();

  std::vector<std::unique_ptr<FeatureExtractor>> owned;
  for (const auto& v : c.evaluation.victims) {
    if (v == "handcrafted") {
      owned.push_back(std::make_unique<HandcraftedExtractor>(make_surrogate(c)));
    } else {
      owned.push_back(std::make_unique<VisualEncoderExtractor>(std::make_shared<VisualEncoder>(load_space(c).visual)));
    }
  }
  std::vector<const FeatureExtractor*> victims;
  for (const auto& o : owned) victims.push_back(o.get());
  std::optional<PerturbationGenerator> g;
  if (!c.evaluation.clean_only) g.emplace(load_generator(c.generator_path()));
  const Dataset ds = load_data(c);

  const EvaluationReport report = evaluate(victims, ds, g ? &*g : nullptr, options);
  write_json(run.dir / "report.json", report.to_json());
  std::ofstream csv(run.dir / "report.csv");
  csv << report.to_csv();
  if (!csv) throw Error("cannot write " + (run.dir / "report.csv").string());
  run.outputs["report"] = (run.dir / "report.json").string();
  run.outputs["csv"] = (run.dir / "report.csv").string();
  run.details["aap_clean"] = report.aap_clean;
  if (report.aap_adversarial) run.details["aap_adversarial"] = *report.aap_adversarial;
  if (report.mdr) run.details["mdr"] = *report.mdr;
}

void cmd_interpret(Run& run) {
  const auto& c = run.config;
  require_file(c.vocabulary_path(), "prompt.vocabulary");
  require_file(c.attribute_vocabulary_path(), "prompt.attribute_vocabulary");
  require_file(c.encoders_path(), "encoders checkpoint");
  require_file(c.inversion_path(), "inversion checkpoint");
  check_data_root(c);

  const Vocabulary vocab = Vocabulary::load(c.vocabulary_path());
  const AttributeVocabulary words = AttributeVocabulary::load(c.attribute_vocabulary_path());
  const PromptTemplate prompt = parse_template(c.prompt.template_text);
  words.check_covers(prompt);
  const JointSpace space = load_space(c);
  const InversionNetworks nets = load_frozen_inversion(c);
  const Dataset ds = load_data(c);

  std::vector<Sample> samples;
  const auto take = [&](const std::vector<Sample>& s) { samples.insert(samples.end(), s.begin(), s.end()); };
  const auto& split = c.interpret.split;
  if (split == "train" || split == "all") take(ds.train);
  if (split == "query" || split == "test" || split == "all") take(ds.query);
  if (split == "gallery" || split == "test" || split == "all") take(ds.gallery);
  if (samples.empty()) throw InputError("interpret.split '" + split + "' selects no images");

  const auto rankings = interpret_samples(samples, space, nets, prompt, words, vocab);
  export_wordcloud_data(run.dir / "wordcloud", rankings, c.interpret.top_k);
  run.outputs["csv"] = (run.dir / "wordcloud.csv").string();
  run.outputs["json"] = (run.dir / "wordcloud.json").string();
  run.details["images"] = samples.size();
  if (!ds.attributes.empty()) {
    const auto acc = interpretation_accuracy(rankings, samples, ds);
    ojson per = ojson::object();
    for (const auto& [name, a] : acc.per_attribute) per[name] = a;
    const ojson j = {{"split", split}, {"images", acc.images}, {"top1_accuracy", per}, {"macro", acc.macro}};
    write_json(run.dir / "accuracy.json", j);
    run.outputs["accuracy"] = (run.dir / "accuracy.json").string();
    run.details["macro_top1_accuracy"] = acc.macro;
  }
}

const std::map<std::string, std::pair<std::string, std::function<void(Run&)>>>& commands() {
  static const std::map<std::string, std::pair<std::string, std::function<void(Run&)>>> table{
      {"synth-gen", {"Render the synthetic attribute-labelled dataset to disk", cmd_synth_gen}},
      {"train-inversion", {"Stage 1: train the attribute inversion networks", cmd_train_inversion}},
      {"train-attack", {"Stage 2: train the perturbation generator", cmd_train_attack}},
      {"attack", {"Perturb a folder of images with a trained generator", cmd_attack}},
      {"evaluate", {"Clean and adversarial retrieval metrics, optionally behind defenses", cmd_evaluate}},
      {"interpret", {"Rank attribute words against learned pseudo-tokens", cmd_interpret}},
  };
  return table;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const TemplateError*>(&e)) return kExitConfig;
  if (dynamic_cast<const InputError*>(&e) || dynamic_cast<const LoadError*>(&e) ||
      dynamic_cast<const TokenizationError*>(&e)) {
    return kExitInput;
  }
  if (dynamic_cast<const TrainingError*>(&e) || dynamic_cast<const EvaluationError*>(&e) ||
      dynamic_cast<const BatchCompositionError*>(&e) || dynamic_cast<const NormalizationError*>(&e)) {
    return kExitRuntime;
  }
  return kExitFailure;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attribute-aware prompt attack toolkit", "apattack"};
  app.set_version_flag("--version", std::string(kToolkitVersion));
  app.require_subcommand(1, 1);
  std::string config_path;
  std::vector<CLI::App*> subs;
  for (const auto& [name, entry] : commands()) {
    auto* sub = app.add_subcommand(name, entry.first);
    sub->add_option("-c,--config", config_path, "YAML config file; dotted --key value flags override it");
    sub->allow_extras();
    subs.push_back(sub);
  }
  auto* print = app.add_subcommand("print-config", "Print the resolved configuration as YAML");
  print->add_option("-c,--config", config_path, "YAML config file");
  print->allow_extras();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolkitVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "apattack: error: " << e.what() << "\n";
    return kExitConfig;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string command = chosen->get_name();
  try {
    const auto overrides = parse_override_args(chosen->remaining());
    RunConfig config = load_run_config(config_path, overrides);
    if (command == "print-config") {
      out << to_yaml(config);
      return kExitOk;
    }
    Run run;
    run.command = command;
    run.config = config;
    run.dir = config.command_dir(command);
    run.started_at = utc_now();
    run.start = std::chrono::steady_clock::now();
    fs::create_directories(run.dir);
    commands().at(command).second(run);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - run.start).count();
    ojson manifest = {{"command", command},
                      {"toolkit_version", kToolkitVersion},
                      {"config_digest", config.digest()},
                      {"seed", config.seed},
                      {"started_at", run.started_at},
                      {"wall_time_seconds", secs},
                      {"outputs", run.outputs},
                      {"details", run.details},
                      {"config", config.to_json()}};
    write_json(run.dir / "run.json", manifest);
    out << command << ": done in " << secs << " s, outputs in " << run.dir.string() << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "apattack " << command << ": error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace apattack
