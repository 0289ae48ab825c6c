#include <doctest.h>

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "apattack/checkpoint.hpp"
#include "apattack/cli.hpp"
#include "apattack/config.hpp"
#include "apattack/errors.hpp"
#include "apattack/image.hpp"
#include "apattack/metrics.hpp"
#include "test_util.hpp"

using namespace apattack;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

// Small enough for a few seconds of end-to-end work.
std::string small_yaml(const fs::path& out) {
  return "seed: 0\n"
         "output_dir: \"" + out.string() + "\"\n"
         "joint_space:\n"
         "  image_size: [32, 16]\n"
         "  patch_grid: [8, 4]\n"
         "data:\n"
         "  synthetic:\n"
         "    identities: 8\n"
         "    images_per_identity: 4\n"
         "stage1:\n"
         "  epochs: 2\n"
         "  learning_rate: 0.002\n"
         "stage2:\n"
         "  epochs: 2\n"
         "  learning_rate: 0.002\n"
         "  generator: tiny\n"
         "evaluation:\n"
         "  victims: [handcrafted, joint]\n";
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults hold the stated constants") {
    const RunConfig c = run_config_from_yaml("");
    CHECK(c.stage1.learning_rate == doctest::Approx(2e-4));
    CHECK(c.stage2.attack.learning_rate == doctest::Approx(2e-4));
    CHECK(c.stage2.attack.epsilon == doctest::Approx(8.0 / 255.0));
    CHECK(c.stage2.attack.alpha == doctest::Approx(0.3));
    CHECK(c.stage1.tau == doctest::Approx(0.07));
    CHECK(c.stage1.identities_per_batch == 4);
    CHECK(c.stage1.instances_per_identity == 2);
    CHECK(c.evaluation.victims == std::vector<std::string>{"handcrafted"});
  }

  TEST_CASE("yaml round trip reproduces the config") {
    RunConfig c = run_config_from_yaml("", {{"seed", "7"}, {"stage2.generator", "tiny"}, {"evaluation.defense", "jpeg:60"}});
    const RunConfig back = run_config_from_yaml(to_yaml(c));
    CHECK(back.to_json() == c.to_json());
    CHECK(back.digest() == c.digest());
    CHECK(run_config_from_yaml(default_config_yaml()).to_json() == RunConfig{}.to_json());
  }

  TEST_CASE("unknown keys are named") {
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("stage2:\n  epsilom: 0.1\n"); },
                                           "stage2.epsilom");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("bogus: 1\n"); }, "bogus");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("", {{"stage1.nope", "1"}}); }, "stage1.nope");
  }

  TEST_CASE("wrong types are named") {
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("stage1:\n  epochs: many\n"); },
                                           "stage1.epochs");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("stage1: 3\n"); }, "stage1");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("", {{"seed", "-1"}}); }, "seed");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("", {{"stage2", "1"}}); }, "section");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("seed: [1\n"); }, "YAML");
  }

  TEST_CASE("override flag forms") {
    const std::vector<std::string> args{"--stage2.epsilon", "0.0314", "--seed=3", "--evaluation.defense=jpeg:75"};
    const auto o = parse_override_args(args);
    REQUIRE(o.size() == 3);
    CHECK(o[0] == std::pair<std::string, std::string>{"stage2.epsilon", "0.0314"});
    CHECK(o[1] == std::pair<std::string, std::string>{"seed", "3"});
    CHECK(o[2] == std::pair<std::string, std::string>{"evaluation.defense", "jpeg:75"});
    const RunConfig c = run_config_from_yaml("seed: 1\n", o);
    CHECK(c.seed == 3);
    CHECK(c.stage2.attack.epsilon == doctest::Approx(0.0314));
    CHECK(c.evaluation.defense == "jpeg:75");

    test::check_throws_naming<ConfigError>([] { parse_override_args(std::vector<std::string>{"stray"}); }, "stray");
    test::check_throws_naming<ConfigError>([] { parse_override_args(std::vector<std::string>{"--seed"}); }, "--seed");
    test::check_throws_naming<ConfigError>([] { parse_override_args(std::vector<std::string>{"--"}); }, "--");
  }

  TEST_CASE("later overrides win and lists parse") {
    const RunConfig c =
        run_config_from_yaml("", {{"seed", "1"}, {"seed", "2"}, {"evaluation.victims", "[joint, handcrafted]"}});
    CHECK(c.seed == 2);
    CHECK(c.evaluation.victims == std::vector<std::string>{"joint", "handcrafted"});
  }

  TEST_CASE("validation") {
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("", {{"stage2.epsilon", "0"}}); }, "epsilon");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("", {{"stage2.epsilon", "1"}}); }, "epsilon");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("", {{"stage2.alpha", "-0.1"}}); }, "alpha");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("", {{"stage1.tau", "0"}}); }, "tau");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("", {{"output_dir", "\"\""}}); }, "output_dir");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("", {{"joint_space.reference", "pretrained"}}); },
                                           "joint_space.reference");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("", {{"evaluation.victims", "[resnet]"}}); },
                                           "resnet");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("", {{"evaluation.victims", "[]"}}); },
                                           "victims");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("", {{"interpret.split", "val"}}); },
                                           "interpret.split");
    test::check_throws_naming<ConfigError>([] { run_config_from_yaml("", {{"surrogate.kind", "resnet"}}); },
                                           "surrogate.kind");
    CHECK_THROWS(run_config_from_yaml("", {{"evaluation.defense", "blur:3"}}));
    CHECK_THROWS(run_config_from_yaml("", {{"prompt.template", "no slots here"}}));
  }

  TEST_CASE("digest covers settings but not paths") {
    const RunConfig base = run_config_from_yaml("");
    const std::string d = base.digest();
    CHECK(d.size() == 64);
    CHECK(run_config_from_yaml("").digest() == d);
    for (const auto& [k, v] : ConfigOverrides{{"output_dir", "elsewhere"},
                                              {"data.root", "/tmp/x"},
                                              {"checkpoints.generator", "/tmp/g.ckpt"},
                                              {"attack.input_dir", "/tmp/in"},
                                              {"prompt.vocabulary", "/tmp/v.json"},
                                              {"joint_space.weights", "/tmp/e.ckpt"}}) {
      CAPTURE(k);
      CHECK(run_config_from_yaml("", {{k, v}}).digest() == d);
    }
    for (const auto& [k, v] : ConfigOverrides{{"seed", "1"},
                                              {"stage2.epsilon", "0.02"},
                                              {"stage1.epochs", "3"},
                                              {"evaluation.defense", "jpeg:60"},
                                              {"data.synthetic.identities", "12"}}) {
      CAPTURE(k);
      CHECK(run_config_from_yaml("", {{k, v}}).digest() != d);
    }
  }

  TEST_CASE("derived paths and per-stage settings") {
    const RunConfig c = run_config_from_yaml("", {{"output_dir", "out"}, {"seed", "5"}});
    CHECK(c.encoders_path() == fs::path("out/train-inversion/encoders.ckpt"));
    CHECK(c.inversion_path() == fs::path("out/train-inversion/inversion.ckpt"));
    CHECK(c.generator_path() == fs::path("out/train-attack/generator.ckpt"));
    CHECK(c.command_dir("evaluate") == fs::path("out/evaluate"));
    CHECK(c.vocabulary_path().filename() == "vocab.json");
    CHECK(fs::is_regular_file(c.vocabulary_path()));
    CHECK(fs::is_regular_file(c.attribute_vocabulary_path()));
    CHECK(c.stage1_config().seed == 5);
    CHECK(c.stage2_config().seed == 5);
    const RunConfig p = run_config_from_yaml("", {{"checkpoints.generator", "/g.ckpt"}, {"joint_space.image_size", "[32, 16]"}});
    CHECK(p.generator_path() == fs::path("/g.ckpt"));
    CHECK(p.synthetic_spec().height == 32);
    CHECK(p.synthetic_spec().width == 16);
    test::check_throws_naming<ConfigError>(
        [] { run_config_from_yaml("", {{"joint_space.image_size", "[32]"}}); }, "joint_space.image_size");
  }

  TEST_CASE("config file errors") {
    test::check_throws_naming<ConfigError>([] { load_run_config("/nonexistent/run.yaml"); }, "/nonexistent/run.yaml");
    const auto dir = test::fresh_dir("config");
    test::write_bytes(dir / "c.yaml", "stage2:\n  epochs: 4\n");
    const RunConfig c = load_run_config(dir / "c.yaml", {{"stage2.epochs", "6"}});
    CHECK(c.stage2.attack.epochs == 6);
    CHECK(load_run_config(dir / "c.yaml").stage2.attack.epochs == 4);
  }
}

TEST_SUITE("cli") {
  TEST_CASE("exit codes for usage errors") {
    CHECK(cli({}).code == kExitConfig);
    CHECK(cli({"frobnicate"}).code == kExitConfig);
    const auto unknown = cli({"print-config", "--stage2.bogus", "1"});
    CHECK(unknown.code == kExitConfig);
    CHECK(unknown.err.find("stage2.bogus") != std::string::npos);
    const auto missing = cli({"print-config", "-c", "/nonexistent/a.yaml"});
    CHECK(missing.code == kExitConfig);
    CHECK(missing.err.find("/nonexistent/a.yaml") != std::string::npos);
    const auto range = cli({"train-attack", "--stage2.epsilon", "2"});
    CHECK(range.code == kExitConfig);
    CHECK(range.err.find("epsilon") != std::string::npos);
  }

  TEST_CASE("help and version") {
    const auto help = cli({"--help"});
    CHECK(help.code == kExitOk);
    CHECK(help.out.find("train-inversion") != std::string::npos);
    const auto version = cli({"--version"});
    CHECK(version.code == kExitOk);
    CHECK(version.out.find(std::string(kToolkitVersion)) != std::string::npos);
  }

  TEST_CASE("print-config resolves overrides") {
    const auto r = cli({"print-config", "--seed", "9", "--stage2.generator=tiny"});
    REQUIRE(r.code == kExitOk);
    const RunConfig c = run_config_from_yaml(r.out);
    CHECK(c.seed == 9);
    CHECK(c.stage2.generator == GeneratorVariant::kTiny);
  }

  TEST_CASE("missing checkpoints are reported before compute") {
    const auto dir = test::fresh_dir("cli-missing");
    const std::string out = "--output_dir=" + dir.string();
    const auto attack = cli({"train-attack", out});
    CHECK(attack.code == kExitConfig);
    CHECK(attack.err.find("encoders checkpoint") != std::string::npos);
    const auto eval = cli({"evaluate", out});
    CHECK(eval.code == kExitConfig);
    CHECK(eval.err.find("generator checkpoint") != std::string::npos);
    const auto interp = cli({"interpret", out});
    CHECK(interp.code == kExitConfig);
    const auto perturb = cli({"attack", out});
    CHECK(perturb.code == kExitConfig);
    CHECK(perturb.err.find("attack.input_dir") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "train-attack" / "run.json"));
  }

  TEST_CASE("full pipeline on a small synthetic set") {
    const auto dir = test::fresh_dir("cli-pipeline");
    const fs::path out = dir / "run";
    test::write_bytes(dir / "small.yaml", small_yaml(out));
    const std::string cfg = (dir / "small.yaml").string();
    const RunConfig config = load_run_config(cfg);

    const auto run = [&](std::vector<std::string> args) {
      args.insert(args.begin() + 1, {"-c", cfg});
      const auto r = cli(args);
      INFO(args[0] << ": " << r.err);
      REQUIRE(r.code == kExitOk);
      const auto manifest = read_json(out / args[0] / "run.json");
      CHECK(manifest["command"] == args[0]);
      CHECK(manifest["config_digest"] == config.digest());
      CHECK(manifest["seed"] == 0);
      CHECK(manifest["toolkit_version"] == std::string(kToolkitVersion));
      CHECK(manifest["wall_time_seconds"].get<double>() >= 0.0);
      return manifest;
    };

    const auto gen = run({"synth-gen"});
    CHECK(gen["details"]["identities"] == 8);
    CHECK(fs::is_regular_file(out / "synth-gen" / "dataset" / "attributes.json"));

    const auto inv = run({"train-inversion"});
    CHECK(inv["details"]["checksums"]["encoders"]["unchanged"] == true);
    CHECK(fs::is_regular_file(config.encoders_path()));
    CHECK(fs::is_regular_file(config.inversion_path()));
    CHECK(load_checkpoint(config.inversion_path()).config_digest == config.digest());

    const auto atk = run({"train-attack"});
    for (const char* part : {"encoders", "inversion", "surrogate"}) {
      CAPTURE(part);
      CHECK(atk["details"]["checksums"][part]["unchanged"] == true);
    }
    CHECK(fs::is_regular_file(config.generator_path()));

    const fs::path query = out / "synth-gen" / "dataset" / "query";
    const auto perturbed = run({"attack", "--attack.input_dir", query.string()});
    const auto images = read_json(out / "attack" / "images" / "manifest.json");
    CHECK(images["within_bound"] == true);
    CHECK(images["images"].size() == perturbed["details"]["count"].get<std::size_t>());
    CHECK(images["max_abs_delta"].get<double>() <= 8.0 / 255.0 + 1e-7);
    const Image first = read_image(out / "attack" / "images" / images["images"][0]["output"].get<std::string>());
    CHECK(first.height == 32);
    CHECK(first.width == 16);

    const auto eval = run({"evaluate"});
    const auto report = EvaluationReport::from_json(read_json(out / "evaluate" / "report.json"));
    CHECK(report.victims.size() == 2);
    REQUIRE(report.mdr.has_value());
    CHECK(eval["details"]["mdr"].get<double>() == doctest::Approx(*report.mdr));
    CHECK(fs::is_regular_file(out / "evaluate" / "report.csv"));

    const auto clean = cli({"evaluate", "-c", cfg, "--evaluation.clean_only", "true"});
    REQUIRE(clean.code == kExitOk);
    const auto clean_report = EvaluationReport::from_json(read_json(out / "evaluate" / "report.json"));
    CHECK_FALSE(clean_report.mdr.has_value());
    CHECK_FALSE(clean_report.aap_adversarial.has_value());
    CHECK(clean_report.aap_clean == doctest::Approx(report.aap_clean));

    const auto interp = run({"interpret"});
    CHECK(fs::is_regular_file(out / "interpret" / "wordcloud.csv"));
    CHECK(fs::is_regular_file(out / "interpret" / "wordcloud.json"));
    const auto acc = read_json(out / "interpret" / "accuracy.json");
    CHECK(acc["top1_accuracy"].size() == 5);
    CHECK(interp["details"]["macro_top1_accuracy"].get<double>() == doctest::Approx(acc["macro"].get<double>()));
  }

  TEST_CASE("mismatched image size against stored encoders") {
    const auto dir = test::fresh_dir("cli-mismatch");
    const fs::path out = dir / "run";
    test::write_bytes(dir / "small.yaml", small_yaml(out));
    const std::string cfg = (dir / "small.yaml").string();
    REQUIRE(cli({"train-inversion", "-c", cfg, "--stage1.epochs", "1"}).code == kExitOk);
    const auto r = cli({"train-attack", "-c", cfg, "--joint_space.image_size", "[64, 32]"});
    CHECK(r.code == kExitConfig);
    CHECK(r.err.find("image") != std::string::npos);
  }
}
