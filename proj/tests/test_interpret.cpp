#include <doctest.h>

#include <cmath>

#include "apattack/errors.hpp"
#include "apattack/interpret.hpp"
#include "test_util.hpp"

using namespace apattack;

namespace {

const Vocabulary& shipped_vocab() {
  static const Vocabulary v = Vocabulary::load(APATTACK_DATA_DIR "/vocab.json");
  return v;
}

const AttributeVocabulary& shipped_words() {
  static const AttributeVocabulary w = AttributeVocabulary::load(APATTACK_DATA_DIR "/attribute_vocab.json");
  return w;
}

// [V,2] table with chosen rows for a few words, zero elsewhere.
ag::Tensor table_with(const std::vector<std::pair<std::string, std::array<double, 2>>>& rows) {
  const auto& v = shipped_vocab();
  ag::Tensor t({v.size(), 2});
  for (const auto& [word, e] : rows) {
    const auto r = v.row(v.id(word));
    t.data[r * 2] = e[0];
    t.data[r * 2 + 1] = e[1];
  }
  return t;
}

using Entries = std::vector<std::pair<std::string, std::vector<std::string>>>;

const AttributeVocabulary& color_words() {
  static const AttributeVocabulary w(Entries{{"top", {"red", "green", "blue"}}});
  return w;
}

std::vector<WordRanking> sample_rankings() {
  return {{"0001_c1_000000", "top", {{"red", 0.9}, {"blue", 0.1}, {"green", -0.3}}},
          {"0001_c1_000000", "carrying", {{"nothing", 0.5}, {"red", 0.25}}},
          {"0002_c2_000004", "top", {{"blue", 1.0 / 3.0}, {"red", 0.1}, {"green", 0.05}}}};
}

}  // namespace

TEST_SUITE("interpret") {
  TEST_CASE("attribute vocabulary") {
    const auto& w = shipped_words();
    CHECK(w.attributes() == default_attribute_names());
    CHECK(w.words("carrying").front() == "nothing");
    CHECK(w.words("top").size() == 6);
    CHECK(AttributeVocabulary::from_json(w.to_json()).to_json() == w.to_json());
    test::check_throws_naming<InputError>([&] { w.words("gloves"); }, "gloves");
    CHECK_NOTHROW(w.check_covers(parse_template(kDefaultTemplateText)));
    const AttributeVocabulary only(Entries{{"top", {"red"}}});
    test::check_throws_naming<ConfigError>([&] { only.check_covers(parse_template(kDefaultTemplateText)); },
                                           "underneath");
    CHECK_THROWS_AS(AttributeVocabulary(Entries{}), ConfigError);
    CHECK_THROWS_AS(AttributeVocabulary(Entries{{"top", {}}}), ConfigError);
    CHECK_THROWS_AS(AttributeVocabulary(Entries{{"top", {"red"}}, {"top", {"blue"}}}), ConfigError);
    CHECK_THROWS_AS(AttributeVocabulary::from_json({{"attributes", {{"top", "red"}}}}), ConfigError);
    CHECK_THROWS_AS(AttributeVocabulary::from_json({{"words", 1}}), ConfigError);
    const auto dir = test::fresh_dir("interpret-vocab");
    test::write_bytes(dir / "bad.json", "{ nope");
    CHECK_THROWS_AS(AttributeVocabulary::load(dir / "bad.json"), LoadError);
    CHECK_THROWS_AS(AttributeVocabulary::load(dir / "missing.json"), LoadError);
  }

  TEST_CASE("word embeddings average sub-token rows") {
    const auto t = table_with({{"red", {1.0, 2.0}}, {"blue", {3.0, -4.0}}});
    CHECK(word_token_embedding("red", shipped_vocab(), t) == std::vector<double>{1.0, 2.0});
    CHECK(word_token_embedding("red blue", shipped_vocab(), t) == std::vector<double>{2.0, -1.0});
    test::check_throws_naming<TokenizationError>([&] { word_token_embedding("beige", shipped_vocab(), t); }, "beige");
    CHECK_THROWS_AS(word_token_embedding("", shipped_vocab(), t), TokenizationError);
    CHECK_THROWS_AS(word_token_embedding("red", shipped_vocab(), ag::Tensor({4})), InputError);
  }

  TEST_CASE("ranking by cosine") {
    const auto t = table_with({{"red", {1.0, 0.0}}, {"green", {0.0, 2.0}}, {"blue", {-1.0, 1.0}}});
    const std::vector<double> token{3.0, 1.0};
    const auto r = rank_words(token, "top", color_words(), shipped_vocab(), t);
    REQUIRE(r.size() == 3);
    const double n = std::sqrt(10.0);
    CHECK(r[0] == WordScore{"red", 3.0 / n});
    CHECK(r[1].word == "green");
    CHECK(r[1].cosine == doctest::Approx(1.0 / n));
    CHECK(r[2].word == "blue");
    CHECK(r[2].cosine == doctest::Approx(-2.0 / (n * std::sqrt(2.0))));
    // Scaling the pseudo-token leaves the ranking unchanged.
    const std::vector<double> scaled{30.0, 10.0};
    const auto s = rank_words(scaled, "top", color_words(), shipped_vocab(), t);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(s[i].word == r[i].word);
      CHECK(s[i].cosine == doctest::Approx(r[i].cosine).epsilon(1e-12));
    }
  }

  TEST_CASE("equal cosines keep vocabulary order") {
    const auto t = table_with({{"red", {1.0, 0.0}}, {"green", {2.0, 0.0}}, {"blue", {0.5, 0.0}}});
    const std::vector<double> token{1.0, 1.0};
    const auto r = rank_words(token, "top", color_words(), shipped_vocab(), t);
    CHECK(r[0].word == "red");
    CHECK(r[1].word == "green");
    CHECK(r[2].word == "blue");
    const AttributeVocabulary reversed(Entries{{"top", {"blue", "green", "red"}}});
    CHECK(rank_words(token, "top", reversed, shipped_vocab(), t)[0].word == "blue");
  }

  TEST_CASE("ranking errors") {
    const auto t = table_with({{"red", {1.0, 0.0}}, {"blue", {0.0, 1.0}}});
    const std::vector<double> zero{0.0, 0.0}, three{1.0, 2.0, 3.0}, ok{1.0, 1.0};
    CHECK_THROWS_AS(rank_words(zero, "top", color_words(), shipped_vocab(), t), NormalizationError);
    CHECK_THROWS_AS(rank_words(three, "top", color_words(), shipped_vocab(), t), InputError);
    // green has an all-zero row
    test::check_throws_naming<NormalizationError>([&] { rank_words(ok, "top", color_words(), shipped_vocab(), t); },
                                                  "green");
    CHECK_THROWS_AS(rank_words(ok, "hat", color_words(), shipped_vocab(), t), InputError);
  }

  TEST_CASE("interpreting samples ranks every palette word per slot") {
    const JointSpaceConfig c = [] {
      JointSpaceConfig j;
      j.text_pooling = TextPooling::kPositional;
      return j;
    }();
    const auto prompt = parse_template(kDefaultTemplateText);
    const auto js = build_aligned_reference_encoders(0, c, shipped_vocab(), tokenize(prompt, shipped_vocab()));
    const InversionNetworks nets(InversionShape::for_space(c), 0);
    SyntheticSpec s;
    s.identities = 4;
    s.images_per_identity = 2;
    s.query_per_identity = 1;
    const auto ds = render_dataset(s);
    const auto r = interpret_samples(ds.train, js, nets, prompt, shipped_words(), shipped_vocab());
    REQUIRE(r.size() == ds.train.size() * 5);
    for (std::size_t i = 0; i < r.size(); ++i) {
      CHECK(r[i].image_id == ds.train[i / 5].image_id);
      CHECK(r[i].attribute == default_attribute_names()[i % 5]);
      CHECK(r[i].words.size() == 6);
      for (std::size_t k = 1; k < r[i].words.size(); ++k) CHECK(r[i].words[k - 1].cosine >= r[i].words[k].cosine);
    }
    const InversionNetworks three(InversionShape::for_space(c, 3), 0);
    CHECK_THROWS_AS(interpret_samples(ds.train, js, three, prompt, shipped_words(), shipped_vocab()), ConfigError);
  }

  TEST_CASE("one image with top-2 words gives ten CSV rows") {
    std::vector<WordRanking> one;
    for (const auto& a : default_attribute_names())
      one.push_back({"0001_c1_000000", a, {{"red", 0.5}, {"blue", 0.25}, {"green", 0.125}}});
    const auto csv = wordcloud_csv(one);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 11);
    CHECK(csv.rfind("image_id,attribute,rank,word,cosine\n", 0) == 0);
    CHECK(csv.find("0001_c1_000000,top,2,blue,0.25\n") != std::string::npos);
    CHECK(csv.find("green") == std::string::npos);
    CHECK(wordcloud_json(one)["rankings"].size() == 5);
    CHECK(wordcloud_json(one)["top_k"] == 2);
    CHECK(truncate_rankings(one, 0) == one);
    CHECK(truncate_rankings(one, 1)[3].words.size() == 1);
  }

  TEST_CASE("CSV and JSON round trips are exact") {
    const auto r = sample_rankings();
    CHECK(parse_wordcloud_csv(wordcloud_csv(r, 0)) == r);
    CHECK(parse_wordcloud_json(wordcloud_json(r, 0)) == r);
    CHECK(parse_wordcloud_csv(wordcloud_csv(r, 2)) == truncate_rankings(r, 2));
    std::vector<WordRanking> odd{{"a,\"b\"", "top", {{"light, blue", 0.5}}}};
    CHECK(parse_wordcloud_csv(wordcloud_csv(odd)) == odd);
    const std::string crlf = "image_id,attribute,rank,word,cosine\r\nx,top,1,red,0.5\r\n";
    CHECK(parse_wordcloud_csv(crlf).front().words.front() == WordScore{"red", 0.5});
  }

  TEST_CASE("empty ranking list writes only the header") {
    const std::vector<WordRanking> none;
    CHECK(wordcloud_csv(none) == "image_id,attribute,rank,word,cosine\n");
    CHECK(parse_wordcloud_csv(wordcloud_csv(none)).empty());
    CHECK(wordcloud_json(none)["rankings"].empty());
    const auto dir = test::fresh_dir("interpret-empty");
    export_wordcloud_data(dir / "wordcloud", none);
    CHECK(test::read_bytes(dir / "wordcloud.csv") == "image_id,attribute,rank,word,cosine\n");
    CHECK(parse_wordcloud_json(nlohmann::json::parse(test::read_bytes(dir / "wordcloud.json"))).empty());
  }

  TEST_CASE("exported files parse back") {
    const auto dir = test::fresh_dir("interpret-export");
    export_wordcloud_data(dir / "wc", sample_rankings(), 0);
    CHECK(parse_wordcloud_csv(test::read_bytes(dir / "wc.csv")) == sample_rankings());
    CHECK(parse_wordcloud_json(nlohmann::json::parse(test::read_bytes(dir / "wc.json"))) == sample_rankings());
  }

  TEST_CASE("malformed word-cloud input") {
    const std::string h = "image_id,attribute,rank,word,cosine\n";
    CHECK_THROWS_AS(parse_wordcloud_csv(""), InputError);
    CHECK_THROWS_AS(parse_wordcloud_csv("id,attr\n"), InputError);
    CHECK_THROWS_AS(parse_wordcloud_csv(h + "x,top,2,red,0.5\n"), InputError);
    CHECK_THROWS_AS(parse_wordcloud_csv(h + "x,top,1,red,0.5\nx,top,3,blue,0.1\n"), InputError);
    CHECK_THROWS_AS(parse_wordcloud_csv(h + "x,top,one,red,0.5\n"), InputError);
    CHECK_THROWS_AS(parse_wordcloud_csv(h + "x,top,1,red\n"), InputError);
    CHECK_THROWS_AS(parse_wordcloud_csv(h + "\"x,top,1,red,0.5\n"), InputError);
    CHECK_THROWS_AS(parse_wordcloud_json(nlohmann::json{{"rankings", {{{"image_id", 1}}}}}), InputError);
  }

  TEST_CASE("interpretation accuracy against the ground-truth tuples") {
    Dataset ds;
    ds.attribute_names = default_attribute_names();
    AttributeTuple t1, t2;
    t1.values = {0, 4, 0, 0, 0};  // top red, carrying nothing
    t2.values = {4, 0, 0, 0, 1};  // top blue, carrying red
    ds.attributes = {{1, t1}, {2, t2}};
    std::vector<Sample> samples(2);
    samples[0].pid = 1;
    samples[0].image_id = "0001_c1_000000";
    samples[1].pid = 2;
    samples[1].image_id = "0002_c2_000004";
    const auto acc = interpretation_accuracy(sample_rankings(), samples, ds);
    CHECK(acc.images == 2);
    REQUIRE(acc.per_attribute.size() == 2);
    CHECK(acc.per_attribute[0] == std::pair<std::string, double>{"top", 1.0});
    CHECK(acc.per_attribute[1] == std::pair<std::string, double>{"carrying", 1.0});
    CHECK(acc.macro == 1.0);
    auto wrong = sample_rankings();
    std::swap(wrong[2].words[0], wrong[2].words[1]);
    const auto half = interpretation_accuracy(wrong, samples, ds);
    CHECK(half.per_attribute[0].second == 0.5);
    CHECK(half.macro == 0.75);
    CHECK_THROWS_AS(interpretation_accuracy(std::vector<WordRanking>{}, samples, ds), EvaluationError);
    CHECK_THROWS_AS(interpretation_accuracy(sample_rankings(), std::span(samples).first(1), ds), InputError);
    auto bad_attr = sample_rankings();
    bad_attr[0].attribute = "hat";
    CHECK_THROWS_AS(interpretation_accuracy(bad_attr, samples, ds), InputError);
  }
}
