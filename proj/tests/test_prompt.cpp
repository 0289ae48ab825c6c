#include <doctest.h>

#include <cmath>

#include "apattack/errors.hpp"
#include "apattack/prompt.hpp"
#include "apattack/rng.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace apattack;

namespace {

const Vocabulary& shipped_vocab() {
  static const Vocabulary v = Vocabulary::load(APATTACK_DATA_DIR "/vocab.json");
  return v;
}

ag::Tensor random_table(std::size_t rows, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  ag::Tensor t({rows, dim});
  for (auto& v : t.data) v = rng.normal();
  return t;
}

PseudoTokenSet random_pseudo(Rng& rng, std::size_t slots, std::size_t dim) {
  PseudoTokenSet p;
  for (std::size_t i = 0; i < slots; ++i) {
    std::vector<double> row(dim);
    for (auto& v : row) v = rng.normal();
    p.tokens.push_back(row);
  }
  return p;
}

double clip(const oracle::Rows& a, const oracle::Rows& b, double tau = 0.07) {
  return clip_contrastive_loss(std::span<const std::vector<double>>(a), std::span<const std::vector<double>>(b), tau);
}

}  // namespace

TEST_SUITE("prompt") {
  TEST_CASE("the five-slot template parses in attribute order") {
    const auto t = parse_template(kDefaultTemplateText);
    CHECK(t.slot_count() == 5);
    CHECK(t.attribute_names == std::vector<std::string>{"top", "underneath", "hairstyle", "shoes", "carrying"});
  }

  TEST_CASE("parse_template edge cases") {
    const auto one = parse_template("hello <S1>");
    CHECK(one.slot_count() == 1);
    CHECK(one.attribute_names == std::vector<std::string>{"slot1"});
    test::check_throws_naming<TemplateError>([] { parse_template("a <S1> b <S1>"); }, "<S1>");
    test::check_throws_naming<TemplateError>([] { parse_template("a <S1> b <S3>"); }, "<S2>");
    test::check_throws_naming<TemplateError>([] { parse_template("a <S2> b <S1>"); }, "<S2>");
    CHECK_THROWS_AS(parse_template("no slots"), TemplateError);
    CHECK_THROWS_AS(parse_template("<S1> <S2>", {"only-one"}), TemplateError);
    CHECK(parse_template("<S1> <S2>", {"x", "y"}).attribute_names == std::vector<std::string>{"x", "y"});
  }

  TEST_CASE("split_words lowercases and separates punctuation") {
    CHECK(split_words("A Photo, of <S1>.") == std::vector<std::string>{"a", "photo", ",", "of", "<S1>", "."});
    CHECK(split_words("").empty());
  }

  TEST_CASE("tokenize a bare placeholder") {
    const auto& v = shipped_vocab();
    const auto t = tokenize(parse_template("<S1>"), v);
    CHECK(t.token_ids == std::vector<int>{v.begin_id(), v.placeholder_id(0), v.end_id()});
    CHECK(t.placeholder_positions == std::vector<std::size_t>{1});
  }

  TEST_CASE("tokenize the default template with the shipped vocabulary") {
    const auto t = tokenize(parse_template(kDefaultTemplateText), shipped_vocab());
    CHECK(t.token_ids == std::vector<int>{0, 11, 12, 13, 11, 14, 15, 3, 16, 17, 18, 4,
                                          19, 18, 5, 20, 18, 6, 21, 18, 22, 7, 23, 1});
    CHECK(t.placeholder_positions == std::vector<std::size_t>{7, 11, 14, 17, 21});
    for (std::size_t i = 0; i < 5; ++i) CHECK(shipped_vocab().is_placeholder(t.token_ids[t.placeholder_positions[i]]));
  }

  TEST_CASE("tokenize rejects unknown words by name") {
    test::check_throws_naming<TokenizationError>(
        [] { tokenize(parse_template("a zzqx <S1>"), shipped_vocab()); }, "zzqx");
  }

  TEST_CASE("vocabulary is a bijection with reserved ids apart from words") {
    const auto& v = shipped_vocab();
    for (int id = 0; id < static_cast<int>(v.size()); ++id) CHECK(v.id(v.token(id)) == id);
    for (int id : v.word_ids()) CHECK_FALSE(v.is_placeholder(id));
    CHECK(v.placeholder_capacity() >= 5);
    CHECK_FALSE(v.find("zzqx").has_value());
    CHECK_THROWS_AS(v.token(10000), InputError);
  }

  TEST_CASE("vocabulary load errors") {
    CHECK_THROWS_AS(Vocabulary::from_json(nlohmann::json::object()), LoadError);
    const nlohmann::json dup = {{"reserved", {{"<bos>", 0}, {"<eos>", 1}, {"<pad>", 2}, {"<S1>", 3}}},
                                {"tokens", {{"a", 3}}}};
    CHECK_THROWS_AS(Vocabulary::from_json(dup), LoadError);
    const nlohmann::json gap = {{"reserved", {{"<bos>", 0}, {"<eos>", 1}, {"<pad>", 2}, {"<S1>", 3}}},
                                {"tokens", {{"a", 5}}}};
    CHECK_THROWS_AS(Vocabulary::from_json(gap), LoadError);
    CHECK_THROWS_AS(Vocabulary::load("/nonexistent/vocab.json"), LoadError);
    const auto v = Vocabulary::from_json(shipped_vocab().to_json());
    CHECK(v.size() == shipped_vocab().size());
  }

  TEST_CASE("zero injection zeroes only the placeholder rows") {
    const auto& v = shipped_vocab();
    const auto tok = tokenize(parse_template(kDefaultTemplateText), v);
    const auto table = random_table(v.size(), 8, 1);
    PseudoTokenSet zero{std::vector<std::vector<double>>(5, std::vector<double>(8, 0.0))};
    const auto injected = inject_pseudo_tokens(tok, zero, table);
    auto expected = embed_tokens(tok, table);
    for (auto p : tok.placeholder_positions)
      for (std::size_t e = 0; e < 8; ++e) expected.rows.data[p * 8 + e] = 0.0;
    CHECK(injected.rows.data == expected.rows.data);
    CHECK(injected.length() == tok.length());
  }

  TEST_CASE("injection writes slots bitwise and leaves other rows alone") {
    const auto& v = shipped_vocab();
    const auto tok = tokenize(parse_template(kDefaultTemplateText), v);
    const auto table = random_table(v.size(), 8, 2);
    const auto plain = embed_tokens(tok, table);
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
      const auto pseudo = random_pseudo(rng, 5, 8);
      const auto seq = inject_pseudo_tokens(tok, pseudo, table);
      for (std::size_t k = 0; k < tok.length(); ++k) {
        const auto it = std::find(tok.placeholder_positions.begin(), tok.placeholder_positions.end(), k);
        for (std::size_t e = 0; e < 8; ++e) {
          const double got = seq.rows.data[k * 8 + e];
          if (it == tok.placeholder_positions.end()) {
            CHECK(got == plain.rows.data[k * 8 + e]);
          } else {
            CHECK(got == pseudo.tokens[it - tok.placeholder_positions.begin()][e]);
          }
        }
      }
    }
  }

  TEST_CASE("batch injection equals per-sample injection") {
    const auto& v = shipped_vocab();
    const auto tok = tokenize(parse_template(kDefaultTemplateText), v);
    const auto table = random_table(v.size(), 4, 4);
    Rng rng(5);
    const std::vector<PseudoTokenSet> sets{random_pseudo(rng, 5, 4), random_pseudo(rng, 5, 4)};
    std::vector<ag::Var> slots;
    for (std::size_t i = 0; i < 5; ++i) {
      ag::Tensor t({2, 4});
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t e = 0; e < 4; ++e) t.data[n * 4 + e] = sets[n].tokens[i][e];
      slots.push_back(ag::Var::constant(t));
    }
    const auto batch = inject_pseudo_token_batch(tok, slots, table).value();
    for (std::size_t n = 0; n < 2; ++n) {
      const auto one = inject_pseudo_tokens(tok, sets[n], table).rows.data;
      CHECK(std::vector<double>(batch.data.begin() + n * one.size(), batch.data.begin() + (n + 1) * one.size()) == one);
    }
  }

  TEST_CASE("injection dimension checks") {
    const auto& v = shipped_vocab();
    const auto tok = tokenize(parse_template(kDefaultTemplateText), v);
    const auto table = random_table(v.size(), 8, 6);
    Rng rng(7);
    CHECK_THROWS_AS(inject_pseudo_tokens(tok, random_pseudo(rng, 4, 8), table), InputError);
    CHECK_THROWS_AS(inject_pseudo_tokens(tok, random_pseudo(rng, 5, 7), table), InputError);
  }

  TEST_CASE("clip loss of a single pair is zero") {
    CHECK(clip({{1, 2, 3}}, {{-1, 0.5, 2}}) == doctest::Approx(0.0).epsilon(1e-15));
  }

  TEST_CASE("clip loss on an orthonormal pair equals the hand softmax") {
    const double tau = 0.07;
    const double per = -std::log(std::exp(1 / tau) / (std::exp(1 / tau) + std::exp(0.0)));
    const oracle::Rows e{{1, 0}, {0, 1}};
    CHECK(clip(e, e, tau) == doctest::Approx(2 * per).epsilon(1e-12));
  }

  TEST_CASE("clip loss matches the brute-force oracle") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t n = 1 + rng.below(8);
      const auto a = oracle::random_rows(rng, n, 6), b = oracle::random_rows(rng, n, 6);
      CHECK(clip(a, b) == doctest::Approx(oracle::clip_loss(a, b, 0.07)).epsilon(1e-10));
    }
  }

  TEST_CASE("clip loss is invariant to scaling and consistent permutation") {
    Rng rng(9);
    const auto a = oracle::random_rows(rng, 5, 4), b = oracle::random_rows(rng, 5, 4);
    const double base = clip(a, b);
    auto scaled = a;
    for (auto& v : scaled[2]) v *= 3.0;
    for (auto& v : scaled[0]) v *= 0.01;
    CHECK(clip(scaled, b) == doctest::Approx(base).epsilon(1e-12));
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    oracle::Rows pa, pb;
    for (auto p : perm) {
      pa.push_back(a[p]);
      pb.push_back(b[p]);
    }
    CHECK(clip(pa, pb) == doctest::Approx(base).epsilon(1e-12));
  }

  TEST_CASE("clip loss decreases as one diagonal similarity grows") {
    // Images are the first four basis vectors of R^8 and texts unit vectors,
    // so cos(image i, text j) = text_j[i]. Raising text_1[1] and taking the
    // norm from text_1's private coordinate changes that one entry only.
    Rng rng(10);
    for (int point = 0; point < 3; ++point) {
      oracle::Rows a(4, std::vector<double>(8, 0.0)), b(4, std::vector<double>(8, 0.0));
      for (std::size_t i = 0; i < 4; ++i) a[i][i] = 1.0;
      for (std::size_t j = 0; j < 4; ++j) {
        double used = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
          b[j][i] = rng.uniform(-0.4, 0.4);
          used += b[j][i] * b[j][i];
        }
        b[j][4 + j] = std::sqrt(1.0 - used);
      }
      const double before = clip(a, b);
      const double others = 1.0 - b[1][5] * b[1][5] - b[1][1] * b[1][1];
      b[1][1] += 0.05;
      b[1][5] = std::sqrt(1.0 - others - b[1][1] * b[1][1]);
      CHECK(oracle::norm(b[1]) == doctest::Approx(1.0));
      CHECK(clip(a, b) < before);
    }
  }

  TEST_CASE("clip loss errors") {
    CHECK_THROWS_AS(clip({{0, 0}}, {{1, 0}}), NormalizationError);
    CHECK_THROWS_AS(clip({{1, 0}}, {{1, 0}, {0, 1}}), InputError);
    CHECK_THROWS_AS(clip({{1, 0}}, {{1, 0}}, 0.0), InputError);
  }

  TEST_CASE("clip loss gradients match finite differences") {
    Rng rng(11);
    const auto a = oracle::random_rows(rng, 4, 3), b = oracle::random_rows(rng, 4, 3);
    ag::Var va = ag::Var::leaf(oracle::to_tensor(a), true);
    ag::backward(clip_contrastive_loss(va, ag::Var::constant(oracle::to_tensor(b)), 0.07));
    auto flat = oracle::to_tensor(a).data;
    const auto numeric = oracle::numeric_gradient(flat, [&] {
      oracle::Rows r(4, std::vector<double>(3));
      for (std::size_t i = 0; i < 12; ++i) r[i / 3][i % 3] = flat[i];
      return oracle::clip_loss(r, b, 0.07);
    });
    CHECK(oracle::relative_error(numeric, va.grad()) < 1e-6);
  }
}
