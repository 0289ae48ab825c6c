#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include <json.hpp>

#include "apattack/domain.hpp"
#include "apattack/errors.hpp"
#include "apattack/metrics.hpp"
#include "apattack/synthdata.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace apattack;
namespace fs = std::filesystem;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.identities = 4;
  s.images_per_identity = 3;
  s.height = 32;
  s.width = 16;
  return s;
}

std::vector<double> region_mean(const Image& im, const ag::PixelBox& b) {
  std::vector<double> m(3, 0.0);
  for (std::size_t y = b.y0; y < b.y1; ++y)
    for (std::size_t x = b.x0; x < b.x1; ++x)
      for (std::size_t c = 0; c < 3; ++c) m[c] += im.at(y, x, c);
  for (auto& v : m) v /= static_cast<double>((b.y1 - b.y0) * (b.x1 - b.x0));
  return m;
}

}  // namespace

TEST_SUITE("synthdata") {
  TEST_CASE("palette colors share one luminance and differ in hue") {
    const auto& basis = domain::opponent_basis();
    for (const auto& w : domain::hue_words()) {
      const auto c = domain::hue_color(w).rgb;
      CHECK((c[0] + c[1] + c[2]) / 3 == doctest::Approx(domain::kBodyGray));
      double chroma = 0;
      for (std::size_t j = 1; j < 3; ++j) {
        double a = 0;
        for (std::size_t k = 0; k < 3; ++k) a += basis[j][k] * (c[k] - domain::kBodyGray);
        chroma += a * a;
      }
      CHECK(std::sqrt(chroma) == doctest::Approx(domain::kChromaRadius));
    }
    CHECK(domain::slot_palette_words(4).front() == "nothing");
    CHECK(domain::slot_palette(0).size() == 6);
    CHECK_THROWS_AS(domain::hue_color("beige"), InputError);
    CHECK_THROWS_AS(domain::region_pixel_boxes(30, 16), ConfigError);
  }

  TEST_CASE("spec validation") {
    auto s = small_spec();
    s.identities = 1;
    CHECK_THROWS_AS(render_dataset(s), ConfigError);
    s = small_spec();
    s.images_per_identity = 1;
    CHECK_THROWS_AS(render_dataset(s), ConfigError);
    s = small_spec();
    s.query_per_identity = 3;
    CHECK_THROWS_AS(render_dataset(s), ConfigError);
  }

  TEST_CASE("two identities with two images each") {
    auto s = small_spec();
    s.identities = 2;
    s.images_per_identity = 2;
    s.query_per_identity = 1;
    const auto ds = render_dataset(s);
    CHECK(ds.train.size() + ds.query.size() + ds.gallery.size() == 4);
    CHECK(ds.attributes.size() == 2);
    CHECK(ds.attributes.at(1) != ds.attributes.at(2));
  }

  TEST_CASE("generation is a pure function of the spec") {
    const auto a = render_dataset(small_spec()), b = render_dataset(small_spec());
    CHECK(a.train.size() == b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(a.train[i].image == b.train[i].image);
    auto other = small_spec();
    other.seed = 1;
    const auto c = render_dataset(other);
    bool differ = false;
    for (std::size_t i = 0; i < a.train.size(); ++i) differ = differ || a.train[i].image != c.train[i].image;
    CHECK(differ);
  }

  TEST_CASE("same pid implies same tuple, different pids differ") {
    SyntheticSpec s;
    s.identities = 64;
    s.images_per_identity = 3;
    s.height = 16;
    s.width = 8;
    s.jitter = false;
    const auto ds = render_dataset(s);
    std::set<AttributeTuple> tuples;
    for (const auto& [pid, t] : ds.attributes) tuples.insert(t);
    CHECK(tuples.size() == 64);
    std::map<int, Image> first;
    for (const auto* split : {&ds.train, &ds.query, &ds.gallery})
      for (const auto& smp : *split) {
        const auto [it, fresh] = first.emplace(smp.pid, smp.image);
        if (!fresh) CHECK(it->second == smp.image);
      }
    CHECK(first.size() == 64);
    for (int pid = 2; pid <= 64; ++pid) CHECK(first.at(pid) != first.at(pid - 1));
  }

  TEST_CASE("region means match the manifest colors without jitter") {
    auto s = small_spec();
    s.jitter = false;
    const auto dir = test::fresh_dir("synth-nojitter");
    const auto ds = generate_dataset(s, dir);
    const auto manifest = nlohmann::json::parse(test::read_bytes(dir / "attributes.json"));
    const auto boxes = domain::region_pixel_boxes(s.height, s.width);
    for (const auto* split : {&ds.train, &ds.query, &ds.gallery})
      for (const auto& smp : *split) {
        char key[8];
        std::snprintf(key, sizeof key, "%04d", smp.pid);
        const auto& entry = manifest["identities"][key];
        for (std::size_t slot = 0; slot < 5; ++slot) {
          const std::string word = entry[default_attribute_names()[slot]];
          const auto rgb = word == "nothing" ? domain::background_rgb() : domain::hue_color(word).rgb;
          const auto m = region_mean(smp.image, boxes[slot]);
          for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(m[c] - rgb[c]) <= 10.0 / 255.0);
        }
      }
  }

  TEST_CASE("written files are bit-identical across runs and reload to the same dataset") {
    const auto a = test::fresh_dir("synth-a"), b = test::fresh_dir("synth-b");
    const auto ds = generate_dataset(small_spec(), a);
    generate_dataset(small_spec(), b);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
      if (!e.is_regular_file()) continue;
      ++files;
      CHECK(test::read_bytes(e.path()) == test::read_bytes(b / fs::relative(e.path(), a)));
    }
    CHECK(files == 4 * 3 + 1);
    const auto back = load_dataset(a, 32, 16);
    CHECK(back.attributes == ds.attributes);
    REQUIRE(back.query.size() == ds.query.size());
    for (std::size_t i = 0; i < ds.query.size(); ++i) {
      CHECK(back.query[i].pid == ds.query[i].pid);
      CHECK(back.query[i].camid == ds.query[i].camid);
      CHECK(back.query[i].image_id == ds.query[i].image_id);
      CHECK(back.query[i].image == ds.query[i].image);
    }
    const auto manifest = nlohmann::ordered_json::parse(test::read_bytes(a / "attributes.json"));
    for (const auto* split : {&back.train, &back.query, &back.gallery})
      for (const auto& smp : *split) {
        char key[8];
        std::snprintf(key, sizeof key, "%04d", smp.pid);
        const auto words = back.attributes.at(smp.pid).words();
        for (std::size_t slot = 0; slot < 5; ++slot)
          CHECK(manifest["identities"][key][default_attribute_names()[slot]] == words[slot]);
      }
  }

  TEST_CASE("re-id filename parsing") {
    const auto n = parse_reid_filename("0001_c1_000001.png");
    CHECK(n.pid == 1);
    CHECK(n.camid == 1);
    const auto m = parse_reid_filename("0042_c6s2_000301_01.jpg");
    CHECK(m.pid == 42);
    CHECK(m.camid == 6);
    CHECK(parse_reid_filename("-1_c3_000001.jpg").pid == -1);
    test::check_throws_naming<InputError>([] { parse_reid_filename("person1.png"); }, "person1.png");
    CHECK_THROWS_AS(parse_reid_filename("0001_c1_000001.bmp"), InputError);
  }

  TEST_CASE("folder loading stops at the first bad name and resizes") {
    const auto dir = test::fresh_dir("reid-folder");
    write_png(Image(8, 4, 0.5), dir / "0001_c1_000001.png");
    write_png(Image(8, 4, 0.5), dir / "0002_c2_000002.png");
    const auto ok = load_reid_folder(dir, 16, 8);
    REQUIRE(ok.size() == 2);
    CHECK(ok[1].pid == 2);
    CHECK(ok[1].camid == 2);
    CHECK(ok[0].image.height == 16);
    CHECK(ok[0].image_id == "0001_c1_000001");
    write_png(Image(8, 4, 0.5), dir / "0003_bad.png");
    write_png(Image(8, 4, 0.5), dir / "zzz_bad.png");
    test::check_throws_naming<InputError>([&] { load_reid_folder(dir, 16, 8); }, "0003_bad.png");
    CHECK_THROWS_AS(load_reid_folder(dir / "missing", 16, 8), LoadError);
  }

  TEST_CASE("constant image gives the projection of a constant vector") {
    const HandcraftedExtractor h(32, 16, 0);
    // Channel centring maps equal region means to zero.
    for (double level : {0.0, 0.3, 1.0}) {
      const auto f = h.extract(std::vector<Image>{Image(32, 16, level)}).front();
      for (double v : f.values) CHECK(std::abs(v) < 1e-12);
    }
  }

  TEST_CASE("handcrafted feature is the projection of centred region means") {
    const HandcraftedExtractor h(32, 16, 3, 8);
    const auto ds = render_dataset(small_spec());
    const auto& im = ds.train[0].image;
    const auto boxes = domain::region_pixel_boxes(32, 16);
    std::vector<double> means;
    for (const auto& b : boxes)
      for (double v : region_mean(im, b)) means.push_back(v);
    for (std::size_t c = 0; c < 3; ++c) {
      double avg = 0;
      for (std::size_t r = 0; r < 5; ++r) avg += means[r * 3 + c] / 5;
      for (std::size_t r = 0; r < 5; ++r) means[r * 3 + c] -= avg;
    }
    const auto& p = h.projection();
    REQUIRE(p.shape == ag::Shape{8, 15});
    const auto f = h.extract(std::vector<Image>{im}).front();
    for (std::size_t o = 0; o < 8; ++o) {
      double s = 0;
      for (std::size_t k = 0; k < 15; ++k) s += p.data[o * 15 + k] * means[k];
      CHECK(f.values[o] == doctest::Approx(s).epsilon(1e-12));
    }
  }

  TEST_CASE("brightness only rescales the handcrafted feature") {
    const HandcraftedExtractor h(32, 16, 0);
    auto s = small_spec();
    s.jitter = false;
    const auto ds = render_dataset(s);
    const AttributeTuple t = ds.attributes.at(1);
    CameraJitter bright;
    bright.brightness = 1.1;
    bright.background = domain::background_rgb();
    const auto a = h.extract(std::vector<Image>{render_identity(t, 32, 16, CameraJitter{1.0, domain::background_rgb()})});
    const auto b = h.extract(std::vector<Image>{render_identity(t, 32, 16, bright)});
    CHECK(oracle::cosine(a[0].values, b[0].values) == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("same identity renders are closer than any other identity") {
    SyntheticSpec s;
    s.identities = 16;
    s.images_per_identity = 4;
    const auto ds = render_dataset(s);
    const HandcraftedExtractor h(128, 64, 0);
    std::vector<Sample> all = ds.train;
    all.insert(all.end(), ds.query.begin(), ds.query.end());
    all.insert(all.end(), ds.gallery.begin(), ds.gallery.end());
    const auto feats = h.extract(images_of(all));
    for (std::size_t i = 0; i < all.size(); ++i) {
      double same = -2, other = -2;
      for (std::size_t j = 0; j < all.size(); ++j) {
        if (i == j) continue;
        const double c = oracle::cosine(feats[i].values, feats[j].values);
        (all[j].pid == all[i].pid ? same : other) = std::max(all[j].pid == all[i].pid ? same : other, c);
      }
      CHECK(same > other);
    }
  }

  TEST_CASE("handcrafted victim retrieves the clean split") {
    const auto ds = render_dataset(SyntheticSpec{});
    const HandcraftedExtractor h(128, 64, 0);
    const std::vector<const FeatureExtractor*> victims{&h};
    const auto report = evaluate(victims, ds, nullptr, {});
    CHECK(report.victims[0].clean_map >= 0.95);
  }

  TEST_CASE("handcrafted extractor is seeded, differentiable and size checked") {
    const HandcraftedExtractor a(32, 16, 0), b(32, 16, 0), c(32, 16, 1);
    CHECK(a.checksum() == b.checksum());
    CHECK(a.checksum() != c.checksum());
    CHECK(HandcraftedExtractor(128, 64, 0).checksum() ==
          "f169c375043c0b133f31804fafd40284b3a9abea5f44c6e184ce306d1ac105b5");
    CHECK_THROWS_AS(a.extract(std::vector<Image>{Image(64, 32, 0.5)}), ConfigError);
    CHECK_THROWS_AS(HandcraftedExtractor(32, 16, 0, 0), ConfigError);
    Rng rng(1);
    ag::Tensor x({1, 3, 32, 16});
    for (auto& v : x.data) v = rng.uniform();
    ag::Var leaf = ag::Var::leaf(x, true);
    ag::backward(ag::sum(a.forward(leaf)));
    const auto numeric =
        oracle::numeric_gradient(x.data, [&] { return ag::sum(a.forward(ag::Var::constant(x))).item(); });
    CHECK(oracle::relative_error(numeric, leaf.grad()) < 1e-4);
  }
}
