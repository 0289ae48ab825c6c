#include "apattack/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>
#include <set>

#include "apattack/errors.hpp"
#include "apattack/prompt.hpp"
#include "apattack/rng.hpp"

namespace apattack {

namespace {

constexpr std::size_t kExtractChunk = 64;

std::string pad_number(long value, int width) {
  std::string s = std::to_string(value < 0 ? -value : value);
  if (static_cast<int>(s.size()) < width) s.insert(0, static_cast<std::size_t>(width) - s.size(), '0');
  return value < 0 ? "-" + s : s;
}

std::string pid_key(int pid) { return pad_number(pid, 4); }

AttributeTuple random_tuple(Rng& rng) {
  AttributeTuple t;
  for (std::size_t s = 0; s < domain::kSlots; ++s) t.values[s] = rng.below(domain::slot_palette(s).size());
  return t;
}

// Training identities cover every palette value of every slot when there are
// enough of them; the rest are uniform draws. All tuples distinct.
std::vector<AttributeTuple> draw_tuples(const SyntheticSpec& spec) {
  const std::size_t n = spec.identities, n_train = n / 2;
  std::size_t domain_size = 1;
  for (std::size_t s = 0; s < domain::kSlots; ++s) domain_size *= domain::slot_palette(s).size();
  if (n > domain_size) throw ConfigError("more identities than distinct attribute tuples");
  Rng rng(Rng::derive(spec.seed, 7));
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<AttributeTuple> tuples(n);
    for (std::size_t s = 0; s < domain::kSlots; ++s) {
      const std::size_t k = domain::slot_palette(s).size();
      std::vector<std::size_t> column;
      if (n_train >= k) {
        for (std::size_t v = 0; v < k; ++v) column.push_back(v);
      }
      while (column.size() < n_train) column.push_back(rng.below(k));
      for (std::size_t i = column.size(); i-- > 1;) std::swap(column[i], column[rng.below(i + 1)]);
      for (std::size_t i = 0; i < n_train; ++i) tuples[i].values[s] = column[i];
    }
    for (std::size_t i = n_train; i < n; ++i) tuples[i] = random_tuple(rng);
    std::set<AttributeTuple> seen(tuples.begin(), tuples.end());
    if (seen.size() == n) return tuples;
  }
  throw ConfigError("could not draw " + std::to_string(n) + " distinct attribute tuples");
}

domain::Rgb scaled(const domain::Rgb& c, double factor) {
  return {std::clamp(c[0] * factor, 0.0, 1.0), std::clamp(c[1] * factor, 0.0, 1.0),
          std::clamp(c[2] * factor, 0.0, 1.0)};
}

std::size_t palette_index(std::size_t slot, const std::string& word) {
  const auto& pal = domain::slot_palette(slot);
  for (std::size_t i = 0; i < pal.size(); ++i) {
    if (pal[i].word == word) return i;
  }
  throw LoadError("word '" + word + "' is not in the palette of attribute '" + default_attribute_names()[slot] +
                  "'");
}

}  // namespace

std::vector<std::string> AttributeTuple::words() const {
  std::vector<std::string> out;
  for (std::size_t s = 0; s < domain::kSlots; ++s) out.push_back(domain::slot_palette(s).at(values[s]).word);
  return out;
}

void SyntheticSpec::validate() const {
  if (identities < 2) throw ConfigError("synthetic dataset needs at least 2 identities");
  if (images_per_identity < 2) throw ConfigError("synthetic dataset needs at least 2 images per identity");
  if (cameras < 1) throw ConfigError("synthetic dataset needs at least 1 camera");
  if (query_per_identity < 1 || query_per_identity >= images_per_identity) {
    throw ConfigError("query_per_identity must be in [1, images_per_identity)");
  }
  domain::region_pixel_boxes(height, width);
}

nlohmann::json SyntheticSpec::to_json() const {
  return {{"identities", identities}, {"images_per_identity", images_per_identity},
          {"image_size", {height, width}}, {"cameras", cameras},
          {"query_per_identity", query_per_identity}, {"jitter", jitter},
          {"seed", seed}};
}

CameraJitter camera_jitter(const SyntheticSpec& spec, int camid, std::size_t image_index) {
  CameraJitter j;
  j.background = domain::background_rgb();
  if (!spec.jitter) return j;
  Rng cam(Rng::derive(spec.seed, 1000 + static_cast<std::uint64_t>(camid)));
  const double cam_brightness = 1.0 + cam.uniform(-0.08, 0.08);
  const double theta = cam.uniform(0.0, 2.0 * M_PI);
  const auto& basis = domain::opponent_basis();
  for (std::size_t c = 0; c < 3; ++c) {
    j.background[c] += 0.012 * (std::cos(theta) * basis[1][c] + std::sin(theta) * basis[2][c]);
  }
  Rng img(Rng::derive(spec.seed, 1000000 + image_index));
  j.brightness = cam_brightness * (1.0 + img.uniform(-0.02, 0.02));
  return j;
}

Image render_identity(const AttributeTuple& tuple, std::size_t height, std::size_t width,
                      const CameraJitter& jitter) {
  const auto boxes = domain::region_pixel_boxes(height, width);
  Image img(height, width);
  const auto bg = scaled(jitter.background, jitter.brightness);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = bg[c];
  for (std::size_t s = 0; s < domain::kSlots; ++s) {
    const auto& color = domain::slot_palette(s).at(tuple.values[s]);
    if (color.is_absence) continue;
    const auto rgb = scaled(color.rgb, jitter.brightness);
    const auto& b = boxes[s];
    for (std::size_t y = b.y0; y < b.y1; ++y)
      for (std::size_t x = b.x0; x < b.x1; ++x)
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
  }
  return img;
}

Dataset render_dataset(const SyntheticSpec& spec) {
  spec.validate();
  const auto tuples = draw_tuples(spec);
  Dataset ds;
  ds.attribute_names = default_attribute_names();
  const std::size_t n_train = spec.identities / 2;
  for (std::size_t i = 0; i < spec.identities; ++i) {
    const int pid = static_cast<int>(i) + 1;
    ds.attributes[pid] = tuples[i];
    for (std::size_t k = 0; k < spec.images_per_identity; ++k) {
      Sample s;
      s.pid = pid;
      s.camid = static_cast<int>(k % spec.cameras) + 1;
      const std::size_t index = i * spec.images_per_identity + k;
      s.image = quantize_8bit(render_identity(tuples[i], spec.height, spec.width, camera_jitter(spec, s.camid, index)));
      s.image_id = pid_key(pid) + "_c" + std::to_string(s.camid) + "_" + pad_number(static_cast<long>(index), 6);
      if (i < n_train) {
        ds.train.push_back(std::move(s));
      } else if (k < spec.query_per_identity) {
        ds.query.push_back(std::move(s));
      } else {
        ds.gallery.push_back(std::move(s));
      }
    }
  }
  return ds;
}

nlohmann::ordered_json attributes_manifest(const Dataset& dataset) {
  nlohmann::ordered_json vocab = nlohmann::ordered_json::object();
  for (std::size_t s = 0; s < domain::kSlots; ++s) vocab[dataset.attribute_names[s]] = domain::slot_palette_words(s);
  nlohmann::ordered_json ids = nlohmann::ordered_json::object();
  for (const auto& [pid, tuple] : dataset.attributes) {
    nlohmann::ordered_json entry = nlohmann::ordered_json::object();
    const auto words = tuple.words();
    for (std::size_t s = 0; s < domain::kSlots; ++s) entry[dataset.attribute_names[s]] = words[s];
    ids[pid_key(pid)] = entry;
  }
  return {{"attributes", dataset.attribute_names}, {"vocabulary", vocab}, {"identities", ids}};
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& root, const SyntheticSpec& spec) {
  namespace fs = std::filesystem;
  for (const auto& [dir, samples] :
       {std::pair{"train", &dataset.train}, std::pair{"query", &dataset.query}, std::pair{"gallery", &dataset.gallery}}) {
    const fs::path folder = root / dir;
    fs::create_directories(folder);
    for (const auto& s : *samples) write_png(s.image, folder / (s.image_id + ".png"));
  }
  nlohmann::ordered_json manifest = attributes_manifest(dataset);
  manifest["spec"] = spec.to_json();
  std::ofstream out(root / "attributes.json");
  if (!out) throw Error("cannot write '" + (root / "attributes.json").string() + "'");
  out << manifest.dump(2) << "\n";
}

Dataset generate_dataset(const SyntheticSpec& spec, const std::filesystem::path& root) {
  Dataset ds = render_dataset(spec);
  write_dataset(ds, root, spec);
  return ds;
}

ReidName parse_reid_filename(const std::string& filename) {
  static const std::regex pattern(R"(^(-?\d+)_c(\d+)(s\d+)?_[^/]*\.(png|jpg|jpeg|PNG|JPG|JPEG)$)");
  std::smatch m;
  if (!std::regex_match(filename, m, pattern)) {
    throw InputError("cannot parse re-id filename '" + filename + "' (expected PID_cCAM_SEQ.ext)");
  }
  return {std::stoi(m[1].str()), std::stoi(m[2].str())};
}

std::vector<Sample> load_reid_folder(const std::filesystem::path& path, std::size_t height, std::size_t width) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(path)) throw LoadError("'" + path.string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Sample> out;
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    if (name.empty() || name[0] == '.') continue;
    const ReidName labels = parse_reid_filename(name);
    Sample s;
    s.pid = labels.pid;
    s.camid = labels.camid;
    s.image_id = f.stem().string();
    s.image = resize_bilinear(read_image(f), height, width);
    out.push_back(std::move(s));
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& root, std::size_t height, std::size_t width) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw LoadError("dataset root '" + root.string() + "' is not a directory");
  Dataset ds;
  ds.attribute_names = default_attribute_names();
  if (fs::is_directory(root / "train")) ds.train = load_reid_folder(root / "train", height, width);
  if (fs::is_directory(root / "query")) ds.query = load_reid_folder(root / "query", height, width);
  if (fs::is_directory(root / "gallery")) ds.gallery = load_reid_folder(root / "gallery", height, width);
  const fs::path manifest_path = root / "attributes.json";
  if (fs::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
      ds.attribute_names = j.at("attributes").get<std::vector<std::string>>();
      if (ds.attribute_names.size() != domain::kSlots) throw LoadError("attributes.json must list 5 attributes");
      for (const auto& [key, entry] : j.at("identities").items()) {
        AttributeTuple t;
        for (std::size_t s = 0; s < domain::kSlots; ++s) {
          t.values[s] = palette_index(s, entry.at(ds.attribute_names[s]).get<std::string>());
        }
        ds.attributes[std::stoi(key)] = t;
      }
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("malformed '" + manifest_path.string() + "': " + e.what());
    }
  }
  return ds;
}

std::vector<FeatureVector> FeatureExtractor::extract(std::span<const Image> images) const {
  std::vector<FeatureVector> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += kExtractChunk) {
    const auto chunk = images.subspan(start, std::min(kExtractChunk, images.size() - start));
    for (const auto& im : chunk) validate_pixels(im);
    const ag::Var feats = forward(ag::Var::constant(images_to_tensor(chunk)));
    const std::size_t d = feats.shape()[1];
    const auto& data = feats.value().data;
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      out.push_back({std::vector<double>(data.begin() + static_cast<std::ptrdiff_t>(i * d),
                                         data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d))});
    }
  }
  return out;
}

HandcraftedExtractor::HandcraftedExtractor(std::size_t height, std::size_t width, std::uint64_t seed,
                                           std::size_t output_dim)
    : height_(height), width_(width), boxes_(domain::region_pixel_boxes(height, width)) {
  if (output_dim == 0) throw ConfigError("handcrafted extractor output_dim must be positive");
  const std::size_t in = boxes_.size() * 3;
  Rng rng(Rng::derive(seed, 11));
  ag::Tensor p({output_dim, in});
  for (auto& v : p.data) v = rng.normal() / std::sqrt(static_cast<double>(in));
  params_.add("projection", std::move(p));
  // Subtract each channel's mean over the regions, leaving relative colour.
  ag::Tensor c({in, in});
  const double share = 1.0 / static_cast<double>(boxes_.size());
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < in; ++j) c.data[i * in + j] = (i == j ? 1.0 : 0.0) - (i % 3 == j % 3 ? share : 0.0);
  centering_ = ag::Var::constant(std::move(c));
}

ag::Var HandcraftedExtractor::forward(const ag::Var& images) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != height_ || s[3] != width_) {
    throw ConfigError("handcrafted extractor expects " + std::to_string(height_) + "x" + std::to_string(width_) +
                      " images, got batch shape " + ag::shape_string(s));
  }
  return ag::linear(ag::linear(ag::box_means(images, boxes_), centering_, ag::Var()), params_.at("projection"),
                    ag::Var());
}

std::vector<Image> images_of(const std::vector<Sample>& samples) {
  std::vector<Image> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.image);
  return out;
}

std::vector<int> pids_of(const std::vector<Sample>& samples) {
  std::vector<int> out;
  for (const auto& s : samples) out.push_back(s.pid);
  return out;
}

std::vector<int> camids_of(const std::vector<Sample>& samples) {
  std::vector<int> out;
  for (const auto& s : samples) out.push_back(s.camid);
  return out;
}

}  // namespace apattack
