#pragma once

// Procedural attribute-labelled pedestrian dataset, the handcrafted
// region-color extractor, and ingestion of PID_cCAM_SEQ re-id folders.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "apattack/domain.hpp"
#include "apattack/extractor.hpp"
#include "apattack/image.hpp"
#include "apattack/nn.hpp"

namespace apattack {

// Palette index per slot (see domain::slot_palette).
struct AttributeTuple {
  std::array<std::size_t, domain::kSlots> values{};

  std::vector<std::string> words() const;
  bool operator==(const AttributeTuple&) const = default;
  auto operator<=>(const AttributeTuple&) const = default;
};

struct SyntheticSpec {
  std::size_t identities = 16;
  std::size_t images_per_identity = 8;
  std::size_t height = 128;
  std::size_t width = 64;
  std::size_t cameras = 4;
  std::size_t query_per_identity = 2;
  bool jitter = true;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

struct Sample {
  Image image;
  int pid = 0;
  int camid = 0;
  std::string image_id;  // file stem, e.g. 0001_c1_000003
};

struct Dataset {
  std::vector<Sample> train, query, gallery;
  std::vector<std::string> attribute_names;
  std::map<int, AttributeTuple> attributes;  // pid -> tuple, empty for external folders
};

// camid is 1-based.
struct CameraJitter {
  double brightness = 1.0;
  domain::Rgb background{};
};
CameraJitter camera_jitter(const SyntheticSpec& spec, int camid, std::size_t image_index);

Image render_identity(const AttributeTuple& tuple, std::size_t height, std::size_t width, const CameraJitter& jitter);

// Identities 1..n/2 form the training split; each remaining identity gives
// its first query_per_identity images to the query split and the rest to the
// gallery. Pixels are quantised to 8 bits so the in-memory dataset equals
// what a reload from disk yields.
Dataset render_dataset(const SyntheticSpec& spec);
// Writes root/{train,query,gallery}/PID_cCAM_SEQ.png and root/attributes.json.
void write_dataset(const Dataset& dataset, const std::filesystem::path& root, const SyntheticSpec& spec);
Dataset generate_dataset(const SyntheticSpec& spec, const std::filesystem::path& root);

struct ReidName {
  int pid = 0;
  int camid = 0;
};
// "0001_c1_000001.png" -> {1, 1}; throws InputError naming the file.
ReidName parse_reid_filename(const std::string& filename);

// All .png/.jpg files of one folder in name order, resized to height x width.
std::vector<Sample> load_reid_folder(const std::filesystem::path& path, std::size_t height, std::size_t width);
// train/query/gallery subfolders (missing ones are empty) plus attributes.json
// when present.
Dataset load_dataset(const std::filesystem::path& root, std::size_t height, std::size_t width);

// Attribute names, per-attribute word lists and pid -> words, in order.
nlohmann::ordered_json attributes_manifest(const Dataset& dataset);

// Mean color of each of the five body regions (15 values), each channel
// centred on its mean over the regions, through a seeded fixed Gaussian
// projection. Global brightness changes only rescale the feature.
class HandcraftedExtractor : public FeatureExtractor {
 public:
  HandcraftedExtractor(std::size_t height, std::size_t width, std::uint64_t seed = 0, std::size_t output_dim = 32);

  std::string name() const override { return "handcrafted"; }
  ag::Var forward(const ag::Var& images) const override;
  std::string checksum() const override { return params_.checksum(); }

  const ag::Tensor& projection() const { return params_.at("projection").value(); }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }

 private:
  std::size_t height_, width_;
  std::vector<ag::PixelBox> boxes_;
  ag::Var centering_;
  nn::ParameterList params_;
};

std::vector<Image> images_of(const std::vector<Sample>& samples);
std::vector<int> pids_of(const std::vector<Sample>& samples);
std::vector<int> camids_of(const std::vector<Sample>& samples);

}  // namespace apattack
