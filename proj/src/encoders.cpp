#include "apattack/encoders.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "apattack/checkpoint.hpp"
#include "apattack/digest.hpp"
#include "apattack/domain.hpp"
#include "apattack/errors.hpp"
#include "apattack/rng.hpp"

namespace apattack {

namespace {

nn::NamedArray to_named(std::string name, const ag::Tensor& t) {
  nn::NamedArray a;
  a.name = std::move(name);
  a.shape = t.shape;
  a.values.reserve(t.numel());
  for (double v : t.data) a.values.push_back(static_cast<float>(v));
  return a;
}

const nn::NamedArray& find_array(const nn::ArrayList& arrays, const std::string& name) {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw LoadError("checkpoint is missing array '" + name + "'");
}

ag::Tensor normal_tensor(Rng& rng, ag::Shape shape, double stddev) {
  ag::Tensor t(std::move(shape));
  for (auto& v : t.data) v = stddev * rng.normal();
  return t;
}

// Columns of a seeded random orthogonal n x n matrix.
Eigen::MatrixXd random_orthogonal(Rng& rng, std::size_t n) {
  Eigen::MatrixXd g(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  // Fix column signs so the factorisation is unique.
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (std::size_t j = 0; j < n; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  return q;
}

void check_positive(std::size_t v, const char* name) {
  if (v == 0) throw ConfigError(std::string("joint_space.") + name + " must be positive");
}

}  // namespace

std::string to_string(TextPooling pooling) { return pooling == TextPooling::kMean ? "mean" : "positional"; }

TextPooling parse_text_pooling(std::string_view text) {
  if (text == "mean") return TextPooling::kMean;
  if (text == "positional") return TextPooling::kPositional;
  throw ConfigError("unknown text pooling '" + std::string(text) + "' (expected mean or positional)");
}

void JointSpaceConfig::validate() const {
  check_positive(feature_dim, "feature_dim");
  check_positive(token_embedding_dim, "token_embedding_dim");
  check_positive(max_sequence_length, "max_sequence_length");
  check_positive(image_height, "image_size");
  check_positive(image_width, "image_size");
  check_positive(patch_rows, "patch_grid");
  check_positive(patch_cols, "patch_grid");
  check_positive(visual_hidden, "visual_hidden");
  if (image_height % patch_rows != 0 || image_width % patch_cols != 0) {
    throw ConfigError("image size " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                      " is not divisible by the patch grid " + std::to_string(patch_rows) + "x" +
                      std::to_string(patch_cols));
  }
}

nlohmann::json JointSpaceConfig::to_json() const {
  return {{"feature_dim", feature_dim},
          {"token_embedding_dim", token_embedding_dim},
          {"max_sequence_length", max_sequence_length},
          {"image_size", {image_height, image_width}},
          {"patch_grid", {patch_rows, patch_cols}},
          {"visual_hidden", visual_hidden},
          {"text_pooling", to_string(text_pooling)}};
}

JointSpaceConfig JointSpaceConfig::from_json(const nlohmann::json& j) {
  JointSpaceConfig c;
  try {
    c.feature_dim = j.at("feature_dim").get<std::size_t>();
    c.token_embedding_dim = j.at("token_embedding_dim").get<std::size_t>();
    c.max_sequence_length = j.at("max_sequence_length").get<std::size_t>();
    c.image_height = j.at("image_size").at(0).get<std::size_t>();
    c.image_width = j.at("image_size").at(1).get<std::size_t>();
    c.patch_rows = j.at("patch_grid").at(0).get<std::size_t>();
    c.patch_cols = j.at("patch_grid").at(1).get<std::size_t>();
    c.visual_hidden = j.at("visual_hidden").get<std::size_t>();
    c.text_pooling = parse_text_pooling(j.at("text_pooling").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("malformed joint-space description: ") + e.what());
  }
  c.validate();
  return c;
}

VisualEncoder::VisualEncoder(JointSpaceConfig config, const nn::ArrayList& arrays) : config_(config) {
  config_.validate();
  const std::size_t in = 3 * config_.patch_rows * config_.patch_cols;
  params_.add("fc1.weight", ag::Tensor({config_.visual_hidden, in}));
  params_.add("fc1.bias", ag::Tensor({config_.visual_hidden}));
  params_.add("fc2.weight", ag::Tensor({config_.feature_dim, config_.visual_hidden}));
  params_.add("fc2.bias", ag::Tensor({config_.feature_dim}));
  params_.load_arrays(arrays, "visual.");
}

ag::Var VisualEncoder::forward(const ag::Var& images) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != config_.image_height || s[3] != config_.image_width) {
    throw ConfigError("visual encoder expects images of " + std::to_string(config_.image_height) + "x" +
                      std::to_string(config_.image_width) + "x3, got batch shape " + ag::shape_string(s));
  }
  const std::size_t n = s[0];
  const ag::Var pooled = ag::avg_pool2d(images, config_.image_height / config_.patch_rows,
                                        config_.image_width / config_.patch_cols);
  const ag::Var flat = ag::reshape(pooled, {n, 3 * config_.patch_rows * config_.patch_cols});
  const ag::Var hidden = ag::tanh(ag::linear(flat, params_.at("fc1.weight"), params_.at("fc1.bias")));
  return ag::linear(hidden, params_.at("fc2.weight"), params_.at("fc2.bias"));
}

FeatureVector VisualEncoder::encode(const Image& image) const {
  return encode_batch(std::span<const Image>(&image, 1)).front();
}

std::vector<FeatureVector> VisualEncoder::encode_batch(std::span<const Image> images) const {
  std::vector<FeatureVector> out;
  if (images.empty()) return out;
  for (const auto& im : images) {
    if (im.height != config_.image_height || im.width != config_.image_width) {
      throw ConfigError("visual encoder expects " + std::to_string(config_.image_height) + "x" +
                        std::to_string(config_.image_width) + " images, got " + std::to_string(im.height) +
                        "x" + std::to_string(im.width));
    }
    validate_pixels(im);
  }
  const ag::Var feats = forward(ag::Var::constant(images_to_tensor(images)));
  const std::size_t d = config_.feature_dim;
  const auto& data = feats.value().data;
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.push_back({std::vector<double>(data.begin() + static_cast<std::ptrdiff_t>(i * d),
                                       data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d))});
  }
  return out;
}

TextEncoder::TextEncoder(JointSpaceConfig config, const nn::ArrayList& arrays) : config_(config) {
  config_.validate();
  const auto& table = find_array(arrays, "text.token_embedding");
  if (table.shape.size() != 2 || table.shape[1] != config_.token_embedding_dim || table.shape[0] == 0) {
    throw LoadError("array 'text.token_embedding' has shape " + ag::shape_string(table.shape) + ", expected [V, " +
                    std::to_string(config_.token_embedding_dim) + "]");
  }
  const std::size_t e = config_.token_embedding_dim, d = config_.feature_dim, lmax = config_.max_sequence_length;
  params_.add("token_embedding", ag::Tensor({table.shape[0], e}));
  params_.add("positional", ag::Tensor({lmax, e}));
  if (config_.text_pooling == TextPooling::kMean) {
    params_.add("projection", ag::Tensor({d, e}));
  } else {
    params_.add("projection", ag::Tensor({lmax, d, e}));
  }
  params_.add("bias", ag::Tensor({d}));
  params_.load_arrays(arrays, "text.");
}

ag::Var TextEncoder::forward(const ag::Var& sequences) const {
  const auto& s = sequences.shape();
  if (s.size() != 3 || s[2] != config_.token_embedding_dim) {
    throw InputError("text encoder expects [N, L, " + std::to_string(config_.token_embedding_dim) +
                     "] embeddings, got " + ag::shape_string(s));
  }
  if (s[1] == 0 || s[1] > config_.max_sequence_length) {
    throw InputError("token sequence length " + std::to_string(s[1]) + " outside [1, " +
                     std::to_string(config_.max_sequence_length) + "]");
  }
  const ag::Var with_pos = ag::add_sequence_rows(sequences, params_.at("positional"));
  if (config_.text_pooling == TextPooling::kMean) {
    return ag::linear(ag::mean_over_sequence(with_pos), params_.at("projection"), params_.at("bias"));
  }
  return ag::add_row_bias(ag::positional_project(with_pos, params_.at("projection")), params_.at("bias"));
}

FeatureVector TextEncoder::encode(const TokenEmbeddingSequence& sequence) const {
  const auto& rows = sequence.rows;
  if (rows.rank() != 2) throw InputError("token embedding sequence must be [L, E]");
  for (double v : rows.data) {
    if (!std::isfinite(v)) throw InputError("token embedding sequence holds a non-finite value");
  }
  ag::Tensor batch({1, rows.dim(0), rows.dim(1)}, rows.data);
  const ag::Var out = forward(ag::Var::constant(std::move(batch)));
  return {out.value().data};
}

nn::ArrayList JointSpace::arrays() const {
  nn::ArrayList out;
  for (auto& a : visual.weights().arrays) out.push_back({"visual." + a.name, a.shape, a.values});
  for (auto& a : text.weights().arrays) out.push_back({"text." + a.name, a.shape, a.values});
  return out;
}

std::string JointSpace::checksum() const {
  Sha256 h;
  h.update(visual.checksum());
  h.update(text.checksum());
  return h.hex();
}

JointSpace build_reference_encoders(std::uint64_t seed, const JointSpaceConfig& config,
                                    std::size_t vocabulary_size) {
  config.validate();
  if (vocabulary_size == 0) throw ConfigError("vocabulary size must be positive");
  const std::size_t in = 3 * config.patch_rows * config.patch_cols, h = config.visual_hidden;
  const std::size_t d = config.feature_dim, e = config.token_embedding_dim, lmax = config.max_sequence_length;
  Rng vrng(Rng::derive(seed, 1)), trng(Rng::derive(seed, 2));
  nn::ArrayList arrays;
  arrays.push_back(to_named("visual.fc1.weight", nn::uniform_fan_in(vrng, {h, in}, in)));
  arrays.push_back(to_named("visual.fc1.bias", nn::uniform_fan_in(vrng, {h}, in)));
  arrays.push_back(to_named("visual.fc2.weight", nn::uniform_fan_in(vrng, {d, h}, h)));
  arrays.push_back(to_named("visual.fc2.bias", nn::uniform_fan_in(vrng, {d}, h)));
  arrays.push_back(to_named("text.token_embedding",
                            normal_tensor(trng, {vocabulary_size, e}, 1.0 / std::sqrt(static_cast<double>(e)))));
  arrays.push_back(
      to_named("text.positional", normal_tensor(trng, {lmax, e}, 0.1 / std::sqrt(static_cast<double>(e)))));
  if (config.text_pooling == TextPooling::kMean) {
    arrays.push_back(to_named("text.projection", nn::uniform_fan_in(trng, {d, e}, e)));
  } else {
    arrays.push_back(to_named("text.projection", nn::uniform_fan_in(trng, {lmax, d, e}, e * lmax)));
  }
  arrays.push_back(to_named("text.bias", nn::uniform_fan_in(trng, {d}, e)));
  return {VisualEncoder(config, arrays), TextEncoder(config, arrays)};
}

JointSpace build_aligned_reference_encoders(std::uint64_t seed, const JointSpaceConfig& config,
                                            const Vocabulary& vocab, const TokenizedPrompt& prompt) {
  using domain::kSlots;
  config.validate();
  if (config.text_pooling != TextPooling::kPositional) {
    throw ConfigError("the aligned reference space requires text_pooling: positional");
  }
  if (config.patch_rows != domain::kGridRows || config.patch_cols != domain::kGridCols) {
    throw ConfigError("the aligned reference space requires the " + std::to_string(domain::kGridRows) + "x" +
                      std::to_string(domain::kGridCols) + " patch grid of the synthetic layout");
  }
  const std::size_t d = config.feature_dim, e = config.token_embedding_dim, lmax = config.max_sequence_length;
  const std::size_t h = config.visual_hidden, cells = config.patch_rows * config.patch_cols, in = 3 * cells;
  const std::size_t slot_dims = 3 * kSlots;
  if (d <= slot_dims || h < slot_dims || e < 4) {
    throw ConfigError("the aligned reference space needs feature_dim > " + std::to_string(slot_dims) +
                      ", visual_hidden >= " + std::to_string(slot_dims) + " and token_embedding_dim >= 4");
  }
  if (prompt.placeholder_positions.size() != kSlots) {
    throw ConfigError("the aligned reference space expects a " + std::to_string(kSlots) + "-slot template");
  }
  if (prompt.length() > lmax) throw ConfigError("tokenized template is longer than max_sequence_length");

  Rng rng(Rng::derive(seed, 3));
  const Eigen::MatrixXd feat_basis = random_orthogonal(rng, d);   // slot blocks then context
  const Eigen::MatrixXd token_basis = random_orthogonal(rng, e);  // color plane then the rest
  const Eigen::MatrixXd color_plane = token_basis.leftCols(3);
  const std::size_t ctx = d - slot_dims;
  const Eigen::MatrixXd context = feat_basis.rightCols(static_cast<Eigen::Index>(ctx));

  // Token table: palette words sit in the color plane at their signature.
  ag::Tensor table({vocab.size(), e});
  for (std::size_t id = 0; id < vocab.size(); ++id) {
    for (std::size_t k = 0; k < e; ++k) table.data[id * e + k] = rng.normal() / std::sqrt(static_cast<double>(e));
  }
  for (std::size_t s = 0; s < kSlots; ++s) {
    for (const auto& cw : domain::slot_palette(s)) {
      const int id = vocab.id(cw.word);
      const auto sig = domain::color_signature(cw.rgb);
      const Eigen::Vector3d sv(sig[0], sig[1], sig[2]);
      const Eigen::VectorXd row = color_plane * sv;
      for (std::size_t k = 0; k < e; ++k) table.data[vocab.row(id) * e + k] = row(static_cast<Eigen::Index>(k));
    }
  }
  const ag::Tensor positional = normal_tensor(rng, {lmax, e}, 0.1 / std::sqrt(static_cast<double>(e)));

  // Slot positions read the color plane into their own block; every other
  // position adds a fixed context from the free feature directions.
  ag::Tensor projection({lmax, d, e});
  std::vector<int> slot_at(lmax, -1);
  for (std::size_t s = 0; s < kSlots; ++s) slot_at[prompt.placeholder_positions[s]] = static_cast<int>(s);
  for (std::size_t k = 0; k < lmax; ++k) {
    Eigen::MatrixXd a;
    if (slot_at[k] >= 0) {
      a = feat_basis.middleCols(3 * slot_at[k], 3) * color_plane.transpose();
    } else {
      Eigen::MatrixXd r(ctx, e);
      for (std::size_t i = 0; i < ctx; ++i)
        for (std::size_t j = 0; j < e; ++j) r(i, j) = 0.05 * rng.normal();
      a = context * r;
    }
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < e; ++j) projection.data[(k * d + i) * e + j] = a(i, j);
  }

  // Text output for the template with the true words in place, minus the
  // slot-word part: the visual bias reproduces it.
  nn::ArrayList arrays;
  arrays.push_back(to_named("text.token_embedding", table));
  arrays.push_back(to_named("text.positional", positional));
  arrays.push_back(to_named("text.projection", projection));
  arrays.push_back(to_named("text.bias", ag::Tensor({d})));
  // Use the float-rounded weights for the constant so v and t agree exactly.
  TextEncoder probe(config, arrays);
  ag::Tensor rows = embed_tokens(prompt, probe.token_embedding()).rows;
  for (auto p : prompt.placeholder_positions)
    for (std::size_t k = 0; k < e; ++k) rows.data[p * e + k] = 0.0;
  const FeatureVector text_constant = probe.encode({rows});

  const auto& basis = domain::opponent_basis();
  const std::array<double, 3> gains{domain::kLuminanceGain, domain::kChromaGain, domain::kChromaGain};
  const auto boxes = domain::region_grid_boxes();
  ag::Tensor fc1_w({h, in}), fc1_b({h});
  for (std::size_t s = 0; s < kSlots; ++s) {
    const auto& b = boxes[s];
    const double count = static_cast<double>((b.row1 - b.row0) * (b.col1 - b.col0));
    for (std::size_t j = 0; j < 3; ++j) {
      const std::size_t u = 3 * s + j;
      double offset = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        offset += basis[j][c] * domain::kBodyGray;
        for (std::size_t r = b.row0; r < b.row1; ++r)
          for (std::size_t col = b.col0; col < b.col1; ++col)
            fc1_w.data[u * in + c * cells + r * config.patch_cols + col] = gains[j] * basis[j][c] / count;
      }
      fc1_b.data[u] = -gains[j] * offset;
    }
  }
  // Remaining hidden units: generic image statistics feeding weakly into the
  // context directions.
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (std::size_t u = slot_dims; u < h; ++u) {
    for (std::size_t i = 0; i < in; ++i) fc1_w.data[u * in + i] = rng.uniform(-bound, bound);
    fc1_b.data[u] = rng.uniform(-0.1, 0.1);
  }
  ag::Tensor fc2_w({d, h});
  for (std::size_t u = 0; u < h; ++u) {
    Eigen::VectorXd col;
    if (u < slot_dims) {
      col = feat_basis.col(static_cast<Eigen::Index>(u));
    } else {
      Eigen::VectorXd r(ctx);
      for (std::size_t i = 0; i < ctx; ++i) r(static_cast<Eigen::Index>(i)) = 0.01 * rng.normal();
      col = context * r;
    }
    for (std::size_t i = 0; i < d; ++i) fc2_w.data[i * h + u] = col(static_cast<Eigen::Index>(i));
  }
  arrays.push_back(to_named("visual.fc1.weight", fc1_w));
  arrays.push_back(to_named("visual.fc1.bias", fc1_b));
  arrays.push_back(to_named("visual.fc2.weight", fc2_w));
  arrays.push_back(to_named("visual.fc2.bias", ag::Tensor({d}, text_constant.values)));
  return {VisualEncoder(config, arrays), TextEncoder(config, arrays)};
}

void save_encoders(const std::filesystem::path& path, const JointSpace& space, const std::string& config_digest) {
  Checkpoint ck;
  ck.kind = "encoders";
  ck.config_digest = config_digest;
  ck.metadata = {{"joint_space", space.visual.config().to_json()}};
  ck.arrays = space.arrays();
  save_checkpoint(path, ck);
}

JointSpace load_encoder_adapter(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "encoders") {
    throw LoadError("'" + path.string() + "' holds a '" + ck.kind + "' checkpoint, expected 'encoders'");
  }
  if (!ck.metadata.contains("joint_space")) throw LoadError("encoder checkpoint lacks its joint_space metadata");
  const JointSpaceConfig config = JointSpaceConfig::from_json(ck.metadata["joint_space"]);
  for (const auto& a : ck.arrays) {
    if (a.name.rfind("visual.", 0) != 0 && a.name.rfind("text.", 0) != 0) {
      throw LoadError("unexpected array '" + a.name + "' in encoder checkpoint");
    }
  }
  return {VisualEncoder(config, ck.arrays), TextEncoder(config, ck.arrays)};
}

}  // namespace apattack
