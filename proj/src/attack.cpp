#include "apattack/attack.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "apattack/checkpoint.hpp"
#include "apattack/errors.hpp"

namespace apattack {

namespace {

void check_triplet_inputs(const ag::Var& clean, const ag::Var& adv, std::span<const int> pids, double alpha) {
  if (clean.value().rank() != 2 || clean.shape() != adv.shape()) {
    throw InputError("triplet loss needs equal [N,D] clean and adversarial batches, got " +
                     ag::shape_string(clean.shape()) + " and " + ag::shape_string(adv.shape()));
  }
  if (pids.size() != clean.shape()[0]) throw InputError("pid count does not match the batch size");
  if (!(alpha >= 0.0)) throw InputError("triplet margin must be non-negative");
}

std::vector<ag::Var> pseudo_to_slot_batches(std::span<const PseudoTokenSet> sets) {
  if (sets.empty()) throw InputError("empty pseudo-token batch");
  const std::size_t slots = sets.front().slot_count();
  std::vector<ag::Var> out;
  for (std::size_t s = 0; s < slots; ++s) {
    std::vector<std::vector<double>> rows;
    for (const auto& p : sets) {
      if (p.slot_count() != slots) throw InputError("pseudo-token sets disagree in slot count");
      rows.push_back(p.tokens[s]);
    }
    out.push_back(ag::Var::constant(rows_to_tensor(rows)));
  }
  return out;
}

std::vector<std::vector<double>> feature_rows(std::span<const FeatureVector> f) {
  std::vector<std::vector<double>> rows;
  for (const auto& v : f) rows.push_back(v.values);
  return rows;
}

ag::Tensor gather(const ag::Tensor& t, const std::vector<std::size_t>& rows) {
  const std::size_t d = t.numel() / t.dim(0);
  ag::Shape shape = t.shape;
  shape[0] = rows.size();
  ag::Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * d),
              t.data.begin() + static_cast<std::ptrdiff_t>((rows[i] + 1) * d),
              out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

}  // namespace

std::string to_string(GeneratorVariant v) { return v == GeneratorVariant::kReference ? "reference" : "tiny"; }

GeneratorVariant parse_generator_variant(std::string_view text) {
  if (text == "reference") return GeneratorVariant::kReference;
  if (text == "tiny") return GeneratorVariant::kTiny;
  throw ConfigError("unknown generator variant '" + std::string(text) + "' (expected reference or tiny)");
}

void PerturbationGenerator::declare() {
  if (variant_ == GeneratorVariant::kReference) {
    stem_ = {"stem", 3, 8, 1};
    down_ = {{"down1", 8, 16, 2}, {"down2", 16, 32, 2}, {"down3", 32, 32, 2}};
    for (int i = 1; i <= 4; ++i) {
      res_.push_back({"res" + std::to_string(i) + ".a", 32, 32, 1});
      res_.push_back({"res" + std::to_string(i) + ".b", 32, 32, 1});
    }
    up_ = {{"up1", 32, 32, 1}, {"up2", 32, 16, 1}, {"up3", 16, 8, 1}};
    head_ = {"head", 8, 3, 1};
  } else {
    stem_ = {"stem", 3, 4, 1};
    down_ = {{"down1", 4, 8, 2}};
    up_ = {{"up1", 8, 4, 1}};
    head_ = {"head", 4, 3, 1};
  }
  auto add = [this](const Conv& c) {
    params_.add(c.name + ".weight", ag::Tensor({c.out, c.in, 3, 3}));
    params_.add(c.name + ".bias", ag::Tensor({c.out}));
  };
  add(stem_);
  for (const auto& c : down_) add(c);
  for (const auto& c : res_) add(c);
  for (const auto& c : up_) add(c);
  add(head_);
}

PerturbationGenerator::PerturbationGenerator(GeneratorVariant variant, std::uint64_t seed) : variant_(variant) {
  declare();
  Rng rng(Rng::derive(seed, 41));
  nn::ArrayList init;
  for (const auto& p : params_.items()) {
    const auto& s = p.var.shape();
    // Bias shares the fan-in of its convolution, which precedes it.
    const std::size_t fan_in = s.size() == 4 ? s[1] * 9 : init.back().shape[1] * 9;
    const ag::Tensor t = nn::uniform_fan_in(rng, s, fan_in);
    // He-uniform weights keep activations image-dependent through the deep variant.
    const double gain = s.size() == 4 ? std::sqrt(6.0) : 1.0;
    nn::NamedArray a{p.name, s, {}};
    for (double v : t.data) a.values.push_back(static_cast<float>(gain * v));
    init.push_back(std::move(a));
  }
  params_.load_arrays(init);
}

PerturbationGenerator::PerturbationGenerator(GeneratorVariant variant, const nn::ArrayList& arrays)
    : variant_(variant) {
  declare();
  params_.load_arrays(arrays);
}

std::size_t PerturbationGenerator::size_multiple() const { return std::size_t{1} << down_.size(); }

ag::Var PerturbationGenerator::conv(const ag::Var& x, const Conv& c) const {
  return ag::conv2d(x, params_.at(c.name + ".weight"), params_.at(c.name + ".bias"), c.stride, 1);
}

ag::Var PerturbationGenerator::forward(const ag::Var& images) const {
  const auto& s = images.shape();
  const std::size_t m = size_multiple();
  if (s.size() != 4 || s[1] != 3 || s[2] % m != 0 || s[3] % m != 0 || s[2] == 0 || s[3] == 0) {
    throw InputError("generator expects [N,3,H,W] with H and W multiples of " + std::to_string(m) + ", got " +
                     ag::shape_string(s));
  }
  ag::Var h = ag::silu(conv(ag::add_scalar(ag::scale(images, 2.0), -1.0), stem_));
  for (const auto& c : down_) h = ag::silu(conv(h, c));
  for (std::size_t i = 0; i + 1 < res_.size(); i += 2) h = ag::add(h, conv(ag::silu(conv(h, res_[i])), res_[i + 1]));
  for (const auto& c : up_) h = ag::silu(conv(ag::upsample_nearest2x(h), c));
  return ag::tanh(conv(h, head_));
}

void save_generator(const std::filesystem::path& path, const PerturbationGenerator& g,
                    const std::string& config_digest) {
  Checkpoint ck;
  ck.kind = "generator";
  ck.config_digest = config_digest;
  ck.metadata = {{"variant", to_string(g.variant())}};
  ck.arrays = g.parameters().to_arrays();
  save_checkpoint(path, ck);
}

PerturbationGenerator load_generator(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "generator") {
    throw LoadError("'" + path.string() + "' holds a '" + ck.kind + "' checkpoint, expected 'generator'");
  }
  if (!ck.metadata.contains("variant")) throw LoadError("generator checkpoint lacks its variant metadata");
  return PerturbationGenerator(parse_generator_variant(ck.metadata["variant"].get<std::string>()), ck.arrays);
}

ag::Var apply_perturbation(const PerturbationGenerator& g, const ag::Var& images, double epsilon) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("epsilon must lie in (0, 1)");
  return ag::clamp(ag::add(images, ag::scale(g.forward(images), epsilon)), 0.0, 1.0);
}

std::vector<Image> apply_perturbation(const PerturbationGenerator& g, std::span<const Image> images, double epsilon) {
  constexpr std::size_t kChunk = 1;
  std::vector<Image> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const auto chunk = images.subspan(start, std::min(kChunk, images.size() - start));
    for (const auto& im : chunk) validate_pixels(im);
    const ag::Var adv = apply_perturbation(g, ag::Var::constant(images_to_tensor(chunk)), epsilon);
    for (auto& im : tensor_to_images(adv.value())) out.push_back(std::move(im));
  }
  return out;
}

Image apply_perturbation(const PerturbationGenerator& g, const Image& image, double epsilon) {
  return apply_perturbation(g, std::span<const Image>(&image, 1), epsilon).front();
}

std::string to_string(NegativeMetric m) { return m == NegativeMetric::kL2 ? "l2" : "cosine"; }

NegativeMetric parse_negative_metric(std::string_view text) {
  if (text == "l2") return NegativeMetric::kL2;
  if (text == "cosine") return NegativeMetric::kCosine;
  throw ConfigError("unknown negative metric '" + std::string(text) + "' (expected l2 or cosine)");
}

std::vector<std::size_t> hardest_negative(const ag::Tensor& anchors, std::span<const int> pids,
                                          NegativeMetric metric) {
  if (anchors.rank() != 2) throw InputError("hardest_negative expects an [N,D] batch");
  const std::size_t n = anchors.dim(0), d = anchors.dim(1);
  if (pids.size() != n) throw InputError("pid count does not match the batch size");
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) norms[i] += anchors.data[i * d + k] * anchors.data[i * d + k];
    norms[i] = std::sqrt(norms[i]);
  }
  std::vector<std::size_t> out(n);
  for (std::size_t a = 0; a < n; ++a) {
    bool found = false;
    double best = 0.0;
    for (std::size_t m = 0; m < n; ++m) {
      if (pids[m] == pids[a]) continue;
      double score = 0.0;
      if (metric == NegativeMetric::kL2) {
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = anchors.data[a * d + k] - anchors.data[m * d + k];
          score += diff * diff;
        }
      } else {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += anchors.data[a * d + k] * anchors.data[m * d + k];
        if (norms[a] == 0.0 || norms[m] == 0.0) throw NormalizationError("cosine negative selection on a zero vector");
        score = -dot / (norms[a] * norms[m]);
      }
      if (!found || score > best) {
        best = score;
        out[a] = m;
        found = true;
      }
    }
    if (!found) {
      throw BatchCompositionError("sample " + std::to_string(a) + " (pid " + std::to_string(pids[a]) +
                                  ") has no different-identity negative in the batch");
    }
  }
  return out;
}

std::vector<std::size_t> hardest_negative(std::span<const std::vector<double>> anchors, std::span<const int> pids,
                                          NegativeMetric metric) {
  return hardest_negative(rows_to_tensor(anchors), pids, metric);
}

ag::Var triplet_attack_term(const ag::Var& clean, const ag::Var& adv, std::span<const int> pids, double alpha,
                            NegativeMetric metric) {
  check_triplet_inputs(clean, adv, pids, alpha);
  const auto neg_index = hardest_negative(clean.value(), pids, metric);
  const ag::Var neg = ag::Var::constant(gather(clean.value(), neg_index));
  const ag::Var to_neg = ag::row_norms(ag::sub(adv, neg));
  const ag::Var to_clean = ag::row_norms(ag::sub(adv, clean));
  return ag::mean(ag::relu(ag::add_scalar(ag::sub(to_neg, to_clean), alpha)));
}

ag::Var semantic_attack_loss(std::span<const ag::Var> clean_tokens, std::span<const ag::Var> adv_tokens,
                             std::span<const int> pids, double alpha, NegativeMetric metric) {
  if (clean_tokens.empty() || clean_tokens.size() != adv_tokens.size()) {
    throw InputError("semantic attack loss needs matching, non-empty clean and adversarial slot lists");
  }
  ag::Var total;
  for (std::size_t i = 0; i < clean_tokens.size(); ++i) {
    const ag::Var term = triplet_attack_term(clean_tokens[i], adv_tokens[i], pids, alpha, metric);
    total = total.defined() ? ag::add(total, term) : term;
  }
  return total;
}

double semantic_attack_loss(std::span<const PseudoTokenSet> clean, std::span<const PseudoTokenSet> adv,
                            std::span<const int> pids, double alpha, NegativeMetric metric) {
  if (clean.size() != adv.size()) throw InputError("clean and adversarial batches differ in size");
  const auto c = pseudo_to_slot_batches(clean);
  const auto a = pseudo_to_slot_batches(adv);
  return semantic_attack_loss(c, a, pids, alpha, metric).item();
}

ag::Var surrogate_attack_loss(const ag::Var& clean_feats, const ag::Var& adv_feats, std::span<const int> pids,
                              double alpha, NegativeMetric metric) {
  return triplet_attack_term(clean_feats, adv_feats, pids, alpha, metric);
}

double surrogate_attack_loss(std::span<const FeatureVector> clean, std::span<const FeatureVector> adv,
                             std::span<const int> pids, double alpha, NegativeMetric metric) {
  const auto c = feature_rows(clean), a = feature_rows(adv);
  return surrogate_attack_loss(ag::Var::constant(rows_to_tensor(c)), ag::Var::constant(rows_to_tensor(a)), pids,
                               alpha, metric)
      .item();
}

ag::Var total_loss(const ag::Var& surrogate_term, const ag::Var& semantic_term, double surrogate_weight,
                   double semantic_weight) {
  const ag::Var m = surrogate_weight == 1.0 ? surrogate_term : ag::scale(surrogate_term, surrogate_weight);
  const ag::Var s = semantic_weight == 1.0 ? semantic_term : ag::scale(semantic_term, semantic_weight);
  return ag::add(m, s);
}

double total_loss(double surrogate_term, double semantic_term, double surrogate_weight, double semantic_weight) {
  if (!std::isfinite(surrogate_term) || !std::isfinite(semantic_term)) throw InputError("non-finite loss term");
  return surrogate_weight * surrogate_term + semantic_weight * semantic_term;
}

void AttackConfig::validate() const {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("stage2.epsilon must lie in (0, 1)");
  if (!(alpha >= 0.0)) throw ConfigError("stage2.alpha must be non-negative");
  if (!(learning_rate >= 0.0)) throw ConfigError("stage2.lr must be non-negative");
  if (identities_per_batch < 2) throw ConfigError("stage2.P must be at least 2 so negatives exist");
  if (instances_per_identity < 1) throw ConfigError("stage2.K must be positive");
}

AttackTrainResult train_attack(std::span<const Sample> samples, const JointSpace& space,
                               const InversionNetworks& nets, const FeatureExtractor& surrogate,
                               PerturbationGenerator& g, const AttackConfig& config) {
  config.validate();
  if (!nets.frozen()) throw ConfigError("inversion networks must be frozen before stage 2");
  if (samples.size() < 2) throw BatchCompositionError("stage 2 needs at least 2 training images");
  std::vector<Image> images;
  std::vector<int> pids;
  for (const auto& s : samples) {
    images.push_back(s.image);
    pids.push_back(s.pid);
  }
  // Clean-side quantities do not depend on G.
  const ag::Tensor all_images = images_to_tensor(images);
  const ag::Tensor clean_m = features_to_tensor(surrogate.extract(images));
  const auto clean_v = space.visual.encode_batch(images);
  const auto clean_slots = nets.forward(ag::Var::constant(features_to_tensor(clean_v)));

  g.set_trainable(true);
  nn::Adam adam(g.parameters().vars(), {config.learning_rate});
  Rng rng(Rng::derive(config.seed, 51));
  AttackTrainResult result;

  auto batches = identity_batches(pids, config.identities_per_batch, config.instances_per_identity, rng, 2);
  if (batches.empty()) {
    g.set_trainable(false);
    throw BatchCompositionError("stage 2 sampler produced no batch with two identities");
  }
  for (std::size_t epoch = 0; epoch <= config.epochs; ++epoch) {
    if (epoch > 1) batches = identity_batches(pids, config.identities_per_batch, config.instances_per_identity, rng, 2);
    AttackEpochLog entry;
    entry.epoch = epoch;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& idx = batches[b];
      std::vector<int> bp;
      for (auto i : idx) bp.push_back(pids[i]);
      const ag::Var x = ag::Var::constant(gather(all_images, idx));
      const ag::Var x_adv = apply_perturbation(g, x, config.epsilon);
      const ag::Var m = ag::Var::constant(gather(clean_m, idx));
      const ag::Var m_adv = surrogate.forward(x_adv);
      std::vector<ag::Var> s_clean;
      for (const auto& s : clean_slots) s_clean.push_back(ag::Var::constant(gather(s.value(), idx)));
      const auto s_adv = nets.forward(space.visual.forward(x_adv));
      const ag::Var l_m = surrogate_attack_loss(m, m_adv, bp, config.alpha, config.metric);
      const ag::Var l_s = semantic_attack_loss(s_clean, s_adv, bp, config.alpha, config.metric);
      const ag::Var loss = total_loss(l_m, l_s, config.surrogate_weight, config.semantic_weight);
      if (!std::isfinite(loss.item())) {
        g.set_trainable(false);
        std::ostringstream os;
        os << "stage 2: non-finite loss at epoch " << epoch << " batch " << b << ": L_M=" << l_m.item()
           << " L_S=" << l_s.item() << " total=" << loss.item();
        throw TrainingError(os.str());
      }
      if (epoch > 0) {
        adam.zero_grad();
        ag::backward(loss);
        adam.step();
        ++result.steps;
      }
      entry.surrogate += l_m.item();
      entry.semantic += l_s.item();
      entry.total += loss.item();
    }
    const double nb = static_cast<double>(batches.size());
    entry.surrogate /= nb;
    entry.semantic /= nb;
    entry.total /= nb;
    result.log.push_back(entry);
  }
  g.set_trainable(false);
  return result;
}

void write_attack_log(const std::filesystem::path& path, const std::vector<AttackEpochLog>& log) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  for (const auto& e : log) {
    nlohmann::ordered_json j = {{"epoch", e.epoch}, {"L_M", e.surrogate}, {"L_S", e.semantic}, {"total", e.total}};
    out << j.dump() << "\n";
  }
}

}  // namespace apattack
