#include "apattack/inversion.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "apattack/checkpoint.hpp"
#include "apattack/errors.hpp"

namespace apattack {

namespace {

std::string layer(std::size_t slot, int k, const char* what) {
  return "slot" + std::to_string(slot + 1) + ".fc" + std::to_string(k) + "." + what;
}

std::string describe(const InversionLossTerms& t) {
  std::ostringstream os;
  os << "L_i2t=" << t.image_to_text.item() << " L_t2i=" << t.text_to_image.item() << " total=" << t.total.item();
  return os.str();
}

}  // namespace

InversionShape InversionShape::for_space(const JointSpaceConfig& config, std::size_t slots) {
  return {slots, config.feature_dim, config.token_embedding_dim, 2 * config.token_embedding_dim};
}

nlohmann::json InversionShape::to_json() const {
  return {{"slots", slots}, {"feature_dim", feature_dim}, {"token_dim", token_dim}, {"hidden", hidden}};
}

InversionShape InversionShape::from_json(const nlohmann::json& j) {
  try {
    return {j.at("slots").get<std::size_t>(), j.at("feature_dim").get<std::size_t>(),
            j.at("token_dim").get<std::size_t>(), j.at("hidden").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("malformed inversion-network description: ") + e.what());
  }
}

void InversionNetworks::declare() {
  if (shape_.slots == 0 || shape_.feature_dim == 0 || shape_.token_dim == 0 || shape_.hidden == 0) {
    throw ConfigError("inversion network sizes must be positive");
  }
  for (std::size_t s = 0; s < shape_.slots; ++s) {
    params_.add(layer(s, 1, "weight"), ag::Tensor({shape_.hidden, shape_.feature_dim}));
    params_.add(layer(s, 1, "bias"), ag::Tensor({shape_.hidden}));
    params_.add(layer(s, 2, "weight"), ag::Tensor({shape_.hidden, shape_.hidden}));
    params_.add(layer(s, 2, "bias"), ag::Tensor({shape_.hidden}));
    params_.add(layer(s, 3, "weight"), ag::Tensor({shape_.token_dim, shape_.hidden}));
    params_.add(layer(s, 3, "bias"), ag::Tensor({shape_.token_dim}));
  }
}

InversionNetworks::InversionNetworks(InversionShape shape, std::uint64_t seed, bool zero_final_layer)
    : shape_(shape) {
  declare();
  Rng rng(Rng::derive(seed, 31));
  nn::ArrayList init;
  for (const auto& p : params_.items()) {
    const auto& s = p.var.shape();
    const std::size_t fan_in = s.size() == 2 ? s[1] : (p.name.find(".fc1.") != std::string::npos ? shape_.feature_dim
                                                                                                 : shape_.hidden);
    ag::Tensor t = nn::uniform_fan_in(rng, s, fan_in);
    if (zero_final_layer && p.name.find(".fc3.") != std::string::npos) t = ag::Tensor(s);
    nn::NamedArray a{p.name, s, {}};
    for (double v : t.data) a.values.push_back(static_cast<float>(v));
    init.push_back(std::move(a));
  }
  params_.load_arrays(init);
}

InversionNetworks::InversionNetworks(InversionShape shape, const nn::ArrayList& arrays) : shape_(shape) {
  declare();
  params_.load_arrays(arrays);
}

std::vector<ag::Var> InversionNetworks::forward(const ag::Var& feats) const {
  if (feats.value().rank() != 2 || feats.shape()[1] != shape_.feature_dim) {
    throw InputError("inversion networks expect [N, " + std::to_string(shape_.feature_dim) + "] features, got " +
                     ag::shape_string(feats.shape()));
  }
  std::vector<ag::Var> out;
  out.reserve(shape_.slots);
  for (std::size_t s = 0; s < shape_.slots; ++s) {
    auto h = ag::silu(ag::linear(feats, params_.at(layer(s, 1, "weight")), params_.at(layer(s, 1, "bias"))));
    h = ag::silu(ag::linear(h, params_.at(layer(s, 2, "weight")), params_.at(layer(s, 2, "bias"))));
    out.push_back(ag::linear(h, params_.at(layer(s, 3, "weight")), params_.at(layer(s, 3, "bias"))));
  }
  return out;
}

std::vector<PseudoTokenSet> InversionNetworks::invert_batch(std::span<const FeatureVector> feats) const {
  std::vector<PseudoTokenSet> out(feats.size());
  if (feats.empty()) return out;
  for (const auto& f : feats) {
    if (f.size() != shape_.feature_dim) {
      throw InputError("feature vector has dimension " + std::to_string(f.size()) + ", expected " +
                       std::to_string(shape_.feature_dim));
    }
  }
  const auto slots = forward(ag::Var::constant(features_to_tensor(feats)));
  const std::size_t e = shape_.token_dim;
  for (std::size_t n = 0; n < feats.size(); ++n) {
    for (const auto& s : slots) {
      const auto& d = s.value().data;
      out[n].tokens.emplace_back(d.begin() + static_cast<std::ptrdiff_t>(n * e),
                                 d.begin() + static_cast<std::ptrdiff_t>((n + 1) * e));
    }
  }
  return out;
}

PseudoTokenSet InversionNetworks::invert(const FeatureVector& v) const {
  return invert_batch(std::span<const FeatureVector>(&v, 1)).front();
}

void save_inversion(const std::filesystem::path& path, const InversionNetworks& nets,
                    const std::string& config_digest) {
  Checkpoint ck;
  ck.kind = "inversion";
  ck.config_digest = config_digest;
  ck.metadata = {{"shape", nets.shape().to_json()}};
  ck.arrays = nets.parameters().to_arrays();
  save_checkpoint(path, ck);
}

InversionNetworks load_inversion(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "inversion") {
    throw LoadError("'" + path.string() + "' holds a '" + ck.kind + "' checkpoint, expected 'inversion'");
  }
  if (!ck.metadata.contains("shape")) throw LoadError("inversion checkpoint lacks its shape metadata");
  InversionNetworks nets(InversionShape::from_json(ck.metadata["shape"]), ck.arrays);
  return nets;
}

ag::Var compose_prompt_batch(std::span<const ag::Var> slot_tokens, const TokenizedPrompt& prompt,
                             const TextEncoder& text) {
  if (!slot_tokens.empty()) {
    const auto& s0 = slot_tokens.front().shape();
    for (const auto& s : slot_tokens) {
      if (s.shape() != s0) throw InputError("pseudo-token batches disagree in shape");
    }
  }
  return text.forward(inject_pseudo_token_batch(prompt, slot_tokens, text.token_embedding()));
}

std::vector<FeatureVector> compose_prompt_batch(std::span<const PseudoTokenSet> pseudo, const TokenizedPrompt& prompt,
                                                const TextEncoder& text) {
  if (pseudo.empty()) return {};
  const std::size_t slots = pseudo.front().slot_count();
  const std::size_t e = text.config().token_embedding_dim;
  std::vector<ag::Var> batches;
  for (std::size_t s = 0; s < slots; ++s) {
    ag::Tensor t({pseudo.size(), e});
    for (std::size_t n = 0; n < pseudo.size(); ++n) {
      if (pseudo[n].slot_count() != slots) throw InputError("pseudo-token sets disagree in slot count");
      const auto& tok = pseudo[n].tokens[s];
      if (tok.size() != e) {
        throw InputError("pseudo-token has dimension " + std::to_string(tok.size()) + ", expected " +
                         std::to_string(e));
      }
      std::copy(tok.begin(), tok.end(), t.data.begin() + static_cast<std::ptrdiff_t>(n * e));
    }
    batches.push_back(ag::Var::constant(std::move(t)));
  }
  return tensor_to_features(compose_prompt_batch(batches, prompt, text).value());
}

InversionLossTerms inversion_contrastive_terms(const ag::Var& image_feats, const ag::Var& text_feats,
                                               std::span<const int> pids, double tau, bool include_self) {
  if (!(tau > 0.0)) throw InputError("temperature must be positive");
  if (image_feats.value().rank() != 2 || image_feats.shape() != text_feats.shape()) {
    throw InputError("contrastive loss needs equal [N,d] batches, got " + ag::shape_string(image_feats.shape()) +
                     " and " + ag::shape_string(text_feats.shape()));
  }
  const std::size_t n = image_feats.shape()[0];
  if (pids.size() != n) throw InputError("pid count does not match the batch size");
  if (n < 2) throw BatchCompositionError("identity-aware contrastive loss needs at least 2 samples");
  std::vector<double> weights(n * n, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    std::size_t count = 0;
    for (std::size_t m = 0; m < n; ++m) count += (pids[m] == pids[a] && (include_self || m != a)) ? 1 : 0;
    if (count == 0) {
      throw BatchCompositionError("sample " + std::to_string(a) + " (pid " + std::to_string(pids[a]) +
                                  ") has no positive in the batch");
    }
    for (std::size_t m = 0; m < n; ++m) {
      if (pids[m] == pids[a] && (include_self || m != a)) {
        weights[a * n + m] = -1.0 / (static_cast<double>(count) * static_cast<double>(n));
      }
    }
  }
  const auto vn = ag::l2_normalize_rows(image_feats);
  const auto tn = ag::l2_normalize_rows(text_feats);
  const auto logits = ag::scale(ag::matmul(vn, ag::transpose(tn)), 1.0 / tau);
  InversionLossTerms out;
  out.image_to_text = ag::weighted_sum(ag::log_softmax_rows(logits), weights);
  out.text_to_image = ag::weighted_sum(ag::log_softmax_rows(ag::transpose(logits)), weights);
  out.total = ag::add(out.image_to_text, out.text_to_image);
  return out;
}

ag::Var inversion_contrastive_loss(const ag::Var& image_feats, const ag::Var& text_feats, std::span<const int> pids,
                                   double tau, bool include_self) {
  return inversion_contrastive_terms(image_feats, text_feats, pids, tau, include_self).total;
}

std::vector<std::vector<std::size_t>> identity_batches(std::span<const int> pids, std::size_t p, std::size_t k,
                                                       Rng& rng, std::size_t min_identities) {
  if (p == 0 || k == 0) throw ConfigError("P and K must be positive");
  std::map<int, std::vector<std::size_t>> by_pid;
  for (std::size_t i = 0; i < pids.size(); ++i) by_pid[pids[i]].push_back(i);
  auto shuffle = [&rng](auto& v) {
    for (std::size_t i = v.size(); i-- > 1;) std::swap(v[i], v[rng.below(i + 1)]);
  };
  // chunks[i] is a queue of K-sized index groups of identity i
  std::vector<std::vector<std::vector<std::size_t>>> chunks;
  for (auto& [pid, idx] : by_pid) {
    shuffle(idx);
    std::vector<std::vector<std::size_t>> c;
    if (idx.size() < k) {
      c.push_back(idx);
    } else {
      for (std::size_t start = 0; start + k <= idx.size(); start += k) c.emplace_back(idx.begin() + start, idx.begin() + start + k);
    }
    chunks.push_back(std::move(c));
  }
  std::vector<std::size_t> next(chunks.size(), 0);
  std::vector<std::vector<std::size_t>> batches;
  while (true) {
    std::vector<std::size_t> avail;
    for (std::size_t i = 0; i < chunks.size(); ++i) {
      if (next[i] < chunks[i].size()) avail.push_back(i);
    }
    if (avail.empty()) break;
    shuffle(avail);
    for (std::size_t start = 0; start < avail.size(); start += p) {
      const std::size_t end = std::min(start + p, avail.size());
      std::vector<std::size_t> batch;
      for (std::size_t j = start; j < end; ++j) {
        const auto& c = chunks[avail[j]][next[avail[j]]++];
        batch.insert(batch.end(), c.begin(), c.end());
      }
      if (end - start >= min_identities) batches.push_back(std::move(batch));
    }
  }
  return batches;
}

ag::Tensor features_to_tensor(std::span<const FeatureVector> feats) {
  if (feats.empty()) throw InputError("empty feature batch");
  const std::size_t d = feats.front().size();
  ag::Tensor t({feats.size(), d});
  for (std::size_t n = 0; n < feats.size(); ++n) {
    if (feats[n].size() != d) throw InputError("ragged feature batch");
    std::copy(feats[n].values.begin(), feats[n].values.end(), t.data.begin() + static_cast<std::ptrdiff_t>(n * d));
  }
  return t;
}

std::vector<FeatureVector> tensor_to_features(const ag::Tensor& t) {
  if (t.rank() != 2) throw InputError("expected an [N,D] feature tensor");
  const std::size_t n = t.dim(0), d = t.dim(1);
  std::vector<FeatureVector> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].values.assign(t.data.begin() + static_cast<std::ptrdiff_t>(i * d),
                         t.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  }
  return out;
}

InversionTrainResult train_inversion(std::span<const Sample> samples, const JointSpace& space,
                                     InversionNetworks& nets, const TokenizedPrompt& prompt,
                                     const InversionTrainConfig& config) {
  if (samples.size() < 2) throw BatchCompositionError("stage 1 needs at least 2 training images");
  if (!(config.learning_rate >= 0.0)) throw ConfigError("stage1.lr must be non-negative");
  if (nets.shape().slots != prompt.placeholder_positions.size()) {
    throw ConfigError("inversion networks have " + std::to_string(nets.shape().slots) + " slots, template has " +
                      std::to_string(prompt.placeholder_positions.size()));
  }
  std::vector<Image> images;
  std::vector<int> pids;
  for (const auto& s : samples) {
    images.push_back(s.image);
    pids.push_back(s.pid);
  }
  // The encoders are frozen, so image features are computed once.
  const ag::Tensor feats = features_to_tensor(space.visual.encode_batch(images));
  const std::size_t d = feats.dim(1);

  nets.set_trainable(true);
  nn::Adam adam(nets.parameters().vars(), {config.learning_rate});
  Rng rng(Rng::derive(config.seed, 21));
  InversionTrainResult result;

  auto run_batch = [&](const std::vector<std::size_t>& batch, std::size_t index, bool update) {
    ag::Tensor v({batch.size(), d});
    std::vector<int> bp;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      std::copy(feats.data.begin() + static_cast<std::ptrdiff_t>(batch[i] * d),
                feats.data.begin() + static_cast<std::ptrdiff_t>((batch[i] + 1) * d),
                v.data.begin() + static_cast<std::ptrdiff_t>(i * d));
      bp.push_back(pids[batch[i]]);
    }
    const ag::Var vv = ag::Var::constant(std::move(v));
    const auto slots = nets.forward(vv);
    const ag::Var t = compose_prompt_batch(slots, prompt, space.text);
    const auto terms = inversion_contrastive_terms(vv, t, bp, config.tau, config.include_self);
    if (!std::isfinite(terms.total.item())) {
      nets.set_trainable(false);
      throw TrainingError("stage 1: non-finite loss at batch " + std::to_string(index) + ": " + describe(terms));
    }
    if (update) {
      adam.zero_grad();
      ag::backward(terms.total);
      adam.step();
    }
    return terms;
  };

  auto batches = identity_batches(pids, config.identities_per_batch, config.instances_per_identity, rng);
  for (std::size_t epoch = 0; epoch <= config.epochs; ++epoch) {
    if (epoch > 1) batches = identity_batches(pids, config.identities_per_batch, config.instances_per_identity, rng);
    InversionEpochLog entry;
    entry.epoch = epoch;
    std::size_t counted = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      if (batches[b].size() < 2) continue;
      const auto terms = run_batch(batches[b], b, epoch > 0);
      entry.image_to_text += terms.image_to_text.item();
      entry.text_to_image += terms.text_to_image.item();
      entry.total += terms.total.item();
      ++counted;
      if (epoch > 0) ++result.steps;
    }
    if (counted == 0) {
      nets.set_trainable(false);
      throw BatchCompositionError("stage 1 sampler produced no batch with at least 2 samples");
    }
    entry.image_to_text /= static_cast<double>(counted);
    entry.text_to_image /= static_cast<double>(counted);
    entry.total /= static_cast<double>(counted);
    result.log.push_back(entry);
  }
  nets.set_trainable(false);
  return result;
}

void write_inversion_log(const std::filesystem::path& path, const std::vector<InversionEpochLog>& log) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  for (const auto& e : log) {
    nlohmann::ordered_json j = {{"epoch", e.epoch},
                                {"L_i2t", e.image_to_text},
                                {"L_t2i", e.text_to_image},
                                {"total", e.total}};
    out << j.dump() << "\n";
  }
}

}  // namespace apattack
