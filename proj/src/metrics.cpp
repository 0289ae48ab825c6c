#include "apattack/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "apattack/errors.hpp"
#include "apattack/rng.hpp"

namespace apattack {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> normalized(const std::vector<double>& v) {
  const double n = std::sqrt(dot(v, v));
  if (n == 0.0) throw NormalizationError("cannot L2-normalise a zero feature vector");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

std::vector<Image> defended(const std::vector<Image>& images, const DefenseChain& chain, std::uint64_t seed,
                            std::uint64_t stream) {
  if (chain.empty()) return images;
  std::vector<Image> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.push_back(apply_defense_chain(images[i], chain, Rng::derive(seed, stream + i)));
  }
  return out;
}

nlohmann::ordered_json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

template <typename Seq>
std::optional<double> ap_of(const Seq& ranked_relevance) {
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < ranked_relevance.size(); ++r) {
    if (!ranked_relevance[r]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

}  // namespace

std::optional<double> average_precision(std::span<const bool> ranked_relevance) { return ap_of(ranked_relevance); }

std::optional<double> average_precision(const std::vector<bool>& ranked_relevance) { return ap_of(ranked_relevance); }

std::string to_string(Distance d) { return d == Distance::kCosine ? "cosine" : "l2"; }

Distance parse_distance(std::string_view text) {
  if (text == "cosine") return Distance::kCosine;
  if (text == "l2") return Distance::kL2;
  throw ConfigError("unknown retrieval distance '" + std::string(text) + "' (expected cosine or l2)");
}

RetrievalResult evaluate_retrieval(const RetrievalSplit& split, const RetrievalOptions& options) {
  const std::size_t nq = split.query.size(), ng = split.gallery.size();
  if (nq == 0 || ng == 0) throw EvaluationError("retrieval needs non-empty query and gallery sets");
  if (split.query_pids.size() != nq || split.query_camids.size() != nq || split.gallery_pids.size() != ng ||
      split.gallery_camids.size() != ng) {
    throw InputError("retrieval split labels do not match the feature counts");
  }
  std::vector<std::vector<double>> q, g;
  for (const auto& f : split.query) q.push_back(options.distance == Distance::kCosine ? normalized(f.values) : f.values);
  for (const auto& f : split.gallery)
    g.push_back(options.distance == Distance::kCosine ? normalized(f.values) : f.values);
  const std::size_t d = q.front().size();
  for (const auto& v : g) {
    if (v.size() != d) throw InputError("query and gallery features differ in dimension");
  }

  RetrievalResult result;
  result.per_query_ap.resize(nq);
  result.first_hit_rank.resize(nq);
  double ap_sum = 0.0, rank1_sum = 0.0;
  std::vector<double> dist(ng);
  std::vector<std::size_t> order(ng);
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < ng; ++j) {
      if (options.distance == Distance::kCosine) {
        dist[j] = 1.0 - dot(q[i], g[j]);
      } else {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += (q[i][k] - g[j][k]) * (q[i][k] - g[j][k]);
        dist[j] = std::sqrt(s);
      }
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    std::vector<bool> relevance;
    relevance.reserve(ng);
    for (auto j : order) {
      const bool same_pid = split.gallery_pids[j] == split.query_pids[i];
      if (options.exclude_same_camera && same_pid && split.gallery_camids[j] == split.query_camids[i]) continue;
      relevance.push_back(same_pid);
    }
    const auto ap = average_precision(relevance);
    result.per_query_ap[i] = ap;
    if (!ap) continue;
    ap_sum += *ap;
    const auto first = std::find(relevance.begin(), relevance.end(), true);
    result.first_hit_rank[i] = static_cast<std::size_t>(first - relevance.begin());
    rank1_sum += relevance.front() ? 1.0 : 0.0;
    ++result.evaluated_queries;
  }
  if (result.evaluated_queries == 0) throw EvaluationError("every query was excluded (no valid gallery match)");
  result.map = ap_sum / static_cast<double>(result.evaluated_queries);
  result.rank1 = rank1_sum / static_cast<double>(result.evaluated_queries);
  return result;
}

double mean_average_precision(const RetrievalSplit& split, const RetrievalOptions& options) {
  return evaluate_retrieval(split, options).map;
}

double rank_k_accuracy(const RetrievalSplit& split, std::size_t k, const RetrievalOptions& options) {
  if (k == 0) throw InputError("rank-k needs k >= 1");
  const auto result = evaluate_retrieval(split, options);
  std::size_t hits = 0;
  for (const auto& r : result.first_hit_rank) hits += (r && *r < k) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(result.evaluated_queries);
}

double aap(std::span<const double> maps) {
  if (maps.empty()) throw InputError("aAP of an empty list");
  return std::accumulate(maps.begin(), maps.end(), 0.0) / static_cast<double>(maps.size());
}

double aap(std::initializer_list<double> maps) { return aap(std::span<const double>(maps.begin(), maps.size())); }

double mdr(double aap_clean, double aap_adv) {
  if (!(aap_clean > 0.0)) throw InputError("mDR needs a positive clean aAP");
  return 100.0 * (aap_clean - aap_adv) / aap_clean;
}

double round_half_up(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  return std::floor(value * scale + 0.5 + 1e-9) / scale;
}

nlohmann::ordered_json EvaluationReport::to_json() const {
  nlohmann::ordered_json victims_json = nlohmann::ordered_json::array();
  for (const auto& v : victims) {
    victims_json.push_back({{"name", v.name},
                            {"clean_map", v.clean_map},
                            {"clean_rank1", v.clean_rank1},
                            {"adversarial_map", optional_number(v.adversarial_map)},
                            {"adversarial_rank1", optional_number(v.adversarial_rank1)}});
  }
  nlohmann::ordered_json j = {{"victims", victims_json},
                              {"aap_clean", aap_clean},
                              {"aap_adversarial", optional_number(aap_adversarial)},
                              {"defense", defense},
                              {"distance", distance},
                              {"epsilon", epsilon},
                              {"config_digest", config_digest},
                              {"seed", seed}};
  if (mdr) j["mdr"] = *mdr;
  nlohmann::ordered_json display = {{"aap_clean", round_half_up(aap_clean)}};
  if (aap_adversarial) display["aap_adversarial"] = round_half_up(*aap_adversarial);
  if (mdr) display["mdr"] = round_half_up(*mdr);
  j["display"] = display;
  return j;
}

EvaluationReport EvaluationReport::from_json(const nlohmann::json& j) {
  EvaluationReport r;
  try {
    for (const auto& v : j.at("victims")) {
      VictimResult vr;
      vr.name = v.at("name").get<std::string>();
      vr.clean_map = v.at("clean_map").get<double>();
      vr.clean_rank1 = v.at("clean_rank1").get<double>();
      if (!v.at("adversarial_map").is_null()) vr.adversarial_map = v.at("adversarial_map").get<double>();
      if (!v.at("adversarial_rank1").is_null()) vr.adversarial_rank1 = v.at("adversarial_rank1").get<double>();
      r.victims.push_back(vr);
    }
    r.aap_clean = j.at("aap_clean").get<double>();
    if (!j.at("aap_adversarial").is_null()) r.aap_adversarial = j.at("aap_adversarial").get<double>();
    if (j.contains("mdr")) r.mdr = j.at("mdr").get<double>();
    r.defense = j.at("defense").get<std::string>();
    r.distance = j.at("distance").get<std::string>();
    r.epsilon = j.at("epsilon").get<double>();
    r.config_digest = j.at("config_digest").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("malformed evaluation report: ") + e.what());
  }
  return r;
}

std::string EvaluationReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "victim,clean_map,adversarial_map,clean_rank1,adversarial_rank1,defense\n";
  for (const auto& v : victims) {
    os << v.name << "," << v.clean_map << ",";
    if (v.adversarial_map) os << *v.adversarial_map;
    os << "," << v.clean_rank1 << ",";
    if (v.adversarial_rank1) os << *v.adversarial_rank1;
    os << "," << defense << "\n";
  }
  return os.str();
}

EvaluationReport evaluate(std::span<const FeatureExtractor* const> victims, const Dataset& dataset,
                          const PerturbationGenerator* generator, const EvaluationOptions& options) {
  if (victims.empty()) throw EvaluationError("evaluation needs at least one victim model");
  if (dataset.query.empty() || dataset.gallery.empty()) {
    throw EvaluationError("evaluation needs non-empty query and gallery splits");
  }
  const auto query = images_of(dataset.query);
  const auto gallery = images_of(dataset.gallery);
  const auto clean_query = defended(query, options.defense, options.seed, 0);
  const auto clean_gallery = defended(gallery, options.defense, options.seed, 1000000);
  std::vector<Image> adv_query;
  if (generator != nullptr) {
    adv_query = defended(apply_perturbation(*generator, query, options.epsilon), options.defense, options.seed, 0);
  }

  EvaluationReport report;
  report.defense = defense_chain_string(options.defense);
  report.distance = to_string(options.retrieval.distance);
  report.epsilon = generator != nullptr ? options.epsilon : 0.0;
  report.config_digest = options.config_digest;
  report.seed = options.seed;
  std::vector<double> clean_maps, adv_maps;
  for (const FeatureExtractor* victim : victims) {
    RetrievalSplit split;
    split.query_pids = pids_of(dataset.query);
    split.query_camids = camids_of(dataset.query);
    split.gallery_pids = pids_of(dataset.gallery);
    split.gallery_camids = camids_of(dataset.gallery);
    split.gallery = victim->extract(clean_gallery);
    split.query = victim->extract(clean_query);
    const auto clean = evaluate_retrieval(split, options.retrieval);
    VictimResult vr;
    vr.name = victim->name();
    vr.clean_map = clean.map;
    vr.clean_rank1 = clean.rank1;
    clean_maps.push_back(100.0 * clean.map);
    if (generator != nullptr) {
      split.query = victim->extract(adv_query);
      const auto adv = evaluate_retrieval(split, options.retrieval);
      vr.adversarial_map = adv.map;
      vr.adversarial_rank1 = adv.rank1;
      adv_maps.push_back(100.0 * adv.map);
    }
    report.victims.push_back(vr);
  }
  report.aap_clean = aap(clean_maps);
  if (generator != nullptr) {
    report.aap_adversarial = aap(adv_maps);
    report.mdr = mdr(report.aap_clean, *report.aap_adversarial);
  }
  return report;
}

}  // namespace apattack
