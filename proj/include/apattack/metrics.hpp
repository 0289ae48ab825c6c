#pragma once

// Retrieval metrics (AP, mAP, Rank-k), the cross-victim aggregates aAP and
// mDR, and the evaluation harness that produces an EvaluationReport.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "apattack/attack.hpp"
#include "apattack/defenses.hpp"
#include "apattack/encoders.hpp"
#include "apattack/extractor.hpp"
#include "apattack/synthdata.hpp"

namespace apattack {

// Mean over relevant items of precision at their rank; nullopt when nothing
// is relevant (the caller skips that query).
std::optional<double> average_precision(std::span<const bool> ranked_relevance);
std::optional<double> average_precision(const std::vector<bool>& ranked_relevance);

enum class Distance { kCosine, kL2 };

std::string to_string(Distance d);
Distance parse_distance(std::string_view text);

struct RetrievalSplit {
  std::vector<FeatureVector> query;
  std::vector<int> query_pids, query_camids;
  std::vector<FeatureVector> gallery;
  std::vector<int> gallery_pids, gallery_camids;
};

struct RetrievalOptions {
  Distance distance = Distance::kCosine;
  // Drop gallery entries sharing both pid and camid with the query.
  bool exclude_same_camera = true;
};

struct RetrievalResult {
  double map = 0.0;    // in [0,1]
  double rank1 = 0.0;  // in [0,1]
  std::size_t evaluated_queries = 0;
  std::vector<std::optional<double>> per_query_ap;  // nullopt: query skipped
  std::vector<std::optional<std::size_t>> first_hit_rank;  // 0-based, after exclusion
};

// Ranking is by ascending distance, ties kept in gallery order.
RetrievalResult evaluate_retrieval(const RetrievalSplit& split, const RetrievalOptions& options = {});
double mean_average_precision(const RetrievalSplit& split, const RetrievalOptions& options = {});
double rank_k_accuracy(const RetrievalSplit& split, std::size_t k, const RetrievalOptions& options = {});

// Arithmetic mean of per-victim mAPs (any consistent unit).
double aap(std::span<const double> maps);
double aap(std::initializer_list<double> maps);
// 100 * (clean - adv) / clean.
double mdr(double aap_clean, double aap_adv);
// Half-up rounding; a 1e-9 slack absorbs binary representation error
// (56.55 must round to 56.6 even when stored as 56.54999...).
double round_half_up(double value, int decimals = 1);

struct VictimResult {
  std::string name;
  double clean_map = 0.0;  // in [0,1]
  double clean_rank1 = 0.0;
  std::optional<double> adversarial_map;
  std::optional<double> adversarial_rank1;
};

struct EvaluationReport {
  std::vector<VictimResult> victims;
  double aap_clean = 0.0;  // percent
  std::optional<double> aap_adversarial;
  std::optional<double> mdr;
  std::string defense = "none";
  std::string distance = "cosine";
  double epsilon = 0.0;
  std::string config_digest;
  std::uint64_t seed = 0;

  nlohmann::ordered_json to_json() const;
  static EvaluationReport from_json(const nlohmann::json& j);
  // One row per victim.
  std::string to_csv() const;
};

struct EvaluationOptions {
  RetrievalOptions retrieval;
  DefenseChain defense;
  double epsilon = kDefaultEpsilon;
  std::uint64_t seed = 0;  // defense randomness
  std::string config_digest;
};

// Clean and (with a generator) adversarial mAP per victim. Only queries are
// perturbed; the defense chain transforms every image a victim sees.
EvaluationReport evaluate(std::span<const FeatureExtractor* const> victims, const Dataset& dataset,
                          const PerturbationGenerator* generator, const EvaluationOptions& options);

}  // namespace apattack
