#pragma once

// Reads learned pseudo-tokens back as words: each attribute slot's
// pseudo-token is compared, by cosine in token-embedding space, with the
// candidate words listed for that attribute.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "apattack/autograd.hpp"
#include "apattack/encoders.hpp"
#include "apattack/inversion.hpp"
#include "apattack/prompt.hpp"
#include "apattack/synthdata.hpp"

namespace apattack {

class AttributeVocabulary {
 public:
  AttributeVocabulary() = default;
  // Attribute order follows the input order.
  explicit AttributeVocabulary(std::vector<std::pair<std::string, std::vector<std::string>>> entries);

  // {"attributes": {"top": ["red", ...], ...}}
  static AttributeVocabulary from_json(const nlohmann::ordered_json& j);
  static AttributeVocabulary load(const std::filesystem::path& path);
  nlohmann::ordered_json to_json() const;

  std::vector<std::string> attributes() const;
  bool contains(std::string_view attribute) const;
  // Throws InputError naming an unknown attribute.
  const std::vector<std::string>& words(std::string_view attribute) const;
  // Every template attribute must have an entry.
  void check_covers(const PromptTemplate& prompt) const;

 private:
  std::vector<std::pair<std::string, std::vector<std::string>>> entries_;
};

// Mean of the embedding rows of the word's sub-tokens.
std::vector<double> word_token_embedding(std::string_view word, const Vocabulary& vocab,
                                         const ag::Tensor& embedding_table);

struct WordScore {
  std::string word;
  double cosine = 0.0;

  bool operator==(const WordScore&) const = default;
};

// Descending cosine; equal cosines keep vocabulary-file order.
std::vector<WordScore> rank_words(std::span<const double> pseudo_token, std::string_view attribute,
                                  const AttributeVocabulary& words, const Vocabulary& vocab,
                                  const ag::Tensor& embedding_table);

struct WordRanking {
  std::string image_id;
  std::string attribute;
  std::vector<WordScore> words;

  bool operator==(const WordRanking&) const = default;
};

// One ranking per image and template slot.
std::vector<WordRanking> interpret_samples(std::span<const Sample> samples, const JointSpace& space,
                                           const InversionNetworks& nets, const PromptTemplate& prompt,
                                           const AttributeVocabulary& words, const Vocabulary& vocab);

// Rankings truncated to their first top_k words (top_k 0 keeps everything).
std::vector<WordRanking> truncate_rankings(std::span<const WordRanking> rankings, std::size_t top_k);

// Columns image_id, attribute, rank (1-based), word, cosine.
std::string wordcloud_csv(std::span<const WordRanking> rankings, std::size_t top_k = 2);
nlohmann::ordered_json wordcloud_json(std::span<const WordRanking> rankings, std::size_t top_k = 2);
std::vector<WordRanking> parse_wordcloud_csv(std::string_view text);
std::vector<WordRanking> parse_wordcloud_json(const nlohmann::json& j);
// Writes <stem>.csv and <stem>.json.
void export_wordcloud_data(const std::filesystem::path& stem, std::span<const WordRanking> rankings,
                           std::size_t top_k = 2);

struct InterpretationAccuracy {
  std::vector<std::pair<std::string, double>> per_attribute;
  double macro = 0.0;
  std::size_t images = 0;
};

// Top-1 word against the ground-truth tuple of each sample's pid.
InterpretationAccuracy interpretation_accuracy(std::span<const WordRanking> rankings, std::span<const Sample> samples,
                                               const Dataset& dataset);

}  // namespace apattack
