#pragma once

// Attribute prompt templates, the closed-vocabulary word tokenizer,
// embedding-level pseudo-token injection, and the CLIP image/text
// contrastive loss.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "apattack/autograd.hpp"

namespace apattack {

inline constexpr std::string_view kDefaultTemplateText =
    "A photo of a person wearing <S1> on top, <S2> underneath, <S3> hairstyle, <S4> shoes, carrying <S5>.";

inline const std::vector<std::string>& default_attribute_names() {
  static const std::vector<std::string> names{"top", "underneath", "hairstyle", "shoes", "carrying"};
  return names;
}

struct PromptTemplate {
  std::string text;
  std::vector<std::string> attribute_names;  // one per slot, in slot order

  std::size_t slot_count() const { return attribute_names.size(); }
};

// Finds <S1>..<SI>. Each marker must appear exactly once, numbered 1..I
// without gaps, and in increasing textual order. Attribute names default to
// the five pedestrian attributes when I == 5, else "slot<i>".
PromptTemplate parse_template(std::string_view text);
PromptTemplate parse_template(std::string_view text, std::vector<std::string> attribute_names);

// Lowercased word tokens: alphanumeric runs and single punctuation
// characters; <Sk> markers are kept verbatim.
std::vector<std::string> split_words(std::string_view text);

class Vocabulary {
 public:
  // {"reserved": {"<bos>":0,"<eos>":1,"<pad>":2,"<S1>":3,...}, "tokens": {...}}
  static Vocabulary from_json(const nlohmann::json& j);
  static Vocabulary load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  std::size_t size() const { return tokens_.size(); }
  int begin_id() const { return begin_id_; }
  int end_id() const { return end_id_; }
  int pad_id() const { return pad_id_; }
  std::size_t placeholder_capacity() const { return placeholder_ids_.size(); }
  // slot is 0-based
  int placeholder_id(std::size_t slot) const;
  bool is_placeholder(int id) const;

  std::optional<int> find(std::string_view token) const;
  // Throws TokenizationError naming the token.
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  // Embedding-table row of a token id.
  std::size_t row(int id) const;
  // Word ids in id order (excludes reserved ids).
  std::vector<int> word_ids() const;

 private:
  std::unordered_map<std::string, int> ids_;
  std::vector<std::string> tokens_;  // indexed by id
  int begin_id_ = -1, end_id_ = -1, pad_id_ = -1;
  std::vector<int> placeholder_ids_;
};

struct TokenizedPrompt {
  std::vector<int> token_ids;
  std::vector<std::size_t> placeholder_positions;  // slot order

  std::size_t length() const { return token_ids.size(); }
};

TokenizedPrompt tokenize(const PromptTemplate& prompt, const Vocabulary& vocab);

// One vector per attribute slot, each token_embedding_dim long.
struct PseudoTokenSet {
  std::vector<std::vector<double>> tokens;

  std::size_t slot_count() const { return tokens.size(); }
  bool operator==(const PseudoTokenSet&) const = default;
};

struct TokenEmbeddingSequence {
  ag::Tensor rows;  // [L, E]

  std::size_t length() const { return rows.shape.empty() ? 0 : rows.shape[0]; }
};

// Plain (no pseudo-token) embedding of the token ids; placeholder rows take
// the placeholder ids' own table rows.
TokenEmbeddingSequence embed_tokens(const TokenizedPrompt& tokens, const ag::Tensor& embedding_table);

TokenEmbeddingSequence inject_pseudo_tokens(const TokenizedPrompt& tokens, const PseudoTokenSet& pseudo,
                                            const ag::Tensor& embedding_table);

// Differentiable batch form: slot_tokens[i] is [N,E] holding slot i of every
// sample. Returns [N,L,E].
ag::Var inject_pseudo_token_batch(const TokenizedPrompt& tokens, std::span<const ag::Var> slot_tokens,
                                  const ag::Tensor& embedding_table);

struct ContrastiveTerms {
  ag::Var image_to_text;
  ag::Var text_to_image;
  ag::Var total;
};

// Symmetric InfoNCE over diagonal pairs with cosine similarity / tau.
ContrastiveTerms clip_contrastive_terms(const ag::Var& image_feats, const ag::Var& text_feats, double tau);
ag::Var clip_contrastive_loss(const ag::Var& image_feats, const ag::Var& text_feats, double tau);
double clip_contrastive_loss(std::span<const std::vector<double>> image_feats,
                             std::span<const std::vector<double>> text_feats, double tau);

// Helpers shared by loss implementations.
ag::Tensor rows_to_tensor(std::span<const std::vector<double>> rows);

}  // namespace apattack
