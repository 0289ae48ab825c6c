#include "apattack/prompt.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "apattack/errors.hpp"

namespace apattack {

namespace {

// Returns the marker length and slot number if text[pos..] is "<S<digits>>".
std::optional<std::pair<std::size_t, int>> match_marker(std::string_view text, std::size_t pos) {
  if (pos + 4 > text.size()) return std::nullopt;
  if (text.compare(pos, 2, "<S") != 0) return std::nullopt;
  std::size_t i = pos + 2;
  int value = 0;
  std::size_t digits = 0;
  while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) {
    value = value * 10 + (text[i] - '0');
    ++i;
    ++digits;
  }
  if (digits == 0 || i >= text.size() || text[i] != '>') return std::nullopt;
  return std::make_pair(i + 1 - pos, value);
}

std::string marker(int k) { return "<S" + std::to_string(k) + ">"; }

}  // namespace

PromptTemplate parse_template(std::string_view text) {
  return parse_template(text, {});
}

PromptTemplate parse_template(std::string_view text, std::vector<std::string> attribute_names) {
  std::vector<int> order;
  for (std::size_t pos = 0; pos < text.size(); ++pos) {
    if (auto m = match_marker(text, pos)) {
      order.push_back(m->second);
      pos += m->first - 1;
    }
  }
  if (order.empty()) throw TemplateError("template has no placeholder; expected <S1>");
  std::map<int, int> counts;
  for (int k : order) ++counts[k];
  for (const auto& [k, c] : counts) {
    if (k < 1) throw TemplateError("placeholder " + marker(k) + " is not numbered from 1");
    if (c > 1) throw TemplateError("placeholder " + marker(k) + " appears " + std::to_string(c) + " times");
  }
  const int slots = counts.rbegin()->first;
  for (int k = 1; k <= slots; ++k) {
    if (!counts.count(k)) throw TemplateError("placeholder " + marker(k) + " is missing");
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] != static_cast<int>(i) + 1) {
      throw TemplateError("placeholder " + marker(order[i]) + " appears before " +
                          marker(static_cast<int>(i) + 1));
    }
  }

  PromptTemplate out;
  out.text = std::string(text);
  if (attribute_names.empty()) {
    if (slots == 5) {
      attribute_names = default_attribute_names();
    } else {
      for (int k = 1; k <= slots; ++k) attribute_names.push_back("slot" + std::to_string(k));
    }
  }
  if (attribute_names.size() != static_cast<std::size_t>(slots)) {
    throw TemplateError("template has " + std::to_string(slots) + " slots but " +
                        std::to_string(attribute_names.size()) + " attribute names were given");
  }
  out.attribute_names = std::move(attribute_names);
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto c = static_cast<unsigned char>(text[pos]);
    if (auto m = match_marker(text, pos)) {
      out.emplace_back(text.substr(pos, m->first));
      pos += m->first;
    } else if (std::isspace(c)) {
      ++pos;
    } else if (std::isalnum(c) || c >= 0x80) {
      std::string word;
      while (pos < text.size()) {
        const auto d = static_cast<unsigned char>(text[pos]);
        if (!(std::isalnum(d) || d >= 0x80)) break;
        word += static_cast<char>(d < 0x80 ? std::tolower(d) : d);
        ++pos;
      }
      out.push_back(std::move(word));
    } else {
      out.emplace_back(1, static_cast<char>(c));
      ++pos;
    }
  }
  return out;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("reserved") || !j.contains("tokens")) {
    throw LoadError("vocabulary JSON needs 'reserved' and 'tokens' objects");
  }
  Vocabulary v;
  std::map<int, std::string> by_id;
  auto insert = [&](const std::string& tok, int id) {
    if (id < 0) throw LoadError("vocabulary id for '" + tok + "' is negative");
    if (by_id.count(id)) {
      throw LoadError("vocabulary id " + std::to_string(id) + " assigned to both '" + by_id[id] + "' and '" +
                      tok + "'");
    }
    if (v.ids_.count(tok)) throw LoadError("vocabulary token '" + tok + "' listed twice");
    by_id[id] = tok;
    v.ids_[tok] = id;
  };
  for (const auto& [tok, id] : j.at("reserved").items()) insert(tok, id.get<int>());
  for (const auto& [tok, id] : j.at("tokens").items()) {
    if (match_marker(tok, 0) || tok == "<bos>" || tok == "<eos>" || tok == "<pad>") {
      throw LoadError("reserved token '" + tok + "' listed under 'tokens'");
    }
    insert(tok, id.get<int>());
  }
  for (const char* r : {"<bos>", "<eos>", "<pad>"}) {
    if (!v.ids_.count(r)) throw LoadError(std::string("vocabulary lacks reserved token ") + r);
  }
  v.begin_id_ = v.ids_.at("<bos>");
  v.end_id_ = v.ids_.at("<eos>");
  v.pad_id_ = v.ids_.at("<pad>");
  for (int k = 1;; ++k) {
    auto it = v.ids_.find(marker(k));
    if (it == v.ids_.end()) break;
    v.placeholder_ids_.push_back(it->second);
  }
  if (v.placeholder_ids_.empty()) throw LoadError("vocabulary reserves no placeholder ids (<S1>...)");
  v.tokens_.resize(by_id.size());
  for (const auto& [id, tok] : by_id) {
    if (static_cast<std::size_t>(id) >= by_id.size()) {
      throw LoadError("vocabulary ids must be dense from 0; found id " + std::to_string(id) + " for '" + tok + "'");
    }
    v.tokens_[static_cast<std::size_t>(id)] = tok;
  }
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open vocabulary '" + path.string() + "'");
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("vocabulary '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::json reserved = nlohmann::json::object();
  nlohmann::json tokens = nlohmann::json::object();
  for (std::size_t id = 0; id < tokens_.size(); ++id) {
    const auto& tok = tokens_[id];
    const int i = static_cast<int>(id);
    const bool is_reserved = i == begin_id_ || i == end_id_ || i == pad_id_ || is_placeholder(i);
    (is_reserved ? reserved : tokens)[tok] = i;
  }
  return {{"reserved", reserved}, {"tokens", tokens}};
}

int Vocabulary::placeholder_id(std::size_t slot) const {
  if (slot >= placeholder_ids_.size()) {
    throw TokenizationError("vocabulary has no id for placeholder " + marker(static_cast<int>(slot) + 1));
  }
  return placeholder_ids_[slot];
}

bool Vocabulary::is_placeholder(int id) const {
  return std::find(placeholder_ids_.begin(), placeholder_ids_.end(), id) != placeholder_ids_.end();
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id(std::string_view token) const {
  auto found = find(token);
  if (!found) throw TokenizationError("out-of-vocabulary word '" + std::string(token) + "'");
  return *found;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InputError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::size_t Vocabulary::row(int id) const {
  token(id);
  return static_cast<std::size_t>(id);
}

std::vector<int> Vocabulary::word_ids() const {
  std::vector<int> out;
  for (std::size_t id = 0; id < tokens_.size(); ++id) {
    const int i = static_cast<int>(id);
    if (i != begin_id_ && i != end_id_ && i != pad_id_ && !is_placeholder(i)) out.push_back(i);
  }
  return out;
}

TokenizedPrompt tokenize(const PromptTemplate& prompt, const Vocabulary& vocab) {
  TokenizedPrompt out;
  out.token_ids.push_back(vocab.begin_id());
  for (const auto& w : split_words(prompt.text)) {
    if (auto m = match_marker(w, 0); m && m->first == w.size()) {
      out.placeholder_positions.push_back(out.token_ids.size());
      out.token_ids.push_back(vocab.placeholder_id(static_cast<std::size_t>(m->second - 1)));
    } else {
      out.token_ids.push_back(vocab.id(w));
    }
  }
  out.token_ids.push_back(vocab.end_id());
  if (out.placeholder_positions.size() != prompt.slot_count()) {
    throw TemplateError("template text does not match its slot list");
  }
  return out;
}

namespace {

void check_table(const ag::Tensor& table) {
  if (table.rank() != 2) throw InputError("embedding table must be [V,E], got " + ag::shape_string(table.shape));
}

}  // namespace

TokenEmbeddingSequence embed_tokens(const TokenizedPrompt& tokens, const ag::Tensor& embedding_table) {
  check_table(embedding_table);
  const std::size_t v = embedding_table.shape[0], e = embedding_table.shape[1];
  TokenEmbeddingSequence seq{ag::Tensor({tokens.length(), e})};
  for (std::size_t k = 0; k < tokens.length(); ++k) {
    const int id = tokens.token_ids[k];
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw InputError("token id " + std::to_string(id) + " has no embedding row");
    }
    std::copy_n(embedding_table.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(id) * e), e,
                seq.rows.data.begin() + static_cast<std::ptrdiff_t>(k * e));
  }
  return seq;
}

TokenEmbeddingSequence inject_pseudo_tokens(const TokenizedPrompt& tokens, const PseudoTokenSet& pseudo,
                                            const ag::Tensor& embedding_table) {
  auto seq = embed_tokens(tokens, embedding_table);
  const std::size_t e = embedding_table.shape[1];
  if (pseudo.slot_count() != tokens.placeholder_positions.size()) {
    throw InputError("pseudo-token set has " + std::to_string(pseudo.slot_count()) + " vectors for " +
                     std::to_string(tokens.placeholder_positions.size()) + " slots");
  }
  for (std::size_t i = 0; i < pseudo.slot_count(); ++i) {
    if (pseudo.tokens[i].size() != e) {
      throw InputError("pseudo-token " + std::to_string(i + 1) + " has dimension " +
                       std::to_string(pseudo.tokens[i].size()) + ", expected " + std::to_string(e));
    }
    std::copy(pseudo.tokens[i].begin(), pseudo.tokens[i].end(),
              seq.rows.data.begin() + static_cast<std::ptrdiff_t>(tokens.placeholder_positions[i] * e));
  }
  return seq;
}

ag::Var inject_pseudo_token_batch(const TokenizedPrompt& tokens, std::span<const ag::Var> slot_tokens,
                                  const ag::Tensor& embedding_table) {
  if (slot_tokens.size() != tokens.placeholder_positions.size()) {
    throw InputError("got " + std::to_string(slot_tokens.size()) + " slot batches for " +
                     std::to_string(tokens.placeholder_positions.size()) + " slots");
  }
  const auto base = embed_tokens(tokens, embedding_table);
  return ag::assemble_sequence(base.rows, tokens.placeholder_positions, slot_tokens);
}

ContrastiveTerms clip_contrastive_terms(const ag::Var& image_feats, const ag::Var& text_feats, double tau) {
  if (!(tau > 0.0)) throw InputError("temperature must be positive");
  if (image_feats.value().rank() != 2 || image_feats.shape() != text_feats.shape()) {
    throw InputError("contrastive loss needs equal [N,d] batches, got " + ag::shape_string(image_feats.shape()) +
                     " and " + ag::shape_string(text_feats.shape()));
  }
  const std::size_t n = image_feats.shape()[0];
  if (n == 0) throw InputError("contrastive loss on an empty batch");
  const auto vn = ag::l2_normalize_rows(image_feats);
  const auto tn = ag::l2_normalize_rows(text_feats);
  const auto logits = ag::scale(ag::matmul(vn, ag::transpose(tn)), 1.0 / tau);
  std::vector<double> diag(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) diag[i * n + i] = -1.0 / static_cast<double>(n);
  ContrastiveTerms out;
  out.image_to_text = ag::weighted_sum(ag::log_softmax_rows(logits), diag);
  out.text_to_image = ag::weighted_sum(ag::log_softmax_rows(ag::transpose(logits)), diag);
  out.total = ag::add(out.image_to_text, out.text_to_image);
  return out;
}

ag::Var clip_contrastive_loss(const ag::Var& image_feats, const ag::Var& text_feats, double tau) {
  return clip_contrastive_terms(image_feats, text_feats, tau).total;
}

ag::Tensor rows_to_tensor(std::span<const std::vector<double>> rows) {
  if (rows.empty()) throw InputError("empty batch");
  const std::size_t d = rows[0].size();
  ag::Tensor t({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != d) throw InputError("ragged feature batch");
    std::copy(rows[r].begin(), rows[r].end(), t.data.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  return t;
}

double clip_contrastive_loss(std::span<const std::vector<double>> image_feats,
                             std::span<const std::vector<double>> text_feats, double tau) {
  return clip_contrastive_loss(ag::Var::constant(rows_to_tensor(image_feats)),
                               ag::Var::constant(rows_to_tensor(text_feats)), tau)
      .item();
}

}  // namespace apattack
