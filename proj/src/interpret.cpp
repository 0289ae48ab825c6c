#include "apattack/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "apattack/errors.hpp"

namespace apattack {

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string exact_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// One CSV record; handles quoted fields with doubled quotes.
std::vector<std::string> split_csv_line(std::string_view line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw InputError("unterminated quote in word-cloud CSV line " + std::to_string(line_no));
  fields.push_back(std::move(cur));
  return fields;
}

}  // namespace

AttributeVocabulary::AttributeVocabulary(std::vector<std::pair<std::string, std::vector<std::string>>> entries)
    : entries_(std::move(entries)) {
  if (entries_.empty()) throw ConfigError("attribute vocabulary is empty");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& [name, words] = entries_[i];
    if (words.empty()) throw ConfigError("attribute '" + name + "' has an empty word list");
    for (std::size_t j = 0; j < i; ++j) {
      if (entries_[j].first == name) throw ConfigError("attribute '" + name + "' is listed twice");
    }
  }
}

AttributeVocabulary AttributeVocabulary::from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object() || !j.contains("attributes") || !j.at("attributes").is_object()) {
    throw ConfigError("attribute vocabulary needs an \"attributes\" object");
  }
  std::vector<std::pair<std::string, std::vector<std::string>>> entries;
  for (const auto& [name, list] : j.at("attributes").items()) {
    if (!list.is_array()) throw ConfigError("attribute '" + name + "' must map to a list of words");
    std::vector<std::string> words;
    for (const auto& w : list) {
      if (!w.is_string()) throw ConfigError("attribute '" + name + "' has a non-string word");
      words.push_back(w.get<std::string>());
    }
    entries.emplace_back(name, std::move(words));
  }
  return AttributeVocabulary(std::move(entries));
}

AttributeVocabulary AttributeVocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open attribute vocabulary " + path.string());
  try {
    return from_json(nlohmann::ordered_json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed attribute vocabulary " + path.string() + ": " + e.what());
  }
}

nlohmann::ordered_json AttributeVocabulary::to_json() const {
  nlohmann::ordered_json attrs = nlohmann::ordered_json::object();
  for (const auto& [name, words] : entries_) attrs[name] = words;
  return {{"attributes", attrs}};
}

std::vector<std::string> AttributeVocabulary::attributes() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.first);
  return out;
}

bool AttributeVocabulary::contains(std::string_view attribute) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == attribute; });
}

const std::vector<std::string>& AttributeVocabulary::words(std::string_view attribute) const {
  for (const auto& e : entries_) {
    if (e.first == attribute) return e.second;
  }
  throw InputError("attribute '" + std::string(attribute) + "' is not in the attribute vocabulary");
}

void AttributeVocabulary::check_covers(const PromptTemplate& prompt) const {
  for (const auto& name : prompt.attribute_names) {
    if (!contains(name)) throw ConfigError("attribute vocabulary has no entry for template attribute '" + name + "'");
  }
}

std::vector<double> word_token_embedding(std::string_view word, const Vocabulary& vocab,
                                         const ag::Tensor& embedding_table) {
  if (embedding_table.rank() != 2) throw InputError("embedding table must be [V,E]");
  const auto pieces = split_words(word);
  if (pieces.empty()) throw TokenizationError("word '" + std::string(word) + "' has no tokens");
  const std::size_t e = embedding_table.dim(1);
  std::vector<double> out(e, 0.0);
  for (const auto& piece : pieces) {
    const auto id = vocab.find(piece);
    if (!id) {
      throw TokenizationError("word '" + std::string(word) + "' is out of vocabulary (sub-token '" + piece + "')");
    }
    const std::size_t row = vocab.row(*id);
    if (row >= embedding_table.dim(0)) throw InputError("embedding table has no row for '" + piece + "'");
    for (std::size_t k = 0; k < e; ++k) out[k] += embedding_table.data[row * e + k];
  }
  if (pieces.size() > 1) {
    for (auto& v : out) v /= static_cast<double>(pieces.size());
  }
  return out;
}

std::vector<WordScore> rank_words(std::span<const double> pseudo_token, std::string_view attribute,
                                  const AttributeVocabulary& words, const Vocabulary& vocab,
                                  const ag::Tensor& embedding_table) {
  const auto& list = words.words(attribute);
  if (embedding_table.rank() != 2 || pseudo_token.size() != embedding_table.dim(1)) {
    throw InputError("pseudo-token length does not match the embedding width");
  }
  const double pn = norm(pseudo_token);
  if (pn == 0.0) throw NormalizationError("cannot rank words against a zero pseudo-token");
  std::vector<WordScore> out;
  for (const auto& w : list) {
    const auto emb = word_token_embedding(w, vocab, embedding_table);
    const double wn = norm(emb);
    if (wn == 0.0) throw NormalizationError("word '" + w + "' has a zero embedding");
    double dot = 0.0;
    for (std::size_t k = 0; k < emb.size(); ++k) dot += emb[k] * pseudo_token[k];
    out.push_back({w, dot / (pn * wn)});
  }
  std::stable_sort(out.begin(), out.end(), [](const WordScore& a, const WordScore& b) { return a.cosine > b.cosine; });
  return out;
}

std::vector<WordRanking> interpret_samples(std::span<const Sample> samples, const JointSpace& space,
                                           const InversionNetworks& nets, const PromptTemplate& prompt,
                                           const AttributeVocabulary& words, const Vocabulary& vocab) {
  words.check_covers(prompt);
  if (prompt.slot_count() != nets.shape().slots) {
    throw ConfigError("template has " + std::to_string(prompt.slot_count()) + " slots but the inversion networks have " +
                      std::to_string(nets.shape().slots));
  }
  std::vector<Image> images;
  for (const auto& s : samples) images.push_back(s.image);
  const auto pseudo = nets.invert_batch(space.visual.encode_batch(images));
  const auto& table = space.text.token_embedding();
  std::vector<WordRanking> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t s = 0; s < prompt.slot_count(); ++s) {
      const auto& attr = prompt.attribute_names[s];
      out.push_back({samples[i].image_id, attr, rank_words(pseudo[i].tokens[s], attr, words, vocab, table)});
    }
  }
  return out;
}

std::vector<WordRanking> truncate_rankings(std::span<const WordRanking> rankings, std::size_t top_k) {
  std::vector<WordRanking> out(rankings.begin(), rankings.end());
  if (top_k == 0) return out;
  for (auto& r : out) {
    if (r.words.size() > top_k) r.words.resize(top_k);
  }
  return out;
}

std::string wordcloud_csv(std::span<const WordRanking> rankings, std::size_t top_k) {
  std::string out = "image_id,attribute,rank,word,cosine\n";
  for (const auto& r : truncate_rankings(rankings, top_k)) {
    for (std::size_t k = 0; k < r.words.size(); ++k) {
      out += csv_field(r.image_id) + "," + csv_field(r.attribute) + "," + std::to_string(k + 1) + "," +
             csv_field(r.words[k].word) + "," + exact_number(r.words[k].cosine) + "\n";
    }
  }
  return out;
}

nlohmann::ordered_json wordcloud_json(std::span<const WordRanking> rankings, std::size_t top_k) {
  nlohmann::ordered_json records = nlohmann::ordered_json::array();
  for (const auto& r : truncate_rankings(rankings, top_k)) {
    nlohmann::ordered_json words = nlohmann::ordered_json::array();
    for (const auto& w : r.words) words.push_back({{"word", w.word}, {"cosine", w.cosine}});
    records.push_back({{"image_id", r.image_id}, {"attribute", r.attribute}, {"words", words}});
  }
  return {{"top_k", top_k}, {"rankings", records}};
}

std::vector<WordRanking> parse_wordcloud_csv(std::string_view text) {
  std::vector<WordRanking> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != "image_id,attribute,rank,word,cosine") throw InputError("word-cloud CSV has an unexpected header");
      continue;
    }
    if (line.empty()) continue;
    const auto f = split_csv_line(line, line_no);
    if (f.size() != 5) throw InputError("word-cloud CSV line " + std::to_string(line_no) + " needs 5 fields");
    std::size_t rank = 0;
    double cosine = 0.0;
    try {
      rank = std::stoul(f[2]);
      cosine = std::stod(f[4]);
    } catch (const std::exception&) {
      throw InputError("bad number in word-cloud CSV line " + std::to_string(line_no));
    }
    const bool continues = !out.empty() && out.back().image_id == f[0] && out.back().attribute == f[1];
    if (!continues) {
      if (rank != 1) throw InputError("word-cloud CSV line " + std::to_string(line_no) + " starts a ranking at rank " + f[2]);
      out.push_back({f[0], f[1], {}});
    } else if (rank != out.back().words.size() + 1) {
      throw InputError("word-cloud CSV line " + std::to_string(line_no) + " skips a rank");
    }
    out.back().words.push_back({f[3], cosine});
  }
  if (line_no == 0) throw InputError("word-cloud CSV is missing its header");
  return out;
}

std::vector<WordRanking> parse_wordcloud_json(const nlohmann::json& j) {
  std::vector<WordRanking> out;
  try {
    for (const auto& r : j.at("rankings")) {
      WordRanking wr{r.at("image_id").get<std::string>(), r.at("attribute").get<std::string>(), {}};
      for (const auto& w : r.at("words")) wr.words.push_back({w.at("word").get<std::string>(), w.at("cosine").get<double>()});
      out.push_back(std::move(wr));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed word-cloud JSON: ") + e.what());
  }
  return out;
}

void export_wordcloud_data(const std::filesystem::path& stem, std::span<const WordRanking> rankings,
                           std::size_t top_k) {
  auto csv_path = stem;
  csv_path += ".csv";
  auto json_path = stem;
  json_path += ".json";
  std::ofstream csv(csv_path);
  if (!csv) throw Error("cannot write " + csv_path.string());
  csv << wordcloud_csv(rankings, top_k);
  std::ofstream js(json_path);
  if (!js) throw Error("cannot write " + json_path.string());
  js << wordcloud_json(rankings, top_k).dump(2) << "\n";
  if (!csv || !js) throw Error("failed writing word-cloud data next to " + stem.string());
}

InterpretationAccuracy interpretation_accuracy(std::span<const WordRanking> rankings, std::span<const Sample> samples,
                                               const Dataset& dataset) {
  std::map<std::string, int> pid_of;
  for (const auto& s : samples) pid_of[s.image_id] = s.pid;
  std::map<std::string, std::pair<std::size_t, std::size_t>> tally;  // hits, total
  std::vector<std::string> order;
  std::set<std::string> seen;
  for (const auto& r : rankings) {
    seen.insert(r.image_id);
    const auto it = pid_of.find(r.image_id);
    if (it == pid_of.end()) throw InputError("ranking for unknown image '" + r.image_id + "'");
    const auto truth = dataset.attributes.find(it->second);
    if (truth == dataset.attributes.end()) throw InputError("no ground-truth attributes for pid " + std::to_string(it->second));
    const auto slot = std::find(dataset.attribute_names.begin(), dataset.attribute_names.end(), r.attribute);
    if (slot == dataset.attribute_names.end()) throw InputError("dataset has no attribute '" + r.attribute + "'");
    if (r.words.empty()) throw InputError("empty ranking for image '" + r.image_id + "'");
    if (!tally.count(r.attribute)) order.push_back(r.attribute);
    auto& [hits, total] = tally[r.attribute];
    const auto words = truth->second.words();
    hits += r.words.front().word == words[static_cast<std::size_t>(slot - dataset.attribute_names.begin())] ? 1 : 0;
    ++total;
  }
  if (order.empty()) throw EvaluationError("no rankings to score");
  InterpretationAccuracy acc;
  acc.images = seen.size();
  for (const auto& name : order) {
    const auto [hits, total] = tally[name];
    const double a = static_cast<double>(hits) / static_cast<double>(total);
    acc.per_attribute.emplace_back(name, a);
    acc.macro += a / static_cast<double>(order.size());
  }
  return acc;
}

}  // namespace apattack
