#pragma once

// Closed caption grammar: vocabulary with concept/relation flags, a parser
// that tags concept and relation positions, masked replications (one view
// per concept occurrence) and the frozen embedding table that stands in for
// a pretrained text encoder.

#include <Eigen/Dense>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmcdet/error.hpp"
#include "mmcdet/rng.hpp"

namespace mmcdet {

using TokenId = int;

inline std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Grammar definition: word classes plus the relation phrases and templates
// used by the caption renderer.
//
// File format, one `key = value` per line, lines starting with `#` are
// comments:
//   concepts  = circle square ...
//   relations = above below left right
//   colors    = red green ...
//   fillers   = a of and ,
//   phrase.left_of = left of
//   template.single = a {color} {concept}
//   template.pair   = a {color} {concept} {relation} a {color} {concept}
//   template.join   = and
struct GrammarSpec {
  std::vector<std::string> concepts;
  std::vector<std::string> relations;
  std::vector<std::string> colors;
  std::vector<std::string> fillers;
  std::map<std::string, std::string> phrases;  // predicate name -> words
  std::string single_template = "a {color} {concept}";
  std::string pair_template = "a {color} {concept} {relation} a {color} {concept}";
  std::string join_word = "and";
  std::string list_separator = ",";

  static GrammarSpec shapes_world() {
    GrammarSpec g;
    g.concepts = {"circle", "square", "triangle", "star", "cross", "ring"};
    g.relations = {"above", "below", "left", "right"};
    g.colors = {"red", "green", "blue", "yellow"};
    g.fillers = {"a", "an", "the", "of", "and", ","};
    g.phrases = {{"above", "above"}, {"below", "below"}, {"left_of", "left of"}, {"right_of", "right of"}};
    return g;
  }

  static GrammarSpec parse(std::istream& in, const std::string& source = "grammar") {
    GrammarSpec g;
    g.phrases.clear();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError(source, lineno, "expected 'key = value'");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key == "concepts") {
        g.concepts = split_words(value);
      } else if (key == "relations") {
        g.relations = split_words(value);
      } else if (key == "colors") {
        g.colors = split_words(value);
      } else if (key == "fillers") {
        g.fillers = split_words(value);
      } else if (key.rfind("phrase.", 0) == 0) {
        g.phrases[key.substr(7)] = value;
      } else if (key == "template.single") {
        g.single_template = value;
      } else if (key == "template.pair") {
        g.pair_template = value;
      } else if (key == "template.join") {
        g.join_word = value;
      } else if (key == "template.list_separator") {
        g.list_separator = value;
      } else {
        throw ParseError(source, lineno, "unknown key '" + key + "'");
      }
    }
    g.validate();
    return g;
  }

  static GrammarSpec load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open grammar file " + path);
    return parse(in, path);
  }

  void save(std::ostream& out) const {
    auto join = [](const std::vector<std::string>& v) {
      std::string s;
      for (const auto& w : v) s += (s.empty() ? "" : " ") + w;
      return s;
    };
    out << "concepts = " << join(concepts) << "\n";
    out << "relations = " << join(relations) << "\n";
    out << "colors = " << join(colors) << "\n";
    out << "fillers = " << join(fillers) << "\n";
    for (const auto& [k, v] : phrases) out << "phrase." << k << " = " << v << "\n";
    out << "template.single = " << single_template << "\n";
    out << "template.pair = " << pair_template << "\n";
    out << "template.join = " << join_word << "\n";
    out << "template.list_separator = " << list_separator << "\n";
  }

  void validate() const {
    if (concepts.empty()) throw ConfigError("grammar defines no concepts");
    std::set<std::string> cs(concepts.begin(), concepts.end());
    for (const auto& r : relations) {
      if (cs.count(r)) throw ConfigError("word '" + r + "' is both concept and relation");
    }
  }
};

struct VocabularyEntry {
  std::string word;
  bool concept_word = false;
  bool relation_word = false;
};

class Vocabulary {
 public:
  static constexpr const char* kMaskWord = "#";

  Vocabulary() = default;

  Vocabulary(std::vector<VocabularyEntry> entries, int embedding_dim, std::uint64_t seed)
      : entries_(std::move(entries)), dim_(embedding_dim), seed_(seed) {
    if (dim_ <= 0) throw ConfigError("embedding_dim must be positive");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      if (e.word.empty()) throw ConfigError("empty vocabulary word");
      if (e.word == kMaskWord) throw ConfigError("mask token '#' may not be a vocabulary word");
      if (e.concept_word && e.relation_word) {
        throw ConfigError("word '" + e.word + "' is both concept and relation");
      }
      if (!ids_.emplace(e.word, static_cast<TokenId>(i)).second) {
        throw ConfigError("duplicate vocabulary word '" + e.word + "'");
      }
    }
    build_embeddings();
  }

  static Vocabulary from_grammar(const GrammarSpec& g, int embedding_dim, std::uint64_t seed) {
    std::vector<VocabularyEntry> entries;
    std::set<std::string> seen;
    auto add = [&](const std::string& w, bool c, bool r) {
      if (seen.insert(w).second) entries.push_back({w, c, r});
    };
    for (const auto& w : g.fillers) add(w, false, false);
    for (const auto& w : g.colors) add(w, false, false);
    for (const auto& w : g.relations) add(w, false, true);
    for (const auto& [k, phrase] : g.phrases) {
      for (const auto& w : split_words(phrase)) add(w, false, false);
    }
    for (const auto& w : split_words(g.join_word)) add(w, false, false);
    add(g.list_separator, false, false);
    for (const auto& w : g.concepts) add(w, true, false);
    return Vocabulary(std::move(entries), embedding_dim, seed);
  }

  // Vocabulary file: one word per line, optional flags `concept` / `relation`
  // separated by whitespace. Blank lines and lines starting with `#` are skipped.
  static Vocabulary parse(std::istream& in, int embedding_dim, std::uint64_t seed,
                          const std::string& source = "vocabulary") {
    std::vector<VocabularyEntry> entries;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto fields = split_words(line);
      if (fields.empty() || fields[0][0] == '#') continue;
      VocabularyEntry e{fields[0]};
      for (std::size_t i = 1; i < fields.size(); ++i) {
        if (fields[i] == "concept") {
          e.concept_word = true;
        } else if (fields[i] == "relation") {
          e.relation_word = true;
        } else {
          throw ParseError(source, lineno, "unknown flag '" + fields[i] + "'");
        }
      }
      entries.push_back(e);
    }
    return Vocabulary(std::move(entries), embedding_dim, seed);
  }

  void save(std::ostream& out) const {
    for (const auto& e : entries_) {
      out << e.word;
      if (e.concept_word) out << " concept";
      if (e.relation_word) out << " relation";
      out << "\n";
    }
  }

  int size() const { return static_cast<int>(entries_.size()); }
  // The mask token id sits just past the last word.
  TokenId mask_token() const { return size(); }
  int embedding_dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }

  TokenId id(const std::string& word) const {
    const auto it = ids_.find(word);
    if (it == ids_.end()) throw UnknownToken(word);
    return it->second;
  }
  bool contains(const std::string& word) const { return ids_.count(word) > 0; }

  const std::string& word(TokenId id) const {
    check_id(id);
    if (id == mask_token()) return mask_word_;
    return entries_[static_cast<std::size_t>(id)].word;
  }
  bool is_concept(TokenId id) const { return id >= 0 && id < size() && entries_[id].concept_word; }
  bool is_relation(TokenId id) const { return id >= 0 && id < size() && entries_[id].relation_word; }

  std::vector<std::string> concept_words() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
      if (e.concept_word) out.push_back(e.word);
    }
    return out;
  }
  std::vector<std::string> relation_words() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
      if (e.relation_word) out.push_back(e.word);
    }
    return out;
  }

  // Unit-norm frozen embedding of a word or the mask token, one row.
  Eigen::RowVectorXd embedding(TokenId id) const {
    check_id(id);
    return table_.row(id);
  }
  Eigen::RowVectorXd embedding(const std::string& word) const { return embedding(id(word)); }

  // (size()+1) x d; the last row is the mask token.
  const Eigen::MatrixXd& table() const { return table_; }

  // Deterministic function of (seed, word string) only.
  static Eigen::RowVectorXd make_embedding(std::uint64_t seed, const std::string& word, int dim) {
    Rng rng(derive_seed(seed, fnv1a(word)));
    Eigen::RowVectorXd v(dim);
    for (int k = 0; k < dim; ++k) v(k) = rng.normal();
    return v / v.norm();
  }

 private:
  void check_id(TokenId id) const {
    if (id < 0 || id > mask_token()) throw UnknownToken("<id " + std::to_string(id) + ">");
  }

  void build_embeddings() {
    table_.resize(size() + 1, dim_);
    for (int i = 0; i < size(); ++i) table_.row(i) = make_embedding(seed_, entries_[i].word, dim_);
    table_.row(size()) = make_embedding(seed_, mask_word_, dim_);
  }

  std::vector<VocabularyEntry> entries_;
  std::unordered_map<std::string, TokenId> ids_;
  int dim_ = 0;
  std::uint64_t seed_ = 0;
  Eigen::MatrixXd table_;
  std::string mask_word_ = kMaskWord;
};

struct Caption {
  std::string text;
  std::vector<TokenId> word_ids;
  std::vector<int> concept_positions;
  std::vector<int> relation_positions;

  std::size_t num_concepts() const { return concept_positions.size(); }
  TokenId concept_id(std::size_t k) const { return word_ids[concept_positions[k]]; }
  std::vector<TokenId> concept_ids() const {
    std::vector<TokenId> out;
    for (int p : concept_positions) out.push_back(word_ids[p]);
    return out;
  }
};

inline Caption parse_caption(const std::string& text, const Vocabulary& vocab) {
  if (trim(text).empty()) throw EmptyCaption();
  Caption c;
  c.text = text;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find(' ', start);
    const std::string word = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
    const TokenId id = vocab.id(word);  // throws UnknownToken
    const int pos = static_cast<int>(c.word_ids.size());
    c.word_ids.push_back(id);
    if (vocab.is_concept(id)) c.concept_positions.push_back(pos);
    if (vocab.is_relation(id)) c.relation_positions.push_back(pos);
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return c;
}

// One caption replication with exactly one concept occurrence masked.
struct MaskedView {
  std::vector<TokenId> token_ids;
  int masked_concept_index = 0;  // k in C^T
  int masked_position = 0;       // position in token_ids
  TokenId target = 0;            // original word id at the masked position
};

inline std::vector<MaskedView> make_masked_views(const Caption& caption, const Vocabulary& vocab) {
  std::vector<MaskedView> views;
  views.reserve(caption.concept_positions.size());
  for (std::size_t k = 0; k < caption.concept_positions.size(); ++k) {
    MaskedView v;
    v.token_ids = caption.word_ids;
    v.masked_concept_index = static_cast<int>(k);
    v.masked_position = caption.concept_positions[k];
    v.target = caption.word_ids[v.masked_position];
    v.token_ids[v.masked_position] = vocab.mask_token();
    views.push_back(std::move(v));
  }
  return views;
}

// n x d matrix of frozen embeddings.
inline Eigen::MatrixXd embed_tokens(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(ids.size()), vocab.embedding_dim());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = vocab.embedding(ids[i]);
  return out;
}

inline std::string render_tokens(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
  std::string s;
  for (TokenId id : ids) s += (s.empty() ? "" : " ") + vocab.word(id);
  return s;
}

}  // namespace mmcdet
