#pragma once

// Episodic task generators: boolean concepts sampled from a PCFG, modular
// arithmetic regression over [0,100), and N-way K-shot character episodes
// from an Omniglot-style directory index (with a synthetic-glyph fallback
// for environments without the real archive).

#include <algorithm>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "metabias/represent.hpp"
#include "metabias/tensor.hpp"

namespace metabias {

// ---------------------------------------------------------------------------
// Concept formulas over the 16 objects.
// ---------------------------------------------------------------------------

class ConceptFormula {
 public:
  enum class Kind { And, Or, Not, Pred };

  static ConceptFormula pred(int feature, int value) {
    ConceptFormula f;
    f.kind_ = Kind::Pred;
    f.feature_ = feature;
    f.value_ = value;
    return f;
  }
  static ConceptFormula logical_not(ConceptFormula a) {
    ConceptFormula f;
    f.kind_ = Kind::Not;
    f.children_.push_back(std::make_shared<ConceptFormula>(std::move(a)));
    return f;
  }
  static ConceptFormula logical_and(ConceptFormula a, ConceptFormula b) {
    ConceptFormula f;
    f.kind_ = Kind::And;
    f.children_.push_back(std::make_shared<ConceptFormula>(std::move(a)));
    f.children_.push_back(std::make_shared<ConceptFormula>(std::move(b)));
    return f;
  }
  static ConceptFormula logical_or(ConceptFormula a, ConceptFormula b) {
    ConceptFormula f;
    f.kind_ = Kind::Or;
    f.children_.push_back(std::make_shared<ConceptFormula>(std::move(a)));
    f.children_.push_back(std::make_shared<ConceptFormula>(std::move(b)));
    return f;
  }

  bool evaluate(const ConceptObject& obj) const {
    switch (kind_) {
      case Kind::Pred: return obj.feature(feature_) == value_;
      case Kind::Not: return !children_[0]->evaluate(obj);
      case Kind::And:
        return children_[0]->evaluate(obj) && children_[1]->evaluate(obj);
      case Kind::Or:
        return children_[0]->evaluate(obj) || children_[1]->evaluate(obj);
    }
    return false;
  }

  // Number of objects (out of 16) the formula labels true.
  int truth_count() const {
    int n = 0;
    for (int code = 0; code < ConceptObject::kNumObjects; ++code)
      n += evaluate(ConceptObject::from_code(code)) ? 1 : 0;
    return n;
  }

  std::string str() const {
    std::ostringstream os;
    print(os);
    return os.str();
  }

  static ConceptFormula parse(const std::string& text) {
    size_t pos = 0;
    ConceptFormula f = parse_node(text, pos);
    skip_ws(text, pos);
    if (pos != text.size())
      throw ConfigError("trailing characters in formula: " + text);
    return f;
  }

 private:
  void print(std::ostream& os) const {
    switch (kind_) {
      case Kind::Pred:
        os << "(= f" << feature_ << " " << value_ << ")";
        return;
      case Kind::Not:
        os << "(not ";
        children_[0]->print(os);
        os << ")";
        return;
      case Kind::And:
      case Kind::Or:
        os << (kind_ == Kind::And ? "(and " : "(or ");
        children_[0]->print(os);
        os << " ";
        children_[1]->print(os);
        os << ")";
        return;
    }
  }

  static void skip_ws(const std::string& s, size_t& pos) {
    while (pos < s.size() && s[pos] == ' ') ++pos;
  }

  static std::string read_token(const std::string& s, size_t& pos) {
    skip_ws(s, pos);
    size_t start = pos;
    while (pos < s.size() && s[pos] != ' ' && s[pos] != '(' && s[pos] != ')')
      ++pos;
    return s.substr(start, pos - start);
  }

  static ConceptFormula parse_node(const std::string& s, size_t& pos) {
    skip_ws(s, pos);
    if (pos >= s.size() || s[pos] != '(')
      throw ConfigError("expected '(' in formula: " + s);
    ++pos;
    std::string head = read_token(s, pos);
    ConceptFormula f;
    if (head == "=") {
      std::string fname = read_token(s, pos);
      std::string val = read_token(s, pos);
      if (fname.size() != 2 || fname[0] != 'f')
        throw ConfigError("bad predicate feature: " + fname);
      f = pred(fname[1] - '0', val == "1" ? 1 : 0);
    } else if (head == "not") {
      f = logical_not(parse_node(s, pos));
    } else if (head == "and") {
      ConceptFormula a = parse_node(s, pos);
      f = logical_and(std::move(a), parse_node(s, pos));
    } else if (head == "or") {
      ConceptFormula a = parse_node(s, pos);
      f = logical_or(std::move(a), parse_node(s, pos));
    } else {
      throw ConfigError("unknown formula head: " + head);
    }
    skip_ws(s, pos);
    if (pos >= s.size() || s[pos] != ')')
      throw ConfigError("expected ')' in formula: " + s);
    ++pos;
    return f;
  }

  Kind kind_ = Kind::Pred;
  int feature_ = 0;
  int value_ = 0;
  std::vector<std::shared_ptr<ConceptFormula>> children_;
};

// Grammar: S -> AND(S,S) | OR(S,S) | NOT(S) | Pred with probabilities
// (0.175, 0.175, 0.15, 0.5), uniform predicates, and a depth cap of 5.
// Formulas that label all 16 objects identically are resampled.
inline constexpr int kConceptGrammarMaxDepth = 5;
inline constexpr int kConceptMaxRejections = 1000;

namespace detail {

inline ConceptFormula sample_formula_node(Rng& rng, int depth) {
  if (depth >= kConceptGrammarMaxDepth) {
    int feature = static_cast<int>(uniform_int(rng, 0, 3));
    int value = static_cast<int>(uniform_int(rng, 0, 1));
    return ConceptFormula::pred(feature, value);
  }
  double r = uniform_real(rng, 0.0, 1.0);
  if (r < 0.175) {
    ConceptFormula a = sample_formula_node(rng, depth + 1);
    return ConceptFormula::logical_and(std::move(a),
                                       sample_formula_node(rng, depth + 1));
  }
  if (r < 0.35) {
    ConceptFormula a = sample_formula_node(rng, depth + 1);
    return ConceptFormula::logical_or(std::move(a),
                                      sample_formula_node(rng, depth + 1));
  }
  if (r < 0.5)
    return ConceptFormula::logical_not(sample_formula_node(rng, depth + 1));
  int feature = static_cast<int>(uniform_int(rng, 0, 3));
  int value = static_cast<int>(uniform_int(rng, 0, 1));
  return ConceptFormula::pred(feature, value);
}

}  // namespace detail

inline ConceptFormula sample_concept(Rng& rng) {
  for (int attempt = 0; attempt < kConceptMaxRejections; ++attempt) {
    ConceptFormula f = detail::sample_formula_node(rng, 0);
    int t = f.truth_count();
    if (t > 0 && t < ConceptObject::kNumObjects) return f;
  }
  throw ConfigError("concept sampler rejected " +
                    std::to_string(kConceptMaxRejections) +
                    " consecutive constant formulas");
}

// ---------------------------------------------------------------------------
// Episodes.
// ---------------------------------------------------------------------------

enum class TaskKind { Concept, Modular, Omniglot };
enum class LabelKind { ClassIndex, Regression };

inline const char* to_string(TaskKind t) {
  switch (t) {
    case TaskKind::Concept: return "concept";
    case TaskKind::Modular: return "modular";
    case TaskKind::Omniglot: return "omniglot";
  }
  return "?";
}

struct Episode {
  TaskKind task = TaskKind::Concept;
  Representation repr = Representation::Bits;
  LabelKind label_kind = LabelKind::ClassIndex;
  Tensor support_x;               // [n_support, ...]
  std::vector<double> support_y;  // class indices or noisy targets
  Tensor query_x;                 // [n_query, ...]
  std::vector<double> query_y;

  // Task descriptor; which fields apply depends on `task`.
  std::string formula;                  // concept
  int modulus = 0;                      // modular
  std::vector<std::string> class_names; // omniglot, one per class index

  std::vector<int> support_labels() const { return to_labels(support_y); }
  std::vector<int> query_labels() const { return to_labels(query_y); }

  std::string describe() const {
    switch (task) {
      case TaskKind::Concept: return "concept " + formula;
      case TaskKind::Modular: return "modulus " + std::to_string(modulus);
      case TaskKind::Omniglot:
        return "omniglot " +
               (class_names.empty() ? std::string("?") : class_names[0]) +
               " ...";
    }
    return "?";
  }

 private:
  static std::vector<int> to_labels(const std::vector<double>& v) {
    std::vector<int> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<int>(v[i]);
    return out;
  }
};

namespace detail {

inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: empty input");
  int64_t per = rows[0].numel();
  std::vector<double> data;
  data.reserve(static_cast<size_t>(per) * rows.size());
  for (const Tensor& r : rows) {
    if (r.numel() != per) throw ShapeError("stack_rows: ragged rows");
    data.insert(data.end(), r.data().begin(), r.data().end());
  }
  Shape s;
  s.push_back(static_cast<int64_t>(rows.size()));
  for (int64_t d : rows[0].shape()) s.push_back(d);
  return Tensor(std::move(s), std::move(data));
}

inline Tensor encode_concepts(const std::vector<int>& codes,
                              Representation repr) {
  std::vector<Tensor> rows;
  rows.reserve(codes.size());
  for (int code : codes) {
    ConceptObject o = ConceptObject::from_code(code);
    rows.push_back(repr == Representation::Bits ? bits_concept(o)
                                                : render_concept(o));
  }
  return stack_rows(rows);
}

inline Tensor encode_numbers(const std::vector<int64_t>& xs,
                             Representation repr) {
  std::vector<Tensor> rows;
  rows.reserve(xs.size());
  for (int64_t x : xs)
    rows.push_back(repr == Representation::Bits ? bits_number(x)
                                                : render_number(x));
  return stack_rows(rows);
}

}  // namespace detail

// Support objects drawn without replacement; the query is the full set of
// 16 objects in canonical order.
inline Episode concept_episode(const ConceptFormula& formula, int n_support,
                               Rng& rng, Representation repr) {
  if (n_support < 1 || n_support > ConceptObject::kNumObjects)
    throw ConfigError("concept_episode: n_support " +
                      std::to_string(n_support) + " outside [1,16]");
  Episode e;
  e.task = TaskKind::Concept;
  e.repr = repr;
  e.label_kind = LabelKind::ClassIndex;
  e.formula = formula.str();

  auto picks = sample_without_replacement(rng, ConceptObject::kNumObjects,
                                          n_support);
  std::vector<int> support_codes(picks.begin(), picks.end());
  std::vector<int> query_codes(ConceptObject::kNumObjects);
  for (int i = 0; i < ConceptObject::kNumObjects; ++i) query_codes[i] = i;

  e.support_x = detail::encode_concepts(support_codes, repr);
  e.query_x = detail::encode_concepts(query_codes, repr);
  for (int code : support_codes)
    e.support_y.push_back(
        formula.evaluate(ConceptObject::from_code(code)) ? 1.0 : 0.0);
  for (int code : query_codes)
    e.query_y.push_back(
        formula.evaluate(ConceptObject::from_code(code)) ? 1.0 : 0.0);
  return e;
}

// ---------------------------------------------------------------------------
// Modular arithmetic.
// ---------------------------------------------------------------------------

inline constexpr double kModNoiseSigma = 0.1;
inline constexpr int kModDomain = 100;
inline constexpr int kModMaxModulus = 40;

enum class ModuliScheme { OddEven, TwentyTwenty };

inline const char* to_string(ModuliScheme s) {
  return s == ModuliScheme::OddEven ? "odd_even" : "twenty_twenty";
}

// OddEven: train on odd moduli, test on even; TwentyTwenty: train on
// [1,20], test on [21,40].
inline std::pair<std::vector<int>, std::vector<int>> moduli_split(
    ModuliScheme scheme) {
  std::vector<int> train, test;
  if (scheme == ModuliScheme::OddEven) {
    for (int m = 1; m <= kModMaxModulus; ++m)
      (m % 2 == 1 ? train : test).push_back(m);
  } else {
    for (int m = 1; m <= kModMaxModulus; ++m)
      (m <= kModMaxModulus / 2 ? train : test).push_back(m);
  }
  return {train, test};
}

// Support x-values are distinct draws from [0,100) (all of them when
// n_support = 100); the query covers the whole domain with fresh noise.
inline Episode mod_episode(int modulus, int n_support, Rng& rng,
                           Representation repr) {
  if (modulus < 1 || modulus > kModMaxModulus)
    throw ConfigError("mod_episode: modulus " + std::to_string(modulus) +
                      " outside [1," + std::to_string(kModMaxModulus) + "]");
  if (n_support < 1 || n_support > kModDomain)
    throw ConfigError("mod_episode: n_support " + std::to_string(n_support) +
                      " outside [1," + std::to_string(kModDomain) + "]");
  Episode e;
  e.task = TaskKind::Modular;
  e.repr = repr;
  e.label_kind = LabelKind::Regression;
  e.modulus = modulus;

  std::vector<int64_t> xs =
      sample_without_replacement(rng, kModDomain, n_support);
  e.support_x = detail::encode_numbers(xs, repr);
  for (int64_t x : xs)
    e.support_y.push_back(static_cast<double>(x % modulus) +
                          normal(rng, 0.0, kModNoiseSigma));

  std::vector<int64_t> qs(kModDomain);
  std::iota(qs.begin(), qs.end(), 0);
  e.query_x = detail::encode_numbers(qs, repr);
  for (int64_t x : qs)
    e.query_y.push_back(static_cast<double>(x % modulus) +
                        normal(rng, 0.0, kModNoiseSigma));
  return e;
}

// ---------------------------------------------------------------------------
// Omniglot-style index.
// ---------------------------------------------------------------------------

enum class OmniglotSubset { All, Ancient, Asian, MiddleEastern, European };

inline const char* to_string(OmniglotSubset s) {
  switch (s) {
    case OmniglotSubset::All: return "all";
    case OmniglotSubset::Ancient: return "ancient";
    case OmniglotSubset::Asian: return "asian";
    case OmniglotSubset::MiddleEastern: return "middle_eastern";
    case OmniglotSubset::European: return "european";
  }
  return "?";
}

struct OmniglotIndex {
  struct Character {
    std::string alphabet;
    std::string name;
    std::vector<Tensor> exemplars;  // each [1,32,32], values in [0,1]
  };
  std::vector<Character> characters;  // sorted by (alphabet, name)
  // alphabet -> categories; an alphabet may belong to several.
  std::map<std::string, std::set<std::string>> categories;
  bool synthetic = false;

  std::set<std::string> alphabets() const {
    std::set<std::string> a;
    for (const auto& c : characters) a.insert(c.alphabet);
    return a;
  }

  void validate(int min_exemplars = 6) const {
    for (const auto& c : characters)
      if (static_cast<int>(c.exemplars.size()) < min_exemplars)
        throw DataError("character " + c.alphabet + "/" + c.name + " has " +
                        std::to_string(c.exemplars.size()) +
                        " exemplars, need at least " +
                        std::to_string(min_exemplars));
  }

  // Character indices whose alphabet belongs to the subset. Fictional
  // alphabets stay in All but are excluded from named categories by the map.
  std::vector<int> pool(OmniglotSubset subset) const {
    std::vector<int> out;
    for (size_t i = 0; i < characters.size(); ++i) {
      if (subset == OmniglotSubset::All) {
        out.push_back(static_cast<int>(i));
        continue;
      }
      auto it = categories.find(characters[i].alphabet);
      if (it == categories.end()) continue;
      if (it->second.count(to_string(subset)))
        out.push_back(static_cast<int>(i));
    }
    return out;
  }
};

// Default alphabet->category assignment for the 30 background alphabets.
// The published counts are 12 Ancient, 11 Asian, 7 Middle Eastern and
// 5 European, with the two fictional alphabets outside every category;
// alphabets may appear in several categories.
// Uncategorized: Blackfoot, Inuktitut, Ojibwe (Canadian Aboriginal
// syllabics fit none of the four regions).
inline const char* kDefaultOmniglotCategories =
    R"(Alphabet_of_the_Magi	fictional
Anglo-Saxon_Futhorc	ancient
Anglo-Saxon_Futhorc	european
Arcadian	ancient
Armenian	ancient
Armenian	middle_eastern
Asomtavruli_(Georgian)	ancient
Balinese	asian
Bengali	asian
Braille	european
Burmese_(Myanmar)	asian
Cyrillic	european
Early_Aramaic	ancient
Early_Aramaic	middle_eastern
Futurama	fictional
Grantha	ancient
Grantha	asian
Greek	ancient
Greek	european
Gujarati	asian
Hebrew	ancient
Hebrew	middle_eastern
Japanese_(hiragana)	asian
Japanese_(katakana)	asian
Korean	asian
Latin	ancient
Latin	european
Malay_(Jawi_-_Arabic)	asian
Malay_(Jawi_-_Arabic)	middle_eastern
Mkhedruli_(Georgian)	ancient
N_Ko	middle_eastern
Sanskrit	asian
Syriac_(Estrangelo)	ancient
Syriac_(Estrangelo)	middle_eastern
Tagalog	asian
Tifinagh	ancient
Tifinagh	middle_eastern
)";

inline std::map<std::string, std::set<std::string>> parse_category_map(
    const std::string& text) {
  std::map<std::string, std::set<std::string>> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError("category map line " + std::to_string(lineno) +
                      " is not alphabet<TAB>category: " + line);
    out[line.substr(0, tab)].insert(line.substr(tab + 1));
  }
  return out;
}

// 20 distinct characters from the pool, k_shot support and n_query query
// exemplars per character; class indices follow the sampling permutation.
inline Episode omniglot_episode(const OmniglotIndex& index,
                                const std::vector<int>& pool, Rng& rng,
                                int n_way = 20, int k_shot = 5,
                                int n_query = 5) {
  if (static_cast<int>(pool.size()) < n_way)
    throw DataError("omniglot pool of " + std::to_string(pool.size()) +
                    " characters cannot support " + std::to_string(n_way) +
                    "-way episodes");
  Episode e;
  e.task = TaskKind::Omniglot;
  e.repr = Representation::Image;
  e.label_kind = LabelKind::ClassIndex;

  auto picks = sample_without_replacement(
      rng, static_cast<int64_t>(pool.size()), n_way);
  std::vector<Tensor> support_rows, query_rows;
  for (int cls = 0; cls < n_way; ++cls) {
    const auto& ch =
        index.characters[static_cast<size_t>(pool[static_cast<size_t>(
            picks[static_cast<size_t>(cls)])])];
    int avail = static_cast<int>(ch.exemplars.size());
    if (avail < k_shot + n_query)
      throw DataError("character " + ch.alphabet + "/" + ch.name + " has " +
                      std::to_string(avail) + " exemplars, need " +
                      std::to_string(k_shot + n_query));
    e.class_names.push_back(ch.alphabet + "/" + ch.name);
    auto ex = sample_without_replacement(rng, avail, k_shot + n_query);
    for (int j = 0; j < k_shot; ++j) {
      support_rows.push_back(ch.exemplars[static_cast<size_t>(ex[j])]);
      e.support_y.push_back(cls);
    }
    for (int j = k_shot; j < k_shot + n_query; ++j) {
      query_rows.push_back(ch.exemplars[static_cast<size_t>(ex[j])]);
      e.query_y.push_back(cls);
    }
  }
  e.support_x = detail::stack_rows(support_rows);
  e.query_x = detail::stack_rows(query_rows);
  return e;
}

// ---------------------------------------------------------------------------
// Synthetic glyphs: random polylines rasterized at 32x32. Useful for
// exercising the episodic machinery offline; never a stand-in for results
// that claim Omniglot semantics.
// ---------------------------------------------------------------------------

namespace detail {

inline void draw_segment(std::vector<double>& img, double x0, double y0,
                         double x1, double y1) {
  int steps = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))
              + 1;
  for (int s = 0; s <= steps; ++s) {
    double t = static_cast<double>(s) / steps;
    int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
    int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        int px = x + dx, py = y + dy;
        if (px >= 0 && px < kImageSize && py >= 0 && py < kImageSize)
          img[static_cast<size_t>(py * kImageSize + px)] = 1.0;
      }
  }
}

}  // namespace detail

inline OmniglotIndex synthetic_glyph_index(uint64_t seed, int n_alphabets = 6,
                                           int chars_per_alphabet = 12,
                                           int exemplars_per_char = 12) {
  OmniglotIndex index;
  index.synthetic = true;
  Rng rng(derive_seed(seed, "synthetic_glyphs"));
  for (int a = 0; a < n_alphabets; ++a) {
    std::string alphabet = "synthetic_" + std::to_string(a);
    for (int c = 0; c < chars_per_alphabet; ++c) {
      OmniglotIndex::Character ch;
      ch.alphabet = alphabet;
      ch.name = "character" + std::to_string(c);
      // A character is a fixed set of strokes; exemplars jitter the
      // endpoints and shift the whole glyph slightly.
      int n_strokes = static_cast<int>(uniform_int(rng, 4, 7));
      std::vector<std::array<double, 4>> strokes;
      for (int s = 0; s < n_strokes; ++s)
        strokes.push_back({uniform_real(rng, 4, 27), uniform_real(rng, 4, 27),
                           uniform_real(rng, 4, 27),
                           uniform_real(rng, 4, 27)});
      for (int ex = 0; ex < exemplars_per_char; ++ex) {
        std::vector<double> img(kImageSize * kImageSize, 0.0);
        double ox = uniform_real(rng, -2, 2), oy = uniform_real(rng, -2, 2);
        for (const auto& s : strokes) {
          double jx0 = uniform_real(rng, -1, 1), jy0 = uniform_real(rng, -1, 1);
          double jx1 = uniform_real(rng, -1, 1), jy1 = uniform_real(rng, -1, 1);
          detail::draw_segment(img, s[0] + ox + jx0, s[1] + oy + jy0,
                               s[2] + ox + jx1, s[3] + oy + jy1);
        }
        ch.exemplars.emplace_back(Shape{1, kImageSize, kImageSize},
                                  std::move(img));
      }
      index.characters.push_back(std::move(ch));
    }
  }
  // Spread synthetic alphabets over the named categories so subset
  // plumbing is exercisable offline.
  const char* cats[] = {"ancient", "asian", "middle_eastern", "european"};
  for (int a = 0; a < n_alphabets; ++a)
    index.categories["synthetic_" + std::to_string(a)].insert(cats[a % 4]);
  return index;
}

}  // namespace metabias
