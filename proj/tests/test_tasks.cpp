#include <cmath>
#include <set>

#include "doctest.h"
#include "metabias/tasks.hpp"

using namespace metabias;

TEST_CASE("hand-built formulas label the truth table") {
  // f1 = 0 AND f3 = 1
  ConceptFormula f = ConceptFormula::logical_and(
      ConceptFormula::pred(1, 0), ConceptFormula::pred(3, 1));
  int count = 0;
  for (int code = 0; code < 16; ++code) {
    ConceptObject o = ConceptObject::from_code(code);
    bool expected = o.feature(1) == 0 && o.feature(3) == 1;
    CHECK(f.evaluate(o) == expected);
    count += f.evaluate(o);
  }
  CHECK(count == 4);

  ConceptFormula g = ConceptFormula::logical_not(ConceptFormula::pred(0, 1));
  int g_count = 0;
  for (int code = 0; code < 16; ++code)
    g_count += g.evaluate(ConceptObject::from_code(code));
  CHECK(g_count == 8);
}

TEST_CASE("formula string round trip") {
  Rng rng(31);
  for (int i = 0; i < 50; ++i) {
    ConceptFormula f = sample_concept(rng);
    ConceptFormula g = ConceptFormula::parse(f.str());
    for (int code = 0; code < 16; ++code) {
      ConceptObject o = ConceptObject::from_code(code);
      REQUIRE(f.evaluate(o) == g.evaluate(o));
    }
  }
  CHECK_THROWS_AS(ConceptFormula::parse("(xor (= f0 1) (= f1 0))"),
                  ConfigError);
}

TEST_CASE("sampled formulas are never constant") {
  Rng rng(32);
  int true_total = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    ConceptFormula f = sample_concept(rng);
    int t = f.truth_count();
    REQUIRE(t > 0);
    REQUIRE(t < 16);
    true_total += t;
  }
  // both labels occur with sizable frequency across the distribution
  double density = static_cast<double>(true_total) / (16.0 * draws);
  CHECK(density > 0.1);
  CHECK(density < 0.9);
}

TEST_CASE("concept labels match brute-force enumeration for 1000 formulas") {
  Rng rng(33);
  for (int i = 0; i < 1000; ++i) {
    ConceptFormula f = sample_concept(rng);
    Rng erng(derive_seed(33, "episode", i));
    Episode e = concept_episode(f, 10, erng, Representation::Bits);
    // re-derive every label from the stored descriptor
    ConceptFormula parsed = ConceptFormula::parse(e.formula);
    REQUIRE(e.query_y.size() == 16);
    for (int q = 0; q < 16; ++q) {
      int code = 0;
      for (int b = 0; b < 4; ++b)
        code |= static_cast<int>(e.query_x.value(q * 4 + b)) << (3 - b);
      REQUIRE(e.query_y[static_cast<size_t>(q)] ==
              (parsed.evaluate(ConceptObject::from_code(code)) ? 1.0 : 0.0));
    }
    for (size_t s = 0; s < e.support_y.size(); ++s) {
      int code = 0;
      for (int b = 0; b < 4; ++b)
        code |= static_cast<int>(e.support_x.value(
                    static_cast<int64_t>(s) * 4 + b)) << (3 - b);
      REQUIRE(e.support_y[s] ==
              (parsed.evaluate(ConceptObject::from_code(code)) ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("concept episode structure") {
  Rng rng(34);
  ConceptFormula f = sample_concept(rng);
  Episode e = concept_episode(f, 16, rng, Representation::Bits);
  // n_support = 16 exhausts the object set
  std::set<int> codes;
  for (int s = 0; s < 16; ++s) {
    int code = 0;
    for (int b = 0; b < 4; ++b)
      code |= static_cast<int>(e.support_x.value(s * 4 + b)) << (3 - b);
    codes.insert(code);
  }
  CHECK(codes.size() == 16);

  // query base rate equals the formula's truth-table density
  double base = 0;
  for (double y : e.query_y) base += y;
  CHECK(base == doctest::Approx(static_cast<double>(f.truth_count())));

  CHECK_THROWS_AS(concept_episode(f, 0, rng, Representation::Bits),
                  ConfigError);
  CHECK_THROWS_AS(concept_episode(f, 17, rng, Representation::Bits),
                  ConfigError);
}

TEST_CASE("moduli splits") {
  auto [odd_train, odd_test] = moduli_split(ModuliScheme::OddEven);
  CHECK(odd_train.size() == 20);
  CHECK(odd_test.size() == 20);
  for (int m : odd_train) CHECK(m % 2 == 1);
  for (int m : odd_test) CHECK(m % 2 == 0);
  CHECK(std::count(odd_train.begin(), odd_train.end(), 39) == 1);
  CHECK(std::count(odd_test.begin(), odd_test.end(), 40) == 1);

  auto [tt_train, tt_test] = moduli_split(ModuliScheme::TwentyTwenty);
  CHECK(tt_train.size() == 20);
  CHECK(tt_test.size() == 20);
  std::set<int> inter;
  for (int m : tt_train)
    if (std::count(tt_test.begin(), tt_test.end(), m)) inter.insert(m);
  CHECK(inter.empty());
  CHECK(tt_train.front() == 1);
  CHECK(tt_train.back() == 20);
  CHECK(tt_test.front() == 21);
  CHECK(tt_test.back() == 40);
}

TEST_CASE("mod episode values") {
  Rng rng(35);
  Episode e1 = mod_episode(1, 20, rng, Representation::Bits);
  for (double y : e1.query_y) CHECK(std::abs(y) < 0.6);  // 0 plus noise

  // noiseless target of x=7, m=3 is 1; find x=7 in the query (in order)
  Episode e3 = mod_episode(3, 20, rng, Representation::Bits);
  CHECK(e3.query_y[7] == doctest::Approx(1.0).epsilon(0.6));

  CHECK_THROWS_AS(mod_episode(0, 20, rng, Representation::Bits), ConfigError);
  CHECK_THROWS_AS(mod_episode(41, 20, rng, Representation::Bits), ConfigError);
  CHECK_THROWS_AS(mod_episode(5, 101, rng, Representation::Bits), ConfigError);
}

TEST_CASE("mod episode noise statistics") {
  Rng rng(36);
  double sum = 0, sumsq = 0;
  int64_t n = 0;
  while (n < 100000) {
    Episode e = mod_episode(static_cast<int>(uniform_int(rng, 1, 40)), 100,
                            rng, Representation::Bits);
    for (int x = 0; x < 100; ++x) {
      double eps = e.query_y[static_cast<size_t>(x)] - (x % e.modulus);
      sum += eps;
      sumsq += eps * eps;
      ++n;
    }
  }
  double mean = sum / static_cast<double>(n);
  double sd = std::sqrt(sumsq / static_cast<double>(n) - mean * mean);
  CHECK(std::abs(mean) < 0.005);
  CHECK(sd == doctest::Approx(kModNoiseSigma).epsilon(0.05));
}

TEST_CASE("episode determinism under fixed seed") {
  auto gen = [] {
    Rng rng(derive_seed(77, "episode-determinism"));
    ConceptFormula f = sample_concept(rng);
    Episode c = concept_episode(f, 7, rng, Representation::Image);
    Episode m = mod_episode(9, 40, rng, Representation::Bits);
    return std::make_pair(std::move(c), std::move(m));
  };
  auto [c1, m1] = gen();
  auto [c2, m2] = gen();
  CHECK(c1.formula == c2.formula);
  REQUIRE(c1.support_x.numel() == c2.support_x.numel());
  for (int64_t i = 0; i < c1.support_x.numel(); ++i)
    REQUIRE(c1.support_x.value(i) == c2.support_x.value(i));
  REQUIRE(m1.support_y.size() == m2.support_y.size());
  for (size_t i = 0; i < m1.support_y.size(); ++i)
    REQUIRE(m1.support_y[i] == m2.support_y[i]);
  for (size_t i = 0; i < m1.query_y.size(); ++i)
    REQUIRE(m1.query_y[i] == m2.query_y[i]);
}

TEST_CASE("default category map satisfies the published counts") {
  auto cats = parse_category_map(kDefaultOmniglotCategories);
  std::map<std::string, int> counts;
  for (const auto& [alphabet, set] : cats)
    for (const auto& c : set) counts[c]++;
  CHECK(counts["ancient"] == 12);
  CHECK(counts["asian"] == 11);
  CHECK(counts["middle_eastern"] == 7);
  CHECK(counts["european"] == 5);
  CHECK(counts["fictional"] == 2);
  CHECK(cats["Futurama"].count("fictional") == 1);
  CHECK(cats["Alphabet_of_the_Magi"].count("fictional") == 1);
}

TEST_CASE("synthetic omniglot episodes") {
  OmniglotIndex index = synthetic_glyph_index(5, /*n_alphabets=*/8,
                                              /*chars_per_alphabet=*/6,
                                              /*exemplars_per_char=*/12);
  index.validate();
  auto pool = index.pool(OmniglotSubset::All);
  CHECK(pool.size() == 48);

  Rng rng(40);
  Episode e = omniglot_episode(index, pool, rng);
  CHECK(e.support_y.size() == 100);
  CHECK(e.query_y.size() == 100);
  CHECK(e.class_names.size() == 20);
  // no character appears in two classes
  std::set<std::string> names(e.class_names.begin(), e.class_names.end());
  CHECK(names.size() == 20);
  CHECK(e.support_x.shape() == Shape{100, 1, 32, 32});

  // subset pools contain only their own alphabets
  auto ancient_pool = index.pool(OmniglotSubset::Ancient);
  for (int idx : ancient_pool) {
    const auto& ch = index.characters[static_cast<size_t>(idx)];
    CHECK(index.categories.at(ch.alphabet).count("ancient") == 1);
  }

  // a pool smaller than n_way is an error
  std::vector<int> tiny(pool.begin(), pool.begin() + 10);
  CHECK_THROWS_AS(omniglot_episode(index, tiny, rng), DataError);
}

TEST_CASE("chance accuracy for 20-way episodes is 5 percent") {
  CHECK(1.0 / 20.0 == doctest::Approx(0.05));
}
