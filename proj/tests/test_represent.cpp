#include <set>

#include "doctest.h"
#include "metabias/gradcheck.hpp"
#include "metabias/represent.hpp"

using namespace metabias;

TEST_CASE("concept object code bijection") {
  std::set<int> seen;
  for (int code = 0; code < 16; ++code) {
    ConceptObject o = ConceptObject::from_code(code);
    CHECK(o.code() == code);
    seen.insert(o.code());
  }
  CHECK(seen.size() == 16);

  ConceptObject o = ConceptObject::from_code(0b1010);
  Tensor bits = bits_concept(o);
  CHECK(bits.value(0) == 1.0);
  CHECK(bits.value(1) == 0.0);
  CHECK(bits.value(2) == 1.0);
  CHECK(bits.value(3) == 0.0);
}

TEST_CASE("bits_number big endian") {
  Tensor five = bits_number(5);
  std::vector<double> expected{0, 0, 0, 0, 0, 1, 0, 1};
  for (int i = 0; i < 8; ++i) CHECK(five.value(i) == expected[i]);
  Tensor zero = bits_number(0);
  for (int i = 0; i < 8; ++i) CHECK(zero.value(i) == 0.0);
  CHECK_THROWS_AS(bits_number(256), ConfigError);
  CHECK_THROWS_AS(bits_number(-1), ConfigError);
}

TEST_CASE("render_concept is deterministic and injective") {
  for (int a = 0; a < 16; ++a) {
    Tensor ia = render_concept(ConceptObject::from_code(a));
    Tensor ia2 = render_concept(ConceptObject::from_code(a));
    REQUIRE(ia.numel() == ia2.numel());
    bool same = true;
    for (int64_t i = 0; i < ia.numel(); ++i)
      same = same && ia.value(i) == ia2.value(i);
    CHECK(same);
    for (int b = a + 1; b < 16; ++b) {
      Tensor ib = render_concept(ConceptObject::from_code(b));
      bool differ = false;
      for (int64_t i = 0; i < ia.numel() && !differ; ++i)
        differ = ia.value(i) != ib.value(i);
      CHECK(differ);
    }
  }
}

TEST_CASE("red solid big square is red") {
  ConceptObject o;
  o.red = true;
  o.square = true;
  o.big = true;
  o.striped = false;
  Tensor img = render_concept(o);
  double red_mean = 0, blue_mean = 0;
  int64_t plane = 32 * 32;
  for (int64_t i = 0; i < plane; ++i) {
    red_mean += img.value(i);
    blue_mean += img.value(2 * plane + i);
  }
  CHECK(red_mean > blue_mean);
  for (int64_t i = 0; i < img.numel(); ++i) {
    CHECK(img.value(i) >= 0.0);
    CHECK(img.value(i) <= 1.0);
  }
}

TEST_CASE("render_number injective over the domain") {
  std::vector<Tensor> imgs;
  for (int x = 0; x < 100; ++x) imgs.push_back(render_number(x));
  for (int a = 0; a < 100; ++a) {
    for (int b = a + 1; b < 100; ++b) {
      bool differ = false;
      for (int64_t i = 0; i < imgs[a].numel() && !differ; ++i)
        differ = imgs[a].value(i) != imgs[b].value(i);
      REQUIRE(differ);
    }
    for (int64_t i = 0; i < imgs[a].numel(); ++i) {
      REQUIRE(imgs[a].value(i) >= 0.0);
      REQUIRE(imgs[a].value(i) <= 1.0);
    }
  }
  CHECK_THROWS_AS(render_number(100), ConfigError);
}

TEST_CASE("patchify shape and round trip") {
  Rng rng(21);
  Tensor img = random_tensor(rng, {2, 3, 32, 32});
  Tensor tokens = patchify(img);
  CHECK(tokens.dim(0) == 2);
  CHECK(tokens.dim(1) == 64);
  CHECK(tokens.dim(2) == 48);

  Tensor back = unpatchify(tokens, 3);
  for (int64_t i = 0; i < img.numel(); ++i)
    REQUIRE(back.value(i) == img.value(i));

  Tensor flat = Tensor::full({1, 1, 32, 32}, 0.7);
  Tensor ft = patchify(flat);
  for (int64_t i = 0; i < ft.numel(); ++i) REQUIRE(ft.value(i) == 0.7);

  CHECK_THROWS_AS(patchify(Tensor::zeros({1, 1, 16, 16})), ShapeError);
}

TEST_CASE("adapt maps representations onto families") {
  Rng rng(22);
  Tensor imgs = random_tensor(rng, {5, 3, 32, 32});
  Tensor bits = random_tensor(rng, {5, 8});

  Tensor mlp_in = adapt(imgs, Representation::Image, Family::MLP);
  CHECK(mlp_in.shape() == Shape{5, 3072});

  Tensor cnn_in = adapt(imgs, Representation::Image, Family::CNN);
  CHECK(cnn_in.shape() == Shape{5, 3, 32, 32});

  Tensor lstm_bits = adapt(bits, Representation::Bits, Family::LSTM);
  CHECK(lstm_bits.shape() == Shape{5, 8, 1});

  Tensor tf_img = adapt(imgs, Representation::Image, Family::Transformer);
  CHECK(tf_img.shape() == Shape{5, 64, 48});

  CHECK_THROWS_AS(adapt(bits, Representation::Bits, Family::CNN), SpecError);
}
