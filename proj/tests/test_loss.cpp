#include <catch2/catch.hpp>

#include <cmath>

#include "stav/loss.hpp"
#include "support.hpp"

using namespace stav;
using testsupport::fd_check;

namespace {

Tensor random_mask(Rng& rng, int h, int w, double lo = 0.02, double hi = 0.98) {
  return Tensor::random_uniform({1, h, w}, rng, lo, hi);
}

}  // namespace

TEST_CASE("cross_entropy values") {
  Tape tape;
  CHECK(cross_entropy(tape, Tensor::zeros({4}), 1).value() == Approx(std::log(4.0)).margin(1e-12));

  const double expected = std::log1p(std::exp(-20.0));  // closed-form log-sum-exp
  CHECK(cross_entropy(tape, Tensor({2}, {10.0, -10.0}), 0).value() == Approx(expected).margin(1e-15));
  CHECK(cross_entropy(tape, Tensor({2}, {10.0, -10.0}), 0).value() == Approx(2.061e-9).margin(1e-11));

  CHECK_THROWS_AS(cross_entropy(tape, Tensor::zeros({4}), 4), usage_error);
  CHECK_THROWS_AS(cross_entropy(tape, Tensor::zeros({4}), -1), usage_error);
}

TEST_CASE("cross_entropy gradient is softmax minus onehot") {
  Rng rng(3);
  Tensor logits = Tensor::random_uniform({5}, rng, -2.0, 2.0);
  logits.enable_grad();
  logits.zero_grad();
  {
    Tape tape;
    Tensor ce = cross_entropy(tape, logits, 2);
    tape.backward(ce);
  }
  Tape t2;
  Tensor soft = softmax(t2, logits);
  for (int i = 0; i < 5; ++i) CHECK(logits.grad()[i] == Approx(soft.data()[i] - (i == 2 ? 1.0 : 0.0)).margin(1e-12));

  auto r = fd_check({{"logits", &logits}}, [&](Tape& t) { return cross_entropy(t, logits, 2); });
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("tv_loss values") {
  Tape tape;
  CHECK(tv_loss(tape, {Tensor::full({1, 4, 5}, 0.7)}).value() == 0.0);
  // [[0,1],[0,1]]: two horizontal unit steps, no vertical variation.
  CHECK(tv_loss(tape, {Tensor({1, 2, 2}, {0, 1, 0, 1})}).value() == Approx(2.0));
  // Sums across masks.
  CHECK(tv_loss(tape, {Tensor({1, 2, 2}, {0, 1, 0, 1}), Tensor({1, 2, 2}, {0, 1, 0, 1})}).value() == Approx(4.0));
}

TEST_CASE("tv_loss is non-negative and flip/transpose invariant") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor m = random_mask(rng, 5, 5);
    Tape tape;
    const double base = tv_loss(tape, {m}).value();
    CHECK(base >= 0.0);

    Tensor hflip({1, 5, 5}), vflip({1, 5, 5}), transposed({1, 5, 5});
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) {
        hflip.data()[y * 5 + (4 - x)] = m.data()[y * 5 + x];
        vflip.data()[(4 - y) * 5 + x] = m.data()[y * 5 + x];
        transposed.data()[x * 5 + y] = m.data()[y * 5 + x];
      }
    CHECK(tv_loss(tape, {hflip}).value() == Approx(base));
    CHECK(tv_loss(tape, {vflip}).value() == Approx(base));
    CHECK(tv_loss(tape, {transposed}).value() == Approx(base));
  }
}

TEST_CASE("tv_loss subgradient matches finite differences") {
  Rng rng(11);
  Tensor m1 = random_mask(rng, 4, 4);
  Tensor m2 = random_mask(rng, 4, 4);  // random masks have no equal neighbors
  auto r = fd_check({{"m1", &m1}, {"m2", &m2}}, [&](Tape& t) { return tv_loss(t, {m1, m2}); }, 1e-4);
  CAPTURE(r.worst);
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("contrast_loss values") {
  Tape tape;
  CHECK(contrast_loss(tape, {Tensor::zeros({1, 3, 3})}).value() == 0.0);
  CHECK(contrast_loss(tape, {Tensor::ones({1, 4, 5})}).value() == Approx(-10.0));  // -P/2 with P=20
  CHECK(contrast_loss(tape, {Tensor({1, 1, 2}, {0.8, 0.2})}).value() == Approx(-0.3).margin(1e-15));

  // At exactly 0.5 the strict indicator gives B = 0.
  Tensor half = Tensor::full({1, 2, 2}, 0.5);
  const auto b = binarize_mask(half);
  for (double v : b) CHECK(v == 0.0);
  CHECK(contrast_loss(tape, {half}).value() == Approx(0.25 * 4));
}

TEST_CASE("contrast_loss is minimized at the all-ones constant mask") {
  Tape tape;
  const double at_one = contrast_loss(tape, {Tensor::ones({1, 3, 3})}).value();
  for (double level : {0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 0.99}) {
    CHECK(at_one <= contrast_loss(tape, {Tensor::full({1, 3, 3}, level)}).value());
  }
}

TEST_CASE("contrast_loss gradient matches finite differences away from 0.5") {
  Rng rng(13);
  Tensor m({1, 4, 4});
  for (std::int64_t i = 0; i < m.size(); ++i) {
    const double u = rng.uniform();
    m.data()[i] = u < 0.5 ? rng.uniform(0.05, 0.45) : rng.uniform(0.55, 0.95);
  }
  auto r = fd_check({{"m", &m}}, [&](Tape& t) { return contrast_loss(t, {m}); }, 1e-4);
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("unimodal_loss values") {
  Tape tape;
  SECTION("log-concave rows give zero") {
    std::vector<double> row{0.1, 0.2, 0.4, 0.2, 0.1};
    std::vector<double> data;
    for (int t = 0; t < 5; ++t) data.insert(data.end(), row.begin(), row.end());
    CHECK(unimodal_loss(tape, Tensor({5, 5}, data)).value() == 0.0);
  }
  SECTION("single dipped row") {
    const double z = 1.0 / 0.7;
    Tensor w({1, 3}, {0.3 * z, 0.1 * z, 0.3 * z});
    CHECK(unimodal_loss(tape, w).value() == Approx(0.08 / 0.49).margin(1e-12));
    CHECK(unimodal_loss(tape, w).value() == Approx(0.16327).margin(1e-5));
  }
  SECTION("uniform rows give zero") {
    CHECK(unimodal_loss(tape, Tensor::full({4, 4}, 0.25)).value() == 0.0);
  }
  SECTION("fewer than three columns gives zero") {
    CHECK(unimodal_loss(tape, Tensor::full({2, 2}, 0.5)).value() == 0.0);
  }
}

TEST_CASE("unimodal_loss gradient matches finite differences") {
  Rng rng(17);
  Tensor w = Tensor::random_uniform({4, 6}, rng, 0.05, 0.95);
  auto r = fd_check({{"w", &w}}, [&](Tape& t) { return unimodal_loss(t, w); }, 1e-5);
  CAPTURE(r.worst);
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("losses match the brute-force oracles") {
  Rng rng(19);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 3 + static_cast<int>(rng.below(4));
    const int w = 3 + static_cast<int>(rng.below(4));
    std::vector<Tensor> masks;
    std::vector<std::vector<double>> raw;
    for (int i = 0; i < 3; ++i) {
      masks.push_back(random_mask(rng, h, w, 0.0, 1.0));
      raw.push_back(masks.back().values());
    }
    Tape tape;
    CHECK(tv_loss(tape, masks).value() == Approx(testsupport::tv_brute(raw, h, w)).epsilon(1e-12));
    CHECK(contrast_loss(tape, masks).value() == Approx(testsupport::contrast_brute(raw)).margin(1e-12));

    const int n = 3 + static_cast<int>(rng.below(5));
    Tensor attn = Tensor::random_uniform({n, n}, rng, 0.0, 1.0);
    std::vector<std::vector<double>> rows;
    for (int t = 0; t < n; ++t)
      rows.emplace_back(attn.data() + t * n, attn.data() + (t + 1) * n);
    CHECK(unimodal_loss(tape, attn).value() == Approx(testsupport::unimodal_brute(rows)).margin(1e-12));
  }
}

TEST_CASE("total_loss composition") {
  Rng rng(23);
  Tensor logits = Tensor::random_uniform({3}, rng, -1.0, 1.0);
  std::vector<Tensor> masks{random_mask(rng, 4, 4), random_mask(rng, 4, 4)};
  Tensor attn = Tensor::random_uniform({4, 4}, rng, 0.01, 0.5);

  SECTION("zero weights reduce to cross entropy alone") {
    Tape tape;
    auto b = total_loss(tape, logits, 1, masks, attn, LossWeights{0.0, 0.0, 0.0});
    CHECK(b.total == b.ce);  // exact
  }
  SECTION("weighted identity holds to 1e-12") {
    Tape tape;
    const LossWeights lw{0.3, 0.7, 1.9};
    auto b = total_loss(tape, logits, 1, masks, attn, lw);
    CHECK(std::fabs(b.total - (b.ce + lw.tv * b.tv + lw.contrast * b.contrast + lw.unimodal * b.unimodal)) < 1e-12);
  }
  SECTION("single backward yields gradients through every term") {
    logits.enable_grad();
    for (auto& m : masks) m.enable_grad();
    attn.enable_grad();
    auto r = fd_check({{"logits", &logits}, {"m0", &masks[0]}, {"m1", &masks[1]}, {"attn", &attn}}, [&](Tape& t) {
      return total_loss(t, logits, 1, masks, attn, LossWeights{0.5, 0.5, 0.5}).node;
    }, 1e-5);
    CAPTURE(r.worst);
    CHECK(r.max_rel < 1e-3);
  }
}
