#include <catch2/catch_amalgamated.hpp>

#include <ptrag/selector.hpp>

#include "support/gradcheck.hpp"

#include <cmath>

using namespace ptrag;
using ptrag_test::max_grad_rel_err;

TEST_CASE("gumbel sampling") {
  SECTION("inverse CDF fixed point: u = 1/e gives g = 0") {
    double u = 1.0 / std::exp(1.0);
    REQUIRE(-std::log(-std::log(u)) == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("small u produces large positive draws") {
    REQUIRE(-std::log(-std::log(1e-12)) < -std::log(-std::log(0.5)));
    REQUIRE(-std::log(-std::log(1.0 - 1e-12)) > 20.0);
  }
  SECTION("empirical mean approaches the Euler-Mascheroni constant") {
    SplitMix64 rng(123);
    Tensor g = sample_gumbel({1000000}, rng);
    double mean = 0.0;
    for (double v : g.value()) mean += v;
    mean /= static_cast<double>(g.size());
    REQUIRE(mean == Catch::Approx(0.5772156649015329).margin(0.01));
  }
}

TEST_CASE("gumbel_softmax_select") {
  SECTION("saturated logits select deterministically") {
    Tensor logits = Tensor::from_data({1, 1, 2}, {-10.0, 10.0});  // exclude, include
    auto mask = gumbel_softmax_select(logits, 0.5, nullptr, {.deterministic_noise = true});
    REQUIRE(mask.hard.value() == std::vector<double>{1.0});
    REQUIRE(mask.soft.value()[0] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(mask.combined.value() == std::vector<double>{1.0});
  }
  SECTION("equal logits: soft is exactly one half, tie breaks to include") {
    Tensor logits = Tensor::from_data({1, 1, 2}, {0.3, 0.3});
    auto mask = gumbel_softmax_select(logits, 1.0, nullptr, {.deterministic_noise = true});
    REQUIRE(mask.soft.value()[0] == 0.5);
    REQUIRE(mask.hard.value()[0] == 1.0);
  }
  SECTION("include and exclude probabilities sum to one") {
    SplitMix64 rng(7);
    std::vector<double> v(2 * 3 * 2);
    for (double& x : v) x = rng.next_gaussian();
    Tensor logits = Tensor::from_data({2, 3, 2}, v);
    SplitMix64 noise_rng(8);
    auto mask = gumbel_softmax_select(logits, 0.5, &noise_rng);
    Tensor noise;  // recompute the exclude channel directly
    SplitMix64 noise_rng2(8);
    noise = sample_gumbel({2, 3, 2}, noise_rng2);
    for (std::size_t i = 0; i < 6; ++i) {
      double inc = (v[2 * i + 1] + noise.value()[2 * i + 1]) / 0.5;
      double exc = (v[2 * i] + noise.value()[2 * i]) / 0.5;
      double m = std::max(inc, exc);
      double zi = std::exp(inc - m), ze = std::exp(exc - m);
      double p_inc = zi / (zi + ze);
      REQUIRE(mask.soft.value()[i] == Catch::Approx(p_inc).margin(1e-12));
      REQUIRE(mask.soft.value()[i] + ze / (zi + ze) == Catch::Approx(1.0).margin(1e-12));
      REQUIRE(mask.soft.value()[i] > 0.0);
      REQUIRE(mask.soft.value()[i] < 1.0);
    }
  }
  SECTION("hard values are exactly binary and match the perturbed argmax") {
    SplitMix64 rng(99);
    std::vector<double> v(4 * 5 * 2);
    for (double& x : v) x = rng.next_gaussian();
    Tensor logits = Tensor::from_data({4, 5, 2}, v);
    SplitMix64 noise_rng(100);
    Tensor noise = sample_gumbel({4, 5, 2}, noise_rng);
    auto mask = gumbel_softmax_select(logits, 0.5, nullptr, {.frozen_noise = &noise});
    for (std::size_t i = 0; i < 20; ++i) {
      double h = mask.hard.value()[i];
      REQUIRE((h == 0.0 || h == 1.0));
      bool include = v[2 * i + 1] + noise.value()[2 * i + 1] >= v[2 * i] + noise.value()[2 * i];
      REQUIRE(h == (include ? 1.0 : 0.0));
    }
  }
  SECTION("temperature rejected when non-positive") {
    Tensor logits = Tensor::zeros({1, 1, 2});
    REQUIRE_THROWS(gumbel_softmax_select(logits, 0.0, nullptr, {.deterministic_noise = true}));
    REQUIRE_THROWS(gumbel_softmax_select(logits, -1.0, nullptr, {.deterministic_noise = true}));
  }
  SECTION("non-finite logits rejected") {
    Tensor logits = Tensor::from_data({1, 1, 2}, {0.0, std::nan("")});
    REQUIRE_THROWS(gumbel_softmax_select(logits, 0.5, nullptr, {.deterministic_noise = true}));
  }
}

TEST_CASE("soft-hard gap shrinks monotonically as tau decreases") {
  SplitMix64 rng(31);
  std::vector<double> v(6 * 4 * 2);
  for (double& x : v) x = rng.next_gaussian();
  Tensor logits = Tensor::from_data({6, 4, 2}, v);
  SplitMix64 noise_rng(32);
  Tensor noise = sample_gumbel({6, 4, 2}, noise_rng);

  double previous_gap = std::numeric_limits<double>::infinity();
  for (double tau : {1.0, 0.5, 0.1, 0.01}) {
    auto mask = gumbel_softmax_select(logits, tau, nullptr, {.frozen_noise = &noise});
    double gap = 0.0;
    for (std::size_t i = 0; i < mask.soft.size(); ++i) {
      gap = std::max(gap, std::fabs(mask.soft.value()[i] - mask.hard.value()[i]));
    }
    REQUIRE(gap <= previous_gap);
    previous_gap = gap;
  }
}

TEST_CASE("gradient of the soft path matches finite differences under frozen noise") {
  SplitMix64 rng(55);
  std::vector<double> v(3 * 4 * 2);
  for (double& x : v) x = rng.next_gaussian();
  Tensor logits = Tensor::from_data({3, 4, 2}, v, true);
  SplitMix64 noise_rng(56);
  Tensor noise = sample_gumbel({3, 4, 2}, noise_rng);
  auto f = [&] {
    auto mask = gumbel_softmax_select(logits, 0.7, nullptr, {.frozen_noise = &noise});
    return sum_all(mask.soft);
  };
  REQUIRE(max_grad_rel_err(f, {logits}) < 1e-5);
}

TEST_CASE("straight-through: value path is hard, gradient path is soft") {
  SplitMix64 rng(77);
  std::vector<double> v(2 * 3 * 2);
  for (double& x : v) x = rng.next_gaussian();
  SplitMix64 noise_rng(78);
  Tensor noise = sample_gumbel({2, 3, 2}, noise_rng);
  std::vector<double> cv(6);
  for (double& x : cv) x = rng.next_gaussian();
  Tensor coeffs = Tensor::from_data({2, 3}, cv);

  Tensor logits_a = Tensor::from_data({2, 3, 2}, v, true);
  Tensor logits_b = Tensor::from_data({2, 3, 2}, v, true);

  double value_st, value_soft;
  {
    Tape tape;
    TapeScope scope(tape);
    auto mask = gumbel_softmax_select(logits_a, 0.5, nullptr, {.frozen_noise = &noise});
    Tensor loss = sum_all(mul(mask.combined, coeffs));
    value_st = loss.item();
    backward(loss);
  }
  {
    Tape tape;
    TapeScope scope(tape);
    auto mask = gumbel_softmax_select(logits_b, 0.5, nullptr, {.frozen_noise = &noise});
    Tensor loss = sum_all(mul(mask.soft, coeffs));
    value_soft = loss.item();
    backward(loss);
  }
  REQUIRE(logits_a.grad() == logits_b.grad());  // bitwise
  REQUIRE(value_st != value_soft);              // the value paths differ
}

TEST_CASE("empirical include rate matches the logistic choice probability") {
  const double a = 0.9, b = 0.2;  // include, exclude logits
  Tensor logits = Tensor::from_data({1, 1, 2}, {b, a});
  SplitMix64 rng(2024);
  int included = 0;
  const int trials = 100000;
  for (int t = 0; t < trials; ++t) {
    auto mask = gumbel_softmax_select(logits, 0.5, &rng);
    included += mask.hard.value()[0] == 1.0 ? 1 : 0;
  }
  double expected = 1.0 / (1.0 + std::exp(-(a - b)));
  REQUIRE(static_cast<double>(included) / trials == Catch::Approx(expected).margin(0.01));
}
