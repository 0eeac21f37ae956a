#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "puredesk/backdoor.hpp"
#include "puredesk/diffusion.hpp"

using namespace puredesk;
using ad::Tensor;

TEST_CASE("make_schedule endpoints and small cases") {
  NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  CHECK(s.beta(1) == Catch::Approx(1e-4).epsilon(1e-12));
  CHECK(s.beta(1000) == Catch::Approx(0.02).epsilon(1e-12));

  NoiseSchedule one = make_schedule(1, 0.5, 0.5);
  CHECK(one.alpha_bar(1) == Catch::Approx(0.5).epsilon(1e-15));

  NoiseSchedule two = make_schedule(2, 0.1, 0.3);
  CHECK(two.alpha_bar(1) == Catch::Approx(0.9).epsilon(1e-15));
  CHECK(two.alpha_bar(2) == Catch::Approx(0.63).epsilon(1e-15));

  CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.3, 1.0), std::invalid_argument);
}

TEST_CASE("schedule algebra invariants") {
  for (const auto& s : {make_schedule(1000, 1e-4, 0.02), make_schedule(100, 1e-3, 0.2)}) {
    double prev_beta = 0.0;
    double prev_abar = 1.0;
    for (int t = 1; t <= s.T(); ++t) {
      CHECK(s.beta(t) > 0.0);
      CHECK(s.beta(t) < 1.0);
      CHECK(s.beta(t) >= prev_beta);
      CHECK(s.alpha_bar(t) < prev_abar);  // strictly decreasing
      // exact recurrence: alpha_bar is built as the running product
      CHECK(s.alpha_bar(t) == s.alpha(t) * s.alpha_bar_prev(t));
      prev_beta = s.beta(t);
      prev_abar = s.alpha_bar(t);
    }
    CHECK(s.posterior_var(1) == 0.0);
    CHECK(s.sigma(1) == 0.0);

    // sqrt(abar_t) equals the product of sqrt(alpha_i) to 1e-12
    double root_prod = 1.0;
    for (int t = 1; t <= s.T(); ++t) {
      root_prod *= std::sqrt(s.alpha(t));
      CHECK(oracles::rel_err(root_prod, std::sqrt(s.alpha_bar(t)), 1e-300) < 1e-12);
    }
  }
}

TEST_CASE("paper-scale schedule ends essentially at pure noise") {
  NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  // extended-precision product as the oracle
  long double abar = 1.0L;
  for (int t = 1; t <= 1000; ++t)
    abar *= 1.0L - (1e-4L + (0.02L - 1e-4L) * (t - 1) / 999.0L);
  CHECK(static_cast<double>(abar) < 1e-4);
  CHECK(oracles::rel_err(s.alpha_bar(1000), static_cast<double>(abar), 1e-300) < 1e-10);
  CHECK(std::sqrt(s.alpha_bar(1000)) < 0.01);
}

TEST_CASE("forward_sample endpoints") {
  NoiseSchedule s = make_schedule(50, 1e-3, 0.2);
  Rng rng(5);
  Tensor x0 = Tensor::from({1, 3, 2, 2}, oracles::random_vector(12, rng, -1, 1));
  Tensor zero = Tensor::zeros(x0.shape());
  const int t = 20;

  Tensor a = forward_sample(s, x0, t, zero);
  Tensor b = forward_sample(s, zero, t, x0);
  for (std::int64_t i = 0; i < x0.size(); ++i) {
    CHECK(a.at(i) == Catch::Approx(std::sqrt(s.alpha_bar(t)) * x0.at(i)).margin(1e-15));
    CHECK(b.at(i) == Catch::Approx(std::sqrt(1.0 - s.alpha_bar(t)) * x0.at(i)).margin(1e-15));
  }
  CHECK_THROWS_AS(forward_sample(s, x0, 0, zero), std::out_of_range);
  CHECK_THROWS_AS(forward_sample(s, x0, 51, zero), std::out_of_range);
}

TEST_CASE("iterated single-step transitions match direct sampling in distribution") {
  // Monte-Carlo oracle: iterate x <- sqrt(1-beta_u) x + sqrt(beta_u) eps for
  // u = 1..t and compare mean/variance with the closed form over 1e4 draws.
  NoiseSchedule s = make_schedule(10, 0.02, 0.2);
  const int t = 10, draws = 10000;
  const double x0 = 0.7;
  Rng rng(123);
  std::vector<double> xs(draws);
  for (int d = 0; d < draws; ++d) {
    double x = x0;
    for (int u = 1; u <= t; ++u)
      x = std::sqrt(1.0 - s.beta(u)) * x + std::sqrt(s.beta(u)) * rng.normal();
    xs[static_cast<std::size_t>(d)] = x;
  }
  const auto mv = oracles::mean_var(xs);
  const double want_mean = std::sqrt(s.alpha_bar(t)) * x0;
  const double want_var = 1.0 - s.alpha_bar(t);
  const double se_mean = std::sqrt(want_var / draws);
  const double se_var = want_var * std::sqrt(2.0 / (draws - 1));
  CHECK(std::abs(mv.mean - want_mean) < 3.0 * se_mean);
  CHECK(std::abs(mv.var - want_var) < 3.0 * se_var);
}

TEST_CASE("ddpm_loss oracle substitutions") {
  NoiseSchedule s = make_schedule(30, 1e-3, 0.2);
  Rng rng(17);
  Tensor x0 = Tensor::from({1, 1, 2, 2}, oracles::random_vector(4, rng, -1, 1));

  SECTION("a predictor that recovers the true noise gives zero loss") {
    Predictor oracle = [&](const Tensor& x, int t) {
      const double ab = s.alpha_bar(t);
      return ad::scale(ad::sub(x, ad::scale(x0, std::sqrt(ab))), 1.0 / std::sqrt(1.0 - ab));
    };
    Rng r2(99);
    CHECK(ddpm_loss(oracle, s, x0, r2).value() < 1e-24);
  }

  SECTION("the zero predictor scores the mean squared standard normal") {
    Predictor zero = [](const Tensor& x, int) { return ad::scale(x, 0.0); };
    Tensor batch = Tensor::zeros({1250, 1, 2, 4});  // 1e4 noise elements
    Rng r2(7);
    CHECK(ddpm_loss(zero, s, batch, r2).value() == Catch::Approx(1.0).epsilon(0.05));
  }

  SECTION("empty batch is rejected") {
    Rng r2(1);
    CHECK_THROWS_AS(ddpm_loss([](const Tensor& x, int) { return x; }, s, Tensor::zeros({4}), r2),
                    std::invalid_argument);
  }
}

TEST_CASE("reverse_step endpoints and the posterior subtraction identity") {
  NoiseSchedule s = make_schedule(100, 1e-3, 0.2);
  Rng rng(31);
  Tensor x = Tensor::from({1, 3, 2, 2}, oracles::random_vector(12, rng));
  Tensor zero = Tensor::zeros(x.shape());
  Predictor zero_pred = [](const Tensor& v, int) { return ad::scale(v, 0.0); };

  SECTION("zero prediction, zero noise divides by sqrt(alpha)") {
    const int t = 40;
    Tensor y = reverse_step(zero_pred, s, x, t, zero);
    for (std::int64_t i = 0; i < x.size(); ++i)
      CHECK(y.at(i) == Catch::Approx(x.at(i) / std::sqrt(s.alpha(t))).epsilon(1e-14));
  }

  SECTION("the final step ignores the noise argument") {
    Tensor eps = Tensor::from(x.shape(), oracles::random_vector(12, rng));
    Tensor a = reverse_step(zero_pred, s, x, 1, eps);
    Tensor b = reverse_step(zero_pred, s, x, 1, zero);
    CHECK(a.values() == b.values());
  }

  SECTION("with the lambda-scaled trigger as prediction, the step reproduces the attack posterior") {
    // oracle: eps(x*_t, t) = lambda_t * delta must turn the generic transition
    // into x*_t/sqrt(a) - (1-sqrt(a))/sqrt(a) * delta + sigma_t * eps, to 1e-10.
    Tensor delta = Tensor::from(x.shape(), oracles::random_vector(12, rng, -1, 1));
    Tensor eps = Tensor::from(x.shape(), oracles::random_vector(12, rng));
    for (int t : {2, 17, 55, 100}) {
      const double a = s.alpha(t);
      const double lam = (1.0 - std::sqrt(a)) * std::sqrt(1.0 - s.alpha_bar(t)) / (1.0 - a);
      Predictor oracle = [&](const Tensor&, int) { return ad::scale(delta, lam); };
      Tensor got = reverse_step(oracle, s, x, t, eps);
      for (std::int64_t i = 0; i < x.size(); ++i) {
        const double want = x.at(i) / std::sqrt(a) -
                            (1.0 - std::sqrt(a)) / std::sqrt(a) * delta.at(i) +
                            s.sigma(t) * eps.at(i);
        CHECK(got.at(i) == Catch::Approx(want).margin(1e-10));
      }
    }
  }

  CHECK_THROWS_AS(reverse_step(zero_pred, s, x, 0, zero), std::out_of_range);
  CHECK_THROWS_AS(reverse_step(zero_pred, s, x, 101, zero), std::out_of_range);
}

TEST_CASE("no-noise posterior-mean recursion recovers x0") {
  // q(x_{u-1} | x_u, x0) has mean (sqrt(abar_{u-1}) beta_u x0 +
  // sqrt(alpha_u)(1 - abar_{u-1}) x_u) / (1 - abar_u); composing it downward
  // from x_t = sqrt(abar_t) x0 must return x0.
  NoiseSchedule s = make_schedule(100, 1e-3, 0.2);
  Rng rng(41);
  const double x0 = rng.uniform(-1, 1);
  for (int t : {1, 10, 100}) {
    double x = std::sqrt(s.alpha_bar(t)) * x0;
    for (int u = t; u >= 1; --u) {
      const double abar_prev = s.alpha_bar_prev(u);
      x = (std::sqrt(abar_prev) * s.beta(u) * x0 +
           std::sqrt(s.alpha(u)) * (1.0 - abar_prev) * x) /
          (1.0 - s.alpha_bar(u));
    }
    CHECK(x == Catch::Approx(x0).margin(1e-8));
  }
}

TEST_CASE("sampling is bit-deterministic under a seed") {
  DenoiserDescriptor d;
  d.image_size = 8;
  d.widths = {4, 8};
  d.embed_dim = 8;
  d.max_timestep = 10;
  DenoiserParams params = init_denoiser(d, 77);
  NoiseSchedule s = make_schedule(10, 1e-2, 0.2);
  auto run = [&] {
    Rng rng(5);
    Tensor x_T = Tensor::zeros({2, 3, 8, 8});
    rng.fill_normal(x_T.data(), x_T.size());
    return sample(make_predictor(params), s, x_T, rng).values();
  };
  CHECK(run() == run());
}
