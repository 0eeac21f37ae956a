#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "puredesk/autodiff.hpp"

using namespace puredesk;
using ad::Tensor;

namespace {

// Rebuilds `build` on a fresh tape with leaf values x and returns the scalar.
double eval_scalar(const ad::Shape& shape,
                   const std::function<Tensor(ad::Tape&, const Tensor&)>& build,
                   const std::vector<double>& x) {
  ad::Tape tape;
  Tensor leaf = tape.leaf(Tensor::from(shape, x));
  return build(tape, leaf).value();
}

// Analytic gradient of the same scalar via one reverse sweep.
std::vector<double> grad_of(const ad::Shape& shape,
                            const std::function<Tensor(ad::Tape&, const Tensor&)>& build,
                            const std::vector<double>& x) {
  ad::Tape tape;
  Tensor leaf = tape.leaf(Tensor::from(shape, x));
  tape.backward(build(tape, leaf));
  return tape.grad(leaf).values();
}

double gradcheck(const ad::Shape& shape,
                 const std::function<Tensor(ad::Tape&, const Tensor&)>& build,
                 const std::vector<double>& x, std::size_t max_checks = 0) {
  auto f = [&](const std::vector<double>& v) { return eval_scalar(shape, build, v); };
  return oracles::max_grad_rel_err(f, x, grad_of(shape, build, x), 1e-5, max_checks);
}

}  // namespace

TEST_CASE("elementwise arithmetic basics") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = Tensor::from({2}, {3, 4});
  CHECK(ad::add(a, b).values() == std::vector<double>{4, 6});
  CHECK(ad::sub(b, a).values() == std::vector<double>{2, 2});
  CHECK(ad::mul(a, b).values() == std::vector<double>{3, 8});
  CHECK(ad::scale(a, 0.0).values() == std::vector<double>{0, 0});
  CHECK(ad::sum(b).value() == 7.0);
  CHECK_THROWS_AS(ad::add(a, Tensor::from({3}, {1, 2, 3})), std::invalid_argument);
  CHECK_THROWS_AS(ad::sqrt(Tensor::from({1}, {-1.0})), std::invalid_argument);
}

TEST_CASE("square backward at x=3 gives gradient 6") {
  ad::Tape tape;
  Tensor x = tape.leaf(Tensor::scalar(3.0));
  tape.backward(ad::square(x));
  CHECK(tape.grad(x).value() == 6.0);
}

TEST_CASE("sum backward is all ones; disconnected leaf stays zero") {
  ad::Tape tape;
  Tensor x = tape.leaf(Tensor::from({5}, {1, 2, 3, 4, 5}));
  Tensor unused = tape.leaf(Tensor::from({2}, {7, 8}));
  tape.backward(ad::sum(x));
  CHECK(tape.grad(x).values() == std::vector<double>(5, 1.0));
  CHECK(tape.grad(unused).values() == std::vector<double>(2, 0.0));
}

TEST_CASE("backward requires a scalar root on the same graph") {
  ad::Tape tape;
  Tensor x = tape.leaf(Tensor::from({3}, {1, 2, 3}));
  CHECK_THROWS_AS(tape.backward(ad::scale(x, 2.0)), std::invalid_argument);
  CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0)), std::invalid_argument);
  ad::Tape other;
  Tensor y = other.leaf(Tensor::from({3}, {1, 2, 3}));
  CHECK_THROWS_AS(ad::add(x, y), std::invalid_argument);
}

TEST_CASE("backward accumulates until zeroed and leaves the graph reusable") {
  ad::Tape tape;
  Tensor x = tape.leaf(Tensor::from({3}, {0.5, -1.0, 2.0}));
  Tensor root = ad::sum(ad::square(x));
  tape.backward(root);
  const std::vector<double> once = tape.grad(x).values();
  tape.backward(root);
  const std::vector<double> twice = tape.grad(x).values();
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(twice[i] == 2.0 * once[i]);
  tape.zero_grad();
  tape.backward(root);
  CHECK(tape.grad(x).values() == once);
}

TEST_CASE("every differentiable op agrees with central differences") {
  Rng rng(42);
  const ad::Shape shape{2, 6};
  const std::vector<double> x = oracles::random_vector(12, rng);
  const std::vector<double> wts = oracles::random_vector(12, rng);
  const Tensor w = Tensor::from(shape, wts);
  auto weighted = [&](const std::function<Tensor(ad::Tape&, const Tensor&)>& op) {
    return [op, w](ad::Tape& t, const Tensor& leaf) { return ad::sum(ad::mul(op(t, leaf), w)); };
  };

  auto check = [&](const char* name, const std::function<Tensor(ad::Tape&, const Tensor&)>& op,
                   std::vector<double> input) {
    INFO(name);
    CHECK(gradcheck(shape, weighted(op), input) < 1e-6);
  };

  check("add", [&](ad::Tape&, const Tensor& l) { return ad::add(l, w); }, x);
  check("sub", [&](ad::Tape&, const Tensor& l) { return ad::sub(w, l); }, x);
  check("mul", [&](ad::Tape&, const Tensor& l) { return ad::mul(l, w); }, x);
  check("scale", [&](ad::Tape&, const Tensor& l) { return ad::scale(l, -1.7); }, x);
  check("add_scalar", [&](ad::Tape&, const Tensor& l) { return ad::add_scalar(l, 0.3); }, x);
  check("exp", [&](ad::Tape&, const Tensor& l) { return ad::exp(l); }, x);
  check("tanh", [&](ad::Tape&, const Tensor& l) { return ad::tanh(l); }, x);
  check("square", [&](ad::Tape&, const Tensor& l) { return ad::square(l); }, x);
  check("silu", [&](ad::Tape&, const Tensor& l) { return ad::silu(l); }, x);

  std::vector<double> positive = oracles::random_vector(12, rng, 0.5, 2.5);
  check("sqrt", [&](ad::Tape&, const Tensor& l) { return ad::sqrt(l); }, positive);

  std::vector<double> off_kink = x;
  for (auto& v : off_kink)
    if (std::abs(v) < 0.1) v = 0.5;
  check("relu", [&](ad::Tape&, const Tensor& l) { return ad::relu(l); }, off_kink);
}

TEST_CASE("matmul matches hand results and finite differences") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from({2, 2}, {3, -1, 2, 5});
  CHECK(ad::matmul(eye, a).values() == a.values());
  CHECK(ad::matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).value() == 11.0);
  CHECK_THROWS_AS(ad::matmul(a, Tensor::from({3, 2}, std::vector<double>(6, 1.0))),
                  std::invalid_argument);

  Rng rng(7);
  const std::vector<double> av = oracles::random_vector(20, rng);
  const std::vector<double> bv = oracles::random_vector(15, rng);
  const Tensor bconst = Tensor::from({5, 3}, bv);
  auto via_a = [&](ad::Tape&, const Tensor& l) { return ad::matmul(l, bconst); };
  CHECK(gradcheck({4, 5}, [&](ad::Tape& t, const Tensor& l) { return ad::sum(ad::square(via_a(t, l))); }, av) < 1e-6);
  const Tensor aconst = Tensor::from({4, 5}, av);
  CHECK(gradcheck({5, 3}, [&](ad::Tape&, const Tensor& l) {
          return ad::sum(ad::square(ad::matmul(aconst, l)));
        }, bv) < 1e-6);
}

TEST_CASE("conv2d trivial kernels") {
  Rng rng(3);
  Tensor x = Tensor::from({1, 2, 4, 4}, oracles::random_vector(32, rng));
  // 1x1 kernel of ones sums the channels per pixel.
  Tensor ones = Tensor::from({1, 2, 1, 1}, {1, 1});
  Tensor y = ad::conv2d(x, ones, 1, 0);
  REQUIRE(y.shape() == ad::Shape{1, 1, 4, 4});
  for (int p = 0; p < 16; ++p) CHECK(y.at(p) == Catch::Approx(x.at(p) + x.at(16 + p)).epsilon(1e-12));

  Tensor zeros = Tensor::zeros({3, 2, 3, 3});
  Tensor z = ad::conv2d(x, zeros, 1, 1);
  for (std::int64_t i = 0; i < z.size(); ++i) CHECK(z.at(i) == 0.0);

  CHECK_THROWS_AS(ad::conv2d(x, Tensor::zeros({3, 5, 3, 3}), 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(ad::conv2d(x, Tensor::zeros({3, 2, 9, 9}), 1, 1), std::invalid_argument);
}

TEST_CASE("conv2d matches the nested-loop oracle exactly") {
  Rng rng(11);
  const int N = 1, C = 2, H = 6, W = 6, F = 3, kh = 3, kw = 3;
  const std::vector<double> xv = oracles::random_vector(static_cast<std::size_t>(N * C * H * W), rng);
  const std::vector<double> wv = oracles::random_vector(static_cast<std::size_t>(F * C * kh * kw), rng);
  for (const auto& [stride, pad] : std::vector<std::pair<int, int>>{{1, 0}, {1, 1}, {2, 1}, {3, 2}}) {
    Tensor y = ad::conv2d(Tensor::from({N, C, H, W}, xv), Tensor::from({F, C, kh, kw}, wv), stride, pad);
    const std::vector<double> want = oracles::naive_conv2d(xv, N, C, H, W, wv, F, kh, kw, stride, pad);
    REQUIRE(static_cast<std::size_t>(y.size()) == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(y.at(static_cast<std::int64_t>(i)) == Catch::Approx(want[i]).margin(1e-12));
  }
}

TEST_CASE("conv2d gradients pass finite differences") {
  Rng rng(13);
  const std::vector<double> xv = oracles::random_vector(2 * 2 * 4 * 4, rng, -1, 1);
  const std::vector<double> wv = oracles::random_vector(3 * 2 * 3 * 3, rng, -1, 1);
  const Tensor xc = Tensor::from({2, 2, 4, 4}, xv);
  const Tensor wc = Tensor::from({3, 2, 3, 3}, wv);
  CHECK(gradcheck({2, 2, 4, 4}, [&](ad::Tape&, const Tensor& l) {
          return ad::sum(ad::square(ad::conv2d(l, wc, 1, 1)));
        }, xv) < 1e-6);
  CHECK(gradcheck({3, 2, 3, 3}, [&](ad::Tape&, const Tensor& l) {
          return ad::sum(ad::square(ad::conv2d(xc, l, 1, 1)));
        }, wv) < 1e-6);
  CHECK(gradcheck({2, 2, 4, 4}, [&](ad::Tape&, const Tensor& l) {
          return ad::sum(ad::square(ad::conv2d(l, wc, 2, 0)));
        }, xv) < 1e-6);
}

TEST_CASE("structural ops pass finite differences") {
  Rng rng(17);
  const std::vector<double> xv = oracles::random_vector(1 * 2 * 4 * 4, rng);
  const std::vector<double> other = oracles::random_vector(1 * 3 * 4 * 4, rng);
  const Tensor oc = Tensor::from({1, 3, 4, 4}, other);
  CHECK(gradcheck({1, 2, 4, 4}, [&](ad::Tape&, const Tensor& l) {
          return ad::sum(ad::square(ad::concat_channels(l, oc)));
        }, xv) < 1e-6);
  CHECK(gradcheck({1, 2, 4, 4}, [&](ad::Tape&, const Tensor& l) {
          return ad::sum(ad::square(ad::upsample2x(l)));
        }, xv) < 1e-6);
  CHECK(gradcheck({1, 2, 4, 4}, [&](ad::Tape&, const Tensor& l) {
          return ad::sum(ad::square(ad::avg_pool2(l)));
        }, xv) < 1e-6);

  const std::vector<double> vv = oracles::random_vector(2, rng);
  const Tensor vc = Tensor::from({2}, vv);
  const Tensor xc = Tensor::from({1, 2, 4, 4}, xv);
  CHECK(gradcheck({1, 2, 4, 4}, [&](ad::Tape&, const Tensor& l) {
          return ad::sum(ad::square(ad::add_channel(l, vc)));
        }, xv) < 1e-6);
  CHECK(gradcheck({2}, [&](ad::Tape&, const Tensor& l) {
          return ad::sum(ad::square(ad::add_channel(xc, l)));
        }, vv) < 1e-6);
  CHECK(gradcheck({2}, [&](ad::Tape&, const Tensor& l) {
          return ad::sum(ad::square(ad::mul_channel(xc, l)));
        }, vv) < 1e-6);
  CHECK(gradcheck({1, 2, 4, 4}, [&](ad::Tape&, const Tensor& l) {
          return ad::sum(ad::square(ad::mul_channel(l, vc)));
        }, xv) < 1e-6);

  const std::vector<double> mv = oracles::random_vector(6, rng);
  const std::vector<double> bv = oracles::random_vector(3, rng);
  const Tensor bc = Tensor::from({3}, bv);
  const Tensor mc = Tensor::from({2, 3}, mv);
  CHECK(gradcheck({2, 3}, [&](ad::Tape&, const Tensor& l) {
          return ad::sum(ad::square(ad::add_bias(l, bc)));
        }, mv) < 1e-6);
  CHECK(gradcheck({3}, [&](ad::Tape&, const Tensor& l) {
          return ad::sum(ad::square(ad::add_bias(mc, l)));
        }, bv) < 1e-6);
}

TEST_CASE("three-layer composite gradient within 1e-6 of finite differences") {
  Rng rng(23);
  const std::vector<double> xv = oracles::random_vector(8, rng);
  auto build = [](ad::Tape&, const Tensor& l) {
    Tensor h1 = ad::tanh(ad::scale(l, 0.7));
    Tensor h2 = ad::silu(ad::add_scalar(ad::mul(h1, h1), 0.2));
    return ad::sum(ad::square(ad::sub(h2, ad::exp(ad::scale(h1, 0.3)))));
  };
  CHECK(gradcheck({8}, build, xv) < 1e-6);
}

TEST_CASE("random inputs in [-2,2] stay within the 1e-4 gradient band") {
  Rng rng(29);
  for (int rep = 0; rep < 5; ++rep) {
    const std::vector<double> xv = oracles::random_vector(10, rng);
    auto build = [](ad::Tape&, const Tensor& l) {
      return ad::sum(ad::mul(ad::silu(l), ad::tanh(ad::scale(l, 0.5))));
    };
    CHECK(gradcheck({10}, build, xv) < 1e-4);
  }
}

TEST_CASE("backward is linear in the root") {
  Rng rng(31);
  const std::vector<double> xv = oracles::random_vector(6, rng);
  const double a = 1.3, b = -0.4;
  auto f_term = [](const Tensor& l) { return ad::sum(ad::square(l)); };
  auto g_term = [](const Tensor& l) { return ad::sum(ad::tanh(l)); };

  ad::Tape tf;
  Tensor xf = tf.leaf(Tensor::from({6}, xv));
  tf.backward(f_term(xf));
  const std::vector<double> gf = tf.grad(xf).values();

  ad::Tape tg;
  Tensor xg = tg.leaf(Tensor::from({6}, xv));
  tg.backward(g_term(xg));
  const std::vector<double> gg = tg.grad(xg).values();

  ad::Tape tc;
  Tensor xc = tc.leaf(Tensor::from({6}, xv));
  tc.backward(ad::add(ad::scale(f_term(xc), a), ad::scale(g_term(xc), b)));
  const std::vector<double> gc = tc.grad(xc).values();

  for (std::size_t i = 0; i < gc.size(); ++i)
    CHECK(gc[i] == Catch::Approx(a * gf[i] + b * gg[i]).epsilon(1e-13).margin(1e-15));
}

TEST_CASE("replaying an identical seeded graph yields bit-identical gradients") {
  auto run = [] {
    Rng rng(99);
    ad::Tape tape;
    Tensor x = tape.leaf(Tensor::from({12}, oracles::random_vector(12, rng)));
    Tensor w = Tensor::from({12}, oracles::random_vector(12, rng));
    tape.backward(ad::sum(ad::mul(ad::silu(ad::mul(x, w)), x)));
    return tape.grad(x).values();
  };
  CHECK(run() == run());
}

TEST_CASE("conv forward is bit-identical across worker thread counts") {
  Rng rng(37);
  const std::vector<double> xv = oracles::random_vector(4 * 3 * 16 * 16, rng);
  const std::vector<double> wv = oracles::random_vector(8 * 3 * 3 * 3, rng);
  set_worker_threads(1);
  Tensor y1 = ad::conv2d(Tensor::from({4, 3, 16, 16}, xv), Tensor::from({8, 3, 3, 3}, wv), 1, 1);
  set_worker_threads(2);
  Tensor y2 = ad::conv2d(Tensor::from({4, 3, 16, 16}, xv), Tensor::from({8, 3, 3, 3}, wv), 1, 1);
  set_worker_threads(1);
  CHECK(y1.values() == y2.values());
}
