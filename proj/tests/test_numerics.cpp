#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "hse/gradcheck.hpp"
#include "hse/ops.hpp"
#include "hse/rng.hpp"
#include "hse/tensor.hpp"

using namespace hse;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Random values bounded away from zero, for ops with a kink at 0.
Tensor<double> random_tensor_offzero(std::vector<int> shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) {
    const double mag = rng.uniform(0.1, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

// Scalar readout: sum(x * w) with fixed weights, turning any op output into a
// differentiable scalar for finite-difference checks.
Tensor<double> readout(Tape<double>* tape, const Tensor<double>& x, const Tensor<double>& w) {
  return sum_all(tape, mul(tape, x, w));
}

Tensor<double> fixed_weights(const std::vector<int>& shape, std::uint64_t key) {
  Rng rng(key);
  Tensor<double> w(shape);
  for (auto& v : w.data) v = rng.uniform(-1.0, 1.0);
  return w;
}

}  // namespace

TEST_CASE("matmul basic cases") {
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> a({2, 2}, {3, -1, 2, 5});
  auto r = matmul<double>(nullptr, eye, a);
  CHECK(r.data == a.data);

  Tensor<double> z = Tensor<double>::zeros({2, 3});
  Tensor<double> b({3, 2}, {1, 2, 3, 4, 5, 6});
  auto r2 = matmul<double>(nullptr, z, b);
  for (double v : r2.data) CHECK(v == 0.0);

  // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
  Tensor<double> m({2, 2}, {1, 2, 3, 4});
  Tensor<double> ones({2, 1}, {1, 1});
  auto r3 = matmul<double>(nullptr, m, ones);
  CHECK(r3(0, 0) == doctest::Approx(3.0));
  CHECK(r3(1, 0) == doctest::Approx(7.0));

  CHECK_THROWS_AS(matmul<double>(nullptr, m, Tensor<double>({3, 2})), DimensionError);
}

TEST_CASE("matmul agrees with naive triple loop on random inputs") {
  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    const int m = 1 + static_cast<int>(rng.uniform_int(8));
    const int k = 1 + static_cast<int>(rng.uniform_int(8));
    const int n = 1 + static_cast<int>(rng.uniform_int(8));
    auto a = random_tensor({m, k}, rng);
    auto b = random_tensor({k, n}, rng);
    auto r = matmul<double>(nullptr, a, b);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double acc = 0;
        for (int kk = 0; kk < k; ++kk) acc += a(i, kk) * b(kk, j);
        CHECK(std::fabs(r(i, j) - acc) < 1e-6);
      }
  }
}

TEST_CASE("softmax_lastdim values and invariants") {
  Tensor<double> x({2}, {0.0, 0.0});
  auto y = softmax_lastdim<double>(nullptr, x);
  CHECK(y(0) == doctest::Approx(0.5));
  CHECK(y(1) == doctest::Approx(0.5));

  Tensor<double> x2({2}, {0.0, std::log(3.0)});
  auto y2 = softmax_lastdim<double>(nullptr, x2);
  CHECK(y2(0) == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(y2(1) == doctest::Approx(0.75).epsilon(1e-9));

  // shift invariance and row sums
  Rng rng(5);
  for (int rep = 0; rep < 10; ++rep) {
    auto a = random_tensor({3, 7}, rng, -5.0, 5.0);
    auto shifted = a;
    const double c = rng.uniform(-3.0, 3.0);
    for (auto& v : shifted.data) v += c;
    auto ya = softmax_lastdim<double>(nullptr, a);
    auto yb = softmax_lastdim<double>(nullptr, shifted);
    for (std::size_t i = 0; i < ya.numel(); ++i) {
      CHECK(std::fabs(ya.data[i] - yb.data[i]) < 1e-9);
      CHECK(ya.data[i] >= 0.0);
      CHECK(ya.data[i] <= 1.0);
    }
    for (int r = 0; r < 3; ++r) {
      double s = 0;
      for (int j = 0; j < 7; ++j) s += ya(r, j);
      CHECK(std::fabs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("conv2d basic cases") {
  // 1x1 all-ones kernel is the identity map
  Rng rng(3);
  auto x = random_tensor({1, 4, 4}, rng);
  Tensor<double> k1({1, 1, 1, 1}, {1.0});
  auto y = conv2d<double>(nullptr, x, k1, 1, 0);
  CHECK(y.shape == x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data[i] == doctest::Approx(x.data[i]));

  auto z = Tensor<double>::zeros({2, 5, 5});
  auto k = random_tensor({3, 2, 3, 3}, rng);
  auto yz = conv2d<double>(nullptr, z, k, 1, 1);
  for (double v : yz.data) CHECK(v == 0.0);

  // output extent < 1
  CHECK_THROWS_AS(conv2d<double>(nullptr, Tensor<double>({1, 2, 2}), Tensor<double>({1, 1, 5, 5}), 1, 0),
                  DimensionError);
  // even kernel rejected
  CHECK_THROWS_AS(conv2d<double>(nullptr, Tensor<double>({1, 4, 4}), Tensor<double>({1, 1, 2, 2}), 1, 0),
                  DimensionError);
}

TEST_CASE("conv2d agrees with explicit sliding-window loop") {
  Rng rng(17);
  for (int rep = 0; rep < 20; ++rep) {
    const int cin = 1 + static_cast<int>(rng.uniform_int(3));
    const int cout = 1 + static_cast<int>(rng.uniform_int(3));
    const int h = 3 + static_cast<int>(rng.uniform_int(6));
    const int w = 3 + static_cast<int>(rng.uniform_int(6));
    const int ks = rng.uniform() < 0.5 ? 1 : 3;
    const int stride = 1 + static_cast<int>(rng.uniform_int(2));
    const int pad = static_cast<int>(rng.uniform_int(2));
    const int h2 = conv_out_extent(h, ks, stride, pad);
    const int w2 = conv_out_extent(w, ks, stride, pad);
    if (h2 < 1 || w2 < 1) continue;
    auto x = random_tensor({cin, h, w}, rng);
    auto k = random_tensor({cout, cin, ks, ks}, rng);
    auto y = conv2d<double>(nullptr, x, k, stride, pad);
    REQUIRE(y.shape == std::vector<int>({cout, h2, w2}));
    for (int oc = 0; oc < cout; ++oc)
      for (int oh = 0; oh < h2; ++oh)
        for (int ow = 0; ow < w2; ++ow) {
          double acc = 0;
          for (int ic = 0; ic < cin; ++ic)
            for (int ki = 0; ki < ks; ++ki)
              for (int kj = 0; kj < ks; ++kj) {
                const int ih = oh * stride + ki - pad;
                const int iw = ow * stride + kj - pad;
                if (ih < 0 || ih >= h || iw < 0 || iw >= w) continue;
                acc += x(ic, ih, iw) * k.data[((static_cast<std::size_t>(oc) * cin + ic) * ks + ki) * ks + kj];
              }
          CHECK(std::fabs(y(oc, oh, ow) - acc) < 1e-6);
        }
  }
}

TEST_CASE("elementwise identities and broadcasting") {
  Rng rng(29);
  auto x = random_tensor({3, 4, 4}, rng);
  auto zero = Tensor<double>::zeros({3, 4, 4});
  auto one = Tensor<double>::full({3, 4, 4}, 1.0);
  auto ax = add<double>(nullptr, x, zero);
  auto mx = mul<double>(nullptr, x, one);
  CHECK(ax.data == x.data);
  CHECK(mx.data == x.data);

  auto s = sigmoid<double>(nullptr, Tensor<double>::scalar(0.0));
  CHECK(s.data[0] == doctest::Approx(0.5));

  // channel broadcast equals explicit tiling, exactly
  auto v = random_tensor({3}, rng);
  auto tiled = tile_channel<double>(nullptr, v, {4, 4});
  auto b1 = mul<double>(nullptr, x, v);
  auto b2 = mul<double>(nullptr, x, tiled);
  CHECK(b1.data == b2.data);
  auto a1 = add<double>(nullptr, x, v);
  auto a2 = add<double>(nullptr, x, tiled);
  CHECK(a1.data == a2.data);

  // [C,1,1] spelling and scalar broadcast
  Tensor<double> v311 = v;
  v311.shape = {3, 1, 1};
  auto b3 = mul<double>(nullptr, x, v311);
  CHECK(b3.data == b1.data);
  auto sc = add<double>(nullptr, x, Tensor<double>::scalar(2.0));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(sc.data[i] == doctest::Approx(x.data[i] + 2.0));

  CHECK_THROWS_AS(add<double>(nullptr, x, Tensor<double>({2})), DimensionError);
  CHECK_THROWS_AS(add<double>(nullptr, Tensor<double>({2, 2}), Tensor<double>({3, 3})), DimensionError);
}

TEST_CASE("finite differences validate every op gradient") {
  const std::uint64_t seeds[] = {101, 202, 303};
  for (std::uint64_t seed : seeds) {
    Rng rng(seed);

    // matmul
    {
      auto a = random_tensor({3, 4}, rng);
      auto b = random_tensor({4, 2}, rng);
      auto w = fixed_weights({3, 2}, seed ^ 1);
      auto rep = check_gradients(
          [&](Tape<double>* t, const std::vector<Tensor<double>>& p) {
            return readout(t, matmul(t, p[0], p[1]), w);
          },
          {a, b}, 1e-5, 1e-4);
      CHECK(rep.max_rel_err < 1e-4);
    }
    // softmax
    {
      auto x = random_tensor({2, 5}, rng, -2.0, 2.0);
      auto w = fixed_weights({2, 5}, seed ^ 2);
      auto rep = check_gradients(
          [&](Tape<double>* t, const std::vector<Tensor<double>>& p) {
            return readout(t, softmax_lastdim(t, p[0]), w);
          },
          {x}, 1e-5, 1e-4);
      CHECK(rep.max_rel_err < 1e-4);
    }
    // conv2d (input and kernels)
    {
      auto x = random_tensor({2, 5, 5}, rng);
      auto k = random_tensor({3, 2, 3, 3}, rng);
      auto w = fixed_weights({3, 3, 3}, seed ^ 3);
      auto rep = check_gradients(
          [&](Tape<double>* t, const std::vector<Tensor<double>>& p) {
            return readout(t, conv2d(t, p[0], p[1], 2, 1), w);
          },
          {x, k}, 1e-5, 1e-4);
      CHECK(rep.max_rel_err < 1e-4);
    }
    // add / sub / mul with broadcasts
    {
      auto a = random_tensor({3, 4, 4}, rng);
      auto v = random_tensor({3}, rng);
      auto s = random_tensor({1}, rng);
      auto w = fixed_weights({3, 4, 4}, seed ^ 4);
      for (BinOp op : {BinOp::add, BinOp::sub, BinOp::mul}) {
        auto rep = check_gradients(
            [&](Tape<double>* t, const std::vector<Tensor<double>>& p) {
              auto r1 = binary_elementwise(t, op, p[0], p[1]);
              auto r2 = binary_elementwise(t, op, r1, p[2]);
              return readout(t, r2, w);
            },
            {a, v, s}, 1e-5, 1e-4);
        CHECK(rep.max_rel_err < 1e-4);
      }
      // broadcast on the left operand
      auto rep = check_gradients(
          [&](Tape<double>* t, const std::vector<Tensor<double>>& p) {
            return readout(t, sub(t, p[1], p[0]), w);
          },
          {a, v}, 1e-5, 1e-4);
      CHECK(rep.max_rel_err < 1e-4);
    }
    // relu (inputs bounded away from the kink) and sigmoid
    {
      auto x = random_tensor_offzero({4, 4}, rng);
      auto w = fixed_weights({4, 4}, seed ^ 5);
      auto rep = check_gradients(
          [&](Tape<double>* t, const std::vector<Tensor<double>>& p) {
            return readout(t, relu(t, p[0]), w);
          },
          {x}, 1e-5, 1e-4);
      CHECK(rep.max_rel_err < 1e-4);
      auto x2 = random_tensor({4, 4}, rng, -3.0, 3.0);
      auto rep2 = check_gradients(
          [&](Tape<double>* t, const std::vector<Tensor<double>>& p) {
            return readout(t, sigmoid(t, p[0]), w);
          },
          {x2}, 1e-5, 1e-4);
      CHECK(rep2.max_rel_err < 1e-4);
    }
    // reshape + transpose + concat + slice + tile_channel
    {
      auto a = random_tensor({2, 6}, rng);
      auto b = random_tensor({2, 3}, rng);
      auto v = random_tensor({2}, rng);
      auto w = fixed_weights({2, 10}, seed ^ 6);
      auto rep = check_gradients(
          [&](Tape<double>* t, const std::vector<Tensor<double>>& p) {
            auto at = transpose2d(t, transpose2d(t, p[0]));
            auto r = reshape(t, at, {2, 6});
            auto tied = tile_channel(t, p[2], {1});  // [2,1]
            auto cat = concat(t, {r, p[1], tied}, 1);
            auto sl = slice(t, cat, 1, 0, 10);
            return readout(t, sl, w);
          },
          {a, b, v}, 1e-5, 1e-4);
      CHECK(rep.max_rel_err < 1e-4);
    }
    // masked_mean_hw
    {
      auto f = random_tensor({3, 4, 4}, rng);
      Tensor<double> mask({4, 4});
      for (auto& m : mask.data) m = rng.uniform() < 0.4 ? 1.0 : 0.0;
      auto w = fixed_weights({3}, seed ^ 7);
      auto rep = check_gradients(
          [&](Tape<double>* t, const std::vector<Tensor<double>>& p) {
            return readout(t, masked_mean_hw(t, p[0], mask), w);
          },
          {f}, 1e-5, 1e-4);
      CHECK(rep.max_rel_err < 1e-4);
    }
    // bilinear_resize (up and down)
    {
      auto x = random_tensor({2, 4, 4}, rng);
      auto wup = fixed_weights({2, 7, 9}, seed ^ 8);
      auto rep = check_gradients(
          [&](Tape<double>* t, const std::vector<Tensor<double>>& p) {
            return readout(t, bilinear_resize(t, p[0], 7, 9), wup);
          },
          {x}, 1e-5, 1e-4);
      CHECK(rep.max_rel_err < 1e-4);
      auto wdn = fixed_weights({2, 2, 3}, seed ^ 9);
      auto rep2 = check_gradients(
          [&](Tape<double>* t, const std::vector<Tensor<double>>& p) {
            return readout(t, bilinear_resize(t, p[0], 2, 3), wdn);
          },
          {x}, 1e-5, 1e-4);
      CHECK(rep2.max_rel_err < 1e-4);
    }
    // bce2
    {
      auto logits = random_tensor({2, 3, 3}, rng, -2.0, 2.0);
      Tensor<double> target({3, 3});
      for (auto& m : target.data) m = rng.uniform() < 0.5 ? 1.0 : 0.0;
      auto rep = check_gradients(
          [&](Tape<double>* t, const std::vector<Tensor<double>>& p) {
            return bce2(t, p[0], target);
          },
          {logits}, 1e-5, 1e-4);
      CHECK(rep.max_rel_err < 1e-4);
    }
    // affine and mean_tensors
    {
      auto w0 = random_tensor({3, 5}, rng);
      auto b0 = random_tensor({3}, rng);
      auto x = random_tensor({5}, rng);
      auto w = fixed_weights({3}, seed ^ 10);
      auto rep = check_gradients(
          [&](Tape<double>* t, const std::vector<Tensor<double>>& p) {
            auto y1 = affine(t, p[0], p[1], p[2]);
            auto y2 = mean_tensors(t, {y1, p[1], y1});
            return readout(t, y2, w);
          },
          {w0, b0, x}, 1e-5, 1e-4);
      CHECK(rep.max_rel_err < 1e-4);
    }
  }
}

TEST_CASE("tape replay is bitwise deterministic") {
  Rng rng(77);
  auto a = random_tensor({4, 4}, rng);
  auto b = random_tensor({4, 4}, rng);
  auto run = [&]() {
    Tape<double> tape;
    auto wa = tape.watch(a);
    auto wb = tape.watch(b);
    auto y = sum_all(&tape, mul(&tape, softmax_lastdim(&tape, matmul(&tape, wa, wb)), wb));
    tape.backward(y);
    auto ga = tape.grad(wa);
    auto gb = tape.grad(wb);
    ga.insert(ga.end(), gb.begin(), gb.end());
    return ga;
  };
  auto g1 = run();
  auto g2 = run();
  REQUIRE(g1.size() == g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("check_gradients analytic examples") {
  // f(x) = x^2 at x = 3: gradient 6
  auto rep = check_gradients(
      [](Tape<double>* t, const std::vector<Tensor<double>>& p) { return mul(t, p[0], p[0]); },
      {Tensor<double>::scalar(3.0)}, 1e-5, 1e-6);
  CHECK(rep.max_rel_err < 1e-6);
  CHECK(rep.worst_analytic == doctest::Approx(6.0));

  // constant function: both gradients zero
  auto repc = check_gradients(
      [](Tape<double>* t, const std::vector<Tensor<double>>& p) {
        return sum_all(t, mul(t, p[0], Tensor<double>::scalar(0.0)));
      },
      {Tensor<double>::scalar(2.0)}, 1e-5, 1e-6);
  CHECK(repc.max_rel_err < 1e-6);
  CHECK(repc.worst_analytic == 0.0);
  CHECK(repc.worst_numeric == doctest::Approx(0.0));

  CHECK_THROWS_AS(check_gradients(
                      [](Tape<double>* t, const std::vector<Tensor<double>>& p) {
                        (void)t;
                        return Tensor<double>::scalar(p[0].data[0] / 0.0);
                      },
                      {Tensor<double>::scalar(1.0)}, 1e-5, 1e-4),
                  EvalError);
  CHECK_THROWS_AS(check_gradients(
                      [](Tape<double>* t, const std::vector<Tensor<double>>& p) {
                        (void)t;
                        return p[0];
                      },
                      {Tensor<double>::scalar(1.0)}, 1e-3, 1e-4),
                  ArgumentError);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor<double>({0, 2}), DimensionError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, {1.0, 2.0}), DimensionError);
  Rng rng(9);
  auto x = random_tensor({2, 3, 4}, rng);
  CHECK(x.numel() == 24);
  CHECK(all_finite(x));
}
