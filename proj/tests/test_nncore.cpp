#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "somnoscore/nncore.hpp"
#include "somnoscore/rng.hpp"

using namespace somnoscore;
using namespace somnoscore::nncore;

namespace {

Tensor2<double> random_tensor(int ch, int len, Rng& rng) {
  Tensor2<double> t(ch, len);
  for (auto& v : t.data) v = rng.normal();
  return t;
}

DepthwiseKernel<double> random_depthwise(int ch, int k, Rng& rng) {
  DepthwiseKernel<double> kern(ch, k);
  for (auto& v : kern.w) v = rng.normal() * 0.5;
  return kern;
}

PointwiseKernel<double> random_pointwise(int f, int ch, Rng& rng) {
  PointwiseKernel<double> kern(f, ch);
  for (auto& v : kern.w) v = rng.normal() * 0.5;
  for (auto& v : kern.b) v = rng.normal() * 0.1;
  return kern;
}

// Reference standard 1D convolution (cross-correlation, valid padding) used
// as the independent oracle for the separable-equivalence property:
// out[f][i] = sum_c sum_j x[c][i+j] * w[f][c][j] + b[f]
Tensor2<double> standard_conv1d(const Tensor2<double>& x,
                                const std::vector<double>& w, int filters, int ksize,
                                const std::vector<double>& bias) {
  const int out_len = x.length - ksize + 1;
  Tensor2<double> out(filters, out_len);
  for (int f = 0; f < filters; ++f) {
    for (int i = 0; i < out_len; ++i) {
      double acc = bias[f];
      for (int c = 0; c < x.channels; ++c)
        for (int j = 0; j < ksize; ++j)
          acc += x.at(c, i + j) * w[(std::size_t(f) * x.channels + c) * ksize + j];
      out.at(f, i) = acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("depthwise: identity kernel") {
  auto x = Tensor2<double>::from_rows({{5, 7, 9}});
  auto k = DepthwiseKernel<double>::from_rows({{1}});
  auto y = depthwise_conv1d(x, k);
  CHECK(y.channels == 1);
  CHECK(y.length == 3);
  CHECK(y.data == std::vector<double>{5, 7, 9});
}

TEST_CASE("depthwise: hand-computed cross-correlation") {
  auto x = Tensor2<double>::from_rows({{1, 2, 3, 4}});
  auto k = DepthwiseKernel<double>::from_rows({{1, 0, -1}});
  auto y = depthwise_conv1d(x, k);
  REQUIRE(y.length == 2);
  CHECK(y.at(0, 0) == doctest::Approx(-2.0));
  CHECK(y.at(0, 1) == doctest::Approx(-2.0));
}

TEST_CASE("depthwise: channels are independent") {
  Rng rng(11);
  auto x = random_tensor(2, 12, rng);
  auto k = random_depthwise(2, 3, rng);
  auto y0 = depthwise_conv1d(x, k);
  x.at(0, 5) += 10.0;  // perturb channel 0 only
  auto y1 = depthwise_conv1d(x, k);
  for (int i = 0; i < y0.length; ++i) CHECK(y0.at(1, i) == y1.at(1, i));
  bool changed = false;
  for (int i = 0; i < y0.length; ++i) changed |= y0.at(0, i) != y1.at(0, i);
  CHECK(changed);
}

TEST_CASE("depthwise: shape errors") {
  auto x = Tensor2<double>::from_rows({{1, 2, 3}});
  CHECK_THROWS_AS(depthwise_conv1d(x, DepthwiseKernel<double>(2, 2)), ShapeError);
  CHECK_THROWS_AS(depthwise_conv1d(x, DepthwiseKernel<double>(1, 5)), ShapeError);
}

TEST_CASE("pointwise: identity and hand arithmetic") {
  auto x = Tensor2<double>::from_rows({{1, 2}, {3, 4}});
  PointwiseKernel<double> k(1, 2);
  k.w = {1, 1};
  k.b = {0.5};
  auto y = pointwise_conv1d(x, k);
  REQUIRE(y.channels == 1);
  CHECK(y.at(0, 0) == doctest::Approx(4.5));
  CHECK(y.at(0, 1) == doctest::Approx(6.5));

  PointwiseKernel<double> ident(1, 1);
  ident.w = {1};
  ident.b = {0};
  auto one = Tensor2<double>::from_rows({{3, -1, 2}});
  CHECK(pointwise_conv1d(one, ident).data == one.data);
}

TEST_CASE("pointwise: bias-only output") {
  Tensor2<double> x(2, 4, 0.0);
  PointwiseKernel<double> k(3, 2);
  k.b = {2.5, -1.0, 0.0};
  auto y = pointwise_conv1d(x, k);
  for (int f = 0; f < 3; ++f)
    for (int i = 0; i < 4; ++i) CHECK(y.at(f, i) == doctest::Approx(k.b[f]));
}

TEST_CASE("maxpool: floor semantics drop the remainder") {
  auto x = Tensor2<double>::from_rows({{3, 1, 4, 1, 5}});
  auto y = maxpool1d(x, 2);
  REQUIRE(y.length == 2);
  CHECK(y.at(0, 0) == 3);
  CHECK(y.at(0, 1) == 4);
}

TEST_CASE("maxpool: m=1 is the identity") {
  Rng rng(3);
  auto x = random_tensor(2, 9, rng);
  auto y = maxpool1d(x, 1);
  CHECK(y.data == x.data);
  CHECK_THROWS_AS(maxpool1d(x, 0), BadArg);
}

TEST_CASE("maxpool: ties route gradient to the first element of the window") {
  Tensor2<double> x(1, 6, 1.0);  // constant signal
  MaxPoolTape tape;
  auto y = maxpool1d(x, 2, &tape);
  CHECK(y.data == std::vector<double>{1, 1, 1});
  Tensor2<double> dy(1, 3, 1.0);
  auto dx = maxpool1d_backward(tape, dy);
  CHECK(dx.data == std::vector<double>{1, 0, 1, 0, 1, 0});
}

TEST_CASE("maxpool backward conserves the gradient sum") {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const int ch = 1 + int(rng.below(3));
    const int len = 8 + int(rng.below(40));
    const int m = 1 + int(rng.below(4));
    auto x = random_tensor(ch, len, rng);
    MaxPoolTape tape;
    auto y = maxpool1d(x, m, &tape);
    Tensor2<double> dy(y.channels, y.length);
    for (auto& v : dy.data) v = rng.normal();
    auto dx = maxpool1d_backward(tape, dy);
    const double up = std::accumulate(dy.data.begin(), dy.data.end(), 0.0);
    const double routed = std::accumulate(dx.data.begin(), dx.data.end(), 0.0);
    CHECK(routed == doctest::Approx(up).epsilon(1e-12));
  }
}

TEST_CASE("maxpool tape is single use") {
  Tensor2<double> x(1, 4, 1.0);
  MaxPoolTape tape;
  auto y = maxpool1d(x, 2, &tape);
  Tensor2<double> dy(1, 2, 1.0);
  (void)maxpool1d_backward(tape, dy);
  CHECK_THROWS_AS(maxpool1d_backward(tape, dy), TapeConsumed);
  (void)y;
}

TEST_CASE("softmax: symmetry, stability and normalization") {
  std::vector<double> z(5, 0.0);
  auto p = softmax(z);
  for (double v : p) CHECK(v == doctest::Approx(0.2));

  auto q = softmax(std::vector<double>{1000.0, 0.0});
  CHECK(q[0] == doctest::Approx(1.0));
  CHECK(q[1] == doctest::Approx(0.0));
  CHECK(std::isfinite(q[0]));

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(5);
    for (auto& x : v) x = rng.normal() * 5.0;
    auto pp = softmax(v);
    double sum = 0.0;
    for (double x : pp) {
      CHECK(x > 0.0);
      CHECK(x < 1.0);
      sum += x;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("cross-entropy: uniform distribution gives ln 5") {
  std::vector<double> p(5, 0.2);
  for (int t = 0; t < 5; ++t)
    CHECK(cross_entropy(p, t) == doctest::Approx(std::log(5.0)));
  CHECK(cross_entropy(p, 0) == doctest::Approx(1.60944).epsilon(1e-5));
  CHECK_THROWS_AS(cross_entropy(p, 5), BadArg);
  CHECK_THROWS_AS(cross_entropy(p, -1), BadArg);
}

TEST_CASE("softmax + cross-entropy combined gradient is p - onehot") {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> logits(5);
    for (auto& v : logits) v = rng.normal() * 3.0;
    auto p = softmax(logits);
    const int target = int(rng.below(5));
    std::vector<double> analytic(5);
    softmax_cross_entropy_backward(p.data(), 5, target, analytic.data());

    std::vector<double> point = logits;
    const double err = gradient_check(
        [&](std::span<const double> z) {
          std::vector<double> zz(z.begin(), z.end());
          return cross_entropy(softmax(zz), target);
        },
        point, analytic, 1e-5);
    CHECK(err < 1e-6);
    for (int i = 0; i < 5; ++i) {
      const double expect = p[i] - (i == target ? 1.0 : 0.0);
      CHECK(analytic[i] == doctest::Approx(expect).epsilon(1e-6));
    }
  }
}

TEST_CASE("relu gradient") {
  double x[3] = {2.0, -3.0, 0.0};
  double dy[3] = {1.0, 1.0, 1.0};
  double dx[3];
  relu_backward(x, dy, 3, dx);
  CHECK(dx[0] == 1.0);
  CHECK(dx[1] == 0.0);
  CHECK(dx[2] == 0.0);
}

TEST_CASE("dropout: eval mode and p=0 are identities") {
  Rng rng(7);
  auto x = random_tensor(2, 16, rng);
  auto y = dropout(x, 0.5, Mode::Eval, nullptr);
  CHECK(y.data == x.data);
  auto z = dropout(x, 0.0, Mode::Train, &rng);
  CHECK(z.data == x.data);
  CHECK_THROWS_AS(dropout(x, 1.0, Mode::Train, &rng), BadArg);
  CHECK_THROWS_AS(dropout(x, -0.1, Mode::Train, &rng), BadArg);
}

TEST_CASE("dropout: inverted scaling preserves the mean") {
  Rng rng(1234);
  Tensor2<double> x(1, 10000, 1.0);
  auto y = dropout(x, 0.5, Mode::Train, &rng);
  const double mean =
      std::accumulate(y.data.begin(), y.data.end(), 0.0) / double(y.data.size());
  CHECK(mean > 0.95);
  CHECK(mean < 1.05);
}

TEST_CASE("dropout: backward applies the recorded mask") {
  Rng rng(9);
  auto x = random_tensor(1, 64, rng);
  DropoutTape tape;
  auto y = dropout(x, 0.5, Mode::Train, &rng, &tape);
  Tensor2<double> dy(1, 64, 1.0);
  std::vector<double> dx(64);
  dropout_backward(tape, dy.data.data(), 64, dx.data());
  for (int i = 0; i < 64; ++i) {
    if (tape.mask[i])
      CHECK(dx[i] == doctest::Approx(2.0));
    else
      CHECK(dx[i] == 0.0);
  }
  CHECK_THROWS_AS(dropout_backward(tape, dy.data.data(), 64, dx.data()), TapeConsumed);
  (void)y;
}

TEST_CASE("separable equivalence: depthwise then pointwise equals a rank-1 standard conv") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const int len = 16 + int(rng.below(48));
    const int k = 2 + int(rng.below(6));
    const int filters = 1 + int(rng.below(5));
    auto x = random_tensor(1, len, rng);
    auto dk = random_depthwise(1, k, rng);
    PointwiseKernel<double> pk(filters, 1);
    for (auto& v : pk.w) v = rng.normal();
    // bias stays zero

    auto separable = pointwise_conv1d(depthwise_conv1d(x, dk), pk);

    std::vector<double> w(std::size_t(filters) * 1 * k);
    for (int f = 0; f < filters; ++f)
      for (int j = 0; j < k; ++j) w[std::size_t(f) * k + j] = pk.w[f] * dk.w[j];
    auto standard = standard_conv1d(x, w, filters, k, std::vector<double>(filters, 0.0));

    REQUIRE(separable.length == standard.length);
    for (std::size_t i = 0; i < separable.data.size(); ++i) {
      const double denom = std::max(1.0, std::abs(standard.data[i]));
      CHECK(std::abs(separable.data[i] - standard.data[i]) / denom < 1e-6);
    }
  }
}

// ---------------------------------------------------------------------------
// finite-difference suite
// ---------------------------------------------------------------------------

TEST_CASE("gradient check: depthwise conv") {
  Rng rng(41);
  for (int trial = 0; trial < 8; ++trial) {
    const int ch = 1 + int(rng.below(4));
    const int len = 10 + int(rng.below(20));
    const int k = 1 + int(rng.below(std::uint64_t(std::min(len, 5))));
    auto x = random_tensor(ch, len, rng);
    auto kern = random_depthwise(ch, k, rng);
    auto y = depthwise_conv1d(x, kern);
    Tensor2<double> up(y.channels, y.length);
    for (auto& v : up.data) v = rng.normal();

    // scalar loss: <up, y>
    auto loss_at = [&](const Tensor2<double>& xx, const DepthwiseKernel<double>& kk) {
      auto yy = depthwise_conv1d(xx, kk);
      double s = 0.0;
      for (std::size_t i = 0; i < yy.data.size(); ++i) s += up.data[i] * yy.data[i];
      return s;
    };
    auto grads = depthwise_conv1d_backward(x, kern, up);

    std::vector<double> point = x.data;
    double err = gradient_check(
        [&](std::span<const double> p) {
          Tensor2<double> xx = x;
          xx.data.assign(p.begin(), p.end());
          return loss_at(xx, kern);
        },
        point, grads.dx.data);
    CHECK(err < 1e-4);

    point = kern.w;
    err = gradient_check(
        [&](std::span<const double> p) {
          DepthwiseKernel<double> kk = kern;
          kk.w.assign(p.begin(), p.end());
          return loss_at(x, kk);
        },
        point, grads.dk.w);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("gradient check: pointwise conv") {
  Rng rng(43);
  for (int trial = 0; trial < 8; ++trial) {
    const int ch = 1 + int(rng.below(4));
    const int len = 6 + int(rng.below(24));
    const int filters = 1 + int(rng.below(5));
    auto x = random_tensor(ch, len, rng);
    auto kern = random_pointwise(filters, ch, rng);
    auto y = pointwise_conv1d(x, kern);
    Tensor2<double> up(y.channels, y.length);
    for (auto& v : up.data) v = rng.normal();

    auto loss_at = [&](const Tensor2<double>& xx, const PointwiseKernel<double>& kk) {
      auto yy = pointwise_conv1d(xx, kk);
      double s = 0.0;
      for (std::size_t i = 0; i < yy.data.size(); ++i) s += up.data[i] * yy.data[i];
      return s;
    };
    auto grads = pointwise_conv1d_backward(x, kern, up);

    std::vector<double> point = x.data;
    double err = gradient_check(
        [&](std::span<const double> p) {
          Tensor2<double> xx = x;
          xx.data.assign(p.begin(), p.end());
          return loss_at(xx, kern);
        },
        point, grads.dx.data);
    CHECK(err < 1e-4);

    point = kern.w;
    err = gradient_check(
        [&](std::span<const double> p) {
          PointwiseKernel<double> kk = kern;
          kk.w.assign(p.begin(), p.end());
          return loss_at(x, kk);
        },
        point, grads.dk.w);
    CHECK(err < 1e-4);

    point = kern.b;
    err = gradient_check(
        [&](std::span<const double> p) {
          PointwiseKernel<double> kk = kern;
          kk.b.assign(p.begin(), p.end());
          return loss_at(x, kk);
        },
        point, grads.dk.b);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("gradient check: dense") {
  Rng rng(47);
  for (int trial = 0; trial < 6; ++trial) {
    const int in_dim = 4 + int(rng.below(24));
    const int out_dim = 2 + int(rng.below(5));
    std::vector<double> x(in_dim), w(std::size_t(out_dim) * in_dim), b(out_dim);
    for (auto& v : x) v = rng.normal();
    for (auto& v : w) v = rng.normal() * 0.5;
    for (auto& v : b) v = rng.normal() * 0.1;
    std::vector<double> up(out_dim);
    for (auto& v : up) v = rng.normal();

    auto loss_at = [&](const std::vector<double>& xx, const std::vector<double>& ww,
                       const std::vector<double>& bb) {
      auto y = dense(xx, ww, bb);
      double s = 0.0;
      for (int i = 0; i < out_dim; ++i) s += up[i] * y[i];
      return s;
    };

    std::vector<double> dx(in_dim), dw(w.size()), db(out_dim);
    dense_backward(x.data(), in_dim, w.data(), out_dim, up.data(), dx.data(), dw.data(),
                   db.data());

    std::vector<double> point = x;
    double err = gradient_check(
        [&](std::span<const double> p) {
          return loss_at({p.begin(), p.end()}, w, b);
        },
        point, dx);
    CHECK(err < 1e-4);

    point = w;
    err = gradient_check(
        [&](std::span<const double> p) {
          return loss_at(x, {p.begin(), p.end()}, b);
        },
        point, dw);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("gradient check: full block depthwise->pointwise->relu->maxpool") {
  Rng rng(53);
  for (int trial = 0; trial < 6; ++trial) {
    const int ch = 1 + int(rng.below(3));
    const int len = 20 + int(rng.below(30));
    const int k = 2 + int(rng.below(4));
    const int filters = 2 + int(rng.below(4));
    const int pool = 1 + int(rng.below(3));
    auto x = random_tensor(ch, len, rng);
    auto dk = random_depthwise(ch, k, rng);
    auto pk = random_pointwise(filters, ch, rng);

    auto forward_loss = [&](const Tensor2<double>& xx, const DepthwiseKernel<double>& dkk,
                            const PointwiseKernel<double>& pkk, Tensor2<double>* up_out,
                            MaxPoolTape* tape, Tensor2<double>* conv_out,
                            Tensor2<double>* pre_out) {
      auto conv = depthwise_conv1d(xx, dkk);
      auto pre = pointwise_conv1d(conv, pkk);
      auto act = relu(pre);
      auto pooled = maxpool1d(act, pool, tape);
      if (conv_out) *conv_out = conv;
      if (pre_out) *pre_out = pre;
      if (up_out && up_out->data.empty()) {
        *up_out = Tensor2<double>(pooled.channels, pooled.length);
        Rng r2(99);
        for (auto& v : up_out->data) v = r2.normal();
      }
      double s = 0.0;
      for (std::size_t i = 0; i < pooled.data.size(); ++i)
        s += up_out->data[i] * pooled.data[i];
      return s;
    };

    Tensor2<double> up, conv, pre;
    MaxPoolTape tape;
    forward_loss(x, dk, pk, &up, &tape, &conv, &pre);

    // analytic chain
    auto d_pool = maxpool1d_backward(tape, up);
    Tensor2<double> d_pre(pre.channels, pre.length);
    relu_backward(pre.data.data(), d_pool.data.data(), pre.data.size(),
                  d_pre.data.data());
    auto pw = pointwise_conv1d_backward(conv, pk, d_pre);
    auto dw = depthwise_conv1d_backward(x, dk, pw.dx);

    // max-pool argmax flips under perturbation make the loss only piecewise
    // smooth; exact ties are measure-zero for random data, so the checks
    // below stay clean at eps=1e-4
    std::vector<double> point = dk.w;
    double err = gradient_check(
        [&](std::span<const double> p) {
          DepthwiseKernel<double> kk = dk;
          kk.w.assign(p.begin(), p.end());
          return forward_loss(x, kk, pk, &up, nullptr, nullptr, nullptr);
        },
        point, dw.dk.w);
    CHECK(err < 1e-4);

    point = pk.w;
    err = gradient_check(
        [&](std::span<const double> p) {
          PointwiseKernel<double> kk = pk;
          kk.w.assign(p.begin(), p.end());
          return forward_loss(x, dk, kk, &up, nullptr, nullptr, nullptr);
        },
        point, pw.dk.w);
    CHECK(err < 1e-4);

    point = x.data;
    err = gradient_check(
        [&](std::span<const double> p) {
          Tensor2<double> xx = x;
          xx.data.assign(p.begin(), p.end());
          return forward_loss(xx, dk, pk, &up, nullptr, nullptr, nullptr);
        },
        point, dw.dx.data);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("float instantiation matches double forward closely") {
  Rng rng(61);
  auto xd = random_tensor(3, 40, rng);
  auto kd = random_depthwise(3, 5, rng);
  Tensor2<float> xf(3, 40);
  DepthwiseKernel<float> kf(3, 5);
  for (std::size_t i = 0; i < xd.data.size(); ++i) xf.data[i] = float(xd.data[i]);
  for (std::size_t i = 0; i < kd.w.size(); ++i) kf.w[i] = float(kd.w[i]);
  // re-read the rounded values so both paths see identical inputs
  for (std::size_t i = 0; i < xd.data.size(); ++i) xd.data[i] = double(xf.data[i]);
  for (std::size_t i = 0; i < kd.w.size(); ++i) kd.w[i] = double(kf.w[i]);
  auto yd = depthwise_conv1d(xd, kd);
  auto yf = depthwise_conv1d(xf, kf);
  for (std::size_t i = 0; i < yd.data.size(); ++i)
    CHECK(double(yf.data[i]) ==
          doctest::Approx(yd.data[i]).epsilon(1e-6).scale(std::abs(yd.data[i]) + 1.0));
}

TEST_CASE("fused pointwise+relu+pool equals the primitive composition") {
  Rng rng(71);
  for (int trial = 0; trial < 20; ++trial) {
    const int ch = 1 + int(rng.below(6));
    const int len = 16 + int(rng.below(1200));
    const int filters = 1 + int(rng.below(8));
    const int pool = 1 + int(rng.below(5));
    auto x = random_tensor(ch, len, rng);
    auto pk = random_pointwise(filters, ch, rng);

    MaxPoolTape tape;
    auto expected = maxpool1d(relu(pointwise_conv1d(x, pk)), pool, &tape);

    Tensor2<double> pooled(filters, len / pool);
    std::vector<std::int32_t> argmax(pooled.size());
    std::vector<double> scratch(static_cast<std::size_t>(kPointwiseBlock));
    pointwise_relu_pool(x.data.data(), ch, len, pk.w.data(), pk.b.data(), filters,
                        pool, pooled.data.data(), argmax.data(), scratch.data());

    REQUIRE(pooled.length == expected.length);
    for (std::size_t i = 0; i < pooled.data.size(); ++i) {
      CHECK(pooled.data[i] == doctest::Approx(expected.data[i]).epsilon(1e-12));
      CHECK(argmax[i] == tape.argmax[i]);
    }
  }
}

TEST_CASE("fused pool+relu backward equals the primitive composition") {
  Rng rng(73);
  for (int trial = 0; trial < 20; ++trial) {
    const int ch = 1 + int(rng.below(4));
    const int len = 8 + int(rng.below(64));
    const int pool = 1 + int(rng.below(4));
    auto pre = random_tensor(ch, len, rng);
    auto act = relu(pre);
    MaxPoolTape tape;
    auto pooled = maxpool1d(act, pool, &tape);
    Tensor2<double> dy(pooled.channels, pooled.length);
    for (auto& v : dy.data) v = rng.normal();

    auto d_pool = maxpool1d_backward(tape, dy);
    Tensor2<double> expected(ch, len);
    relu_backward(pre.data.data(), d_pool.data.data(), pre.data.size(),
                  expected.data.data());

    Tensor2<double> fused(ch, len);
    maxpool_relu_backward(tape.argmax.data(), pooled.data.data(), dy.data.data(), ch,
                          len, pooled.length, fused.data.data());
    for (std::size_t i = 0; i < fused.data.size(); ++i)
      CHECK(fused.data[i] == expected.data[i]);
  }
}
