#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "sfc/errors.hpp"
#include "sfc/kernels.hpp"
#include "sfc/nnops.hpp"
#include "test_support.hpp"

using namespace sfc;
using sfc::testing::grad_check;
using sfc::testing::max_abs_diff;
using sfc::testing::naive_conv;
using sfc::testing::weighted_sum;

namespace {

Tensor frames_with_scores(const std::vector<double>& scores) {
  Tensor x({2, scores.size(), 1, 2});
  auto d = x.mutable_data();
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t t = 0; t < scores.size(); ++t)
      for (std::size_t i = 0; i < 2; ++i) d[(c * scores.size() + t) * 2 + i] = (i ? -1 : 1) * scores[t];
  return x;
}

}  // namespace

TEST_CASE("conv3d identity and delta kernels") {
  std::mt19937_64 rng(1);
  Tensor x = Tensor::randn({3, 5, 4, 4}, rng);
  Conv3dLayer id = Conv3dLayer::make(3, 3, {1, 1, 1}, {1, 1, 1}, rng);
  std::fill(id.kernel.mutable_data().begin(), id.kernel.mutable_data().end(), 0.0);
  for (std::size_t c = 0; c < 3; ++c) id.kernel.mutable_data()[c * 3 + c] = 1.0;
  CHECK(max_abs_diff(conv3d(x, id).data(), x.data()) == 0.0);

  Conv3dLayer delta = Conv3dLayer::make(3, 3, {3, 1, 1}, {1, 1, 1}, rng);
  CHECK(delta.padding == Triple{1, 0, 0});
  std::fill(delta.kernel.mutable_data().begin(), delta.kernel.mutable_data().end(), 0.0);
  for (std::size_t c = 0; c < 3; ++c) delta.kernel.mutable_data()[(c * 3 + c) * 3 + 1] = 1.0;
  CHECK(max_abs_diff(conv3d(x, delta).data(), x.data()) == 0.0);
}

TEST_CASE("conv3d matches the naive loop oracle") {
  const std::vector<std::pair<Triple, Triple>> configs = {
      {{1, 1, 1}, {1, 1, 1}}, {{3, 1, 1}, {1, 1, 1}}, {{1, 3, 3}, {1, 2, 2}},
      {{3, 3, 3}, {1, 1, 1}}, {{1, 1, 1}, {1, 2, 2}}, {{3, 3, 3}, {2, 2, 2}}};
  for (std::uint64_t seed = 0; seed < 24; ++seed) {
    std::mt19937_64 rng(seed);
    const auto& [k, s] = configs[seed % configs.size()];
    Conv3dLayer l = Conv3dLayer::make(2, 3, k, s, rng);
    l.bias = Tensor::randn({3}, rng);
    Tensor x = Tensor::randn({2, 5, 4, 4}, rng);
    Tensor y = conv3d(x, l);
    Tensor ref = naive_conv(x, l);
    REQUIRE(y.shape() == ref.shape());
    CHECK(max_abs_diff(y.data(), ref.data()) < 1e-12);

    kernels::ConvGeometry g{2, 5, 4, 4, 3, k, s, l.padding};
    std::vector<double> yr(ref.numel());
    kernels::reference::conv3d_forward(g, x.data().data(), l.kernel.data().data(),
                                       l.bias.data().data(), yr.data());
    CHECK(max_abs_diff(yr, ref.data()) < 1e-12);
  }
}

TEST_CASE("conv3d batched equals per-sample and rejects channel mismatch") {
  std::mt19937_64 rng(2);
  Conv3dLayer l = Conv3dLayer::make(2, 4, {3, 3, 3}, {1, 2, 2}, rng);
  Tensor xb = Tensor::randn({3, 2, 4, 4, 4}, rng);
  Tensor yb = conv3d(xb, l);
  const std::size_t in = 2 * 64, out = yb.numel() / 3;
  for (std::size_t s = 0; s < 3; ++s) {
    Tensor xs({2, 4, 4, 4}, std::vector<double>(xb.data().begin() + s * in, xb.data().begin() + (s + 1) * in));
    Tensor ys = conv3d(xs, l);
    CHECK(max_abs_diff(ys.data(), yb.data().subspan(s * out, out)) == 0.0);
  }
  CHECK_THROWS_AS(conv3d(Tensor::zeros({3, 4, 4, 4}), l), DimensionError);
}

TEST_CASE("gemm matches the reference on awkward sizes") {
  std::mt19937_64 rng(3);
  for (auto [m, n, k] : {std::array<std::size_t, 3>{1, 1, 1}, {7, 17, 5}, {33, 65, 300},
                         {130, 19, 257}, {64, 1100, 40}}) {
    Tensor a = Tensor::randn({m, k}, rng), b = Tensor::randn({k, n}, rng);
    std::vector<double> c1(m * n, 1.0), c2(m * n, 1.0);
    kernels::gemm(m, n, k, a.data().data(), b.data().data(), c1.data(), true);
    kernels::reference::gemm(m, n, k, a.data().data(), b.data().data(), c2.data(), true);
    CHECK(max_abs_diff(c1, c2) < 1e-10);
  }
}

TEST_CASE("transposed gemm operands") {
  std::mt19937_64 rng(4);
  for (auto [m, n, k] : {std::array<std::size_t, 3>{3, 5, 2}, {13, 40, 300}, {70, 1030, 9}}) {
    Tensor a = Tensor::randn({m, k}, rng), b = Tensor::randn({k, n}, rng);
    std::vector<double> at(k * m), bt(n * k);
    kernels::transpose(m, k, a.data().data(), at.data());
    kernels::transpose(k, n, b.data().data(), bt.data());
    std::vector<double> want(m * n, 0.5);
    kernels::reference::gemm(m, n, k, a.data().data(), b.data().data(), want.data(), true);
    for (auto op_a : {kernels::Op::None, kernels::Op::Transpose}) {
      for (auto op_b : {kernels::Op::None, kernels::Op::Transpose}) {
        std::vector<double> got(m * n, 0.5);
        kernels::gemm(m, n, k, op_a == kernels::Op::None ? a.data().data() : at.data(), op_a,
                      op_b == kernels::Op::None ? b.data().data() : bt.data(), op_b, got.data(),
                      true);
        CHECK(max_abs_diff(got, want) < 1e-10);
      }
    }
  }
}

TEST_CASE("conv3d gradients") {
  const std::vector<std::pair<Triple, Triple>> configs = {
      {{3, 1, 1}, {1, 1, 1}}, {{1, 3, 3}, {1, 2, 2}}, {{3, 3, 3}, {1, 1, 1}}, {{1, 1, 1}, {1, 1, 1}}};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(50 + seed);
    const auto& [k, s] = configs[seed % configs.size()];
    Conv3dLayer l = Conv3dLayer::make(2, 2, k, s, rng);
    Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
    CHECK(grad_check({x, l.kernel, l.bias}, [&] { return weighted_sum(conv3d(x, l)); }) < 1e-4);
  }
}

TEST_CASE("frozen norm is affine and input-differentiable only") {
  std::mt19937_64 rng(4);
  FrozenNorm n = FrozenNorm::identity(2);
  n.gamma = {2.0, 0.5};
  n.beta = {0.1, -1.0};
  n.mean = {0.3, -0.2};
  n.var = {4.0, 0.25};
  Tensor x = Tensor::randn({2, 3, 2, 2}, rng);
  Tensor y = frozen_norm(x, n);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 12; ++i) {
      const double v = x[c * 12 + i];
      const double expect = n.gamma[c] * (v - n.mean[c]) / std::sqrt(n.var[c] + 1e-5) + n.beta[c];
      CHECK(std::abs(y[c * 12 + i] - expect) < 1e-12);
    }
  CHECK(grad_check({x}, [&] { return weighted_sum(frozen_norm(x, n)); }) < 1e-4);
}

TEST_CASE("residual block identity case and gradients") {
  std::mt19937_64 rng(5);
  ResidualBlock b = ResidualBlock::make(3, 3, {3, 1, 1}, {1, 3, 3}, {1, 1, 1}, rng);
  CHECK_FALSE(b.projection.has_value());
  for (Tensor* t : {&b.conv_a.kernel, &b.conv_b.kernel}) std::fill(t->mutable_data().begin(), t->mutable_data().end(), 0.0);
  Tensor x = Tensor::randn({3, 4, 4, 4}, rng);
  Tensor y = residual_block(x, b);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == std::max(0.0, x[i]));

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 r(200 + seed);
    const bool down = seed % 2 == 0;
    ResidualBlock blk = ResidualBlock::make(2, down ? 3 : 2, {3, 1, 1}, {1, 3, 3},
                                            down ? Triple{1, 2, 2} : Triple{1, 1, 1}, r);
    blk.conv_a.bias = Tensor::randn(blk.conv_a.bias.shape(), r, 0.1);
    Tensor in = Tensor::randn({2, 3, 4, 4}, r);
    Tensor out = residual_block(in, blk);
    CHECK(out.shape() == Shape{blk.c_out(), 3, down ? 2u : 4u, down ? 2u : 4u});
    std::vector<Tensor> params{in, blk.conv_a.kernel, blk.conv_b.kernel, blk.conv_b.bias};
    if (blk.projection) params.push_back(blk.projection->kernel);
    CHECK(grad_check(params, [&] { return weighted_sum(residual_block(in, blk)); }) < 1e-4);
  }
}

TEST_CASE("calibrated block norms standardize the calibration batch") {
  std::mt19937_64 rng(6);
  ResidualBlock b = ResidualBlock::make(2, 4, {3, 1, 1}, {1, 3, 3}, {1, 2, 2}, rng);
  Tensor x = Tensor::randn({3, 2, 4, 8, 8}, rng, 2.0);
  calibrate_block(x, b);
  Tensor pre = frozen_norm(conv3d(x, b.conv_a), b.norm_a);
  const std::size_t plane = 4 * 8 * 8;
  for (std::size_t c = 0; c < 4; ++c) {
    double s = 0, s2 = 0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = pre[(n * 4 + c) * plane + i];
        s += v;
        s2 += v * v;
      }
    const double cnt = 3.0 * plane;
    CHECK(std::abs(s / cnt) < 1e-9);
    CHECK(std::abs(s2 / cnt - 1.0) < 1e-4);
  }
}

TEST_CASE("topk pool selection rules") {
  auto r = topk_pool(frames_with_scores({0.1, 0.9, 0.5, 0.2}), 2);
  CHECK(r.indices == std::vector<std::size_t>{1, 2});
  CHECK(r.output.shape() == Shape{2, 2, 1, 2});
  CHECK(r.output[0] == 0.9);
  CHECK(r.output[2] == 0.5);

  CHECK(topk_pool(frames_with_scores({0.3, 0.3, 0.3, 0.3}), 2).indices == std::vector<std::size_t>{0, 1});

  std::mt19937_64 rng(7);
  Tensor x = Tensor::randn({3, 6, 2, 2}, rng);
  auto all = topk_pool(x, 6);
  CHECK(max_abs_diff(all.output.data(), x.data()) == 0.0);
  CHECK(all.indices == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});

  CHECK_THROWS_AS(topk_pool(x, 7), ConfigError);
  CHECK_THROWS_AS(topk_pool(x, 0), ConfigError);
}

TEST_CASE("topk pool properties over random inputs") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(300 + seed);
    const std::size_t t = 2 + seed % 10;
    const std::size_t keep = 1 + rng() % t;
    Tensor x = Tensor::randn({2, t, 2, 3}, rng);
    auto r = topk_pool(x, keep);
    CHECK(std::is_sorted(r.indices.begin(), r.indices.end()));
    CHECK(r.indices.size() == keep);
    auto scores = topk_scores(x);
    const double cutoff = scores[r.indices[0]];
    double min_sel = cutoff;
    for (auto i : r.indices) min_sel = std::min(min_sel, scores[i]);
    for (std::size_t i = 0; i < t; ++i)
      if (std::find(r.indices.begin(), r.indices.end(), i) == r.indices.end()) CHECK(scores[i] <= min_sel);

    const double factor = std::exp(std::uniform_real_distribution<double>(-3, 3)(rng));
    CHECK(topk_pool(scale(x, factor), keep).indices == r.indices);
  }
}

TEST_CASE("topk pool gradient reaches selected frames only") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(400 + seed);
    Tensor x = Tensor::randn({2, 6, 2, 2}, rng);
    CHECK(grad_check({x}, [&] { return weighted_sum(topk_pool(x, 3).output); }) < 1e-4);
    auto sel = topk_pool(x, 3).indices;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t t = 0; t < 6; ++t)
        if (std::find(sel.begin(), sel.end(), t) == sel.end())
          for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[(c * 6 + t) * 4 + i] == 0.0);
  }
}

TEST_CASE("avg and max pooling") {
  Tensor c = Tensor::full({2, 6, 2, 2}, 1.75);
  const Tensor ca = avg_pool_time(c, 3), cm = max_pool_time(c, 2);
  for (double v : ca.data()) CHECK(v == doctest::Approx(1.75).epsilon(1e-15));
  for (double v : cm.data()) CHECK(v == 1.75);
  CHECK(avg_pool_time(c, 3).shape() == Shape{2, 2, 2, 2});
  Tensor m = max_pool_time(Tensor({1, 4, 1, 1}, {1, 3, 2, 4}), 2);
  CHECK(m[0] == 3.0);
  CHECK(m[1] == 4.0);
  CHECK_THROWS_AS(avg_pool_time(c, 4), ConfigError);
  CHECK_THROWS_AS(max_pool_time(c, 5), ConfigError);

  std::mt19937_64 rng8(8);
  Tensor x = Tensor::randn({1, 4, 1, 1}, rng8);
  x.set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(avg_pool_time(x, 2)));
  }
  for (double g : x.grad()) CHECK(g == 0.5);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(500 + seed);
    Tensor y = Tensor::randn({2, 6, 2, 2}, rng);
    CHECK(grad_check({y}, [&] { return weighted_sum(avg_pool_time(y, 2)); }) < 1e-4);
    CHECK(grad_check({y}, [&] { return weighted_sum(max_pool_time(y, 3)); }) < 1e-4);
  }
}

TEST_CASE("cross entropy") {
  Tensor u = Tensor::zeros({2, 4});
  CHECK(cross_entropy(u, {0, 3}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  Tensor sharp({1, 3}, {0, 500, 0});
  CHECK(cross_entropy(sharp, {1}).item() < 1e-200);
  CHECK_THROWS_AS(cross_entropy(u, {0, 4}), ContractError);

  // Oracle: long double −log(exp(z_y)/Σexp(z)).
  std::mt19937_64 rng(9);
  Tensor z = Tensor::randn({3, 5}, rng, 2.0);
  std::vector<std::size_t> labels{4, 0, 2};
  long double total = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    long double s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += std::exp(static_cast<long double>(z[r * 5 + j]));
    total += -std::log(std::exp(static_cast<long double>(z[r * 5 + labels[r]])) / s);
  }
  CHECK(std::abs(cross_entropy(z, labels).item() - static_cast<double>(total / 3)) < 1e-12);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 r(600 + seed);
    Tensor logits = Tensor::randn({4, 6}, r);
    std::vector<std::size_t> y{r() % 6, r() % 6, r() % 6, r() % 6};
    CHECK(grad_check({logits}, [&] { return cross_entropy(logits, y); }) < 1e-4);
  }
}

TEST_CASE("linear and global average pool gradients") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(700 + seed);
    LinearLayer l = LinearLayer::make(5, 3, rng);
    Tensor x = Tensor::randn({2, 5}, rng);
    CHECK(grad_check({x, l.weight, l.bias}, [&] { return weighted_sum(linear(x, l)); }) < 1e-4);
    Tensor v = Tensor::randn({2, 3, 2, 2, 2}, rng);
    CHECK(grad_check({v}, [&] { return weighted_sum(global_avg_pool(v)); }) < 1e-4);
  }
}
