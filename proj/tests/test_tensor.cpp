#include <cmath>
#include <sstream>

#include "doctest.h"
#include "sfc/errors.hpp"
#include "sfc/tensor.hpp"
#include "test_support.hpp"

using namespace sfc;
using sfc::testing::grad_check;
using sfc::testing::weighted_sum;

TEST_CASE("matmul hand cases") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {5, 6, 7, 8});
  Tensor a({2, 2}, {1, 2, 3, 4});
  auto id = matmul(eye, b);
  CHECK(std::vector<double>(id.data().begin(), id.data().end()) == std::vector<double>{5, 6, 7, 8});
  auto p = matmul(a, b);
  CHECK(std::vector<double>(p.data().begin(), p.data().end()) == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a({2, 3}), b({2, 2});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum matches finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor a = Tensor::randn({3, 3}, rng), b = Tensor::randn({3, 3}, rng);
    CHECK(grad_check({a, b}, [&] { return sum(matmul(a, b)); }) < 1e-6);
  }
}

TEST_CASE("softmax values") {
  Tensor u = softmax(Tensor({4}, {0, 0, 0, 0}));
  for (double v : u.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  // Oracle: long double evaluation of exp(x_i)/Σexp(x_j).
  Tensor s = softmax(Tensor({3}, {1, 2, 3}));
  long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int i = 0; i < 3; ++i)
    CHECK(std::abs(s[i] - static_cast<double>(std::exp(static_cast<long double>(i + 1)) / z)) < 1e-12);

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::randn({4, 7}, rng, 3.0);
    Tensor shifted = Tensor::full({4, 7}, 17.5);
    Tensor a = softmax(x), b = softmax(add(x, shifted));
    CHECK(sfc::testing::max_abs_diff(a.data(), b.data()) < 1e-12);
    for (int r = 0; r < 4; ++r) {
      double row = 0;
      for (int c = 0; c < 7; ++c) {
        CHECK(a[r * 7 + c] >= 0.0);
        row += a[r * 7 + c];
      }
      CHECK(std::abs(row - 1.0) < 1e-9);
    }
  }
  Tensor big = softmax(Tensor({2}, {1000.0, 0.0}));
  CHECK(std::isfinite(big[1]));
}

TEST_CASE("backward hand cases") {
  std::mt19937_64 rng_x(1);
  Tensor x = Tensor::randn({2, 3}, rng_x).set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(x));
  }
  for (double g : x.grad()) CHECK(g == 1.0);

  Tensor y = Tensor({3}, {1, 2, 3}).set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(mul(y, y)));
  }
  CHECK(y.grad()[0] == 2.0);
  CHECK(y.grad()[1] == 4.0);
  CHECK(y.grad()[2] == 6.0);

  // Accumulates across calls until zero_grad.
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(mul(y, y)));
  }
  CHECK(y.grad()[2] == 12.0);
  y.zero_grad();
  CHECK(y.grad()[2] == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::ones({3}).set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = scale(x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("without a tape nothing is recorded") {
  Tensor x = Tensor::ones({3}).set_requires_grad(true);
  Tape tape;
  Tensor y = scale(x, 2.0);
  CHECK(tape.size() == 0);
  CHECK_THROWS_AS(backward(sum(y)), ContractError);
}

TEST_CASE("tape records in topological order") {
  Tensor x = Tensor::ones({2, 2}).set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = sum(softmax(matmul(x, x)));
  REQUIRE(tape.size() == 3);
  for (std::size_t i = 0; i < tape.size(); ++i)
    for (const auto& in : tape.nodes()[i].inputs)
      for (std::size_t j = i; j < tape.size(); ++j) CHECK(tape.nodes()[j].output != in);
}

TEST_CASE("primitive gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    Tensor a = Tensor::randn({2, 3, 4}, rng), b = Tensor::randn({2, 3, 4}, rng);
    Tensor m = Tensor::randn({3, 5}, rng);
    CHECK(grad_check({a}, [&] { return weighted_sum(softmax(a)); }) < 1e-4);
    CHECK(grad_check({a}, [&] { return weighted_sum(log_softmax(a)); }) < 1e-4);
    CHECK(grad_check({a, b}, [&] { return weighted_sum(sub(mul(a, b), scale(a, 0.5))); }) < 1e-4);
    CHECK(grad_check({a}, [&] { return weighted_sum(permute(a, {2, 0, 1})); }) < 1e-4);
    CHECK(grad_check({m}, [&] { return weighted_sum(transpose(m)); }) < 1e-4);
    CHECK(grad_check({a, b}, [&] { return weighted_sum(concat({a, b}, 1)); }) < 1e-4);
    CHECK(grad_check({a}, [&] { return mean(mul(reshape(a, {6, 4}), reshape(a, {6, 4}))); }) < 1e-4);
  }
}

TEST_CASE("permute matches index arithmetic") {
  std::mt19937_64 rng(5);
  Tensor a = Tensor::randn({2, 3, 4}, rng);
  Tensor p = permute(a, {2, 0, 1});
  REQUIRE(p.shape() == Shape{4, 2, 3});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) CHECK(p[(k * 2 + i) * 3 + j] == a[(i * 3 + j) * 4 + k]);
}

TEST_CASE("ops are deterministic") {
  std::mt19937_64 r1(7), r2(7);
  Tensor a = Tensor::randn({8, 9}, r1), b = Tensor::randn({8, 9}, r2);
  Tensor x = softmax(matmul(a, transpose(a))), y = softmax(matmul(b, transpose(b)));
  CHECK(content_hash(x) == content_hash(y));
}

TEST_CASE("serialization round trip and hash") {
  std::mt19937_64 rng(11);
  Tensor a = Tensor::randn({3, 1, 4}, rng);
  std::stringstream ss;
  write_tensor(ss, a);
  Tensor b = read_tensor(ss);
  CHECK(b.shape() == a.shape());
  CHECK(content_hash(a) == content_hash(b));
  b.mutable_data()[2] += 1e-12;
  CHECK(content_hash(a) != content_hash(b));
  std::stringstream bad("XXXX");
  CHECK_THROWS(read_tensor(bad));
}
