#include <catch2/catch_amalgamated.hpp>

#include <advdrop/tensor.hpp>

#include "properties.hpp"

using namespace advdrop;
using props::fd_max_err;

namespace {

Tensor<double> positive_randn(std::vector<std::size_t> s, Rng& rng) {
  auto t = Tensor<double>::randn(std::move(s), rng, 1.0);
  for (auto& v : t.data) v = std::abs(v) + 0.5;
  return t;
}

// Keeps values away from the relu / clamp kink so central differences hold.
Tensor<double> kink_free_randn(std::vector<std::size_t> s, Rng& rng,
                               double kink) {
  auto t = Tensor<double>::randn(std::move(s), rng, 1.0);
  for (auto& v : t.data)
    if (std::abs(v - kink) < 1e-3) v = kink + 0.1;
  return t;
}

}  // namespace

TEST_CASE("matmul forward matches triple loop", "[tensor]") {
  Rng rng(11);
  auto A = Tensor<double>::randn({7, 5}, rng, 1.0);
  auto B = Tensor<double>::randn({5, 3}, rng, 1.0);
  Tape<double> t;
  auto C = t.matmul(t.leaf(A), t.leaf(B));
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 5; ++k) acc += A(i, k) * B(k, j);
      REQUIRE(C.value()(i, j) == Catch::Approx(acc).margin(1e-12));
    }
}

TEST_CASE("float matmul tracks double within 1e-4", "[tensor]") {
  Rng rng(12);
  auto A = Tensor<double>::randn({16, 24}, rng, 1.0);
  auto B = Tensor<double>::randn({24, 8}, rng, 1.0);
  Tensor<float> Af = Tensor<float>::zeros(A.shape);
  Tensor<float> Bf = Tensor<float>::zeros(B.shape);
  for (std::size_t i = 0; i < A.numel(); ++i) Af[i] = static_cast<float>(A[i]);
  for (std::size_t i = 0; i < B.numel(); ++i) Bf[i] = static_cast<float>(B[i]);
  Tape<double> td;
  Tape<float> tf;
  auto Cd = td.matmul(td.leaf(A), td.leaf(B));
  auto Cf = tf.matmul(tf.leaf(Af), tf.leaf(Bf));
  for (std::size_t i = 0; i < Cd.value().numel(); ++i) {
    const double ref = Cd.value()[i];
    const double got = static_cast<double>(Cf.value()[i]);
    REQUIRE(std::abs(got - ref) <= 1e-4 * std::max(1.0, std::abs(ref)));
  }
}

TEST_CASE("per-op gradients match finite differences", "[tensor]") {
  Rng rng(21);
  const double tol = 1e-6;

  SECTION("matmul chain") {
    std::vector<Tensor<double>> leaves = {
        Tensor<double>::randn({4, 3}, rng, 1.0),
        Tensor<double>::randn({3, 2}, rng, 1.0)};
    auto g = [](Tape<double>& t, std::vector<Var<double>>& v) {
      return t.mean_all(t.sigmoid(t.matmul(v[0], v[1])));
    };
    REQUIRE(fd_max_err(leaves, g) < tol);
  }

  SECTION("matmul_bt chain") {
    std::vector<Tensor<double>> leaves = {
        Tensor<double>::randn({4, 3}, rng, 1.0),
        Tensor<double>::randn({5, 3}, rng, 1.0)};
    auto g = [](Tape<double>& t, std::vector<Var<double>>& v) {
      return t.mean_all(t.softplus(t.matmul_bt(v[0], v[1])));
    };
    REQUIRE(fd_max_err(leaves, g) < tol);
  }

  SECTION("add and mul") {
    std::vector<Tensor<double>> leaves = {
        Tensor<double>::randn({3, 4}, rng, 1.0),
        Tensor<double>::randn({3, 4}, rng, 1.0)};
    auto g = [](Tape<double>& t, std::vector<Var<double>>& v) {
      return t.sum_all(t.mul(t.add(v[0], v[1]), v[0]));
    };
    REQUIRE(fd_max_err(leaves, g) < tol);
  }

  SECTION("scalar ops") {
    std::vector<Tensor<double>> leaves = {
        Tensor<double>::randn({2, 5}, rng, 1.0)};
    auto g = [](Tape<double>& t, std::vector<Var<double>>& v) {
      return t.mean_all(t.mul_scalar(t.add_scalar(v[0], 0.7), -1.4));
    };
    REQUIRE(fd_max_err(leaves, g) < tol);
  }

  SECTION("relu") {
    std::vector<Tensor<double>> leaves = {kink_free_randn({4, 4}, rng, 0.0)};
    auto g = [](Tape<double>& t, std::vector<Var<double>>& v) {
      return t.sum_all(t.relu(v[0]));
    };
    REQUIRE(fd_max_err(leaves, g) < tol);
  }

  SECTION("sigmoid softplus exp") {
    std::vector<Tensor<double>> leaves = {
        Tensor<double>::randn({3, 3}, rng, 1.0)};
    auto g = [](Tape<double>& t, std::vector<Var<double>>& v) {
      return t.mean_all(t.exp(t.mul_scalar(
          t.add(t.sigmoid(v[0]), t.softplus(v[0])), -0.5)));
    };
    REQUIRE(fd_max_err(leaves, g) < tol);
  }

  SECTION("ln") {
    std::vector<Tensor<double>> leaves = {positive_randn({4, 2}, rng)};
    auto g = [](Tape<double>& t, std::vector<Var<double>>& v) {
      return t.sum_all(t.ln(v[0]));
    };
    REQUIRE(fd_max_err(leaves, g) < tol);
  }

  SECTION("add_row mul_row") {
    std::vector<Tensor<double>> leaves = {
        Tensor<double>::randn({5, 3}, rng, 1.0),
        Tensor<double>::randn({3}, rng, 1.0),
        Tensor<double>::randn({3}, rng, 1.0)};
    auto g = [](Tape<double>& t, std::vector<Var<double>>& v) {
      return t.mean_all(t.sigmoid(t.mul_row(t.add_row(v[0], v[1]), v[2])));
    };
    REQUIRE(fd_max_err(leaves, g) < tol);
  }

  SECTION("broadcast_k") {
    std::vector<Tensor<double>> leaves = {
        Tensor<double>::randn({1}, rng, 1.0),
        Tensor<double>::randn({6}, rng, 1.0)};
    auto g = [](Tape<double>& t, std::vector<Var<double>>& v) {
      return t.sum_all(t.mul(t.broadcast_k(v[0], 6), v[1]));
    };
    REQUIRE(fd_max_err(leaves, g) < tol);
  }

  SECTION("clamp_min") {
    std::vector<Tensor<double>> leaves = {kink_free_randn({4, 3}, rng, 0.2)};
    auto g = [](Tape<double>& t, std::vector<Var<double>>& v) {
      return t.sum_all(t.mul(t.clamp_min(v[0], 0.2), v[0]));
    };
    REQUIRE(fd_max_err(leaves, g) < tol);
  }

  SECTION("axis-0 reductions") {
    std::vector<Tensor<double>> leaves = {
        Tensor<double>::randn({6, 4}, rng, 1.0),
        Tensor<double>::randn({4}, rng, 1.0)};
    auto g = [](Tape<double>& t, std::vector<Var<double>>& v) {
      auto a = t.mul(t.mean_axis0(v[0]), v[1]);
      auto b = t.mul(t.sum_axis0(v[0]), v[1]);
      return t.sum_all(t.add(a, b));
    };
    REQUIRE(fd_max_err(leaves, g) < tol);
  }

  SECTION("softmax cross-entropy") {
    std::vector<Tensor<double>> leaves = {
        Tensor<double>::randn({6, 4}, rng, 2.0)};
    const std::vector<int> labels = {0, 3, 1, 1, 2, 0};
    auto g = [&labels](Tape<double>& t, std::vector<Var<double>>& v) {
      return t.softmax_xent(t.mul_scalar(v[0], 0.9), labels);
    };
    REQUIRE(fd_max_err(leaves, g) < tol);
  }
}

TEST_CASE("matmul_bt equals matmul against transposed copy", "[tensor]") {
  Rng rng(13);
  auto A = Tensor<double>::randn({6, 4}, rng, 1.0);
  auto B = Tensor<double>::randn({5, 4}, rng, 1.0);
  Tensor<double> Bt = Tensor<double>::zeros({4, 5});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) Bt(j, i) = B(i, j);
  Tape<double> t;
  auto C1 = t.matmul_bt(t.leaf(A), t.leaf(B));
  auto C2 = t.matmul(t.leaf(A), t.leaf(Bt));
  REQUIRE(C1.value().shape == std::vector<std::size_t>({6, 5}));
  for (std::size_t i = 0; i < C1.value().numel(); ++i)
    REQUIRE(C1.value()[i] == Catch::Approx(C2.value()[i]).margin(1e-12));
}

TEST_CASE("equal logits give ln C cross-entropy", "[tensor]") {
  Tape<double> t;
  auto logits = t.leaf(Tensor<double>::full({3, 10}, 0.7));
  auto loss = t.softmax_xent(logits, {0, 5, 9});
  REQUIRE(loss.value()[0] == Catch::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("softmax cross-entropy matches direct computation", "[tensor]") {
  Rng rng(31);
  auto L = Tensor<double>::randn({5, 3}, rng, 1.5);
  const std::vector<int> labels = {2, 0, 1, 2, 2};
  Tape<double> t;
  auto loss = t.softmax_xent(t.leaf(L), labels);
  long double want = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    long double denom = 0;
    for (std::size_t c = 0; c < 3; ++c)
      denom += std::exp(static_cast<long double>(L(i, c)));
    want += std::log(denom) -
            static_cast<long double>(L(i, static_cast<std::size_t>(labels[i])));
  }
  want /= 5;
  REQUIRE(loss.value()[0] ==
          Catch::Approx(static_cast<double>(want)).epsilon(1e-12));
}

TEST_CASE("backward bookkeeping follows the tape contract",
          "[tensor][property]") {
  for (std::uint64_t seed : {5ull, 97ull}) {
    CAPTURE(seed);
    CHECK(props::tape_visits_each_node_once(seed) == "");
    CHECK(props::tape_leaf_accumulation_interior_reset(seed) == "");
    CHECK(props::tape_matches_finite_differences(seed) == "");
  }
}

TEST_CASE("param sink receives gradients and zero_grad clears them",
          "[tensor]") {
  Rng rng(41);
  Param<double> w("w", Tensor<double>::randn({2, 3}, rng, 1.0));
  Tape<double> t;
  auto loss = t.sum_all(t.sigmoid(t.leaf_of(w)));
  t.backward(loss);
  double mag = 0;
  for (double gv : w.grad.data) mag += std::abs(gv);
  REQUIRE(mag > 0);
  w.zero_grad();
  for (double gv : w.grad.data) REQUIRE(gv == 0.0);
}

TEST_CASE("shape and domain violations throw", "[tensor]") {
  Rng rng(51);
  Tape<double> t;
  auto a = t.leaf(Tensor<double>::randn({2, 3}, rng, 1.0));
  auto b = t.leaf(Tensor<double>::randn({2, 3}, rng, 1.0));
  auto c = t.leaf(Tensor<double>::randn({4, 2}, rng, 1.0));
  auto row = t.leaf(Tensor<double>::randn({4}, rng, 1.0));

  CHECK_THROWS_AS(t.matmul(a, b), std::invalid_argument);
  CHECK_THROWS_AS(t.add(a, c), std::invalid_argument);
  CHECK_THROWS_AS(t.add_row(a, row), std::invalid_argument);
  CHECK_THROWS_AS(t.mul_row(a, row), std::invalid_argument);
  CHECK_THROWS_AS(t.broadcast_k(a, 3), std::invalid_argument);
  CHECK_THROWS_AS(t.ln(t.mul_scalar(t.mul(a, a), -1.0)), std::domain_error);
  CHECK_THROWS_AS(t.softmax_xent(a, {0, 1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(t.softmax_xent(a, {0, 9}), std::out_of_range);
  CHECK_THROWS_AS(t.backward(a), std::invalid_argument);

  Tape<double> other;
  auto o = other.leaf(Tensor<double>::randn({2, 3}, rng, 1.0));
  CHECK_THROWS_AS(t.add(a, o), std::invalid_argument);
}

TEST_CASE("randn is seed-deterministic", "[tensor]") {
  Rng r1(8), r2(8);
  auto a = Tensor<double>::randn({3, 7}, r1, 0.3);
  auto b = Tensor<double>::randn({3, 7}, r2, 0.3);
  REQUIRE(a.data == b.data);
}
