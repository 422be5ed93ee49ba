#include <set>
#include <cmath>
#include <random>
#include <vector>

#include "ege/tensor.hpp"
#include "support.hpp"

using namespace ege;
using testing::leaf;
using testing::random_tensor;

namespace {

// Triple-loop product used as the reference for matmul.
std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      c[i * n + j] = s;
    }
  return c;
}

// Checks reverse-mode against central differences for every input of `build`.
void expect_gradients(const std::function<Tensor()>& build, std::vector<Tensor> inputs, double tol = 1e-4) {
  Tensor loss = build();
  backward(loss);
  for (auto& x : inputs) {
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    auto numeric = testing::numeric_grad([&] {
      NoGradGuard off;
      return build().item();
    }, x);
    CHECK(testing::relative_error(analytic, numeric) < tol);
  }
}

}  // namespace

TEST_CASE("matmul: identity, hand example, shape contract") {
  std::mt19937_64 rng(1);
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor b = random_tensor({2, 3}, rng);
  CHECK(matmul(eye, b).to_vector() == b.to_vector());

  Tensor x({2, 2}, {1, 2, 3, 4}), y({2, 2}, {5, 6, 7, 8});
  CHECK(matmul(x, y).to_vector() == std::vector<double>{19, 22, 43, 50});

  Tensor p = random_tensor({2, 3}, rng), q = random_tensor({2, 3}, rng);
  CHECK(testing::error_code_of([&] { matmul(p, q); }) == ErrorCode::dimension);
}

TEST_CASE("matmul matches the triple-loop oracle and is associative") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 20; ++t) {
    Tensor a = random_tensor({3, 5}, rng), b = random_tensor({5, 4}, rng), c = random_tensor({4, 2}, rng);
    CHECK(testing::max_abs_diff(matmul(a, b).data(), naive_matmul(a, b)) < 1e-14);
    auto left = matmul(matmul(a, b), c).to_vector();
    auto right = matmul(a, matmul(b, c)).to_vector();
    CHECK(testing::relative_error(left, right) < 1e-9);
  }
}

TEST_CASE("softmax: symmetry, values, shift invariance, sums") {
  CHECK(softmax(Tensor({2}, {0, 0}), 0).to_vector() == std::vector<double>{0.5, 0.5});

  auto s = softmax(Tensor({3}, {1, 2, 3}), 0).to_vector();
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(s[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-14));
  CHECK(s[0] == doctest::Approx(0.0900).epsilon(1e-3));
  CHECK(s[1] == doctest::Approx(0.2447).epsilon(1e-3));
  CHECK(s[2] == doctest::Approx(0.6652).epsilon(1e-3));

  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    Tensor x = random_tensor({4, 6}, rng, 5.0);
    std::vector<double> shifted = x.to_vector();
    for (auto& v : shifted) v += 17.25;
    auto a = softmax(x, 1).to_vector();
    auto b = softmax(Tensor({4, 6}, shifted), 1).to_vector();
    CHECK(testing::max_abs_diff(a, b) < 1e-12);
    for (std::size_t axis = 0; axis < 2; ++axis) {
      Tensor y = softmax(x, axis);
      const std::size_t rows = axis == 1 ? 4 : 6;
      for (std::size_t r = 0; r < rows; ++r) {
        double sum = 0;
        for (std::size_t c = 0; c < (axis == 1 ? 6u : 4u); ++c) {
          double v = axis == 1 ? y.at(r, c) : y.at(c, r);
          CHECK(v >= 0.0);
          sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
      }
    }
  }
  CHECK(std::isfinite(softmax(Tensor({2}, {1000, -1000}), 0).at(0)));
  CHECK(testing::error_code_of([] { softmax(Tensor({2}, {1, 2}), 1); }) == ErrorCode::dimension);
}

TEST_CASE("masked softmax gives padded keys zero weight") {
  std::vector<std::uint8_t> keep{1, 0, 1};
  auto y = masked_softmax(Tensor({1, 3}, {0, 5, 0}), keep).to_vector();
  CHECK(y[1] == 0.0);
  CHECK(y[0] == doctest::Approx(0.5));
}

TEST_CASE("layer_norm: constant row, hand example, zero mean") {
  Tensor g = Tensor::filled({2}, 1.0), b = Tensor::zeros({2});
  auto flat = layer_norm(Tensor({1, 2}, {4, 4}), g, b, 1e-5).to_vector();
  CHECK(flat == std::vector<double>{0, 0});

  auto y = layer_norm(Tensor({1, 2}, {1, 3}), g, b, 1e-12).to_vector();
  CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-9));

  std::mt19937_64 rng(4);
  Tensor x = random_tensor({5, 7}, rng, 3.0);
  Tensor y2 = layer_norm(x, Tensor::filled({7}, 1.0), Tensor::zeros({7}), 1e-5);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0;
    for (std::size_t c = 0; c < 7; ++c) m += y2.at(r, c);
    CHECK(std::abs(m / 7) <= 1e-6);
  }
  CHECK(testing::error_code_of([] { layer_norm(Tensor({2, 3}), Tensor({2}), Tensor({2}), 1e-5); }) ==
        ErrorCode::dimension);
}

TEST_CASE("linear: identity, hand example, batch shape") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor x({1, 2}, {1, 1});
  CHECK(linear(x, eye, Tensor::zeros({2})).to_vector() == x.to_vector());
  CHECK(linear(x, eye, Tensor({2}, {2, 3})).to_vector() == std::vector<double>{3, 4});

  std::mt19937_64 rng(5);
  Tensor x3 = random_tensor({2, 3, 4}, rng);
  Tensor y = linear(x3, random_tensor({4, 5}, rng), random_tensor({5}, rng));
  CHECK(y.shape() == Shape{2, 3, 5});
  CHECK(testing::error_code_of([&] { linear(x3, random_tensor({3, 5}, rng), Tensor({5})); }) == ErrorCode::dimension);
}

namespace {

AttentionParams random_attention(std::size_t d, std::mt19937_64& rng) {
  return {random_tensor({d, d}, rng, 0.5), random_tensor({d}, rng, 0.1), random_tensor({d, d}, rng, 0.5),
          random_tensor({d}, rng, 0.1),   random_tensor({d, d}, rng, 0.5), random_tensor({d}, rng, 0.1),
          random_tensor({d, d}, rng, 0.5), random_tensor({d}, rng, 0.1)};
}

// Straight-line attention: explicit loops, no library ops.
std::vector<double> attention_oracle(const Tensor& qi, const Tensor& ki, const Tensor& vi, std::size_t heads,
                                     const AttentionParams& p) {
  const std::size_t lq = qi.dim(0), lk = ki.dim(0), d = qi.dim(1), dh = d / heads;
  auto project = [&](const Tensor& x, const Tensor& w, const Tensor& b) {
    std::vector<double> out(x.dim(0) * d);
    for (std::size_t r = 0; r < x.dim(0); ++r)
      for (std::size_t c = 0; c < d; ++c) {
        double s = b.at(c);
        for (std::size_t i = 0; i < d; ++i) s += x.at(r, i) * w.at(i, c);
        out[r * d + c] = s;
      }
    return out;
  };
  auto q = project(qi, p.wq, p.bq), k = project(ki, p.wk, p.bk), v = project(vi, p.wv, p.bv);
  std::vector<double> merged(lq * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < lq; ++i) {
      std::vector<double> s(lk);
      double mx = -1e300;
      for (std::size_t j = 0; j < lk; ++j) {
        double dotp = 0;
        for (std::size_t c = 0; c < dh; ++c) dotp += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        s[j] = dotp / std::sqrt(double(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0;
        for (std::size_t j = 0; j < lk; ++j) acc += s[j] / z * v[j * d + h * dh + c];
        merged[i * d + h * dh + c] = acc;
      }
    }
  std::vector<double> out(lq * d);
  for (std::size_t r = 0; r < lq; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      double s = p.bo.at(c);
      for (std::size_t i = 0; i < d; ++i) s += merged[r * d + i] * p.wo.at(i, c);
      out[r * d + c] = s;
    }
  return out;
}

}  // namespace

TEST_CASE("attention: single key, identical keys, step-by-step oracle") {
  std::mt19937_64 rng(6);
  const std::size_t d = 8;
  auto p = random_attention(d, rng);

  Tensor q = random_tensor({4, d}, rng), kv = random_tensor({1, d}, rng);
  Tensor out = multi_head_attention(q, kv, kv, 2, p);
  Tensor projected = linear(linear(kv, p.wv, p.bv), p.wo, p.bo);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < d; ++c) CHECK(out.at(i, c) == doctest::Approx(projected.at(0, c)).epsilon(1e-12));

  Tensor row = random_tensor({1, d}, rng);
  Tensor same = concat({row, row, row}, 0);
  std::vector<Tensor> weights;
  multi_head_attention(q, same, random_tensor({3, d}, rng), 2, p, {}, &weights);
  REQUIRE(weights.size() == 2);
  for (const auto& w : weights)
    for (double v : w.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor x = random_tensor({4, d}, rng);
  auto got = multi_head_attention(x, x, x, 2, p).to_vector();
  CHECK(testing::max_abs_diff(got, attention_oracle(x, x, x, 2, p)) < 1e-10);

  CHECK(testing::error_code_of([&] { multi_head_attention(x, x, x, 3, p); }) == ErrorCode::config);
}

TEST_CASE("attention weights are row-stochastic") {
  std::mt19937_64 rng(7);
  auto p = random_attention(6, rng);
  std::vector<Tensor> weights;
  multi_head_attention(random_tensor({3, 6}, rng), random_tensor({5, 6}, rng), random_tensor({5, 6}, rng), 3, p, {},
                       &weights);
  for (const auto& w : weights)
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 5; ++c) s += w.at(r, c);
      CHECK(std::abs(s - 1) < 1e-12);
    }
}

TEST_CASE("backward: sum of squares, reset by default, accumulate on request") {
  Tensor x({3}, {1.0, -2.0, 0.5});
  x.set_requires_grad(true);
  backward(sum_squares(x));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{2.0, -4.0, 1.0});
  backward(sum_squares(x));
  CHECK(x.grad()[1] == -4.0);
  backward(sum_squares(x), GradMode::accumulate);
  CHECK(x.grad()[1] == -8.0);

  CHECK(testing::error_code_of([&] { backward(mul(x, x)); }) == ErrorCode::contract);
}

TEST_CASE("tape visits every node once") {
  std::mt19937_64 rng(8);
  Tensor a = leaf({2, 2}, rng);
  Tensor b = add(a, a);
  Tensor c = sum(mul(b, a));
  auto tape = GradTape::record(c);
  std::set<const void*> seen(tape.order().begin(), tape.order().end());
  CHECK(seen.size() == tape.size());
  CHECK(tape.size() == 4);  // sum, mul, add, leaf
}

TEST_CASE("reverse mode matches finite differences for every primitive over 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    std::mt19937_64 rng(seed);
    Tensor a = leaf({3, 4}, rng), b = leaf({4, 2}, rng), c = leaf({3, 4}, rng);
    Tensor g = leaf({4}, rng), beta = leaf({4}, rng), w = leaf({4, 3}, rng), bias = leaf({3}, rng);
    Tensor weights = random_tensor({3, 2}, rng);
    Tensor wrow = random_tensor({3, 4}, rng);
    auto weighted = [](const Tensor& t, const Tensor& wt) { return sum(mul(t, wt)); };

    expect_gradients([&] { return weighted(matmul(a, b), weights); }, {a, b});
    expect_gradients([&] { return weighted(add(a, c), wrow); }, {a, c});
    expect_gradients([&] { return weighted(sub(a, c), wrow); }, {a, c});
    expect_gradients([&] { return weighted(mul(a, c), wrow); }, {a, c});
    expect_gradients([&] { return weighted(gelu(a), wrow); }, {a});
    expect_gradients([&] { return weighted(softmax(a, 1), wrow); }, {a});
    expect_gradients([&] { return weighted(softmax(a, 0), wrow); }, {a});
    expect_gradients([&] { return weighted(layer_norm(a, g, beta, 1e-5), wrow); }, {a, g, beta});
    expect_gradients([&] { return sum(mul(linear(a, w, bias), linear(c, w, bias))); }, {a, w, bias});
    expect_gradients([&] { return weighted(l2_normalize(a), wrow); }, {a});
    expect_gradients([&] { return cosine_similarity(reshape(a, {12}), reshape(c, {12})); }, {a, c});
    expect_gradients([&] { return weighted(transpose(matmul(a, b)), transpose(weights)); }, {a, b});
    expect_gradients([&] { return sum(mul(mean(a, 0), g)); }, {a, g});
    expect_gradients([&] { return sum(mul(sum_axis(a, 0), g)); }, {a, g});
    std::vector<std::size_t> targets{1, 3, 0};
    expect_gradients([&] { return cross_entropy(a, targets); }, {a});
    std::vector<std::size_t> rows{2, 0, 2};
    expect_gradients([&] { return weighted(select_rows(a, rows), wrow); }, {a});
    expect_gradients([&] { return weighted(concat({slice(a, 1, 0, 2), slice(c, 1, 1, 2)}, 1), wrow); }, {a, c});
    expect_gradients([&] { return dot(reshape(a, {12}), reshape(c, {12})); }, {a, c});

    auto p = random_attention(4, rng);
    for (Tensor* t : {&p.wq, &p.wk, &p.wv, &p.wo, &p.bo}) t->set_requires_grad(true);
    expect_gradients([&] { return weighted(multi_head_attention(a, c, c, 2, p), wrow); }, {a, c, p.wq, p.wk, p.wv, p.wo, p.bo});
  }
}

TEST_CASE("forward ops are deterministic") {
  std::mt19937_64 rng(9);
  Tensor a = random_tensor({5, 8}, rng);
  auto p = random_attention(8, rng);
  auto first = multi_head_attention(a, a, a, 2, p).to_vector();
  auto second = multi_head_attention(a, a, a, 2, p).to_vector();
  CHECK(first == second);
}

TEST_CASE("non-finite values are rejected") {
  CHECK(testing::error_code_of([] { Tensor({1}, {std::nan("")}); }) == ErrorCode::numeric);
}
