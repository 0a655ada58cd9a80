#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "recall/attention.hpp"
#include "test_support.hpp"

using namespace recall;
using namespace recall::testing;

namespace {

AttentionParams random_attention(std::size_t d_model, std::size_t d_k, std::size_t heads, Rng& rng) {
  AttentionParams p;
  for (std::size_t h = 0; h < heads; ++h) {
    p.query.push_back(random_matrix(d_model, d_k, rng));
    p.key.push_back(random_matrix(d_model, d_k, rng));
    p.value.push_back(random_matrix(d_model, d_k, rng));
  }
  p.output = random_matrix(heads * d_k, d_model, rng);
  return p;
}

// Straight-line loops, no shared kernels.
std::vector<std::vector<double>> loop_mha(const Matrix& x, const AttentionParams& p) {
  const std::size_t n = x.rows(), d = x.cols(), heads = p.query.size(), dk = p.query[0].cols();
  std::vector<std::vector<double>> concat(n, std::vector<double>(heads * dk, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<std::vector<double>> q(n, std::vector<double>(dk)), k = q, v = q;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dk; ++c)
        for (std::size_t j = 0; j < d; ++j) {
          q[i][c] += x(i, j) * p.query[h](j, c);
          k[i][c] += x(i, j) * p.key[h](j, c);
          v[i][c] += x(i, j) * p.value[h](j, c);
        }
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -1e300;
      for (std::size_t t = 0; t < n; ++t) {
        double dot = 0;
        for (std::size_t c = 0; c < dk; ++c) dot += q[i][c] * k[t][c];
        s[t] = dot / std::sqrt(double(dk));
        mx = std::max(mx, s[t]);
      }
      double z = 0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t c = 0; c < dk; ++c) concat[i][h * dk + c] += s[t] / z * v[t][c];
    }
  }
  std::vector<std::vector<double>> out(n, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t c = 0; c < heads * dk; ++c) out[i][j] += concat[i][c] * p.output(c, j);
  return out;
}

}  // namespace

TEST_CASE("scaled_dot_attention examples") {
  Rng rng(1);
  const Matrix q = random_matrix(3, 2, rng);
  const Matrix k1 = random_matrix(1, 2, rng);
  const Matrix v1 = Matrix::from_rows({{0.25, -4.0, 7.0}});
  const Matrix out1 = scaled_dot_attention(q, k1, v1);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(out1(i, j) == v1(0, j));

  const Matrix same_k = Matrix::from_rows({{0.3, -0.2}, {0.3, -0.2}, {0.3, -0.2}});
  const Matrix v3 = Matrix::from_rows({{1, 2}, {3, 5}, {-1, 8}});
  const Matrix mean3 = scaled_dot_attention(q, same_k, v3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(mean3(i, 0) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(mean3(i, 1) == doctest::Approx(5.0).epsilon(1e-14));
  }

  const Matrix out = scaled_dot_attention(Matrix::from_rows({{1}}), Matrix::from_rows({{1}, {-1}}),
                                          Matrix::from_rows({{1, 0}, {0, 1}}));
  CHECK(out(0, 0) == doctest::Approx(0.880797077977882444).epsilon(1e-15));
  CHECK(out(0, 1) == doctest::Approx(0.119202922022117556).epsilon(1e-15));
}

TEST_CASE("scaled_dot_attention masking and errors") {
  const Matrix q = Matrix::from_rows({{1, 0}});
  const Matrix k = Matrix::from_rows({{1, 0}, {0, 1}});
  const Matrix v = Matrix::from_rows({{1, 2}, {3, 4}});
  CHECK(scaled_dot_attention(q, k, v, ColumnMask{false, false}) == Matrix(1, 2));
  CHECK(scaled_dot_attention(q, k, v, ColumnMask{false, true}) == Matrix::from_rows({{3, 4}}));
  CHECK_THROWS_AS(scaled_dot_attention(q, Matrix(2, 3), v), ShapeError);
  CHECK_THROWS_AS(scaled_dot_attention(q, k, Matrix(3, 2)), ShapeError);
}

TEST_CASE("multi-head attention: single head, single token") {
  Rng rng(2);
  AttentionParams p = random_attention(3, 3, 1, rng);
  p.output = Matrix::identity(3);
  const Matrix x = random_matrix(1, 3, rng);
  const Matrix out = multi_head_self_attention(x, p);
  const Matrix expected = matmul(x, p.value[0]);
  for (std::size_t j = 0; j < 3; ++j) CHECK(out(0, j) == doctest::Approx(expected(0, j)).epsilon(1e-15));
}

TEST_CASE("multi-head attention: zero weights give zero output") {
  AttentionParams p;
  for (int h = 0; h < 2; ++h) {
    p.query.emplace_back(4, 2);
    p.key.emplace_back(4, 2);
    p.value.emplace_back(4, 2);
  }
  p.output = Matrix(4, 4);
  Rng rng(3);
  CHECK(multi_head_self_attention(random_matrix(3, 4, rng), p) == Matrix(3, 4));
}

TEST_CASE("multi-head attention matches a loop implementation") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const AttentionParams p = random_attention(4, 2, 2, rng);
    const Matrix x = random_matrix(3, 4, rng);
    const Matrix out = multi_head_self_attention(x, p);
    const auto oracle = loop_mha(x, p);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) CHECK(out(i, j) == doctest::Approx(oracle[i][j]).epsilon(1e-12));
  }
}

TEST_CASE("causal attention ignores later tokens") {
  Rng rng(4);
  const AttentionParams p = random_attention(4, 2, 2, rng);
  const Matrix x = random_matrix(4, 4, rng);
  Matrix changed = x;
  for (std::size_t j = 0; j < 4; ++j) changed(3, j) += 1.0;
  const Matrix a = multi_head_self_attention(x, p, true);
  const Matrix b = multi_head_self_attention(changed, p, true);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(a(i, j) == b(i, j));
}

TEST_CASE("ffn examples") {
  FfnParams zero{Matrix(2, 3), Matrix(1, 3), Matrix(3, 2), Matrix(1, 2)};
  CHECK(ffn(Matrix::from_rows({{1, -1}, {2, 5}}), zero) == Matrix(2, 2));

  FfnParams ident{Matrix::identity(2), Matrix(1, 2), Matrix::identity(2), Matrix(1, 2)};
  const Matrix nonneg = Matrix::from_rows({{0.5, 3}, {0, 2}});
  CHECK(ffn(nonneg, ident) == nonneg);

  ident.b2 = Matrix::from_rows({{1, 1}});
  CHECK(ffn(Matrix::from_rows({{1, -1}}), ident) == Matrix::from_rows({{2, 1}}));
  CHECK_THROWS_AS(ffn(Matrix(1, 3), ident), ShapeError);
}

TEST_CASE("attention output is a convex combination of value rows") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix q = random_matrix(4, 3, rng, -3, 3), k = random_matrix(6, 3, rng, -3, 3);
    const Matrix v = random_matrix(6, 5, rng, -2, 2);
    const Matrix out = scaled_dot_attention(q, k, v);
    for (std::size_t j = 0; j < 5; ++j) {
      double lo = v(0, j), hi = v(0, j);
      for (std::size_t s = 1; s < 6; ++s) {
        lo = std::min(lo, v(s, j));
        hi = std::max(hi, v(s, j));
      }
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(out(i, j) >= lo - 1e-12);
        CHECK(out(i, j) <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("permuting key/value rows together leaves attention unchanged") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix q = random_matrix(3, 4, rng), k = random_matrix(5, 4, rng), v = random_matrix(5, 2, rng);
    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    const Matrix a = scaled_dot_attention(q, k, v);
    const Matrix b = scaled_dot_attention(q, gather_rows(k, perm), gather_rows(v, perm));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-12);
  }
}

TEST_CASE("attention and ffn gradients match finite differences") {
  Rng rng(7);
  const std::size_t d = 4, dk = 2, heads = 2, n = 3;
  const AttentionParams p = random_attention(d, dk, heads, rng);
  const FfnParams f{random_matrix(d, 6, rng), random_matrix(1, 6, rng), random_matrix(6, d, rng),
                    random_matrix(1, d, rng)};
  const Matrix r = random_matrix(n, d, rng);

  NamedTensors tensors{{"x", random_matrix(n, d, rng)}};
  visit_attention("attn.", [&](const std::string& name, const Matrix& m) { tensors.emplace_back(name, m); }, p);
  visit_ffn("ffn.", [&](const std::string& name, const Matrix& m) { tensors.emplace_back(name, m); }, f);

  auto unpack = [&](const auto& values, auto& attn, auto& mlp) {
    std::size_t i = 1;
    visit_attention("", [&](const std::string&, auto& slot) { slot = values[i++]; }, attn);
    visit_ffn("", [&](const std::string&, auto& slot) { slot = values[i++]; }, mlp);
  };
  for (bool causal : {false, true}) {
    const auto reports = check_gradients(
        tensors,
        [&](Tape&, const std::vector<Var>& v) {
          AttentionWeights<Var> attn = attention_shaped_like<Var>(p);
          FfnWeights<Var> mlp;
          unpack(v, attn, mlp);
          return weighted_sum(ffn(multi_head_self_attention(v[0], attn, causal), mlp), r);
        },
        [&](const std::vector<Matrix>& m) {
          AttentionParams attn = p;
          FfnParams mlp = f;
          unpack(m, attn, mlp);
          return weighted_sum(ffn(multi_head_self_attention(m[0], attn, causal), mlp), r);
        });
    for (const auto& rep : reports) {
      INFO(rep.param_name << " causal=" << causal);
      CHECK(rep.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("xavier init stays within its bound and is seed deterministic") {
  Rng a(9), b(9);
  const Matrix w = xavier_uniform(30, 10, a);
  CHECK(bit_identical(w, xavier_uniform(30, 10, b)));
  const double bound = std::sqrt(6.0 / 40.0);
  for (double v : w.data()) CHECK(std::abs(v) <= bound);
  const FfnParams f = init_ffn(4, 8, a);
  CHECK(f.b1 == Matrix(1, 8));
  CHECK(f.b2 == Matrix(1, 4));
}
