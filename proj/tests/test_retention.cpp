#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "recall/retention.hpp"
#include "test_support.hpp"

using namespace recall;
using namespace recall::testing;

namespace {

constexpr double kSoftmaxHi = 0.669761549326656926;  // softmax([1/sqrt2, 0])[0]
constexpr double kSoftmaxLo = 0.330238450673343074;

RetentionParams identity_params(std::size_t d) {
  return {Matrix::identity(d), Matrix::identity(d), Matrix::identity(d), Matrix::identity(d)};
}

MemoryState two_slot_memory() {
  MemoryState mem = empty_memory(2, 2);
  mem = write_append(mem, Matrix::from_rows({{1, 0}}));
  mem = write_append(mem, Matrix::from_rows({{0, 1}}));
  return mem;
}

Matrix row_of(double v, std::size_t d = 2) { return Matrix::filled(1, d, v); }

}  // namespace

TEST_CASE("read from empty memory is zero") {
  Rng rng(1);
  const RetentionParams p = random_retention(3, 2, rng);
  const auto read = retention_read(random_matrix(4, 3, rng), empty_memory(5, 3), p);
  CHECK(read.output == Matrix(4, 3));
  CHECK(read.weights == Matrix(4, 5));
}

TEST_CASE("read with one occupied slot puts all weight on it") {
  Rng rng(2);
  const RetentionParams p = random_retention(3, 2, rng);
  MemoryState mem = empty_memory(4, 3);
  mem = write_append(mem, random_matrix(1, 3, rng));
  mem = write_append(mem, random_matrix(1, 3, rng));
  mem = compact(mem, RetentionConfig{.compaction_floor = 1.0});
  REQUIRE(mem.occupied_count() == 1);
  const std::size_t slot = mem.occupied[0] ? 0 : 1;
  const auto read = retention_read(random_matrix(3, 3, rng), mem, p);
  const Matrix vr = matmul(mem.slots, p.value);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(read.weights(i, slot) == 1.0);
    for (std::size_t j = 0; j < 3; ++j) CHECK(read.output(i, j) == doctest::Approx(vr(slot, j)).epsilon(1e-15));
  }
}

TEST_CASE("read with two slots and identity projections") {
  const auto read = retention_read(Matrix::from_rows({{1, 0}}), two_slot_memory(), identity_params(2));
  CHECK(read.weights(0, 0) == doctest::Approx(kSoftmaxHi).epsilon(1e-15));
  CHECK(read.weights(0, 1) == doctest::Approx(kSoftmaxLo).epsilon(1e-15));
  CHECK(read.output(0, 0) == doctest::Approx(kSoftmaxHi).epsilon(1e-15));
  CHECK(read.output(0, 1) == doctest::Approx(kSoftmaxLo).epsilon(1e-15));
}

TEST_CASE("read weights and convex hull properties") {
  Rng rng(3);
  const RetentionParams p = random_retention(4, 3, rng);
  for (int trial = 0; trial < 100; ++trial) {
    const MemoryState mem = random_memory(5, 4, rng.below(12), rng);
    const auto read = retention_read(random_matrix(3, 4, rng, -2, 2), mem, p);
    const Matrix vr = matmul(mem.slots, p.value);
    for (std::size_t i = 0; i < 3; ++i) {
      double sum = 0.0;
      for (std::size_t s = 0; s < 5; ++s) {
        if (!mem.occupied[s]) CHECK(read.weights(i, s) == 0.0);
        sum += read.weights(i, s);
      }
      CHECK(std::abs(sum - (mem.occupied_count() ? 1.0 : 0.0)) < 1e-12);
      if (mem.occupied_count() == 0) continue;
      for (std::size_t j = 0; j < 4; ++j) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t s = 0; s < 5; ++s)
          if (mem.occupied[s]) lo = std::min(lo, vr(s, j)), hi = std::max(hi, vr(s, j));
        CHECK(read.output(i, j) >= lo - 1e-12);
        CHECK(read.output(i, j) <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("write vector is the token mean") {
  CHECK(make_write_vector(Matrix::from_rows({{4, -2}})) == Matrix::from_rows({{4, -2}}));
  CHECK(make_write_vector(Matrix::from_rows({{1, 1}, {-1, -1}})) == Matrix::from_rows({{0, 0}}));
  CHECK(make_write_vector(Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}})) == Matrix::from_rows({{3, 4}}));
  CHECK_THROWS_AS(make_write_vector(Matrix(0, 2)), EmptyInputError);
}

TEST_CASE("append fills the lowest free slot") {
  MemoryState mem = write_append(empty_memory(3, 2), Matrix::from_rows({{1, 2}}));
  CHECK(mem.occupied == std::vector<bool>{true, false, false});
  CHECK(mem.slots == Matrix::from_rows({{1, 2}, {0, 0}, {0, 0}}));
  CHECK(mem.insert_seq == std::vector<std::uint64_t>{1, 0, 0});
  CHECK(mem.next_seq == 2);
}

TEST_CASE("append into a full memory evicts the oldest slot") {
  MemoryState mem = empty_memory(3, 1);
  mem.occupied = {true, true, true};
  mem.insert_seq = {5, 3, 4};
  mem.usage = {0.2, 0.7, 0.1};
  mem.slots = Matrix::from_rows({{50}, {30}, {40}});
  mem.next_seq = 6;
  const MemoryState out = write_append(mem, Matrix::from_rows({{60}}));
  CHECK(out.slots == Matrix::from_rows({{50}, {60}, {40}}));
  CHECK(out.insert_seq == std::vector<std::uint64_t>{5, 6, 4});
  CHECK(out.usage == std::vector<double>{0.2, 0.0, 0.1});
  CHECK(out.next_seq == 7);
}

TEST_CASE("five appends into capacity three keep the last three") {
  MemoryState mem = empty_memory(3, 1);
  for (int i = 1; i <= 5; ++i) mem = write_append(mem, Matrix::from_rows({{double(i)}}));
  CHECK(mem.slots == Matrix::from_rows({{4}, {5}, {3}}));
}

TEST_CASE("append is FIFO for every sequence length up to 10 and capacity up to 4") {
  for (std::size_t m = 1; m <= 4; ++m) {
    for (std::size_t t = 0; t <= 10; ++t) {
      MemoryState mem = empty_memory(m, 1);
      for (std::size_t i = 0; i < t; ++i) mem = write_append(mem, Matrix::from_rows({{double(i + 1)}}));
      // Replay: write i lands in slot i mod m.
      for (std::size_t s = 0; s < m; ++s) {
        if (s >= t) {
          CHECK_FALSE(mem.occupied[s]);
          continue;
        }
        const std::size_t last = s + ((t - 1 - s) / m) * m;
        CHECK(mem.slots(s, 0) == double(last + 1));
        CHECK(mem.insert_seq[s] == last + 1);
      }
      CHECK(memory_invariant_violation(mem) == std::nullopt);
    }
  }
}

TEST_CASE("blend into a single slot replaces it with the transformed update") {
  Rng rng(4);
  const RetentionParams p = random_retention(3, 2, rng);
  MemoryState mem = write_append(empty_memory(2, 3), random_matrix(1, 3, rng));
  mem.usage[0] = 0.25;
  const Matrix u = random_matrix(1, 3, rng);
  const auto result = write_blend(mem, u, p);
  CHECK(result.status == BlendStatus::Blended);
  CHECK(result.weights == Matrix::from_rows({{1, 0}}));
  CHECK(result.memory.slots == set_row(Matrix(2, 3), 0, matmul(u, p.update)));
  CHECK(result.memory.insert_seq == mem.insert_seq);
  CHECK(result.memory.usage == mem.usage);
}

TEST_CASE("blend into two identical slots splits evenly") {
  MemoryState mem = empty_memory(2, 2);
  mem = write_append(mem, Matrix::from_rows({{1, 1}}));
  mem = write_append(mem, Matrix::from_rows({{1, 1}}));
  const auto result = write_blend(mem, Matrix::from_rows({{3, -1}}), identity_params(2));
  CHECK(result.weights == Matrix::from_rows({{0.5, 0.5}}));
  CHECK(result.memory.slots == Matrix::from_rows({{2, 0}, {2, 0}}));
}

TEST_CASE("blend with two distinct slots") {
  const auto result = write_blend(two_slot_memory(), Matrix::from_rows({{1, 0}}), identity_params(2));
  CHECK(result.weights(0, 0) == doctest::Approx(kSoftmaxHi).epsilon(1e-15));
  CHECK(result.weights(0, 1) == doctest::Approx(kSoftmaxLo).epsilon(1e-15));
  CHECK(result.memory.slots(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(result.memory.slots(0, 1) == 0.0);
  CHECK(result.memory.slots(1, 0) == doctest::Approx(kSoftmaxLo).epsilon(1e-15));
  CHECK(result.memory.slots(1, 1) == doctest::Approx(kSoftmaxHi).epsilon(1e-15));
}

TEST_CASE("blend into empty memory appends the transformed update") {
  Rng rng(5);
  const RetentionParams p = random_retention(3, 2, rng);
  const Matrix u = random_matrix(1, 3, rng);
  const auto result = write_blend(empty_memory(3, 3), u, p);
  CHECK(result.status == BlendStatus::AppendedFallback);
  CHECK(result.weights == Matrix(1, 3));
  CHECK(result.memory.occupied == std::vector<bool>{true, false, false});
  CHECK(bit_identical(result.memory.slots, set_row(Matrix(3, 3), 0, matmul(u, p.update))));
  CHECK(result.memory.next_seq == 2);
}

TEST_CASE("blend weights sum to one and updates are convex") {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const RetentionParams p = random_retention(4, 4, rng);
    MemoryState mem = random_memory(4, 4, 1 + rng.below(10), rng);
    if (mem.occupied_count() == 0) mem = write_append(mem, random_matrix(1, 4, rng));
    const Matrix u = random_matrix(1, 4, rng, -2, 2);
    const auto result = write_blend(mem, u, p);
    const Matrix uhat = matmul(u, p.update);
    double sum = 0.0;
    for (std::size_t s = 0; s < 4; ++s) {
      sum += result.weights(0, s);
      if (!mem.occupied[s]) {
        CHECK(result.weights(0, s) == 0.0);
        continue;
      }
      for (std::size_t j = 0; j < 4; ++j) {
        const double lo = std::min(mem.slots(s, j), uhat(0, j)), hi = std::max(mem.slots(s, j), uhat(0, j));
        CHECK(result.memory.slots(s, j) >= lo);
        CHECK(result.memory.slots(s, j) <= hi);
      }
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
    CHECK(memory_invariant_violation(result.memory) == std::nullopt);
  }
}

TEST_CASE("write gate") {
  RetentionConfig c;
  c.gate = WriteGate::always();
  CHECK(gate_write({-1e9}, c));
  c.gate = WriteGate::never();
  CHECK_FALSE(gate_write({1e9}, c));
  c.gate = WriteGate::at_least(0.5);
  CHECK(gate_write({0.5}, c));
  CHECK_FALSE(gate_write({0.49}, c));
}

TEST_CASE("usage update") {
  MemoryState mem = two_slot_memory();
  mem.usage = {1.0, 2.0};
  const Matrix w = Matrix::from_rows({{0.25, 0.75}, {0.75, 0.25}});
  CHECK(update_usage(mem, w, 0.0).usage == std::vector<double>{0.5, 0.5});
  CHECK(update_usage(mem, Matrix(3, 2), 0.5).usage == std::vector<double>{0.5, 1.0});
  CHECK(update_usage(mem, w, 0.9).usage[0] == doctest::Approx(1.4).epsilon(1e-15));
  CHECK_THROWS_AS(update_usage(mem, Matrix(1, 3), 0.9), ShapeError);

  MemoryState partial = write_append(empty_memory(2, 2), row_of(1));
  CHECK(update_usage(partial, Matrix::from_rows({{1, 0}}), 0.9).usage == std::vector<double>{1.0, 0.0});
}

TEST_CASE("compaction examples") {
  RetentionConfig c;
  c.compaction_floor = 0.5;

  MemoryState high = two_slot_memory();
  high.usage = {0.5, 0.9};
  CHECK(compact(high, c).slots == high.slots);
  CHECK(compact(high, c).usage == high.usage);

  MemoryState one_low = two_slot_memory();
  one_low.usage = {0.1, 0.9};
  CHECK(compact(one_low, c).occupied == one_low.occupied);

  MemoryState pair = empty_memory(2, 2);
  pair = write_append(pair, Matrix::from_rows({{2, 0}}));
  pair = write_append(pair, Matrix::from_rows({{0, 2}}));
  pair.usage = {0.1, 0.3};
  const MemoryState merged = compact(pair, c);
  CHECK(merged.occupied_count() == 1);
  CHECK(merged.occupied[1]);
  CHECK(merged.slots(1, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(merged.slots(1, 1) == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(merged.usage[1] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(merged.insert_seq[1] == 2);
  CHECK(memory_invariant_violation(merged) == std::nullopt);

  pair.usage = {0.0, 0.0};
  CHECK(compact(pair, c).slots == Matrix::from_rows({{0, 0}, {1, 1}}));
}

TEST_CASE("compaction breaks usage ties by insertion order") {
  MemoryState mem = empty_memory(3, 1);
  for (int i = 1; i <= 3; ++i) mem = write_append(mem, Matrix::from_rows({{double(i)}}));
  mem.usage = {0.1, 0.1, 0.1};
  RetentionConfig c;
  c.compaction_floor = 0.15;
  const MemoryState out = compact(mem, c);
  // Slots 0 and 1 merge into slot 1; the sum 0.2 then clears the floor.
  CHECK(out.occupied == std::vector<bool>{false, true, true});
  CHECK(out.slots(1, 0) == doctest::Approx(1.5).epsilon(1e-15));
}

TEST_CASE("compaction properties") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    MemoryState mem = empty_memory(6, 3);
    const std::size_t writes = rng.below(8);
    for (std::size_t i = 0; i < writes; ++i) mem = write_append(mem, random_matrix(1, 3, rng));
    for (std::size_t s = 0; s < 6; ++s)
      if (mem.occupied[s]) mem.usage[s] = rng.uniform(0, 0.6);
    RetentionConfig c;
    c.compaction_floor = rng.uniform(0, 0.8);
    const MemoryState out = compact(mem, c);

    double before = 0.0, after = 0.0;
    for (double u : mem.usage) before += u;
    for (double u : out.usage) after += u;
    CHECK(std::abs(before - after) < 1e-12);
    CHECK(out.occupied_count() <= mem.occupied_count());
    CHECK(mem.occupied_count() - out.occupied_count() <= (mem.occupied_count() ? mem.occupied_count() - 1 : 0));
    std::size_t below = 0;
    for (std::size_t s = 0; s < 6; ++s) below += out.occupied[s] && out.usage[s] < c.compaction_floor;
    CHECK(below <= 1);
    CHECK(memory_invariant_violation(out) == std::nullopt);
    CHECK(out.next_seq == mem.next_seq);
  }
}

TEST_CASE("slot scoring") {
  Rng rng(8);
  const RetentionParams p = random_retention(2, 2, rng);
  CHECK(score_slots(Matrix(1, 2), empty_memory(3, 2), p, 2).empty());

  MemoryState one = write_append(empty_memory(3, 2), row_of(0.5));
  one = write_append(one, row_of(1.5));
  one = compact(one, RetentionConfig{.compaction_floor = 1.0});
  const auto single = score_slots(Matrix::from_rows({{1, 0}}), one, p, 3);
  REQUIRE(single.size() == 1);
  CHECK(single[0].slot == 1);
  CHECK(single[0].score == 1.0);

  const auto top = score_slots(Matrix::from_rows({{1, 0}}), two_slot_memory(), identity_params(2), 1);
  REQUIRE(top.size() == 1);
  CHECK(top[0].slot == 0);
  CHECK(top[0].score == doctest::Approx(kSoftmaxHi).epsilon(1e-15));

  MemoryState tied = empty_memory(3, 2);
  tied = write_append(tied, row_of(1));
  tied = write_append(tied, row_of(1));
  const auto ranked = score_slots(Matrix::from_rows({{1, 0}}), tied, identity_params(2), 5);
  REQUIRE(ranked.size() == 2);
  CHECK(ranked[0].slot == 0);
  CHECK(ranked[1].slot == 1);
  CHECK_THROWS(score_slots(Matrix(1, 2), tied, p, 0));
}

TEST_CASE("read gradients match finite differences") {
  Rng rng(9);
  MemoryState mem = random_memory(4, 3, 8, rng);
  while (mem.occupied_count() < 2) mem = write_append(mem, random_matrix(1, 3, rng));
  const Matrix r = random_matrix(2, 3, rng);
  const RetentionParams p = random_retention(3, 2, rng);
  const NamedTensors tensors{{"x", random_matrix(2, 3, rng)}, {"wr_q", p.query}, {"wr_k", p.key}, {"wr_v", p.value}};
  const auto reports = check_gradients(
      tensors,
      [&](Tape& tape, const std::vector<Var>& v) {
        RetentionWeights<Var> w{v[1], v[2], v[3], tape.constant(p.update)};
        return weighted_sum(retention_read(v[0], lift_memory(tape, mem), w).output, r);
      },
      [&](const std::vector<Matrix>& m) {
        RetentionParams w{m[1], m[2], m[3], p.update};
        return weighted_sum(retention_read(m[0], mem, w).output, r);
      });
  for (const auto& rep : reports) {
    INFO(rep.param_name);
    CHECK(rep.max_rel_error < 1e-4);
  }
}

TEST_CASE("retention operations are bit reproducible") {
  Rng a(10), b(10);
  const MemoryState x = random_memory(5, 4, 60, a);
  const MemoryState y = random_memory(5, 4, 60, b);
  CHECK(bit_identical(x.slots, y.slots));
  CHECK(x.occupied == y.occupied);
  CHECK(x.insert_seq == y.insert_seq);
  CHECK(x.usage == y.usage);
  CHECK(x.next_seq == y.next_seq);
  CHECK(memory_invariant_violation(x) == std::nullopt);
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(RetentionConfig{}.validate());
  CHECK_THROWS(RetentionConfig{.capacity = 0}.validate());
  CHECK_THROWS(RetentionConfig{.decay_rate = 1.5}.validate());
  CHECK_THROWS(RetentionConfig{.read_heads = 2}.validate());
}
