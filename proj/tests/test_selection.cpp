#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <vector>

#include "vmoba/partition.hpp"
#include "vmoba/rng.hpp"
#include "vmoba/selection.hpp"
#include "vmoba/tensor.hpp"

using namespace vmoba;

namespace {

std::size_t ceil_frac(double tau, std::size_t pairs) {
  return static_cast<std::size_t>(std::ceil(tau * static_cast<double>(pairs)));
}

BlockLayout grid_layout(const LatentGeometry& g, const PartitionSpec& spec) {
  return build_layout(g, spec);
}

template <typename T>
SimilarityMatrixT<T> sim_from_values(std::size_t rows, std::size_t cols,
                                     std::vector<T> values,
                                     bool scaled = false) {
  return {TensorT<T>(Shape{rows, cols}, std::move(values)), scaled};
}

SimilarityMatrix random_sim(Rng& rng, std::size_t rows, std::size_t cols) {
  std::vector<float> v(rows * cols);
  for (float& x : v) x = rng.uniform_float(-3.0f, 3.0f);
  return sim_from_values<float>(rows, cols, std::move(v));
}

// Brute-force reference for the threshold rule: sort masses descending with
// the documented tie order and count how many are needed to reach tau of the
// total.
std::size_t threshold_cut_oracle(const std::vector<double>& scores,
                                 double tau) {
  double m = *std::max_element(scores.begin(), scores.end());
  std::vector<std::pair<double, std::size_t>> mass(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    mass[i] = {std::exp(scores[i] - m), i};
  }
  std::stable_sort(mass.begin(), mass.end(), [](const auto& a, const auto& b) {
    return a.first > b.first;
  });
  double total = 0.0;
  for (const auto& [e, i] : mass) total += e;
  double run = 0.0;
  for (std::size_t n = 0; n < mass.size(); ++n) {
    run += mass[n].first;
    if (run >= tau * total) return n + 1;
  }
  return mass.size();
}

// 4 frames x 2 x 3 grid, one block per frame: token t*6..t*6+5 -> block t.
struct SmallGrid {
  LatentGeometry geom{4, 2, 3, 8, 1};
  BlockLayout layout;
  SmallGrid() : layout(grid_layout(geom, PartitionSpec::temporal(1))) {}
};

}  // namespace

TEST_CASE("similarity computes scaled block-mean logits") {
  Rng rng(111);
  std::vector<float> qv(6 * 4), mv(3 * 4);
  for (float& x : qv) x = rng.uniform_float(-1.0f, 1.0f);
  for (float& x : mv) x = rng.uniform_float(-1.0f, 1.0f);
  Tensor q(Shape{6, 4}, std::move(qv));
  Tensor means(Shape{3, 4}, std::move(mv));

  auto raw = similarity(q, means, false);
  CHECK_FALSE(raw.scaled);
  auto scaled = similarity(q, means, true);
  CHECK(scaled.scaled);

  // head_dim 4 makes the scale exactly 0.5, so the scaled scores are the raw
  // scores halved bit for bit.
  for (std::size_t i = 0; i < raw.scores.numel(); ++i) {
    CHECK(scaled.scores[i] == 0.5f * raw.scores[i]);
  }
  // Entry oracle: plain dot products.
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (std::size_t p = 0; p < 4; ++p) dot += double(q.at(i, p)) * means.at(j, p);
      CHECK(std::abs(raw.scores.at(i, j) - dot) <= 1e-6);
    }
  }
  CHECK_THROWS_AS(similarity(q, Tensor(Shape{3, 5}), true),
                  std::invalid_argument);
}

TEST_CASE("global threshold matches the sort-and-accumulate oracle") {
  SmallGrid sg;
  Rng rng(222);
  for (int trial = 0; trial < 20; ++trial) {
    auto sim = random_sim(rng, sg.layout.seq_len, sg.layout.block_count);
    std::vector<double> flat(sim.scores.numel());
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = sim.scores[i];
    for (double tau : {0.15, 0.25, 0.35, 0.50, 0.80, 1.0}) {
      auto mask = select_global_threshold(sim, tau, sg.layout, false);
      CHECK(mask.selected == threshold_cut_oracle(flat, tau));
    }
  }
}

TEST_CASE("uniform scores make the threshold cut integer-exact") {
  SmallGrid sg;
  std::size_t pairs = sg.layout.seq_len * sg.layout.block_count;
  auto sim = sim_from_values<float>(
      sg.layout.seq_len, sg.layout.block_count,
      std::vector<float>(pairs, 0.7f));
  for (double tau : {0.15, 0.25, 0.35, 0.50, 1.0}) {
    auto mask = select_global_threshold(sim, tau, sg.layout, false);
    // All masses are exactly 1.0, so the shortest prefix reaching tau of the
    // total has exactly ceil(tau * pairs) entries; ties break by ascending
    // flat index, filling rows front to back.
    std::size_t want = ceil_frac(tau, pairs);
    CHECK(mask.selected == want);
    std::size_t running = 0;
    for (std::size_t q = 0; q < mask.rows; ++q) {
      for (std::size_t b = 0; b < mask.cols; ++b) {
        bool expect = running < want;
        CHECK(mask.at(q, b) == expect);
        ++running;
      }
    }
  }
}

TEST_CASE("hand-computed threshold cuts at well-separated scores") {
  // Four queries, four blocks, each row a rotation of scores 3 > 2 > 1 > 0:
  // masses e^0..e^-3 with cumulative fractions ~0.644, 0.881, 0.968, 1, all
  // far from the tested thresholds.
  auto layout4 = grid_layout(LatentGeometry{4, 1, 1, 8, 1},
                             PartitionSpec::temporal(1));
  REQUIRE(layout4.block_count == 4);
  REQUIRE(layout4.seq_len == 4);
  std::vector<float> scores{
      3, 2, 1, 0,  // query 0: descending already
      0, 3, 2, 1,  // query 1: rotated
      1, 0, 3, 2,  // query 2
      2, 1, 0, 3,  // query 3
  };
  auto sim = sim_from_values<float>(4, 4, std::move(scores));

  auto local = select_local_threshold(sim, 0.25, layout4, false);
  // 0.25 < 0.644: each row keeps only its top block.
  for (std::size_t q = 0; q < 4; ++q) CHECK(local.row_count(q) == 1);
  CHECK(local.at(0, 0));
  CHECK(local.at(1, 1));
  CHECK(local.at(2, 2));
  CHECK(local.at(3, 3));

  auto local2 = select_local_threshold(sim, 0.70, layout4, false);
  // 0.644 < 0.70 < 0.881: two blocks per row.
  for (std::size_t q = 0; q < 4; ++q) CHECK(local2.row_count(q) == 2);
  CHECK(local2.at(1, 1));
  CHECK(local2.at(1, 2));

  auto local3 = select_local_threshold(sim, 0.95, layout4, false);
  for (std::size_t q = 0; q < 4; ++q) CHECK(local3.row_count(q) == 3);

  // Global: all 16 masses pooled; the four score-3 pairs carry ~0.644 of the
  // pooled mass together, so tau=0.60 keeps exactly those four.
  auto global = select_global_threshold(sim, 0.60, layout4, false);
  CHECK(global.selected == 4);
  CHECK(global.at(0, 0));
  CHECK(global.at(1, 1));
  CHECK(global.at(2, 2));
  CHECK(global.at(3, 3));
}

TEST_CASE("threshold masks nest as tau grows") {
  SmallGrid sg;
  Rng rng(333);
  for (int trial = 0; trial < 10; ++trial) {
    auto sim = random_sim(rng, sg.layout.seq_len, sg.layout.block_count);
    const double taus[] = {0.1, 0.2, 0.35, 0.5, 0.75, 1.0};
    for (bool self : {false, true}) {
      SelectionMask prev;
      bool have_prev = false;
      for (double tau : taus) {
        auto mask = select_global_threshold(sim, tau, sg.layout, self);
        if (have_prev) CHECK(prev.subset_of(mask));
        prev = mask;
        have_prev = true;
      }
      have_prev = false;
      for (double tau : taus) {
        auto mask = select_local_threshold(sim, tau, sg.layout, self);
        if (have_prev) CHECK(prev.subset_of(mask));
        prev = mask;
        have_prev = true;
      }
    }
  }
}

TEST_CASE("top-k masks nest as k grows") {
  SmallGrid sg;
  Rng rng(444);
  auto sim = random_sim(rng, sg.layout.seq_len, sg.layout.block_count);
  for (bool self : {false, true}) {
    SelectionMask prev;
    bool have_prev = false;
    for (std::size_t k = 1; k <= sg.layout.block_count; ++k) {
      auto mask = select_local_topk(sim, k, sg.layout, self);
      if (have_prev) CHECK(prev.subset_of(mask));
      prev = mask;
      have_prev = true;
    }
    have_prev = false;
    for (std::size_t k : {1, 3, 8, 20, 50, 96}) {
      auto mask = select_global_topk(sim, k, sg.layout, self);
      if (have_prev) CHECK(prev.subset_of(mask));
      prev = mask;
      have_prev = true;
    }
  }
}

TEST_CASE("threshold selected pairs never exceed ceil(tau * pairs)") {
  SmallGrid sg;
  Rng rng(555);
  std::size_t pairs = sg.layout.seq_len * sg.layout.block_count;
  for (int trial = 0; trial < 25; ++trial) {
    auto sim = random_sim(rng, sg.layout.seq_len, sg.layout.block_count);
    for (double tau : {0.15, 0.25, 0.35, 0.50}) {
      auto mask = select_global_threshold(sim, tau, sg.layout, false);
      CHECK(mask.selected <= ceil_frac(tau, pairs));
    }
  }
}

TEST_CASE("top-k masks are invariant under exact positive rescaling") {
  SmallGrid sg;
  Rng rng(666);
  auto sim = random_sim(rng, sg.layout.seq_len, sg.layout.block_count);
  // 0.5, 4, and 32 are powers of two: scaling the scores is exact, so the
  // argsort (ties included) cannot move and the masks must be identical.
  for (float c : {0.5f, 4.0f, 32.0f}) {
    SimilarityMatrix scaled = sim;
    for (float& v : scaled.scores.flat()) v *= c;
    for (std::size_t k : {1, 2, 4}) {
      CHECK(select_global_topk(scaled, k * 10, sg.layout, false) ==
            select_global_topk(sim, k * 10, sg.layout, false));
      CHECK(select_local_topk(scaled, k, sg.layout, false) ==
            select_local_topk(sim, k, sg.layout, false));
      CHECK(select_local_topk(scaled, k, sg.layout, true) ==
            select_local_topk(sim, k, sg.layout, true));
    }
  }
}

TEST_CASE("top-k masks survive rescaled queries end to end") {
  // The criterion-shaped version: scale Q itself, recompute means-similarity,
  // and compare masks. Gaps between random scores dwarf the re-rounding.
  LatentGeometry g{4, 4, 4, 8, 1};
  auto layout = grid_layout(g, PartitionSpec::spatio_temporal(2, 2, 2));
  Rng rng(777);
  std::vector<float> qv(g.seq_len() * 8), kv(g.seq_len() * 8);
  for (float& x : qv) x = rng.uniform_float(-1.0f, 1.0f);
  for (float& x : kv) x = rng.uniform_float(-1.0f, 1.0f);
  Tensor q(Shape{g.seq_len(), 8}, std::move(qv));
  Tensor k(Shape{g.seq_len(), 8}, std::move(kv));
  auto means = block_means(k, layout);
  auto base = similarity(q, means, true);
  for (float c : {0.1f, 3.0f, 100.0f}) {
    Tensor qc = q;
    for (float& v : qc.flat()) v *= c;
    auto sim_c = similarity(qc, means, true);
    CHECK(select_global_topk(sim_c, 16, layout, true) ==
          select_global_topk(base, 16, layout, true));
    CHECK(select_local_topk(sim_c, 3, layout, true) ==
          select_local_topk(base, 3, layout, true));
  }
}

TEST_CASE("self block handling") {
  SmallGrid sg;  // 24 tokens, 4 blocks, token t*6.. -> block t
  SUBCASE("threshold rules add the own block on top") {
    // All mass sits on the block-0 column; ties fill rows front to back, so
    // tau = 0.5 covers exactly the first half of the queries. The back half
    // is empty with self off (permitted by the mask contract) and holds only
    // the own block with self on.
    std::vector<float> v(sg.layout.seq_len * 4, -8.0f);
    for (std::size_t q = 0; q < sg.layout.seq_len; ++q) v[q * 4] = 8.0f;
    auto sim = sim_from_values<float>(sg.layout.seq_len, 4, std::move(v));
    auto off = select_global_threshold(sim, 0.5, sg.layout, false);
    auto on = select_global_threshold(sim, 0.5, sg.layout, true);
    CHECK(off.subset_of(on));
    for (std::size_t q = 0; q < sg.layout.seq_len; ++q) {
      CHECK(on.at(q, sg.layout.token_to_block[q]));
    }
    CHECK(off.at(5, 0));
    CHECK(off.row_count(23) == 0);
    CHECK_FALSE(off.at(23, 3));
    CHECK(on.at(23, 3));
    CHECK_FALSE(on.at(23, 0));
  }
  SUBCASE("local top-k folds the own block into the k slots") {
    // Query 0 lives in block 0. Scores rank blocks 3 > 2 > 1 > 0.
    std::vector<float> v(sg.layout.seq_len * 4);
    for (std::size_t q = 0; q < sg.layout.seq_len; ++q) {
      for (std::size_t b = 0; b < 4; ++b) v[q * 4 + b] = float(b);
    }
    auto sim = sim_from_values<float>(sg.layout.seq_len, 4, std::move(v));
    auto mask = select_local_topk(sim, 2, sg.layout, true);
    // Every row has exactly k = 2 blocks even after self inclusion.
    for (std::size_t q = 0; q < sg.layout.seq_len; ++q) {
      CHECK(mask.row_count(q) == 2);
    }
    // Query 0 (block 0): top-2 is {3, 2}; self replaces the weaker pick 2.
    CHECK(mask.at(0, 3));
    CHECK(mask.at(0, 0));
    CHECK_FALSE(mask.at(0, 2));
    // A query of frame 3: self is already the top pick, nothing displaced.
    CHECK(mask.at(18, 3));
    CHECK(mask.at(18, 2));
  }
  SUBCASE("every row is non-empty with self inclusion on") {
    Rng rng(888);
    auto sim = random_sim(rng, sg.layout.seq_len, sg.layout.block_count);
    for (SelectionPolicy policy :
         {SelectionPolicy{SelectionScope::global, SelectionRule::threshold, 0,
                          0.1, false, true},
          SelectionPolicy{SelectionScope::global, SelectionRule::topk, 2, 0.0,
                          false, true},
          SelectionPolicy{SelectionScope::local, SelectionRule::threshold, 0,
                          0.1, false, true},
          SelectionPolicy{SelectionScope::local, SelectionRule::topk, 1, 0.0,
                          false, true}}) {
      auto mask = select(sim, policy, sg.layout);
      for (std::size_t q = 0; q < mask.rows; ++q) {
        CHECK(mask.row_count(q) >= 1);
      }
    }
  }
}

TEST_CASE("select dispatches to the four policy implementations") {
  SmallGrid sg;
  Rng rng(999);
  auto sim = random_sim(rng, sg.layout.seq_len, sg.layout.block_count);
  SelectionPolicy p;
  p.scope = SelectionScope::global;
  p.rule = SelectionRule::threshold;
  p.tau = 0.3;
  p.include_self = false;
  CHECK(select(sim, p, sg.layout) ==
        select_global_threshold(sim, 0.3, sg.layout, false));
  p.rule = SelectionRule::topk;
  p.k = 11;
  CHECK(select(sim, p, sg.layout) ==
        select_global_topk(sim, 11, sg.layout, false));
  p.scope = SelectionScope::local;
  p.k = 2;
  CHECK(select(sim, p, sg.layout) ==
        select_local_topk(sim, 2, sg.layout, false));
  p.rule = SelectionRule::threshold;
  p.tau = 0.6;
  CHECK(select(sim, p, sg.layout) ==
        select_local_threshold(sim, 0.6, sg.layout, false));
}

TEST_CASE("permuting block ids permutes mask columns identically") {
  LatentGeometry g{3, 2, 4, 8, 1};
  auto layout = grid_layout(g, PartitionSpec::temporal(1));
  std::size_t nb = layout.block_count;
  REQUIRE(nb == 3);

  // Rotate block ids: old block b becomes new block (b + 1) % nb.
  auto perm = [&](std::size_t b) { return (b + 1) % nb; };
  BlockLayout rotated = layout;
  for (auto& tb : rotated.token_to_block) {
    tb = static_cast<std::uint32_t>(perm(tb));
  }
  for (std::size_t b = 0; b < nb; ++b) {
    rotated.block_tokens[perm(b)] = layout.block_tokens[b];
  }

  Rng rng(1234);
  auto sim = random_sim(rng, layout.seq_len, nb);
  SimilarityMatrix sim_rot = sim;
  for (std::size_t q = 0; q < layout.seq_len; ++q) {
    for (std::size_t b = 0; b < nb; ++b) {
      sim_rot.scores.at(q, perm(b)) = sim.scores.at(q, b);
    }
  }

  for (bool self : {false, true}) {
    auto base = select_global_threshold(sim, 0.4, layout, self);
    auto rot = select_global_threshold(sim_rot, 0.4, rotated, self);
    for (std::size_t q = 0; q < base.rows; ++q) {
      for (std::size_t b = 0; b < nb; ++b) {
        CHECK(base.at(q, b) == rot.at(q, perm(b)));
      }
    }
    auto base_k = select_local_topk(sim, 2, layout, self);
    auto rot_k = select_local_topk(sim_rot, 2, rotated, self);
    for (std::size_t q = 0; q < base_k.rows; ++q) {
      for (std::size_t b = 0; b < nb; ++b) {
        CHECK(base_k.at(q, b) == rot_k.at(q, perm(b)));
      }
    }
  }
}

TEST_CASE("tau = 1 with self off selects every pair") {
  SmallGrid sg;
  Rng rng(4321);
  auto sim = random_sim(rng, sg.layout.seq_len, sg.layout.block_count);
  auto mask = select_global_threshold(sim, 1.0, sg.layout, false);
  CHECK(mask == all_ones_mask(sg.layout.seq_len, sg.layout.block_count));
  auto local = select_local_threshold(sim, 1.0, sg.layout, false);
  CHECK(local == all_ones_mask(sg.layout.seq_len, sg.layout.block_count));
}

TEST_CASE("mask bookkeeping") {
  SelectionMask m(3, 4);
  CHECK(m.selected == 0);
  m.set(1, 2);
  m.set(1, 2);  // idempotent
  m.set(2, 0);
  CHECK(m.selected == 2);
  CHECK(m.row_count(0) == 0);
  CHECK(m.row_count(1) == 1);
  CHECK(m.at(1, 2));
  CHECK_FALSE(m.at(0, 0));

  SUBCASE("subset_of") {
    SelectionMask big(3, 4);
    big.set(1, 2);
    big.set(2, 0);
    big.set(0, 3);
    CHECK(m.subset_of(big));
    CHECK_FALSE(big.subset_of(m));
    CHECK_FALSE(m.subset_of(SelectionMask(2, 4)));
  }
  SUBCASE("mask_to_tensor") {
    auto t = mask_to_tensor(m);
    REQUIRE(t.rows() == 3);
    REQUIRE(t.cols() == 4);
    double sum = 0.0;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      CHECK((t[i] == 0.0f || t[i] == 1.0f));
      sum += t[i];
    }
    CHECK(sum == 2.0);
    CHECK(t.at(1, 2) == 1.0f);
  }
  SUBCASE("csv pair list") {
    std::ostringstream os;
    write_mask_csv(os, m, 7);
    std::string text = os.str();
    CHECK(text.find("head,query,block") == 0);
    CHECK(text.find("7,1,2") != std::string::npos);
    CHECK(text.find("7,2,0") != std::string::npos);
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);  // header + 2 rows
  }
}

TEST_CASE("policy and argument validation") {
  SmallGrid sg;
  Rng rng(777);
  auto sim = random_sim(rng, sg.layout.seq_len, sg.layout.block_count);

  SelectionPolicy p;
  p.rule = SelectionRule::topk;
  p.k = 0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p.rule = SelectionRule::threshold;
  p.tau = 0.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p.tau = 1.5;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p.tau = 1.0;
  CHECK_NOTHROW(p.validate());

  CHECK_THROWS_AS(select_global_threshold(sim, 0.0, sg.layout, true),
                  std::invalid_argument);
  CHECK_THROWS_AS(select_global_threshold(sim, 1.0001, sg.layout, true),
                  std::invalid_argument);
  CHECK_THROWS_AS(select_global_topk(sim, 0, sg.layout, true),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      select_global_topk(sim, sg.layout.seq_len * sg.layout.block_count + 1,
                         sg.layout, true),
      std::invalid_argument);
  CHECK_THROWS_AS(select_local_topk(sim, sg.layout.block_count + 1, sg.layout,
                                    true),
                  std::invalid_argument);
  // Score shape must match the layout.
  auto tiny = random_sim(rng, 2, 2);
  CHECK_THROWS_AS(select_global_threshold(tiny, 0.5, sg.layout, true),
                  std::invalid_argument);
}
