#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "vmoba/metrics.hpp"
#include "vmoba/partition.hpp"
#include "vmoba/rng.hpp"
#include "vmoba/selection.hpp"
#include "vmoba/tensor.hpp"

using namespace vmoba;

namespace {

SimilarityMatrix sim_of(std::size_t rows, std::size_t cols,
                        std::vector<float> values) {
  return {Tensor(Shape{rows, cols}, std::move(values)), false};
}

SimilarityMatrix random_sim(Rng& rng, std::size_t rows, std::size_t cols) {
  std::vector<float> v(rows * cols);
  for (float& x : v) x = rng.uniform_float(-2.0f, 2.0f);
  return sim_of(rows, cols, std::move(v));
}

std::size_t count_lines(const std::string& text) {
  std::size_t n = 0;
  for (char c : text) n += (c == '\n');
  return n;
}

}  // namespace

TEST_CASE("flops model reproduces the canonical worked example") {
  // 1024 tokens, hidden 64, 16 uniform blocks of 64 keys, and exactly 4
  // selected blocks per query: the model counts 2*s*N_b*d selection flops
  // plus 4*d*(attended key tokens), against 4*s^2*d dense flops.
  LatentGeometry geom{4, 16, 16, 64, 1};
  REQUIRE(geom.seq_len() == 1024);
  auto layout = build_layout(geom, PartitionSpec::spatio_temporal(1, 8, 8));
  REQUIRE(layout.block_count == 16);
  for (std::size_t b = 0; b < 16; ++b) REQUIRE(layout.block_len(b) == 64);

  SelectionMask mask(1024, 16);
  for (std::size_t q = 0; q < 1024; ++q) {
    for (std::size_t j = 0; j < 4; ++j) mask.set(q, (q + j) % 16);
  }

  auto report = flops_estimate(geom, layout, mask);
  CHECK(report.selection_flops == 2097152);
  CHECK(report.attention_flops == 67108864);
  CHECK(report.total_flops == 69206016);
  CHECK(report.dense_flops == 268435456);
  CHECK(report.k_avg == 4.0);
  CHECK(std::abs(report.speedup - 3.879) <= 0.001);
  CHECK(report.total_flops ==
        report.selection_flops + report.attention_flops);
}

TEST_CASE("flops model reduces to the uniform-block closed form") {
  // With every block exactly s_b keys: total = s*d*(2*s/s_b + 4*k_avg*s_b).
  Rng rng(404);
  LatentGeometry geom{6, 8, 8, 32, 2};
  auto layout = build_layout(geom, PartitionSpec::spatio_temporal(2, 4, 4));
  std::size_t s = geom.seq_len();
  std::size_t s_b = layout.block_len(0);
  for (std::size_t b = 0; b < layout.block_count; ++b) {
    REQUIRE(layout.block_len(b) == s_b);
  }
  auto sim = random_sim(rng, s, layout.block_count);
  for (double tau : {0.2, 0.5, 0.9}) {
    auto mask = select_global_threshold(sim, tau, layout, true);
    auto report = flops_estimate(geom, layout, mask);
    double d = double(geom.hidden);
    double closed = double(s) * d *
                    (2.0 * double(s) / double(s_b) +
                     4.0 * report.k_avg * double(s_b));
    CHECK(double(report.total_flops) == closed);
    CHECK(report.k_avg ==
          double(mask.selected) / double(s));
    CHECK(report.dense_flops ==
          4 * std::uint64_t(s) * std::uint64_t(s) * geom.hidden);
    CHECK(report.speedup > 0.0);
  }
}

TEST_CASE("token sparsity") {
  LatentGeometry geom{4, 4, 4, 8, 1};
  auto layout = build_layout(geom, PartitionSpec::temporal(1));  // 4 blocks/16
  std::size_t s = geom.seq_len();

  SUBCASE("all-ones mask gives exactly 1") {
    CHECK(token_sparsity(all_ones_mask(s, layout.block_count), layout, s) ==
          1.0);
  }
  SUBCASE("uniform fractional case is exact") {
    // Every query selects 1 of 4 equal blocks: 16 keys of 64 -> 0.25.
    SelectionMask mask(s, layout.block_count);
    for (std::size_t q = 0; q < s; ++q) mask.set(q, q % 4);
    CHECK(token_sparsity(mask, layout, s) == 0.25);
  }
  SUBCASE("monotone under mask growth") {
    Rng rng(505);
    auto sim = random_sim(rng, s, layout.block_count);
    double prev = 0.0;
    for (double tau : {0.15, 0.35, 0.65, 1.0}) {
      auto mask = select_global_threshold(sim, tau, layout, false);
      double sp = token_sparsity(mask, layout, s);
      CHECK(sp >= prev);
      prev = sp;
    }
  }
}

TEST_CASE("query importance sums the top fraction of normalized weights") {
  SUBCASE("uniform rows give exactly ceil(p*n)/n") {
    Tensor rows(Shape{3, 8}, std::vector<float>(24, 1.0f));
    auto imp = query_importance(rows, 0.3);
    REQUIRE(imp.size() == 3);
    for (double v : imp) CHECK(v == 3.0 / 8.0);  // ceil(2.4) = 3 entries
  }
  SUBCASE("one-hot rows give 1 for any p") {
    Tensor rows(Shape{2, 5}, {0, 0, 1, 0, 0, 0, 0, 0, 0, 1});
    for (double p : {0.1, 0.5, 1.0}) {
      for (double v : query_importance(rows, p)) CHECK(v == 1.0);
    }
  }
  SUBCASE("monotone in p") {
    Rng rng(606);
    std::vector<float> v(4 * 7);
    for (float& x : v) x = rng.uniform_float(0.0f, 1.0f);
    Tensor rows(Shape{4, 7}, std::move(v));
    auto lo = query_importance(rows, 0.2);
    auto hi = query_importance(rows, 0.6);
    for (std::size_t i = 0; i < lo.size(); ++i) {
      CHECK(lo[i] <= hi[i] + 1e-12);
      CHECK(lo[i] >= 0.0);
      CHECK(hi[i] <= 1.0 + 1e-9);
    }
  }
  SUBCASE("p must be in (0, 1]") {
    Tensor rows(Shape{1, 4}, {1, 2, 3, 4});
    CHECK_THROWS_AS(query_importance(rows, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(query_importance(rows, 1.5), std::invalid_argument);
  }
}

TEST_CASE("concentration curve") {
  SUBCASE("cumulative is nondecreasing and ends at 1") {
    Rng rng(707);
    auto sim = random_sim(rng, 12, 6);
    auto rep = concentration_curve(sim, {0.3, 0.5});
    REQUIRE(rep.cumulative.size() == 72);
    double prev = 0.0;
    for (double c : rep.cumulative) {
      CHECK(c >= prev - 1e-15);
      prev = c;
    }
    CHECK(std::abs(rep.cumulative.back() - 1.0) <= 1e-6);
    // Sorted scores descend.
    for (std::size_t i = 1; i < rep.sorted_scores.size(); ++i) {
      CHECK(rep.sorted_scores[i - 1] >= rep.sorted_scores[i]);
    }
  }
  SUBCASE("uniform scores cut at exactly ceil(f*n)") {
    auto sim = sim_of(5, 8, std::vector<float>(40, 1.25f));
    auto rep = concentration_curve(sim, {0.3, 0.5, 1.0});
    REQUIRE(rep.cutoffs.size() == 3);
    CHECK(rep.cutoffs[0].second == 12);  // ceil(0.3*40)
    CHECK(rep.cutoffs[1].second == 20);
    CHECK(rep.cutoffs[2].second == 40);
  }
  SUBCASE("sharpening the scores never increases the cutoff") {
    Rng rng(808);
    auto sim = random_sim(rng, 10, 10);
    SimilarityMatrix sharp = sim;
    for (float& v : sharp.scores.flat()) v *= 4.0f;
    auto base = concentration_curve(sim, {0.3, 0.5, 0.8});
    auto conc = concentration_curve(sharp, {0.3, 0.5, 0.8});
    for (std::size_t i = 0; i < base.cutoffs.size(); ++i) {
      CHECK(conc.cutoffs[i].second <= base.cutoffs[i].second);
    }
  }
  SUBCASE("fraction bounds enforced") {
    auto sim = sim_of(1, 3, {1, 2, 3});
    CHECK_THROWS_AS(concentration_curve(sim, {0.0}), std::invalid_argument);
    CHECK_THROWS_AS(concentration_curve(sim, {1.1}), std::invalid_argument);
  }
}

TEST_CASE("block attention map rows are probability vectors") {
  Rng rng(909);
  LatentGeometry geom{4, 3, 4, 8, 1};
  auto layout = build_layout(geom, PartitionSpec::spatio_temporal(2, 3, 2));
  std::size_t s = geom.seq_len();
  std::vector<float> qv(s * 8), kv(s * 8);
  for (float& x : qv) x = rng.uniform_float(-1.0f, 1.0f);
  for (float& x : kv) x = rng.uniform_float(-1.0f, 1.0f);
  Tensor q(Shape{s, 8}, std::move(qv));
  Tensor k(Shape{s, 8}, std::move(kv));

  auto map = block_attention_map(q, k, layout, layout, true);
  REQUIRE(map.rows() == layout.block_count);
  REQUIRE(map.cols() == layout.block_count);
  for (std::size_t i = 0; i < map.rows(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < map.cols(); ++j) {
      CHECK(map.at(i, j) >= 0.0f);
      sum += map.at(i, j);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-5);
  }

  SUBCASE("single block concentrates all mass") {
    auto one = build_layout(geom, PartitionSpec::spatio_temporal(4, 3, 4));
    REQUIRE(one.block_count == 1);
    auto m1 = block_attention_map(q, k, one, one, true);
    REQUIRE(m1.numel() == 1);
    CHECK(std::abs(m1[0] - 1.0f) <= 1e-6f);
  }
}

TEST_CASE("report serialization") {
  LatentGeometry geom{2, 2, 2, 8, 1};
  auto layout = build_layout(geom, PartitionSpec::temporal(1));
  auto mask = all_ones_mask(geom.seq_len(), layout.block_count);
  auto report = flops_estimate(geom, layout, mask);

  SUBCASE("flops json carries every field") {
    auto j = flops_report_to_json(report);
    CHECK(j["selection_flops"].get<std::uint64_t>() ==
          report.selection_flops);
    CHECK(j["attention_flops"].get<std::uint64_t>() ==
          report.attention_flops);
    CHECK(j["total_flops"].get<std::uint64_t>() == report.total_flops);
    CHECK(j["dense_flops"].get<std::uint64_t>() == report.dense_flops);
    CHECK(j["k_avg"].get<double>() == report.k_avg);
    CHECK(j["speedup"].get<double>() == report.speedup);
  }
  SUBCASE("concentration json mirrors the cutoff pairs") {
    auto sim = sim_of(2, 4, {1, 2, 3, 4, 4, 3, 2, 1});
    auto rep = concentration_curve(sim, {0.5});
    auto j = concentration_report_to_json(rep);
    REQUIRE(j["cutoffs"].size() == 1);
    CHECK(j["cutoffs"][0]["fraction"].get<double>() == 0.5);
    CHECK(j["cutoffs"][0]["count"].get<std::size_t>() ==
          rep.cutoffs[0].second);
    CHECK(j["pairs"].get<std::size_t>() == 8);
    CHECK(std::abs(j["cumulative_final"].get<double>() - 1.0) <= 1e-6);
  }
  SUBCASE("csv emitters write one row per record plus a header") {
    std::ostringstream imp_os;
    write_query_importance_csv(imp_os, {0.5, 0.75});
    CHECK(imp_os.str().rfind("query,top_p_mass", 0) == 0);
    CHECK(count_lines(imp_os.str()) == 3);

    std::ostringstream conc_os;
    auto sim = sim_of(1, 4, {1, 2, 3, 4});
    write_concentration_csv(conc_os, concentration_curve(sim, {0.5}));
    CHECK(conc_os.str().rfind("rank,normalized_score,cumulative", 0) == 0);
    CHECK(count_lines(conc_os.str()) == 5);

    std::ostringstream map_os;
    Tensor map(Shape{2, 2}, {0.5f, 0.5f, 0.25f, 0.75f});
    write_block_map_csv(map_os, map);
    CHECK(map_os.str().rfind("query_block,key_block,mass", 0) == 0);
    CHECK(count_lines(map_os.str()) == 5);
  }
}
