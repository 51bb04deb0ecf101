#include "vmoba/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>
#include <sstream>
#include <string>

#include "vmoba/metrics.hpp"
#include "vmoba/rng.hpp"

namespace vmoba {
namespace {

std::vector<std::size_t> divisors_of(std::size_t n) {
  std::vector<std::size_t> out;
  for (std::size_t d = 1; d <= n; ++d) {
    if (n % d == 0) out.push_back(d);
  }
  return out;
}

// Exact: a random divisor of the extent. Ragged: a random non-divisor, which
// exists for every extent >= 3 (extent - 1 never divides); extents 1 and 2
// fall back to exact.
std::size_t pick_block_size(Rng& rng, std::size_t extent, bool want_ragged,
                            bool& got_ragged) {
  if (want_ragged && extent >= 3) {
    for (int tries = 0; tries < 32; ++tries) {
      std::size_t size = 2 + rng.uniform_index(extent - 2);  // [2, extent-1]
      if (extent % size != 0) {
        got_ragged = true;
        return size;
      }
    }
    got_ragged = true;
    return extent - 1;
  }
  auto divs = divisors_of(extent);
  return divs[rng.uniform_index(divs.size())];
}

LatentGeometry sample_geometry(Rng& rng, std::size_t max_seq,
                               std::size_t hidden) {
  for (int tries = 0; tries < 64; ++tries) {
    LatentGeometry g;
    g.frames = 2 + rng.uniform_index(7);   // [2, 8]
    g.height = 2 + rng.uniform_index(15);  // [2, 16]
    g.width = 2 + rng.uniform_index(15);   // [2, 16]
    g.hidden = hidden;
    g.heads = 1;
    if (g.seq_len() >= 8 && g.seq_len() <= max_seq) return g;
  }
  return LatentGeometry{2, 2, 2, hidden, 1};
}

PartitionSpec sample_spec(Rng& rng, Scheme scheme, const LatentGeometry& geom,
                          bool want_ragged, bool& got_ragged) {
  got_ragged = false;
  switch (scheme) {
    case Scheme::temporal_1d:
      return PartitionSpec::temporal(
          pick_block_size(rng, geom.frames, want_ragged, got_ragged));
    case Scheme::spatial_2d: {
      // Try raggedness on one randomly chosen axis first so exact/ragged mixes
      // stay balanced.
      bool h_first = rng.uniform_index(2) == 0;
      bool r1 = false, r2 = false;
      std::size_t bh, bw;
      if (h_first) {
        bh = pick_block_size(rng, geom.height, want_ragged, r1);
        bw = pick_block_size(rng, geom.width, want_ragged && !r1, r2);
      } else {
        bw = pick_block_size(rng, geom.width, want_ragged, r1);
        bh = pick_block_size(rng, geom.height, want_ragged && !r1, r2);
      }
      got_ragged = r1 || r2;
      return PartitionSpec::spatial(bh, bw);
    }
    case Scheme::spatio_temporal_3d:
    default: {
      std::size_t axis = rng.uniform_index(3);
      bool r[3] = {false, false, false};
      std::size_t extents[3] = {geom.frames, geom.height, geom.width};
      std::size_t sizes[3];
      bool pending = want_ragged;
      for (std::size_t off = 0; off < 3; ++off) {
        std::size_t a = (axis + off) % 3;
        sizes[a] = pick_block_size(rng, extents[a], pending, r[a]);
        if (r[a]) pending = false;
      }
      got_ragged = r[0] || r[1] || r[2];
      return PartitionSpec::spatio_temporal(sizes[0], sizes[1], sizes[2]);
    }
  }
}

Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, float lo,
                     float hi) {
  Tensor t(Shape{rows, cols});
  for (auto& v : t.flat()) v = rng.uniform_float(lo, hi);
  return t;
}

Tensor64 random_matrix_d(Rng& rng, std::size_t rows, std::size_t cols,
                        double lo, double hi) {
  Tensor64 t(Shape{rows, cols});
  for (auto& v : t.flat()) v = rng.uniform_double(lo, hi);
  return t;
}

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) -
                                     static_cast<double>(b[i])));
  }
  return worst;
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) -
                                     static_cast<double>(b[i])));
  }
  return worst;
}

const double kThresholdGrid[4] = {0.15, 0.25, 0.35, 0.50};

std::string policy_label(const SelectionPolicy& p) {
  std::ostringstream os;
  os << (p.scope == SelectionScope::global ? "global_" : "local_");
  if (p.rule == SelectionRule::topk) {
    os << "topk(k=" << p.k << ")";
  } else {
    os << "threshold(tau=" << p.tau << ")";
  }
  return os.str();
}

// Checks that a layout is a bijective partition of the token sequence:
// dense block ids, disjoint ascending token lists, full coverage. Returns the
// number of violated conditions.
std::size_t layout_violations(const LatentGeometry& geom,
                              const PartitionSpec& spec,
                              const BlockLayout& layout) {
  std::size_t bad = 0;
  std::size_t s = geom.seq_len();
  auto ceil_div = [](std::size_t a, std::size_t b) { return (a + b - 1) / b; };
  std::size_t want_t = 1, want_h = 1, want_w = 1;
  switch (spec.scheme) {
    case Scheme::temporal_1d:
      want_t = ceil_div(geom.frames, spec.block[0]);
      break;
    case Scheme::spatial_2d:
      want_h = ceil_div(geom.height, spec.block[0]);
      want_w = ceil_div(geom.width, spec.block[1]);
      break;
    case Scheme::spatio_temporal_3d:
      want_t = ceil_div(geom.frames, spec.block[0]);
      want_h = ceil_div(geom.height, spec.block[1]);
      want_w = ceil_div(geom.width, spec.block[2]);
      break;
  }
  if (layout.blocks_t != want_t || layout.blocks_h != want_h ||
      layout.blocks_w != want_w) {
    ++bad;
  }
  if (layout.block_count != want_t * want_h * want_w) ++bad;
  if (layout.seq_len != s || layout.token_to_block.size() != s) ++bad;
  if (layout.block_tokens.size() != layout.block_count) ++bad;

  std::size_t covered = 0;
  for (std::size_t b = 0; b < layout.block_tokens.size(); ++b) {
    const auto& toks = layout.block_tokens[b];
    if (toks.empty()) ++bad;
    covered += toks.size();
    for (std::size_t i = 0; i < toks.size(); ++i) {
      if (i > 0 && toks[i] <= toks[i - 1]) ++bad;
      if (toks[i] >= s || layout.token_to_block[toks[i]] != b) ++bad;
    }
  }
  if (covered != s) ++bad;
  for (std::size_t tok = 0; tok < s; ++tok) {
    if (layout.token_to_block[tok] >= layout.block_count) ++bad;
  }
  return bad;
}

}  // namespace

std::vector<AttentionFixture> make_attention_fixtures(std::uint64_t seed,
                                                      std::size_t count,
                                                      std::size_t max_seq) {
  Rng rng(seed);
  std::vector<AttentionFixture> out;
  out.reserve(count);
  const std::size_t dhs[3] = {4, 8, 16};
  for (std::size_t i = 0; i < count; ++i) {
    AttentionFixture fx;
    Scheme scheme = static_cast<Scheme>(i % 3);
    bool want_ragged = (i % 2) == 1;
    std::size_t dh = dhs[rng.uniform_index(3)];
    fx.geom = sample_geometry(rng, max_seq, dh);
    fx.spec = sample_spec(rng, scheme, fx.geom, want_ragged, fx.ragged);
    fx.layout = build_layout(fx.geom, fx.spec);
    std::size_t s = fx.geom.seq_len();
    fx.q = random_matrix(rng, s, dh, -1.5f, 1.5f);
    fx.k = random_matrix(rng, s, dh, -1.5f, 1.5f);
    fx.v = random_matrix(rng, s, dh, -1.5f, 1.5f);

    SelectionPolicy policy;
    policy.scaled = true;
    policy.include_self = true;
    std::size_t nb = fx.layout.block_count;
    switch ((i / 3) % 4) {
      case 0:
        policy.scope = SelectionScope::global;
        policy.rule = SelectionRule::threshold;
        policy.tau = kThresholdGrid[i % 4];
        break;
      case 1:
        policy.scope = SelectionScope::global;
        policy.rule = SelectionRule::topk;
        policy.k = std::max<std::size_t>(1, s * nb / 5);
        break;
      case 2:
        policy.scope = SelectionScope::local;
        policy.rule = SelectionRule::topk;
        policy.k = std::min(nb, 1 + i % 3);
        break;
      default:
        policy.scope = SelectionScope::local;
        policy.rule = SelectionRule::threshold;
        policy.tau = kThresholdGrid[i % 4];
        break;
    }
    auto sim = similarity(fx.q, block_means(fx.k, fx.layout), policy.scaled);
    fx.mask = select(sim, policy, fx.layout);
    fx.policy_name = policy_label(policy);
    out.push_back(std::move(fx));
  }
  return out;
}

std::vector<PartitionFixture> make_partition_fixtures(std::uint64_t seed,
                                                      std::size_t count,
                                                      std::size_t max_seq,
                                                      bool uniform_only) {
  Rng rng(seed);
  std::vector<PartitionFixture> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    PartitionFixture fx;
    Scheme scheme = static_cast<Scheme>(i % 3);
    bool want_ragged = !uniform_only && (i % 2) == 1;
    fx.geom = sample_geometry(rng, max_seq, 8);
    fx.spec = sample_spec(rng, scheme, fx.geom, want_ragged, fx.ragged);
    out.push_back(std::move(fx));
  }
  return out;
}

std::vector<CheckResult> run_partition_checks(const RunConfig& cfg) {
  std::vector<CheckResult> out;
  const PartitionSpec* specs[3] = {&cfg.part_1d, &cfg.part_2d, &cfg.part_3d};
  const char* names[3] = {"partition_bijective_1d", "partition_bijective_2d",
                          "partition_bijective_3d"};
  for (int i = 0; i < 3; ++i) {
    CheckResult r;
    r.name = names[i];
    r.cases = cfg.geometry.seq_len();
    r.tolerance = 0.0;
    BlockLayout layout = build_layout(cfg.geometry, *specs[i]);
    std::size_t bad = layout_violations(cfg.geometry, *specs[i], layout);
    r.max_error = static_cast<double>(bad);
    r.pass = bad == 0;
    std::ostringstream os;
    os << "geometry " << cfg.geometry.frames << "x" << cfg.geometry.height
       << "x" << cfg.geometry.width << ", " << layout.block_count << " blocks";
    r.detail = os.str();
    out.push_back(std::move(r));
  }

  CheckResult rnd;
  rnd.name = "partition_bijective_random";
  rnd.tolerance = 0.0;
  std::size_t bad = 0, ragged = 0;
  auto fixtures = make_partition_fixtures(cfg.seed ^ 0x70617274u, 12, 1024,
                                          /*uniform_only=*/false);
  for (const auto& fx : fixtures) {
    BlockLayout layout = build_layout(fx.geom, fx.spec);
    bad += layout_violations(fx.geom, fx.spec, layout);
    if (fx.ragged) ++ragged;
  }
  rnd.cases = fixtures.size();
  rnd.max_error = static_cast<double>(bad);
  rnd.pass = bad == 0;
  std::ostringstream os;
  os << fixtures.size() << " random layouts (" << ragged << " ragged)";
  rnd.detail = os.str();
  out.push_back(std::move(rnd));
  return out;
}

std::vector<CheckResult> run_oracle_checks(std::uint64_t seed,
                                           std::size_t fixture_count,
                                           std::size_t max_seq) {
  auto fixtures = make_attention_fixtures(seed, fixture_count, max_seq);
  CheckResult gather_check{"gather_matches_masked_dense", fixtures.size(), 0.0,
                           1e-5, true, ""};
  CheckResult streamed_check{"streamed_matches_gather", fixtures.size(), 0.0,
                             1e-6, true, ""};
  CheckResult dense_check{"all_ones_matches_dense", fixtures.size(), 0.0, 1e-5,
                          true, ""};
  // Output tolerances above are the contract; the log-sum-exp rows carry a
  // magnitude near log(seq_len) + max logit, so one float ulp there can exceed
  // 1e-6. They get their own consistency check at the looser bound.
  CheckResult lse_check{"lse_consistent_across_paths", fixtures.size(), 0.0,
                        1e-5, true, ""};
  std::size_t ragged = 0;
  for (const auto& fx : fixtures) {
    if (fx.ragged) ++ragged;
    auto masked = masked_dense_attention(fx.q, fx.k, fx.v, fx.mask, fx.layout);
    auto gathered =
        sparse_forward_gather(fx.q, fx.k, fx.v, fx.layout, fx.mask);
    auto streamed =
        sparse_forward_streamed(fx.q, fx.k, fx.v, fx.layout, fx.mask);
    gather_check.max_error =
        std::max(gather_check.max_error,
                 max_abs_diff(gathered.output, masked.output));
    streamed_check.max_error =
        std::max(streamed_check.max_error,
                 max_abs_diff(streamed.output, gathered.output));

    auto ones = all_ones_mask(fx.geom.seq_len(), fx.layout.block_count);
    auto dense = dense_attention(fx.q, fx.k, fx.v);
    auto ones_gather = sparse_forward_gather(fx.q, fx.k, fx.v, fx.layout, ones);
    auto ones_masked =
        masked_dense_attention(fx.q, fx.k, fx.v, ones, fx.layout);
    dense_check.max_error =
        std::max({dense_check.max_error,
                  max_abs_diff(ones_gather.output, dense.output),
                  max_abs_diff(ones_masked.output, dense.output)});
    lse_check.max_error =
        std::max({lse_check.max_error, max_abs_diff(gathered.lse, masked.lse),
                  max_abs_diff(streamed.lse, gathered.lse),
                  max_abs_diff(ones_gather.lse, dense.lse),
                  max_abs_diff(ones_masked.lse, dense.lse)});
  }
  std::ostringstream os;
  os << fixtures.size() << " fixtures (" << ragged << " ragged, "
     << (fixtures.size() - ragged) << " exact), schemes and policies cycled";
  gather_check.detail = os.str();
  streamed_check.detail = os.str();
  dense_check.detail = os.str();
  lse_check.detail = os.str();
  gather_check.pass = gather_check.max_error <= gather_check.tolerance;
  streamed_check.pass = streamed_check.max_error <= streamed_check.tolerance;
  dense_check.pass = dense_check.max_error <= dense_check.tolerance;
  lse_check.pass = lse_check.max_error <= lse_check.tolerance;
  return {gather_check, streamed_check, dense_check, lse_check};
}

std::vector<CheckResult> run_sparsity_checks(std::uint64_t seed,
                                             const std::vector<double>& taus,
                                             std::size_t fixture_count) {
  std::vector<double> grid(taus);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  CheckResult bound_check{"threshold_pair_bound", 0, 0.0, 1.0, true, ""};
  CheckResult nest_check{"threshold_mask_nesting", 0, 0.0, 0.0, true, ""};
  CheckResult token_check{"uniform_token_sparsity", 0, 0.0, 0.0, true, ""};

  auto mixed = make_partition_fixtures(seed, fixture_count, 512, false);
  auto uniform =
      make_partition_fixtures(seed ^ 0x756e6966u, fixture_count, 512, true);
  std::vector<PartitionFixture> fixtures(mixed);
  fixtures.insert(fixtures.end(), uniform.begin(), uniform.end());

  Rng rng(seed ^ 0x73636f72u);
  for (std::size_t fi = 0; fi < fixtures.size(); ++fi) {
    const auto& fx = fixtures[fi];
    bool is_uniform = fi >= mixed.size();
    BlockLayout layout = build_layout(fx.geom, fx.spec);
    std::size_t s = fx.geom.seq_len();
    std::size_t nb = layout.block_count;
    Tensor q = random_matrix(rng, s, 8, -1.5f, 1.5f);
    Tensor k = random_matrix(rng, s, 8, -1.5f, 1.5f);
    auto sim = similarity(q, block_means(k, layout), true);

    SelectionMask prev;
    bool have_prev = false;
    for (double tau : grid) {
      auto mask =
          select_global_threshold(sim, tau, layout, /*include_self=*/false);
      double bound = std::ceil(tau * static_cast<double>(s * nb));
      double ratio = static_cast<double>(mask.selected) / bound;
      bound_check.cases += 1;
      bound_check.max_error = std::max(bound_check.max_error, ratio);
      if (static_cast<double>(mask.selected) > bound) bound_check.pass = false;

      if (have_prev) {
        nest_check.cases += 1;
        if (!prev.subset_of(mask)) {
          nest_check.pass = false;
          nest_check.max_error += 1.0;
        }
      }
      prev = std::move(mask);
      have_prev = true;

      if (is_uniform) {
        double sparsity = token_sparsity(prev, layout, s);
        double limit = tau + 1.0 / (static_cast<double>(s) *
                                    static_cast<double>(nb));
        token_check.cases += 1;
        double overshoot = sparsity - limit;
        token_check.max_error =
            std::max(token_check.max_error, std::max(0.0, overshoot));
        if (sparsity > limit) token_check.pass = false;
      }
    }
  }
  std::ostringstream os;
  os << fixtures.size() << " layouts x " << grid.size()
     << " thresholds, self-inclusion off";
  bound_check.detail = os.str();
  nest_check.detail = os.str();
  std::ostringstream os2;
  os2 << uniform.size() << " uniform layouts x " << grid.size()
      << " thresholds";
  token_check.detail = os2.str();
  return {bound_check, nest_check, token_check};
}

std::vector<CheckResult> run_gradient_checks(std::uint64_t seed,
                                             std::size_t fixture_count) {
  // Small geometries keep the finite-difference sweeps fast; s <= 16.
  const LatentGeometry geoms[6] = {
      {3, 2, 2, 4, 1}, {2, 3, 2, 4, 1}, {2, 2, 3, 4, 1},
      {4, 2, 2, 3, 1}, {2, 4, 2, 3, 1}, {2, 2, 4, 3, 1},
  };
  CheckResult dq_check{"grad_dq_finite_difference", 0, 0.0, 1e-3, true, ""};
  CheckResult dk_check{"grad_dk_finite_difference", 0, 0.0, 1e-3, true, ""};
  CheckResult dv_check{"grad_dv_finite_difference", 0, 0.0, 1e-3, true, ""};

  Rng rng(seed ^ 0x67726164u);
  const double eps = 1e-5;
  // The floor turns "relative error <= 1e-3 with absolute floor 1e-8" into a
  // single ratio test: |a-f| / max(scale, 1e-5) <= 1e-3.
  const double denom_floor = 1e-5;

  for (std::size_t i = 0; i < fixture_count; ++i) {
    const LatentGeometry& geom = geoms[i % 6];
    Scheme scheme = static_cast<Scheme>(i % 3);
    bool ragged = false;
    PartitionSpec spec =
        sample_spec(rng, scheme, geom, /*want_ragged=*/(i % 2) == 1, ragged);
    BlockLayout layout = build_layout(geom, spec);
    std::size_t s = geom.seq_len();
    std::size_t dh = geom.hidden;
    std::size_t nb = layout.block_count;

    Tensor64 q = random_matrix_d(rng, s, dh, -1.0, 1.0);
    Tensor64 k = random_matrix_d(rng, s, dh, -1.0, 1.0);
    Tensor64 v = random_matrix_d(rng, s, dh, -1.0, 1.0);
    Tensor64 d_out = random_matrix_d(rng, s, dh, -1.0, 1.0);

    SelectionPolicy policy;
    policy.scaled = true;
    policy.include_self = true;
    switch (i % 4) {
      case 0:
        policy.scope = SelectionScope::global;
        policy.rule = SelectionRule::threshold;
        policy.tau = kThresholdGrid[i % 4];
        break;
      case 1:
        policy.scope = SelectionScope::global;
        policy.rule = SelectionRule::topk;
        policy.k = std::max<std::size_t>(1, s * nb / 3);
        break;
      case 2:
        policy.scope = SelectionScope::local;
        policy.rule = SelectionRule::topk;
        policy.k = std::min<std::size_t>(nb, 2);
        break;
      default:
        policy.scope = SelectionScope::local;
        policy.rule = SelectionRule::threshold;
        policy.tau = kThresholdGrid[i % 4];
        break;
    }
    auto sim = similarity(q, block_means(k, layout), policy.scaled);
    SelectionMask mask = select(sim, policy, layout);

    auto objective = [&](const Tensor64& qq, const Tensor64& kk,
                         const Tensor64& vv) {
      auto res = sparse_forward_gather(qq, kk, vv, layout, mask);
      double acc = 0.0;
      for (std::size_t e = 0; e < res.output.numel(); ++e) {
        acc += d_out[e] * res.output[e];
      }
      return acc;
    };

    auto io = sparse_forward_gather(q, k, v, layout, mask);
    auto grads = sparse_backward(io, q, k, v, layout, mask, d_out);

    auto sweep = [&](Tensor64& param, const Tensor64& analytic,
                     CheckResult& check) {
      for (std::size_t e = 0; e < param.numel(); ++e) {
        double keep = param[e];
        param[e] = keep + eps;
        double plus = objective(q, k, v);
        param[e] = keep - eps;
        double minus = objective(q, k, v);
        param[e] = keep;
        double fd = (plus - minus) / (2.0 * eps);
        double a = analytic[e];
        double denom =
            std::max(denom_floor, std::max(std::abs(a), std::abs(fd)));
        double rel = std::abs(a - fd) / denom;
        check.cases += 1;
        check.max_error = std::max(check.max_error, rel);
        if (rel > check.tolerance) check.pass = false;
      }
    };
    sweep(q, grads.dq, dq_check);
    sweep(k, grads.dk, dk_check);
    sweep(v, grads.dv, dv_check);
  }
  std::ostringstream os;
  os << fixture_count
     << " f64 fixtures, central differences eps=1e-5, floor 1e-8";
  dq_check.detail = os.str();
  dk_check.detail = os.str();
  dv_check.detail = os.str();
  return {dq_check, dk_check, dv_check};
}

bool all_pass(const std::vector<CheckResult>& checks) {
  return std::all_of(checks.begin(), checks.end(),
                     [](const CheckResult& c) { return c.pass; });
}

nlohmann::json checks_to_json(const std::vector<CheckResult>& checks) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : checks) {
    arr.push_back({{"name", c.name},
                   {"cases", c.cases},
                   {"max_error", c.max_error},
                   {"tolerance", c.tolerance},
                   {"pass", c.pass},
                   {"detail", c.detail}});
  }
  return nlohmann::json{{"checks", arr}, {"pass", all_pass(checks)}};
}

}  // namespace vmoba
