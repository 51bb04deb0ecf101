#include "vmoba/commands.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "vmoba/attention.hpp"
#include "vmoba/metrics.hpp"
#include "vmoba/rng.hpp"
#include "vmoba/tensor_io.hpp"
#include "vmoba/toytrain.hpp"
#include "vmoba/verify.hpp"

namespace vmoba {
namespace {

namespace fs = std::filesystem;

void ensure_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw TensorIoError(TensorIoErrorKind::io_failure,
                        "cannot create output directory " + dir + ": " +
                            ec.message());
  }
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw TensorIoError(TensorIoErrorKind::io_failure,
                        "cannot open " + path.string() + " for writing");
  }
  return out;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  auto out = open_out(path);
  out << j.dump(2) << "\n";
  if (!out) {
    throw TensorIoError(TensorIoErrorKind::io_failure,
                        "write failed on " + path.string());
  }
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t(Shape{rows, cols});
  for (auto& v : t.flat()) v = rng.uniform_float(-1.0f, 1.0f);
  return t;
}

// Least-squares fit of y = a*x^2 + b*x + c via the normal equations. x is
// normalized to [0, 1] internally for conditioning and the coefficients are
// mapped back to raw units.
struct QuadraticFit {
  double a = 0.0, b = 0.0, c = 0.0;
  bool ok = false;
};

QuadraticFit fit_quadratic(const std::vector<double>& x,
                           const std::vector<double>& y) {
  QuadraticFit fit;
  if (x.size() < 3) return fit;
  double xmax = *std::max_element(x.begin(), x.end());
  if (xmax <= 0.0) return fit;
  double m[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
  double r[3] = {0, 0, 0};
  for (std::size_t i = 0; i < x.size(); ++i) {
    double u = x[i] / xmax;
    double p[3] = {u * u, u, 1.0};
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) m[a][b] += p[a] * p[b];
      r[a] += p[a] * y[i];
    }
  }
  // Gaussian elimination with partial pivoting on the 3x3 system.
  int perm[3] = {0, 1, 2};
  for (int col = 0; col < 3; ++col) {
    int pivot = col;
    for (int row = col + 1; row < 3; ++row) {
      if (std::abs(m[perm[row]][col]) > std::abs(m[perm[pivot]][col])) {
        pivot = row;
      }
    }
    std::swap(perm[col], perm[pivot]);
    double lead = m[perm[col]][col];
    if (std::abs(lead) < 1e-12) return fit;
    for (int row = col + 1; row < 3; ++row) {
      double f = m[perm[row]][col] / lead;
      for (int k = col; k < 3; ++k) m[perm[row]][k] -= f * m[perm[col]][k];
      r[perm[row]] -= f * r[perm[col]];
    }
  }
  double sol[3];
  for (int col = 2; col >= 0; --col) {
    double acc = r[perm[col]];
    for (int k = col + 1; k < 3; ++k) acc -= m[perm[col]][k] * sol[k];
    sol[col] = acc / m[perm[col]][col];
  }
  fit.a = sol[0] / (xmax * xmax);
  fit.b = sol[1] / xmax;
  fit.c = sol[2];
  fit.ok = true;
  return fit;
}

nlohmann::json fit_to_json(const QuadraticFit& fit) {
  if (!fit.ok) return nullptr;
  return nlohmann::json{{"a", fit.a}, {"b", fit.b}, {"c", fit.c}};
}

// Bench geometry for sequence length s at fixed frame count: H is the
// largest divisor of s/frames not exceeding its square root, so the spatial
// slice stays as close to square as the factorization allows.
bool bench_geometry(const BenchConfig& bench, std::size_t s,
                    LatentGeometry& geom_out) {
  if (s == 0 || s % bench.frames != 0) return false;
  std::size_t area = s / bench.frames;
  std::size_t best = 1;
  for (std::size_t h = 1; h * h <= area; ++h) {
    if (area % h == 0) best = h;
  }
  geom_out = LatentGeometry{bench.frames, best, area / best, bench.hidden,
                            bench.heads};
  return true;
}

}  // namespace

int cmd_verify(const RunConfig& config) {
  ensure_out_dir(config.out_dir);
  std::vector<CheckResult> checks = run_partition_checks(config);

  auto oracle = run_oracle_checks(config.seed, 12, 512);
  checks.insert(checks.end(), oracle.begin(), oracle.end());

  std::vector<double> taus{0.15, 0.25, 0.35, 0.50};
  if (config.selection.rule == SelectionRule::threshold) {
    taus.push_back(config.selection.tau);
  }
  auto sparsity = run_sparsity_checks(config.seed, taus, 6);
  checks.insert(checks.end(), sparsity.begin(), sparsity.end());

  auto grads = run_gradient_checks(config.seed, 10);
  checks.insert(checks.end(), grads.begin(), grads.end());

  for (const auto& c : checks) {
    std::printf("[%s] %-32s cases=%zu max_error=%.3g tol=%.3g  %s\n",
                c.pass ? " ok " : "FAIL", c.name.c_str(), c.cases, c.max_error,
                c.tolerance, c.detail.c_str());
  }
  write_json(fs::path(config.out_dir) / "verify.json", checks_to_json(checks));
  return all_pass(checks) ? 0 : 1;
}

int cmd_bench(const RunConfig& config) {
  ensure_out_dir(config.out_dir);
  const BenchConfig& bench = config.bench;

  struct Row {
    std::size_t s = 0;
    double dense_ms = 0.0;
    double vmoba_ms = 0.0;
    std::uint64_t flops_dense = 0;
    std::uint64_t flops_vmoba = 0;
    double k_avg = 0.0;
    bool crossover = false;
  };
  std::vector<Row> rows;
  std::vector<std::size_t> skipped;

  for (std::size_t s : bench.lengths) {
    LatentGeometry geom;
    if (!bench_geometry(bench, s, geom)) {
      std::fprintf(stderr,
                   "warning: length %zu is not achievable with %zu frames; "
                   "skipped\n",
                   s, bench.frames);
      skipped.push_back(s);
      continue;
    }
    geom.validate();
    auto spec = PartitionSpec::spatio_temporal(
        (geom.frames + bench.block_counts[0] - 1) / bench.block_counts[0],
        (geom.height + bench.block_counts[1] - 1) / bench.block_counts[1],
        (geom.width + bench.block_counts[2] - 1) / bench.block_counts[2]);
    BlockLayout layout = build_layout(geom, spec);

    Rng rng(config.seed ^ (0x62656e63u + s));
    std::size_t dh = geom.head_dim();
    Tensor q = random_matrix(rng, s, geom.hidden);
    Tensor k = random_matrix(rng, s, geom.hidden);
    Tensor v = random_matrix(rng, s, geom.hidden);
    std::vector<Tensor> qh, kh, vh;
    for (std::size_t h = 0; h < geom.heads; ++h) {
      qh.push_back(column_slice(q, h * dh, dh));
      kh.push_back(column_slice(k, h * dh, dh));
      vh.push_back(column_slice(v, h * dh, dh));
    }

    std::vector<double> dense_times, vmoba_times;
    for (std::size_t rep = 0; rep < bench.repetitions; ++rep) {
      double t0 = now_ms();
      for (std::size_t h = 0; h < geom.heads; ++h) {
        auto res = dense_attention(qh[h], kh[h], vh[h]);
        (void)res;
      }
      dense_times.push_back(now_ms() - t0);

      double t1 = now_ms();
      for (std::size_t h = 0; h < geom.heads; ++h) {
        auto means = block_means(kh[h], layout);
        auto sim = similarity(qh[h], means, config.selection.scaled);
        auto mask = select(sim, config.selection, layout);
        auto res = sparse_forward_streamed(qh[h], kh[h], vh[h], layout, mask);
        (void)res;
      }
      vmoba_times.push_back(now_ms() - t1);
    }

    // FLOPs use the head-0 mask with d equal to the whole hidden size; the
    // model abstracts heads away.
    auto means0 = block_means(kh[0], layout);
    auto sim0 = similarity(qh[0], means0, config.selection.scaled);
    auto mask0 = select(sim0, config.selection, layout);
    FlopsReport flops = flops_estimate(geom, layout, mask0);

    Row row;
    row.s = s;
    row.dense_ms = median(dense_times);
    row.vmoba_ms = median(vmoba_times);
    row.flops_dense = flops.dense_flops;
    row.flops_vmoba = flops.total_flops;
    row.k_avg = flops.k_avg;
    double sb = static_cast<double>(s) / layout.block_count;
    row.crossover =
        flops.k_avg * sb + static_cast<double>(s) / (2.0 * sb) <
        static_cast<double>(s);
    rows.push_back(row);
  }

  auto csv = open_out(fs::path(config.out_dir) / "bench.csv");
  csv << "s,dense_ms,vmoba_ms,flops_dense,flops_vmoba\n";
  for (const auto& row : rows) {
    csv << row.s << "," << row.dense_ms << "," << row.vmoba_ms << ","
        << row.flops_dense << "," << row.flops_vmoba << "\n";
  }
  csv.close();

  std::vector<double> xs, dense_ys, vmoba_ys;
  for (const auto& row : rows) {
    xs.push_back(static_cast<double>(row.s));
    dense_ys.push_back(row.dense_ms);
    vmoba_ys.push_back(row.vmoba_ms);
  }
  QuadraticFit dense_fit = fit_quadratic(xs, dense_ys);
  QuadraticFit vmoba_fit = fit_quadratic(xs, vmoba_ys);

  nlohmann::json jrows = nlohmann::json::array();
  for (const auto& row : rows) {
    jrows.push_back({{"s", row.s},
                     {"dense_ms", row.dense_ms},
                     {"vmoba_ms", row.vmoba_ms},
                     {"flops_dense", row.flops_dense},
                     {"flops_vmoba", row.flops_vmoba},
                     {"k_avg", row.k_avg},
                     {"crossover_satisfied", row.crossover}});
  }
  write_json(fs::path(config.out_dir) / "bench.json",
             nlohmann::json{{"rows", jrows},
                            {"skipped", skipped},
                            {"fit",
                             {{"dense", fit_to_json(dense_fit)},
                              {"vmoba", fit_to_json(vmoba_fit)}}}});
  return 0;
}

int cmd_analyze(const RunConfig& config) {
  if (!config.has_analysis) {
    throw ConfigError("analyze requires an \"analysis\" config section");
  }
  ensure_out_dir(config.out_dir);
  const AnalysisConfig& an = config.analysis;

  Tensor q = read_tensor<float>(an.q_path);
  Tensor k = read_tensor<float>(an.k_path);
  const LatentGeometry& geom = config.geometry;
  std::size_t s = geom.seq_len();
  auto check_shape = [&](const Tensor& t, const char* label) {
    if (t.ndim() != 2 || t.extent(0) != s || t.extent(1) != geom.hidden) {
      std::ostringstream os;
      os << label << " tensor is " << shape_to_string(t.shape())
         << " but the config geometry wants [" << s << " x " << geom.hidden
         << "]";
      throw ConfigError(os.str());
    }
  };
  check_shape(q, "query");
  check_shape(k, "key");

  const PartitionSpec* spec = &config.part_3d;
  if (an.scheme == Scheme::temporal_1d) spec = &config.part_1d;
  if (an.scheme == Scheme::spatial_2d) spec = &config.part_2d;
  BlockLayout layout = build_layout(geom, *spec);

  std::size_t dh = geom.head_dim();
  nlohmann::json heads_json = nlohmann::json::array();
  for (std::size_t h = 0; h < geom.heads; ++h) {
    Tensor qh = column_slice(q, h * dh, dh);
    Tensor kh = column_slice(k, h * dh, dh);

    auto means = block_means(kh, layout);
    auto sim = similarity(qh, means, config.selection.scaled);

    // Importance wants nonnegative rows that sum to 1, so feed it the
    // row-softmaxed similarities.
    Tensor weights(Shape{s, layout.block_count});
    for (std::size_t row = 0; row < s; ++row) {
      Tensor line(Shape{layout.block_count});
      for (std::size_t b = 0; b < layout.block_count; ++b) {
        line[b] = sim.scores.at(row, b);
      }
      Tensor soft = stable_softmax(line, 1.0f);
      for (std::size_t b = 0; b < layout.block_count; ++b) {
        weights.at(row, b) = soft[b];
      }
    }
    auto importance = query_importance(weights, an.p);
    auto concentration = concentration_curve(sim, an.fractions);
    auto block_map = block_attention_map(qh, kh, layout, layout,
                                         config.selection.scaled);

    std::string prefix = "analyze_head" + std::to_string(h);
    {
      auto out = open_out(fs::path(config.out_dir) / (prefix + "_importance.csv"));
      write_query_importance_csv(out, importance);
    }
    {
      auto out =
          open_out(fs::path(config.out_dir) / (prefix + "_concentration.csv"));
      write_concentration_csv(out, concentration);
    }
    {
      auto out = open_out(fs::path(config.out_dir) / (prefix + "_blockmap.csv"));
      write_block_map_csv(out, block_map);
    }

    double diag = 0.0;
    for (std::size_t b = 0; b < layout.block_count; ++b) {
      diag += block_map.at(b, b);
    }
    diag /= static_cast<double>(layout.block_count);
    heads_json.push_back(
        {{"head", h},
         {"importance_mean",
          std::accumulate(importance.begin(), importance.end(), 0.0) /
              static_cast<double>(importance.size())},
         {"block_map_diagonal_mean", diag},
         {"concentration", concentration_report_to_json(concentration)}});
  }
  write_json(fs::path(config.out_dir) / "analysis.json",
             nlohmann::json{{"scheme", scheme_name(an.scheme)},
                            {"block_count", layout.block_count},
                            {"p", an.p},
                            {"heads", heads_json}});
  return 0;
}

int cmd_train_toy(const RunConfig& config) {
  ensure_out_dir(config.out_dir);
  std::vector<LossTrace> traces;
  nlohmann::json traces_json = nlohmann::json::object();
  bool any_diverged = false;

  for (AttentionMode mode : config.toytrain_modes) {
    ToyModelConfig tc = config.toytrain;
    tc.mode = mode;
    tc.validate();
    LossTrace trace = train(tc);
    const char* name = attention_mode_name(mode);
    std::printf("mode %-6s: initial %.6f final %.6f%s\n", name,
                trace.loss.empty() ? 0.0 : trace.initial_loss(),
                trace.loss.empty() ? 0.0 : trace.final_loss(),
                trace.diverged ? " (diverged)" : "");
    {
      auto out = open_out(fs::path(config.out_dir) /
                          ("trace_" + std::string(name) + ".csv"));
      write_trace_csv(out, trace);
    }
    traces_json[name] = trace_to_json(trace);
    any_diverged = any_diverged || trace.diverged;
    traces.push_back(std::move(trace));
  }

  nlohmann::json cmp_json = nullptr;
  bool comparable = traces.size() >= 2;
  for (const auto& t : traces) {
    comparable = comparable && !t.diverged && t.loss.size() == traces[0].loss.size();
  }
  if (comparable) {
    cmp_json = comparison_to_json(compare_losses(traces));
  }
  write_json(fs::path(config.out_dir) / "toytrain.json",
             nlohmann::json{{"traces", traces_json}, {"comparison", cmp_json}});
  return any_diverged ? 1 : 0;
}

}  // namespace vmoba
