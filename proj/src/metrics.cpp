#include "vmoba/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "vmoba/parallel.hpp"

namespace vmoba {

namespace {

std::uint64_t attended_tokens(const SelectionMask& mask,
                              const BlockLayout& layout) {
  // Per-block column counts first: sum_q sum_b mask(q,b)*len(b) without
  // walking the mask twice.
  std::uint64_t total = 0;
  for (std::size_t q = 0; q < mask.rows; ++q) {
    const std::uint8_t* row = mask.bits.data() + q * mask.cols;
    for (std::size_t b = 0; b < mask.cols; ++b) {
      if (row[b]) total += layout.block_tokens[b].size();
    }
  }
  return total;
}

}  // namespace

FlopsReport flops_estimate(const LatentGeometry& geom,
                           const BlockLayout& layout,
                           const SelectionMask& mask) {
  if (mask.rows != layout.seq_len || mask.cols != layout.block_count) {
    throw std::invalid_argument(
        "flops_estimate: mask shape does not match the layout");
  }
  std::uint64_t s = layout.seq_len;
  std::uint64_t d = geom.hidden;
  std::uint64_t nb = layout.block_count;

  FlopsReport r;
  r.selection_flops = 2 * s * nb * d;
  r.attention_flops = 4 * d * attended_tokens(mask, layout);
  r.total_flops = r.selection_flops + r.attention_flops;
  r.dense_flops = 4 * s * s * d;
  r.k_avg = static_cast<double>(mask.selected) / static_cast<double>(s);
  r.speedup =
      static_cast<double>(r.dense_flops) / static_cast<double>(r.total_flops);
  return r;
}

double token_sparsity(const SelectionMask& mask, const BlockLayout& layout,
                      std::size_t s) {
  if (mask.rows != layout.seq_len || mask.cols != layout.block_count) {
    throw std::invalid_argument(
        "token_sparsity: mask shape does not match the layout");
  }
  double pairs = static_cast<double>(attended_tokens(mask, layout));
  return pairs / (static_cast<double>(s) * static_cast<double>(s));
}

template <typename T>
std::vector<double> query_importance(const TensorT<T>& rows, double p) {
  if (rows.ndim() != 2) {
    throw std::invalid_argument("query_importance: expected a rank-2 tensor");
  }
  if (!(p > 0.0) || p > 1.0) {
    throw std::invalid_argument("query_importance: p must be in (0, 1]");
  }
  std::size_t nq = rows.rows(), n = rows.cols();
  if (n == 0) {
    throw std::invalid_argument("query_importance: rows are empty");
  }
  std::size_t keep = static_cast<std::size_t>(
      std::ceil(p * static_cast<double>(n)));

  std::vector<double> out(nq);
  std::vector<double> row(n);
  for (std::size_t qi = 0; qi < nq; ++qi) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double v = static_cast<double>(rows.at(qi, j));
      if (v < 0.0) {
        throw std::invalid_argument(
            "query_importance: rows must be nonnegative (normalize or "
            "softmax them first)");
      }
      row[j] = v;
      total += v;
    }
    if (total <= 0.0) {
      throw std::invalid_argument(
          "query_importance: a row sums to zero and cannot be normalized");
    }
    std::sort(row.begin(), row.end(), std::greater<double>());
    double mass = 0.0;
    for (std::size_t j = 0; j < keep; ++j) mass += row[j];
    out[qi] = mass / total;
  }
  return out;
}

template <typename T>
ConcentrationReport concentration_curve(const SimilarityMatrixT<T>& sim,
                                        const std::vector<double>& fractions) {
  for (double f : fractions) {
    if (!(f > 0.0) || f > 1.0) {
      throw std::invalid_argument(
          "concentration_curve: fractions must lie in (0, 1]");
    }
  }
  std::size_t n = sim.scores.numel();
  if (n == 0) {
    throw std::invalid_argument("concentration_curve: empty score matrix");
  }

  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    m = std::max(m, static_cast<double>(sim.scores[i]));
  }
  std::vector<double> masses(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    masses[i] = std::exp(static_cast<double>(sim.scores[i]) - m);
  }
  std::sort(masses.begin(), masses.end(), std::greater<double>());
  for (double e : masses) total += e;

  ConcentrationReport report;
  report.sorted_scores.resize(n);
  report.cumulative.resize(n);
  double run = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    report.sorted_scores[i] = masses[i] / total;
    run += report.sorted_scores[i];
    report.cumulative[i] = run;
  }

  for (double f : fractions) {
    // Cut on exponent mass against f * total: exact for uniform scores,
    // where every mass is exactly 1.
    double bar = f * total;
    double acc = 0.0;
    std::size_t cut = n;
    for (std::size_t i = 0; i < n; ++i) {
      acc += masses[i];
      if (acc >= bar) {
        cut = i + 1;
        break;
      }
    }
    report.cutoffs.emplace_back(f, cut);
  }
  return report;
}

template <typename T>
TensorT<T> block_attention_map(const TensorT<T>& q, const TensorT<T>& k,
                               const BlockLayout& layout_q,
                               const BlockLayout& layout_k, bool scaled) {
  if (q.ndim() != 2 || k.ndim() != 2 || q.cols() != k.cols()) {
    throw std::invalid_argument("block_attention_map: incompatible q/k shapes");
  }
  if (q.rows() != layout_q.seq_len || k.rows() != layout_k.seq_len) {
    throw std::invalid_argument(
        "block_attention_map: layouts do not match the q/k row counts");
  }
  std::size_t dim = q.cols(), nk = k.rows();
  T scale = scaled ? T{1} / std::sqrt(static_cast<T>(dim)) : T{1};

  // k transposed once so the logit loop is contiguous per query.
  std::vector<T> kt(dim * nk);
  for (std::size_t i = 0; i < nk; ++i) {
    for (std::size_t p = 0; p < dim; ++p) kt[p * nk + i] = k.at(i, p);
  }

  TensorT<T> map(Shape{layout_q.block_count, layout_k.block_count});
  // Query blocks own disjoint output rows, so the outer loop parallelizes.
  parallel_for(layout_q.block_count, [&](std::size_t lo, std::size_t hi) {
    std::vector<T> qs(dim), logits(nk), prob(nk);
    for (std::size_t qb = lo; qb < hi; ++qb) {
      T* mrow = map.data() + qb * layout_k.block_count;
      for (std::uint32_t qt : layout_q.block_tokens[qb]) {
        const T* qrow = q.data() + std::size_t{qt} * dim;
        for (std::size_t p = 0; p < dim; ++p) qs[p] = scale * qrow[p];
        for (std::size_t j = 0; j < nk; ++j) logits[j] = T{0};
        for (std::size_t p = 0; p < dim; ++p) {
          T qp = qs[p];
          const T* krow = kt.data() + p * nk;
          for (std::size_t j = 0; j < nk; ++j) logits[j] += qp * krow[j];
        }
        T mx = logits[0];
        for (std::size_t j = 1; j < nk; ++j) mx = std::max(mx, logits[j]);
        T tot = T{0};
        for (std::size_t j = 0; j < nk; ++j) {
          prob[j] = std::exp(logits[j] - mx);
          tot += prob[j];
        }
        for (std::size_t j = 0; j < nk; ++j) {
          mrow[layout_k.token_to_block[j]] += prob[j] / tot;
        }
      }
      T inv = T{1} / static_cast<T>(layout_q.block_tokens[qb].size());
      for (std::size_t j = 0; j < layout_k.block_count; ++j) mrow[j] *= inv;
    }
  });
  ensure_finite(map, "block_attention_map");
  return map;
}

nlohmann::json flops_report_to_json(const FlopsReport& report) {
  return nlohmann::json{
      {"selection_flops", report.selection_flops},
      {"attention_flops", report.attention_flops},
      {"total_flops", report.total_flops},
      {"dense_flops", report.dense_flops},
      {"k_avg", report.k_avg},
      {"speedup", report.speedup},
  };
}

nlohmann::json concentration_report_to_json(const ConcentrationReport& report) {
  nlohmann::json cutoffs = nlohmann::json::array();
  for (const auto& [fraction, index] : report.cutoffs) {
    cutoffs.push_back({{"fraction", fraction}, {"count", index}});
  }
  return nlohmann::json{
      {"pairs", report.sorted_scores.size()},
      {"cutoffs", cutoffs},
      {"cumulative_final",
       report.cumulative.empty() ? 0.0 : report.cumulative.back()},
  };
}

void write_query_importance_csv(std::ostream& out,
                                const std::vector<double>& values) {
  out << "query,top_p_mass\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    out << i << ',' << values[i] << '\n';
  }
}

void write_concentration_csv(std::ostream& out,
                             const ConcentrationReport& report) {
  out << "rank,normalized_score,cumulative\n";
  for (std::size_t i = 0; i < report.sorted_scores.size(); ++i) {
    out << i << ',' << report.sorted_scores[i] << ',' << report.cumulative[i]
        << '\n';
  }
}

template <typename T>
void write_block_map_csv(std::ostream& out, const TensorT<T>& map) {
  out << "query_block,key_block,mass\n";
  for (std::size_t i = 0; i < map.rows(); ++i) {
    for (std::size_t j = 0; j < map.cols(); ++j) {
      out << i << ',' << j << ',' << map.at(i, j) << '\n';
    }
  }
}

#define VMOBA_METRICS_INST(T)                                                 \
  template std::vector<double> query_importance(const TensorT<T>&, double);   \
  template ConcentrationReport concentration_curve(                           \
      const SimilarityMatrixT<T>&, const std::vector<double>&);               \
  template TensorT<T> block_attention_map(const TensorT<T>&,                  \
                                          const TensorT<T>&,                  \
                                          const BlockLayout&,                 \
                                          const BlockLayout&, bool);          \
  template void write_block_map_csv(std::ostream&, const TensorT<T>&);

VMOBA_METRICS_INST(float)
VMOBA_METRICS_INST(double)
#undef VMOBA_METRICS_INST

}  // namespace vmoba
