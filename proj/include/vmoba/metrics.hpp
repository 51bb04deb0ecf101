#pragma once

#include <cstdint>
#include <iosfwd>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vmoba/partition.hpp"
#include "vmoba/selection.hpp"
#include "vmoba/tensor.hpp"

namespace vmoba {

// FLOPs model: 2 flops per multiply-add, counting only the two matrix
// products (block-mean similarity and attention); softmax and normalization
// are ignored. d is the full hidden size across heads.
struct FlopsReport {
  std::uint64_t selection_flops = 0;  // 2 * s * block_count * d
  std::uint64_t attention_flops = 0;  // 4 * d * sum_q attended_tokens(q)
  std::uint64_t total_flops = 0;      // selection + attention
  std::uint64_t dense_flops = 0;      // 4 * s^2 * d
  double k_avg = 0.0;                 // mean selected blocks per query
  double speedup = 0.0;               // dense / total
};

FlopsReport flops_estimate(const LatentGeometry& geom,
                           const BlockLayout& layout,
                           const SelectionMask& mask);

// Attended (query, key-token) pairs divided by s^2.
double token_sparsity(const SelectionMask& mask, const BlockLayout& layout,
                      std::size_t s);

// For each row of `rows` (nonnegative entries), the sum of the top
// ceil(p * n) entries after dividing the row by its sum.
template <typename T>
std::vector<double> query_importance(const TensorT<T>& rows, double p);

struct ConcentrationReport {
  std::vector<double> sorted_scores;  // softmax-normalized, descending
  std::vector<double> cumulative;     // prefix sums, final entry ~ 1
  // (requested fraction, 1-based count of scores needed to reach it)
  std::vector<std::pair<double, std::size_t>> cutoffs;
};

template <typename T>
ConcentrationReport concentration_curve(const SimilarityMatrixT<T>& sim,
                                        const std::vector<double>& fractions);

// Entry (i, j) = mean over queries q in query-block i of the softmax
// attention mass q assigns to key tokens in key-block j. Rows sum to 1.
template <typename T>
TensorT<T> block_attention_map(const TensorT<T>& q, const TensorT<T>& k,
                               const BlockLayout& layout_q,
                               const BlockLayout& layout_k, bool scaled = true);

nlohmann::json flops_report_to_json(const FlopsReport& report);
nlohmann::json concentration_report_to_json(const ConcentrationReport& report);

// CSV emitters: one row per query / per sorted index / per block pair.
void write_query_importance_csv(std::ostream& out,
                                const std::vector<double>& values);
void write_concentration_csv(std::ostream& out,
                             const ConcentrationReport& report);
template <typename T>
void write_block_map_csv(std::ostream& out, const TensorT<T>& map);

#define VMOBA_METRICS_EXTERN(T)                                            \
  extern template std::vector<double> query_importance(const TensorT<T>&, \
                                                       double);           \
  extern template ConcentrationReport concentration_curve(                \
      const SimilarityMatrixT<T>&, const std::vector<double>&);           \
  extern template TensorT<T> block_attention_map(                         \
      const TensorT<T>&, const TensorT<T>&, const BlockLayout&,           \
      const BlockLayout&, bool);                                          \
  extern template void write_block_map_csv(std::ostream&, const TensorT<T>&);

VMOBA_METRICS_EXTERN(float)
VMOBA_METRICS_EXTERN(double)
#undef VMOBA_METRICS_EXTERN

}  // namespace vmoba
