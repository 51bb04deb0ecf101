#include "vmoba/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace vmoba {

namespace {

// Exponent masses for a score range, shifted by the range maximum. Computed
// in double regardless of T so threshold cuts behave identically for f32 and
// f64 score matrices.
std::vector<double> exp_masses(const double* scores, std::size_t n) {
  double m = scores[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, scores[i]);
  std::vector<double> e(n);
  for (std::size_t i = 0; i < n; ++i) e[i] = std::exp(scores[i] - m);
  return e;
}

// Indices of `values` sorted by (value desc, index asc). The index order is
// the (query, block) pair order for flattened matrices and the block order
// for single rows, so this is the whole tie-break rule.
std::vector<std::size_t> rank_descending(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  });
  return order;
}

// Count of leading `order` entries whose running mass first reaches
// tau * total, where total is the sum of all masses accumulated in the same
// sorted order. Comparing against tau * total instead of normalizing each
// prefix keeps the uniform-score case exact: masses are then exactly 1.0 and
// both sides are exact small integers.
std::size_t prefix_cut(const std::vector<double>& masses,
                       const std::vector<std::size_t>& order, double tau) {
  double total = 0.0;
  for (std::size_t idx : order) total += masses[idx];
  double bar = tau * total;
  double run = 0.0;
  for (std::size_t taken = 0; taken < order.size(); ++taken) {
    run += masses[order[taken]];
    if (run >= bar) return taken + 1;
  }
  return order.size();
}

void include_self_blocks(SelectionMask& mask, const BlockLayout& layout) {
  for (std::size_t q = 0; q < mask.rows; ++q) {
    mask.set(q, layout.token_to_block[q]);
  }
}

template <typename T>
void check_sim_layout(const SimilarityMatrixT<T>& sim,
                      const BlockLayout& layout) {
  if (sim.scores.ndim() != 2 || sim.scores.rows() != layout.seq_len ||
      sim.scores.cols() != layout.block_count) {
    throw std::invalid_argument(
        "selection: score shape " + shape_to_string(sim.scores.shape()) +
        " does not match layout (" + std::to_string(layout.seq_len) + " x " +
        std::to_string(layout.block_count) + ")");
  }
}

template <typename T>
std::vector<double> flatten_scores(const SimilarityMatrixT<T>& sim) {
  std::vector<double> flat(sim.scores.numel());
  for (std::size_t i = 0; i < flat.size(); ++i) {
    flat[i] = static_cast<double>(sim.scores[i]);
  }
  return flat;
}

}  // namespace

void SelectionPolicy::validate() const {
  if (rule == SelectionRule::topk) {
    if (k < 1) throw std::invalid_argument("top-k selection needs k >= 1");
  } else {
    if (!(tau > 0.0) || tau > 1.0) {
      throw std::invalid_argument("threshold selection needs tau in (0, 1]");
    }
  }
}

std::size_t SelectionMask::row_count(std::size_t q) const {
  std::size_t n = 0;
  for (std::size_t b = 0; b < cols; ++b) n += bits[q * cols + b];
  return n;
}

bool SelectionMask::subset_of(const SelectionMask& other) const {
  if (rows != other.rows || cols != other.cols) return false;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] && !other.bits[i]) return false;
  }
  return true;
}

SelectionMask all_ones_mask(std::size_t rows, std::size_t cols) {
  SelectionMask mask(rows, cols);
  std::fill(mask.bits.begin(), mask.bits.end(), std::uint8_t{1});
  mask.selected = rows * cols;
  return mask;
}

template <typename T>
SimilarityMatrixT<T> similarity(const TensorT<T>& q_head,
                                const TensorT<T>& means, bool scaled) {
  if (q_head.ndim() != 2 || means.ndim() != 2 ||
      q_head.cols() != means.cols()) {
    throw std::invalid_argument("similarity: incompatible shapes (queries " +
                                shape_to_string(q_head.shape()) + ", means " +
                                shape_to_string(means.shape()) + ")");
  }
  TensorT<T> scores = matmul(q_head, transpose(means));
  if (scaled) {
    T scale = T{1} / std::sqrt(static_cast<T>(q_head.cols()));
    for (T& v : scores.flat()) v *= scale;
  }
  ensure_finite(scores, "similarity");
  return {std::move(scores), scaled};
}

template <typename T>
SelectionMask select_global_threshold(const SimilarityMatrixT<T>& sim,
                                      double tau, const BlockLayout& layout,
                                      bool include_self) {
  if (!(tau > 0.0) || tau > 1.0) {
    throw std::invalid_argument("select_global_threshold: tau must be in (0, 1]");
  }
  check_sim_layout(sim, layout);
  std::vector<double> flat = flatten_scores(sim);
  std::vector<double> masses = exp_masses(flat.data(), flat.size());
  std::vector<std::size_t> order = rank_descending(masses);
  std::size_t cut = prefix_cut(masses, order, tau);

  SelectionMask mask(layout.seq_len, layout.block_count);
  for (std::size_t i = 0; i < cut; ++i) {
    std::size_t pair = order[i];
    mask.set(pair / layout.block_count, pair % layout.block_count);
  }
  if (include_self) include_self_blocks(mask, layout);
  return mask;
}

template <typename T>
SelectionMask select_global_topk(const SimilarityMatrixT<T>& sim,
                                 std::size_t k, const BlockLayout& layout,
                                 bool include_self) {
  check_sim_layout(sim, layout);
  std::size_t pairs = layout.seq_len * layout.block_count;
  if (k < 1 || k > pairs) {
    throw std::invalid_argument("select_global_topk: k = " + std::to_string(k) +
                                " out of range [1, " + std::to_string(pairs) +
                                "]");
  }
  std::vector<double> flat = flatten_scores(sim);
  std::vector<std::size_t> order = rank_descending(flat);

  SelectionMask mask(layout.seq_len, layout.block_count);
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t pair = order[i];
    mask.set(pair / layout.block_count, pair % layout.block_count);
  }
  if (include_self) include_self_blocks(mask, layout);
  return mask;
}

template <typename T>
SelectionMask select_local_topk(const SimilarityMatrixT<T>& sim, std::size_t k,
                                const BlockLayout& layout, bool include_self) {
  check_sim_layout(sim, layout);
  std::size_t nb = layout.block_count;
  if (k < 1 || k > nb) {
    throw std::invalid_argument("select_local_topk: k = " + std::to_string(k) +
                                " out of range [1, " + std::to_string(nb) +
                                "]");
  }
  SelectionMask mask(layout.seq_len, nb);
  std::vector<double> row(nb);
  for (std::size_t q = 0; q < layout.seq_len; ++q) {
    for (std::size_t b = 0; b < nb; ++b) {
      row[b] = static_cast<double>(sim.scores.at(q, b));
    }
    std::vector<std::size_t> order = rank_descending(row);
    // The own block takes one of the k slots: it displaces the weakest pick
    // when it did not rank in the top k on its own.
    std::size_t self_block = layout.token_to_block[q];
    bool self_in_topk = false;
    for (std::size_t i = 0; i < k; ++i) {
      if (order[i] == self_block) self_in_topk = true;
    }
    std::size_t keep = (include_self && !self_in_topk) ? k - 1 : k;
    for (std::size_t i = 0; i < keep; ++i) mask.set(q, order[i]);
    if (include_self) mask.set(q, self_block);
  }
  return mask;
}

template <typename T>
SelectionMask select_local_threshold(const SimilarityMatrixT<T>& sim,
                                     double tau, const BlockLayout& layout,
                                     bool include_self) {
  if (!(tau > 0.0) || tau > 1.0) {
    throw std::invalid_argument("select_local_threshold: tau must be in (0, 1]");
  }
  check_sim_layout(sim, layout);
  std::size_t nb = layout.block_count;
  SelectionMask mask(layout.seq_len, nb);
  std::vector<double> row(nb);
  for (std::size_t q = 0; q < layout.seq_len; ++q) {
    for (std::size_t b = 0; b < nb; ++b) {
      row[b] = static_cast<double>(sim.scores.at(q, b));
    }
    std::vector<double> masses = exp_masses(row.data(), nb);
    std::vector<std::size_t> order = rank_descending(masses);
    std::size_t cut = prefix_cut(masses, order, tau);
    for (std::size_t i = 0; i < cut; ++i) mask.set(q, order[i]);
    if (include_self) mask.set(q, layout.token_to_block[q]);
  }
  return mask;
}

template <typename T>
SelectionMask select(const SimilarityMatrixT<T>& sim,
                     const SelectionPolicy& policy, const BlockLayout& layout) {
  policy.validate();
  if (policy.scope == SelectionScope::global) {
    if (policy.rule == SelectionRule::topk) {
      return select_global_topk(sim, policy.k, layout, policy.include_self);
    }
    return select_global_threshold(sim, policy.tau, layout,
                                   policy.include_self);
  }
  if (policy.rule == SelectionRule::topk) {
    return select_local_topk(sim, policy.k, layout, policy.include_self);
  }
  return select_local_threshold(sim, policy.tau, layout, policy.include_self);
}

Tensor mask_to_tensor(const SelectionMask& mask) {
  std::vector<float> data(mask.bits.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = mask.bits[i] ? 1.0f : 0.0f;
  }
  return Tensor(Shape{mask.rows, mask.cols}, std::move(data));
}

void write_mask_csv(std::ostream& out, const SelectionMask& mask,
                    std::size_t head) {
  out << "head,query,block\n";
  for (std::size_t q = 0; q < mask.rows; ++q) {
    for (std::size_t b = 0; b < mask.cols; ++b) {
      if (mask.at(q, b)) out << head << ',' << q << ',' << b << '\n';
    }
  }
}

#define VMOBA_SELECTION_INST(T)                                               \
  template SimilarityMatrixT<T> similarity(const TensorT<T>&,                 \
                                           const TensorT<T>&, bool);          \
  template SelectionMask select_global_threshold(const SimilarityMatrixT<T>&, \
                                                 double, const BlockLayout&,  \
                                                 bool);                       \
  template SelectionMask select_global_topk(const SimilarityMatrixT<T>&,      \
                                            std::size_t, const BlockLayout&,  \
                                            bool);                            \
  template SelectionMask select_local_topk(const SimilarityMatrixT<T>&,       \
                                           std::size_t, const BlockLayout&,   \
                                           bool);                             \
  template SelectionMask select_local_threshold(const SimilarityMatrixT<T>&,  \
                                                double, const BlockLayout&,   \
                                                bool);                        \
  template SelectionMask select(const SimilarityMatrixT<T>&,                  \
                                const SelectionPolicy&, const BlockLayout&);

VMOBA_SELECTION_INST(float)
VMOBA_SELECTION_INST(double)
#undef VMOBA_SELECTION_INST

}  // namespace vmoba
