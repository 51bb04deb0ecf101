#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "vmoba/partition.hpp"
#include "vmoba/tensor.hpp"

namespace vmoba {

// Per-head query x key-block scores. `scaled` records whether the
// 1/sqrt(head_dim) factor was applied when the scores were produced.
template <typename T>
struct SimilarityMatrixT {
  TensorT<T> scores;  // [seq_len x block_count]
  bool scaled = false;
};

using SimilarityMatrix = SimilarityMatrixT<float>;

enum class SelectionScope { local, global };
enum class SelectionRule { topk, threshold };

struct SelectionPolicy {
  SelectionScope scope = SelectionScope::global;
  SelectionRule rule = SelectionRule::threshold;
  std::size_t k = 0;       // topk rule
  double tau = 0.25;       // threshold rule, in (0, 1]
  bool scaled = true;      // apply 1/sqrt(head_dim) to similarities
  bool include_self = true;

  void validate() const;  // throws std::invalid_argument
};

// Boolean query x key-block matrix plus its selected-pair count. Rows with no
// selected block are permitted here (selection with self-inclusion off can
// produce them); the attention ops reject such rows.
struct SelectionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;  // row-major 0/1
  std::size_t selected = 0;

  SelectionMask() = default;
  SelectionMask(std::size_t r, std::size_t c)
      : rows(r), cols(c), bits(r * c, 0) {}

  bool at(std::size_t q, std::size_t b) const { return bits[q * cols + b] != 0; }
  void set(std::size_t q, std::size_t b) {
    std::uint8_t& cell = bits[q * cols + b];
    if (!cell) {
      cell = 1;
      ++selected;
    }
  }
  std::size_t row_count(std::size_t q) const;
  bool subset_of(const SelectionMask& other) const;
  bool operator==(const SelectionMask& other) const {
    return rows == other.rows && cols == other.cols && bits == other.bits;
  }
};

SelectionMask all_ones_mask(std::size_t rows, std::size_t cols);

// scores[q][b] = scale * <q_head row q, means row b>, scale = 1/sqrt(dh) when
// the flag is set. q_head is [s x dh], means is [block_count x dh].
template <typename T>
SimilarityMatrixT<T> similarity(const TensorT<T>& q_head,
                                const TensorT<T>& means, bool scaled);

// Softmax-normalizes the whole flattened score matrix, sorts pairs by
// (normalized score desc, query asc, block asc), and keeps the shortest
// prefix whose cumulative mass reaches tau. include_self then adds each
// query's own block on top of that prefix.
template <typename T>
SelectionMask select_global_threshold(const SimilarityMatrixT<T>& sim,
                                      double tau, const BlockLayout& layout,
                                      bool include_self = true);

// Top k pairs of the flattened score matrix by raw score, same tie order;
// include_self adds own blocks afterwards (the union may exceed k).
template <typename T>
SelectionMask select_global_topk(const SimilarityMatrixT<T>& sim,
                                 std::size_t k, const BlockLayout& layout,
                                 bool include_self = true);

// Per query row, the k highest-scoring blocks. include_self folds the own
// block into the k slots: it replaces the lowest-ranked pick when absent, so
// every row has exactly k blocks.
template <typename T>
SelectionMask select_local_topk(const SimilarityMatrixT<T>& sim, std::size_t k,
                                const BlockLayout& layout,
                                bool include_self = true);

// Per query row, softmax-normalizes the row and keeps the shortest descending
// prefix with cumulative mass >= tau; include_self adds own blocks afterwards.
template <typename T>
SelectionMask select_local_threshold(const SimilarityMatrixT<T>& sim,
                                     double tau, const BlockLayout& layout,
                                     bool include_self = true);

// Dispatch on policy scope and rule.
template <typename T>
SelectionMask select(const SimilarityMatrixT<T>& sim,
                     const SelectionPolicy& policy, const BlockLayout& layout);

// f32 tensor of 0/1 entries shaped [rows x cols].
Tensor mask_to_tensor(const SelectionMask& mask);

// CSV pair list: header "head,query,block", one row per selected pair.
void write_mask_csv(std::ostream& out, const SelectionMask& mask,
                    std::size_t head);

#define VMOBA_SELECTION_EXTERN(T)                                             \
  extern template SimilarityMatrixT<T> similarity(const TensorT<T>&,          \
                                                  const TensorT<T>&, bool);   \
  extern template SelectionMask select_global_threshold(                      \
      const SimilarityMatrixT<T>&, double, const BlockLayout&, bool);         \
  extern template SelectionMask select_global_topk(                           \
      const SimilarityMatrixT<T>&, std::size_t, const BlockLayout&, bool);    \
  extern template SelectionMask select_local_topk(                            \
      const SimilarityMatrixT<T>&, std::size_t, const BlockLayout&, bool);    \
  extern template SelectionMask select_local_threshold(                       \
      const SimilarityMatrixT<T>&, double, const BlockLayout&, bool);         \
  extern template SelectionMask select(const SimilarityMatrixT<T>&,           \
                                       const SelectionPolicy&,                \
                                       const BlockLayout&);

VMOBA_SELECTION_EXTERN(float)
VMOBA_SELECTION_EXTERN(double)
#undef VMOBA_SELECTION_EXTERN

}  // namespace vmoba
