#pragma once

#include <vector>

#include "vmoba/partition.hpp"
#include "vmoba/selection.hpp"
#include "vmoba/tensor.hpp"

namespace vmoba {

// Forward result: output rows plus the per-query log-sum-exp of the attended
// logits, which the backward reuses so it never recomputes the normalizer.
template <typename T>
struct AttentionResultT {
  TensorT<T> output;   // [queries x value_dim]
  std::vector<T> lse;  // [queries]
};

template <typename T>
struct AttentionGradsT {
  TensorT<T> dq, dk, dv;
};

using AttentionResult = AttentionResultT<float>;
using AttentionGrads = AttentionGradsT<float>;

// O = softmax(scale * Q K^T) V with a row-wise stable softmax;
// scale = 1/sqrt(key_dim) when `scaled` is set, else 1.
template <typename T>
AttentionResultT<T> dense_attention(const TensorT<T>& q, const TensorT<T>& k,
                                    const TensorT<T>& v, bool scaled = true);

// Dense attention with logit(q, key) = -infinity whenever key's block is not
// selected for q. This is the reference the sparse paths are checked against.
template <typename T>
AttentionResultT<T> masked_dense_attention(const TensorT<T>& q,
                                           const TensorT<T>& k,
                                           const TensorT<T>& v,
                                           const SelectionMask& mask,
                                           const BlockLayout& layout,
                                           bool scaled = true);

// Gathers each query's selected K/V rows and runs one stable softmax over
// them.
template <typename T>
AttentionResultT<T> sparse_forward_gather(const TensorT<T>& q,
                                          const TensorT<T>& k,
                                          const TensorT<T>& v,
                                          const BlockLayout& layout,
                                          const SelectionMask& mask,
                                          bool scaled = true);

// Visits selected blocks in ascending id order, keeping a running max,
// exponent sum, and weighted V accumulator, merging partial softmaxes by
// log-sum-exp rescaling. With a single selected block this performs exactly
// the gather path's operations.
template <typename T>
AttentionResultT<T> sparse_forward_streamed(const TensorT<T>& q,
                                            const TensorT<T>& k,
                                            const TensorT<T>& v,
                                            const BlockLayout& layout,
                                            const SelectionMask& mask,
                                            bool scaled = true);

// Analytic softmax-attention gradients restricted to selected pairs. The mask
// is a constant: no gradient flows through block selection. Unselected K/V
// rows accumulate only from queries that selected their block.
template <typename T>
AttentionGradsT<T> sparse_backward(const AttentionResultT<T>& io,
                                   const TensorT<T>& q, const TensorT<T>& k,
                                   const TensorT<T>& v,
                                   const BlockLayout& layout,
                                   const SelectionMask& mask,
                                   const TensorT<T>& d_out,
                                   bool scaled = true);

#define VMOBA_ATTENTION_EXTERN(T)                                             \
  extern template AttentionResultT<T> dense_attention(                        \
      const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, bool);         \
  extern template AttentionResultT<T> masked_dense_attention(                 \
      const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,                \
      const SelectionMask&, const BlockLayout&, bool);                        \
  extern template AttentionResultT<T> sparse_forward_gather(                  \
      const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,                \
      const BlockLayout&, const SelectionMask&, bool);                        \
  extern template AttentionResultT<T> sparse_forward_streamed(                \
      const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,                \
      const BlockLayout&, const SelectionMask&, bool);                        \
  extern template AttentionGradsT<T> sparse_backward(                         \
      const AttentionResultT<T>&, const TensorT<T>&, const TensorT<T>&,       \
      const TensorT<T>&, const BlockLayout&, const SelectionMask&,            \
      const TensorT<T>&, bool);

VMOBA_ATTENTION_EXTERN(float)
VMOBA_ATTENTION_EXTERN(double)
#undef VMOBA_ATTENTION_EXTERN

}  // namespace vmoba
