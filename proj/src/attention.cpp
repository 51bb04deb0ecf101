#include "vmoba/attention.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "vmoba/parallel.hpp"

namespace vmoba {

namespace {

template <typename T>
T scale_factor(const TensorT<T>& k, bool scaled) {
  return scaled ? T{1} / std::sqrt(static_cast<T>(k.cols())) : T{1};
}

template <typename T>
void check_qkv(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
               const char* op) {
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 ||
      q.cols() != k.cols() || k.rows() != v.rows()) {
    throw std::invalid_argument(
        std::string(op) + ": incompatible shapes (q " +
        shape_to_string(q.shape()) + ", k " + shape_to_string(k.shape()) +
        ", v " + shape_to_string(v.shape()) + ")");
  }
}

template <typename T>
void check_mask(const TensorT<T>& q, const TensorT<T>& k,
                const SelectionMask& mask, const BlockLayout& layout,
                const char* op) {
  if (k.rows() != layout.seq_len || q.rows() != layout.seq_len) {
    throw std::invalid_argument(std::string(op) +
                                ": q/k row count does not match the layout's "
                                "sequence length");
  }
  if (mask.rows != layout.seq_len || mask.cols != layout.block_count) {
    throw std::invalid_argument(std::string(op) +
                                ": mask shape does not match the layout");
  }
  for (std::size_t row = 0; row < mask.rows; ++row) {
    if (mask.row_count(row) == 0) {
      throw std::invalid_argument(std::string(op) + ": query " +
                                  std::to_string(row) +
                                  " has no selected block");
    }
  }
}

// K^T as a flat [dim x n] buffer so per-query logit loops run contiguously
// over keys.
template <typename T>
std::vector<T> transpose_flat(const TensorT<T>& m) {
  std::size_t r = m.rows(), c = m.cols();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = m.at(i, j);
  }
  return out;
}

// Per-block transposed copy: pack[b][p * len + j] = m[block_tokens[b][j]][p].
template <typename T>
std::vector<std::vector<T>> pack_blocks(const TensorT<T>& m,
                                        const BlockLayout& layout) {
  std::vector<std::vector<T>> pack(layout.block_count);
  std::size_t dim = m.cols();
  for (std::size_t b = 0; b < layout.block_count; ++b) {
    const auto& tokens = layout.block_tokens[b];
    pack[b].resize(dim * tokens.size());
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      const T* row = m.data() + std::size_t{tokens[j]} * m.cols();
      for (std::size_t p = 0; p < dim; ++p) pack[b][p * tokens.size() + j] = row[p];
    }
  }
  return pack;
}

// logits[j] += <qs, packed column j>, vectorizable over j; each logit still
// accumulates in ascending p.
template <typename T>
void block_logits(const T* qs, std::size_t dim, const std::vector<T>& packed,
                  std::size_t len, T* logits) {
  for (std::size_t j = 0; j < len; ++j) logits[j] = T{0};
  for (std::size_t p = 0; p < dim; ++p) {
    T qp = qs[p];
    const T* krow = packed.data() + p * len;
    for (std::size_t j = 0; j < len; ++j) logits[j] += qp * krow[j];
  }
}

// Shared dense/masked-dense row pipeline: full logit row, optional -infinity
// masking, normalized probabilities, then the weighted V sum. With no mask
// this IS dense attention, so the all-ones-mask case agrees bit for bit.
template <typename T>
AttentionResultT<T> dense_rows(const TensorT<T>& q, const TensorT<T>& k,
                               const TensorT<T>& v, const SelectionMask* mask,
                               const BlockLayout* layout, bool scaled,
                               const char* op) {
  std::size_t nq = q.rows(), nk = k.rows(), dim = q.cols(), dv = v.cols();
  T scale = scale_factor(k, scaled);
  std::vector<T> kt = transpose_flat(k);

  AttentionResultT<T> res{TensorT<T>(Shape{nq, dv}), std::vector<T>(nq)};
  parallel_for(nq, [&](std::size_t lo, std::size_t hi) {
    std::vector<T> qs(dim), logits(nk);
    std::vector<double> acc(dv);
    for (std::size_t qi = lo; qi < hi; ++qi) {
      const T* qrow = q.data() + qi * dim;
      for (std::size_t p = 0; p < dim; ++p) qs[p] = scale * qrow[p];
      block_logits(qs.data(), dim, kt, nk, logits.data());
      if (mask) {
        const std::uint8_t* mrow = mask->bits.data() + qi * mask->cols;
        for (std::size_t j = 0; j < nk; ++j) {
          if (!mrow[layout->token_to_block[j]]) {
            logits[j] = -std::numeric_limits<T>::infinity();
          }
        }
      }
      T m = logits[0];
      for (std::size_t j = 1; j < nk; ++j) m = std::max(m, logits[j]);
      // Exponents and the normalizer accumulate in double regardless of T, so
      // the sparse paths agree with this reference to within an output ulp no
      // matter how their summation orders differ.
      double md = static_cast<double>(m);
      double total = 0.0;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t j = 0; j < nk; ++j) {
        double e = std::exp(static_cast<double>(logits[j]) - md);
        total += e;
        const T* vrow = v.data() + j * dv;
        for (std::size_t c = 0; c < dv; ++c) acc[c] += e * vrow[c];
      }
      T* orow = res.output.data() + qi * dv;
      for (std::size_t c = 0; c < dv; ++c) {
        orow[c] = static_cast<T>(acc[c] / total);
      }
      res.lse[qi] = static_cast<T>(md + std::log(total));
    }
  });
  ensure_finite(res.output, op);
  return res;
}

}  // namespace

template <typename T>
AttentionResultT<T> dense_attention(const TensorT<T>& q, const TensorT<T>& k,
                                    const TensorT<T>& v, bool scaled) {
  check_qkv(q, k, v, "dense_attention");
  if (k.rows() == 0) {
    throw std::invalid_argument("dense_attention: no keys to attend to");
  }
  return dense_rows<T>(q, k, v, nullptr, nullptr, scaled, "dense_attention");
}

template <typename T>
AttentionResultT<T> masked_dense_attention(const TensorT<T>& q,
                                           const TensorT<T>& k,
                                           const TensorT<T>& v,
                                           const SelectionMask& mask,
                                           const BlockLayout& layout,
                                           bool scaled) {
  check_qkv(q, k, v, "masked_dense_attention");
  check_mask(q, k, mask, layout, "masked_dense_attention");
  return dense_rows<T>(q, k, v, &mask, &layout, scaled,
                       "masked_dense_attention");
}

template <typename T>
AttentionResultT<T> sparse_forward_gather(const TensorT<T>& q,
                                          const TensorT<T>& k,
                                          const TensorT<T>& v,
                                          const BlockLayout& layout,
                                          const SelectionMask& mask,
                                          bool scaled) {
  check_qkv(q, k, v, "sparse_forward_gather");
  check_mask(q, k, mask, layout, "sparse_forward_gather");
  std::size_t nq = q.rows(), dim = q.cols(), dv = v.cols();
  T scale = scale_factor(k, scaled);
  auto packed_k = pack_blocks(k, layout);

  AttentionResultT<T> res{TensorT<T>(Shape{nq, dv}), std::vector<T>(nq)};
  parallel_for(nq, [&](std::size_t lo, std::size_t hi) {
    std::vector<T> qs(dim), logits(layout.seq_len);
    std::vector<double> acc(dv);
    std::vector<std::uint32_t> tokens(layout.seq_len);
    for (std::size_t qi = lo; qi < hi; ++qi) {
      const T* qrow = q.data() + qi * dim;
      for (std::size_t p = 0; p < dim; ++p) qs[p] = scale * qrow[p];
      const std::uint8_t* mrow = mask.bits.data() + qi * mask.cols;

      std::size_t n = 0;
      for (std::size_t b = 0; b < layout.block_count; ++b) {
        if (!mrow[b]) continue;
        std::size_t len = layout.block_tokens[b].size();
        block_logits(qs.data(), dim, packed_k[b], len, logits.data() + n);
        for (std::size_t j = 0; j < len; ++j) {
          tokens[n + j] = layout.block_tokens[b][j];
        }
        n += len;
      }

      T m = logits[0];
      for (std::size_t j = 1; j < n; ++j) m = std::max(m, logits[j]);
      double md = static_cast<double>(m);
      double total = 0.0;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        double e = std::exp(static_cast<double>(logits[j]) - md);
        total += e;
        const T* vrow = v.data() + std::size_t{tokens[j]} * dv;
        for (std::size_t c = 0; c < dv; ++c) acc[c] += e * vrow[c];
      }
      T* orow = res.output.data() + qi * dv;
      for (std::size_t c = 0; c < dv; ++c) {
        orow[c] = static_cast<T>(acc[c] / total);
      }
      res.lse[qi] = static_cast<T>(md + std::log(total));
    }
  });
  ensure_finite(res.output, "sparse_forward_gather");
  return res;
}

template <typename T>
AttentionResultT<T> sparse_forward_streamed(const TensorT<T>& q,
                                            const TensorT<T>& k,
                                            const TensorT<T>& v,
                                            const BlockLayout& layout,
                                            const SelectionMask& mask,
                                            bool scaled) {
  check_qkv(q, k, v, "sparse_forward_streamed");
  check_mask(q, k, mask, layout, "sparse_forward_streamed");
  std::size_t nq = q.rows(), dim = q.cols(), dv = v.cols();
  T scale = scale_factor(k, scaled);
  auto packed_k = pack_blocks(k, layout);
  const double neg_inf = -std::numeric_limits<double>::infinity();

  AttentionResultT<T> res{TensorT<T>(Shape{nq, dv}), std::vector<T>(nq)};
  parallel_for(nq, [&](std::size_t lo, std::size_t hi) {
    std::vector<T> qs(dim), logits(layout.seq_len);
    std::vector<double> acc(dv);
    for (std::size_t qi = lo; qi < hi; ++qi) {
      const T* qrow = q.data() + qi * dim;
      for (std::size_t p = 0; p < dim; ++p) qs[p] = scale * qrow[p];
      const std::uint8_t* mrow = mask.bits.data() + qi * mask.cols;

      double m = neg_inf;
      double total = 0.0;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t b = 0; b < layout.block_count; ++b) {
        if (!mrow[b]) continue;
        const auto& toks = layout.block_tokens[b];
        std::size_t len = toks.size();
        block_logits(qs.data(), dim, packed_k[b], len, logits.data());
        T bm = logits[0];
        for (std::size_t j = 1; j < len; ++j) bm = std::max(bm, logits[j]);
        double bmd = static_cast<double>(bm);
        if (bmd > m) {
          // Rescale earlier partials to the new max. The first block lands
          // here with empty partials, so nothing changes and its result is
          // identical to the gather path's.
          if (total != 0.0) {
            double f = std::exp(m - bmd);
            total *= f;
            for (std::size_t c = 0; c < dv; ++c) acc[c] *= f;
          }
          m = bmd;
        }
        for (std::size_t j = 0; j < len; ++j) {
          double e = std::exp(static_cast<double>(logits[j]) - m);
          total += e;
          const T* vrow = v.data() + std::size_t{toks[j]} * dv;
          for (std::size_t c = 0; c < dv; ++c) acc[c] += e * vrow[c];
        }
      }
      T* orow = res.output.data() + qi * dv;
      for (std::size_t c = 0; c < dv; ++c) {
        orow[c] = static_cast<T>(acc[c] / total);
      }
      res.lse[qi] = static_cast<T>(m + std::log(total));
    }
  });
  ensure_finite(res.output, "sparse_forward_streamed");
  return res;
}

template <typename T>
AttentionGradsT<T> sparse_backward(const AttentionResultT<T>& io,
                                   const TensorT<T>& q, const TensorT<T>& k,
                                   const TensorT<T>& v,
                                   const BlockLayout& layout,
                                   const SelectionMask& mask,
                                   const TensorT<T>& d_out, bool scaled) {
  check_qkv(q, k, v, "sparse_backward");
  check_mask(q, k, mask, layout, "sparse_backward");
  if (!d_out.same_shape(io.output) || io.lse.size() != q.rows()) {
    throw std::invalid_argument(
        "sparse_backward: upstream gradient or lse does not match the "
        "forward output");
  }
  std::size_t nq = q.rows(), dim = q.cols(), dv = v.cols();
  T scale = scale_factor(k, scaled);
  auto packed_k = pack_blocks(k, layout);
  auto packed_v = pack_blocks(v, layout);

  AttentionGradsT<T> grads{TensorT<T>(Shape{nq, dim}),
                           TensorT<T>(Shape{k.rows(), dim}),
                           TensorT<T>(Shape{v.rows(), dv})};

  // row_dot[q] = <dO_q, O_q>, the softmax-jacobian correction term.
  std::vector<T> row_dot(nq);
  parallel_for(nq, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t qi = lo; qi < hi; ++qi) {
      const T* drow = d_out.data() + qi * dv;
      const T* orow = io.output.data() + qi * dv;
      T acc = T{0};
      for (std::size_t c = 0; c < dv; ++c) acc += drow[c] * orow[c];
      row_dot[qi] = acc;
    }
  });

  // dQ: each query row accumulates over its own selected blocks only.
  parallel_for(nq, [&](std::size_t lo, std::size_t hi) {
    std::vector<T> qs(dim), logits(layout.seq_len), dp(layout.seq_len);
    for (std::size_t qi = lo; qi < hi; ++qi) {
      const T* qrow = q.data() + qi * dim;
      for (std::size_t p = 0; p < dim; ++p) qs[p] = scale * qrow[p];
      const T* drow = d_out.data() + qi * dv;
      const std::uint8_t* mrow = mask.bits.data() + qi * mask.cols;
      T lse = io.lse[qi];
      T* dqrow = grads.dq.data() + qi * dim;

      for (std::size_t b = 0; b < layout.block_count; ++b) {
        if (!mrow[b]) continue;
        const auto& toks = layout.block_tokens[b];
        std::size_t len = toks.size();
        block_logits(qs.data(), dim, packed_k[b], len, logits.data());
        for (std::size_t j = 0; j < len; ++j) dp[j] = T{0};
        for (std::size_t c = 0; c < dv; ++c) {
          T dc = drow[c];
          const T* vcol = packed_v[b].data() + c * len;
          for (std::size_t j = 0; j < len; ++j) dp[j] += dc * vcol[j];
        }
        for (std::size_t j = 0; j < len; ++j) {
          T p = std::exp(logits[j] - lse);
          T dz = p * (dp[j] - row_dot[qi]);
          const T* krow = k.data() + std::size_t{toks[j]} * dim;
          for (std::size_t c = 0; c < dim; ++c) dqrow[c] += dz * krow[c];
        }
      }
      for (std::size_t c = 0; c < dim; ++c) dqrow[c] *= scale;
    }
  });

  // dK/dV: each block owns its token rows exclusively, so per-block
  // parallelism stays race-free; queries are visited in ascending order for a
  // deterministic accumulation order.
  parallel_for(layout.block_count, [&](std::size_t lo, std::size_t hi) {
    std::vector<T> qs(dim), logits(layout.seq_len), dp(layout.seq_len);
    for (std::size_t b = lo; b < hi; ++b) {
      const auto& toks = layout.block_tokens[b];
      std::size_t len = toks.size();
      for (std::size_t qi = 0; qi < nq; ++qi) {
        if (!mask.bits[qi * mask.cols + b]) continue;
        const T* qrow = q.data() + qi * dim;
        for (std::size_t p = 0; p < dim; ++p) qs[p] = scale * qrow[p];
        const T* drow = d_out.data() + qi * dv;
        T lse = io.lse[qi];

        block_logits(qs.data(), dim, packed_k[b], len, logits.data());
        for (std::size_t j = 0; j < len; ++j) dp[j] = T{0};
        for (std::size_t c = 0; c < dv; ++c) {
          T dc = drow[c];
          const T* vcol = packed_v[b].data() + c * len;
          for (std::size_t j = 0; j < len; ++j) dp[j] += dc * vcol[j];
        }
        for (std::size_t j = 0; j < len; ++j) {
          T p = std::exp(logits[j] - lse);
          T dz = p * (dp[j] - row_dot[qi]);
          std::size_t token = toks[j];
          T* dkrow = grads.dk.data() + token * dim;
          T* dvrow = grads.dv.data() + token * dv;
          T sdz = scale * dz;
          for (std::size_t c = 0; c < dim; ++c) dkrow[c] += sdz * qrow[c];
          for (std::size_t c = 0; c < dv; ++c) dvrow[c] += p * drow[c];
        }
      }
    }
  });

  ensure_finite(grads.dq, "sparse_backward");
  ensure_finite(grads.dk, "sparse_backward");
  ensure_finite(grads.dv, "sparse_backward");
  return grads;
}

#define VMOBA_ATTENTION_INST(T)                                               \
  template AttentionResultT<T> dense_attention(                               \
      const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, bool);         \
  template AttentionResultT<T> masked_dense_attention(                        \
      const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,                \
      const SelectionMask&, const BlockLayout&, bool);                        \
  template AttentionResultT<T> sparse_forward_gather(                         \
      const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,                \
      const BlockLayout&, const SelectionMask&, bool);                        \
  template AttentionResultT<T> sparse_forward_streamed(                       \
      const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,                \
      const BlockLayout&, const SelectionMask&, bool);                        \
  template AttentionGradsT<T> sparse_backward(                                \
      const AttentionResultT<T>&, const TensorT<T>&, const TensorT<T>&,       \
      const TensorT<T>&, const BlockLayout&, const SelectionMask&,            \
      const TensorT<T>&, bool);

VMOBA_ATTENTION_INST(float)
VMOBA_ATTENTION_INST(double)
#undef VMOBA_ATTENTION_INST

}  // namespace vmoba
