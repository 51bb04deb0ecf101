#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vmoba/tensor.hpp"

namespace vmoba {

// How key blocks are carved out of the video latent. 1d groups whole frames,
// 2d groups spatial tiles across all frames, 3d groups spatio-temporal cubes.
enum class Scheme { temporal_1d, spatial_2d, spatio_temporal_3d };

const char* scheme_name(Scheme s);
Scheme scheme_from_name(const std::string& name);  // "1d" | "2d" | "3d"

// Layers cycle 1d, 2d, 3d, 1d, ... starting from layer 0.
Scheme scheme_for_layer(std::size_t layer);

// Video latent dimensions. Token order is frame-major, then height, then
// width: token index = (t*height + h)*width + w.
struct LatentGeometry {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t hidden = 0;
  std::size_t heads = 1;

  std::size_t seq_len() const { return frames * height * width; }
  std::size_t head_dim() const { return hidden / heads; }
  void validate() const;  // throws std::invalid_argument
};

// Block sizes along the axes a scheme partitions: {t} for 1d, {h, w} for 2d,
// {t, h, w} for 3d. Sizes need not divide the extents; the final block along
// an axis is then short.
struct PartitionSpec {
  Scheme scheme = Scheme::temporal_1d;
  std::vector<std::size_t> block;

  static PartitionSpec temporal(std::size_t t);
  static PartitionSpec spatial(std::size_t h, std::size_t w);
  static PartitionSpec spatio_temporal(std::size_t t, std::size_t h,
                                       std::size_t w);

  void validate(const LatentGeometry& geom) const;
};

// Materialized partition of the token sequence into key blocks. Block ids
// enumerate frame-major, then height, then width. Every token belongs to
// exactly one block and block_tokens lists each block's tokens ascending.
struct BlockLayout {
  Scheme scheme = Scheme::temporal_1d;
  std::size_t seq_len = 0;
  std::size_t block_count = 0;
  std::size_t blocks_t = 1, blocks_h = 1, blocks_w = 1;
  std::vector<std::uint32_t> token_to_block;
  std::vector<std::vector<std::uint32_t>> block_tokens;

  std::size_t block_len(std::size_t b) const { return block_tokens[b].size(); }
};

BlockLayout build_layout(const LatentGeometry& geom, const PartitionSpec& spec);

// Arithmetic mean of the key rows in each block: keys is [seq_len x dh],
// the result is [block_count x dh]. Short final blocks divide by their true
// length.
template <typename T>
TensorT<T> block_means(const TensorT<T>& keys, const BlockLayout& layout);

extern template TensorT<float> block_means(const TensorT<float>&,
                                           const BlockLayout&);
extern template TensorT<double> block_means(const TensorT<double>&,
                                            const BlockLayout&);

}  // namespace vmoba
