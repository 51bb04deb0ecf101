#include "vmoba/partition.hpp"

#include <stdexcept>

namespace vmoba {

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace

const char* scheme_name(Scheme s) {
  switch (s) {
    case Scheme::temporal_1d: return "1d";
    case Scheme::spatial_2d: return "2d";
    case Scheme::spatio_temporal_3d: return "3d";
  }
  throw std::invalid_argument("unknown scheme value");
}

Scheme scheme_from_name(const std::string& name) {
  if (name == "1d") return Scheme::temporal_1d;
  if (name == "2d") return Scheme::spatial_2d;
  if (name == "3d") return Scheme::spatio_temporal_3d;
  throw std::invalid_argument("unknown scheme \"" + name +
                              "\" (expected 1d, 2d, or 3d)");
}

Scheme scheme_for_layer(std::size_t layer) {
  switch (layer % 3) {
    case 0: return Scheme::temporal_1d;
    case 1: return Scheme::spatial_2d;
    default: return Scheme::spatio_temporal_3d;
  }
}

void LatentGeometry::validate() const {
  if (frames == 0 || height == 0 || width == 0) {
    throw std::invalid_argument("latent geometry extents must be positive");
  }
  if (hidden == 0 || heads == 0) {
    throw std::invalid_argument("hidden size and head count must be positive");
  }
  if (hidden % heads != 0) {
    throw std::invalid_argument("hidden size " + std::to_string(hidden) +
                                " is not divisible by " +
                                std::to_string(heads) + " heads");
  }
}

PartitionSpec PartitionSpec::temporal(std::size_t t) {
  return {Scheme::temporal_1d, {t}};
}

PartitionSpec PartitionSpec::spatial(std::size_t h, std::size_t w) {
  return {Scheme::spatial_2d, {h, w}};
}

PartitionSpec PartitionSpec::spatio_temporal(std::size_t t, std::size_t h,
                                             std::size_t w) {
  return {Scheme::spatio_temporal_3d, {t, h, w}};
}

void PartitionSpec::validate(const LatentGeometry& geom) const {
  std::size_t want = scheme == Scheme::temporal_1d     ? 1
                     : scheme == Scheme::spatial_2d    ? 2
                                                       : 3;
  if (block.size() != want) {
    throw std::invalid_argument(std::string("partition scheme ") +
                                scheme_name(scheme) + " needs " +
                                std::to_string(want) + " block sizes, got " +
                                std::to_string(block.size()));
  }
  std::vector<std::size_t> extents;
  switch (scheme) {
    case Scheme::temporal_1d: extents = {geom.frames}; break;
    case Scheme::spatial_2d: extents = {geom.height, geom.width}; break;
    case Scheme::spatio_temporal_3d:
      extents = {geom.frames, geom.height, geom.width};
      break;
  }
  for (std::size_t i = 0; i < want; ++i) {
    if (block[i] == 0) {
      throw std::invalid_argument("block sizes must be positive");
    }
    if (block[i] > extents[i]) {
      throw std::invalid_argument(
          "block size " + std::to_string(block[i]) + " exceeds extent " +
          std::to_string(extents[i]) + " on axis " + std::to_string(i) +
          " of scheme " + scheme_name(scheme));
    }
  }
}

BlockLayout build_layout(const LatentGeometry& geom,
                         const PartitionSpec& spec) {
  geom.validate();
  spec.validate(geom);

  // Per-axis block sizes; axes the scheme leaves whole get one block that
  // spans the full extent.
  std::size_t bt = geom.frames, bh = geom.height, bw = geom.width;
  switch (spec.scheme) {
    case Scheme::temporal_1d:
      bt = spec.block[0];
      break;
    case Scheme::spatial_2d:
      bh = spec.block[0];
      bw = spec.block[1];
      break;
    case Scheme::spatio_temporal_3d:
      bt = spec.block[0];
      bh = spec.block[1];
      bw = spec.block[2];
      break;
  }

  BlockLayout layout;
  layout.scheme = spec.scheme;
  layout.seq_len = geom.seq_len();
  layout.blocks_t = ceil_div(geom.frames, bt);
  layout.blocks_h = ceil_div(geom.height, bh);
  layout.blocks_w = ceil_div(geom.width, bw);
  layout.block_count = layout.blocks_t * layout.blocks_h * layout.blocks_w;
  layout.token_to_block.resize(layout.seq_len);
  layout.block_tokens.resize(layout.block_count);

  for (std::size_t t = 0; t < geom.frames; ++t) {
    std::size_t at = t / bt;
    for (std::size_t h = 0; h < geom.height; ++h) {
      std::size_t ah = h / bh;
      for (std::size_t w = 0; w < geom.width; ++w) {
        std::size_t aw = w / bw;
        std::size_t token = (t * geom.height + h) * geom.width + w;
        std::size_t block = (at * layout.blocks_h + ah) * layout.blocks_w + aw;
        layout.token_to_block[token] = static_cast<std::uint32_t>(block);
        layout.block_tokens[block].push_back(static_cast<std::uint32_t>(token));
      }
    }
  }
  return layout;
}

template <typename T>
TensorT<T> block_means(const TensorT<T>& keys, const BlockLayout& layout) {
  if (keys.ndim() != 2 || keys.rows() != layout.seq_len) {
    throw std::invalid_argument(
        "block_means: keys must be rank-2 with " +
        std::to_string(layout.seq_len) + " rows, got shape " +
        shape_to_string(keys.shape()));
  }
  std::size_t dh = keys.cols();
  TensorT<T> means(Shape{layout.block_count, dh});
  for (std::size_t b = 0; b < layout.block_count; ++b) {
    T* mrow = means.data() + b * dh;
    for (std::uint32_t token : layout.block_tokens[b]) {
      const T* krow = keys.data() + std::size_t{token} * dh;
      for (std::size_t c = 0; c < dh; ++c) mrow[c] += krow[c];
    }
    T inv = T{1} / static_cast<T>(layout.block_tokens[b].size());
    for (std::size_t c = 0; c < dh; ++c) mrow[c] *= inv;
  }
  ensure_finite(means, "block_means");
  return means;
}

template TensorT<float> block_means(const TensorT<float>&, const BlockLayout&);
template TensorT<double> block_means(const TensorT<double>&,
                                     const BlockLayout&);

}  // namespace vmoba
