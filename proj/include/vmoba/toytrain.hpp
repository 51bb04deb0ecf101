#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vmoba/partition.hpp"
#include "vmoba/tensor.hpp"

namespace vmoba {

enum class AttentionMode { full, vmoba, moba1d };

const char* attention_mode_name(AttentionMode m);
AttentionMode attention_mode_from_name(const std::string& name);

// One translating 2-D Gaussian blob on a toroidal H x W grid. Frame t places
// the center at (center_h + t*vel_h, center_w + t*vel_w), wrapped.
struct MovingBlob {
  double center_h = 0.0;
  double center_w = 0.0;
  double vel_h = 0.0;
  double vel_w = 0.0;
  double amplitude = 1.0;
  double sigma = 1.5;
};

// Intensity field of the blobs over frames [first, first + count), flattened
// frame-major into a rank-1 tensor of count*H*W values.
Tensor blob_frames(const LatentGeometry& geom, std::span<const MovingBlob> blobs,
                   std::size_t first_frame, std::size_t frame_count);

// Single-sample batch from explicit blobs: input holds frames [0, T), target
// frames [1, T+1), both [1 x s]. Each token's target is the same grid point
// one frame later.
std::pair<Tensor, Tensor> blob_batch(const LatentGeometry& geom,
                                     std::span<const MovingBlob> blobs);

// Seed-deterministic batch of moving-blob sequences, both tensors
// [batch x s]. Identical seeds yield bitwise identical batches.
std::pair<Tensor, Tensor> synth_video_batch(std::uint64_t seed,
                                            const LatentGeometry& geom,
                                            std::size_t batch);

struct ToyModelConfig {
  LatentGeometry geometry{8, 12, 16, 32, 2};
  std::size_t layers = 3;
  AttentionMode mode = AttentionMode::vmoba;
  double tau = 0.25;      // vmoba: global-threshold fraction
  std::size_t moba_k = 2; // moba1d: per-row block count
  std::size_t steps = 300;
  double learning_rate = 0.05;
  std::uint64_t seed = 1;
  std::size_t batch = 1;
  std::size_t eval_every = 25;
  // Block sizes per scheme; empty `block` lists fall back to quarter-extent
  // defaults for the geometry.
  PartitionSpec part_1d{Scheme::temporal_1d, {}};
  PartitionSpec part_2d{Scheme::spatial_2d, {}};
  PartitionSpec part_3d{Scheme::spatio_temporal_3d, {}};

  void validate() const;  // throws std::invalid_argument
  ToyModelConfig with_defaults() const;  // partition fallbacks filled in
};

struct LossTrace {
  // Entry i < steps is the training loss before update i; the last entry is
  // the final loss after all updates. wall_ms matches index for index.
  std::vector<double> loss;
  std::vector<double> wall_ms;
  std::vector<std::pair<std::size_t, double>> val_loss;  // (step, loss)
  std::vector<std::string> layer_schemes;  // "full", "1d", "2d", or "3d"
  bool diverged = false;

  double initial_loss() const { return loss.front(); }
  double final_loss() const { return loss.back(); }
};

// Mean-squared-error regression through the attention stack with plain
// gradient descent. Layer l uses scheme_for_layer(l) when mode is vmoba and
// the 1d partition at every layer when mode is moba1d. Training runs on one
// fixed batch drawn from the seed; validation on a second held-out batch.
// On divergence (non-finite loss) the trace so far is returned with
// `diverged` set.
LossTrace train(const ToyModelConfig& config);

struct LossComparison {
  std::vector<std::vector<double>> ratios;  // [trace][step], vs traces[0]
  std::vector<double> final_gap;            // final_i - final_0
  std::vector<double> area;                 // sum_t |loss_i[t] - loss_0[t]|
};

// Compares every trace against traces[0]. All traces must have equal length.
LossComparison compare_losses(const std::vector<LossTrace>& traces);

void write_trace_csv(std::ostream& out, const LossTrace& trace);
nlohmann::json trace_to_json(const LossTrace& trace);
nlohmann::json comparison_to_json(const LossComparison& cmp);

}  // namespace vmoba
