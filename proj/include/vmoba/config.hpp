#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vmoba/partition.hpp"
#include "vmoba/selection.hpp"
#include "vmoba/toytrain.hpp"

namespace vmoba {

// Configuration problems map to the usage-error exit code, unlike I/O
// failures.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BenchConfig {
  std::vector<std::size_t> lengths{512, 1024, 2048, 4096};
  std::size_t repetitions = 5;  // >= 5, median taken
  std::size_t frames = 4;       // fixed T; lengths scale H and W
  std::size_t hidden = 32;
  std::size_t heads = 1;
  // Per-axis 3d block counts; per-length block sizes are ceil(extent/count).
  std::array<std::size_t, 3> block_counts{2, 4, 4};
};

struct AnalysisConfig {
  std::string q_path;
  std::string k_path;
  double p = 0.25;
  std::vector<double> fractions{0.3, 0.5};
  Scheme scheme = Scheme::spatio_temporal_3d;
};

struct RunConfig {
  LatentGeometry geometry;
  PartitionSpec part_1d{Scheme::temporal_1d, {}};
  PartitionSpec part_2d{Scheme::spatial_2d, {}};
  PartitionSpec part_3d{Scheme::spatio_temporal_3d, {}};
  SelectionPolicy selection;  // defaults: global threshold, tau 0.25,
                              // scaled, self-inclusion on
  std::uint64_t seed = 12345;
  std::string out_dir = "out";

  BenchConfig bench;
  bool has_analysis = false;
  AnalysisConfig analysis;
  ToyModelConfig toytrain;
  std::vector<AttentionMode> toytrain_modes{AttentionMode::full,
                                            AttentionMode::vmoba};

  void validate() const;  // throws ConfigError
};

// Parses and validates; unknown keys anywhere in the document are rejected.
RunConfig parse_run_config(const nlohmann::json& j);

// Reads, parses, and validates a JSON config file. Unreadable file or
// malformed JSON → ConfigError.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace vmoba
