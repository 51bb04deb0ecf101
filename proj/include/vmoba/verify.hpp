#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "vmoba/attention.hpp"
#include "vmoba/config.hpp"
#include "vmoba/partition.hpp"
#include "vmoba/selection.hpp"
#include "vmoba/tensor.hpp"

namespace vmoba {

// Outcome of one verification check: an aggregate over `cases` individual
// comparisons, reporting the worst observed error against a fixed tolerance.
struct CheckResult {
  std::string name;
  std::size_t cases = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool pass = true;
  std::string detail;
};

// One randomized attention problem: a geometry, a block layout over it, query
// and key/value tensors for a single head, and a selection mask produced by
// one of the four policies with self-inclusion on (so no mask row is empty).
struct AttentionFixture {
  LatentGeometry geom;
  PartitionSpec spec;
  BlockLayout layout;
  Tensor q;
  Tensor k;
  Tensor v;
  SelectionMask mask;
  std::string policy_name;
  bool ragged = false;
};

// A geometry plus a partition spec, without tensors; used by partition and
// sparsity checks.
struct PartitionFixture {
  LatentGeometry geom;
  PartitionSpec spec;
  bool ragged = false;
};

// Deterministically generates `count` fixtures from `seed`. The set cycles
// through all three partition schemes and all four selection policies, and
// alternates between exact (every block size divides its extent) and ragged
// layouts whenever the sampled extents permit raggedness. Sequence lengths
// stay at or below `max_seq`.
std::vector<AttentionFixture> make_attention_fixtures(std::uint64_t seed,
                                                      std::size_t count,
                                                      std::size_t max_seq);

// Deterministically generates geometry/spec pairs cycling through the three
// schemes. With `uniform_only` every block size divides its extent, so all
// blocks of a layout have equal length.
std::vector<PartitionFixture> make_partition_fixtures(std::uint64_t seed,
                                                      std::size_t count,
                                                      std::size_t max_seq,
                                                      bool uniform_only);

// Checks that every layout built from the config's geometry and partition
// specs is a bijection: each token lands in exactly one block, block ids are
// dense, and block token lists are sorted and disjoint.
std::vector<CheckResult> run_partition_checks(const RunConfig& cfg);

// Checks the equivalence chain between the sparse kernels and the dense
// reference on randomized fixtures: gather vs masked dense, streamed vs
// gather, and the all-ones mask vs unmasked dense attention.
std::vector<CheckResult> run_oracle_checks(std::uint64_t seed,
                                           std::size_t fixture_count,
                                           std::size_t max_seq);

// Checks threshold selection on randomized fixtures: the selected pair count
// never exceeds ceil(tau * s * block_count), masks nest as tau grows, and
// token sparsity on uniform layouts stays within tau + 1/(s * block_count).
std::vector<CheckResult> run_sparsity_checks(std::uint64_t seed,
                                             const std::vector<double>& taus,
                                             std::size_t fixture_count);

// Checks analytic gradients of the sparse attention against central finite
// differences in double precision on small fixtures.
std::vector<CheckResult> run_gradient_checks(std::uint64_t seed,
                                             std::size_t fixture_count);

bool all_pass(const std::vector<CheckResult>& checks);

nlohmann::json checks_to_json(const std::vector<CheckResult>& checks);

}  // namespace vmoba
