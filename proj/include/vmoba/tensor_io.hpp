#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "vmoba/tensor.hpp"

namespace vmoba {

// File layout, all integers little-endian, no padding or footer:
//   bytes 0..3   magic "VMTB"
//   u32          version (always 1)
//   u32          dtype (0 = f32, 1 = f64)
//   u32          ndim
//   ndim * u64   extents
//   payload      row-major values, 4 or 8 bytes each

enum class TensorIoErrorKind {
  io_failure,       // file cannot be opened or read/written
  bad_magic,        // first four bytes are not "VMTB"
  bad_version,      // version field is not 1
  bad_dtype,        // dtype tag is neither 0 nor 1
  truncated,        // header or payload shorter/longer than the extents imply
  extent_overflow,  // extent product overflows the addressable size
  non_finite,       // payload holds NaN or infinity
  dtype_mismatch,   // file dtype differs from the requested element type
};

class TensorIoError : public std::runtime_error {
 public:
  TensorIoError(TensorIoErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  TensorIoErrorKind kind() const { return kind_; }

 private:
  TensorIoErrorKind kind_;
};

template <typename T>
void write_tensor(const std::filesystem::path& path, const TensorT<T>& t);

// Reads a tensor whose dtype matches T exactly; round-trips written files
// bit for bit.
template <typename T>
TensorT<T> read_tensor(const std::filesystem::path& path);

// Dtype recorded in the file header, for callers that dispatch on it.
Dtype peek_tensor_dtype(const std::filesystem::path& path);

extern template void write_tensor(const std::filesystem::path&,
                                  const TensorT<float>&);
extern template void write_tensor(const std::filesystem::path&,
                                  const TensorT<double>&);
extern template TensorT<float> read_tensor(const std::filesystem::path&);
extern template TensorT<double> read_tensor(const std::filesystem::path&);

}  // namespace vmoba
