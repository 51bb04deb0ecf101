#include "vmoba/tensor_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <vector>

namespace vmoba {

namespace {

constexpr char kMagic[4] = {'V', 'M', 'T', 'B'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw TensorIoError(TensorIoErrorKind::io_failure,
                        "cannot open " + path.string() + " for reading");
  }
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) {
    throw TensorIoError(TensorIoErrorKind::io_failure,
                        "read failed on " + path.string());
  }
  return bytes;
}

struct Header {
  Dtype dtype;
  Shape shape;
  std::size_t payload_offset;
  std::size_t payload_elems;
};

Header parse_header(const std::vector<std::uint8_t>& bytes,
                    const std::filesystem::path& path) {
  if (bytes.size() < 16) {
    throw TensorIoError(TensorIoErrorKind::truncated,
                        path.string() + ": header is truncated");
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw TensorIoError(TensorIoErrorKind::bad_magic,
                        path.string() + ": magic bytes are not \"VMTB\"");
  }
  std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kVersion) {
    throw TensorIoError(TensorIoErrorKind::bad_version,
                        path.string() + ": unsupported version " +
                            std::to_string(version));
  }
  std::uint32_t dtype_tag = get_u32(bytes.data() + 8);
  if (dtype_tag > 1) {
    throw TensorIoError(TensorIoErrorKind::bad_dtype,
                        path.string() + ": unknown dtype tag " +
                            std::to_string(dtype_tag));
  }
  std::uint32_t ndim = get_u32(bytes.data() + 12);
  std::size_t header_size = 16 + std::size_t{8} * ndim;
  if (bytes.size() < header_size) {
    throw TensorIoError(TensorIoErrorKind::truncated,
                        path.string() + ": extent list is truncated");
  }

  Header h;
  h.dtype = static_cast<Dtype>(dtype_tag);
  h.shape.reserve(ndim);
  std::size_t elems = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    std::uint64_t e = get_u64(bytes.data() + 16 + std::size_t{8} * i);
    if (e > std::numeric_limits<std::size_t>::max()) {
      throw TensorIoError(TensorIoErrorKind::extent_overflow,
                          path.string() + ": extent does not fit in size_t");
    }
    std::size_t es = static_cast<std::size_t>(e);
    if (es != 0 && elems > std::numeric_limits<std::size_t>::max() / es) {
      throw TensorIoError(TensorIoErrorKind::extent_overflow,
                          path.string() + ": extent product overflows");
    }
    elems *= es;
    h.shape.push_back(es);
  }
  h.payload_offset = header_size;
  h.payload_elems = elems;
  return h;
}

template <typename T>
T decode_value(const std::uint8_t* p);

template <>
float decode_value<float>(const std::uint8_t* p) {
  return std::bit_cast<float>(get_u32(p));
}

template <>
double decode_value<double>(const std::uint8_t* p) {
  return std::bit_cast<double>(get_u64(p));
}

}  // namespace

template <typename T>
void write_tensor(const std::filesystem::path& path, const TensorT<T>& t) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(16 + 8 * t.ndim() + sizeof(T) * t.numel());
  bytes.insert(bytes.end(), kMagic, kMagic + 4);
  put_u32(bytes, kVersion);
  put_u32(bytes, static_cast<std::uint32_t>(dtype_of<T>::value));
  put_u32(bytes, static_cast<std::uint32_t>(t.ndim()));
  for (std::size_t e : t.shape()) put_u64(bytes, static_cast<std::uint64_t>(e));
  for (T v : t.flat()) {
    if constexpr (sizeof(T) == 4) {
      put_u32(bytes, std::bit_cast<std::uint32_t>(v));
    } else {
      put_u64(bytes, std::bit_cast<std::uint64_t>(v));
    }
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw TensorIoError(TensorIoErrorKind::io_failure,
                        "cannot open " + path.string() + " for writing");
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw TensorIoError(TensorIoErrorKind::io_failure,
                        "write failed on " + path.string());
  }
}

template <typename T>
TensorT<T> read_tensor(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes = read_all(path);
  Header h = parse_header(bytes, path);
  if (h.dtype != dtype_of<T>::value) {
    throw TensorIoError(TensorIoErrorKind::dtype_mismatch,
                        path.string() + ": file dtype does not match the "
                        "requested element type");
  }
  std::size_t expected = h.payload_offset + sizeof(T) * h.payload_elems;
  if (bytes.size() != expected) {
    throw TensorIoError(
        TensorIoErrorKind::truncated,
        path.string() + ": payload holds " +
            std::to_string((bytes.size() - h.payload_offset) / sizeof(T)) +
            " values but the extents imply " +
            std::to_string(h.payload_elems));
  }
  std::vector<T> data(h.payload_elems);
  for (std::size_t i = 0; i < h.payload_elems; ++i) {
    data[i] = decode_value<T>(bytes.data() + h.payload_offset + sizeof(T) * i);
    if (!std::isfinite(data[i])) {
      throw TensorIoError(TensorIoErrorKind::non_finite,
                          path.string() + ": payload value " +
                              std::to_string(i) + " is NaN or infinite");
    }
  }
  return TensorT<T>(std::move(h.shape), std::move(data));
}

Dtype peek_tensor_dtype(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes = read_all(path);
  return parse_header(bytes, path).dtype;
}

template void write_tensor(const std::filesystem::path&, const TensorT<float>&);
template void write_tensor(const std::filesystem::path&,
                           const TensorT<double>&);
template TensorT<float> read_tensor(const std::filesystem::path&);
template TensorT<double> read_tensor(const std::filesystem::path&);

}  // namespace vmoba
