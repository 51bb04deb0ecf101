#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <vector>

#include "vmoba/parallel.hpp"
#include "vmoba/rng.hpp"
#include "vmoba/tensor.hpp"
#include "vmoba/tensor_io.hpp"

using namespace vmoba;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir() {
  fs::path dir = fs::temp_directory_path() / "vmoba_test_tensor";
  fs::create_directories(dir);
  return dir;
}

template <typename T>
TensorT<T> random_tensor(Rng& rng, Shape shape, T lo = T{-1}, T hi = T{1}) {
  std::vector<T> data(shape_numel(shape));
  for (T& v : data) {
    v = static_cast<T>(rng.uniform_double(static_cast<double>(lo),
                                          static_cast<double>(hi)));
  }
  return TensorT<T>(std::move(shape), std::move(data));
}

// Independent reference: same index order as the contract (ascending p per
// output element) but written as the naive triple loop.
template <typename T, typename Acc>
TensorT<T> matmul_oracle(const TensorT<T>& a, const TensorT<T>& b) {
  std::size_t n = a.rows(), inner = a.cols(), m = b.cols();
  TensorT<T> c(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      Acc acc{};
      for (std::size_t p = 0; p < inner; ++p) {
        acc += static_cast<Acc>(a.at(i, p)) * static_cast<Acc>(b.at(p, j));
      }
      c.at(i, j) = static_cast<T>(acc);
    }
  }
  return c;
}

template <typename T>
TensorT<T> identity_matrix(std::size_t n) {
  TensorT<T> id(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) id.at(i, i) = T{1};
  return id;
}

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  REQUIRE(a.same_shape(b));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) -
                                     static_cast<double>(b[i])));
  }
  return worst;
}

template <typename T>
bool bitwise_equal(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) return false;
  if (a.numel() == 0) return true;
  return std::memcmp(a.data(), b.data(), sizeof(T) * a.numel()) == 0;
}

TensorIoErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const TensorIoError& e) {
    return e.kind();
  }
  FAIL("expected a TensorIoError");
  return TensorIoErrorKind::io_failure;
}

// Minimal hand-rolled file image so corruption cases do not depend on
// write_tensor itself.
struct FileImage {
  std::vector<std::uint8_t> bytes;

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(std::uint8_t(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void header(std::uint32_t version, std::uint32_t dtype,
              const std::vector<std::uint64_t>& extents,
              const char* magic = "VMTB") {
    bytes.insert(bytes.end(), magic, magic + 4);
    u32(version);
    u32(dtype);
    u32(static_cast<std::uint32_t>(extents.size()));
    for (std::uint64_t e : extents) u64(e);
  }
  fs::path save(const char* name) const {
    fs::path p = temp_dir() / name;
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    REQUIRE(out.good());
    return p;
  }
};

}  // namespace

TEST_CASE("shape helpers") {
  CHECK(shape_numel(Shape{}) == 1);
  CHECK(shape_numel(Shape{5}) == 5);
  CHECK(shape_numel(Shape{2, 3, 4}) == 24);
  CHECK(shape_numel(Shape{3, 0, 2}) == 0);
  CHECK(shape_to_string(Shape{2, 3}).find('2') != std::string::npos);
}

TEST_CASE("tensor construction and access") {
  Tensor t(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.ndim() == 2);
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 6.0f);
  CHECK(t.row(1)[0] == 4.0f);
  CHECK(t[5] == 6.0f);

  SUBCASE("default tensor is a scalar zero") {
    Tensor d;
    CHECK(d.ndim() == 0);
    CHECK(d.numel() == 1);
    CHECK(d[0] == 0.0f);
  }
  SUBCASE("zero extents allowed") {
    Tensor z(Shape{3, 0, 2});
    CHECK(z.numel() == 0);
  }
  SUBCASE("length mismatch rejected") {
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, {1, 2, 3}), std::invalid_argument);
  }
  SUBCASE("non-finite payload rejected at construction") {
    std::vector<float> bad{1.0f, std::numeric_limits<float>::quiet_NaN()};
    CHECK_THROWS_AS(Tensor(Shape{2}, std::move(bad)), std::invalid_argument);
    std::vector<float> inf{std::numeric_limits<float>::infinity()};
    CHECK_THROWS_AS(Tensor(Shape{1}, std::move(inf)), std::invalid_argument);
  }
  SUBCASE("all_finite and ensure_finite accept denormals and negative zero") {
    Tensor fine(Shape{3}, {-0.0f, std::numeric_limits<float>::denorm_min(),
                           std::numeric_limits<float>::max()});
    CHECK(fine.all_finite());
    CHECK_NOTHROW(ensure_finite(fine, "test"));
  }
}

TEST_CASE("matmul against a triple-loop oracle") {
  Rng rng(101);
  for (int trial = 0; trial < 8; ++trial) {
    std::size_t n = 1 + rng.uniform_index(17);
    std::size_t inner = 1 + rng.uniform_index(33);
    std::size_t m = 1 + rng.uniform_index(17);
    auto a = random_tensor<float>(rng, Shape{n, inner});
    auto b = random_tensor<float>(rng, Shape{inner, m});
    auto c = matmul(a, b);
    REQUIRE(c.rows() == n);
    REQUIRE(c.cols() == m);
    // Double-precision oracle: float accumulation over <=33 unit-scale terms
    // stays within a few float ulps of it.
    auto oracle = matmul_oracle<float, double>(a, b);
    CHECK(max_abs_diff(c, oracle) <= 1e-5);
  }
  Rng rng64(202);
  auto a = random_tensor<double>(rng64, Shape{9, 21});
  auto b = random_tensor<double>(rng64, Shape{21, 7});
  CHECK(max_abs_diff(matmul(a, b), matmul_oracle<double, double>(a, b)) <=
        1e-13);
}

TEST_CASE("matmul identity is exact") {
  Rng rng(303);
  auto x = random_tensor<float>(rng, Shape{6, 11});
  CHECK(bitwise_equal(matmul(identity_matrix<float>(6), x), x));
  CHECK(bitwise_equal(matmul(x, identity_matrix<float>(11)), x));
}

TEST_CASE("matmul rejects mismatched inner extents") {
  Tensor a(Shape{2, 3});
  Tensor b(Shape{4, 2});
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul is bitwise identical across thread counts") {
  Rng rng(404);
  auto a = random_tensor<float>(rng, Shape{64, 48});
  auto b = random_tensor<float>(rng, Shape{48, 32});
  set_max_threads(1);
  auto seq = matmul(a, b);
  set_max_threads(8);
  auto par = matmul(a, b);
  set_max_threads(0);
  CHECK(bitwise_equal(seq, par));
}

TEST_CASE("stable_softmax is a probability vector") {
  Rng rng(505);
  std::vector<float> vals(37);
  for (float& v : vals) v = rng.uniform_float(-30.0f, 30.0f);
  Tensor v(Shape{vals.size()}, std::vector<float>(vals));
  auto p = stable_softmax(v, 1.0f);
  REQUIRE(p.numel() == vals.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    CHECK(p[i] >= 0.0f);
    sum += p[i];
  }
  CHECK(std::abs(sum - 1.0) <= 1e-6);

  SUBCASE("invariant under additive shifts") {
    std::vector<float> shifted(vals);
    for (float& x : shifted) x += 100.0f;
    Shape shifted_shape{shifted.size()};
    auto q = stable_softmax(Tensor(std::move(shifted_shape), std::move(shifted)),
                            1.0f);
    CHECK(max_abs_diff(p, q) <= 1e-6);
  }
  SUBCASE("order preserving") {
    Tensor w(Shape{3}, {0.5f, 2.0f, -1.0f});
    auto pw = stable_softmax(w, 1.0f);
    CHECK(pw[1] > pw[0]);
    CHECK(pw[0] > pw[2]);
  }
}

TEST_CASE("stable_softmax applies the scale to the logits") {
  // Exactly representable values: scaling by 2 inside equals pre-doubled
  // logits bit for bit.
  Tensor v(Shape{4}, {0.25f, -1.5f, 3.0f, 0.0f});
  Tensor doubled(Shape{4}, {0.5f, -3.0f, 6.0f, 0.0f});
  CHECK(bitwise_equal(stable_softmax(v, 2.0f), stable_softmax(doubled, 1.0f)));

  SUBCASE("uniform logits give the uniform distribution") {
    Tensor u(Shape{3}, {7.0f, 7.0f, 7.0f});
    auto p = stable_softmax(u, 1.0f);
    for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == 1.0f / 3.0f);
  }
  SUBCASE("rank-2 and empty inputs rejected") {
    CHECK_THROWS_AS(stable_softmax(Tensor(Shape{2, 2}), 1.0f),
                    std::invalid_argument);
    CHECK_THROWS_AS(stable_softmax(Tensor(Shape{0}), 1.0f),
                    std::invalid_argument);
  }
  SUBCASE("extreme logits stay finite") {
    Tensor big(Shape{3}, {3.0e38f, 3.0e38f, -3.0e38f});
    auto p = stable_softmax(big, 1.0f);
    CHECK(p.all_finite());
    CHECK(p[0] == 0.5f);
    CHECK(p[2] == 0.0f);
  }
}

TEST_CASE("transpose swaps extents and round-trips bitwise") {
  Rng rng(606);
  auto m = random_tensor<float>(rng, Shape{5, 9});
  auto t = transpose(m);
  REQUIRE(t.rows() == 9);
  REQUIRE(t.cols() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 9; ++j) CHECK(t.at(j, i) == m.at(i, j));
  }
  CHECK(bitwise_equal(transpose(t), m));
  CHECK_THROWS_AS(transpose(Tensor(Shape{4})), std::invalid_argument);
}

TEST_CASE("column_slice copies the requested columns") {
  Tensor m(Shape{2, 4}, {0, 1, 2, 3, 10, 11, 12, 13});
  auto s = column_slice(m, 1, 2);
  REQUIRE(s.rows() == 2);
  REQUIRE(s.cols() == 2);
  CHECK(s.at(0, 0) == 1.0f);
  CHECK(s.at(0, 1) == 2.0f);
  CHECK(s.at(1, 0) == 11.0f);
  CHECK(s.at(1, 1) == 12.0f);
  CHECK(bitwise_equal(column_slice(m, 0, 4), m));
  CHECK_THROWS_AS(column_slice(m, 3, 2), std::invalid_argument);
  CHECK_THROWS_AS(column_slice(Tensor(Shape{4}), 0, 1), std::invalid_argument);
}

TEST_CASE("tensor file round-trips are bit-exact") {
  Rng rng(707);
  auto check_roundtrip = [&]<typename T>(TensorT<T> tensor, const char* name) {
    fs::path p = temp_dir() / name;
    write_tensor(p, tensor);
    auto back = read_tensor<T>(p);
    CHECK(back.shape() == tensor.shape());
    CHECK(bitwise_equal(back, tensor));
  };
  check_roundtrip(random_tensor<float>(rng, Shape{2, 3, 4}), "rt_f32.vmtb");
  check_roundtrip(random_tensor<double>(rng, Shape{5, 2}), "rt_f64.vmtb");
  check_roundtrip(Tensor::scalar(3.5f), "rt_scalar.vmtb");
  check_roundtrip(Tensor(Shape{0}), "rt_empty.vmtb");
  check_roundtrip(Tensor(Shape{3, 0, 2}), "rt_zero_dim.vmtb");
  // Negative zero, denormals, and extreme magnitudes survive exactly.
  check_roundtrip(Tensor(Shape{4}, {-0.0f, std::numeric_limits<float>::denorm_min(),
                                    std::numeric_limits<float>::max(),
                                    -std::numeric_limits<float>::max()}),
                  "rt_edge.vmtb");

  SUBCASE("dtype is recorded and peekable") {
    fs::path p32 = temp_dir() / "peek32.vmtb";
    fs::path p64 = temp_dir() / "peek64.vmtb";
    write_tensor(p32, Tensor(Shape{1}, {1.0f}));
    write_tensor(p64, Tensor64(Shape{1}, {1.0}));
    CHECK(peek_tensor_dtype(p32) == Dtype::f32);
    CHECK(peek_tensor_dtype(p64) == Dtype::f64);
  }
}

TEST_CASE("tensor file corruption is rejected with the precise kind") {
  SUBCASE("missing file") {
    CHECK(kind_of([] {
            read_tensor<float>(temp_dir() / "does_not_exist.vmtb");
          }) == TensorIoErrorKind::io_failure);
  }
  SUBCASE("empty and short files are truncated") {
    FileImage img;
    fs::path p = img.save("empty.vmtb");
    CHECK(kind_of([&] { read_tensor<float>(p); }) ==
          TensorIoErrorKind::truncated);
  }
  SUBCASE("bad magic") {
    FileImage img;
    img.header(1, 0, {1}, "NOPE");
    img.f32(1.0f);
    fs::path p = img.save("badmagic.vmtb");
    CHECK(kind_of([&] { read_tensor<float>(p); }) ==
          TensorIoErrorKind::bad_magic);
  }
  SUBCASE("bad version") {
    FileImage img;
    img.header(2, 0, {1});
    img.f32(1.0f);
    fs::path p = img.save("badversion.vmtb");
    CHECK(kind_of([&] { read_tensor<float>(p); }) ==
          TensorIoErrorKind::bad_version);
  }
  SUBCASE("bad dtype tag") {
    FileImage img;
    img.header(1, 7, {1});
    img.f32(1.0f);
    fs::path p = img.save("baddtype.vmtb");
    CHECK(kind_of([&] { read_tensor<float>(p); }) ==
          TensorIoErrorKind::bad_dtype);
  }
  SUBCASE("dtype mismatch between file and requested type") {
    fs::path p = temp_dir() / "mismatch.vmtb";
    write_tensor(p, Tensor(Shape{2}, {1.0f, 2.0f}));
    CHECK(kind_of([&] { read_tensor<double>(p); }) ==
          TensorIoErrorKind::dtype_mismatch);
  }
  SUBCASE("truncated extent list") {
    FileImage img;
    img.header(1, 0, {});
    img.bytes[12] = 3;  // claims ndim 3 but provides no extents
    fs::path p = img.save("shortextents.vmtb");
    CHECK(kind_of([&] { read_tensor<float>(p); }) ==
          TensorIoErrorKind::truncated);
  }
  SUBCASE("payload shorter than the extents imply") {
    FileImage img;
    img.header(1, 0, {4});
    img.f32(1.0f);
    fs::path p = img.save("shortpayload.vmtb");
    CHECK(kind_of([&] { read_tensor<float>(p); }) ==
          TensorIoErrorKind::truncated);
  }
  SUBCASE("trailing bytes beyond the payload") {
    FileImage img;
    img.header(1, 0, {1});
    img.f32(1.0f);
    img.bytes.push_back(0xEE);
    fs::path p = img.save("trailing.vmtb");
    CHECK(kind_of([&] { read_tensor<float>(p); }) ==
          TensorIoErrorKind::truncated);
  }
  SUBCASE("extent product overflow is caught before allocation") {
    FileImage img;
    img.header(1, 0, {std::uint64_t{1} << 40, std::uint64_t{1} << 40});
    fs::path p = img.save("overflow.vmtb");
    CHECK(kind_of([&] { read_tensor<float>(p); }) ==
          TensorIoErrorKind::extent_overflow);
  }
  SUBCASE("non-finite payload is rejected at read") {
    FileImage img;
    img.header(1, 0, {2});
    img.f32(1.0f);
    img.f32(std::numeric_limits<float>::quiet_NaN());
    fs::path p = img.save("nanload.vmtb");
    CHECK(kind_of([&] { read_tensor<float>(p); }) ==
          TensorIoErrorKind::non_finite);
  }
}

TEST_CASE("rng streams are deterministic and distinct per seed") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
  bool differs = false;
  Rng a2(42);
  for (int i = 0; i < 100; ++i) differs |= (a2.next_u64() != c.next_u64());
  CHECK(differs);

  SUBCASE("unit intervals stay in range") {
    Rng r(7);
    for (int i = 0; i < 1000; ++i) {
      float f = r.unit_float();
      double d = r.unit_double();
      CHECK(f >= 0.0f);
      CHECK(f < 1.0f);
      CHECK(d >= 0.0);
      CHECK(d < 1.0);
      CHECK(r.uniform_index(10) < 10);
    }
  }
}
