#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "sparseformer/error.hpp"
#include "sparseformer/tensor.hpp"

namespace spf {

// Checkpoint container, little-endian binary:
//   magic "SPFM", u32 version = 1, u32 tensor_count, then per tensor:
//   u16 name_len, UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 ndim,
//   ndim x u32 dims, raw payload. Save/load round-trips are byte-identical.

enum class BlobDtype : std::uint8_t { f32 = 0, f64 = 1 };

struct NamedBlob {
  std::string name;
  BlobDtype dtype = BlobDtype::f32;
  std::vector<std::uint32_t> dims;
  std::vector<unsigned char> payload;

  long long numel() const {
    long long n = 1;
    for (auto d : dims) n *= static_cast<long long>(d);
    return n;
  }
};

void write_checkpoint(const std::string& path, const std::vector<NamedBlob>& blobs);
std::vector<NamedBlob> read_checkpoint(const std::string& path);

namespace detail {
template <typename T>
constexpr BlobDtype dtype_of() {
  return sizeof(T) == 4 ? BlobDtype::f32 : BlobDtype::f64;
}
}  // namespace detail

template <typename T>
NamedBlob blob_from_tensor(const std::string& name, const Tensor<T>& t) {
  NamedBlob b;
  b.name = name;
  b.dtype = detail::dtype_of<T>();
  for (int d : t.shape()) b.dims.push_back(static_cast<std::uint32_t>(d));
  const auto bytes = static_cast<std::size_t>(t.numel()) * sizeof(T);
  b.payload.resize(bytes);
  std::memcpy(b.payload.data(), t.data(), bytes);
  return b;
}

// Copies blob data into an existing tensor; converts between f32/f64.
template <typename T>
void load_blob_into(const NamedBlob& b, Tensor<T>& t) {
  if (b.numel() != t.numel()) {
    throw FormatError("checkpoint tensor '" + b.name + "' has " + std::to_string(b.numel()) +
                      " elements, expected " + std::to_string(t.numel()));
  }
  t.thaw();
  T* dst = t.raw();
  const std::size_t n = static_cast<std::size_t>(t.numel());
  if (b.dtype == detail::dtype_of<T>()) {
    std::memcpy(dst, b.payload.data(), n * sizeof(T));
  } else if (b.dtype == BlobDtype::f32) {
    const float* src = reinterpret_cast<const float*>(b.payload.data());
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(src[i]);
  } else {
    const double* src = reinterpret_cast<const double*>(b.payload.data());
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(src[i]);
  }
}

}  // namespace spf
