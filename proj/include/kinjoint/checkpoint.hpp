#pragma once

// Parameter checkpoint container, version "KJ-CKPT-1".
//
// Layout (all integers and doubles little-endian):
//   magic        "KJ-CKPT-1\n"
//   u64          parameter count P
//   P x          u32 name length, name bytes, u8 dtype (0 = f64),
//                u32 ndim, i64 dims..., f64 raw values
//   u8           has_adam (0/1)
//   if has_adam: i64 step, f64 lr, beta1, beta2, epsilon,
//                P x (f64 first moments, f64 second moments) sized like the
//                corresponding parameter

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kinjoint/optim.hpp"
#include "kinjoint/tensor.hpp"

namespace kinjoint {

inline constexpr char kCheckpointMagic[] = "KJ-CKPT-1\n";

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> params;
  bool has_adam = false;
  AdamState adam;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
#if defined(__BYTE_ORDER__) && __BYTE_ORDER__ == __ORDER_BIG_ENDIAN__
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i)
    std::swap(buf[i], buf[sizeof(T) - 1 - i]);
#endif
  write_bytes(os, buf, sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
#if defined(__BYTE_ORDER__) && __BYTE_ORDER__ == __ORDER_BIG_ENDIAN__
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i)
    std::swap(buf[i], buf[sizeof(T) - 1 - i]);
#endif
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline void write_doubles(std::ostream& os, const std::vector<double>& v) {
  for (double d : v) write_le<double>(os, d);
}

inline std::vector<double> read_doubles(std::istream& is, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = read_le<double>(is);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path +
                                    " for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  detail::write_le<std::uint64_t>(os, ckpt.params.size());
  for (const auto& [name, t] : ckpt.params) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    detail::write_bytes(os, name.data(), name.size());
    detail::write_le<std::uint8_t>(os, 0);  // dtype f64
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.dim()));
    for (int d : t.shape()) detail::write_le<std::int64_t>(os, d);
    detail::write_doubles(os, t.vec());
  }
  detail::write_le<std::uint8_t>(os, ckpt.has_adam ? 1 : 0);
  if (ckpt.has_adam) {
    if (ckpt.adam.first_moment.size() != ckpt.params.size())
      throw std::runtime_error(
          "checkpoint: adam state does not cover all parameters");
    detail::write_le<std::int64_t>(os, ckpt.adam.step);
    detail::write_le<double>(os, ckpt.adam.lr);
    detail::write_le<double>(os, ckpt.adam.beta1);
    detail::write_le<double>(os, ckpt.adam.beta2);
    detail::write_le<double>(os, ckpt.adam.epsilon);
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
      detail::write_doubles(os, ckpt.adam.first_moment[i]);
      detail::write_doubles(os, ckpt.adam.second_moment[i]);
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[sizeof(kCheckpointMagic) - 1];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("checkpoint: " + path +
                             " is not a KJ-CKPT-1 file");
  Checkpoint ckpt;
  const std::uint64_t count = detail::read_le<std::uint64_t>(is);
  ckpt.params.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::read_le<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const std::uint8_t dtype = detail::read_le<std::uint8_t>(is);
    if (dtype != 0)
      throw std::runtime_error("checkpoint: unsupported dtype tag " +
                               std::to_string(dtype));
    const std::uint32_t ndim = detail::read_le<std::uint32_t>(is);
    Shape shape(ndim);
    for (std::uint32_t k = 0; k < ndim; ++k)
      shape[k] = static_cast<int>(detail::read_le<std::int64_t>(is));
    const std::size_t n = static_cast<std::size_t>(numel_of(shape));
    ckpt.params.emplace_back(std::move(name),
                             Tensor::from_data(shape, detail::read_doubles(is, n)));
  }
  ckpt.has_adam = detail::read_le<std::uint8_t>(is) != 0;
  if (ckpt.has_adam) {
    ckpt.adam.step = detail::read_le<std::int64_t>(is);
    ckpt.adam.lr = detail::read_le<double>(is);
    ckpt.adam.beta1 = detail::read_le<double>(is);
    ckpt.adam.beta2 = detail::read_le<double>(is);
    ckpt.adam.epsilon = detail::read_le<double>(is);
    for (std::uint64_t i = 0; i < count; ++i) {
      const std::size_t n = ckpt.params[i].second.vec().size();
      ckpt.adam.first_moment.push_back(detail::read_doubles(is, n));
      ckpt.adam.second_moment.push_back(detail::read_doubles(is, n));
    }
  }
  return ckpt;
}

}  // namespace kinjoint
