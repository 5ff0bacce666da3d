// Copyright 2026 The cg3d Authors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint files: "CG3D", u16 version, then until EOF records of
//   u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f64 LE payload.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cg3d/render.hpp"
#include "cg3d/rng.hpp"
#include "cg3d/tensor.hpp"

namespace cg3d {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'C', 'G', '3', 'D'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

namespace detail {

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(std::string_view& in) {
  if (in.size() < sizeof(T)) throw FormatError("truncated checkpoint");
  T v;
  std::memcpy(&v, in.data(), sizeof(T));
  in.remove_prefix(sizeof(T));
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<NamedTensor>& records) {
  std::string out(kCheckpointMagic, 4);
  detail::put<std::uint16_t>(out, kCheckpointVersion);
  for (const NamedTensor& r : records) {
    if (r.name.size() > 0xffff) throw FormatError("record name too long");
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
    out += r.name;
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(r.value.rank()));
    for (std::size_t d : r.value.shape()) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : r.value.data()) detail::put<double>(out, v);
  }
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(std::string_view in) {
  if (in.size() < 6 || std::memcmp(in.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("bad checkpoint magic");
  }
  in.remove_prefix(4);
  if (detail::take<std::uint16_t>(in) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  std::vector<NamedTensor> records;
  while (!in.empty()) {
    const auto len = detail::take<std::uint16_t>(in);
    if (in.size() < len) throw FormatError("truncated record name");
    std::string name(in.substr(0, len));
    in.remove_prefix(len);
    const auto rank = detail::take<std::uint8_t>(in);
    Shape shape;
    for (std::uint8_t i = 0; i < rank; ++i) shape.push_back(detail::take<std::uint32_t>(in));
    std::vector<double> data(num_elements(shape));
    for (double& v : data) v = detail::take<double>(in);
    records.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return records;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream f = open_for_write(path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& records) {
  write_file(path, encode_checkpoint(records));
}

inline std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

inline const Tensor& find_record(const std::vector<NamedTensor>& records, std::string_view name) {
  for (const NamedTensor& r : records)
    if (r.name == name) return r.value;
  throw FormatError("checkpoint has no record named " + std::string(name));
}

inline std::vector<NamedTensor> grid_records(const DensityGrid& grid) {
  return {{"raw_density", grid.raw_density.detach()}, {"raw_albedo", grid.raw_albedo.detach()}};
}

inline DensityGrid grid_from_records(const std::vector<NamedTensor>& records) {
  const Tensor& d = find_record(records, "raw_density");
  const Tensor& a = find_record(records, "raw_albedo");
  if (d.rank() != 3 || d.shape()[0] != d.shape()[1] || d.shape()[1] != d.shape()[2] ||
      a.shape() != Shape{d.shape()[0], d.shape()[0], d.shape()[0], 3}) {
    throw FormatError("grid checkpoint has inconsistent shapes");
  }
  return {d.shape()[0], d, a};
}

inline std::uint64_t checksum(const std::vector<NamedTensor>& records) {
  return fnv1a64(encode_checkpoint(records));
}

}  // namespace cg3d
