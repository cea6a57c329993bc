#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mpoxvlm/common.hpp"
#include "mpoxvlm/nn.hpp"

namespace mpoxvlm {

// Versioned binary container of named parameter arrays (little-endian f64
// with shape headers). Round-trips bitwise; a JSON sidecar carries run
// metadata next to each file.

inline constexpr char kCheckpointMagic[8] = {'M', 'P', 'X', 'C', 'K', 'P', 'T', '1'};

namespace detail {

template <class T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(const std::string& in, size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ValidationError("truncated checkpoint file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path,
                            const std::vector<ParamView>& views) {
  std::string out;
  out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(views.size()));
  for (const auto& v : views) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(v.name.size()));
    out.append(v.name);
    detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(v.rows));
    detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(v.cols));
    out.append(reinterpret_cast<const char*>(v.data),
               static_cast<size_t>(v.size()) * sizeof(double));
  }
  write_file(path, out);
}

struct NamedArray {
  std::string name;
  Eigen::Index rows = 0, cols = 0;
  std::vector<double> data;
};

inline std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw ValidationError("missing checkpoint: " + path.string());
  std::string in = read_file(path);
  size_t pos = 0;
  if (in.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(in.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw ValidationError("bad checkpoint magic in " + path.string());
  pos = sizeof(kCheckpointMagic);

  auto count = detail::get<std::uint32_t>(in, pos);
  std::vector<NamedArray> arrays(count);
  for (auto& a : arrays) {
    auto name_len = detail::get<std::uint32_t>(in, pos);
    if (pos + name_len > in.size()) throw ValidationError("truncated checkpoint file");
    a.name = in.substr(pos, name_len);
    pos += name_len;
    a.rows = static_cast<Eigen::Index>(detail::get<std::uint64_t>(in, pos));
    a.cols = static_cast<Eigen::Index>(detail::get<std::uint64_t>(in, pos));
    size_t n = static_cast<size_t>(a.rows) * static_cast<size_t>(a.cols);
    if (pos + n * sizeof(double) > in.size())
      throw ValidationError("truncated checkpoint file");
    a.data.resize(n);
    std::memcpy(a.data.data(), in.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
  }
  return arrays;
}

// Loads values into an existing registry; every name must match with the
// same shape.
inline void load_checkpoint_into(const std::filesystem::path& path,
                                 std::vector<ParamView>& views) {
  auto arrays = read_checkpoint(path);
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& a : arrays) by_name[a.name] = &a;
  for (auto& v : views) {
    auto it = by_name.find(v.name);
    if (it == by_name.end())
      throw ValidationError("checkpoint " + path.string() + " lacks parameter " + v.name);
    const NamedArray& a = *it->second;
    if (a.rows != v.rows || a.cols != v.cols)
      throw ValidationError("shape mismatch for " + v.name + " in " + path.string());
    std::memcpy(v.data, a.data.data(), a.data.size() * sizeof(double));
  }
}

}  // namespace mpoxvlm
