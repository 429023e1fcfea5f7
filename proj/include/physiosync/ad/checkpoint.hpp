#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "physiosync/ad/nn.hpp"
#include "physiosync/io.hpp"

// Named-parameter archive, version 1. All integers and values little-endian.
//
//   magic    8 bytes  "PSYNCCKP"
//   version  u32      1
//   count    u32      number of entries
//   entry*   count times, sorted by name:
//     name_len u32, name bytes (UTF-8)
//     rank     u32, dims u64 x rank
//     values   f32 x prod(dims)
//
// Batch-norm running statistics are stored as ordinary entries named
// "<state>.running_mean" and "<state>.running_var".
namespace physiosync::ad {

inline constexpr char kArchiveMagic[8] = {'P', 'S', 'Y', 'N', 'C', 'C', 'K', 'P'};
inline constexpr std::uint32_t kArchiveVersion = 1;

struct ArchiveEntry {
  Shape shape;
  std::vector<float> values;
};

class Archive {
 public:
  void put(const std::string& name, Shape shape, std::vector<float> values) {
    if (numel(shape) != values.size()) throw ShapeError("archive entry " + name + ": size mismatch");
    entries_[name] = {std::move(shape), std::move(values)};
  }
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const ArchiveEntry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IoError("checkpoint entry missing: " + name);
    return it->second;
  }
  const std::map<std::string, ArchiveEntry>& entries() const { return entries_; }
  bool has_prefix(const std::string& prefix) const {
    auto it = entries_.lower_bound(prefix);
    return it != entries_.end() && it->first.compare(0, prefix.size(), prefix) == 0;
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
    os.write(kArchiveMagic, sizeof(kArchiveMagic));
    io::write_le<std::uint32_t>(os, kArchiveVersion);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, e] : entries_) {
      io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
      for (auto d : e.shape) io::write_le<std::uint64_t>(os, d);
      for (float v : e.values) io::write_le<float>(os, v);
    }
    if (!os) throw IoError("checkpoint write failed: " + path.string());
  }

  static Archive load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint not found: " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || !std::equal(magic, magic + 8, kArchiveMagic)) throw IoError("not a checkpoint archive: " + path.string());
    const auto version = io::read_le<std::uint32_t>(is);
    if (version != kArchiveVersion)
      throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
    const auto count = io::read_le<std::uint32_t>(is);
    Archive archive;
    for (std::uint32_t k = 0; k < count; ++k) {
      const auto len = io::read_le<std::uint32_t>(is);
      std::string name(len, '\0');
      is.read(name.data(), len);
      const auto rank = io::read_le<std::uint32_t>(is);
      Shape shape(rank);
      for (auto& d : shape) d = static_cast<std::size_t>(io::read_le<std::uint64_t>(is));
      std::vector<float> values(numel(shape));
      for (auto& v : values) v = io::read_le<float>(is);
      archive.put(name, std::move(shape), std::move(values));
    }
    return archive;
  }

 private:
  std::map<std::string, ArchiveEntry> entries_;
};

/// Copies parameters and running statistics into the archive under `prefix.`.
template <class T>
void store(Archive& archive, const std::string& prefix, const ParamRefs<T>& refs) {
  for (const auto& p : refs.params)
    archive.put(prefix + "." + p.name, p.tensor.shape(),
                std::vector<float>(p.tensor.values().begin(), p.tensor.values().end()));
  for (const auto& [name, state] : refs.bn_states) {
    const Shape shape{state->features()};
    archive.put(prefix + "." + name + ".running_mean", shape,
                std::vector<float>(state->running_mean.begin(), state->running_mean.end()));
    archive.put(prefix + "." + name + ".running_var", shape,
                std::vector<float>(state->running_var.begin(), state->running_var.end()));
  }
}

/// Inverse of store; every referenced entry must exist with a matching shape.
template <class T>
void restore(const Archive& archive, const std::string& prefix, ParamRefs<T>& refs) {
  auto fetch = [&](const std::string& name, const Shape& shape) -> const std::vector<float>& {
    const auto& e = archive.at(prefix + "." + name);
    if (e.shape != shape)
      throw ShapeError("checkpoint entry " + prefix + "." + name + " has shape " + to_string(e.shape) +
                       ", model expects " + to_string(shape));
    return e.values;
  };
  for (auto& p : refs.params) {
    const auto& v = fetch(p.name, p.tensor.shape());
    auto& dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) dst[i] = static_cast<T>(v[i]);
  }
  for (auto& [name, state] : refs.bn_states) {
    const Shape shape{state->features()};
    const auto& m = fetch(name + ".running_mean", shape);
    const auto& v = fetch(name + ".running_var", shape);
    for (std::size_t i = 0; i < m.size(); ++i) {
      state->running_mean[i] = static_cast<T>(m[i]);
      state->running_var[i] = static_cast<T>(v[i]);
    }
  }
}

}  // namespace physiosync::ad
