#pragma once

// Versioned key -> array archive.
//
//   bytes 0..7   magic "CCILARCH"
//   u32          format version (1)
//   u64          length of the UTF-8 JSON metadata block, then the block
//   u64          number of arrays
//   per array:   u32 key length, key bytes, u32 rank, u64 dims[rank],
//                f64 values[prod(dims)]
//
// All integers and doubles are little-endian. Arrays are stored as f64 so
// 32-bit parameters round-trip exactly.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ccil/common.hpp"

namespace ccil::io {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

struct ArchiveArray {
  std::vector<std::uint64_t> shape;
  std::vector<double> values;

  bool operator==(const ArchiveArray&) const = default;
};

class Archive {
 public:
  static constexpr char kMagic[8] = {'C', 'C', 'I', 'L', 'A', 'R', 'C', 'H'};
  static constexpr std::uint32_t kVersion = 1;

  std::string metadata;  // JSON text
  std::map<std::string, ArchiveArray> arrays;

  template <typename S>
  void put(const std::string& key, const Mat<S>& m) {
    ArchiveArray a;
    a.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
    a.values.resize(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) a.values[static_cast<std::size_t>(i)] = static_cast<double>(m.data()[i]);
    arrays[key] = std::move(a);
  }

  void put(const std::string& key, std::vector<double> values) {
    arrays[key] = {{static_cast<std::uint64_t>(values.size())}, std::move(values)};
  }

  bool contains(const std::string& key) const { return arrays.count(key) != 0; }

  const ArchiveArray& at(const std::string& key) const {
    auto it = arrays.find(key);
    if (it == arrays.end()) throw DataError("archive has no entry '" + key + "'");
    return it->second;
  }

  /// Copies into `m`, which must already have the stored shape.
  template <typename S>
  void get(const std::string& key, Mat<S>& m) const {
    const auto& a = at(key);
    if (a.shape.size() != 2 || a.shape[0] != static_cast<std::uint64_t>(m.rows()) ||
        a.shape[1] != static_cast<std::uint64_t>(m.cols())) {
      throw ShapeError("archive entry '" + key + "' has an unexpected shape");
    }
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(a.values[static_cast<std::size_t>(i)]);
  }

  void save(const std::filesystem::path& path) const {
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary);
      if (!os) throw Error("cannot open " + tmp + " for writing");
      os.write(kMagic, sizeof kMagic);
      write_pod(os, kVersion);
      write_pod(os, static_cast<std::uint64_t>(metadata.size()));
      os.write(metadata.data(), static_cast<std::streamsize>(metadata.size()));
      write_pod(os, static_cast<std::uint64_t>(arrays.size()));
      for (const auto& [key, a] : arrays) {
        write_pod(os, static_cast<std::uint32_t>(key.size()));
        os.write(key.data(), static_cast<std::streamsize>(key.size()));
        write_pod(os, static_cast<std::uint32_t>(a.shape.size()));
        for (auto d : a.shape) write_pod(os, d);
        os.write(reinterpret_cast<const char*>(a.values.data()), static_cast<std::streamsize>(a.values.size() * sizeof(double)));
      }
      if (!os) throw Error("failed writing " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

  static Archive load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open archive " + path.string());
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || !std::equal(magic, magic + 8, kMagic)) throw DataError(path.string() + " is not a ccil archive");
    if (read_pod<std::uint32_t>(is) != kVersion) throw DataError("unsupported archive version in " + path.string());
    Archive ar;
    ar.metadata.resize(read_pod<std::uint64_t>(is));
    is.read(ar.metadata.data(), static_cast<std::streamsize>(ar.metadata.size()));
    const auto n = read_pod<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string key(read_pod<std::uint32_t>(is), '\0');
      is.read(key.data(), static_cast<std::streamsize>(key.size()));
      ArchiveArray a;
      a.shape.resize(read_pod<std::uint32_t>(is));
      std::uint64_t count = 1;
      for (auto& d : a.shape) count *= (d = read_pod<std::uint64_t>(is));
      a.values.resize(count);
      is.read(reinterpret_cast<char*>(a.values.data()), static_cast<std::streamsize>(count * sizeof(double)));
      if (!is) throw DataError("truncated archive " + path.string());
      ar.arrays.emplace(std::move(key), std::move(a));
    }
    return ar;
  }

 private:
  template <typename T>
  static void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  template <typename T>
  static T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw DataError("truncated archive");
    return v;
  }
};

}  // namespace ccil::io
