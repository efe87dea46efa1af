#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "gsdyn/geom.hpp"

namespace gsdyn::io {

namespace fs = std::filesystem;

// Binary records are written in host byte order (little-endian on every
// platform we build for).
class BinaryWriter {
 public:
  explicit BinaryWriter(const fs::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw Error("cannot open '" + path.string() + "' for writing");
  }

  void magic(std::string_view m) { raw(m.data(), m.size()); }

  template <class T>
    requires std::is_arithmetic_v<T>
  void scalar(T v) {
    raw(&v, sizeof(T));
  }

  void doubles(const double* p, std::size_t n) { raw(p, n * sizeof(double)); }
  void doubles(const std::vector<double>& v) { doubles(v.data(), v.size()); }

  void finish() {
    out_.flush();
    if (!out_) throw Error("write failed for '" + path_.string() + "'");
  }

 private:
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw Error("write failed for '" + path_.string() + "'");
  }

  fs::path path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const fs::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw Error("cannot open '" + path.string() + "' for reading");
  }

  void expect_magic(std::string_view m) {
    std::string buf(m.size(), '\0');
    raw(buf.data(), buf.size());
    if (buf != m) throw Error("'" + path_.string() + "' is not a " + std::string(m) + " record");
  }

  template <class T>
    requires std::is_arithmetic_v<T>
  T scalar() {
    T v{};
    raw(&v, sizeof(T));
    return v;
  }

  void doubles(double* p, std::size_t n) { raw(p, n * sizeof(double)); }

  std::vector<double> doubles(std::size_t n) {
    std::vector<double> v(n);
    doubles(v.data(), n);
    return v;
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  const fs::path& path() const { return path_; }

 private:
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw Error("'" + path_.string() + "' is truncated");
  }

  fs::path path_;
  std::ifstream in_;
};

/// Ordered key = value text, one pair per line. Used for manifests and sidecars.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline void write_key_values(const fs::path& path, const KeyValues& kv) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  for (const auto& [k, v] : kv) out << k << " = " << v << '\n';
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline std::map<std::string, std::string> read_key_values(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (line.empty() || line[0] == '#' || eq == std::string::npos) continue;
    out[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return out;
}

/// Decimal form of a double that parses back to the same value.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace gsdyn::io
