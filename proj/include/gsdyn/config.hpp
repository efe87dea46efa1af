#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <system_error>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "gsdyn/geom.hpp"
#include "gsdyn/io.hpp"

// Configuration structs expose their fields through a `visit(f)` member that
// calls f(name, field&) for every field. Text conversion goes through the
// to_text / from_text overloads below (enums add their own next to their
// definition), which is all the INI loader and the manifest echo need.
namespace gsdyn {

inline std::string to_text(double v) { return io::fmt_double(v); }
inline std::string to_text(int v) { return std::to_string(v); }
inline std::string to_text(std::uint64_t v) { return std::to_string(v); }
inline std::string to_text(bool v) { return v ? "true" : "false"; }
inline std::string to_text(const std::string& v) { return v; }
inline std::string to_text(const Vec3& v) { return to_text(v.x()) + "," + to_text(v.y()) + "," + to_text(v.z()); }

namespace detail {

template <class T>
T parse_number(const std::string& s) {
  T v{};
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && *b == ' ') ++b;
  while (e > b && e[-1] == ' ') --e;
  auto [p, ec] = std::from_chars(b, e, v);
  if (b == e || ec != std::errc() || p != e) throw Error("expected a number, got '" + s + "'");
  return v;
}

}  // namespace detail

inline void from_text(const std::string& s, double& v) { v = detail::parse_number<double>(s); }
inline void from_text(const std::string& s, int& v) { v = detail::parse_number<int>(s); }
inline void from_text(const std::string& s, std::uint64_t& v) { v = detail::parse_number<std::uint64_t>(s); }
inline void from_text(const std::string& s, std::string& v) { v = s; }
inline void from_text(const std::string& s, bool& v) {
  if (s == "true" || s == "1" || s == "yes") v = true;
  else if (s == "false" || s == "0" || s == "no") v = false;
  else throw Error("expected a boolean, got '" + s + "'");
}
inline void from_text(const std::string& s, Vec3& v) {
  std::stringstream ss(s);
  std::string part;
  int i = 0;
  while (std::getline(ss, part, ',')) {
    if (i == 3) throw Error("expected three comma-separated numbers, got '" + s + "'");
    v(i++) = detail::parse_number<double>(part);
  }
  if (i != 3) throw Error("expected three comma-separated numbers, got '" + s + "'");
}

/// Lists "prefix.name = value" for every field of a config.
template <class Config>
io::KeyValues echo_config(Config c, const std::string& prefix) {
  io::KeyValues kv;
  c.visit([&](const char* name, auto& field) { kv.emplace_back(prefix + "." + name, to_text(field)); });
  return kv;
}

/// Sets one field by name. Unknown names are an error.
template <class Config>
void set_config_field(Config& c, const std::string& section, const std::string& key, const std::string& value) {
  bool found = false;
  c.visit([&](const char* name, auto& field) {
    if (key != name) return;
    found = true;
    try {
      from_text(value, field);
    } catch (const Error& e) {
      throw Error("[" + section + "] " + key + ": " + e.what());
    }
  });
  if (!found) throw Error("unknown key '" + key + "' in section [" + section + "]");
}

using Ini = boost::property_tree::ptree;

inline Ini read_ini(const std::filesystem::path& path) {
  Ini tree;
  try {
    boost::property_tree::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw Error("cannot parse config '" + path.string() + "': " + e.what());
  }
  return tree;
}

/// Applies every key of `section` in the tree to the config.
template <class Config>
void apply_section(const Ini& tree, const std::string& section, Config& c) {
  const auto child = tree.get_child_optional(section);
  if (!child) return;
  for (const auto& [key, node] : *child) set_config_field(c, section, key, node.data());
}

}  // namespace gsdyn
