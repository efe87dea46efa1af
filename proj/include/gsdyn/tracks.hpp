#pragma once

#include <filesystem>
#include <vector>

#include "gsdyn/io.hpp"

namespace gsdyn {

/// T frames of N points each, the exchange format between `predict` and `eval`.
using Tracks = std::vector<std::vector<Vec3>>;

inline constexpr char kTracksMagic[] = "GSDYNTR1";

/// Binary layout: magic, u64 T, u64 N, then T*N*3 float64, frame-major.
inline void write_tracks(const std::filesystem::path& path, const Tracks& tracks) {
  const std::size_t n = tracks.empty() ? 0 : tracks.front().size();
  io::BinaryWriter w(path);
  w.magic(kTracksMagic);
  w.scalar<std::uint64_t>(tracks.size());
  w.scalar<std::uint64_t>(n);
  for (const auto& f : tracks) {
    if (f.size() != n) throw Error("write_tracks: frames differ in point count");
    for (const auto& p : f) w.doubles(p.data(), 3);
  }
  w.finish();
}

inline Tracks read_tracks(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic(kTracksMagic);
  const auto t = r.scalar<std::uint64_t>();
  const auto n = r.scalar<std::uint64_t>();
  if (t > (1u << 24) || n > (1u << 24)) throw Error("'" + path.string() + "': implausible track size");
  Tracks tracks(t, std::vector<Vec3>(n));
  for (auto& f : tracks)
    for (auto& p : f) r.doubles(p.data(), 3);
  if (!r.at_end()) throw Error("'" + path.string() + "' has trailing bytes");
  return tracks;
}

}  // namespace gsdyn
