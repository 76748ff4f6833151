#pragma once

#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "keyplan/common.hpp"
#include "keyplan/sim.hpp"
#include "keyplan/trajectory.hpp"

namespace fixtures {

using namespace keyplan;

/// Random episode with piecewise motion, stationary stretches and a gripper
/// channel that flips at random.
inline Episode random_episode(Rng& rng, int T, int dims, double flip_p = 0.05, const std::string& id = "fz") {
  Episode ep;
  ep.id = id;
  ep.instruction = "put red block on blue pad";
  ep.T = T;
  double g = rng.uniform() < 0.5 ? 0.0 : 1.0;
  std::vector<double> v(static_cast<std::size_t>(dims), 0.0);
  for (int t = 0; t <= T; ++t) {
    Image img(8, 8, static_cast<std::uint8_t>(t % 200));
    ep.observations.push_back({t, img, id + "_" + std::to_string(t)});
    if (rng.uniform() < 0.15) {
      const bool still = rng.uniform() < 0.4;
      for (auto& x : v) x = still ? 0.0 : rng.normal(0.0, 0.05);
    }
    Action a;
    a.delta = v;
    for (auto& x : a.delta) x += rng.normal(0.0, 0.003);
    if (rng.uniform() < flip_p) g = 1.0 - g;
    a.gripper = std::clamp(g + rng.normal(0.0, 0.05), 0.0, 1.0);
    ep.actions.push_back(std::move(a));
  }
  return ep;
}

/// Episode whose images are distinct constant frames of size h x w.
inline Episode tiny_episode(int T, int h = 16, int w = 16, const std::string& id = "tiny") {
  Episode ep;
  ep.id = id;
  ep.instruction = "put red block on blue pad";
  ep.T = T;
  for (int t = 0; t <= T; ++t) {
    Image img(h, w, 0);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) img.at(r, c) = static_cast<std::uint8_t>((r / 8 + c / 8 + t) % 4 * 60);
    ep.observations.push_back({t, img, id + "_" + std::to_string(t)});
    ep.actions.push_back(Action{{0.01 * (t % 5), -0.02 * (t % 3)}, t % 10 < 5 ? 0.0 : 1.0, {}});
  }
  return ep;
}

inline std::vector<Episode> demo_episodes(int n, double sigma, std::uint64_t seed) {
  std::vector<Episode> out;
  for (const auto& r : sim::generate_demos(n, 1, sigma, seed)) out.push_back(r.episode);
  return out;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)) + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) return {};
  std::string s;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) s.append(buf, n);
  std::fclose(f);
  return s;
}

}  // namespace fixtures
