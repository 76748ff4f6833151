#pragma once

// Exhaustive reference for extract_keysteps. Every quantity is recomputed
// from scratch per timestep; nothing is shared with the incremental
// extractor beyond the Episode and config types.

#include <algorithm>
#include <cmath>
#include <vector>

#include "keyplan/keystep.hpp"

namespace keyplan::oracle {

inline double speed_at(const Episode& ep, const DimMask& dims, int t) {
  double s = 0.0;
  for (std::size_t d : dims) s += ep.actions[t].delta[d] * ep.actions[t].delta[d];
  return std::sqrt(s);
}

/// EMA at t, replayed from t = 0.
inline double ema_at(const Episode& ep, const DimMask& dims, double alpha, int t) {
  double s = speed_at(ep, dims, 0);
  for (int k = 1; k <= t; ++k) s = alpha * speed_at(ep, dims, k) + (1.0 - alpha) * s;
  return s;
}

/// k-th smallest by counting, then the same interpolation rule.
inline double order_stat(const std::vector<double>& v, std::size_t k) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::size_t less = 0, equal = 0;
    for (double x : v) {
      if (x < v[i]) ++less;
      else if (x == v[i]) ++equal;
    }
    if (less <= k && k < less + equal) return v[i];
  }
  return v.back();
}

inline double quantile_scan(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = lo + 1 < v.size() ? lo + 1 : v.size() - 1;
  const double a = order_stat(v, lo);
  const double b = order_stat(v, hi);
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

inline double delta_a(const Episode& ep, int t) {
  const Action& a = ep.actions[t];
  const Action& b = ep.actions[t - 1];
  double s = 0.0;
  for (std::size_t i = 0; i < a.delta.size(); ++i) s += (a.delta[i] - b.delta[i]) * (a.delta[i] - b.delta[i]);
  s += (a.gripper - b.gripper) * (a.gripper - b.gripper);
  for (std::size_t i = 0; i < a.aux.size() && i < b.aux.size(); ++i) s += (a.aux[i] - b.aux[i]) * (a.aux[i] - b.aux[i]);
  return std::sqrt(s);
}

inline KeystepSet brute_force_keysteps(const Episode& ep, const ExtractorConfig& cfg) {
  cfg.validate();
  const DimMask dims = effective_dims(ep, cfg);
  if (dims.empty()) throw InvalidInput("speed_profile: empty dimension mask");
  for (const auto& a : ep.actions)
    for (std::size_t d : dims)
      if (d >= a.delta.size()) throw InvalidInput("speed_profile: mask index out of range");
  const int T = ep.T;

  std::vector<double> ema(T + 1);
  for (int t = 0; t <= T; ++t) ema[t] = ema_at(ep, dims, cfg.alpha, t);
  const double tau_high = quantile_scan(ema, cfg.q_high);
  const double tau_low = quantile_scan(ema, cfg.q_low);

  auto closed = [&](int t) { return ep.actions[t].gripper > cfg.gripper_threshold ? 1 : 0; };
  auto cand = [&](int t, Source s) { return KeystepCandidate{t, s, ema[t], closed(t)}; };

  std::vector<KeystepCandidate> pool;
  for (int tc = 1; tc <= T; ++tc) {
    if (closed(tc) == closed(tc - 1)) continue;
    std::vector<int> exceed;
    for (int t = 0; t <= T; ++t)
      if (t > tc + cfg.settle && ema[t] > tau_high) exceed.push_back(t);
    pool.push_back(cand(exceed.empty() ? T : *std::min_element(exceed.begin(), exceed.end()) - 1, Source::Grip));
  }
  for (int t = 0; t <= T; ++t) {
    if (t < cfg.window - 1) continue;
    bool quiet = true;
    for (int k = t - cfg.window + 1; k <= t; ++k) quiet = quiet && ema[k] <= tau_low;
    if (quiet) pool.push_back(cand(t, Source::Turn));
  }

  // Repeatedly take the best-ranked remaining candidate compatible with all picks.
  std::vector<KeystepCandidate> chosen;
  std::vector<bool> used(pool.size(), false);
  for (;;) {
    int best = -1;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (used[i]) continue;
      bool ok = true;
      for (const auto& c : chosen) ok = ok && std::abs(c.timestep - pool[i].timestep) >= cfg.min_gap;
      if (!ok) {
        used[i] = true;
        continue;
      }
      if (best < 0 || static_cast<int>(pool[i].source) < static_cast<int>(pool[best].source) ||
          (pool[i].source == pool[best].source && pool[i].timestep < pool[best].timestep))
        best = static_cast<int>(i);
    }
    if (best < 0) break;
    used[best] = true;
    chosen.push_back(pool[best]);
  }

  // Fill: keep splitting any over-long gap until none is splittable.
  std::vector<int> marks{0, T};
  for (const auto& c : chosen) marks.push_back(c.timestep);
  for (bool changed = true; changed;) {
    changed = false;
    std::sort(marks.begin(), marks.end());
    marks.erase(std::unique(marks.begin(), marks.end()), marks.end());
    for (std::size_t i = 1; i < marks.size() && !changed; ++i) {
      const int u = marks[i - 1], w = marks[i];
      if (w - u <= cfg.max_gap) continue;
      int best = -1;
      for (int t = u + cfg.min_gap; t <= w - cfg.min_gap; ++t)
        if (best < 0 || delta_a(ep, t) < delta_a(ep, best)) best = t;
      if (best < 0) continue;
      chosen.push_back(cand(best, Source::Fill));
      marks.push_back(best);
      changed = true;
    }
  }

  std::sort(chosen.begin(), chosen.end(), [](const auto& a, const auto& b) { return a.timestep < b.timestep; });
  KeystepSet ks;
  ks.episode_id = ep.id;
  ks.thresholds = {tau_high, tau_low};
  ks.candidates = std::move(chosen);
  return ks;
}

}  // namespace keyplan::oracle
