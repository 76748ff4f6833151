#pragma once

// Structured-frame extraction from kinematic cues: gripper-transition anchors,
// low-speed turning points, and gap filling for temporal coverage.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "keyplan/common.hpp"
#include "keyplan/trajectory.hpp"

namespace keyplan {

struct ExtractorConfig {
  double alpha = 0.3;
  double q_high = 0.75;
  double q_low = 0.25;
  int settle = 3;
  int window = 5;
  int min_gap = 8;
  int max_gap = 40;
  double gripper_threshold = 0.5;
  /// Empty means translational_dims() of the episode's action size.
  DimMask speed_dims;

  void validate() const {
    if (!(0.0 < q_low && q_low < q_high && q_high < 1.0))
      throw InvalidInput("extractor config: require 0 < q_low < q_high < 1");
    if (settle < 0) throw InvalidInput("extractor config: settle must be >= 0");
    if (window < 1) throw InvalidInput("extractor config: window must be >= 1");
    if (min_gap < 1) throw InvalidInput("extractor config: min_gap must be >= 1");
    if (max_gap <= min_gap) throw InvalidInput("extractor config: max_gap must exceed min_gap");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidInput("extractor config: alpha must lie in (0,1]");
  }
};

/// Ordered by dedup priority: lower value wins.
enum class Source { Grip = 0, Turn = 1, Fill = 2 };

inline const char* to_string(Source s) {
  switch (s) {
    case Source::Grip: return "grip";
    case Source::Turn: return "turn";
    case Source::Fill: return "fill";
  }
  return "?";
}

inline Source source_from_string(const std::string& s) {
  if (s == "grip") return Source::Grip;
  if (s == "turn") return Source::Turn;
  if (s == "fill") return Source::Fill;
  throw InvalidInput("unknown keystep source: " + s);
}

struct KeystepCandidate {
  int timestep = 0;
  Source source = Source::Grip;
  double speed_ema = 0.0;
  int gripper_state = 0;

  bool operator==(const KeystepCandidate&) const = default;
};

struct Thresholds {
  double high = 0.0;
  double low = 0.0;
  bool operator==(const Thresholds&) const = default;
};

struct KeystepSet {
  std::string episode_id;
  std::vector<KeystepCandidate> candidates;
  Thresholds thresholds;

  std::vector<int> timesteps() const {
    std::vector<int> out;
    for (const auto& c : candidates) out.push_back(c.timestep);
    return out;
  }
  bool operator==(const KeystepSet&) const = default;
};

inline DimMask effective_dims(const Episode& ep, const ExtractorConfig& cfg) {
  return cfg.speed_dims.empty() ? translational_dims(ep.actions.front().delta.size()) : cfg.speed_dims;
}

inline int binarize_gripper(double g, double threshold) { return g > threshold ? 1 : 0; }

inline Thresholds adaptive_thresholds(const SpeedProfile& sp, const ExtractorConfig& cfg) {
  if (sp.smoothed.empty()) throw InvalidInput("adaptive_thresholds: empty speed profile");
  return {quantile(sp.smoothed, cfg.q_high), quantile(sp.smoothed, cfg.q_low)};
}

inline std::vector<int> gripper_flips(const Episode& ep, const ExtractorConfig& cfg) {
  std::vector<int> flips;
  int prev = binarize_gripper(ep.actions.front().gripper, cfg.gripper_threshold);
  for (std::size_t t = 1; t < ep.actions.size(); ++t) {
    const int cur = binarize_gripper(ep.actions[t].gripper, cfg.gripper_threshold);
    if (cur != prev) flips.push_back(static_cast<int>(t));
    prev = cur;
  }
  return flips;
}

inline KeystepCandidate make_candidate(const Episode& ep, const SpeedProfile& sp, int t, Source src,
                                       const ExtractorConfig& cfg) {
  return {t, src, sp.smoothed[static_cast<std::size_t>(t)],
          binarize_gripper(ep.actions[static_cast<std::size_t>(t)].gripper, cfg.gripper_threshold)};
}

/// For each flip, the last frame before the smoothed speed first exceeds
/// tau_high after the settle window; episode end when motion never resumes.
inline std::vector<KeystepCandidate> grip_anchors(const Episode& ep, const SpeedProfile& sp,
                                                  const std::vector<int>& flips, double tau_high,
                                                  const ExtractorConfig& cfg) {
  std::vector<KeystepCandidate> out;
  const int T = static_cast<int>(sp.smoothed.size()) - 1;
  for (int tc : flips) {
    int pick = T;
    for (int t = tc + cfg.settle + 1; t <= T; ++t) {
      if (sp.smoothed[static_cast<std::size_t>(t)] > tau_high) {
        pick = t - 1;
        break;
      }
    }
    out.push_back(make_candidate(ep, sp, pick, Source::Grip, cfg));
  }
  return out;
}

/// Every t whose trailing window of `window` smoothed speeds stays at or below
/// tau_low. Uses a monotone deque for the running maximum.
inline std::vector<KeystepCandidate> turning_points(const Episode& ep, const SpeedProfile& sp, double tau_low,
                                                    const ExtractorConfig& cfg) {
  std::vector<KeystepCandidate> out;
  const int n = static_cast<int>(sp.smoothed.size());
  const int w = cfg.window;
  std::vector<int> dq;  // indices with decreasing values
  std::size_t head = 0;
  for (int t = 0; t < n; ++t) {
    const double v = sp.smoothed[static_cast<std::size_t>(t)];
    while (dq.size() > head && sp.smoothed[static_cast<std::size_t>(dq.back())] <= v) dq.pop_back();
    dq.push_back(t);
    while (dq[head] <= t - w) ++head;
    if (t >= w - 1 && sp.smoothed[static_cast<std::size_t>(dq[head])] <= tau_low)
      out.push_back(make_candidate(ep, sp, t, Source::Turn, cfg));
  }
  return out;
}

/// L2 change between consecutive full action commands (delta, gripper, aux).
inline double action_change(const Episode& ep, int t) {
  const Action& a = ep.actions[static_cast<std::size_t>(t)];
  const Action& b = ep.actions[static_cast<std::size_t>(t - 1)];
  double s = 0.0;
  for (std::size_t i = 0; i < a.delta.size(); ++i) s += (a.delta[i] - b.delta[i]) * (a.delta[i] - b.delta[i]);
  s += (a.gripper - b.gripper) * (a.gripper - b.gripper);
  for (std::size_t i = 0; i < std::min(a.aux.size(), b.aux.size()); ++i)
    s += (a.aux[i] - b.aux[i]) * (a.aux[i] - b.aux[i]);
  return std::sqrt(s);
}

/// Splits every gap wider than max_gap at its lowest-motion interior frame,
/// recursively. Fill points keep at least min_gap to both gap ends.
inline std::vector<KeystepCandidate> gap_fill(const Episode& ep, const SpeedProfile& sp,
                                              const std::vector<int>& selected, const ExtractorConfig& cfg) {
  std::vector<int> bounds = selected;
  std::sort(bounds.begin(), bounds.end());
  bounds.erase(std::unique(bounds.begin(), bounds.end()), bounds.end());

  std::vector<KeystepCandidate> fills;
  std::vector<std::pair<int, int>> work;
  for (std::size_t i = 1; i < bounds.size(); ++i) work.emplace_back(bounds[i - 1], bounds[i]);
  while (!work.empty()) {
    auto [u, w] = work.back();
    work.pop_back();
    if (w - u <= cfg.max_gap) continue;
    const int lo = u + cfg.min_gap;
    const int hi = w - cfg.min_gap;
    if (lo > hi) continue;
    int best = lo;
    double best_change = action_change(ep, lo);
    for (int t = lo + 1; t <= hi; ++t) {
      const double c = action_change(ep, t);
      if (c < best_change) {
        best_change = c;
        best = t;
      }
    }
    fills.push_back(make_candidate(ep, sp, best, Source::Fill, cfg));
    work.emplace_back(u, best);
    work.emplace_back(best, w);
  }
  std::sort(fills.begin(), fills.end(), [](const auto& a, const auto& b) { return a.timestep < b.timestep; });
  return fills;
}

/// Greedy min-gap enforcement in priority order (grip > turn > fill, then
/// earlier timestep). Returns survivors sorted by timestep.
inline std::vector<KeystepCandidate> enforce_min_gap(std::vector<KeystepCandidate> cands, int min_gap) {
  std::stable_sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
    if (a.source != b.source) return static_cast<int>(a.source) < static_cast<int>(b.source);
    return a.timestep < b.timestep;
  });
  std::set<int> taken;
  std::vector<KeystepCandidate> kept;
  for (const auto& c : cands) {
    auto it = taken.lower_bound(c.timestep);
    if (it != taken.end() && *it - c.timestep < min_gap) continue;
    if (it != taken.begin() && c.timestep - *std::prev(it) < min_gap) continue;
    taken.insert(c.timestep);
    kept.push_back(c);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.timestep < b.timestep; });
  return kept;
}

inline KeystepSet extract_keysteps(const Episode& ep, const ExtractorConfig& cfg) {
  cfg.validate();
  const SpeedProfile sp = speed_profile(ep, cfg.alpha, effective_dims(ep, cfg));
  KeystepSet ks;
  ks.episode_id = ep.id;
  ks.thresholds = adaptive_thresholds(sp, cfg);

  auto cands = grip_anchors(ep, sp, gripper_flips(ep, cfg), ks.thresholds.high, cfg);
  auto turns = turning_points(ep, sp, ks.thresholds.low, cfg);
  cands.insert(cands.end(), turns.begin(), turns.end());
  auto survivors = enforce_min_gap(std::move(cands), cfg.min_gap);

  std::vector<int> selected{0, ep.T};
  for (const auto& c : survivors) selected.push_back(c.timestep);
  auto fills = gap_fill(ep, sp, selected, cfg);

  survivors.insert(survivors.end(), fills.begin(), fills.end());
  std::sort(survivors.begin(), survivors.end(), [](const auto& a, const auto& b) { return a.timestep < b.timestep; });
  ks.candidates = std::move(survivors);
  return ks;
}

// ---------------------------------------------------------------------------
// Keystep CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kKeystepCsvHeader =
    "episode_id,row_index,timestep,frame_id,source,speed_ema,gripper_state";

struct KeystepRow {
  std::string episode_id;
  int row_index = 0;
  int timestep = 0;
  std::string frame_id;
  Source source = Source::Grip;
  double speed_ema = 0.0;
  int gripper_state = 0;
  bool operator==(const KeystepRow&) const = default;
};

inline std::string format_speed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline void check_csv_field(const std::string& f) {
  if (f.find_first_of(",\"\r\n") != std::string::npos)
    throw InvalidInput("keystep CSV field contains a reserved character: " + f);
}

/// Writes one row per candidate; row_index counts across the whole file.
inline void write_keystep_csv(std::ostream& out, const std::vector<Episode>& episodes,
                              const std::vector<KeystepSet>& sets) {
  out << kKeystepCsvHeader << '\n';
  int row = 0;
  for (std::size_t e = 0; e < sets.size(); ++e) {
    const auto& ks = sets[e];
    const Episode& ep = episodes.at(e);
    check_csv_field(ks.episode_id);
    for (const auto& c : ks.candidates) {
      const std::string& fid = ep.observations.at(static_cast<std::size_t>(c.timestep)).frame_id;
      check_csv_field(fid);
      out << ks.episode_id << ',' << row++ << ',' << c.timestep << ',' << fid << ',' << to_string(c.source) << ','
          << format_speed(c.speed_ema) << ',' << c.gripper_state << '\n';
    }
  }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline KeystepRow parse_keystep_row(const std::string& line, int lineno) {
  auto f = split_csv_line(line);
  if (f.size() != 7)
    throw InvalidInput("keystep CSV line " + std::to_string(lineno) + ": expected 7 fields, got " +
                       std::to_string(f.size()));
  try {
    return {f[0], std::stoi(f[1]), std::stoi(f[2]), f[3], source_from_string(f[4]), std::stod(f[5]), std::stoi(f[6])};
  } catch (const std::exception& e) {
    throw InvalidInput("keystep CSV line " + std::to_string(lineno) + ": " + e.what());
  }
}

inline std::vector<KeystepRow> read_keystep_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open keystep CSV: " + path);
  std::string line;
  if (!std::getline(in, line)) throw InvalidInput("keystep CSV is empty: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kKeystepCsvHeader) throw InvalidInput("keystep CSV header mismatch in " + path);
  std::vector<KeystepRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    rows.push_back(parse_keystep_row(line, lineno));
  }
  return rows;
}

/// Groups CSV rows back into per-episode keystep sets, in episode order.
inline std::vector<KeystepSet> keysteps_from_rows(const std::vector<Episode>& episodes,
                                                  const std::vector<KeystepRow>& rows) {
  std::vector<KeystepSet> sets;
  for (const auto& ep : episodes) {
    KeystepSet ks;
    ks.episode_id = ep.id;
    for (const auto& r : rows) {
      if (r.episode_id != ep.id) continue;
      if (r.timestep < 0 || r.timestep > ep.T)
        throw InvalidInput("keystep row " + std::to_string(r.row_index) + " timestep out of range");
      ks.candidates.push_back({r.timestep, r.source, r.speed_ema, r.gripper_state});
    }
    sets.push_back(std::move(ks));
  }
  return sets;
}

}  // namespace keyplan
