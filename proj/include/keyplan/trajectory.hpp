#pragma once

// Episode data model, speed profiles and the episode JSON-lines format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "keyplan/common.hpp"

namespace keyplan {

inline constexpr int kPatch = 8;

/// Row-major grid of small integer channel values.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }

  bool operator==(const Image&) const = default;
};

struct Observation {
  int timestep = 0;
  Image image;
  std::string frame_id;

  bool operator==(const Observation&) const = default;
};

struct Action {
  std::vector<double> delta;
  double gripper = 0.0;
  std::vector<double> aux;

  bool operator==(const Action&) const = default;
};

struct Episode {
  std::string id;
  std::string instruction;
  int T = 0;
  std::vector<Observation> observations;
  std::vector<Action> actions;

  bool operator==(const Episode&) const = default;
};

struct SpeedProfile {
  std::vector<double> raw;
  std::vector<double> smoothed;
  double alpha = 0.3;
};

/// Indices of the Action::delta components that contribute to the speed norm.
using DimMask = std::vector<std::size_t>;

/// Throws InvalidInput naming the episode and the offending field.
inline void validate_episode(const Episode& ep) {
  auto fail = [&](const std::string& field, const std::string& what) {
    throw InvalidInput("episode " + ep.id + ": field '" + field + "' " + what);
  };
  if (ep.T < 1) fail("T", "must be >= 1");
  const auto n = static_cast<std::size_t>(ep.T) + 1;
  if (ep.observations.size() != n)
    fail("observations", "has " + std::to_string(ep.observations.size()) + " entries, expected T+1 = " +
                             std::to_string(n));
  if (ep.actions.size() != n)
    fail("actions", "has " + std::to_string(ep.actions.size()) + " entries, expected T+1 = " + std::to_string(n));
  const Image& first = ep.observations.front().image;
  if (first.height <= 0 || first.width <= 0 || first.height % kPatch != 0 || first.width % kPatch != 0)
    fail("observations[0].image", "dimensions must be positive multiples of " + std::to_string(kPatch));
  for (std::size_t t = 0; t < n; ++t) {
    const auto& obs = ep.observations[t];
    if (obs.timestep != static_cast<int>(t)) fail("observations[" + std::to_string(t) + "].t", "out of order");
    if (obs.image.height != first.height || obs.image.width != first.width)
      fail("observations[" + std::to_string(t) + "].image", "dimensions differ within episode");
    if (obs.image.pixels.size() != static_cast<std::size_t>(obs.image.height) * obs.image.width)
      fail("observations[" + std::to_string(t) + "].image", "pixel count does not match dimensions");
    const auto& act = ep.actions[t];
    if (act.delta.empty()) fail("actions[" + std::to_string(t) + "].delta", "is empty");
    if (act.delta.size() != ep.actions.front().delta.size())
      fail("actions[" + std::to_string(t) + "].delta", "dimension differs within episode");
    for (double v : act.delta)
      if (!std::isfinite(v)) fail("actions[" + std::to_string(t) + "].delta", "is not finite");
    for (double v : act.aux)
      if (!std::isfinite(v)) fail("actions[" + std::to_string(t) + "].aux", "is not finite");
    if (!(act.gripper >= 0.0 && act.gripper <= 1.0))
      fail("actions[" + std::to_string(t) + "].gripper", "must lie in [0,1]");
  }
}

/// Linear-interpolation quantile on the sorted values; q is clamped to [0,1].
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidInput("quantile: empty input");
  std::sort(values.begin(), values.end());
  q = std::clamp(q, 0.0, 1.0);
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

/// Default mask: the first three (translational) delta components, or fewer
/// when the action is lower-dimensional.
inline DimMask translational_dims(std::size_t delta_size) {
  DimMask mask;
  for (std::size_t i = 0; i < std::min<std::size_t>(3, delta_size); ++i) mask.push_back(i);
  return mask;
}

inline double masked_norm(const Action& a, const DimMask& dims) {
  double s = 0.0;
  for (std::size_t d : dims) s += a.delta[d] * a.delta[d];
  return std::sqrt(s);
}

inline SpeedProfile speed_profile(const Episode& ep, double alpha, const DimMask& dims) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidInput("speed_profile: alpha must lie in (0,1]");
  if (dims.empty()) throw InvalidInput("speed_profile: empty dimension mask");
  for (const auto& a : ep.actions)
    for (std::size_t d : dims)
      if (d >= a.delta.size()) throw InvalidInput("speed_profile: mask index " + std::to_string(d) + " out of range");
  SpeedProfile sp;
  sp.alpha = alpha;
  sp.raw.reserve(ep.actions.size());
  sp.smoothed.reserve(ep.actions.size());
  for (const auto& a : ep.actions) {
    const double r = masked_norm(a, dims);
    sp.raw.push_back(r);
    sp.smoothed.push_back(sp.smoothed.empty() ? r : alpha * r + (1.0 - alpha) * sp.smoothed.back());
  }
  return sp;
}

// ---------------------------------------------------------------------------
// Episode JSONL
// ---------------------------------------------------------------------------

inline nlohmann::json episode_to_json(const Episode& ep) {
  using nlohmann::json;
  json j;
  j["id"] = ep.id;
  j["instruction"] = ep.instruction;
  j["T"] = ep.T;
  json obs = json::array();
  for (const auto& o : ep.observations) {
    json rows = json::array();
    for (int r = 0; r < o.image.height; ++r) {
      json row = json::array();
      for (int c = 0; c < o.image.width; ++c) row.push_back(o.image.at(r, c));
      rows.push_back(std::move(row));
    }
    obs.push_back({{"t", o.timestep}, {"image", std::move(rows)}, {"frame_id", o.frame_id}});
  }
  j["observations"] = std::move(obs);
  json acts = json::array();
  for (std::size_t t = 0; t < ep.actions.size(); ++t) {
    const auto& a = ep.actions[t];
    acts.push_back({{"t", static_cast<int>(t)}, {"delta", a.delta}, {"gripper", a.gripper}, {"aux", a.aux}});
  }
  j["actions"] = std::move(acts);
  return j;
}

inline Image image_from_json(const nlohmann::json& rows) {
  if (!rows.is_array()) throw InvalidInput("image must be an array of rows");
  Image img;
  img.height = static_cast<int>(rows.size());
  img.width = img.height == 0 ? 0 : static_cast<int>(rows.front().size());
  img.pixels.reserve(static_cast<std::size_t>(img.height) * img.width);
  for (const auto& row : rows) {
    if (!row.is_array() || static_cast<int>(row.size()) != img.width)
      throw InvalidInput("image rows must all have the same length");
    for (const auto& v : row) {
      const int p = v.get<int>();
      if (p < 0 || p > 255) throw InvalidInput("image values must lie in [0,255]");
      img.pixels.push_back(static_cast<std::uint8_t>(p));
    }
  }
  return img;
}

inline nlohmann::json image_to_json(const Image& img) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < img.height; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < img.width; ++c) row.push_back(img.at(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Parses one record; structural problems surface as nlohmann or InvalidInput
/// exceptions which the loader rewraps with a line number.
inline Episode episode_from_json(const nlohmann::json& j) {
  Episode ep;
  ep.id = j.at("id").get<std::string>();
  ep.instruction = j.at("instruction").get<std::string>();
  ep.T = j.at("T").get<int>();
  for (const auto& o : j.at("observations")) {
    Observation obs;
    obs.timestep = o.at("t").get<int>();
    obs.image = image_from_json(o.at("image"));
    if (o.contains("frame_id") && !o["frame_id"].is_null()) obs.frame_id = o["frame_id"].get<std::string>();
    ep.observations.push_back(std::move(obs));
  }
  for (const auto& a : j.at("actions")) {
    Action act;
    act.delta = a.at("delta").get<std::vector<double>>();
    act.gripper = a.at("gripper").get<double>();
    if (a.contains("aux") && !a["aux"].is_null()) act.aux = a["aux"].get<std::vector<double>>();
    ep.actions.push_back(std::move(act));
  }
  return ep;
}

inline std::vector<Episode> parse_episodes(std::istream& in) {
  std::vector<Episode> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Episode ep;
    try {
      ep = episode_from_json(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      throw InvalidInput("line " + std::to_string(lineno) + ": " + e.what());
    }
    validate_episode(ep);
    out.push_back(std::move(ep));
  }
  return out;
}

inline std::vector<Episode> load_episodes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open episode file: " + path);
  return parse_episodes(in);
}

inline void save_episodes(const std::string& path, const std::vector<Episode>& episodes) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write episode file: " + path);
  for (const auto& ep : episodes) out << episode_to_json(ep).dump() << '\n';
}

}  // namespace keyplan
