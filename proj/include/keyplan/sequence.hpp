#pragma once

// Training sequences for both stages.
//
// Planner:  BOS lang SEP ctx_frame... SEP target_frame EOS   (loss on target_frame)
// Policy:   BOS lang SEP o a o a ... o SEP chunk EOS          (loss on chunk)

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "keyplan/keystep.hpp"
#include "keyplan/token_space.hpp"
#include "keyplan/trajectory.hpp"

namespace keyplan {

enum class Stage { Planner = 1, Policy = 2 };

inline const char* to_string(Stage s) { return s == Stage::Planner ? "planner" : "policy"; }
inline Stage stage_from_string(const std::string& s) {
  if (s == "planner") return Stage::Planner;
  if (s == "policy") return Stage::Policy;
  throw InvalidInput("unknown stage '" + s + "'");
}

struct SequenceMeta {
  std::string episode_id;
  int anchor = 0;
  int target = 0;
};

struct TrainingSequence {
  Stage stage = Stage::Planner;
  std::vector<int> tokens;
  std::vector<std::uint8_t> mask;
  SequenceMeta meta;

  std::size_t size() const { return tokens.size(); }
  std::size_t masked_count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
  /// Index of the first supervised token.
  std::size_t first_masked() const {
    return static_cast<std::size_t>(std::find(mask.begin(), mask.end(), 1) - mask.begin());
  }
};

struct BuildConfig {
  int history = 2;
  int interval = 4;
  int slide = 4;
  int horizon = 4;
  int stride = 4;
  /// Shift the target frame instead of the anchor during augmentation.
  bool shift_target = false;
  /// When > 0, policy history actions are the codec reconstructions that a
  /// closed-loop policy executing this many actions per query applies: action
  /// i comes from the decoded chunk starting at i - i % replay_exec.
  int replay_exec = 0;

  void validate() const {
    if (history < 1) throw InvalidInput("history must be >= 1");
    if (interval < 1) throw InvalidInput("interval must be >= 1");
    if (slide < 1 || slide > interval) throw InvalidInput("slide must lie in [1, interval]");
    if (horizon < 1) throw InvalidInput("horizon must be >= 1");
    if (stride < 1) throw InvalidInput("stride must be >= 1");
    if (replay_exec < 0 || replay_exec > horizon) throw InvalidInput("replay_exec must lie in [0, horizon]");
  }
  void check_codec(const TokenSpace& ts) const {
    if (ts.action().horizon() != horizon)
      throw InvalidInput("build horizon " + std::to_string(horizon) + " does not match the action codec horizon " +
                         std::to_string(ts.action().horizon()));
  }
};

/// Context frame timesteps for a planner sample: `history` frames spaced by
/// `interval`, ending at `reference`, clipped at 0.
inline std::vector<int> planner_context(int reference, const BuildConfig& cfg) {
  std::vector<int> ts;
  for (int j = cfg.history - 1; j >= 0; --j) ts.push_back(std::max(0, reference - j * cfg.interval));
  return ts;
}

/// Vision tokens of every observation, encoded once per episode.
inline std::vector<std::vector<int>> encode_frames(const Episode& ep, const TokenSpace& ts) {
  std::vector<std::vector<int>> out;
  out.reserve(ep.observations.size());
  for (const auto& o : ep.observations) out.push_back(ts.encode_image(o.image));
  return out;
}

inline std::vector<int> planner_prefix_tokens(const TokenSpace& ts, const std::string& instruction,
                                              const std::vector<std::span<const int>>& context) {
  std::vector<int> out{ts.bos()};
  auto lang = ts.encode_text(instruction);
  out.insert(out.end(), lang.begin(), lang.end());
  out.push_back(ts.sep());
  for (const auto& v : context) out.insert(out.end(), v.begin(), v.end());
  out.push_back(ts.sep());
  return out;
}

inline std::vector<int> planner_prefix(const TokenSpace& ts, const std::string& instruction,
                                       std::span<const Image> context) {
  std::vector<std::vector<int>> enc;
  for (const auto& img : context) enc.push_back(ts.encode_image(img));
  return planner_prefix_tokens(ts, instruction, {enc.begin(), enc.end()});
}

inline std::vector<TrainingSequence> build_planner_samples(const Episode& ep, const KeystepSet& ks,
                                                           const BuildConfig& cfg, const TokenSpace& ts) {
  cfg.validate();
  if (ks.episode_id != ep.id)
    throw InvalidInput("keystep set '" + ks.episode_id + "' does not belong to episode '" + ep.id + "'");
  if (ks.candidates.empty()) throw InvalidInput("episode " + ep.id + " has no keysteps");
  const auto enc = encode_frames(ep, ts);
  std::vector<TrainingSequence> out;
  for (const auto& c : ks.candidates) {
    if (c.timestep < 0 || c.timestep > ep.T) throw InvalidInput("keystep timestep outside episode " + ep.id);
    for (int d = 0; d < cfg.slide; ++d) {
      const int anchor = std::max(0, c.timestep - d);
      const int target = cfg.shift_target ? anchor : c.timestep;
      std::vector<std::span<const int>> ctx;
      for (int t : planner_context(anchor - cfg.interval, cfg)) ctx.emplace_back(enc[static_cast<std::size_t>(t)]);
      TrainingSequence s;
      s.stage = Stage::Planner;
      s.tokens = planner_prefix_tokens(ts, ep.instruction, ctx);
      s.mask.assign(s.tokens.size(), 0);
      const auto& tgt = enc[static_cast<std::size_t>(target)];
      s.tokens.insert(s.tokens.end(), tgt.begin(), tgt.end());
      s.mask.insert(s.mask.end(), tgt.size(), 1);
      s.tokens.push_back(ts.eos());
      s.mask.push_back(0);
      s.meta = {ep.id, anchor, target};
      out.push_back(std::move(s));
    }
  }
  return out;
}

/// A history action enters the context as the chunk that repeats it for the
/// full horizon.
inline std::vector<int> encode_history_action(const TokenSpace& ts, const Action& a) {
  return ts.encode_action(ActionChunk(static_cast<std::size_t>(ts.action().horizon()), flatten_action(a)));
}

/// Shared by the training builder and the online policy so both produce the
/// same bytes. `actions[i]` is the action executed between frames[i] and
/// frames[i + 1].
inline std::vector<int> policy_prefix_tokens(const TokenSpace& ts, const std::string& instruction,
                                             const std::vector<std::span<const int>>& frames,
                                             std::span<const Action> actions) {
  if (frames.empty()) throw InvalidInput("policy prefix needs at least one frame");
  if (actions.size() + 1 != frames.size())
    throw InvalidInput("policy prefix needs exactly one action between consecutive frames");
  std::vector<int> out{ts.bos()};
  auto lang = ts.encode_text(instruction);
  out.insert(out.end(), lang.begin(), lang.end());
  out.push_back(ts.sep());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    out.insert(out.end(), frames[i].begin(), frames[i].end());
    if (i < actions.size()) {
      auto a = encode_history_action(ts, actions[i]);
      out.insert(out.end(), a.begin(), a.end());
    }
  }
  out.push_back(ts.sep());
  return out;
}

inline std::vector<int> policy_prefix(const TokenSpace& ts, const std::string& instruction,
                                      std::span<const Image> frames, std::span<const Action> actions) {
  std::vector<std::vector<int>> enc;
  for (const auto& img : frames) enc.push_back(ts.encode_image(img));
  return policy_prefix_tokens(ts, instruction, {enc.begin(), enc.end()}, actions);
}

/// Actions as a closed-loop policy reproducing the episode would execute
/// them (see BuildConfig::replay_exec); chunks past the end repeat the last
/// action.
inline std::vector<Action> replayed_actions(const Episode& ep, int exec, const TokenSpace& ts) {
  if (exec < 1) return ep.actions;
  const int h = ts.action().horizon();
  const int last = static_cast<int>(ep.actions.size()) - 1;
  std::vector<Action> out;
  for (int q = 0; q <= last; q += exec) {
    ActionChunk chunk;
    for (int i = 0; i < h; ++i) chunk.push_back(flatten_action(ep.actions[static_cast<std::size_t>(std::min(q + i, last))]));
    const auto dec = ts.action().decode(ts.action().encode(chunk));
    for (int i = 0; i < exec && q + i <= last; ++i) out.push_back(unflatten_action(dec[static_cast<std::size_t>(i)]));
  }
  return out;
}

inline std::vector<TrainingSequence> build_policy_samples(const Episode& ep, const BuildConfig& cfg,
                                                          const TokenSpace& ts) {
  cfg.validate();
  cfg.check_codec(ts);
  const auto enc = encode_frames(ep, ts);
  const auto executed = replayed_actions(ep, cfg.replay_exec, ts);
  std::vector<TrainingSequence> out;
  for (int t = 0; t + cfg.horizon <= ep.T; t += cfg.stride) {
    const int first = std::max(0, t - cfg.history + 1);
    std::vector<std::span<const int>> frames;
    std::vector<Action> acts;
    for (int i = first; i <= t; ++i) {
      frames.emplace_back(enc[static_cast<std::size_t>(i)]);
      if (i < t) acts.push_back(executed[static_cast<std::size_t>(i)]);
    }
    TrainingSequence s;
    s.stage = Stage::Policy;
    s.tokens = policy_prefix_tokens(ts, ep.instruction, frames, acts);
    s.mask.assign(s.tokens.size(), 0);
    ActionChunk chunk;
    for (int i = 0; i < cfg.horizon; ++i) chunk.push_back(flatten_action(ep.actions[static_cast<std::size_t>(t + i)]));
    auto a = ts.encode_action(chunk);
    s.tokens.insert(s.tokens.end(), a.begin(), a.end());
    s.mask.insert(s.mask.end(), a.size(), 1);
    s.tokens.push_back(ts.eos());
    s.mask.push_back(0);
    s.meta = {ep.id, t, t};
    out.push_back(std::move(s));
  }
  return out;
}

struct Batch {
  std::vector<std::vector<int>> tokens;
  std::vector<std::vector<std::uint8_t>> mask;
  std::vector<std::size_t> lengths;
};

inline Batch collate(std::span<const TrainingSequence> seqs, std::size_t pad_to, int pad_id) {
  Batch b;
  for (const auto& s : seqs) {
    if (s.tokens.size() > pad_to)
      throw InvalidInput("sequence of length " + std::to_string(s.tokens.size()) + " exceeds pad_to " +
                         std::to_string(pad_to));
    auto tok = s.tokens;
    auto m = s.mask;
    tok.resize(pad_to, pad_id);
    m.resize(pad_to, 0);
    b.tokens.push_back(std::move(tok));
    b.mask.push_back(std::move(m));
    b.lengths.push_back(s.tokens.size());
  }
  return b;
}

inline nlohmann::json sequence_to_json(const TrainingSequence& s) {
  nlohmann::json j;
  j["stage"] = to_string(s.stage);
  j["tokens"] = s.tokens;
  j["mask"] = s.mask;
  j["meta"] = {{"episode_id", s.meta.episode_id}, {"anchor", s.meta.anchor}, {"target", s.meta.target}};
  return j;
}

inline TrainingSequence sequence_from_json(const nlohmann::json& j) {
  TrainingSequence s;
  s.stage = stage_from_string(j.at("stage").get<std::string>());
  s.tokens = j.at("tokens").get<std::vector<int>>();
  s.mask = j.at("mask").get<std::vector<std::uint8_t>>();
  if (s.mask.size() != s.tokens.size()) throw InvalidInput("sequence mask and tokens differ in length");
  for (auto m : s.mask)
    if (m > 1) throw InvalidInput("sequence mask values must be 0 or 1");
  const auto& meta = j.at("meta");
  s.meta = {meta.at("episode_id").get<std::string>(), meta.at("anchor").get<int>(), meta.at("target").get<int>()};
  return s;
}

inline void save_sequences(const std::string& path, const std::vector<TrainingSequence>& seqs) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  for (const auto& s : seqs) out << sequence_to_json(s).dump() << '\n';
}

inline std::vector<TrainingSequence> load_sequences(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open " + path);
  std::vector<TrainingSequence> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sequence_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw InvalidInput(path + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace keyplan
