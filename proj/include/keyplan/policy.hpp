#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "keyplan/model.hpp"
#include "keyplan/sequence.hpp"
#include "keyplan/sim.hpp"
#include "keyplan/token_space.hpp"

namespace keyplan {

struct PolicyOutput {
  std::vector<Action> actions;
  std::vector<int> tokens;
  std::optional<std::string> warning;
};

/// Frames and in-between actions of the last `history` entries.
struct PolicyContext {
  std::vector<Image> frames;
  std::vector<Action> actions;
};

inline PolicyContext policy_context(std::span<const sim::HistoryStep> history, int max_frames) {
  if (history.empty()) throw InvalidInput("policy history is empty");
  if (max_frames < 1) throw InvalidInput("history length must be >= 1");
  const std::size_t first = history.size() > static_cast<std::size_t>(max_frames)
                                ? history.size() - static_cast<std::size_t>(max_frames)
                                : 0;
  PolicyContext ctx;
  for (std::size_t i = first; i < history.size(); ++i) {
    ctx.frames.push_back(history[i].image);
    if (i > first) {
      if (!history[i].prev_action)
        throw InvalidInput("history entry " + std::to_string(i) + " lacks the action that led to it");
      ctx.actions.push_back(*history[i].prev_action);
    }
  }
  return ctx;
}

inline std::vector<Action> zero_chunk(const TokenSpace& ts) {
  const int dims = ts.action().dims();
  return std::vector<Action>(static_cast<std::size_t>(ts.action().horizon()),
                             unflatten_action(std::vector<double>(static_cast<std::size_t>(dims), 0.0)));
}

/// Builds the policy prefix the same way the training builder does, decodes
/// an action chunk restricted to the action region, and falls back to a zero
/// chunk when the generated tokens do not form a valid chunk.
template <typename S>
PolicyOutput policy_step(const Model<S>& model, const TokenSpace& ts, const std::string& instruction,
                         std::span<const sim::HistoryStep> history, int max_frames, GenerateOptions opt = {}) {
  const auto ctx = policy_context(history, max_frames);
  const auto prefix = policy_prefix(ts, instruction, ctx.frames, ctx.actions);
  opt.allowed = ts.action_region();
  const int need = ts.action().symbols_per_chunk();
  const int base = ts.action_region().begin;
  const int budget = std::min(need, model.config().maxlen - static_cast<int>(prefix.size()));
  if (budget < 1) throw InvalidInput("policy prefix leaves no room for an action chunk");
  auto tokens = generate<S>(model, prefix, budget, opt, [&](const std::vector<int>& out) {
    int syms = 0;
    for (int t : out) syms += std::max(1, ts.action().expansion_length(t - base));
    return syms >= need;
  });
  PolicyOutput res;
  res.tokens = tokens;
  try {
    for (const auto& row : ts.decode_action(tokens)) res.actions.push_back(unflatten_action(row));
  } catch (const DecodeError& e) {
    res.actions = zero_chunk(ts);
    res.warning = std::string("action decode failed, returned zero chunk: ") + e.what();
  }
  return res;
}

template <typename S>
sim::Policy model_policy(const Model<S>& model, const TokenSpace& ts, int max_frames) {
  return [&model, &ts, max_frames](const std::string& instr, std::span<const sim::HistoryStep> history) {
    return policy_step<S>(model, ts, instr, history, max_frames).actions;
  };
}

/// Greedy planner rollout: predicts the vision tokens of the next structured
/// frame from a planner prefix.
template <typename S>
std::vector<int> planner_rollout(const Model<S>& model, const TokenSpace& ts, std::span<const int> prefix,
                                 int frame_tokens) {
  GenerateOptions opt;
  opt.allowed = ts.vision_region();
  return generate<S>(model, prefix, frame_tokens, opt);
}

}  // namespace keyplan
