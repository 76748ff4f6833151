#pragma once

// Deterministic planar pick-and-place world, seen from the side: blocks rest
// on a table line, pads are mats on the table, and a two-finger gripper moves
// in (x, height). Rendering is an integer grid of color ids.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "keyplan/common.hpp"
#include "keyplan/trajectory.hpp"

namespace keyplan::sim {

inline constexpr std::array<const char*, 4> kColorNames{"red", "green", "blue", "yellow"};

/// Pixel palette. Values are spread so that patch distances separate
/// object classes more strongly than colors within a class.
enum Pixel : std::uint8_t {
  kBackground = 0,
  kPadBase = 30,     // 30, 40, 50, 60
  kBlockBase = 100,  // 100, 115, 130, 145
  kGripperOpen = 200,
  kGripperClosed = 250,
};

inline std::uint8_t pad_pixel(int color) { return static_cast<std::uint8_t>(kPadBase + 10 * color); }
inline std::uint8_t block_pixel(int color) { return static_cast<std::uint8_t>(kBlockBase + 15 * color); }

struct SimConfig {
  int height = 32;
  int width = 32;
  double max_step = 0.1;
  double grasp_radius = 0.06;
  double pad_half_width = 0.08;
  double rest_y = 0.08;
  double hover_y = 0.45;
  double lateral_speed = 0.04;
  double descend_speed = 0.04;
  double lift_speed = 0.1;
  int pause_steps = 8;
  int dwell_steps = 3;
  int phase_timeout = 200;
  /// Gripper command reached at the end of an alignment pause (pre-shaping).
  double preshape = 0.4;
  double grip_switch_close = 0.55;
  double grip_switch_open = 0.45;
  int step_budget_per_placement = 120;
  /// Record the expert's command rather than the noisy executed action.
  bool clean_labels = false;
};

struct Placement {
  int block_color = 0;
  int pad_color = 0;
  bool operator==(const Placement&) const = default;
};

struct TaskSpec {
  std::vector<Placement> placements;
  bool operator==(const TaskSpec&) const = default;
};

struct Object {
  int color = 0;
  double x = 0.0;
  double y = 0.0;
  bool held = false;
  bool operator==(const Object&) const = default;
};

struct Target {
  int color = 0;
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Target&) const = default;
};

struct SimState {
  double gripper_x = 0.5;
  double gripper_y = 0.6;
  bool gripper_closed = false;
  std::vector<Object> objects;
  std::vector<Target> targets;
  std::uint64_t rng_seed = 0;
  int clamped_actions = 0;
  bool operator==(const SimState&) const = default;
};

struct EventLog {
  std::vector<int> grasp_times;
  std::vector<int> release_times;
  std::vector<int> align_times;
};

struct SimAction {
  double dx = 0.0;
  double dy = 0.0;
  double grip = 0.0;
};

inline std::string instruction_for(const TaskSpec& task) {
  std::string out = task.placements.size() > 1 ? "tidy up " : "";
  for (std::size_t i = 0; i < task.placements.size(); ++i) {
    if (i > 0) out += " then ";
    out += std::string("put ") + kColorNames[task.placements[i].block_color] + " block on " +
           kColorNames[task.placements[i].pad_color] + " pad";
  }
  return out;
}

/// k placements with distinct block colors and distinct pad colors.
inline TaskSpec sample_task(int k, Rng& rng) {
  if (k < 1 || k > static_cast<int>(kColorNames.size())) throw InvalidInput("task size must be in [1,4]");
  std::array<int, 4> blocks{0, 1, 2, 3}, pads{0, 1, 2, 3};
  for (int i = 3; i > 0; --i) {
    std::swap(blocks[i], blocks[rng.below(static_cast<std::uint64_t>(i) + 1)]);
    std::swap(pads[i], pads[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  }
  TaskSpec t;
  for (int i = 0; i < k; ++i) t.placements.push_back({blocks[i], pads[i]});
  return t;
}

inline bool in_radius(double ax, double ay, double bx, double by, double r) {
  return std::hypot(ax - bx, ay - by) <= r;
}

/// Lays blocks and pads along the table with minimum separations by drawing
/// a random item order and distributing the remaining slack.
inline SimState reset(const TaskSpec& task, std::uint64_t seed, const SimConfig& cfg = {}) {
  if (task.placements.empty()) throw InvalidInput("reset: task has no placements");
  Rng rng(seed * 0x2545F4914F6CDD1DULL + 17);
  constexpr double kLo = 0.06, kHi = 0.94;
  auto gap = [](bool a_pad, bool b_pad) { return a_pad && b_pad ? 0.16 : (!a_pad && !b_pad ? 0.09 : 0.12); };

  const std::size_t k = task.placements.size();
  std::vector<int> order;  // >= 0 block index, < 0 pad index (-1 - i)
  for (std::size_t i = 0; i < k; ++i) {
    order.push_back(static_cast<int>(i));
    order.push_back(-1 - static_cast<int>(i));
  }
  double slack = -1.0;
  for (int attempt = 0; attempt < 100 && slack < 0.0; ++attempt) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    double need = 0.0;
    for (std::size_t i = 1; i < order.size(); ++i) need += gap(order[i - 1] < 0, order[i] < 0);
    slack = (kHi - kLo) - need;
  }
  if (slack < 0.0) throw InvalidInput("reset: could not place items with the required separation");

  std::vector<double> cuts;
  for (std::size_t i = 0; i < order.size(); ++i) cuts.push_back(rng.uniform(0.0, slack));
  std::sort(cuts.begin(), cuts.end());

  SimState s;
  s.rng_seed = seed;
  s.objects.resize(k);
  s.targets.resize(k);
  double x = kLo;
  double prev_cut = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i > 0) x += gap(order[i - 1] < 0, order[i] < 0);
    x += cuts[i] - prev_cut;
    prev_cut = cuts[i];
    if (order[i] >= 0) {
      auto idx = static_cast<std::size_t>(order[i]);
      s.objects[idx] = {task.placements[idx].block_color, x, cfg.rest_y, false};
    } else {
      auto idx = static_cast<std::size_t>(-1 - order[i]);
      s.targets[idx] = {task.placements[idx].pad_color, x, 0.0};
    }
  }
  s.gripper_x = rng.uniform(0.1, 0.9);
  s.gripper_y = cfg.hover_y;
  s.gripper_closed = false;
  return s;
}

inline SimState step(const SimState& in, const SimAction& a, const SimConfig& cfg = {}) {
  SimState s = in;
  double dx = std::isfinite(a.dx) ? a.dx : 0.0;
  double dy = std::isfinite(a.dy) ? a.dy : 0.0;
  if (std::abs(dx) > cfg.max_step || std::abs(dy) > cfg.max_step || !std::isfinite(a.dx) || !std::isfinite(a.dy))
    ++s.clamped_actions;
  dx = std::clamp(dx, -cfg.max_step, cfg.max_step);
  dy = std::clamp(dy, -cfg.max_step, cfg.max_step);

  const bool want_closed = a.grip > 0.5;
  if (want_closed && !s.gripper_closed) {
    s.gripper_closed = true;
    std::optional<std::size_t> best;
    double best_d = 0.0;
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      const double d = std::hypot(s.objects[i].x - s.gripper_x, s.objects[i].y - s.gripper_y);
      if (d <= cfg.grasp_radius && (!best || d < best_d)) {
        best = i;
        best_d = d;
      }
    }
    if (best) s.objects[*best].held = true;
  } else if (!want_closed && s.gripper_closed) {
    s.gripper_closed = false;
    for (auto& o : s.objects) {
      if (!o.held) continue;
      o.held = false;
      o.y = cfg.rest_y;
    }
  }

  s.gripper_x = std::clamp(s.gripper_x + dx, 0.0, 1.0);
  s.gripper_y = std::clamp(s.gripper_y + dy, cfg.rest_y, 1.0);
  for (auto& o : s.objects) {
    if (!o.held) continue;
    o.x = s.gripper_x;
    o.y = s.gripper_y;
  }
  return s;
}

inline int held_index(const SimState& s) {
  for (std::size_t i = 0; i < s.objects.size(); ++i)
    if (s.objects[i].held) return static_cast<int>(i);
  return -1;
}

/// Every block rests on the pad of its placement's color.
inline bool task_success(const SimState& s, const TaskSpec& task, const SimConfig& cfg = {}) {
  for (const auto& p : task.placements) {
    const Object* obj = nullptr;
    const Target* pad = nullptr;
    for (const auto& o : s.objects)
      if (o.color == p.block_color) obj = &o;
    for (const auto& t : s.targets)
      if (t.color == p.pad_color) pad = &t;
    if (!obj || !pad || obj->held) return false;
    if (std::abs(obj->x - pad->x) > cfg.pad_half_width) return false;
  }
  return true;
}

inline Image render(const SimState& s, const SimConfig& cfg = {}) {
  Image img(cfg.height, cfg.width, kBackground);
  auto col_of = [&](double x) { return std::clamp(static_cast<int>(std::floor(x * cfg.width)), 0, cfg.width - 1); };
  auto row_of = [&](double y) {
    return std::clamp(cfg.height - 1 - static_cast<int>(std::floor(y * cfg.height)), 0, cfg.height - 1);
  };
  auto put = [&](int r, int c, std::uint8_t v) {
    if (r >= 0 && r < cfg.height && c >= 0 && c < cfg.width) img.at(r, c) = v;
  };
  for (const auto& t : s.targets) {
    const int c = col_of(t.x);
    for (int dc = -2; dc <= 2; ++dc) put(cfg.height - 1, c + dc, pad_pixel(t.color));
  }
  for (const auto& o : s.objects) {
    const int r = row_of(o.y), c = col_of(o.x);
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) put(r + dr, c + dc, block_pixel(o.color));
  }
  const int r = row_of(s.gripper_y), c = col_of(s.gripper_x);
  const auto g = static_cast<std::uint8_t>(s.gripper_closed ? kGripperClosed : kGripperOpen);
  for (int dc = -2; dc <= 2; ++dc) put(r - 2, c + dc, g);
  for (int dr = -1; dr <= 1; ++dr) {
    put(r + dr, c - 2, g);
    put(r + dr, c + 2, g);
  }
  return img;
}

inline Action to_action(const SimAction& a) { return Action{{a.dx, a.dy}, std::clamp(a.grip, 0.0, 1.0), {}}; }
inline SimAction from_action(const Action& a) {
  return {a.delta.size() > 0 ? a.delta[0] : 0.0, a.delta.size() > 1 ? a.delta[1] : 0.0, a.gripper};
}

struct ExpertRun {
  Episode episode;
  EventLog events;
  TaskSpec task;
  SimState final_state;
};

/// Phase machine per placement: approach above the block, pause, descend,
/// close, dwell, lift, carry above the pad, pause, descend, open, dwell,
/// retreat. Lateral moves run at full speed and stop once within half a step
/// of the target; vertical moves end with a fractional step. Action noise is
/// Gaussian, clipped at three sigma, so grasps always succeed while
/// hypot(lateral_speed / 2 + 3 sigma, 3 sigma) <= grasp_radius.
inline ExpertRun scripted_expert(const TaskSpec& task, std::uint64_t seed, double sigma,
                                 const std::string& episode_id, const SimConfig& cfg = {}) {
  ExpertRun run;
  run.task = task;
  SimState s = reset(task, seed, cfg);
  Rng noise(seed ^ 0xA5A5A5A5DEADBEEFULL);
  Episode& ep = run.episode;
  ep.id = episode_id;
  ep.instruction = instruction_for(task);
  double grip_cmd = 0.0;

  auto record = [&](double dx, double dy, double grip) {
    auto jitter = [&] { return sigma > 0.0 ? std::clamp(noise.normal(0.0, sigma), -3 * sigma, 3 * sigma) : 0.0; };
    SimAction a{dx + jitter(), dy + jitter(), grip};
    const int t = static_cast<int>(ep.actions.size());
    ep.observations.push_back({t, render(s, cfg), episode_id + "_" + std::to_string(t)});
    ep.actions.push_back(to_action(cfg.clean_labels ? SimAction{dx, dy, grip} : a));
    s = step(s, a, cfg);
  };
  auto move_to = [&](double tx, double ty, double speed, const char* phase, bool lateral) {
    for (int n = 0;; ++n) {
      if (n >= cfg.phase_timeout)
        throw Error(std::string("scripted_expert: phase '") + phase + "' timed out in episode " + episode_id);
      const double dx = tx - s.gripper_x, dy = ty - s.gripper_y;
      const double dist = std::hypot(dx, dy);
      if (lateral && dist <= 0.5 * speed) return;
      if (!lateral && dist <= speed) {
        if (dist > 1e-12) record(dx, dy, grip_cmd);
        return;
      }
      record(dx / dist * speed, dy / dist * speed, grip_cmd);
    }
  };
  auto hold = [&](int n) {
    for (int i = 0; i < n; ++i) record(0.0, 0.0, grip_cmd);
  };

  // Gripper command during stationary phases ramps toward the next state
  // without crossing the 0.5 switching level, so each step of a pause or dwell
  // leaves a distinct command in the action record.
  auto ramp = [&](int n, double from, double to) {
    for (int i = 1; i <= n; ++i) {
      grip_cmd = from + (to - from) * i / n;
      record(0.0, 0.0, grip_cmd);
    }
  };

  for (const auto& p : task.placements) {
    std::size_t bi = 0, pi = 0;
    for (std::size_t i = 0; i < s.objects.size(); ++i)
      if (s.objects[i].color == p.block_color) bi = i;
    for (std::size_t i = 0; i < s.targets.size(); ++i)
      if (s.targets[i].color == p.pad_color) pi = i;

    move_to(s.objects[bi].x, cfg.hover_y, cfg.lateral_speed, "approach", true);
    double above = s.gripper_x;
    ramp(cfg.pause_steps, 0.0, cfg.preshape);
    run.events.align_times.push_back(static_cast<int>(ep.actions.size()) - 1);
    move_to(above, s.objects[bi].y, cfg.descend_speed, "descend", false);
    grip_cmd = cfg.grip_switch_close;
    run.events.grasp_times.push_back(static_cast<int>(ep.actions.size()));
    hold(1);
    if (!s.objects[bi].held) throw Error("scripted_expert: grasp failed in episode " + episode_id);
    ramp(cfg.dwell_steps, cfg.grip_switch_close, 1.0);
    move_to(s.gripper_x, cfg.hover_y, cfg.lift_speed, "lift", false);
    move_to(s.targets[pi].x, cfg.hover_y, cfg.lateral_speed, "carry", true);
    above = s.gripper_x;
    ramp(cfg.pause_steps, 1.0, 1.0 - cfg.preshape);
    run.events.align_times.push_back(static_cast<int>(ep.actions.size()) - 1);
    move_to(above, cfg.rest_y, cfg.descend_speed, "place", false);
    grip_cmd = cfg.grip_switch_open;
    run.events.release_times.push_back(static_cast<int>(ep.actions.size()));
    hold(1);
    ramp(cfg.dwell_steps, cfg.grip_switch_open, 0.0);
    move_to(s.gripper_x, cfg.hover_y, cfg.lift_speed, "retreat", false);
  }
  // Final frame with a terminal no-op action so observations and actions align.
  const int T = static_cast<int>(ep.actions.size());
  ep.observations.push_back({T, render(s, cfg), episode_id + "_" + std::to_string(T)});
  ep.actions.push_back(to_action({0.0, 0.0, grip_cmd}));
  ep.T = T;
  run.final_state = s;
  return run;
}

// ---------------------------------------------------------------------------
// Closed-loop evaluation
// ---------------------------------------------------------------------------

/// One observed frame plus the action executed just before it (none for the
/// first frame of a trial).
struct HistoryStep {
  Image image;
  std::optional<Action> prev_action;
};

using Policy = std::function<std::vector<Action>(const std::string& instruction, std::span<const HistoryStep> history)>;

struct TrialResult {
  std::uint64_t seed = 0;
  bool success = false;
  int steps = 0;
  int queries = 0;
  bool policy_error = false;
};

struct EvalSummary {
  std::vector<TrialResult> trials;
  int successes = 0;
  double success_rate = 0.0;
  double mean_queries = 0.0;
};

inline TrialResult run_trial(const Policy& policy, const TaskSpec& task, std::uint64_t seed, int exec_k,
                             const SimConfig& cfg = {}) {
  if (exec_k < 1) throw InvalidInput("exec_k must be >= 1");
  TrialResult res;
  res.seed = seed;
  SimState s = reset(task, seed, cfg);
  const std::string instr = instruction_for(task);
  std::vector<HistoryStep> history{{render(s, cfg), std::nullopt}};
  const int budget = cfg.step_budget_per_placement * static_cast<int>(task.placements.size());
  while (res.steps < budget) {
    std::vector<Action> chunk;
    try {
      chunk = policy(instr, history);
    } catch (const std::exception&) {
      res.policy_error = true;
      return res;
    }
    ++res.queries;
    if (chunk.empty()) {
      res.policy_error = true;
      return res;
    }
    const int n = std::min<int>(exec_k, static_cast<int>(chunk.size()));
    for (int i = 0; i < n && res.steps < budget; ++i) {
      s = step(s, from_action(chunk[static_cast<std::size_t>(i)]), cfg);
      ++res.steps;
      history.push_back({render(s, cfg), chunk[static_cast<std::size_t>(i)]});
      if (task_success(s, task, cfg)) {
        res.success = true;
        return res;
      }
    }
  }
  return res;
}

/// Trial i uses seed base_seed + i and a freshly sampled task of `placements` objects.
inline EvalSummary evaluate_policy(const std::function<Policy(const TaskSpec&, std::uint64_t)>& make_policy,
                                   int placements, int trials, int exec_k, std::uint64_t base_seed,
                                   const SimConfig& cfg = {}) {
  EvalSummary sum;
  double queries = 0.0;
  for (int i = 0; i < trials; ++i) {
    const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(i);
    Rng task_rng(seed);
    const TaskSpec task = sample_task(placements, task_rng);
    auto r = run_trial(make_policy(task, seed), task, seed, exec_k, cfg);
    sum.successes += r.success ? 1 : 0;
    queries += r.queries;
    sum.trials.push_back(r);
  }
  sum.success_rate = trials > 0 ? static_cast<double>(sum.successes) / trials : 0.0;
  sum.mean_queries = trials > 0 ? queries / trials : 0.0;
  return sum;
}

/// Replays the scripted expert's actions open-loop; the simulator is
/// deterministic so this reproduces the demonstration exactly.
inline Policy expert_replay_policy(const TaskSpec& task, std::uint64_t seed, const SimConfig& cfg = {}) {
  auto run = std::make_shared<ExpertRun>(scripted_expert(task, seed, 0.0, "replay", cfg));
  auto cursor = std::make_shared<std::size_t>(0);
  return [run, cursor](const std::string&, std::span<const HistoryStep> history) {
    *cursor = history.size() - 1;
    std::vector<Action> chunk;
    for (std::size_t i = *cursor; i < run->episode.actions.size() && chunk.size() < 8; ++i)
      chunk.push_back(run->episode.actions[i]);
    if (chunk.empty()) chunk.push_back(Action{{0.0, 0.0}, 0.0, {}});
    return chunk;
  };
}

/// Generates the standard demonstration set: episode i uses seed base_seed + i.
inline std::vector<ExpertRun> generate_demos(int count, int placements, double sigma, std::uint64_t base_seed,
                                             const SimConfig& cfg = {}) {
  std::vector<ExpertRun> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(i);
    Rng task_rng(seed);
    out.push_back(scripted_expert(sample_task(placements, task_rng), seed, sigma, "ep" + std::to_string(seed), cfg));
  }
  return out;
}

}  // namespace keyplan::sim
