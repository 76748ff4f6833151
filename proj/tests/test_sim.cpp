#include <gtest/gtest.h>

#include "keyplan/sim.hpp"

using namespace keyplan;
using namespace keyplan::sim;

namespace {

Policy random_policy(std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [rng](const std::string&, std::span<const HistoryStep>) {
    std::vector<Action> out;
    for (int i = 0; i < 4; ++i)
      out.push_back(Action{{rng->uniform(-0.1, 0.1), rng->uniform(-0.1, 0.1)}, rng->uniform(), {}});
    return out;
  };
}

}  // namespace

TEST(World, ResetIsDeterministicAndSeparated) {
  Rng trng(1);
  const auto task = sample_task(3, trng);
  EXPECT_EQ(reset(task, 42), reset(task, 42));
  EXPECT_NE(reset(task, 42), reset(task, 43));
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = reset(task, seed);
    for (std::size_t i = 0; i < s.objects.size(); ++i)
      for (std::size_t j = i + 1; j < s.objects.size(); ++j)
        ASSERT_GE(std::abs(s.objects[i].x - s.objects[j].x), 0.09 - 1e-12);
    ASSERT_FALSE(task_success(s, task));
  }
}

TEST(World, StepClampsAndGrasps) {
  TaskSpec task{{{0, 1}}};
  SimState s = reset(task, 5);
  s.gripper_x = s.objects[0].x;
  s.gripper_y = s.objects[0].y;
  s = step(s, {0.5, 0.0, 1.0});
  EXPECT_EQ(s.clamped_actions, 1);
  EXPECT_TRUE(s.objects[0].held);
  EXPECT_DOUBLE_EQ(s.objects[0].x, s.gripper_x);
  s = step(s, {0.0, 0.0, 0.0});
  EXPECT_FALSE(s.objects[0].held);
  s = step(s, {std::nan(""), 0.0, 0.0});
  EXPECT_EQ(s.clamped_actions, 2);
}

TEST(World, InstructionText) {
  EXPECT_EQ(instruction_for(TaskSpec{{{0, 2}}}), "put red block on blue pad");
  EXPECT_EQ(instruction_for(TaskSpec{{{1, 0}, {3, 2}}}), "tidy up put green block on red pad then put yellow block on blue pad");
}

TEST(Expert, SucceedsOnEverySeed) {
  for (int k = 1; k <= 2; ++k) {
    const auto demos = generate_demos(50, k, 0.01, 100 * k);
    for (const auto& d : demos) {
      ASSERT_TRUE(task_success(d.final_state, d.task)) << d.episode.id;
      ASSERT_NO_THROW(validate_episode(d.episode));
      ASSERT_EQ(d.events.grasp_times.size(), static_cast<std::size_t>(k));
    }
  }
}

TEST(Expert, CleanLabelsRecordCommands) {
  SimConfig clean;
  clean.clean_labels = true;
  const auto noisy = generate_demos(3, 1, 0.01, 40)[0].episode;
  const auto cmd = generate_demos(3, 1, 0.01, 40, clean)[0].episode;
  ASSERT_EQ(noisy.T, cmd.T);
  for (int t = 0; t < noisy.T; ++t) EXPECT_EQ(noisy.observations[t].image, cmd.observations[t].image);
  int differ = 0;
  for (int t = 0; t < noisy.T; ++t) differ += noisy.actions[t] != cmd.actions[t];
  EXPECT_GT(differ, 0);
  const auto zero = generate_demos(1, 1, 0.0, 40)[0].episode;
  const auto zero_clean = generate_demos(1, 1, 0.0, 40, clean)[0].episode;
  EXPECT_EQ(zero.actions, zero_clean.actions);
}

TEST(Expert, ReplayReproducesDemonstration) {
  const auto sum = evaluate_policy([](const TaskSpec& t, std::uint64_t s) { return expert_replay_policy(t, s); }, 1,
                                   20, 2, 700);
  EXPECT_EQ(sum.successes, 20);
}

TEST(Eval, RandomPolicyRarelySucceeds) {
  const auto sum = evaluate_policy([](const TaskSpec&, std::uint64_t s) { return random_policy(s); }, 1, 50, 4, 900);
  EXPECT_LE(sum.successes, 2);
}

TEST(Eval, QueryCountFollowsExecK) {
  auto noop = [](const TaskSpec&, std::uint64_t) -> Policy {
    return [](const std::string&, std::span<const HistoryStep>) {
      return std::vector<Action>(8, Action{{0.0, 0.0}, 0.0, {}});
    };
  };
  SimConfig cfg;
  for (int k : {1, 3, 8}) {
    const auto sum = evaluate_policy(noop, 1, 2, k, 11, cfg);
    EXPECT_EQ(sum.trials[0].steps, cfg.step_budget_per_placement);
    EXPECT_EQ(sum.trials[0].queries, (cfg.step_budget_per_placement + k - 1) / k);
  }
}

TEST(Eval, HistoryCarriesExecutedActions) {
  std::vector<std::size_t> lengths;
  std::vector<bool> has_prev;
  auto recorder = [&](const TaskSpec&, std::uint64_t) -> Policy {
    return [&](const std::string&, std::span<const HistoryStep> h) {
      lengths.push_back(h.size());
      has_prev.push_back(h.back().prev_action.has_value());
      return std::vector<Action>(2, Action{{0.01, 0.0}, 0.0, {}});
    };
  };
  SimConfig cfg;
  cfg.step_budget_per_placement = 6;
  evaluate_policy(recorder, 1, 1, 2, 3, cfg);
  EXPECT_EQ(lengths, (std::vector<std::size_t>{1, 3, 5}));
  EXPECT_FALSE(has_prev[0]);
  EXPECT_TRUE(has_prev[1]);
}

TEST(Eval, ThrowingOrEmptyPolicyIsAFailedTrial) {
  auto thrower = [](const TaskSpec&, std::uint64_t) -> Policy {
    return [](const std::string&, std::span<const HistoryStep>) -> std::vector<Action> { throw Error("boom"); };
  };
  auto empty = [](const TaskSpec&, std::uint64_t) -> Policy {
    return [](const std::string&, std::span<const HistoryStep>) { return std::vector<Action>{}; };
  };
  EXPECT_TRUE(evaluate_policy(thrower, 1, 1, 2, 0).trials[0].policy_error);
  EXPECT_TRUE(evaluate_policy(empty, 1, 1, 2, 0).trials[0].policy_error);
  EXPECT_THROW(run_trial(random_policy(0), TaskSpec{{{0, 0}}}, 0, 0), InvalidInput);
}

TEST(Eval, Deterministic) {
  auto make = [](const TaskSpec&, std::uint64_t s) { return random_policy(s); };
  const auto a = evaluate_policy(make, 2, 5, 3, 44);
  const auto b = evaluate_policy(make, 2, 5, 3, 44);
  for (std::size_t i = 0; i < a.trials.size(); ++i) {
    EXPECT_EQ(a.trials[i].steps, b.trials[i].steps);
    EXPECT_EQ(a.trials[i].success, b.trials[i].success);
  }
}

TEST(Render, SizesAndPalette) {
  const auto s = reset(TaskSpec{{{2, 1}}}, 9);
  const auto img = render(s);
  EXPECT_EQ(img.height, 32);
  EXPECT_EQ(img.width, 32);
  const auto count = [&](std::uint8_t v) { return std::count(img.pixels.begin(), img.pixels.end(), v); };
  EXPECT_EQ(count(block_pixel(2)), 9);
  EXPECT_EQ(count(pad_pixel(1)), 5);
  EXPECT_GT(count(kGripperOpen), 0);
}
