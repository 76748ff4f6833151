#pragma once

// End-to-end desk pipeline and the experiment drivers built on it:
// demonstrations -> keysteps -> filter -> codecs -> sequences -> two-stage
// training -> closed-loop evaluation.

#include <algorithm>
#include <chrono>
#include <functional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "keyplan/config.hpp"
#include "keyplan/filter.hpp"
#include "keyplan/keystep.hpp"
#include "keyplan/policy.hpp"
#include "keyplan/report.hpp"
#include "keyplan/sequence.hpp"
#include "keyplan/sim.hpp"
#include "keyplan/token_space.hpp"
#include "keyplan/train.hpp"

namespace keyplan {

using LogFn = std::function<void(const std::string&)>;

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

/// The rows write_keystep_csv would emit, without going through text.
inline std::vector<KeystepRow> keystep_rows(const std::vector<Episode>& episodes, const std::vector<KeystepSet>& sets) {
  std::vector<KeystepRow> rows;
  int row = 0;
  for (std::size_t e = 0; e < sets.size(); ++e)
    for (const auto& c : sets[e].candidates)
      rows.push_back({sets[e].episode_id, row++, c.timestep,
                      episodes.at(e).observations.at(static_cast<std::size_t>(c.timestep)).frame_id, c.source,
                      c.speed_ema, c.gripper_state});
  return rows;
}

/// "stub" compares frames locally; "remote" posts each request to the
/// service named by KEYPLAN_FILTER_ENDPOINT.
inline FilterResponse run_filter(const std::vector<Episode>& episodes, const std::vector<KeystepRow>& rows,
                                 const std::string& mode, double threshold) {
  std::vector<FilterResponse> parts;
  if (mode == "stub") {
    for (const auto& req : filter_requests(episodes, rows)) parts.push_back(filter_stub(req, threshold));
  } else if (mode == "remote") {
    const auto rc = RemoteFilterConfig::from_env();
    for (const auto& req : filter_requests(episodes, rows)) parts.push_back(filter_remote(req, rc));
  } else {
    throw InvalidInput("filter.mode must be 'stub' or 'remote', got '" + mode + "'");
  }
  return merge_responses(parts);
}

inline std::vector<KeystepRow> kept_rows(const std::vector<KeystepRow>& rows, const FilterResponse& resp) {
  const std::set<int> kept(resp.kept_rows.begin(), resp.kept_rows.end());
  std::vector<KeystepRow> out;
  for (const auto& r : rows)
    if (kept.count(r.row_index)) out.push_back(r);
  return out;
}

inline std::vector<Episode> episodes_of(const std::vector<sim::ExpertRun>& runs) {
  std::vector<Episode> out;
  out.reserve(runs.size());
  for (const auto& r : runs) out.push_back(r.episode);
  return out;
}

/// Extracts keysteps and applies the configured filter.
inline std::vector<KeystepSet> curated_keysteps(const std::vector<Episode>& episodes, const RunConfig& cfg) {
  const auto ex = cfg.extractor();
  std::vector<KeystepSet> sets;
  sets.reserve(episodes.size());
  for (const auto& ep : episodes) sets.push_back(extract_keysteps(ep, ex));
  const auto rows = keystep_rows(episodes, sets);
  const auto resp = run_filter(episodes, rows, cfg.str("filter.mode"), cfg.real("filter.threshold"));
  return keysteps_from_rows(episodes, kept_rows(rows, resp));
}

inline std::vector<TrainingSequence> planner_samples(const std::vector<Episode>& episodes,
                                                     const std::vector<KeystepSet>& sets, const BuildConfig& bc,
                                                     const TokenSpace& ts) {
  std::vector<TrainingSequence> out;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    if (sets[i].candidates.empty()) continue;
    auto s = build_planner_samples(episodes[i], sets[i], bc, ts);
    out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  return out;
}

inline std::vector<TrainingSequence> policy_samples(const std::vector<Episode>& episodes, const BuildConfig& bc,
                                                    const TokenSpace& ts) {
  std::vector<TrainingSequence> out;
  for (const auto& ep : episodes) {
    auto s = build_policy_samples(ep, bc, ts);
    out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  return out;
}

struct PreparedData {
  std::vector<Episode> episodes;
  std::vector<KeystepSet> keysteps;
  TokenSpace ts;
  BuildConfig build;
  std::vector<TrainingSequence> planner;
  std::vector<TrainingSequence> policy;
};

inline PreparedData prepare_data(const RunConfig& cfg, const LogFn& log = {}) {
  Stopwatch sw;
  PreparedData d;
  const auto simcfg = cfg.sim();
  d.episodes = episodes_of(sim::generate_demos(cfg.i32("data.episodes"), cfg.i32("data.placements"),
                                               cfg.real("data.sigma"), cfg.u64("data.seed"), simcfg));
  d.keysteps = curated_keysteps(d.episodes, cfg);
  d.ts = fit_token_space(d.episodes, cfg.codecs());
  d.build = cfg.build();
  d.build.check_codec(d.ts);
  d.planner = planner_samples(d.episodes, d.keysteps, d.build, d.ts);
  d.policy = policy_samples(d.episodes, d.build, d.ts);
  if (log)
    log("prepared " + std::to_string(d.episodes.size()) + " episodes, " + std::to_string(d.planner.size()) +
        " planner and " + std::to_string(d.policy.size()) + " policy samples in " + fmt_num(sw.seconds(), 1) + "s");
  return d;
}

/// Loss records go to `metrics` as JSONL tagged with `run_id`.
inline TrainHooks metric_hooks(std::ostream* metrics, const std::string& run_id, const LogFn& log = {}) {
  TrainHooks h;
  h.on_metric = [metrics, run_id, log](const MetricRecord& r) {
    if (metrics) *metrics << metric_json(r, run_id) << '\n';
    if (log && (r.step % 100 == 0)) log(run_id + " " + to_string(r.stage) + " step " + std::to_string(r.step) +
                                        " loss " + fmt_num(r.loss));
  };
  return h;
}

/// `planner_out`, when given, receives a copy of the Stage-1 model.
inline Model<float> train_pipeline(const PreparedData& d, const RunConfig& cfg, const TrainHooks& stage1_hooks = {},
                                   const TrainHooks& stage2_hooks = {}, Model<float>* planner_out = nullptr) {
  const auto mc = cfg.model(d.ts.vocab_size());
  if (cfg.boolean("train.from_scratch")) {
    Model<float> init(mc);
    init.init(cfg.u64("run.seed"));
    return train_stage2(std::move(init), d.policy, cfg.train(Stage::Policy), d.ts, stage2_hooks);
  }
  auto m = train_stage1(d.planner, mc, cfg.train(Stage::Planner), d.ts, stage1_hooks);
  if (planner_out) *planner_out = m;
  return train_stage2(std::move(m), d.policy, cfg.train(Stage::Policy), d.ts, stage2_hooks);
}

inline sim::EvalSummary evaluate_model(const Model<float>& model, const TokenSpace& ts, const RunConfig& cfg,
                                       int history) {
  return sim::evaluate_policy([&](const sim::TaskSpec&, std::uint64_t) { return model_policy(model, ts, history); },
                              cfg.i32("eval.placements"), cfg.i32("eval.trials"), cfg.i32("eval.exec_k"),
                              cfg.u64("eval.seed"), cfg.sim());
}

struct PlannerFidelity {
  int samples = 0;
  long tokens = 0;
  long correct = 0;
  double accuracy() const { return tokens > 0 ? static_cast<double>(correct) / static_cast<double>(tokens) : 0.0; }
};

/// Greedy rollout of every planner sample; compares generated and target
/// vision tokens position by position.
inline PlannerFidelity planner_fidelity(const Model<float>& model, const TokenSpace& ts,
                                        const std::vector<TrainingSequence>& samples) {
  PlannerFidelity f;
  for (const auto& s : samples) {
    const std::size_t first = s.first_masked();
    const int n = static_cast<int>(s.masked_count());
    const std::span<const int> prefix(s.tokens.data(), first);
    const auto out = planner_rollout(model, ts, prefix, n);
    for (int i = 0; i < n; ++i) {
      ++f.tokens;
      f.correct += (i < static_cast<int>(out.size()) && out[static_cast<std::size_t>(i)] == s.tokens[first + i]) ? 1 : 0;
    }
    ++f.samples;
  }
  return f;
}

/// Planner samples from fresh demonstrations (seeds disjoint from training).
inline std::vector<TrainingSequence> heldout_planner_samples(const RunConfig& cfg, const TokenSpace& ts, int episodes,
                                                             std::uint64_t seed) {
  const auto eps = episodes_of(
      sim::generate_demos(episodes, cfg.i32("data.placements"), cfg.real("data.sigma"), seed, cfg.sim()));
  auto bc = cfg.build();
  bc.slide = 1;
  return planner_samples(eps, curated_keysteps(eps, cfg), bc, ts);
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

struct MatchCount {
  int hits = 0;
  int total = 0;
  double rate() const { return total > 0 ? static_cast<double>(hits) / total : 1.0; }
};

/// Extraction quality against the simulator's event log. A grasp or release
/// at t_e is recalled by a grip candidate in [t_e, t_e + settle + 2]; an align
/// event by any candidate within `window` steps. Precision counts grip
/// candidates near some contact event and turn candidates near some align event.
struct ExtractionQuality {
  MatchCount grip_recall, grip_precision, align_recall, align_precision;
};

inline ExtractionQuality extraction_quality(const std::vector<sim::ExpertRun>& runs, const std::vector<KeystepSet>& sets,
                                            const ExtractorConfig& cfg) {
  if (runs.size() != sets.size()) throw InvalidInput("extraction_quality: runs and keystep sets differ in count");
  ExtractionQuality q;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& ev = runs[i].events;
    const auto& cands = sets[i].candidates;
    std::vector<int> contact = ev.grasp_times;
    contact.insert(contact.end(), ev.release_times.begin(), ev.release_times.end());
    auto grip_near = [&](int e, int t) { return t >= e && t <= e + cfg.settle + 2; };
    auto align_near = [&](int e, int t) { return std::abs(t - e) <= cfg.window; };
    for (int e : contact) {
      ++q.grip_recall.total;
      q.grip_recall.hits += std::any_of(cands.begin(), cands.end(), [&](const auto& c) {
        return c.source == Source::Grip && grip_near(e, c.timestep);
      });
    }
    for (int e : ev.align_times) {
      ++q.align_recall.total;
      q.align_recall.hits +=
          std::any_of(cands.begin(), cands.end(), [&](const auto& c) { return align_near(e, c.timestep); });
    }
    for (const auto& c : cands) {
      if (c.source == Source::Grip) {
        ++q.grip_precision.total;
        q.grip_precision.hits +=
            std::any_of(contact.begin(), contact.end(), [&](int e) { return grip_near(e, c.timestep); });
      } else if (c.source == Source::Turn) {
        ++q.align_precision.total;
        q.align_precision.hits += std::any_of(ev.align_times.begin(), ev.align_times.end(),
                                              [&](int e) { return align_near(e, c.timestep); });
      }
    }
  }
  return q;
}

inline MetricsReport experiment_extraction(const RunConfig& cfg) {
  const auto runs = sim::generate_demos(cfg.i32("data.episodes"), cfg.i32("data.placements"), cfg.real("data.sigma"),
                                        cfg.u64("data.seed"), cfg.sim());
  const auto ex = cfg.extractor();
  std::vector<KeystepSet> sets;
  for (const auto& r : runs) sets.push_back(extract_keysteps(r.episode, ex));
  const auto q = extraction_quality(runs, sets, ex);
  MetricsReport rep;
  rep.title = "extraction quality against simulator events";
  rep.notes.push_back("config hash " + cfg.hash());
  const std::string run_id = "extraction-s" + cfg.str("data.seed");
  const auto seed = cfg.u64("data.seed");
  auto add = [&](const std::string& arm, const std::string& metric, const MatchCount& m) {
    rep.add_value(run_id, "extraction", arm, seed, metric, fmt_num(m.rate()));
    rep.rows.back().trials = m.total;
  };
  add("grip", "recall", q.grip_recall);
  add("grip", "precision", q.grip_precision);
  add("align", "recall", q.align_recall);
  add("align", "precision", q.align_precision);
  return rep;
}

inline constexpr const char* kHistoryReference[] = {"70.8", "71.9", "75.0"};

/// One policy per history length, identical data, budget and seeds.
inline MetricsReport experiment_history_sweep(const RunConfig& base, std::ostream* metrics, const LogFn& log = {}) {
  MetricsReport rep;
  rep.title = "history sweep: success per history length L";
  rep.notes.push_back("trend is reported, not asserted; reference values (%) for L=2/3/4 are 70.8/71.9/75.0");
  rep.notes.push_back("config hash " + base.hash());
  const auto values = base.int_list("experiment.history_values");
  const auto seed = base.u64("run.seed");
  RunConfig cfg = base;
  auto data = prepare_data(cfg, log);
  for (std::size_t idx = 0; idx < values.size(); ++idx) {
    const int L = values[idx];
    const std::string run_id = "history-L" + std::to_string(L) + "-s" + std::to_string(seed);
    try {
      cfg.set("build.history", std::to_string(L));
      data.build = cfg.build();
      data.policy = policy_samples(data.episodes, data.build, data.ts);
      data.planner = planner_samples(data.episodes, data.keysteps, data.build, data.ts);
      const auto model = train_pipeline(data, cfg, metric_hooks(metrics, run_id, log), metric_hooks(metrics, run_id, log));
      const auto sum = evaluate_model(model, data.ts, cfg, L);
      rep.add_success(run_id, "history", "L=" + std::to_string(L), seed, sum.successes,
                      static_cast<int>(sum.trials.size()), idx < 3 && L == static_cast<int>(idx) + 2 ? kHistoryReference[idx] : "");
      if (log) log(run_id + " success " + std::to_string(sum.successes) + "/" + std::to_string(sum.trials.size()));
    } catch (const std::exception& e) {
      rep.complete = false;
      rep.add_value(run_id, "history", "L=" + std::to_string(L), seed, "error", e.what());
    }
  }
  return rep;
}

/// Two-stage training vs policy-only training from random init under the
/// same total step budget; success is evaluated every `experiment.eval_every`
/// policy steps and the first step at or above the threshold is reported.
inline MetricsReport experiment_efficiency(const RunConfig& base, std::ostream* metrics, const LogFn& log = {}) {
  MetricsReport rep;
  const double threshold = base.real("experiment.threshold");
  rep.title = "efficiency: policy steps to reach " + fmt_num(100.0 * threshold, 0) + "% toy success";
  rep.notes.push_back("success threshold " + fmt_num(threshold, 2) + " on single-placement trials");
  rep.notes.push_back("reference: two-stage peaks at 10k steps vs 12k/50k for the baselines; trend not asserted");
  rep.notes.push_back("config hash " + base.hash());
  const auto seed = base.u64("run.seed");
  const int s1 = base.i32("train.stage1_steps"), s2 = base.i32("train.stage2_steps");
  const int every = base.i32("experiment.eval_every");
  if (every < 1) throw InvalidInput("experiment.eval_every must be >= 1");
  const auto data = prepare_data(base, log);
  const int H = data.build.history;

  struct ArmSpec {
    std::string name;
    bool scratch;
    int policy_steps;
    std::string reference;
  };
  const std::vector<ArmSpec> arms{{"two-stage", false, s2, "10k"}, {"from-scratch", true, s1 + s2, "12k/50k"}};
  for (const auto& arm : arms) {
    const std::string run_id = "efficiency-" + arm.name + "-s" + std::to_string(seed);
    RunConfig cfg = base;
    cfg.set("train.from_scratch", arm.scratch ? "true" : "false");
    cfg.set("train.stage2_steps", std::to_string(arm.policy_steps));
    std::optional<int> reached;
    int last_succ = 0, last_trials = 0;
    auto h2 = metric_hooks(metrics, run_id, log);
    for (int s = every; s <= arm.policy_steps; s += every) h2.checkpoint_steps.push_back(s);
    if (h2.checkpoint_steps.empty() || h2.checkpoint_steps.back() != arm.policy_steps)
      h2.checkpoint_steps.push_back(arm.policy_steps);
    h2.on_checkpoint = [&](int step, const Model<float>& m) {
      const auto sum = evaluate_model(m, data.ts, cfg, H);
      last_succ = sum.successes;
      last_trials = static_cast<int>(sum.trials.size());
      rep.add_success(run_id, "efficiency", arm.name + "@" + std::to_string(step), seed, sum.successes, last_trials);
      if (!reached && sum.success_rate >= threshold) reached = step;
      if (log) log(run_id + " step " + std::to_string(step) + " success " + std::to_string(sum.successes) + "/" +
                   std::to_string(last_trials));
    };
    try {
      train_pipeline(data, cfg, metric_hooks(metrics, run_id, log), h2);
      rep.add_value(run_id, "efficiency", arm.name, seed, "steps_to_threshold",
                    reached ? std::to_string(*reached) : ">budget", arm.reference);
      rep.add_value(run_id, "efficiency", arm.name, seed, "stage1_steps", arm.scratch ? "0" : std::to_string(s1));
      rep.add_success(run_id, "efficiency", arm.name, seed, last_succ, last_trials);
    } catch (const std::exception& e) {
      rep.complete = false;
      rep.add_value(run_id, "efficiency", arm.name, seed, "error", e.what());
    }
  }
  return rep;
}

}  // namespace keyplan
